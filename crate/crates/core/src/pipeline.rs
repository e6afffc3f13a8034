//! Ties task data, template, verbalizer and tokenizer together, and turns
//! few-shot splits into assembled inputs.

use serde::{Deserialize, Serialize};

use crate::corpus::{random_label_corruption, FewShotSplit, LabeledExample, TaskSpec};
use crate::error::{Error, Result};
use crate::retrieval::{EncodedPool, HashedBowEncoder, Selector, SentenceEncoder};
use crate::templating::{assemble_input, render_prompt, EncodedInput, Template, Verbalizer};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Gold,
    /// Demonstration labels resampled uniformly (queries keep gold labels).
    #[serde(alias = "corrupted")]
    Random,
}

/// Immutable experiment inputs shared by every run.
pub struct Experiment {
    pub task: TaskSpec,
    pub template: Template,
    pub verbalizer: Verbalizer,
    pub tokenizer: Tokenizer,
    /// Labeled pool few-shot splits are drawn from.
    pub pool: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub encoder: Box<dyn SentenceEncoder + Send>,
}

impl Experiment {
    /// Builds the vocabulary from every text the model can see.
    pub fn new(
        task: TaskSpec,
        template: Template,
        verbalizer_words: Vec<String>,
        pool: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
    ) -> Result<Self> {
        task.validate()?;
        template.validate_for(&task)?;
        if verbalizer_words.len() != task.num_classes() {
            return Err(Error::Verbalizer(format!(
                "{} label words for {} classes",
                verbalizer_words.len(),
                task.num_classes()
            )));
        }
        let literal = template.literal_text();
        let words_text = verbalizer_words.join(" ");
        let texts = pool
            .iter()
            .chain(&test)
            .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
            .chain([literal.as_str(), words_text.as_str()]);
        let tokenizer = Tokenizer::build(texts);
        let verbalizer = Verbalizer::new(verbalizer_words, &tokenizer)?;
        Ok(Self {
            task,
            template,
            verbalizer,
            tokenizer,
            pool,
            test,
            encoder: Box::new(HashedBowEncoder::default()),
        })
    }

    pub fn with_encoder(mut self, encoder: Box<dyn SentenceEncoder + Send>) -> Self {
        self.encoder = encoder;
        self
    }

    /// Assembles each query against demonstrations drawn from `demo_pool`.
    pub fn assemble(
        &self,
        queries: &[LabeledExample],
        demo_pool: &[LabeledExample],
        selector: Selector,
        seed: u64,
        max_length: usize,
    ) -> Result<Vec<EncodedInput>> {
        let pool = EncodedPool::new(demo_pool, self.task.num_classes(), self.encoder.as_ref());
        let demos = pool.select_all(queries, selector, self.encoder.as_ref(), seed)?;
        crate::parallel::map_range(queries.len(), |i| {
            let prompt = render_prompt(&queries[i], &self.template, &self.tokenizer)?;
            assemble_input(
                &prompt,
                &demos[i],
                &self.verbalizer,
                &self.template,
                &self.tokenizer,
                max_length,
            )
        })
        .into_iter()
        .collect()
    }

    /// Assembles train, dev and test inputs. The demonstration pool is the
    /// train split, label-corrupted with `seed` in [`LabelMode::Random`].
    pub fn prepare(
        &self,
        split: &FewShotSplit,
        selector: Selector,
        label_mode: LabelMode,
        seed: u64,
        max_length: usize,
    ) -> Result<PreparedSplit> {
        let demo_pool = match label_mode {
            LabelMode::Gold => split.train.clone(),
            LabelMode::Random => random_label_corruption(&split.train, &self.task, seed),
        };
        Ok(PreparedSplit {
            train: self.assemble(&split.train, &demo_pool, selector, seed, max_length)?,
            dev: self.assemble(&split.dev, &demo_pool, selector, seed, max_length)?,
            test: self.assemble(&split.test, &demo_pool, selector, seed, max_length)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub train: Vec<EncodedInput>,
    pub dev: Vec<EncodedInput>,
    pub test: Vec<EncodedInput>,
}

impl PreparedSplit {
    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .map(EncodedInput::len)
            .max()
            .unwrap_or(0)
    }
}
