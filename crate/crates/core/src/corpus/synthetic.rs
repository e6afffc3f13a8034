//! Planted-keyword classification data.
//!
//! Each class owns a set of keywords. An example is a run of filler words with
//! a few keywords from its class mixed in; with probability `noise` one of
//! those keywords is taken from a different class instead.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledExample, TaskSpec};
use crate::error::{Error, Result};

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable word for `index`, e.g. `0 -> "bababa"`.
pub fn pseudo_word(index: usize) -> String {
    let syllables = ONSETS.len() * NUCLEI.len();
    let mut i = index;
    let mut word = String::new();
    for _ in 0..3 {
        let s = i % syllables;
        word.push_str(ONSETS[s / NUCLEI.len()]);
        word.push_str(NUCLEI[s % NUCLEI.len()]);
        i /= syllables;
    }
    word
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub keywords_per_example: usize,
    pub noise: f64,
    pub pool_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            keywords_per_class: 4,
            filler_words: 20,
            min_len: 5,
            max_len: 9,
            keywords_per_example: 3,
            noise: 0.0,
            pool_size: 400,
            test_size: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub keywords: Vec<Vec<String>>,
    pub fillers: Vec<String>,
    pub pool: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl SyntheticTask {
    pub fn vocabulary_size(&self) -> usize {
        self.keywords.iter().map(Vec::len).sum::<usize>() + self.fillers.len()
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticTask> {
    let c = config;
    if c.num_classes < 2 || c.keywords_per_class == 0 || c.filler_words == 0 {
        return Err(Error::Config(
            "synthetic task needs ≥2 classes, keywords and fillers".into(),
        ));
    }
    if c.min_len == 0 || c.min_len > c.max_len || c.keywords_per_example > c.min_len {
        return Err(Error::Config("invalid synthetic length bounds".into()));
    }
    if !(0.0..=1.0).contains(&c.noise) {
        return Err(Error::Config("noise must lie in [0, 1]".into()));
    }
    let names: Vec<String> = (0..c.num_classes).map(|k| format!("class{k}")).collect();
    let spec = TaskSpec::new("synthetic", names, 1, super::Metric::Accuracy, None)?;
    let mut next = 0;
    let mut take = |n: usize| {
        let words: Vec<String> = (next..next + n).map(pseudo_word).collect();
        next += n;
        words
    };
    let keywords: Vec<Vec<String>> = (0..c.num_classes)
        .map(|_| take(c.keywords_per_class))
        .collect();
    let fillers = take(c.filler_words);

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut make = |prefix: &str, n: usize| -> Vec<LabeledExample> {
        (0..n)
            .map(|i| {
                let label = i % c.num_classes;
                let len = rng.gen_range(c.min_len..=c.max_len);
                let mut words: Vec<&str> = (0..len - c.keywords_per_example)
                    .map(|_| fillers.choose(&mut rng).unwrap().as_str())
                    .collect();
                for _ in 0..c.keywords_per_example {
                    let class = if rng.gen::<f64>() < c.noise {
                        let other = rng.gen_range(0..c.num_classes - 1);
                        if other >= label {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        label
                    };
                    let pos = rng.gen_range(0..=words.len());
                    words.insert(pos, keywords[class].choose(&mut rng).unwrap());
                }
                LabeledExample::new(format!("{prefix}{i:05}"), words.join(" "), label)
            })
            .collect()
    };
    let pool = make("pool", c.pool_size);
    let test = make("test", c.test_size);
    Ok(SyntheticTask {
        spec,
        keywords,
        fillers,
        pool,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_words_are_distinct_and_alphabetic() {
        let words: Vec<String> = (0..500).map(pseudo_word).collect();
        let set: std::collections::HashSet<_> = words.iter().collect();
        assert_eq!(set.len(), words.len());
        assert!(words
            .iter()
            .all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn generated_task_is_balanced_and_small() {
        let task = generate(&SyntheticConfig::default()).unwrap();
        assert!(task.vocabulary_size() <= 200);
        let ones = task.pool.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones * 2, task.pool.len());
        let again = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(task.pool, again.pool);
        for e in &task.pool {
            let kw = e
                .text_a
                .split(' ')
                .filter(|w| task.keywords.iter().any(|k| k.iter().any(|x| x == w)))
                .count();
            assert_eq!(kw, 3);
        }
    }
}
