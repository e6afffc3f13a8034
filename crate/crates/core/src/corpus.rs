//! Task metadata, dataset files, seeded few-shot sampling and label corruption.
//!
//! Every seeded operation draws from `ChaCha8Rng::seed_from_u64(seed)`, so
//! splits are reproducible across platforms and implementations that use the
//! same generator.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    BinaryF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub class_names: Vec<String>,
    pub input_arity: usize,
    pub metric: Metric,
    pub positive_class_index: Option<usize>,
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        input_arity: usize,
        metric: Metric,
        positive_class_index: Option<usize>,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            class_names,
            input_arity,
            metric,
            positive_class_index,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Single-sentence accuracy task with the given class names.
    pub fn classification(name: &str, classes: &[&str]) -> Result<Self> {
        Self::new(
            name,
            classes.iter().map(|c| c.to_string()).collect(),
            1,
            Metric::Accuracy,
            None,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        if k < 2 {
            return Err(Error::Task(format!("need at least 2 classes, got {k}")));
        }
        let distinct: HashSet<&String> = self.class_names.iter().collect();
        if distinct.len() != k {
            return Err(Error::Task("class names must be distinct".into()));
        }
        if !(1..=2).contains(&self.input_arity) {
            return Err(Error::Task(format!(
                "input arity must be 1 or 2, got {}",
                self.input_arity
            )));
        }
        match (self.metric, self.positive_class_index) {
            (Metric::BinaryF1, None) => {
                return Err(Error::Task("binary_f1 requires a positive class".into()))
            }
            (_, Some(p)) if p >= k => {
                return Err(Error::Task(format!("positive class {p} out of range")))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, text_a: impl Into<String>, label: usize) -> Self {
        Self {
            id: id.into(),
            text_a: text_a.into(),
            text_b: None,
            label,
        }
    }

    pub fn pair(
        id: impl Into<String>,
        text_a: impl Into<String>,
        text_b: impl Into<String>,
        label: usize,
    ) -> Self {
        Self {
            id: id.into(),
            text_a: text_a.into(),
            text_b: Some(text_b.into()),
            label,
        }
    }

    /// Raw input text without any template: `text_a` plus `text_b` if present.
    pub fn raw_text(&self) -> String {
        match &self.text_b {
            Some(b) => format!("{} {}", self.text_a, b),
            None => self.text_a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
}

pub fn load_dataset(path: &Path, spec: &TaskSpec) -> Result<Vec<LabeledExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, spec).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

/// Parses the tab-separated dataset format. Line numbers in errors are 1-based.
pub fn parse_dataset(text: &str, spec: &TaskSpec) -> Result<Vec<LabeledExample>> {
    let expected_cols = spec.input_arity + 2;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if std::mem::take(&mut first) && fields[0] == "id" {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: Default::default(),
            line: line_no,
            message,
        };
        if fields.len() != expected_cols {
            return Err(parse_err(format!(
                "expected {expected_cols} tab-separated columns, found {}",
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(parse_err(format!("empty or duplicate id `{id}`")));
        }
        let text_a = fields[1].to_string();
        if text_a.trim().is_empty() {
            return Err(parse_err("empty text_a".into()));
        }
        let text_b = (spec.input_arity == 2).then(|| fields[2].to_string());
        let label_name = fields[expected_cols - 1].trim();
        let label = spec
            .class_index(label_name)
            .ok_or_else(|| Error::UnknownLabel {
                label: label_name.to_string(),
                line: line_no,
            })?;
        out.push(LabeledExample {
            id,
            text_a,
            text_b,
            label,
        });
    }
    Ok(out)
}

pub fn format_dataset(examples: &[LabeledExample], spec: &TaskSpec) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let label = spec
            .class_names
            .get(ex.label)
            .ok_or_else(|| Error::Task(format!("label {} out of range for {}", ex.label, ex.id)))?;
        let mut fields = vec![ex.id.as_str(), ex.text_a.as_str()];
        if spec.input_arity == 2 {
            fields.push(ex.text_b.as_deref().unwrap_or(""));
        }
        fields.push(label);
        if fields.iter().any(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(Error::Task(format!(
                "example {} contains a tab or newline",
                ex.id
            )));
        }
        let _ = writeln!(out, "{}", fields.join("\t"));
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, examples: &[LabeledExample], spec: &TaskSpec) -> Result<()> {
    let text = format_dataset(examples, spec)?;
    crate::io::write_atomic(path, text.as_bytes())
}

/// Seeded few-shot sampling: `shots_per_class` train and dev examples per
/// class, without replacement. The returned split has an empty test set.
pub fn sample_few_shot(
    pool: &[LabeledExample],
    spec: &TaskSpec,
    shots_per_class: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    if shots_per_class == 0 {
        return Err(Error::Config("shots_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (class, name) in spec.class_names.iter().enumerate() {
        let mut members: Vec<&LabeledExample> = pool.iter().filter(|e| e.label == class).collect();
        if members.len() < 2 * shots_per_class {
            return Err(Error::Capacity(format!(
                "class `{name}` has {} examples, need {}",
                members.len(),
                2 * shots_per_class
            )));
        }
        members.shuffle(&mut rng);
        train.extend(members[..shots_per_class].iter().map(|e| (*e).clone()));
        dev.extend(
            members[shots_per_class..2 * shots_per_class]
                .iter()
                .map(|e| (*e).clone()),
        );
    }
    Ok(FewShotSplit {
        train,
        dev,
        test: Vec::new(),
        seed,
    })
}

/// Resamples every label uniformly over the task's classes.
pub fn random_label_corruption(
    pool: &[LabeledExample],
    spec: &TaskSpec,
    seed: u64,
) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.num_classes();
    pool.iter()
        .map(|e| LabeledExample {
            label: rng.gen_range(0..k),
            ..e.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentiment() -> TaskSpec {
        TaskSpec::classification("sst", &["neg", "pos"]).unwrap()
    }

    fn pool(per_class: usize, k: usize) -> Vec<LabeledExample> {
        (0..per_class * k)
            .map(|i| LabeledExample::new(format!("e{i:04}"), format!("text {i}"), i % k))
            .collect()
    }

    #[test]
    fn loads_labels_by_class_name() {
        let text = "a\tgreat movie\tpos\nb\tawful\tneg\n";
        let got = parse_dataset(text, &sentiment()).unwrap();
        assert_eq!(got.iter().map(|e| e.label).collect::<Vec<_>>(), vec![1, 0]);
        assert_eq!(got[0].id, "a");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_dataset("", &sentiment()).unwrap().is_empty());
    }

    #[test]
    fn header_line_is_skipped() {
        let text = "id\ttext\tlabel\na\tfine\tpos\n";
        assert_eq!(parse_dataset(text, &sentiment()).unwrap().len(), 1);
    }

    #[test]
    fn wrong_column_count_names_the_line() {
        let text = "a\tok\tpos\nb\tone\ttwo\tneg\n";
        match parse_dataset(text, &sentiment()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let err = parse_dataset("a\tok\tmeh\n", &sentiment()).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { line: 1, .. }));
    }

    #[test]
    fn task_spec_invariants() {
        assert!(TaskSpec::classification("x", &["only"]).is_err());
        assert!(TaskSpec::classification("x", &["a", "a"]).is_err());
        assert!(
            TaskSpec::new("x", vec!["a".into(), "b".into()], 2, Metric::BinaryF1, None).is_err()
        );
        assert!(TaskSpec::new(
            "x",
            vec!["a".into(), "b".into()],
            1,
            Metric::BinaryF1,
            Some(2)
        )
        .is_err());
    }

    #[test]
    fn few_shot_split_counts_and_disjointness() {
        let split = sample_few_shot(&pool(100, 2), &sentiment(), 16, 13).unwrap();
        for class in 0..2 {
            assert_eq!(split.train.iter().filter(|e| e.label == class).count(), 16);
            assert_eq!(split.dev.iter().filter(|e| e.label == class).count(), 16);
        }
        let train_ids: HashSet<_> = split.train.iter().map(|e| &e.id).collect();
        assert!(split.dev.iter().all(|e| !train_ids.contains(&e.id)));
    }

    #[test]
    fn single_shot_forced_partition() {
        let split = sample_few_shot(&pool(2, 2), &sentiment(), 1, 7).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.dev.len(), 2);
        let mut all: Vec<_> = split
            .train
            .iter()
            .chain(&split.dev)
            .map(|e| e.id.clone())
            .collect();
        all.sort();
        assert_eq!(all, vec!["e0000", "e0001", "e0002", "e0003"]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = pool(40, 2);
        let a = sample_few_shot(&p, &sentiment(), 8, 42).unwrap();
        let b = sample_few_shot(&p, &sentiment(), 8, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_few_shot(&p, &sentiment(), 8, 43).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn insufficient_class_names_it() {
        let mut p = pool(20, 2);
        p.retain(|e| e.label == 1 || e.id.as_str() < "e0010");
        let err = sample_few_shot(&p, &sentiment(), 8, 1).unwrap_err();
        assert!(err.to_string().contains("neg"), "{err}");
    }

    #[test]
    fn corruption_is_roughly_uniform() {
        let corrupted = random_label_corruption(&pool(500, 2), &sentiment(), 13);
        let zeros = corrupted.iter().filter(|e| e.label == 0).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&zeros), "fraction {zeros}");
        let again = random_label_corruption(&pool(500, 2), &sentiment(), 13);
        assert_eq!(corrupted, again);
    }

    proptest! {
        #[test]
        fn corruption_preserves_ids_and_texts(n in 1usize..60, seed in any::<u64>()) {
            let p = pool(n, 2);
            let c = random_label_corruption(&p, &sentiment(), seed);
            prop_assert_eq!(c.len(), p.len());
            for (a, b) in p.iter().zip(&c) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(&a.text_a, &b.text_a);
                prop_assert!(b.label < 2);
            }
        }

        #[test]
        fn save_then_load_round_trips(
            texts in proptest::collection::vec(("[a-z]{1,8}( [a-z]{1,8}){0,4}", "[a-z ]{0,12}", 0usize..3), 0..20)
        ) {
            let spec = TaskSpec::new("pairs", vec!["x".into(), "y".into(), "z".into()], 2, Metric::Accuracy, None).unwrap();
            let examples: Vec<_> = texts.into_iter().enumerate()
                .map(|(i, (a, b, l))| LabeledExample::pair(format!("r{i}"), a, b, l))
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("data.tsv");
            save_dataset(&path, &examples, &spec).unwrap();
            prop_assert_eq!(load_dataset(&path, &spec).unwrap(), examples);
        }
    }
}
