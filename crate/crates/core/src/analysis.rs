//! Prediction, metrics, the random-label ablation and the attention probe.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMaps, Backbone};
use crate::corpus::Metric;
use crate::error::{Error, Result};
use crate::parallel;
use crate::pipeline::{Experiment, LabelMode};
use crate::templating::{EncodedInput, Verbalizer};
use crate::training::{format_mean_spread, multi_seed_run, MultiSeedReport, TrainConfig};

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Verbalizer-word logits at the mask position.
pub fn class_logits(
    backbone: &Backbone,
    input: &EncodedInput,
    verbalizer: &Verbalizer,
) -> Result<Vec<f64>> {
    let enc = backbone.encode(&input.token_ids, None)?;
    let logits = backbone.mlm_logits(enc.hidden.row(input.mask_position))?;
    Ok(verbalizer
        .token_ids()
        .iter()
        .map(|&t| logits[t as usize])
        .collect())
}

/// Predicted class at the mask: argmax over the verbalizer words, ties to the
/// smallest class index.
pub fn predict(
    backbone: &Backbone,
    input: &EncodedInput,
    verbalizer: &Verbalizer,
) -> Result<usize> {
    let logits = class_logits(backbone, input, verbalizer)?;
    argmax(&logits).ok_or_else(|| Error::Verbalizer("empty verbalizer".into()))
}

pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// F1 on `positive`. A zero precision or recall denominator counts as 0.
pub fn binary_f1(predictions: &[usize], gold: &[usize], positive: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

pub fn score(
    metric: Metric,
    positive: Option<usize>,
    predictions: &[usize],
    gold: &[usize],
) -> Result<f64> {
    match metric {
        Metric::Accuracy => accuracy(predictions, gold),
        Metric::BinaryF1 => {
            let pos = positive
                .ok_or_else(|| Error::Evaluation("binary F1 needs a positive class".into()))?;
            binary_f1(predictions, gold, pos)
        }
    }
}

pub fn predict_all(
    backbone: &Backbone,
    inputs: &[EncodedInput],
    verbalizer: &Verbalizer,
) -> Result<Vec<usize>> {
    parallel::map(inputs, |x| predict(backbone, x, verbalizer))
        .into_iter()
        .collect()
}

/// Metric value in `[0, 1]` over `inputs`.
pub fn evaluate(
    backbone: &Backbone,
    inputs: &[EncodedInput],
    verbalizer: &Verbalizer,
    metric: Metric,
    positive: Option<usize>,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Evaluation("empty split".into()));
    }
    let predictions = predict_all(backbone, inputs, verbalizer)?;
    let gold: Vec<usize> = inputs.iter().map(|x| x.gold_label).collect();
    score(metric, positive, &predictions, &gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub gold: MultiSeedReport,
    pub corrupted: MultiSeedReport,
    /// Gold minus corrupted mean test metric, in points.
    pub delta: Option<f64>,
}

impl AblationReport {
    pub fn table(&self, task: &str) -> String {
        let cell = |r: &MultiSeedReport| r.test.map_or("n/a".to_string(), |a| a.to_string());
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<14} {:<14} delta", "task", "gold", "random");
        let _ = writeln!(
            out,
            "{:<16} {:<14} {:<14} {}",
            task,
            cell(&self.gold),
            cell(&self.corrupted),
            self.delta.map_or("n/a".to_string(), |d| format!("{d:.1}"))
        );
        out
    }
}

/// Trains with gold and with corrupted demonstration labels on the same seeds.
pub fn ablate_random_labels(
    experiment: &Experiment,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let with_mode = |mode| TrainConfig {
        label_mode: mode,
        ..config.clone()
    };
    let gold = multi_seed_run(experiment, &with_mode(LabelMode::Gold), seeds)?;
    let corrupted = multi_seed_run(experiment, &with_mode(LabelMode::Random), seeds)?;
    let delta = match (gold.test, corrupted.test) {
        (Some(g), Some(c)) => Some(g.mean - c.mean),
        _ => None,
    };
    Ok(AblationReport {
        gold,
        corrupted,
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Queries in demonstration spans, keys in the prompt span.
    #[default]
    DemoToPrompt,
    PromptToDemo,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::DemoToPrompt, Direction::PromptToDemo];

    pub fn label(self) -> &'static str {
        match self {
            Direction::DemoToPrompt => "demo->prompt",
            Direction::PromptToDemo => "prompt->demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub raw_mass: f64,
    pub baseline_mass: f64,
    /// `raw_mass / baseline_mass`; absent when the baseline mass is zero.
    pub normalized: Option<f64>,
    pub direction: Direction,
}

/// Positions of all demonstration tokens (contexts and label words).
pub fn demo_positions(input: &EncodedInput) -> Vec<usize> {
    let mut out: Vec<usize> = input
        .demo_context_spans
        .iter()
        .flat_map(|s| s.positions())
        .chain(input.demo_label_positions.iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Mean over layers and heads of the per-pair attention mass from `queries`
/// to `keys`.
pub fn span_mass(maps: &AttentionMaps, queries: &[usize], keys: &[usize]) -> Result<f64> {
    if queries.is_empty() || keys.is_empty() {
        return Err(Error::Span("attention probe needs non-empty spans".into()));
    }
    let pairs = (queries.len() * keys.len()) as f64;
    let mut total = 0.0;
    let mut heads = 0usize;
    for layer in maps {
        for att in layer {
            let mut s = 0.0;
            for &q in queries {
                for &k in keys {
                    s += att.get(q, k);
                }
            }
            total += s / pairs;
            heads += 1;
        }
    }
    if heads == 0 {
        return Err(Error::Config("backbone has no attention heads".into()));
    }
    Ok(total / heads as f64)
}

fn input_mass(backbone: &Backbone, input: &EncodedInput, direction: Direction) -> Result<f64> {
    let enc = backbone.encode(&input.token_ids, None)?;
    let prompt = input.prompt_span.positions();
    let demos = demo_positions(input);
    match direction {
        Direction::DemoToPrompt => span_mass(&enc.attentions, &demos, &prompt),
        Direction::PromptToDemo => span_mass(&enc.attentions, &prompt, &demos),
    }
}

/// Mean attention mass over `inputs` in the given direction.
pub fn mean_attention_mass(
    backbone: &Backbone,
    inputs: &[EncodedInput],
    direction: Direction,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Evaluation(
            "attention probe needs at least one input".into(),
        ));
    }
    let masses = parallel::map(inputs, |x| input_mass(backbone, x, direction))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(masses.iter().sum::<f64>() / masses.len() as f64)
}

pub fn attention_probe(
    model: &Backbone,
    baseline: &Backbone,
    inputs: &[EncodedInput],
    direction: Direction,
) -> Result<AttentionReport> {
    if model.config().layers != baseline.config().layers
        || model.config().heads != baseline.config().heads
        || model.config().hidden != baseline.config().hidden
    {
        return Err(Error::Config("model and baseline differ in shape".into()));
    }
    let raw_mass = mean_attention_mass(model, inputs, direction)?;
    let baseline_mass = if model.params() == baseline.params() {
        raw_mass
    } else {
        mean_attention_mass(baseline, inputs, direction)?
    };
    Ok(AttentionReport {
        raw_mass,
        baseline_mass,
        normalized: (baseline_mass > 0.0).then(|| raw_mass / baseline_mass),
        direction,
    })
}

/// One row per report: `task  direction  raw  baseline  normalized`.
pub fn probe_table(rows: &[(String, AttentionReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<14} {:>10} {:>10} {:>10}",
        "task", "direction", "raw", "baseline", "normalized"
    );
    for (task, r) in rows {
        let _ = writeln!(
            out,
            "{:<16} {:<14} {:>10.6} {:>10.6} {:>10}",
            task,
            r.direction.label(),
            r.raw_mass,
            r.baseline_mass,
            r.normalized
                .map_or("n/a".to_string(), |v| format!("{v:.2}"))
        );
    }
    out
}

/// `name  mean (variance)` rows.
pub fn results_table(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::new();
    for (name, mean, var) in rows {
        let _ = writeln!(out, "{:<48} {}", name, format_mean_spread(*mean, *var));
    }
    out
}
