//! Optimization loop, multi-seed runner and hyperparameter grid search.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::evaluate;
use crate::autograd::Graph;
use crate::backbone::{Backbone, BackboneConfig};
use crate::corpus::{sample_few_shot, FewShotSplit};
use crate::error::{Error, Result};
use crate::losses::{record, total_loss, LossBundle, LossWeights, ObjectiveTerms};
use crate::optim::{Adam, AdamConfig};
use crate::parallel;
use crate::pipeline::{Experiment, LabelMode, PreparedSplit};
use crate::retrieval::Selector;
use crate::templating::{EncodedInput, Verbalizer};
use crate::tensor::Matrix;

/// The seeds used for every reported multi-seed result.
pub const DEFAULT_SEEDS: [u64; 5] = [13, 32, 42, 87, 100];

/// Backbone size knobs; vocabulary size and max length come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneShape {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for BackboneShape {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 2,
            heads: 4,
            ff: 64,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub terms: ObjectiveTerms,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub max_length: usize,
    pub shots_per_class: usize,
    pub selector: Selector,
    pub label_mode: LabelMode,
    pub backbone: BackboneShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            terms: ObjectiveTerms::FULL,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            max_steps: 150,
            eval_interval: 10,
            seed: 13,
            max_length: 128,
            shots_per_class: 16,
            selector: Selector::Retrieved,
            label_mode: LabelMode::Gold,
            backbone: BackboneShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.weights.validate()
    }

    /// Name of the ablation variant this configuration reproduces.
    pub fn variant_name(&self) -> &'static str {
        let label = self.terms.label && self.weights.alpha > 0.0;
        let context = self.terms.context && self.weights.beta > 0.0;
        match (label, context) {
            (false, false) => "demonstrations-only baseline",
            (true, false) => "demonstrations + label re-prediction",
            (false, true) => "demonstrations + contrastive context",
            (true, true) => "demonstrations + label re-prediction + contrastive context",
        }
    }

    pub fn backbone_config(&self, vocab_size: usize, max_len: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            hidden: self.backbone.hidden,
            layers: self.backbone.layers,
            heads: self.backbone.heads,
            ff: self.backbone.ff,
            max_len,
            dropout: self.backbone.dropout,
            init_std: self.backbone.init_std,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: LossBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_dev_metric: f64,
    pub best_step: usize,
    pub test_metric: Option<f64>,
    pub loss_curve: Vec<StepLoss>,
    pub dev_curve: Vec<(usize, f64)>,
    pub checkpoint: Option<String>,
}

/// A finished run with its selected and initial parameters.
pub struct TrainOutcome {
    pub result: RunResult,
    pub best: Backbone,
    pub initial: Backbone,
}

/// Loss values and parameter gradient of the mean loss over `batch`.
pub fn batch_gradient(
    backbone: &Backbone,
    batch: &[&EncodedInput],
    verbalizer: &Verbalizer,
    weights: &LossWeights,
    terms: ObjectiveTerms,
    dropout_seed: Option<u64>,
) -> Result<(LossBundle, Vec<Matrix>)> {
    let per_example = parallel::map_range(batch.len(), |i| -> Result<_> {
        let params = backbone.params();
        let mut g = Graph::new(params);
        let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ ((i as u64) << 32)));
        let fwd = backbone.forward(&mut g, &batch[i].token_ids, rng.as_mut())?;
        let rec = record(&mut g, backbone, &fwd, batch[i], verbalizer, weights, terms)?;
        let vals = (
            g.value(rec.mask).item(),
            rec.label.map_or(0.0, |v| g.value(v).item()),
            rec.context.map_or(0.0, |v| g.value(v).item()),
        );
        Ok((vals, g.backward(rec.total)))
    });
    let n = batch.len() as f64;
    let mut sums = (0.0, 0.0, 0.0);
    let mut grads: Option<Vec<Matrix>> = None;
    for item in per_example {
        let ((m, l, c), g) = item?;
        sums.0 += m;
        sums.1 += l;
        sums.2 += c;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let mut grads = grads.ok_or_else(|| Error::Config("empty batch".into()))?;
    grads
        .iter_mut()
        .for_each(|g| g.data.iter_mut().for_each(|v| *v /= n));
    let bundle = total_loss(sums.0 / n, sums.1 / n, sums.2 / n, weights)?;
    Ok((bundle, grads))
}

/// Trains on already-assembled inputs.
pub fn train_prepared(
    prepared: &PreparedSplit,
    config: &TrainConfig,
    experiment: &Experiment,
) -> Result<TrainOutcome> {
    config.validate()?;
    if prepared.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let max_len = config.max_length.max(prepared.max_len());
    let bb_config = config.backbone_config(experiment.tokenizer.vocab_size(), max_len);
    let mut backbone = Backbone::new(bb_config)?;
    let initial = backbone.with_params(backbone.snapshot());
    let mut optimizer = Adam::new(config.optimizer, backbone.params());
    let metric = experiment.task.metric;
    let positive = experiment.task.positive_class_index;
    let verbalizer = &experiment.verbalizer;

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fb_a7c4);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut loss_curve = Vec::with_capacity(config.max_steps);
    let mut dev_curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<Matrix>)> = None;
    let dev_inputs = if prepared.dev.is_empty() {
        &prepared.train
    } else {
        &prepared.dev
    };

    for step in 1..=config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(prepared.train.len()) {
            if cursor == order.len() {
                order = (0..prepared.train.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&prepared.train[order[cursor]]);
            cursor += 1;
        }
        let dropout_seed = (config.backbone.dropout > 0.0)
            .then(|| config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step as u64);
        let (bundle, grads) = batch_gradient(
            &backbone,
            &batch,
            verbalizer,
            &config.weights,
            config.terms,
            dropout_seed,
        )
        .map_err(|e| Error::Divergence {
            step,
            detail: e.to_string(),
        })?;
        if !grads.iter().all(Matrix::all_finite) {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite gradient; last loss {bundle:?}"),
            });
        }
        optimizer.step(backbone.params_mut(), &grads);
        loss_curve.push(StepLoss { step, loss: bundle });

        if step % config.eval_interval == 0 || step == config.max_steps {
            let dev = evaluate(&backbone, dev_inputs, verbalizer, metric, positive)?;
            dev_curve.push((step, dev));
            log::debug!(
                "seed {} step {step}: loss {:.4} dev {dev:.4}",
                config.seed,
                bundle.total
            );
            if best.as_ref().is_none_or(|(b, _, _)| dev > *b) {
                best = Some((dev, step, backbone.snapshot()));
            }
        }
    }

    let (best_dev, best_step, params) = best.expect("at least one evaluation");
    let best = backbone.with_params(params);
    let test_metric = if prepared.test.is_empty() {
        None
    } else {
        Some(evaluate(
            &best,
            &prepared.test,
            verbalizer,
            metric,
            positive,
        )?)
    };
    Ok(TrainOutcome {
        result: RunResult {
            seed: config.seed,
            best_dev_metric: best_dev,
            best_step,
            test_metric,
            loss_curve,
            dev_curve,
            checkpoint: None,
        },
        best,
        initial,
    })
}

/// Assembles `split` (retrieval + templating) and trains on it.
pub fn train(
    split: &FewShotSplit,
    config: &TrainConfig,
    experiment: &Experiment,
) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared = experiment.prepare(
        split,
        config.selector,
        config.label_mode,
        config.seed,
        config.max_length,
    )?;
    train_prepared(&prepared, config, experiment)
}

/// Draws the seed's few-shot split from the experiment pool and attaches the
/// experiment test set.
pub fn split_for_seed(experiment: &Experiment, shots: usize, seed: u64) -> Result<FewShotSplit> {
    let mut split = sample_few_shot(&experiment.pool, &experiment.task, shots, seed)?;
    split.test = experiment.test.clone();
    Ok(split)
}

/// Mean and population variance over runs, in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub variance: f64,
    pub n: usize,
}

impl Aggregate {
    /// Takes metrics in `[0, 1]` and aggregates them as percentages.
    pub fn from_metrics(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let pct: Vec<f64> = values.iter().map(|v| v * 100.0).collect();
        let n = pct.len() as f64;
        let mean = pct.iter().sum::<f64>() / n;
        let variance = pct.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            variance,
            n: pct.len(),
        })
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_mean_spread(self.mean, self.variance))
    }
}

/// `mean (spread)` with one decimal each, e.g. `93.1 (0.5)`.
pub fn format_mean_spread(mean: f64, spread: f64) -> String {
    format!("{mean:.1} ({spread:.1})")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub variant: String,
    pub runs: Vec<RunResult>,
    pub failures: Vec<(u64, String)>,
    /// Set when some seeds failed and the aggregates cover only the rest.
    pub partial: bool,
    pub dev: Option<Aggregate>,
    pub test: Option<Aggregate>,
}

/// One training run per seed, each on its own sampled split. Seeds run in
/// parallel; results keep seed order.
pub fn multi_seed_run(
    experiment: &Experiment,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    multi_seed_run_with(experiment, config, seeds, |_, _| Ok(None))
}

/// As [`multi_seed_run`], calling `on_run` with each finished outcome (for
/// writing checkpoints).
pub fn multi_seed_run_with<F>(
    experiment: &Experiment,
    config: &TrainConfig,
    seeds: &[u64],
    on_run: F,
) -> Result<MultiSeedReport>
where
    F: Fn(u64, &TrainOutcome) -> Result<Option<String>> + Sync + Send,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    config.validate()?;
    let outcomes = parallel::map(seeds, |&seed| -> Result<RunResult> {
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let split = split_for_seed(experiment, cfg.shots_per_class, seed)?;
        let outcome = train(&split, &cfg, experiment)?;
        let checkpoint = on_run(seed, &outcome)?;
        Ok(RunResult {
            checkpoint,
            ..outcome.result
        })
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(outcomes) {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failures.push((*seed, e.to_string()));
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::Config(format!(
            "every seed failed; first error: {}",
            failures[0].1
        )));
    }
    let dev: Vec<f64> = runs.iter().map(|r| r.best_dev_metric).collect();
    let test: Vec<f64> = runs.iter().filter_map(|r| r.test_metric).collect();
    Ok(MultiSeedReport {
        variant: config.variant_name().to_string(),
        partial: !failures.is_empty(),
        dev: Aggregate::from_metrics(&dev),
        test: Aggregate::from_metrics(&test),
        runs,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl Default for GridSpace {
    /// α ∈ {0.5, 1, 5, 10}, β ∈ {5, 10}, T ∈ {5, 10}.
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 1.0, 5.0, 10.0],
            betas: vec![5.0, 10.0],
            temperatures: vec![5.0, 10.0],
        }
    }
}

impl GridSpace {
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &a in &self.alphas {
            for &b in &self.betas {
                for &t in &self.temperatures {
                    out.push((a, b, t));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub dev_metric: f64,
    pub test_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub seed: u64,
    pub points: Vec<GridPoint>,
    pub best: usize,
}

impl GridReport {
    pub fn best_point(&self) -> &GridPoint {
        &self.points[self.best]
    }
}

/// Index of the best point: highest dev metric, ties to smaller (α, β, T).
pub fn select_best(points: &[GridPoint]) -> Option<usize> {
    let key = |p: &GridPoint| (p.alpha, p.beta, p.temperature);
    (0..points.len()).reduce(|best, i| {
        let (b, c) = (&points[best], &points[i]);
        let better = c.dev_metric > b.dev_metric
            || (c.dev_metric == b.dev_metric
                && key(c).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less));
        if better {
            i
        } else {
            best
        }
    })
}

/// Exhaustive search over `space` on one split, scoring each point with
/// `score` (normally a full training run). Points are evaluated in parallel.
pub fn grid_search_with<F>(space: &GridSpace, seed: u64, score: F) -> Result<GridReport>
where
    F: Fn(&LossWeights) -> Result<(f64, Option<f64>)> + Sync + Send,
{
    let coords = space.points();
    if coords.is_empty() {
        return Err(Error::Config("empty search space".into()));
    }
    let scored = parallel::map(
        &coords,
        |&(alpha, beta, temperature)| -> Result<GridPoint> {
            let w = LossWeights {
                alpha,
                beta,
                temperature,
                ..LossWeights::default()
            };
            let (dev_metric, test_metric) = score(&w)?;
            Ok(GridPoint {
                alpha,
                beta,
                temperature,
                dev_metric,
                test_metric,
            })
        },
    );
    let points = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let best = select_best(&points).expect("non-empty");
    Ok(GridReport { seed, points, best })
}

/// Grid search with a training run per point on the split for `base.seed`.
pub fn grid_search(
    experiment: &Experiment,
    base: &TrainConfig,
    space: &GridSpace,
) -> Result<GridReport> {
    base.validate()?;
    let split = split_for_seed(experiment, base.shots_per_class, base.seed)?;
    let prepared = experiment.prepare(
        &split,
        base.selector,
        base.label_mode,
        base.seed,
        base.max_length,
    )?;
    grid_search_with(space, base.seed, |w| {
        let cfg = TrainConfig {
            weights: LossWeights {
                temperature_mode: base.weights.temperature_mode,
                ..*w
            },
            ..base.clone()
        };
        let out = train_prepared(&prepared, &cfg, experiment)?;
        Ok((out.result.best_dev_metric, out.result.test_metric))
    })
}
