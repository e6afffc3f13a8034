//! Training objectives.
//!
//! * `l_mask`: cross-entropy of the verbalizer words at the mask position.
//! * `l_label`: the same cross-entropy at every demonstration label position,
//!   summed over demonstrations (targets are the labels as displayed).
//! * `l_context`: contrastive loss with the mean-pooled prompt as anchor, the
//!   pooled same-class demonstration context as positive, and the other
//!   demonstration contexts of the same input as negatives.
//!
//! All softmaxes are restricted to the verbalizer words and computed with
//! max-subtraction. Each function here has a pure scalar form; [`record`]
//! builds the same quantities on an autograd [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, Forward};
use crate::error::{Error, Result};
use crate::templating::{EncodedInput, Span, Verbalizer};
use crate::tensor::{dot, log_sum_exp, Matrix};

/// How the temperature enters the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Every pooled vector is divided by `T` before the dot products, so each
    /// similarity is scaled by `1/T²`.
    #[default]
    DividePooled,
    /// Each similarity is divided by `T` once.
    DivideSimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    #[serde(default)]
    pub temperature_mode: TemperatureMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
            temperature: 5.0,
            temperature_mode: TemperatureMode::DividePooled,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }

    /// Demonstrations-only baseline: both auxiliary terms switched off.
    pub fn is_baseline(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_mask: f64,
    pub l_label: f64,
    pub l_context: f64,
    pub total: f64,
}

/// `-log softmax(logits[verbalizer words])[gold]`.
pub fn verbalizer_cross_entropy(
    logits: &[f64],
    verbalizer: &Verbalizer,
    gold: usize,
) -> Result<f64> {
    if gold >= verbalizer.num_classes() {
        return Err(Error::Config(format!("gold class {gold} out of range")));
    }
    let restricted: Vec<f64> = verbalizer
        .token_ids()
        .iter()
        .map(|&t| logits[t as usize])
        .collect();
    if restricted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("verbalizer logits".into()));
    }
    Ok(log_sum_exp(&restricted) - restricted[gold])
}

fn logits_at(backbone: &Backbone, hidden: &Matrix, pos: usize) -> Result<Vec<f64>> {
    if pos >= hidden.rows {
        return Err(Error::Span(format!(
            "position {pos} beyond {} rows",
            hidden.rows
        )));
    }
    backbone.mlm_logits(hidden.row(pos))
}

pub fn mask_loss(
    backbone: &Backbone,
    hidden: &Matrix,
    input: &EncodedInput,
    verbalizer: &Verbalizer,
) -> Result<f64> {
    let logits = logits_at(backbone, hidden, input.mask_position)?;
    verbalizer_cross_entropy(&logits, verbalizer, input.gold_label)
}

/// Sum over demonstrations of the label-position cross-entropy.
pub fn label_reprediction_loss(
    backbone: &Backbone,
    hidden: &Matrix,
    input: &EncodedInput,
    verbalizer: &Verbalizer,
) -> Result<f64> {
    let mut total = 0.0;
    for (&pos, &label) in input.demo_label_positions.iter().zip(&input.demo_labels) {
        let logits = logits_at(backbone, hidden, pos)?;
        total += verbalizer_cross_entropy(&logits, verbalizer, label)?;
    }
    Ok(total)
}

pub fn mean_pool(hidden: &Matrix, span: &Span) -> Result<Vec<f64>> {
    let positions = span.positions();
    if positions.is_empty() {
        return Err(Error::Span(format!("empty span {span:?}")));
    }
    if span.end > hidden.rows {
        return Err(Error::Span(format!(
            "span {span:?} beyond {} rows",
            hidden.rows
        )));
    }
    let mut out = vec![0.0; hidden.cols];
    for &p in &positions {
        for (o, v) in out.iter_mut().zip(hidden.row(p)) {
            *o += v;
        }
    }
    let n = positions.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// `-log(e^{u·p} / (e^{u·p} + Σ_i e^{u·n_i}))` with the temperature applied
/// per `mode`. An empty negative set gives 0.
pub fn contrastive_loss(
    s_in: &[f64],
    s_plus: &[f64],
    s_minus: &[Vec<f64>],
    temperature: f64,
    mode: TemperatureMode,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let d = s_in.len();
    if s_plus.len() != d || s_minus.iter().any(|n| n.len() != d) {
        return Err(Error::Shape(
            "contrastive vectors differ in dimension".into(),
        ));
    }
    if s_minus.is_empty() {
        return Ok(0.0);
    }
    let factor = match mode {
        TemperatureMode::DividePooled => 1.0 / (temperature * temperature),
        TemperatureMode::DivideSimilarity => 1.0 / temperature,
    };
    let mut scores = Vec::with_capacity(1 + s_minus.len());
    scores.push(dot(s_in, s_plus) * factor);
    scores.extend(s_minus.iter().map(|n| dot(s_in, n) * factor));
    let loss = log_sum_exp(&scores) - scores[0];
    if !loss.is_finite() {
        return Err(Error::Numeric("contrastive loss".into()));
    }
    Ok(loss.max(0.0))
}

/// Anchor, positive and negatives for one assembled input.
pub fn contrastive_views(
    hidden: &Matrix,
    input: &EncodedInput,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let positive = positive_index(input)?;
    let anchor = mean_pool(hidden, &input.prompt_span)?;
    let mut pos = Vec::new();
    let mut negs = Vec::new();
    for (k, span) in input.demo_context_spans.iter().enumerate() {
        let pooled = mean_pool(hidden, span)?;
        if k == positive {
            pos = pooled;
        } else {
            negs.push(pooled);
        }
    }
    Ok((anchor, pos, negs))
}

fn positive_index(input: &EncodedInput) -> Result<usize> {
    if input.num_demos() < 2 {
        return Err(Error::Config(
            "contrastive loss needs at least two demonstrations (no negatives otherwise)".into(),
        ));
    }
    input
        .demo_labels
        .iter()
        .position(|&l| l == input.gold_label)
        .ok_or_else(|| {
            Error::Config(format!(
                "{}: no demonstration shares the gold class {}",
                input.example_id, input.gold_label
            ))
        })
}

pub fn example_contrastive_loss(
    hidden: &Matrix,
    input: &EncodedInput,
    weights: &LossWeights,
) -> Result<f64> {
    let (anchor, pos, negs) = contrastive_views(hidden, input)?;
    contrastive_loss(
        &anchor,
        &pos,
        &negs,
        weights.temperature,
        weights.temperature_mode,
    )
}

/// Mean over the batch of the per-example contrastive loss.
pub fn batch_contrastive_loss(
    hiddens: &[Matrix],
    inputs: &[EncodedInput],
    weights: &LossWeights,
) -> Result<f64> {
    if hiddens.len() != inputs.len() || inputs.is_empty() {
        return Err(Error::Shape("batch sizes differ or batch is empty".into()));
    }
    let mut sum = 0.0;
    for (h, inp) in hiddens.iter().zip(inputs) {
        sum += example_contrastive_loss(h, inp, weights)?;
    }
    Ok(sum / inputs.len() as f64)
}

pub fn total_loss(
    l_mask: f64,
    l_label: f64,
    l_context: f64,
    weights: &LossWeights,
) -> Result<LossBundle> {
    for (name, v) in [
        ("l_mask", l_mask),
        ("l_label", l_label),
        ("l_context", l_context),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
    }
    Ok(LossBundle {
        l_mask,
        l_label,
        l_context,
        total: l_mask + weights.alpha * l_label + weights.beta * l_context,
    })
}

/// Which auxiliary terms are recorded on the graph at all. A disabled term
/// contributes nothing to the computation, unlike a zero weight which still
/// evaluates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub label: bool,
    pub context: bool,
}

impl ObjectiveTerms {
    pub const FULL: Self = Self {
        label: true,
        context: true,
    };
    pub const MASK_ONLY: Self = Self {
        label: false,
        context: false,
    };
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        Self::FULL
    }
}

/// Loss nodes for one example.
pub struct RecordedLoss {
    pub mask: Var,
    pub label: Option<Var>,
    pub context: Option<Var>,
    pub total: Var,
}

fn restricted_ce(
    g: &mut Graph,
    backbone: &Backbone,
    hidden: Var,
    pos: usize,
    verbalizer: &Verbalizer,
    gold: usize,
) -> Var {
    let row = g.gather_rows(hidden, vec![pos]);
    let logits = backbone.mlm_logits_var(g, row);
    let words = verbalizer.token_ids().iter().map(|&t| t as usize).collect();
    let restricted = g.select_cols(logits, words);
    g.cross_entropy(restricted, gold)
}

/// Records `l_mask + α·l_label + β·l_context` for one example on `g`.
pub fn record(
    g: &mut Graph,
    backbone: &Backbone,
    fwd: &Forward,
    input: &EncodedInput,
    verbalizer: &Verbalizer,
    weights: &LossWeights,
    terms: ObjectiveTerms,
) -> Result<RecordedLoss> {
    let mask = restricted_ce(
        g,
        backbone,
        fwd.hidden,
        input.mask_position,
        verbalizer,
        input.gold_label,
    );
    let mut parts = vec![mask];

    let label = if terms.label {
        let per_demo: Vec<Var> = input
            .demo_label_positions
            .iter()
            .zip(&input.demo_labels)
            .map(|(&pos, &l)| restricted_ce(g, backbone, fwd.hidden, pos, verbalizer, l))
            .collect();
        let sum = if per_demo.len() == 1 {
            per_demo[0]
        } else {
            g.sum(per_demo)
        };
        parts.push(g.scale(sum, weights.alpha));
        Some(sum)
    } else {
        None
    };

    let context = if terms.context {
        let positive = positive_index(input)?;
        let factor = match weights.temperature_mode {
            TemperatureMode::DividePooled => 1.0 / weights.temperature,
            TemperatureMode::DivideSimilarity => 1.0 / weights.temperature.sqrt(),
        };
        let pool = |g: &mut Graph, span: &Span| -> Result<Var> {
            let positions = span.positions();
            if positions.is_empty() {
                return Err(Error::Span(format!("empty span {span:?}")));
            }
            let m = g.mean_rows(fwd.hidden, positions);
            Ok(g.scale(m, factor))
        };
        let anchor = pool(g, &input.prompt_span)?;
        let mut scores = Vec::with_capacity(input.num_demos());
        let pooled: Vec<Var> = input
            .demo_context_spans
            .iter()
            .map(|s| pool(g, s))
            .collect::<Result<_>>()?;
        scores.push(g.matmul_t(anchor, pooled[positive]));
        for (k, &p) in pooled.iter().enumerate() {
            if k != positive {
                scores.push(g.matmul_t(anchor, p));
            }
        }
        let row = g.concat_cols(scores);
        let ce = g.cross_entropy(row, 0);
        parts.push(g.scale(ce, weights.beta));
        Some(ce)
    } else {
        None
    };

    let total = if parts.len() == 1 {
        parts[0]
    } else {
        g.sum(parts)
    };
    Ok(RecordedLoss {
        mask,
        label,
        context,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn verbalizer() -> (Tokenizer, Verbalizer) {
        let t = Tokenizer::build(["terrible great okay"]);
        let v = Verbalizer::new(vec!["terrible".into(), "great".into()], &t).unwrap();
        (t, v)
    }

    /// Independent evaluation: explicit exponentials, no shifting.
    fn ce_oracle(x: &[f64], gold: usize) -> f64 {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        -(x[gold].exp() / z).ln()
    }

    #[test]
    fn uniform_two_word_ce_is_ln2() {
        let (t, v) = verbalizer();
        let logits = vec![0.3; t.vocab_size()];
        assert!((verbalizer_cross_entropy(&logits, &v, 1).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn dominant_gold_logit_drives_loss_to_zero() {
        let (t, v) = verbalizer();
        let mut logits = vec![0.0; t.vocab_size()];
        logits[v.token_of(1) as usize] = 800.0;
        assert!(verbalizer_cross_entropy(&logits, &v, 1).unwrap() < 1e-300);
    }

    #[test]
    fn restricted_ce_matches_scalar_example() {
        let (t, v) = verbalizer();
        let mut logits = vec![9.0; t.vocab_size()];
        logits[v.token_of(0) as usize] = 2.0;
        logits[v.token_of(1) as usize] = 0.5;
        let got = verbalizer_cross_entropy(&logits, &v, 0).unwrap();
        assert!((got - ce_oracle(&[2.0, 0.5], 0)).abs() < 1e-12);
        assert!((got - 0.2014).abs() < 1e-4);
        logits[3] = f64::NAN;
        logits[v.token_of(0) as usize] = f64::INFINITY;
        assert!(matches!(
            verbalizer_cross_entropy(&logits, &v, 0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mean_pool_examples() {
        let h = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0]);
        assert_eq!(
            mean_pool(&h, &Span::new(0..2, None)).unwrap(),
            vec![2.0, 3.0]
        );
        assert_eq!(
            mean_pool(&h, &Span::new(1..2, None)).unwrap(),
            vec![3.0, 4.0]
        );
        assert_eq!(
            mean_pool(&h, &Span::new(0..3, Some(2))).unwrap(),
            vec![2.0, 3.0]
        );
        assert!(matches!(
            mean_pool(&h, &Span::new(1..1, None)),
            Err(Error::Span(_))
        ));
        assert!(matches!(
            mean_pool(&h, &Span::new(1..2, Some(1))),
            Err(Error::Span(_))
        ));
    }

    #[test]
    fn contrastive_examples() {
        let m = TemperatureMode::DividePooled;
        let l = contrastive_loss(&[1.0, 2.0], &[0.5, 0.5], &[vec![0.5, 0.5]], 3.0, m).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
        assert_eq!(contrastive_loss(&[1.0], &[2.0], &[], 5.0, m).unwrap(), 0.0);
        let l = contrastive_loss(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], 1.0, m).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn temperature_divides_each_pooled_vector() {
        // u = s_in/T, p = s_plus/T: the scores are dot/T², not dot/T
        let (s, p, n) = ([2.0, 1.0], [1.0, 3.0], vec![vec![-1.0, 0.5]]);
        let t = 2.0;
        let pooled = contrastive_loss(&s, &p, &n, t, TemperatureMode::DividePooled).unwrap();
        let sim = contrastive_loss(&s, &p, &n, t, TemperatureMode::DivideSimilarity).unwrap();
        assert!((pooled - ce_oracle(&[5.0 / 4.0, -1.5 / 4.0], 0)).abs() < 1e-12);
        assert!((sim - ce_oracle(&[5.0 / 2.0, -1.5 / 2.0], 0)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_with_selected_weights() {
        let w = LossWeights::default();
        let b = total_loss(0.7, 0.4, 0.2, &w).unwrap();
        assert!((b.total - 2.1).abs() < 1e-12);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..w
        };
        assert_eq!(total_loss(0.7, 0.4, 0.2, &zero).unwrap().total, 0.7);
        match total_loss(0.7, f64::INFINITY, 0.2, &w) {
            Err(Error::Numeric(name)) => assert_eq!(name, "l_label"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weights_validation() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.temperature = 0.0;
        assert!(w.validate().is_err());
    }

    proptest! {
        #[test]
        fn total_is_linear_in_auxiliary_terms(
            m in 0.0f64..5.0, l in 0.0f64..5.0, c in 0.0f64..5.0,
            alpha in 0.0f64..10.0, beta in 0.0f64..10.0,
        ) {
            let w = LossWeights { alpha, beta, ..LossWeights::default() };
            let b = total_loss(m, l, c, &w).unwrap();
            prop_assert_eq!(b.total, m + alpha * l + beta * c);
        }

        #[test]
        fn contrastive_invariants(
            d in 1usize..6,
            raw in proptest::collection::vec(-3.0f64..3.0, 48),
            nneg in 1usize..5,
            t in 0.5f64..10.0,
            shift in 0.01f64..2.0,
        ) {
            let s_in: Vec<f64> = raw[..d].to_vec();
            let s_plus: Vec<f64> = raw[d..2 * d].to_vec();
            let negs: Vec<Vec<f64>> = (0..nneg).map(|i| raw[(2 + i) * d..(3 + i) * d].to_vec()).collect();
            let mode = TemperatureMode::DividePooled;
            let base = contrastive_loss(&s_in, &s_plus, &negs, t, mode).unwrap();
            prop_assert!(base >= 0.0);

            let mut reversed = negs.clone();
            reversed.reverse();
            let perm = contrastive_loss(&s_in, &s_plus, &reversed, t, mode).unwrap();
            prop_assert!((perm - base).abs() < 1e-12);

            // moving s_plus along s_in raises u·p and lowers the loss
            let norm2: f64 = s_in.iter().map(|x| x * x).sum();
            prop_assume!(norm2 > 1e-2);
            let closer: Vec<f64> = s_plus.iter().zip(&s_in).map(|(p, s)| p + shift * s).collect();
            let lower = contrastive_loss(&s_in, &closer, &negs, t, mode).unwrap();
            prop_assert!(lower <= base);
            let mut worse = negs.clone();
            worse[0] = worse[0].iter().zip(&s_in).map(|(n, s)| n + shift * s).collect();
            let higher = contrastive_loss(&s_in, &s_plus, &worse, t, mode).unwrap();
            prop_assert!(higher >= base);
        }
    }
}
