//! Reference masked-LM backbone: a pre-LayerNorm transformer encoder with
//! learned positional embeddings and an MLM head whose decoder is tied to the
//! token embedding.
//!
//! The MLM head is `dense -> GELU -> LayerNorm -> decoder(+bias)`. A
//! pretrained model could be dropped in behind the same `forward` /
//! `mlm_logits_var` pair; nothing outside this module depends on the layer
//! structure.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn small(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            max_len,
            dropout: 0.0,
            init_std: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ff", self.ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Attention probabilities indexed `[layer][head]`, each `len × len`.
pub type AttentionMaps = Vec<Vec<Matrix>>;

/// Hidden states (`len × hidden`) plus attention maps for one input.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub hidden: Matrix,
    pub attentions: AttentionMaps,
}

struct LayerParams {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerParams>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    head_ln_g: usize,
    head_ln_b: usize,
    decoder_b: usize,
}

/// Builds parameter names/shapes in a fixed order and the index layout.
fn layout(config: &BackboneConfig) -> (Vec<(String, usize, usize)>, Layout) {
    let d = config.hidden;
    let mut shapes = Vec::new();
    let mut add = |name: String, r: usize, c: usize| {
        shapes.push((name, r, c));
        shapes.len() - 1
    };
    let tok_emb = add("embeddings.token".into(), config.vocab_size, d);
    let pos_emb = add("embeddings.position".into(), config.max_len, d);
    let mut layers = Vec::new();
    for l in 0..config.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerParams {
            ln1_g: add(p("attn_norm.gain"), 1, d),
            ln1_b: add(p("attn_norm.bias"), 1, d),
            wq: add(p("attn.query.weight"), d, d),
            bq: add(p("attn.query.bias"), 1, d),
            wk: add(p("attn.key.weight"), d, d),
            bk: add(p("attn.key.bias"), 1, d),
            wv: add(p("attn.value.weight"), d, d),
            bv: add(p("attn.value.bias"), 1, d),
            wo: add(p("attn.output.weight"), d, d),
            bo: add(p("attn.output.bias"), 1, d),
            ln2_g: add(p("ffn_norm.gain"), 1, d),
            ln2_b: add(p("ffn_norm.bias"), 1, d),
            w1: add(p("ffn.in.weight"), d, config.ff),
            b1: add(p("ffn.in.bias"), 1, config.ff),
            w2: add(p("ffn.out.weight"), config.ff, d),
            b2: add(p("ffn.out.bias"), 1, d),
        });
    }
    let lnf_g = add("final_norm.gain".into(), 1, d);
    let lnf_b = add("final_norm.bias".into(), 1, d);
    let head_w = add("mlm_head.dense.weight".into(), d, d);
    let head_b = add("mlm_head.dense.bias".into(), 1, d);
    let head_ln_g = add("mlm_head.norm.gain".into(), 1, d);
    let head_ln_b = add("mlm_head.norm.bias".into(), 1, d);
    let decoder_b = add("mlm_head.decoder.bias".into(), 1, config.vocab_size);
    (
        shapes,
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            head_ln_g,
            head_ln_b,
            decoder_b,
        },
    )
}

pub struct Backbone {
    config: BackboneConfig,
    names: Vec<String>,
    params: Vec<Matrix>,
    layout: Layout,
}

/// Output of a graph-building forward pass.
pub struct Forward {
    pub hidden: Var,
    pub attentions: Vec<Vec<Var>>,
}

impl Backbone {
    /// Fresh parameters: Gaussian weights, unit norm gains, zero biases.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (shapes, layout) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, r, c) in shapes {
            let m = if name.ends_with(".gain") {
                Matrix::filled(r, c, 1.0)
            } else if name.ends_with(".bias") {
                Matrix::zeros(r, c)
            } else {
                Matrix::randn(r, c, config.init_std, &mut rng)
            };
            names.push(name);
            params.push(m);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    pub fn from_parts(config: BackboneConfig, named: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let (shapes, layout) = layout(&config);
        if shapes.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, r, c), (got_name, m)) in shapes.into_iter().zip(named) {
            if name != got_name || m.rows != r || m.cols != c {
                return Err(Error::Checkpoint(format!(
                    "parameter `{got_name}` {}x{} does not match expected `{name}` {r}x{c}",
                    m.rows, m.cols
                )));
            }
            names.push(name);
            params.push(m);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn snapshot(&self) -> Vec<Matrix> {
        self.params.clone()
    }

    pub fn with_params(&self, params: Vec<Matrix>) -> Self {
        assert_eq!(params.len(), self.params.len());
        let (_, layout) = layout(&self.config);
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            params,
            layout,
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length("empty input".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Length(format!(
                "input of {} tokens exceeds backbone maximum {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Shape(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return x;
        };
        if p == 0.0 {
            return x;
        }
        let v = g.value(x);
        let keep = 1.0 / (1.0 - p);
        let data = (0..v.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Rc::new(Matrix::from_vec(v.rows, v.cols, data));
        g.mul_const(x, mask)
    }

    /// Records the encoder on `g`. Dropout is active iff `dropout_rng` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[TokenId],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let lay = &self.layout;
        let tok_table = g.param(lay.tok_emb);
        let tok = g.gather_rows(tok_table, tokens.iter().map(|&t| t as usize).collect());
        let pos_table = g.param(lay.pos_emb);
        let pos = g.gather_rows(pos_table, (0..n).collect());
        let mut x = g.add(tok, pos);
        x = self.dropout(g, x, &mut dropout_rng);

        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attentions = Vec::with_capacity(self.config.layers);
        for lp in &lay.layers {
            let (g1, b1) = (g.param(lp.ln1_g), g.param(lp.ln1_b));
            let h = g.layer_norm(x, g1, b1);
            let proj = |g: &mut Graph, w: usize, b: usize| {
                let (w, b) = (g.param(w), g.param(b));
                let y = g.matmul(h, w);
                g.add_row(y, b)
            };
            let q = proj(g, lp.wq, lp.bq);
            let k = proj(g, lp.wk, lp.bk);
            let v = proj(g, lp.wv, lp.bv);
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = g.slice_cols(q, head * hd, hd);
                let kh = g.slice_cols(k, head * hd, hd);
                let vh = g.slice_cols(v, head * hd, hd);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let att = g.softmax_rows(scores);
                maps.push(att);
                outs.push(g.matmul(att, vh));
            }
            attentions.push(maps);
            let cat = if heads == 1 {
                outs[0]
            } else {
                g.concat_cols(outs)
            };
            let (wo, bo) = (g.param(lp.wo), g.param(lp.bo));
            let o = g.matmul(cat, wo);
            let o = g.add_row(o, bo);
            let o = self.dropout(g, o, &mut dropout_rng);
            x = g.add(x, o);

            let (g2, b2) = (g.param(lp.ln2_g), g.param(lp.ln2_b));
            let h2 = g.layer_norm(x, g2, b2);
            let (w1, bb1) = (g.param(lp.w1), g.param(lp.b1));
            let f = g.matmul(h2, w1);
            let f = g.add_row(f, bb1);
            let f = g.gelu(f);
            let (w2, bb2) = (g.param(lp.w2), g.param(lp.b2));
            let f = g.matmul(f, w2);
            let f = g.add_row(f, bb2);
            let f = self.dropout(g, f, &mut dropout_rng);
            x = g.add(x, f);
        }
        if self.config.layers > 0 {
            let (gf, bf) = (g.param(lay.lnf_g), g.param(lay.lnf_b));
            x = g.layer_norm(x, gf, bf);
        }
        Ok(Forward {
            hidden: x,
            attentions,
        })
    }

    /// Whole-vocabulary MLM scores for each row of `hidden_rows`.
    pub fn mlm_logits_var(&self, g: &mut Graph, hidden_rows: Var) -> Var {
        let lay = &self.layout;
        let (w, b) = (g.param(lay.head_w), g.param(lay.head_b));
        let y = g.matmul(hidden_rows, w);
        let y = g.add_row(y, b);
        let y = g.gelu(y);
        let (lg, lb) = (g.param(lay.head_ln_g), g.param(lay.head_ln_b));
        let y = g.layer_norm(y, lg, lb);
        let emb = g.param(lay.tok_emb);
        let logits = g.matmul_t(y, emb);
        let db = g.param(lay.decoder_b);
        g.add_row(logits, db)
    }

    /// Eval-mode encoding (no dropout) or train-mode with a seeded dropout draw.
    pub fn encode(&self, tokens: &[TokenId], train_dropout_seed: Option<u64>) -> Result<Encoding> {
        let mut g = Graph::new(&self.params);
        let mut rng = train_dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let fwd = self.forward(&mut g, tokens, rng.as_mut())?;
        Ok(Encoding {
            hidden: g.value(fwd.hidden).clone(),
            attentions: fwd
                .attentions
                .iter()
                .map(|layer| layer.iter().map(|&a| g.value(a).clone()).collect())
                .collect(),
        })
    }

    /// MLM scores for a single hidden vector.
    pub fn mlm_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.config.hidden {
            return Err(Error::Shape(format!(
                "hidden vector has dimension {}, expected {}",
                h.len(),
                self.config.hidden
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(Matrix::row_vector(h.to_vec()));
        let out = self.mlm_logits_var(&mut g, x);
        Ok(g.value(out).data.clone())
    }
}

pub const CHECKPOINT_FORMAT: &str = "demolearn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// JSON container: format tag, version, backbone config, vocabulary, and
/// named parameter arrays in layout order.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: BackboneConfig,
    vocabulary: Vec<String>,
    parameters: Vec<NamedArray>,
}

pub fn save_checkpoint(path: &Path, backbone: &Backbone, tokenizer: &Tokenizer) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: backbone.config.clone(),
        vocabulary: tokenizer.words().to_vec(),
        parameters: backbone
            .names
            .iter()
            .zip(&backbone.params)
            .map(|(n, m)| NamedArray {
                name: n.clone(),
                rows: m.rows,
                cols: m.cols,
                data: m.data.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    crate::io::write_atomic(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<(Backbone, Tokenizer)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    if file.vocabulary.len() != file.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size mismatch".into()));
    }
    let named = file
        .parameters
        .into_iter()
        .map(|a| {
            if a.data.len() != a.rows * a.cols {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has wrong length",
                    a.name
                )));
            }
            Ok((a.name, Matrix::from_vec(a.rows, a.cols, a.data)))
        })
        .collect::<Result<Vec<_>>>()?;
    let backbone = Backbone::from_parts(file.config, named)?;
    Ok((backbone, Tokenizer::from_words(file.vocabulary)))
}
