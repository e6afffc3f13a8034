//! Few-shot demonstration learning for masked language models.
//!
//! A query is rendered through a cloze template, one retrieved demonstration
//! per class is appended with its label word filled in, and a masked-LM
//! backbone predicts the verbalizer word at the query's mask. Training can add
//! two auxiliary objectives: re-predicting the label words shown in the
//! demonstrations, and a contrastive loss that pulls the pooled prompt toward
//! the same-class demonstration context.
//!
//! With the default `parallel` feature, per-example forward/backward passes,
//! retrieval, per-seed runs and grid points run on the rayon pool. Results are
//! reduced in a fixed order, so parallel and sequential runs are bit-identical.

pub mod analysis;
pub mod autograd;
pub mod backbone;
pub mod corpus;
pub mod error;
pub mod io;
pub mod kv;
pub mod losses;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod retrieval;
pub mod templating;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
