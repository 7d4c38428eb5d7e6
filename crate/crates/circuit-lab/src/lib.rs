//! A desk-scale laboratory for mechanistic interpretability of small
//! language models: train a decoder-only transformer on a synthetic
//! summarization task, adapt it (full fine-tuning or low-rank adapters),
//! capture its attention and activation internals, and measure how
//! adaptation moved them.
//!
//! Everything — the autodiff tape, the model, training, adapters, metrics,
//! and evaluation — is implemented from first principles on the standard
//! library plus a handful of utility crates, so every number the analysis
//! reports can be traced to code in this workspace.

pub mod blob;
pub mod circuit;
pub mod corpus;
pub mod error;
pub mod fingerprint;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod pca;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod rouge;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
