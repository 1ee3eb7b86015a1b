//! Cross-table pretraining for tabular transformers.
//!
//! Each pretraining table owns a private featurizer and projection heads; a
//! transformer backbone is shared across tables and trained by summing the
//! clients' local weight deltas on a central server. The pretrained backbone
//! then warm-starts finetuning on unseen tables.

pub mod data;
pub mod error;
pub mod fedpretrain;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
