//! Per-table featurizers, the shared transformer backbones, and MLP heads.

mod backbone;
mod featurizer;
mod head;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backbone::{backbone_forward, cls_output, fastformer_block, init_backbone, mhsa_block, saintv_block};
pub use featurizer::{FeaturizerSpec, CAT_EMBEDDING, CLS as CLS_PARAM, NUM_BIAS, NUM_WEIGHT};
pub use head::{ColumnHeads, ColumnPredictions, MlpHead};

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// Prefix of every shared backbone parameter name.
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    /// Multi-head self-attention over column tokens.
    Ftt,
    /// Additive attention, linear in the token count.
    Fastformer,
    /// Column attention followed by row (inter-sample) attention.
    SaintV,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 3] = [BackboneVariant::Ftt, BackboneVariant::Fastformer, BackboneVariant::SaintV];

    pub fn code(self) -> u8 {
        match self {
            BackboneVariant::Ftt => 0,
            BackboneVariant::Fastformer => 1,
            BackboneVariant::SaintV => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(BackboneVariant::Ftt),
            1 => Ok(BackboneVariant::Fastformer),
            2 => Ok(BackboneVariant::SaintV),
            other => Err(Error::Checkpoint(format!("unknown backbone variant code {other}"))),
        }
    }
}

impl fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneVariant::Ftt => "ftt",
            BackboneVariant::Fastformer => "fastformer",
            BackboneVariant::SaintV => "saintv",
        })
    }
}

impl FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ftt" => Ok(BackboneVariant::Ftt),
            "fastformer" => Ok(BackboneVariant::Fastformer),
            "saintv" => Ok(BackboneVariant::SaintV),
            other => Err(Error::Config(format!("unknown backbone `{other}` (ftt, fastformer, saintv)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub n_blocks: usize,
    /// Token embedding width.
    pub d: usize,
    pub n_heads: usize,
    pub attn_dropout: f64,
    pub ff_dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { variant: BackboneVariant::Ftt, n_blocks: 3, d: 192, n_heads: 8, attn_dropout: 0.2, ff_dropout: 0.1 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embedding size {} must be a positive multiple of {} heads",
                self.d, self.n_heads
            )));
        }
        for p in [self.attn_dropout, self.ff_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Feed-forward hidden width (equal to the embedding size).
    pub fn ff_hidden(&self) -> usize {
        self.d
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    /// Same configuration with dropout disabled.
    pub fn without_dropout(self) -> Self {
        Self { attn_dropout: 0.0, ff_dropout: 0.0, ..self }
    }
}
