use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xtab_core::data::{generate_synthetic_suite, load_csv_with_sidecar, SyntheticConfig, TableDataset};
use xtab_core::fedpretrain::FedConfig;
use xtab_core::finetune::{FinetuneConfig, Regime};
use xtab_core::model::BackboneConfig;
use xtab_core::objectives::{ObjectiveConfig, ObjectiveKind};
use xtab_core::{Error, Result};

/// Pretraining objective of every client, or a round-robin mix of all three.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMix {
    #[default]
    Reconstruction,
    Contrastive,
    Supervised,
    Mixed,
}

impl ObjectiveMix {
    pub fn kinds(self) -> Vec<ObjectiveKind> {
        match self {
            ObjectiveMix::Reconstruction => vec![ObjectiveKind::Reconstruction],
            ObjectiveMix::Contrastive => vec![ObjectiveKind::Contrastive],
            ObjectiveMix::Supervised => vec![ObjectiveKind::Supervised],
            ObjectiveMix::Mixed => ObjectiveKind::ALL.to_vec(),
        }
    }
}

impl fmt::Display for ObjectiveMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveMix::Mixed => f.write_str("mixed"),
            other => f.write_str(other.kinds()[0].as_str()),
        }
    }
}

impl FromStr for ObjectiveMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mixed" {
            return Ok(ObjectiveMix::Mixed);
        }
        Ok(match s.parse::<ObjectiveKind>()? {
            ObjectiveKind::Reconstruction => ObjectiveMix::Reconstruction,
            ObjectiveKind::Contrastive => ObjectiveMix::Contrastive,
            ObjectiveKind::Supervised => ObjectiveMix::Supervised,
        })
    }
}

/// Tables an experiment reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    Csv {
        paths: Vec<PathBuf>,
    },
    /// Tables `start..end` of a generated suite (all when `tables` is absent).
    Synthetic {
        suite: SyntheticConfig,
        tables: Option<(usize, usize)>,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Vec<TableDataset>> {
        let out = match self {
            DatasetSource::Csv { paths } => {
                paths.iter().map(|p| load_csv_with_sidecar(p)).collect::<Result<Vec<_>>>()?
            }
            DatasetSource::Synthetic { suite, tables } => {
                let all = generate_synthetic_suite(suite)?;
                match *tables {
                    None => all,
                    Some((a, b)) if a < b && b <= all.len() => all[a..b].to_vec(),
                    Some((a, b)) => {
                        return Err(Error::Config(format!("table range {a}:{b} outside a suite of {}", all.len())))
                    }
                }
            }
        };
        if out.is_empty() {
            return Err(Error::Config("no datasets given".into()));
        }
        Ok(out)
    }
}

/// Everything that determines an experiment's results. The output directory
/// is deliberately absent so moving a run does not change its hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub objective: ObjectiveMix,
    /// Head widths, temperature and corruption shared by all objectives.
    pub objective_params: ObjectiveConfig,
    pub fed: FedConfig,
    pub finetune: FinetuneConfig,
    pub trials: usize,
    pub with_baseline: bool,
    pub datasets: DatasetSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            objective: ObjectiveMix::Reconstruction,
            objective_params: ObjectiveConfig::default(),
            fed: FedConfig::default(),
            finetune: FinetuneConfig::new(Regime::Light),
            trials: 5,
            with_baseline: false,
            datasets: DatasetSource::Synthetic { suite: SyntheticConfig::new(8, 1000, 8, 4, 0), tables: None },
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.objective_params.validate()?;
        self.fed.validate()?;
        self.finetune.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is needed".into()));
        }
        Ok(())
    }

    /// Per-client objective configs, assigned round-robin.
    pub fn objectives(&self) -> Vec<ObjectiveConfig> {
        self.objective.kinds().into_iter().map(|kind| ObjectiveConfig { kind, ..self.objective_params }).collect()
    }

    /// First 16 hex digits of the SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
