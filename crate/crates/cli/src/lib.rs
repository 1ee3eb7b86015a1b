//! Experiment driver behind the `xtab` binary: pretraining, finetuning,
//! reporting and checkpoint inspection, all driven by one serializable
//! [`ExperimentConfig`](config::ExperimentConfig).

pub mod config;
pub mod finetune;
pub mod inspect;
pub mod pretrain;
pub mod report;

pub use config::{DatasetSource, ExperimentConfig, ObjectiveMix};
