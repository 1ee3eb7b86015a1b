use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xtab_core::data::Split;
use xtab_core::fedpretrain::{build_clients, pretrain_run, CheckpointMeta, PretrainLog, Server};
use xtab_core::tensor::Float;
use xtab_core::{Error, Result};

use crate::config::ExperimentConfig;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PRETRAIN_LOG: &str = "pretrain_log.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn checkpoint_path(out: &Path, round: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("round_{round:05}.xtb"))
}

/// Written next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config_hash: String,
    pub n_clients: usize,
    pub n_local: usize,
    pub rounds: usize,
    pub local_steps_per_client: usize,
    #[serde(flatten)]
    pub log: PretrainLog,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

/// Federated pretraining over every configured table; each table trains on
/// all of its rows. Checkpoints go to `out/checkpoints/round_NNNNN.xtb`.
pub fn cmd_pretrain<F: Float>(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let datasets = cfg.datasets.load()?;
    let tables = datasets.iter().map(|ds| ds.prepare(Split::all_train(ds.n_rows()))).collect::<Result<Vec<_>>>()?;
    let objectives = cfg.objectives();
    let mut clients = build_clients::<F>(tables, cfg.backbone, &objectives, &cfg.fed, cfg.seed)?;
    let mut server = Server::from_params(&clients[0].params, clients.len(), cfg.fed.aggregation)?;

    std::fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    cfg.write(&out.join(CONFIG_FILE))?;
    let hash = cfg.hash();
    let meta = |rounds| CheckpointMeta {
        rounds,
        objectives: objectives.iter().map(|o| o.kind).collect(),
        seed: cfg.seed,
        share_mode: cfg.fed.share_mode,
        config_hash: hash.clone(),
        attn_dropout: cfg.backbone.attn_dropout,
        ff_dropout: cfg.backbone.ff_dropout,
    };
    let mut written = Vec::new();
    let log = pretrain_run(&mut clients, &mut server, &cfg.fed, |round, server| {
        let path = checkpoint_path(out, round);
        server.checkpoint(cfg.backbone, meta(round)).save(&path)?;
        eprintln!("round {round}: checkpoint {}", path.display());
        written.push(path);
        Ok(())
    })?;
    for (i, loss) in log.round_losses.iter().enumerate() {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("mean client loss in round {}", i + 1)));
        }
    }
    let report = PretrainReport {
        config_hash: hash,
        n_clients: clients.len(),
        n_local: cfg.fed.n_local,
        rounds: cfg.fed.rounds,
        local_steps_per_client: cfg.fed.n_local * cfg.fed.rounds,
        log,
        checkpoints: written,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    std::fs::write(out.join(PRETRAIN_LOG), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
