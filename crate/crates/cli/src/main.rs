use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xtab_cli::config::{DatasetSource, ExperimentConfig, ObjectiveMix};
use xtab_cli::finetune::{cmd_finetune, RESULTS_FILE};
use xtab_cli::inspect::{cmd_inspect, DEFAULT_BINS};
use xtab_cli::pretrain::{cmd_pretrain, CONFIG_FILE};
use xtab_cli::report::{cmd_report, format_report};
use xtab_core::data::SyntheticConfig;
use xtab_core::fedpretrain::{Aggregation, ShareMode};
use xtab_core::finetune::{FinetuneConfig, InitSource, Regime};
use xtab_core::model::BackboneVariant;
use xtab_core::tensor::verification_mode_requested;
use xtab_core::{Error, Result};

/// Cross-table pretraining and finetuning of tabular transformers.
///
/// Set XTAB_VERIFY=1 to run every computation in f64.
#[derive(Parser)]
#[command(name = "xtab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Federated pretraining of a shared backbone; writes checkpoints.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        fed: FedArgs,
    },
    /// Finetune on downstream tables and append result records.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        tune: FinetuneArgs,
    },
    /// Aggregate a results file into win rates, ranks and error reduction.
    Report {
        /// Results file (defaults to <out>/results.jsonl).
        results: Option<PathBuf>,
        #[arg(long, default_value = "random")]
        baseline: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print a checkpoint's tensor inventory and weight histograms.
    Inspect {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic suite as CSV files with schema sidecars.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Base configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backbone: Option<BackboneVariant>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    attn_dropout: Option<f64>,
    #[arg(long)]
    ff_dropout: Option<f64>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// CSV tables (label in the last column unless a sidecar says otherwise).
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Generate a synthetic suite with this many tables instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    rows: usize,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long, default_value_t = 4)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0)]
    suite_seed: u64,
    /// Use only tables START:END of the synthetic suite.
    #[arg(long)]
    tables: Option<String>,
}

#[derive(Args)]
struct FedArgs {
    /// reconstruction, contrastive, supervised or mixed.
    #[arg(long)]
    objective: Option<ObjectiveMix>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    n_local: Option<usize>,
    #[arg(long)]
    share_mode: Option<ShareMode>,
    /// Divide the delta sum by the number of clients.
    #[arg(long)]
    mean_aggregation: bool,
    /// Comma-separated rounds to checkpoint at; the last round always is.
    #[arg(long, value_delimiter = ',')]
    checkpoint_rounds: Option<Vec<usize>>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    regime: Option<Regime>,
    /// `random` or a checkpoint path.
    #[arg(long, default_value = "random")]
    init: String,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Also run a random-init twin of every checkpoint trial.
    #[arg(long)]
    with_baseline: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl DataArgs {
    fn source(&self) -> Result<Option<DatasetSource>> {
        if !self.data.is_empty() && self.synthetic.is_some() {
            return Err(Error::Config("give either --data or --synthetic, not both".into()));
        }
        if !self.data.is_empty() {
            return Ok(Some(DatasetSource::Csv { paths: self.data.clone() }));
        }
        let Some(n) = self.synthetic else {
            return Ok(None);
        };
        let tables = match &self.tables {
            None => None,
            Some(s) => {
                let (a, b) = s
                    .split_once(':')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| Error::Config(format!("--tables expects START:END, got `{s}`")))?;
                Some((a, b))
            }
        };
        let suite = SyntheticConfig::new(n, self.rows, self.cols, self.latent_dim, self.suite_seed);
        Ok(Some(DatasetSource::Synthetic { suite, tables }))
    }
}

impl CommonArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        let b = &mut c.backbone;
        set(&mut c.seed, self.seed);
        set(&mut b.variant, self.backbone);
        set(&mut b.d, self.d);
        set(&mut b.n_blocks, self.blocks);
        set(&mut b.n_heads, self.heads);
        set(&mut b.attn_dropout, self.attn_dropout);
        set(&mut b.ff_dropout, self.ff_dropout);
        if let Some(h) = self.head_hidden {
            c.objective_params.head_hidden = h;
            c.finetune.head_hidden = h;
        }
        for opt in [&mut c.fed.optimizer, &mut c.finetune.optimizer] {
            set(&mut opt.lr, self.lr);
            set(&mut opt.weight_decay, self.weight_decay);
        }
        set(&mut c.fed.batch_size, self.batch_size);
        set(&mut c.finetune.batch_size, self.batch_size);
        if let Some(src) = self.data.source()? {
            c.datasets = src;
        }
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn pretrain(common: &CommonArgs, fed: &FedArgs) -> Result<()> {
    let mut c = common.config()?;
    set(&mut c.objective, fed.objective);
    set(&mut c.fed.rounds, fed.rounds);
    set(&mut c.fed.n_local, fed.n_local);
    set(&mut c.fed.share_mode, fed.share_mode);
    set(&mut c.fed.checkpoint_rounds, fed.checkpoint_rounds.clone());
    if fed.mean_aggregation {
        c.fed.aggregation = Aggregation::Mean;
    }
    let report = if verification_mode_requested() {
        cmd_pretrain::<f64>(&c, &common.out)?
    } else {
        cmd_pretrain::<f32>(&c, &common.out)?
    };
    let losses = &report.log.round_losses;
    println!(
        "{} clients, {} rounds x {} local steps, {} aggregation events, {} checkpoints, config {}",
        report.n_clients,
        report.rounds,
        report.n_local,
        report.log.aggregation_events,
        report.checkpoints.len(),
        report.config_hash
    );
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("mean client loss: round 1 {first:.4}, round {} {last:.4}", losses.len());
    }
    Ok(())
}

fn finetune(common: &CommonArgs, tune: &FinetuneArgs) -> Result<()> {
    let mut c = common.config()?;
    if let Some(r) = tune.regime {
        c.finetune = FinetuneConfig {
            train_fraction: c.finetune.train_fraction,
            batch_size: c.finetune.batch_size,
            optimizer: c.finetune.optimizer,
            head_hidden: c.finetune.head_hidden,
            ..FinetuneConfig::new(r)
        };
    }
    set(&mut c.finetune.train_fraction, tune.train_fraction);
    if tune.max_epochs.is_some() {
        c.finetune.max_epochs = tune.max_epochs;
    }
    set(&mut c.trials, tune.trials);
    c.with_baseline |= tune.with_baseline;
    let init = match tune.init.as_str() {
        "random" => InitSource::Random,
        path => InitSource::Checkpoint(PathBuf::from(path)),
    };
    std::fs::create_dir_all(&common.out)?;
    c.write(&common.out.join(CONFIG_FILE))?;
    let records = if verification_mode_requested() {
        cmd_finetune::<f64>(&c, &init, &common.out)?
    } else {
        cmd_finetune::<f32>(&c, &init, &common.out)?
    };
    for r in &records {
        println!("{} trial {} {} {}={:.6} ({:.1}s)", r.task, r.trial, r.model, r.metric, r.value, r.wall_clock_secs);
    }
    println!("appended {} records to {}", records.len(), common.out.join(RESULTS_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, fed } => pretrain(&common, &fed),
        Command::Finetune { common, tune } => finetune(&common, &tune),
        Command::Report { results, baseline, out } => {
            let results = results.unwrap_or_else(|| out.join(RESULTS_FILE));
            let report = cmd_report(&results, &baseline, &out)?;
            print!("{}", format_report(&report));
            Ok(())
        }
        Command::Inspect { checkpoint, bins, json } => {
            let inspection = cmd_inspect(&checkpoint, bins)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&inspection)?);
            } else {
                print!("{inspection}");
            }
            Ok(())
        }
        Command::Generate { data, out } => {
            let src = data.source()?.ok_or_else(|| Error::Config("generate needs --synthetic".into()))?;
            std::fs::create_dir_all(&out)?;
            for ds in src.load()? {
                let path = out.join(format!("{}.csv", ds.name));
                ds.write_csv(&path)?;
                let sidecar = out.join(format!("{}.csv.schema.json", ds.name));
                std::fs::write(&sidecar, serde_json::to_string_pretty(&ds.schema_override())? + "\n")?;
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
