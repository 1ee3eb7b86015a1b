//! Multi-table generator built on one latent linear-factor model.
//!
//! Every row of every table draws a latent vector `z ~ N(0, I)`. A bank of
//! loading prototypes is shared by the whole suite; each table builds its
//! columns as random two-prototype mixes (so column sets differ per table
//! but live in the same latent space) and derives its label from a shared
//! label prototype. Some columns are quantile-binned into categories.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ColumnData, ColumnSchema, TableDataset, TaskType};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_tables: usize,
    pub rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    pub latent_dim: usize,
    /// Probability that a column is quantile-binned into categories.
    pub categorical_fraction: f64,
    /// Standard deviation of per-cell noise (signal has unit variance).
    pub noise: f64,
    /// Task of table `t` is `tasks[t % tasks.len()]`.
    pub tasks: Vec<TaskType>,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(n_tables: usize, rows: usize, cols: usize, latent_dim: usize, seed: u64) -> Self {
        Self {
            n_tables,
            rows,
            min_cols: cols.div_ceil(2).max(1),
            max_cols: cols,
            latent_dim,
            categorical_fraction: 0.25,
            noise: 0.5,
            tasks: vec![TaskType::Binary, TaskType::Regression, TaskType::Multiclass],
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_tables == 0 || self.rows == 0 || self.min_cols == 0 || self.max_cols < self.min_cols {
            return Err(Error::Config("synthetic suite needs positive tables, rows and columns".into()));
        }
        if self.tasks.is_empty() || !(0.0..=1.0).contains(&self.categorical_fraction) || self.noise < 0.0 {
            return Err(Error::Config("synthetic suite needs tasks, a fraction in [0, 1] and noise >= 0".into()));
        }
        Ok(())
    }
}

const MULTICLASS_CLASSES: usize = 3;
const LABEL_NOISE: f64 = 0.25;

fn unit_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        v
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generates `config.n_tables` tables; identical configs give identical suites.
pub fn generate_synthetic_suite(config: &SyntheticConfig) -> Result<Vec<TableDataset>> {
    config.validate()?;
    let l = config.latent_dim;
    let mut bank_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_proto = (2 * l).max(8);
    let prototypes: Vec<Vec<f64>> = (0..n_proto).map(|_| unit_normal(&mut bank_rng, l)).collect();
    let label_protos: Vec<Vec<f64>> = (0..4).map(|_| unit_normal(&mut bank_rng, l)).collect();

    (0..config.n_tables)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64 + 1);
            generate_table(config, t, &prototypes, &label_protos, &mut rng)
        })
        .collect()
}

fn mix(rng: &mut ChaCha8Rng, bank: &[Vec<f64>], dim: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let picks = sample(rng, bank.len(), 2.min(bank.len()));
    let mut v = vec![0.0; dim];
    for p in picks {
        let w: f64 = StandardNormal.sample(rng);
        v.iter_mut().zip(&bank[p]).for_each(|(a, b)| *a += w * b);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn generate_table(
    config: &SyntheticConfig,
    t: usize,
    prototypes: &[Vec<f64>],
    label_protos: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<TableDataset> {
    let l = config.latent_dim;
    let n = config.rows;
    let n_cols = rng.random_range(config.min_cols..=config.max_cols);
    let task = config.tasks[t % config.tasks.len()];

    let latents: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| StandardNormal.sample(rng)).collect()).collect();

    let mut features = Vec::with_capacity(n_cols);
    let mut columns = Vec::with_capacity(n_cols);
    for j in 0..n_cols {
        let loading = mix(rng, prototypes, l);
        let values: Vec<f64> = latents.iter().map(|z| dot(&loading, z) + config.noise * gauss(rng)).collect();
        let name = format!("f{j}");
        if rng.random::<f64>() < config.categorical_fraction {
            let bins = rng.random_range(3..=6usize);
            let (schema, data) = quantile_bin(&name, &values, bins);
            features.push(schema);
            columns.push(data);
        } else {
            features.push(ColumnSchema::numerical(name));
            columns.push(ColumnData::Numerical(values.into_iter().map(Some).collect()));
        }
    }

    let label_dir = |rng: &mut ChaCha8Rng| mix(rng, label_protos, l);
    let (label, labels) = match task {
        TaskType::Regression => {
            let dir = label_dir(rng);
            let ys = latents.iter().map(|z| Some(dot(&dir, z) + 0.1 * gauss(rng))).collect();
            (ColumnSchema::numerical("target"), ColumnData::Numerical(ys))
        }
        TaskType::Binary => {
            let dir = label_dir(rng);
            let ys = latents
                .iter()
                .map(|z| {
                    let s = dot(&dir, z) + LABEL_NOISE * gauss(rng);
                    Some(u32::from(s > 0.0))
                })
                .collect();
            (ColumnSchema::categorical("target", vec!["neg".into(), "pos".into()]), ColumnData::Categorical(ys))
        }
        TaskType::Multiclass => {
            let dirs: Vec<Vec<f64>> = (0..MULTICLASS_CLASSES).map(|_| label_dir(rng)).collect();
            let ys = latents
                .iter()
                .map(|z| {
                    let scores: Vec<f64> = dirs.iter().map(|d| dot(d, z) + LABEL_NOISE * gauss(rng)).collect();
                    let best = (0..MULTICLASS_CLASSES).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                    Some(best as u32)
                })
                .collect();
            let names = (0..MULTICLASS_CLASSES).map(|k| format!("class{k}")).collect();
            (ColumnSchema::categorical("target", names), ColumnData::Categorical(ys))
        }
    };

    let ds = TableDataset { name: format!("synthetic_{t:02}"), task, features, columns, label, labels };
    ensure_label_classes(ds)
}

/// Degenerate draws (a binary table with one class) get their first rows
/// relabelled so every class is present.
fn ensure_label_classes(mut ds: TableDataset) -> Result<TableDataset> {
    if let ColumnData::Categorical(labels) = &mut ds.labels {
        let k = ds.label.categories.len();
        for class in 0..k as u32 {
            if !labels.contains(&Some(class)) {
                let slot = class as usize % labels.len();
                labels[slot] = Some(class);
            }
        }
    }
    ds.validate()?;
    Ok(ds)
}

fn quantile_bin(name: &str, values: &[f64], bins: usize) -> (ColumnSchema, ColumnData) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..bins).map(|b| sorted[(b * sorted.len() / bins).min(sorted.len() - 1)]).collect();
    let codes = values.iter().map(|v| Some(cuts.iter().filter(|&&c| *v >= c).count() as u32)).collect();
    let names = (0..bins).map(|b| format!("b{b}")).collect();
    (ColumnSchema::categorical(name, names), ColumnData::Categorical(codes))
}
