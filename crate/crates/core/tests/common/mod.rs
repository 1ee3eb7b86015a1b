//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtab_core::data::{Batch, ColumnData, ColumnSchema, PreparedTable, Split, TableDataset, TaskType};
use xtab_core::model::{BackboneConfig, BackboneVariant};
use xtab_core::objectives::TableModel;
use xtab_core::tensor::{Graph, ParamSet};

pub fn tiny_backbone(variant: BackboneVariant) -> BackboneConfig {
    BackboneConfig { variant, n_blocks: 1, d: 8, n_heads: 2, attn_dropout: 0.0, ff_dropout: 0.0 }
}

/// Random table with `n_num` numerical then `n_cat` categorical columns
/// (cardinality 3) and a label for `task`.
pub fn hand_table(n_num: usize, n_cat: usize, rows: usize, task: TaskType, seed: u64) -> TableDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut columns = Vec::new();
    for j in 0..n_num {
        features.push(ColumnSchema::numerical(format!("x{j}")));
        columns.push(ColumnData::Numerical((0..rows).map(|_| Some(rng.random_range(-2.0..2.0))).collect()));
    }
    for j in 0..n_cat {
        features.push(ColumnSchema::categorical(format!("c{j}"), vec!["a".into(), "b".into(), "c".into()]));
        columns.push(ColumnData::Categorical((0..rows).map(|_| Some(rng.random_range(0..3u32))).collect()));
    }
    let (label, labels) = match task {
        TaskType::Regression => (
            ColumnSchema::numerical("y"),
            ColumnData::Numerical((0..rows).map(|_| Some(rng.random::<f64>())).collect()),
        ),
        TaskType::Binary => (
            ColumnSchema::categorical("y", vec!["no".into(), "yes".into()]),
            ColumnData::Categorical((0..rows).map(|r| Some((r % 2) as u32)).collect()),
        ),
        TaskType::Multiclass => (
            ColumnSchema::categorical("y", vec!["p".into(), "q".into(), "r".into()]),
            ColumnData::Categorical((0..rows).map(|r| Some((r % 3) as u32)).collect()),
        ),
    };
    let ds = TableDataset { name: format!("hand_{n_num}_{n_cat}"), task, features, columns, label, labels };
    ds.validate().unwrap();
    ds
}

pub fn prepared(ds: &TableDataset) -> PreparedTable {
    ds.prepare(Split::all_train(ds.n_rows())).unwrap()
}

/// Loss of `model` on `batch` with corruption drawn from a fresh RNG
/// seeded by `seed`, so repeated calls see the same corrupted view.
pub fn loss_at(model: &TableModel, ps: &ParamSet<f64>, batch: &Batch, table: &PreparedTable, seed: u64) -> f64 {
    let mut g = Graph::new(true, 0);
    let l = model.loss(&mut g, ps, batch, table, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    g.scalar_value(l).unwrap()
}

/// Worst element-wise disagreement between backprop and central
/// differences, as `(parameter, relative error)`. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &TableModel,
    params: &ParamSet<f64>,
    batch: &Batch,
    table: &PreparedTable,
    seed: u64,
    h: f64,
    floor: f64,
) -> (String, f64) {
    let mut ps = params.snapshot();
    let mut g = Graph::new(true, 0);
    let l = model.loss(&mut g, &ps, batch, table, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    g.backward_into(l, &mut ps).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = ps
        .iter()
        .map(|(n, p)| {
            (n.to_string(), p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        })
        .collect();
    let mut probe = params.snapshot();
    let mut worst = (String::new(), 0.0f64);
    for (name, grad) in analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.get(&name).unwrap().tensor.data()[i];
            probe.get_mut(&name).unwrap().tensor.data_mut()[i] = orig + h;
            let up = loss_at(model, &probe, batch, table, seed);
            probe.get_mut(&name).unwrap().tensor.data_mut()[i] = orig - h;
            let down = loss_at(model, &probe, batch, table, seed);
            probe.get_mut(&name).unwrap().tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.1 {
                worst = (format!("{name}[{i}] backprop {a:.3e} numeric {numeric:.3e}"), rel);
            }
        }
    }
    worst
}
