use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, PreparedTable};
use crate::error::{Error, Result};

/// Fraction of each row's feature columns resampled from their marginals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub ratio: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { ratio: 0.6 }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("corruption ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// Columns resampled per row for a table with `n_cols` features.
    pub fn columns_per_row(&self, n_cols: usize) -> usize {
        ((self.ratio * n_cols as f64).round() as usize).min(n_cols)
    }
}

/// A corrupted view and the positions that were resampled.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub batch: Batch,
    /// Row-major `[len, n_features]` in token order.
    pub mask: Vec<bool>,
}

/// Resamples `round(ratio * c)` distinct columns of every row.
///
/// Each chosen cell takes the value of that column in a training row drawn
/// uniformly, i.e. a draw from the column's empirical marginal.
pub fn corrupt_batch<R: Rng + ?Sized>(
    batch: &Batch,
    config: &CorruptionConfig,
    table: &PreparedTable,
    rng: &mut R,
) -> Result<Corrupted> {
    config.validate()?;
    let pool = &table.stats.train_rows;
    if pool.is_empty() {
        return Err(Error::Dataset("no training rows to resample from".into()));
    }
    let (nn, nc) = (batch.n_num, batch.n_cat);
    let c = nn + nc;
    let k = config.columns_per_row(c);
    let mut out = batch.clone();
    let mut mask = vec![false; batch.len() * c];
    for r in 0..batch.len() {
        for j in sample(rng, c, k) {
            let donor = pool[rng.random_range(0..pool.len())];
            if j < nn {
                out.num[r * nn + j] = table.num[donor * nn + j];
            } else {
                let jc = j - nn;
                out.cat[r * nc + jc] = table.cat[donor * nc + jc];
            }
            mask[r * c + j] = true;
        }
    }
    Ok(Corrupted { batch: out, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnData, ColumnSchema, Split, TableDataset, TaskType};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize) -> PreparedTable {
        let ds = TableDataset {
            name: "t".into(),
            task: TaskType::Regression,
            features: vec![
                ColumnSchema::numerical("a"),
                ColumnSchema::numerical("const"),
                ColumnSchema::numerical("b"),
                ColumnSchema::categorical("c", vec!["x".into(), "y".into()]),
                ColumnSchema::numerical("d"),
            ],
            columns: vec![
                ColumnData::Numerical((0..n).map(|i| Some(i as f64)).collect()),
                ColumnData::Numerical(vec![Some(3.0); n]),
                ColumnData::Numerical((0..n).map(|i| Some((i * i) as f64)).collect()),
                ColumnData::Categorical((0..n).map(|i| Some((i % 2) as u32)).collect()),
                ColumnData::Numerical((0..n).map(|i| Some(-(i as f64))).collect()),
            ],
            label: ColumnSchema::numerical("y"),
            labels: ColumnData::Numerical((0..n).map(|i| Some(i as f64)).collect()),
        };
        ds.prepare(Split::all_train(n)).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let t = table(20);
        let b = Batch::from_rows(&t, &(0..20).collect::<Vec<_>>());
        let out = corrupt_batch(&b, &CorruptionConfig { ratio: 0.0 }, &t, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.batch, b);
        assert!(out.mask.iter().all(|&m| !m));
    }

    #[test]
    fn exact_count_per_row() {
        let t = table(50);
        let b = Batch::from_rows(&t, &(0..50).collect::<Vec<_>>());
        let out = corrupt_batch(&b, &CorruptionConfig::default(), &t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for row in out.mask.chunks(5) {
            assert_eq!(row.iter().filter(|&&m| m).count(), 3);
        }
    }

    #[test]
    fn constant_column_keeps_value_but_is_masked() {
        let t = table(30);
        let b = Batch::from_rows(&t, &(0..30).collect::<Vec<_>>());
        let out = corrupt_batch(&b, &CorruptionConfig { ratio: 1.0 }, &t, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // "const" is numerical token 1.
        for r in 0..30 {
            assert_eq!(out.batch.num[r * 4 + 1], b.num[r * 4 + 1]);
            assert!(out.mask[r * 5 + 1]);
        }
    }

    #[test]
    fn bad_ratio_rejected() {
        let t = table(10);
        let b = Batch::from_rows(&t, &[0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(corrupt_batch(&b, &CorruptionConfig { ratio: 1.5 }, &t, &mut rng).is_err());
        assert!(corrupt_batch(&b, &CorruptionConfig { ratio: -0.1 }, &t, &mut rng).is_err());
    }
}
