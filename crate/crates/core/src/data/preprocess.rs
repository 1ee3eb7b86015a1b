use serde::{Deserialize, Serialize};

use super::{ColumnData, ColumnKind, Split, TableDataset, TaskType};
use crate::error::{Error, Result};

/// Reserved embedding row for a missing categorical cell.
pub const MISSING_INDEX: usize = 0;
/// Reserved embedding row for a category never seen in training.
pub const UNKNOWN_INDEX: usize = 1;

const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnStats {
    Numerical {
        mean: f64,
        std: f64,
    },
    Categorical {
        /// Load code -> model index (`UNKNOWN_INDEX` if unseen in training).
        index_of_code: Vec<usize>,
        /// Embedding rows including the two reserved ones.
        cardinality: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelStats {
    Regression { mean: f64, std: f64 },
    Classes { n_classes: usize },
}

impl LabelStats {
    pub fn standardize(&self, y: f64) -> f64 {
        match self {
            LabelStats::Regression { mean, std } => (y - mean) / std,
            LabelStats::Classes { .. } => y,
        }
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        match self {
            LabelStats::Regression { mean, std } => z * std + mean,
            LabelStats::Classes { .. } => z,
        }
    }
}

/// Normalization statistics and marginal pools, computed from training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub columns: Vec<ColumnStats>,
    pub label: LabelStats,
    /// Rows whose values form each column's empirical marginal.
    pub train_rows: Vec<usize>,
}

/// Fits statistics on `train_rows` of `ds`.
pub fn fit_preprocess(ds: &TableDataset, train_rows: &[usize]) -> Result<PreprocessStats> {
    if train_rows.is_empty() {
        return Err(Error::Dataset("cannot fit preprocessing on an empty training split".into()));
    }
    let mean_std = |values: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return (0.0, 1.0);
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt().max(STD_FLOOR))
    };

    let mut columns = Vec::with_capacity(ds.columns.len());
    for (schema, col) in ds.features.iter().zip(&ds.columns) {
        columns.push(match col {
            ColumnData::Numerical(v) => {
                let (mean, std) = mean_std(&mut train_rows.iter().filter_map(|&r| v[r]));
                ColumnStats::Numerical { mean, std }
            }
            ColumnData::Categorical(v) => {
                let mut seen = vec![false; schema.categories.len()];
                for &r in train_rows {
                    if let Some(c) = v[r] {
                        seen[c as usize] = true;
                    }
                }
                let mut next = UNKNOWN_INDEX + 1;
                let index_of_code = seen
                    .iter()
                    .map(|&s| {
                        if s {
                            next += 1;
                            next - 1
                        } else {
                            UNKNOWN_INDEX
                        }
                    })
                    .collect();
                ColumnStats::Categorical { index_of_code, cardinality: next }
            }
        });
    }

    let label = match (&ds.labels, ds.task) {
        (ColumnData::Numerical(v), TaskType::Regression) => {
            let (mean, std) = mean_std(&mut train_rows.iter().filter_map(|&r| v[r]));
            LabelStats::Regression { mean, std }
        }
        (ColumnData::Categorical(_), TaskType::Binary | TaskType::Multiclass) => {
            LabelStats::Classes { n_classes: ds.label.categories.len() }
        }
        _ => return Err(Error::Dataset("label column does not match the task type".into())),
    };
    Ok(PreprocessStats { columns, label, train_rows: train_rows.to_vec() })
}

/// Training targets after preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Standardized regression labels.
    Regression(Vec<f64>),
    Classes {
        labels: Vec<usize>,
        n_classes: usize,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression(v) => Targets::Regression(rows.iter().map(|&r| v[r]).collect()),
            Targets::Classes { labels, n_classes } => {
                Targets::Classes { labels: rows.iter().map(|&r| labels[r]).collect(), n_classes: *n_classes }
            }
        }
    }
}

/// A model-ready table: standardized numbers, embedding indices, targets.
///
/// Tokens are ordered numerical columns first, then categorical columns,
/// each group in schema order; `feature_order[j]` is token `j`'s schema index.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTable {
    pub name: String,
    pub task: TaskType,
    pub n_rows: usize,
    pub n_num: usize,
    pub n_cat: usize,
    pub feature_order: Vec<usize>,
    /// Row-major `[n_rows, n_num]`.
    pub num: Vec<f64>,
    /// Row-major `[n_rows, n_cat]`, per-column embedding indices.
    pub cat: Vec<usize>,
    pub cat_cardinalities: Vec<usize>,
    pub targets: Targets,
    pub split: Split,
    pub stats: PreprocessStats,
}

impl PreparedTable {
    pub fn n_features(&self) -> usize {
        self.n_num + self.n_cat
    }

    pub fn n_outputs(&self) -> usize {
        match &self.targets {
            Targets::Regression(_) => 1,
            Targets::Classes { n_classes, .. } if self.task == TaskType::Binary && *n_classes == 2 => 1,
            Targets::Classes { n_classes, .. } => *n_classes,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Applies `stats` to every row of `ds`.
pub fn apply_preprocess(ds: &TableDataset, stats: &PreprocessStats, split: Split) -> Result<PreparedTable> {
    if stats.columns.len() != ds.columns.len() {
        return Err(Error::Dataset(format!(
            "statistics cover {} columns, table has {}",
            stats.columns.len(),
            ds.columns.len()
        )));
    }
    let n = ds.n_rows();
    let num_cols: Vec<usize> =
        ds.features.iter().enumerate().filter(|(_, c)| c.kind == ColumnKind::Numerical).map(|(i, _)| i).collect();
    let cat_cols: Vec<usize> =
        ds.features.iter().enumerate().filter(|(_, c)| c.kind == ColumnKind::Categorical).map(|(i, _)| i).collect();

    let mut num = vec![0.0; n * num_cols.len()];
    for (j, &col) in num_cols.iter().enumerate() {
        let (ColumnData::Numerical(v), ColumnStats::Numerical { mean, std }) = (&ds.columns[col], &stats.columns[col])
        else {
            return Err(Error::Dataset(format!(
                "statistics for column `{}` have the wrong kind",
                ds.features[col].name
            )));
        };
        for r in 0..n {
            num[r * num_cols.len() + j] = v[r].map_or(0.0, |x| (x - mean) / std);
        }
    }

    let mut cat = vec![0usize; n * cat_cols.len()];
    let mut cat_cardinalities = Vec::with_capacity(cat_cols.len());
    for (j, &col) in cat_cols.iter().enumerate() {
        let (ColumnData::Categorical(v), ColumnStats::Categorical { index_of_code, cardinality }) =
            (&ds.columns[col], &stats.columns[col])
        else {
            return Err(Error::Dataset(format!(
                "statistics for column `{}` have the wrong kind",
                ds.features[col].name
            )));
        };
        for r in 0..n {
            cat[r * cat_cols.len() + j] = match v[r] {
                None => MISSING_INDEX,
                Some(code) => index_of_code.get(code as usize).copied().unwrap_or(UNKNOWN_INDEX),
            };
        }
        cat_cardinalities.push(*cardinality);
    }

    let targets = match (&ds.labels, &stats.label) {
        (ColumnData::Numerical(v), label @ LabelStats::Regression { .. }) => {
            Targets::Regression(v.iter().map(|y| label.standardize(y.unwrap_or(f64::NAN))).collect())
        }
        (ColumnData::Categorical(v), LabelStats::Classes { n_classes }) => {
            Targets::Classes { labels: v.iter().map(|c| c.unwrap_or(0) as usize).collect(), n_classes: *n_classes }
        }
        _ => return Err(Error::Dataset("label statistics do not match the label column".into())),
    };

    Ok(PreparedTable {
        name: ds.name.clone(),
        task: ds.task,
        n_rows: n,
        n_num: num_cols.len(),
        n_cat: cat_cols.len(),
        feature_order: num_cols.iter().chain(&cat_cols).copied().collect(),
        num,
        cat,
        cat_cardinalities,
        targets,
        split,
        stats: stats.clone(),
    })
}

impl TableDataset {
    /// Fits statistics on `split.train` and applies them to all rows.
    pub fn prepare(&self, split: Split) -> Result<PreparedTable> {
        let stats = fit_preprocess(self, &split.train)?;
        apply_preprocess(self, &stats, split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSchema;

    fn table(num: Vec<Option<f64>>, cat: Vec<Option<u32>>, cats: &[&str], y: Vec<f64>) -> TableDataset {
        TableDataset {
            name: "t".into(),
            task: TaskType::Regression,
            features: vec![
                ColumnSchema::numerical("x"),
                ColumnSchema::categorical("c", cats.iter().map(|s| s.to_string()).collect()),
            ],
            columns: vec![ColumnData::Numerical(num), ColumnData::Categorical(cat)],
            label: ColumnSchema::numerical("y"),
            labels: ColumnData::Numerical(y.into_iter().map(Some).collect()),
        }
    }

    #[test]
    fn population_standardization() {
        let ds = table(vec![Some(1.0), Some(2.0), Some(3.0), None], vec![Some(0); 4], &["a"], vec![1.0, 2.0, 3.0, 4.0]);
        let stats = fit_preprocess(&ds, &[0, 1, 2]).unwrap();
        let ColumnStats::Numerical { mean, std } = stats.columns[0] else { panic!() };
        assert_eq!(mean, 2.0);
        assert!((std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let p = apply_preprocess(&ds, &stats, Split::all_train(4)).unwrap();
        for (a, b) in p.num.iter().zip([-1.2247, 0.0, 1.2247, 0.0]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn unseen_and_missing_categories_use_reserved_rows() {
        let ds = table(
            vec![Some(0.0); 4],
            vec![Some(0), Some(1), None, Some(2)],
            &["a", "b", "z"],
            vec![0.0, 1.0, 2.0, 3.0],
        );
        let stats = fit_preprocess(&ds, &[0, 1]).unwrap();
        let p = apply_preprocess(&ds, &stats, Split::all_train(4)).unwrap();
        assert_eq!(p.cat, vec![2, 3, MISSING_INDEX, UNKNOWN_INDEX]);
        assert_eq!(p.cat_cardinalities, vec![4]);
    }

    #[test]
    fn constant_column_std_is_floored() {
        let ds = table(vec![Some(5.0); 3], vec![Some(0); 3], &["a"], vec![1.0, 2.0, 3.0]);
        let stats = fit_preprocess(&ds, &[0, 1, 2]).unwrap();
        let ColumnStats::Numerical { std, .. } = stats.columns[0] else { panic!() };
        assert_eq!(std, STD_FLOOR);
    }

    #[test]
    fn regression_labels_round_trip() {
        let ys = vec![10.5, -3.25, 7.0, 100.0];
        let ds = table(vec![Some(0.0); 4], vec![Some(0); 4], &["a"], ys.clone());
        let p = ds.prepare(Split::all_train(4)).unwrap();
        let Targets::Regression(z) = &p.targets else { panic!() };
        for (zi, yi) in z.iter().zip(&ys) {
            assert!((p.stats.label.destandardize(*zi) - yi).abs() < 1e-5);
        }
    }

    #[test]
    fn held_out_rows_do_not_change_stats() {
        let ds = table(
            vec![Some(1.0), Some(4.0), Some(2.0), Some(8.0)],
            vec![Some(0), Some(1), Some(0), Some(1)],
            &["a", "b"],
            vec![1.0, 2.0, 3.0, 4.0],
        );
        let before = fit_preprocess(&ds, &[0, 2]).unwrap();
        let mut perturbed = ds.clone();
        perturbed.columns[0] = ColumnData::Numerical(vec![Some(1.0), Some(-400.0), Some(2.0), Some(1e6)]);
        perturbed.labels = ColumnData::Numerical(vec![Some(1.0), Some(99.0), Some(3.0), Some(-7.0)]);
        assert_eq!(before, fit_preprocess(&perturbed, &[0, 2]).unwrap());
    }
}
