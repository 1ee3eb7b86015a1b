//! Table ingestion, preprocessing, corruption and batching.

mod batch;
mod corrupt;
mod csv_io;
mod preprocess;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use batch::{Batch, BatchStream};
pub use corrupt::{corrupt_batch, Corrupted, CorruptionConfig};
pub use csv_io::{load_csv, load_csv_with_sidecar, SchemaOverride};
pub use preprocess::{
    apply_preprocess, fit_preprocess, ColumnStats, LabelStats, PreparedTable, PreprocessStats, Targets,
};
pub use split::{split_counts, split_dataset, Split};
pub use synthetic::{generate_synthetic_suite, SyntheticConfig};

/// Default mini-batch size for pretraining and finetuning.
pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Regression,
    Binary,
    Multiclass,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Regression => "regression",
            TaskType::Binary => "binary",
            TaskType::Multiclass => "multiclass",
        }
    }
}

/// One column: its name, type and (for categorical columns) the load-time
/// dictionary, where a raw cell value's position is its load code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub categories: Vec<String>,
}

impl ColumnSchema {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Numerical, categories: Vec::new() }
    }

    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Categorical, categories }
    }

    pub fn category_code(&self, value: &str) -> Option<u32> {
        self.categories.iter().position(|c| c == value).map(|i| i as u32)
    }
}

/// Raw cells of one column; `None` marks a missing entry.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numerical(Vec<Option<f64>>),
    Categorical(Vec<Option<u32>>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numerical(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnData::Numerical(_) => ColumnKind::Numerical,
            ColumnData::Categorical(_) => ColumnKind::Categorical,
        }
    }
}

/// A typed table with exactly one label column.
#[derive(Clone, Debug, PartialEq)]
pub struct TableDataset {
    pub name: String,
    pub task: TaskType,
    pub features: Vec<ColumnSchema>,
    pub columns: Vec<ColumnData>,
    pub label: ColumnSchema,
    pub labels: ColumnData,
}

impl TableDataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Checks column lengths, kinds and label/task consistency.
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.features.is_empty() {
            return Err(Error::Dataset(format!("table `{}` has no feature columns", self.name)));
        }
        if self.features.len() != self.columns.len() {
            return Err(Error::Dataset("feature schema and column data disagree".into()));
        }
        let n = self.n_rows();
        if n == 0 {
            return Err(Error::Dataset(format!("table `{}` is empty", self.name)));
        }
        for (schema, col) in self.features.iter().zip(&self.columns) {
            if col.len() != n || col.kind() != schema.kind {
                return Err(Error::Dataset(format!("column `{}` is inconsistent with the schema", schema.name)));
            }
            if let ColumnData::Categorical(codes) = col {
                if codes.iter().flatten().any(|&c| c as usize >= schema.categories.len()) {
                    return Err(Error::Dataset(format!("column `{}` has an out-of-range code", schema.name)));
                }
            }
        }
        match (&self.labels, self.task) {
            (ColumnData::Numerical(v), TaskType::Regression) => {
                if v.iter().any(Option::is_none) {
                    return Err(Error::Dataset("missing regression label".into()));
                }
            }
            (ColumnData::Categorical(v), TaskType::Binary | TaskType::Multiclass) => {
                if v.iter().any(Option::is_none) {
                    return Err(Error::Dataset("missing class label".into()));
                }
                let classes = self.label.categories.len();
                let ok = match self.task {
                    TaskType::Binary => classes == 2,
                    _ => classes >= 3,
                };
                if !ok {
                    return Err(Error::Dataset(format!("{} task with {} label classes", self.task.as_str(), classes)));
                }
            }
            _ => return Err(Error::Dataset("label column does not match the task type".into())),
        }
        Ok(())
    }

    /// Copy restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> TableDataset {
        let pick = |col: &ColumnData| match col {
            ColumnData::Numerical(v) => ColumnData::Numerical(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&r| v[r]).collect()),
        };
        TableDataset {
            name: self.name.clone(),
            task: self.task,
            features: self.features.clone(),
            columns: self.columns.iter().map(pick).collect(),
            label: self.label.clone(),
            labels: pick(&self.labels),
        }
    }
}
