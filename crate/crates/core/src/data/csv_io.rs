use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ColumnData, ColumnKind, ColumnSchema, TableDataset, TaskType};
use crate::error::{Error, Result};

/// Optional sidecar describing column kinds and the label.
///
/// ```json
/// {"label": "income", "task": "binary", "columns": {"zip": "categorical"}}
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaOverride {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub task: Option<TaskType>,
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnKind>,
    /// Columns dropped on load (identifiers and the like).
    #[serde(default)]
    pub ignore: Vec<String>,
}

impl SchemaOverride {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })
    }
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), message: message.into() }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".schema.json");
    PathBuf::from(name)
}

/// Loads a CSV, picking up `<file>.schema.json` when present.
pub fn load_csv_with_sidecar(path: &Path) -> Result<TableDataset> {
    let sidecar = sidecar_path(path);
    let schema = if sidecar.exists() { Some(SchemaOverride::from_path(&sidecar)?) } else { None };
    load_csv(path, schema.as_ref())
}

/// Reads a UTF-8, comma-separated file with a header row.
///
/// Columns whose non-missing cells all parse as numbers are numerical,
/// everything else is categorical. Empty cells are missing. The label is
/// the last column unless the override names one. A label with exactly two
/// distinct values is binary; a numerical label with more is regression; a
/// categorical label with more is multiclass.
pub fn load_csv(path: &Path, schema: Option<&SchemaOverride>) -> Result<TableDataset> {
    let default_schema = SchemaOverride::default();
    let schema = schema.unwrap_or(&default_schema);
    let file = File::open(path).map_err(|e| data_err(path, format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(path, format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(data_err(path, "missing header row"));
    }

    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); header.len()];
    for (i, record) in reader.records().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let record = record.map_err(|e| data_err(path, format!("row {line}: {e}")))?;
        if record.len() != header.len() {
            return Err(data_err(path, format!("row {line} has {} fields, header has {}", record.len(), header.len())));
        }
        for (col, field) in cells.iter_mut().zip(record.iter()) {
            let field = field.trim();
            col.push(if field.is_empty() { None } else { Some(field.to_string()) });
        }
    }
    if cells[0].is_empty() {
        return Err(data_err(path, "table has no data rows"));
    }

    for name in schema.columns.keys().chain(&schema.ignore).chain(schema.label.iter()) {
        if !header.contains(name) {
            return Err(data_err(path, format!("schema names unknown column `{name}`")));
        }
    }
    let label_name = schema.label.clone().unwrap_or_else(|| header.last().cloned().unwrap_or_default());
    let label_pos = header.iter().position(|h| *h == label_name).expect("validated above");

    let mut features = Vec::new();
    let mut columns = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if j == label_pos || schema.ignore.contains(name) {
            continue;
        }
        let kind = schema.columns.get(name).copied().unwrap_or_else(|| infer_kind(&cells[j]));
        let (col_schema, data) = build_column(name, kind, &cells[j]).map_err(|m| data_err(path, m))?;
        features.push(col_schema);
        columns.push(data);
    }

    let label_cells = &cells[label_pos];
    if let Some(row) = label_cells.iter().position(Option::is_none) {
        return Err(data_err(path, format!("row {} has a missing label", row + 2)));
    }
    let distinct = {
        let mut v: Vec<&str> = label_cells.iter().flatten().map(String::as_str).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let task = match schema.task {
        Some(t) => t,
        None if distinct == 2 => TaskType::Binary,
        None if infer_kind(label_cells) == ColumnKind::Numerical => TaskType::Regression,
        None => TaskType::Multiclass,
    };
    let label_kind = if task == TaskType::Regression { ColumnKind::Numerical } else { ColumnKind::Categorical };
    let (label, labels) = build_column(&label_name, label_kind, label_cells).map_err(|m| data_err(path, m))?;

    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "table".into());
    let ds = TableDataset { name, task, features, columns, label, labels };
    ds.validate().map_err(|e| data_err(path, e.to_string()))?;
    Ok(ds)
}

fn infer_kind(cells: &[Option<String>]) -> ColumnKind {
    let numeric = cells.iter().flatten().all(|c| c.parse::<f64>().is_ok_and(f64::is_finite));
    if numeric && cells.iter().any(Option::is_some) {
        ColumnKind::Numerical
    } else {
        ColumnKind::Categorical
    }
}

fn build_column(name: &str, kind: ColumnKind, cells: &[Option<String>]) -> Result<(ColumnSchema, ColumnData), String> {
    match kind {
        ColumnKind::Numerical => {
            let mut values = Vec::with_capacity(cells.len());
            for (row, cell) in cells.iter().enumerate() {
                values.push(match cell {
                    None => None,
                    Some(s) => Some(
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| format!("row {}: `{s}` in numerical column `{name}`", row + 2))?,
                    ),
                });
            }
            Ok((ColumnSchema::numerical(name), ColumnData::Numerical(values)))
        }
        ColumnKind::Categorical => {
            let mut dict: Vec<String> = Vec::new();
            let mut codes = Vec::with_capacity(cells.len());
            for cell in cells {
                codes.push(cell.as_ref().map(|s| match dict.iter().position(|d| d == s) {
                    Some(i) => i as u32,
                    None => {
                        dict.push(s.clone());
                        (dict.len() - 1) as u32
                    }
                }));
            }
            Ok((ColumnSchema::categorical(name, dict), ColumnData::Categorical(codes)))
        }
    }
}

impl TableDataset {
    /// Writes the table as CSV with the label as the last column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header: Vec<&str> = self.features.iter().map(|c| c.name.as_str()).collect();
        header.push(&self.label.name);
        writeln!(out, "{}", header.join(","))?;
        let cell = |schema: &ColumnSchema, col: &ColumnData, r: usize| -> String {
            match col {
                ColumnData::Numerical(v) => v[r].map(|x| format!("{x}")).unwrap_or_default(),
                ColumnData::Categorical(v) => v[r].map(|c| schema.categories[c as usize].clone()).unwrap_or_default(),
            }
        };
        for r in 0..self.n_rows() {
            let mut fields: Vec<String> = self.features.iter().zip(&self.columns).map(|(s, c)| cell(s, c, r)).collect();
            fields.push(cell(&self.label, &self.labels, r));
            writeln!(out, "{}", fields.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Sidecar that reproduces this table's schema on reload.
    pub fn schema_override(&self) -> SchemaOverride {
        SchemaOverride {
            label: Some(self.label.name.clone()),
            task: Some(self.task),
            columns: self.features.iter().map(|c| (c.name.clone(), c.kind)).collect(),
            ignore: Vec::new(),
        }
    }
}
