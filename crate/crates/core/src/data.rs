//! CSV ingestion and preprocessing into [`Table`]s.
//!
//! An optional schema file (TOML) fixes column kinds and missing-value
//! sentinels:
//!
//! ```toml
//! missing = ["", "NA", "?"]      # default sentinels for every column
//!
//! [[columns]]
//! name = "colour"
//! kind = "categorical"
//! missing = ["unknown"]          # replaces the default list for this column
//! ```
//!
//! Columns not listed keep the default sentinels and an inferred kind.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::Table;
use crate::tensor::Tensor;

pub const DEFAULT_MISSING: [&str; 5] = ["", "NA", "NaN", "?", "null"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: target column `{target}` not found (columns: {available:?})")]
    MissingTarget {
        path: String,
        target: String,
        available: Vec<String>,
    },
    #[error("{path}: target `{target}` must have exactly 2 classes, found {classes:?}")]
    Classes {
        path: String,
        target: String,
        classes: Vec<String>,
    },
    #[error("{path}: line {line}: missing target value in column `{target}`")]
    MissingLabel {
        path: String,
        line: u64,
        target: String,
    },
    #[error("{path}: line {line}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        path: String,
        line: u64,
        column: String,
        value: String,
    },
    #[error("duplicate column name `{0}`")]
    Duplicate(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("`{0}` has no usable feature columns")]
    NoFeatures(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub missing: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default)]
    pub missing: Option<Vec<String>>,
    #[serde(default)]
    pub columns: Vec<RawColumnSpec>,
}

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Schema = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        let mut seen = HashSet::new();
        for c in &s.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::Duplicate(c.name.clone()));
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    fn sentinels(&self, column: &str) -> Vec<String> {
        self.columns
            .iter()
            .find(|c| c.name == column)
            .and_then(|c| c.missing.clone())
            .or_else(|| self.missing.clone())
            .unwrap_or_else(|| DEFAULT_MISSING.iter().map(|s| s.to_string()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub kind: ColumnKind,
    /// `None` marks a missing value.
    pub values: Vec<Option<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub name: String,
    pub columns: Vec<RawColumn>,
    pub labels: Vec<u8>,
    /// Class names for label 0 and label 1.
    pub classes: [String; 2],
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Numeric raw view of an existing table.
    pub fn from_table(table: &Table) -> Self {
        let columns = (0..table.n_features())
            .map(|c| RawColumn {
                name: table.feature_names[c].clone(),
                kind: ColumnKind::Numeric,
                values: (0..table.n_rows())
                    .map(|r| Some(format!("{:e}", table.features.get(r, c))))
                    .collect(),
            })
            .collect();
        Self {
            name: table.name.clone(),
            columns,
            labels: table.labels.clone(),
            classes: ["0".into(), "1".into()],
        }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a CSV with a header row. The target must have exactly two distinct
/// non-missing values; label 1 is the larger class name (numeric order when
/// both parse as numbers, lexical otherwise).
pub fn load_csv(path: &Path, target: &str, schema: Option<&Schema>) -> Result<RawTable> {
    let p = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(&p, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&p, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(DataError::Duplicate(h.clone()));
        }
    }
    let target_col = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| DataError::MissingTarget {
            path: p.clone(),
            target: target.into(),
            available: headers.clone(),
        })?;
    let default_schema = Schema::default();
    let schema = schema.unwrap_or(&default_schema);
    for c in &schema.columns {
        if !headers.contains(&c.name) {
            return Err(DataError::Schema(format!("column `{}` is not in {p}", c.name)));
        }
    }
    let sentinels: Vec<Vec<String>> = headers.iter().map(|h| schema.sentinels(h)).collect();

    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); headers.len()];
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&p, e))?;
        let line = record.position().map_or(0, |pos| pos.line());
        for (c, field) in record.iter().enumerate() {
            let v = (!sentinels[c].iter().any(|s| s == field)).then(|| field.to_string());
            cells[c].push(v);
        }
        lines.push(line);
    }

    let raw_target = &cells[target_col];
    let mut classes: Vec<String> = Vec::new();
    for (i, v) in raw_target.iter().enumerate() {
        match v {
            None => {
                return Err(DataError::MissingLabel {
                    path: p,
                    line: lines[i],
                    target: target.into(),
                })
            }
            Some(v) if !classes.contains(v) => classes.push(v.clone()),
            _ => {}
        }
    }
    if classes.len() != 2 {
        classes.sort();
        return Err(DataError::Classes {
            path: p,
            target: target.into(),
            classes,
        });
    }
    match (parse_number(&classes[0]), parse_number(&classes[1])) {
        (Some(a), Some(b)) => {
            if a > b {
                classes.swap(0, 1);
            }
        }
        _ => classes.sort(),
    }
    let labels = raw_target
        .iter()
        .map(|v| (v.as_deref() == Some(classes[1].as_str())) as u8)
        .collect();

    let mut columns = Vec::new();
    for (c, values) in cells.into_iter().enumerate() {
        if c == target_col {
            continue;
        }
        let name = headers[c].clone();
        let declared = schema.columns.iter().find(|s| s.name == name).map(|s| s.kind);
        let kind = match declared {
            Some(ColumnKind::Numeric) => {
                for (i, v) in values.iter().enumerate() {
                    if let Some(v) = v {
                        if parse_number(v).is_none() {
                            return Err(DataError::Parse {
                                path: p,
                                line: lines[i],
                                column: name,
                                value: v.clone(),
                            });
                        }
                    }
                }
                ColumnKind::Numeric
            }
            Some(k) => k,
            None if values.iter().flatten().all(|v| parse_number(v).is_some()) => ColumnKind::Numeric,
            None => ColumnKind::Categorical,
        };
        columns.push(RawColumn { name, kind, values });
    }
    let name = path
        .file_stem()
        .map_or_else(|| p.clone(), |s| s.to_string_lossy().into_owned());
    Ok(RawTable {
        name,
        columns,
        labels,
        classes: [classes[0].clone(), classes[1].clone()],
    })
}

fn csv_error(path: &str, e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    let message = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.into(),
            source,
        },
        _ => DataError::Csv {
            path: path.into(),
            line,
            message,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub table: Table,
    /// Columns dropped because every value was missing.
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
}

/// Encodes every column as a standardized numeric feature.
///
/// Numeric columns: missing values take the column mean. Categorical
/// columns: ordinal codes in order of first appearance, with missing values
/// as an extra final category. Each column is then standardized to mean 0
/// and variance 1 (population); constant columns become zeros.
pub fn preprocess(raw: &RawTable) -> Result<Preprocessed> {
    let n = raw.n_rows();
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for col in &raw.columns {
        if col.values.iter().all(Option::is_none) {
            warnings.push(format!("column `{}` has no values and was dropped", col.name));
            dropped.push(col.name.clone());
            continue;
        }
        let encoded: Vec<f64> = match col.kind {
            ColumnKind::Numeric => {
                let parsed: Vec<Option<f64>> = col
                    .values
                    .iter()
                    .map(|v| v.as_deref().and_then(parse_number))
                    .collect();
                let present: Vec<f64> = parsed.iter().flatten().copied().collect();
                if col.values.iter().flatten().count() != present.len() {
                    return Err(DataError::Schema(format!(
                        "numeric column `{}` holds non-numeric values",
                        col.name
                    )));
                }
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                parsed.iter().map(|v| v.unwrap_or(mean)).collect()
            }
            ColumnKind::Categorical => {
                let mut codes: HashMap<&str, usize> = HashMap::new();
                for v in col.values.iter().flatten() {
                    let next = codes.len();
                    codes.entry(v.as_str()).or_insert(next);
                }
                let missing_code = codes.len();
                col.values
                    .iter()
                    .map(|v| v.as_deref().map_or(missing_code, |s| codes[s]) as f64)
                    .collect()
            }
        };
        features.push(standardize_column(&encoded));
        names.push(col.name.clone());
    }
    if features.is_empty() {
        return Err(DataError::NoFeatures(raw.name.clone()));
    }
    let d = features.len();
    let mut data = vec![0.0; n * d];
    for (c, col) in features.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            data[r * d + c] = *v;
        }
    }
    let x = Tensor::matrix(n, d, data).expect("rows × columns");
    let mut table = Table::new(raw.name.clone(), x, raw.labels.clone());
    table.feature_names = names;
    Ok(Preprocessed {
        table,
        dropped,
        warnings,
    })
}

fn standardize_column(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        let sd = var.sqrt();
        v.iter().map(|x| (x - mean) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}
