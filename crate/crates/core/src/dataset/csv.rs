//! CSV ingestion: min-max scaling for continuous columns and one-hot
//! expansion for categorical ones.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    MinMax,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvConfig {
    pub label_column: String,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub normalization: Normalization,
}

/// Header plus string cells, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = ::csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(::csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_owned).collect());
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("column '{name}' not found in header")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous { min: f64, max: f64 },
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedColumn {
    pub name: String,
    pub kind: ColumnKind,
}

/// Column statistics fitted on training rows and applied to any table with
/// the same header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub label_column: String,
    pub normalization: Normalization,
    pub columns: Vec<FittedColumn>,
    pub label_names: Vec<String>,
    /// Labels are integers used as-is rather than vocabulary indices.
    pub numeric_labels: bool,
}

fn parse_cell(cell: &str, column: &str, row: usize) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            Error::validation(format!(
                "non-numeric value '{cell}' in continuous column '{column}' (row {row})"
            ))
        })
}

impl Preprocessor {
    pub fn fit(table: &RawTable, config: &CsvConfig, rows: &[usize]) -> Result<Self> {
        let label_idx = table.column(&config.label_column)?;
        for c in &config.categorical {
            table.column(c)?;
        }
        let mut columns = Vec::new();
        for (ci, name) in table.header.iter().enumerate() {
            if ci == label_idx {
                continue;
            }
            let kind = if config.categorical.contains(name) {
                let mut cats: Vec<String> =
                    rows.iter().map(|&r| table.rows[r][ci].clone()).collect();
                cats.sort();
                cats.dedup();
                ColumnKind::Categorical { categories: cats }
            } else {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for &r in rows {
                    let v = parse_cell(&table.rows[r][ci], name, r)?;
                    min = min.min(v);
                    max = max.max(v);
                }
                ColumnKind::Continuous { min, max }
            };
            columns.push(FittedColumn {
                name: name.clone(),
                kind,
            });
        }
        let raw_labels: Vec<&str> = table.rows.iter().map(|r| r[label_idx].as_str()).collect();
        let numeric_labels = raw_labels.iter().all(|l| l.parse::<usize>().is_ok());
        let mut label_names: Vec<String> = raw_labels.iter().map(|s| s.to_string()).collect();
        if numeric_labels {
            label_names.sort_by_key(|l| l.parse::<usize>().unwrap_or(0));
        } else {
            label_names.sort();
        }
        label_names.dedup();
        Ok(Self {
            label_column: config.label_column.clone(),
            normalization: config.normalization,
            columns,
            label_names,
            numeric_labels,
        })
    }

    pub fn output_width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match &c.kind {
                ColumnKind::Continuous { .. } => 1,
                ColumnKind::Categorical { categories } => categories.len(),
            })
            .sum()
    }

    pub fn classes(&self) -> usize {
        if self.numeric_labels {
            self.label_names
                .iter()
                .filter_map(|l| l.parse::<usize>().ok())
                .max()
                .map_or(0, |m| m + 1)
        } else {
            self.label_names.len()
        }
    }

    fn scale(&self, v: f64, min: f64, max: f64) -> f64 {
        match self.normalization {
            Normalization::None => v,
            Normalization::MinMax if max > min => (v - min) / (max - min),
            Normalization::MinMax => 0.0,
        }
    }

    /// Inverse of the continuous-column scaling.
    pub fn denormalize(&self, column: usize, v: f64) -> Option<f64> {
        match (&self.columns.get(column)?.kind, self.normalization) {
            (ColumnKind::Continuous { .. }, Normalization::None) => Some(v),
            (ColumnKind::Continuous { min, max }, Normalization::MinMax) => {
                Some(min + v * (max - min))
            }
            _ => None,
        }
    }

    pub fn transform(&self, table: &RawTable) -> Result<(Matrix, Vec<usize>)> {
        let label_idx = table.column(&self.label_column)?;
        let index: BTreeMap<&str, usize> = table
            .header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.as_str(), i))
            .collect();
        let width = self.output_width();
        let mut data = Vec::with_capacity(table.rows.len() * width);
        let mut labels = Vec::with_capacity(table.rows.len());
        for (r, row) in table.rows.iter().enumerate() {
            for col in &self.columns {
                let ci = *index
                    .get(col.name.as_str())
                    .ok_or_else(|| Error::validation(format!("column '{}' missing", col.name)))?;
                match &col.kind {
                    ColumnKind::Continuous { min, max } => {
                        let v = parse_cell(&row[ci], &col.name, r)?;
                        data.push(self.scale(v, *min, *max));
                    }
                    ColumnKind::Categorical { categories } => {
                        let hit = categories.iter().position(|c| c == &row[ci]);
                        if hit.is_none() {
                            warn!("unseen category '{}' in column '{}' (row {r}); encoding as all zeros", row[ci], col.name);
                        }
                        data.extend((0..categories.len()).map(|j| {
                            if Some(j) == hit {
                                1.0
                            } else {
                                0.0
                            }
                        }));
                    }
                }
            }
            let raw = &row[label_idx];
            let y = if self.numeric_labels {
                raw.parse::<usize>().ok()
            } else {
                self.label_names.iter().position(|l| l == raw)
            };
            labels.push(
                y.ok_or_else(|| Error::validation(format!("unknown label '{raw}' (row {r})")))?,
            );
        }
        Ok((Matrix::from_vec(table.rows.len(), width, data)?, labels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularData {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub preprocessor: Preprocessor,
}

/// Reads a CSV and fits the preprocessing on all of its rows.
pub fn load_csv(path: &Path, config: &CsvConfig) -> Result<TabularData> {
    let table = RawTable::read(path)?;
    let rows: Vec<usize> = (0..table.rows.len()).collect();
    let preprocessor = Preprocessor::fit(&table, config, &rows)?;
    let (features, labels) = preprocessor.transform(&table)?;
    Ok(TabularData {
        features,
        labels,
        classes: preprocessor.classes(),
        preprocessor,
    })
}
