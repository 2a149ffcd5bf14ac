//! Long-format result rows, their summary, and the files they are written to.
//!
//! CSV columns, in order: `sweep, method, seed, missing_rate, overlap_ratio,
//! imbalance, lambda1, lambda2, client, metric, value, config_hash`.
//! `client` is empty for metrics that are not per client; `lambda1` and
//! `lambda2` are empty for baselines. Metrics: `independent`, `collaborative`,
//! `gap`, `diverged`, and for imbalance runs `ab_gap` (`A − B`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Method;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 12] = [
    "sweep",
    "method",
    "seed",
    "missing_rate",
    "overlap_ratio",
    "imbalance",
    "lambda1",
    "lambda2",
    "client",
    "metric",
    "value",
    "config_hash",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep: String,
    pub method: Method,
    pub seed: u64,
    pub missing_rate: f64,
    pub overlap_ratio: f64,
    /// Usable-sample shares joined by `/`; empty outside imbalance runs.
    pub imbalance: String,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub client: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

/// Everything in a row except `seed` and `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupKey {
    pub method: Method,
    pub missing_rate: f64,
    pub overlap_ratio: f64,
    pub imbalance: String,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub client: Option<usize>,
    pub metric: String,
}

impl ResultRow {
    fn key(&self) -> GroupKey {
        GroupKey {
            method: self.method,
            missing_rate: self.missing_rate,
            overlap_ratio: self.overlap_ratio,
            imbalance: self.imbalance.clone(),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            client: self.client,
            metric: self.metric.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    #[serde(flatten)]
    pub key: GroupKey,
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sweep: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub groups: Vec<SummaryGroup>,
}

impl SweepSummary {
    pub fn find(
        &self,
        method: Method,
        metric: &str,
        pick: impl Fn(&GroupKey) -> bool,
    ) -> Option<&SummaryGroup> {
        self.groups
            .iter()
            .find(|g| g.key.method == method && g.key.metric == metric && pick(&g.key))
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Groups in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Result<SweepSummary> {
    let first = rows
        .first()
        .ok_or_else(|| Error::validation("no result rows to summarize"))?;
    let mut order: Vec<GroupKey> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut seeds = BTreeMap::new();
    for r in rows {
        seeds.insert(r.seed, ());
        let key = r.key();
        match order.iter().position(|k| *k == key) {
            Some(i) => values[i].push(r.value),
            None => {
                order.push(key);
                values.push(vec![r.value]);
            }
        }
    }
    let groups = order
        .into_iter()
        .zip(values)
        .map(|(key, v)| {
            let (mean, std) = mean_std(&v);
            SummaryGroup {
                key,
                count: v.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(SweepSummary {
        sweep: first.sweep.clone(),
        config_hash: first.config_hash.clone(),
        seeds: seeds.into_keys().collect(),
        groups,
    })
}

pub fn write_rows(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes `<sweep>.csv` and `<sweep>_summary.json` under `dir`.
pub fn emit_report(rows: &[ResultRow], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let summary = summarize(rows)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{}.csv", summary.sweep));
    let json_path = dir.join(format!("{}_summary.json", summary.sweep));
    write_rows(rows, &csv_path)?;
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}
