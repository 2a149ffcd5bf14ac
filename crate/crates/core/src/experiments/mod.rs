//! Sweeps over missing rate, overlap, and imbalance, plus the convergence study.
//!
//! Every sweep expands into independent cells `(setting, seed, method)`.
//! Cells run on the rayon pool and are collected in expansion order, so
//! output files do not depend on the thread count.

pub mod cell;
pub mod convergence;
pub mod report;
mod sweeps;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cell::{CellData, CellScores, DataConfig, Method, TrainSetup};
pub use convergence::{run_convergence_study, ConvergenceReport, ConvergenceSpec, Problem};
pub use report::{emit_report, summarize, ResultRow, SummaryGroup, SweepSummary};
pub use sweeps::{run_imbalance, run_missing_sweep, run_overlap_sweep, DatasetRecord, SweepOutput};

use crate::error::{Error, Result};
use crate::inference::InferSpec;
use crate::losses::LossConfig;
use crate::models::ArchConfig;
use crate::optim::{OptimizerConfig, SgdConfig};

pub const DEFAULT_MISSING_RATES: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
pub const DEFAULT_OVERLAP_RATIOS: [f64; 3] = [0.2, 0.4, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingSweep {
    pub rates: Vec<f64>,
    pub overlap_ratio: f64,
}

impl Default for MissingSweep {
    fn default() -> Self {
        Self {
            rates: DEFAULT_MISSING_RATES.to_vec(),
            overlap_ratio: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapSweep {
    pub ratios: Vec<f64>,
    pub missing_rate: f64,
}

impl Default for OverlapSweep {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_OVERLAP_RATIOS.to_vec(),
            missing_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImbalanceSpec {
    /// Usable-sample share per client.
    pub fractions: Vec<f64>,
    pub missing_rate: f64,
    pub overlap_ratio: f64,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        Self {
            fractions: vec![0.8, 0.2],
            missing_rate: 0.5,
            overlap_ratio: 0.1,
        }
    }
}

/// Declared `λ` grids; X-VFL cells are repeated for every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// First seed; cells use `seed, seed+1, …`.
    pub seed: u64,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub steps: usize,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub lambda_grid: Option<LambdaGrid>,
    /// Writes each trained X-VFL bundle as a checkpoint under `models/`.
    pub save_models: bool,
    pub missing: MissingSweep,
    pub overlap: OverlapSweep,
    pub imbalance: ImbalanceSpec,
    pub convergence: ConvergenceSpec,
    /// Batch prediction job for `run infer`.
    pub infer: Option<InferSpec>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 5,
            methods: vec![Method::Xvfl, Method::Standalone, Method::VanillaVfl],
            steps: 2000,
            data: DataConfig::default(),
            arch: ArchConfig {
                embed_dim: 32,
                bottom_hidden: vec![64, 64],
                top_hidden: vec![64, 64],
                xcom_hidden: None,
            },
            loss: LossConfig {
                lambda1: 0.01,
                lambda2: 0.01,
                xcom_self_input: true,
            },
            optimizer: OptimizerConfig::Sgd(SgdConfig {
                eta: 0.05,
                batch: 50,
            }),
            lambda_grid: None,
            save_models: false,
            missing: MissingSweep::default(),
            overlap: OverlapSweep::default(),
            imbalance: ImbalanceSpec::default(),
            convergence: ConvergenceSpec::default(),
            infer: None,
        }
    }
}

fn check_unit(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config(format!("{name} grid is empty")));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::config(format!("{name} value {v} not in [0,1]")));
    }
    Ok(())
}

impl SweepSpec {
    /// Defaults for `k` clients: batch 50 for two clients, 100 otherwise.
    pub fn for_clients(k: usize) -> Self {
        let mut s = Self::default();
        s.data.clients = k;
        s.optimizer = OptimizerConfig::Sgd(SgdConfig {
            eta: 0.05,
            batch: if k <= 2 { 50 } else { 100 },
        });
        s
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| self.seed + r).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("replicates must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods selected"));
        }
        self.data.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        check_unit("missing.rates", &self.missing.rates)?;
        check_unit("missing.overlap_ratio", &[self.missing.overlap_ratio])?;
        check_unit("overlap.ratios", &self.overlap.ratios)?;
        check_unit("overlap.missing_rate", &[self.overlap.missing_rate])?;
        check_unit("imbalance.missing_rate", &[self.imbalance.missing_rate])?;
        check_unit("imbalance.overlap_ratio", &[self.imbalance.overlap_ratio])?;
        if self.imbalance.fractions.len() != self.data.clients {
            return Err(Error::config(format!(
                "imbalance.fractions has {} entries for {} clients",
                self.imbalance.fractions.len(),
                self.data.clients
            )));
        }
        if let Some(g) = &self.lambda_grid {
            if g.lambda1.is_empty() || g.lambda2.is_empty() {
                return Err(Error::config("lambda_grid needs values for both lambdas"));
            }
            for l in self.loss_variants() {
                l.validate()?;
            }
        }
        self.convergence.validate()
    }

    /// Loss configurations an X-VFL cell is trained with.
    pub fn loss_variants(&self) -> Vec<LossConfig> {
        match &self.lambda_grid {
            None => vec![self.loss.clone()],
            Some(g) => g
                .lambda1
                .iter()
                .flat_map(|&l1| {
                    g.lambda2.iter().map(move |&l2| LossConfig {
                        lambda1: l1,
                        lambda2: l2,
                        ..self.loss.clone()
                    })
                })
                .collect(),
        }
    }

    /// Layers the file and then the overrides over the defaults.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        let mut patch = toml::Table::new();
        for o in overrides {
            apply_override(&mut patch, o)?;
        }
        let mut root = toml::Table::try_from(Self::default())
            .map_err(|e| Error::config(format!("defaults: {e}")))?;
        merge_tables(&mut root, file);
        merge_tables(&mut root, patch);
        let spec: SweepSpec = toml::Value::Table(root)
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }
}

/// What a CLI run wrote, with enough identity to verify a rerun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    pub datasets: Vec<DatasetRecord>,
}

impl ExperimentManifest {
    pub fn new(command: &str, spec: &SweepSpec, datasets: Vec<DatasetRecord>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(spec)?,
            seed: spec.seed,
            config_hash: crate::protocol::config_hash(spec)?,
            datasets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Applies `dotted.key=value`; the value is read as TOML, falling back to a string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let (last, path) = parts.split_last().expect("nonempty");
    let mut table = root;
    for p in path {
        let entry = table
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    table.insert((*last).to_string(), value);
    Ok(())
}

/// Recursive merge; a table whose `kind` tag changes is replaced whole.
fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if o.get("kind").is_none_or(|k| b.get("kind") == Some(k)) =>
            {
                merge_tables(b, o)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let s = SweepSpec::default();
        assert_eq!(s.missing.rates, vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]);
        assert_eq!(s.overlap.ratios.len(), 3);
        assert_eq!(s.imbalance.fractions, vec![0.8, 0.2]);
        assert_eq!(s.seeds(), vec![0, 1, 2, 3, 4]);
        s.validate().unwrap();
    }

    #[test]
    fn batch_defaults_follow_client_count() {
        let batch = |k| match SweepSpec::for_clients(k).optimizer {
            OptimizerConfig::Sgd(c) => c.batch,
            OptimizerConfig::Page(_) => unreachable!(),
        };
        assert_eq!(batch(2), 50);
        assert_eq!(batch(4), 100);
    }

    #[test]
    fn toml_with_overrides() {
        let text = r#"
            seed = 7
            steps = 10
            [data]
            n = 100
            [optimizer]
            kind = "sgd"
            eta = 0.1
            batch = 8
        "#;
        let s = SweepSpec::from_toml_str(
            text,
            &["data.separation=4.5".into(), "loss.lambda1=0.2".into()],
        )
        .unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.data.n, 100);
        assert_eq!(s.data.separation, 4.5);
        assert_eq!(s.loss.lambda1, 0.2);
        assert_eq!(s.loss.lambda2, 0.0 + LossConfig::default().lambda2);
        assert_eq!(
            s.optimizer,
            OptimizerConfig::Sgd(SgdConfig { eta: 0.1, batch: 8 })
        );
    }

    #[test]
    fn partial_tagged_tables_merge_with_defaults() {
        let s = SweepSpec::from_toml_str(
            "",
            &[
                "optimizer.eta=0.2".into(),
                "convergence.problem.dim=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(
            s.optimizer,
            OptimizerConfig::Sgd(SgdConfig {
                eta: 0.2,
                batch: 50
            })
        );
        assert!(matches!(
            s.convergence.problem,
            Problem::Quadratic { dim: 4, .. }
        ));
        let text = "[optimizer]\nkind = \"page\"\neta = 0.1\np = 0.5\nb = 10\nb_prime = 2\n";
        let s = SweepSpec::from_toml_str(text, &[]).unwrap();
        assert_eq!(s.optimizer.name(), "page");
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            SweepSpec::from_toml_str("bogus = 1", &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SweepSpec::from_toml_str("", &["missing.rates=[1.5]".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SweepSpec::from_toml_str("", &["novalue".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SweepSpec::from_toml_str("", &["loss.lambda1=-1".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lambda_grid_expands_product() {
        let s = SweepSpec {
            lambda_grid: Some(LambdaGrid {
                lambda1: vec![0.01, 0.02],
                lambda2: vec![1e-5, 2e-5, 5e-5],
            }),
            ..SweepSpec::default()
        };
        s.validate().unwrap();
        let v = s.loss_variants();
        assert_eq!(v.len(), 6);
        assert_eq!((v[4].lambda1, v[4].lambda2), (0.02, 2e-5));
    }
}
