//! Rate study: `(1/T)·Σ_t ‖∇L(θ_t)‖²` against `T` for SGD and PAGE with
//! theorem-rule parameters, plus the evaluations needed to reach `ε²`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cell::{prepare, DataConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::{ArchConfig, ModelBundle};
use crate::optim::{
    self, estimate_all, estimate_beta, norm_sq, theorem_defaults, Estimates, NoisyQuadratic,
    Objective, OptimizerConfig,
};
use crate::protocol::XvflObjective;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    /// Noisy quadratic with curvatures log-spaced over `[10^lo, 1]`.
    Quadratic {
        dim: usize,
        lo: f64,
        sigma2: f64,
        mult: f64,
    },
    /// The X-VFL objective on a small synthetic instance.
    Xvfl {
        n: usize,
        features: usize,
        classes: usize,
        embed_dim: usize,
        overlap_ratio: f64,
        missing_rate: f64,
    },
}

impl Default for Problem {
    fn default() -> Self {
        Problem::Quadratic {
            dim: 10,
            lo: -0.5,
            sigma2: 1.0,
            mult: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Page,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub problem: Problem,
    pub optimizers: Vec<OptimizerKind>,
    pub t_grid: Vec<usize>,
    pub replicates: usize,
    /// Target `ε²`; sets PAGE's batch sizes and the reach threshold.
    pub eps2: f64,
    pub reach_start: usize,
    pub reach_max: usize,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            problem: Problem::default(),
            optimizers: vec![OptimizerKind::Sgd, OptimizerKind::Page],
            t_grid: (7..=13).map(|k| 1usize << k).collect(),
            replicates: 10,
            eps2: 1e-3,
            reach_start: 128,
            reach_max: 1 << 24,
        }
    }
}

impl ConvergenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_grid.len() < 2 || self.t_grid.contains(&0) {
            return Err(Error::config("t_grid needs at least two positive horizons"));
        }
        if self.replicates == 0 || self.optimizers.is_empty() {
            return Err(Error::config(
                "convergence study needs replicates and optimizers",
            ));
        }
        if !(self.eps2 > 0.0 && self.eps2.is_finite()) {
            return Err(Error::config(format!(
                "eps2 {} must be positive",
                self.eps2
            )));
        }
        if self.reach_start == 0 || self.reach_max < self.reach_start {
            return Err(Error::config(
                "reach_start must be positive and at most reach_max",
            ));
        }
        if let Problem::Quadratic {
            dim, sigma2, mult, ..
        } = self.problem
        {
            if dim == 0 || sigma2 < 0.0 || mult < 0.0 {
                return Err(Error::config(
                    "quadratic needs dim >= 1 and nonnegative noise",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCell {
    pub optimizer: OptimizerKind,
    pub t: usize,
    pub seed: u64,
    pub avg_grad_norm_sq: f64,
    pub grad_evals: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub optimizer: OptimizerKind,
    /// `None` when a horizon has a diverged replicate.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reach {
    pub optimizer: OptimizerKind,
    pub reached: bool,
    /// First doubling horizon whose replicate mean is at most `ε²`.
    pub t: usize,
    pub mean_avg_grad_norm_sq: f64,
    pub mean_grad_evals: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub estimates: Estimates,
    pub page: optim::PageConfig,
    pub cells: Vec<ConvergenceCell>,
    pub slopes: Vec<SlopeFit>,
    pub reach: Vec<Reach>,
    /// PAGE evaluations over SGD evaluations at reach, when both reached.
    pub eval_ratio: Option<f64>,
}

impl ConvergenceReport {
    pub fn slope(&self, kind: OptimizerKind) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.optimizer == kind)
            .and_then(|s| s.slope)
    }

    pub fn diverged(&self) -> bool {
        self.cells.iter().any(|c| c.diverged)
    }

    /// Writes `convergence.csv` (one row per cell) and `convergence_summary.json`.
    pub fn emit(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("convergence.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("convergence_summary.json");
        let summary = ConvergenceReport {
            cells: Vec::new(),
            ..self.clone()
        };
        std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)
            .map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

/// Least-squares slope and intercept of `ln y` on `ln x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 || y.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn estimates<O: Objective>(obj: &O, theta0: &[f64], seed: u64) -> Result<Estimates> {
    let seed = rng::derive_seed(seed, "convergence/estimates");
    let beta_hat = estimate_beta(obj, theta0, 32, 0.1, seed)?;
    estimate_all(obj, theta0, 1.0 / beta_hat.max(f64::MIN_POSITIVE), seed)
}

fn config_for(
    kind: OptimizerKind,
    est: &Estimates,
    eps2: f64,
    t: usize,
) -> Result<OptimizerConfig> {
    let d = theorem_defaults(
        eps2.sqrt(),
        est.beta_hat,
        est.sigma_hat(),
        est.delta0_hat,
        t,
    )?;
    Ok(match kind {
        OptimizerKind::Sgd => OptimizerConfig::Sgd(d.sgd),
        OptimizerKind::Page => OptimizerConfig::Page(d.page),
    })
}

fn run_cell<O: Objective>(
    obj: &O,
    theta0: &[f64],
    cfg: &OptimizerConfig,
    kind: OptimizerKind,
    t: usize,
    seed: u64,
) -> Result<ConvergenceCell> {
    let mut sum = 0.0;
    let result = optim::run(obj, cfg, theta0, t, seed, |_, theta, _| {
        sum += norm_sq(&obj.full_loss_grad(theta)?.1);
        Ok(())
    });
    match result {
        Ok(traj) => Ok(ConvergenceCell {
            optimizer: kind,
            t,
            seed,
            avg_grad_norm_sq: sum / t as f64,
            grad_evals: traj.grad_evals,
            diverged: !sum.is_finite(),
        }),
        Err(Error::Diverged { .. }) => Ok(ConvergenceCell {
            optimizer: kind,
            t,
            seed,
            avg_grad_norm_sq: f64::NAN,
            grad_evals: 0,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

fn study<O, F>(
    make: F,
    spec: &ConvergenceSpec,
    seed: u64,
    config_hash: &str,
) -> Result<ConvergenceReport>
where
    O: Objective,
    F: Fn() -> Result<(O, Vec<f64>)> + Sync,
{
    spec.validate()?;
    let (obj, theta0) = make()?;
    let est = estimates(&obj, &theta0, seed)?;
    let page = match config_for(OptimizerKind::Page, &est, spec.eps2, 1)? {
        OptimizerConfig::Page(p) => p,
        OptimizerConfig::Sgd(_) => unreachable!(),
    };
    let seeds: Vec<u64> = (0..spec.replicates as u64).map(|r| seed + r).collect();
    let horizon = |kind: OptimizerKind, t: usize| -> Result<Vec<ConvergenceCell>> {
        let cfg = config_for(kind, &est, spec.eps2, t)?;
        seeds
            .par_iter()
            .map(|&s| {
                let (obj, theta0) = make()?;
                run_cell(&obj, &theta0, &cfg, kind, t, s)
            })
            .collect()
    };
    let mean = |cells: &[ConvergenceCell], f: fn(&ConvergenceCell) -> f64| {
        cells.iter().map(f).sum::<f64>() / cells.len() as f64
    };

    let mut cells = Vec::new();
    let mut slopes = Vec::new();
    for &kind in &spec.optimizers {
        let mut means = Vec::with_capacity(spec.t_grid.len());
        for &t in &spec.t_grid {
            let c = horizon(kind, t)?;
            means.push(if c.iter().any(|x| x.diverged) {
                f64::NAN
            } else {
                mean(&c, |x| x.avg_grad_norm_sq)
            });
            cells.extend(c);
        }
        let ts: Vec<f64> = spec.t_grid.iter().map(|&t| t as f64).collect();
        let fit = loglog_fit(&ts, &means);
        slopes.push(SlopeFit {
            optimizer: kind,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            means: means
                .iter()
                .map(|m| if m.is_finite() { *m } else { -1.0 })
                .collect(),
        });
    }

    let mut reach = Vec::new();
    for &kind in &spec.optimizers {
        let mut t = spec.reach_start;
        let r = loop {
            let c = horizon(kind, t)?;
            let m = if c.iter().any(|x| x.diverged) {
                f64::INFINITY
            } else {
                mean(&c, |x| x.avg_grad_norm_sq)
            };
            let evals = mean(&c, |x| x.grad_evals as f64);
            if m <= spec.eps2 || t * 2 > spec.reach_max {
                break Reach {
                    optimizer: kind,
                    reached: m <= spec.eps2,
                    t,
                    mean_avg_grad_norm_sq: if m.is_finite() { m } else { -1.0 },
                    mean_grad_evals: evals,
                };
            }
            t *= 2;
        };
        reach.push(r);
    }
    let find = |k| {
        reach
            .iter()
            .find(|r: &&Reach| r.optimizer == k && r.reached)
    };
    let eval_ratio = match (find(OptimizerKind::Page), find(OptimizerKind::Sgd)) {
        (Some(p), Some(s)) => Some(p.mean_grad_evals / s.mean_grad_evals),
        _ => None,
    };
    Ok(ConvergenceReport {
        config_hash: config_hash.to_string(),
        seeds,
        estimates: est,
        page,
        cells,
        slopes,
        reach,
        eval_ratio,
    })
}

/// Runs the study on the configured problem; replicates use `seed, seed+1, …`.
pub fn run_convergence_study(
    spec: &ConvergenceSpec,
    seed: u64,
    config_hash: &str,
) -> Result<ConvergenceReport> {
    match &spec.problem {
        Problem::Quadratic {
            dim,
            lo,
            sigma2,
            mult,
        } => {
            let q = NoisyQuadratic::log_spaced(*dim, *lo, *sigma2, *mult);
            study(|| Ok((q.clone(), vec![1.0; *dim])), spec, seed, config_hash)
        }
        Problem::Xvfl {
            n,
            features,
            classes,
            embed_dim,
            overlap_ratio,
            missing_rate,
        } => {
            let data_cfg = DataConfig {
                n: *n,
                features: *features,
                classes: *classes,
                ..DataConfig::default()
            };
            let data = prepare(&data_cfg, *overlap_ratio, *missing_rate, None, seed)?.train;
            let arch = ArchConfig {
                embed_dim: *embed_dim,
                bottom_hidden: vec![*embed_dim],
                top_hidden: vec![*embed_dim],
                xcom_hidden: None,
            };
            let bundle = ModelBundle::new(
                &arch,
                &data.client_dims(),
                data.classes,
                rng::derive_seed(seed, "model"),
            )?;
            let loss = LossConfig::default();
            let theta0 = bundle.flatten();
            study(
                || Ok((XvflObjective::new(&data, &bundle, &loss)?, theta0.clone())),
                spec,
                seed,
                config_hash,
            )
        }
    }
}
