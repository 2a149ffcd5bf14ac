use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cell::{prepare, score, train_method, Method, TrainSetup, Trained};
use super::report::ResultRow;
use super::SweepSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::Checkpoint;
use crate::protocol::config_hash;

#[derive(Debug, Clone, PartialEq)]
struct Setting {
    missing_rate: f64,
    overlap_ratio: f64,
    imbalance: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Job {
    setting: usize,
    seed: u64,
    method: Method,
    loss: Option<LossConfig>,
}

/// Dataset identity of one `(setting, seed)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub missing_rate: f64,
    pub overlap_ratio: f64,
    pub seed: u64,
    pub train_checksum: String,
    pub test_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub datasets: Vec<DatasetRecord>,
    pub config_hash: String,
    pub diverged: bool,
}

fn imbalance_label(f: &Option<Vec<f64>>) -> String {
    f.as_ref()
        .map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join("/"))
        .unwrap_or_default()
}

fn run(
    spec: &SweepSpec,
    sweep: &str,
    settings: Vec<Setting>,
    models_dir: Option<&Path>,
) -> Result<SweepOutput> {
    spec.validate()?;
    let hash = config_hash(spec)?;
    let seeds = spec.seeds();
    let mut jobs = Vec::new();
    for (si, _) in settings.iter().enumerate() {
        for &seed in &seeds {
            for &method in &spec.methods {
                if method == Method::Xvfl {
                    for loss in spec.loss_variants() {
                        jobs.push(Job {
                            setting: si,
                            seed,
                            method,
                            loss: Some(loss),
                        });
                    }
                } else {
                    jobs.push(Job {
                        setting: si,
                        seed,
                        method,
                        loss: None,
                    });
                }
            }
        }
    }
    let datasets = settings
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(s, seed)| {
            let d = prepare(
                &spec.data,
                s.overlap_ratio,
                s.missing_rate,
                s.imbalance.as_deref(),
                *seed,
            )?;
            Ok(DatasetRecord {
                missing_rate: s.missing_rate,
                overlap_ratio: s.overlap_ratio,
                seed: *seed,
                train_checksum: d.train.checksum(),
                test_checksum: d.test.checksum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let results = jobs
        .par_iter()
        .map(|job| -> Result<(Vec<ResultRow>, bool)> {
            let s = &settings[job.setting];
            let data = prepare(
                &spec.data,
                s.overlap_ratio,
                s.missing_rate,
                s.imbalance.as_deref(),
                job.seed,
            )?;
            let setup = TrainSetup {
                arch: spec.arch.clone(),
                loss: job.loss.clone().unwrap_or_else(|| spec.loss.clone()),
                optimizer: spec.optimizer,
                steps: spec.steps,
            };
            let (model, diverged) = train_method(job.method, &data.train, &setup, job.seed)?;
            if let (Some(dir), Trained::Xvfl(bundle)) = (models_dir, &model) {
                let name = format!(
                    "{sweep}_m{}_o{}_{}s{}.json",
                    s.missing_rate,
                    s.overlap_ratio,
                    job.loss
                        .as_ref()
                        .map(|l| format!("l{}_{}_", l.lambda1, l.lambda2))
                        .unwrap_or_default(),
                    job.seed
                );
                Checkpoint::from_bundle(bundle, &hash, spec.steps).save(&dir.join(name))?;
            }
            let scores = score(&model, &data.test)?;
            let base = ResultRow {
                sweep: sweep.to_string(),
                method: job.method,
                seed: job.seed,
                missing_rate: s.missing_rate,
                overlap_ratio: s.overlap_ratio,
                imbalance: imbalance_label(&s.imbalance),
                lambda1: job.loss.as_ref().map(|l| l.lambda1),
                lambda2: job.loss.as_ref().map(|l| l.lambda2),
                client: None,
                metric: String::new(),
                value: 0.0,
                config_hash: hash.clone(),
            };
            let metric = |name: &str, client: Option<usize>, value: f64| ResultRow {
                metric: name.to_string(),
                client,
                value,
                ..base.clone()
            };
            let mut rows = vec![
                metric("independent", None, scores.independent_mean()),
                metric("collaborative", None, scores.collaborative),
                metric("gap", None, scores.gap()),
                metric("diverged", None, if diverged { 1.0 } else { 0.0 }),
            ];
            for (i, &a) in scores.independent.iter().enumerate() {
                rows.push(metric("independent", Some(i), a));
            }
            if s.imbalance.is_some() && scores.independent.len() >= 2 {
                rows.push(metric(
                    "ab_gap",
                    None,
                    scores.independent[0] - scores.independent[1],
                ));
            }
            Ok((rows, diverged))
        })
        .collect::<Result<Vec<_>>>()?;
    let diverged = results.iter().any(|(_, d)| *d);
    Ok(SweepOutput {
        rows: results.into_iter().flat_map(|(r, _)| r).collect(),
        datasets,
        config_hash: hash,
        diverged,
    })
}

fn models_dir(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<Option<PathBuf>> {
    match (spec.save_models, out_dir) {
        (true, Some(dir)) => {
            let d = dir.join("models");
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            Ok(Some(d))
        }
        (true, None) => Err(Error::config("save_models needs an output directory")),
        _ => Ok(None),
    }
}

/// Independent and collaborative accuracy over the missing-rate grid.
pub fn run_missing_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepOutput> {
    let settings = spec
        .missing
        .rates
        .iter()
        .map(|&r| Setting {
            missing_rate: r,
            overlap_ratio: spec.missing.overlap_ratio,
            imbalance: None,
        })
        .collect();
    run(
        spec,
        "missing",
        settings,
        models_dir(spec, out_dir)?.as_deref(),
    )
}

/// Accuracy over the overlap grid at a fixed missing rate.
pub fn run_overlap_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepOutput> {
    let settings = spec
        .overlap
        .ratios
        .iter()
        .map(|&o| Setting {
            missing_rate: spec.overlap.missing_rate,
            overlap_ratio: o,
            imbalance: None,
        })
        .collect();
    run(
        spec,
        "overlap",
        settings,
        models_dir(spec, out_dir)?.as_deref(),
    )
}

/// Per-client independent accuracy under unequal usable-sample shares.
pub fn run_imbalance(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepOutput> {
    let settings = vec![Setting {
        missing_rate: spec.imbalance.missing_rate,
        overlap_ratio: spec.imbalance.overlap_ratio,
        imbalance: Some(spec.imbalance.fractions.clone()),
    }];
    run(
        spec,
        "imbalance",
        settings,
        models_dir(spec, out_dir)?.as_deref(),
    )
}
