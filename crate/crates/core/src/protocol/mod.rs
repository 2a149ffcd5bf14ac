//! Round-based training orchestration.
//!
//! Each optimizer step is one communication round: clients send embeddings
//! and reconstructions, the server evaluates the objective and returns
//! cut-layer gradients. Traffic is recorded in a [`Ledger`].

mod baselines;
mod ledger;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use baselines::{
    baseline_train, BaselineFit, BaselineKind, BaselineModel, StandaloneModel, VanillaVflModel,
};
pub use ledger::{Ledger, Message, Party, Payload, BYTES_PER_REAL};

use crate::dataset::VerticalDataset;
use crate::error::{Error, Result};
use crate::losses::{self, EmbeddingSet, LossBreakdown, LossConfig, Node};
use crate::models::{Checkpoint, ModelBundle};
use crate::optim::{self, Branch, Objective, OptimizerConfig, PageState, Sampler};
use crate::rng::Rng;

/// Who holds what.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub k: usize,
    pub client_dims: Vec<usize>,
}

impl Topology {
    pub fn of(data: &VerticalDataset) -> Result<Self> {
        let t = Self {
            k: data.k(),
            client_dims: data.client_dims(),
        };
        if t.k == 0 {
            return Err(Error::config("topology needs at least one client"));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone)]
struct EvalTrace {
    breakdown: LossBreakdown,
    node_rows: BTreeMap<Node, usize>,
}

/// The combined objective over row indices of a dataset.
pub struct XvflObjective<'a> {
    data: &'a VerticalDataset,
    template: ModelBundle,
    loss: LossConfig,
    trace: RefCell<Vec<EvalTrace>>,
}

impl<'a> XvflObjective<'a> {
    pub fn new(
        data: &'a VerticalDataset,
        template: &ModelBundle,
        loss: &LossConfig,
    ) -> Result<Self> {
        loss.validate()?;
        data.validate()?;
        if data.n() == 0 {
            return Err(Error::config("empty training set"));
        }
        if data.client_dims() != template.client_dims() || data.classes != template.classes() {
            return Err(Error::Dimension {
                op: "xvfl objective",
                left: (data.k(), data.classes),
                right: (template.k(), template.classes()),
            });
        }
        Ok(Self {
            data,
            template: template.clone(),
            loss: loss.clone(),
            trace: RefCell::new(Vec::new()),
        })
    }

    pub fn bundle(&self, theta: &[f64]) -> Result<ModelBundle> {
        self.template.with_params(theta)
    }

    fn eval(&self, theta: &[f64], batch: &VerticalDataset) -> Result<(f64, Vec<f64>)> {
        let bundle = self.template.with_params(theta)?;
        let terms = losses::objective_terms(batch, &self.loss)?;
        let eval = losses::evaluate(&bundle, batch, &terms, true)?;
        let grad = eval
            .grad
            .as_ref()
            .map(ModelBundle::flatten)
            .unwrap_or_default();
        self.trace.borrow_mut().push(EvalTrace {
            breakdown: losses::breakdown(&eval.terms),
            node_rows: eval.node_rows,
        });
        Ok((eval.total, grad))
    }

    fn take_trace(&self) -> Vec<EvalTrace> {
        std::mem::take(&mut *self.trace.borrow_mut())
    }
}

impl Objective for XvflObjective<'_> {
    type Sample = usize;

    fn dim(&self) -> usize {
        self.template.param_count()
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        rng.random_range(0..self.data.n())
    }

    fn loss_grad(&self, theta: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, &self.data.select(batch))
    }

    fn full_loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let out = self.eval(theta, self.data);
        self.trace.borrow_mut().pop();
        out
    }
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub branch: Branch,
    pub grad_evals: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub decision: f64,
    pub align1: f64,
    pub align2: f64,
    pub self_input: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    pub checkpoints: Option<CheckpointPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final bundle, or the last finite one on divergence.
    pub bundle: ModelBundle,
    pub logs: Vec<RoundLog>,
    pub ledger: Ledger,
    pub status: TrainStatus,
    pub checkpoints: Vec<PathBuf>,
    /// Wall-clock seconds per round; kept out of [`RoundLog`].
    pub wall_time: Vec<f64>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

pub fn checkpoint_cadence(steps: usize) -> usize {
    (steps / 20).max(1)
}

/// `T` rounds of the chosen optimizer on batches sampled with replacement.
pub fn train(
    data: &VerticalDataset,
    bundle: &ModelBundle,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.optimizer.validate()?;
    let obj = XvflObjective::new(data, bundle, loss)?;
    let e = bundle.embed_dim();
    let mut theta = bundle.flatten();
    let mut sampler = Sampler::new(config.seed);
    let mut out = TrainOutcome {
        bundle: bundle.clone(),
        logs: Vec::with_capacity(config.steps),
        ledger: Ledger::default(),
        status: TrainStatus::Completed,
        checkpoints: Vec::new(),
        wall_time: Vec::with_capacity(config.steps),
    };
    if config.steps == 0 {
        return Ok(out);
    }
    let cadence = checkpoint_cadence(config.steps);
    let mut page = None;
    let mut pending = None;
    if let OptimizerConfig::Page(c) = &config.optimizer {
        match PageState::init(&obj, &theta, *c, &mut sampler, config.seed) {
            Ok(state) => {
                page = Some(state);
                let trace = obj.take_trace();
                record_traces(&mut out.ledger, 0, &trace, e);
                pending = trace.into_iter().next().map(|t| t.breakdown);
            }
            Err(Error::Diverged { step, reason }) => {
                out.status = TrainStatus::Diverged { step, reason };
            }
            Err(err) => return Err(err),
        }
    }
    if !out.diverged() {
        for t in 0..config.steps {
            let started = Instant::now();
            let result = match (&config.optimizer, page.as_mut()) {
                (OptimizerConfig::Sgd(c), _) => {
                    optim::sgd_step(&obj, &mut theta, c, &mut sampler, t)
                }
                (OptimizerConfig::Page(_), Some(state)) => {
                    optim::page_step(&obj, &mut theta, state, &mut sampler, t)
                }
                (OptimizerConfig::Page(_), None) => unreachable!("state initialised above"),
            };
            let trace = obj.take_trace();
            let step = match result {
                Ok(step) => step,
                Err(Error::Diverged { step, reason }) => {
                    out.status = TrainStatus::Diverged { step, reason };
                    break;
                }
                Err(err) => return Err(err),
            };
            record_traces(&mut out.ledger, t, &trace, e);
            let breakdown = match page {
                Some(_) => std::mem::replace(&mut pending, trace.first().map(|x| x.breakdown)),
                None => trace.first().map(|x| x.breakdown),
            }
            .unwrap_or_default();
            let (bytes_up, bytes_down) = out.ledger.round_bytes(t);
            out.logs.push(RoundLog {
                round: t,
                branch: step.record.branch,
                grad_evals: step.record.grad_evals,
                loss: step.record.loss,
                grad_norm_sq: step.record.grad_norm_sq,
                decision: breakdown.decision,
                align1: breakdown.align1,
                align2: breakdown.align2,
                self_input: breakdown.self_input,
                bytes_up,
                bytes_down,
            });
            out.wall_time.push(started.elapsed().as_secs_f64());
            if let Some(plan) = &config.checkpoints {
                if (t + 1) % cadence == 0 {
                    let path = plan.dir.join(format!("round_{:06}.json", t + 1));
                    Checkpoint::from_bundle(&obj.bundle(&theta)?, &plan.config_hash, t + 1)
                        .save(&path)?;
                    out.checkpoints.push(path);
                }
            }
        }
    }
    out.bundle = obj.bundle(&theta)?;
    if let (TrainStatus::Diverged { .. }, Some(plan)) = (&out.status, &config.checkpoints) {
        let path = plan.dir.join("last_good.json");
        Checkpoint::from_bundle(&out.bundle, &plan.config_hash, out.logs.len()).save(&path)?;
        out.checkpoints.push(path);
    }
    Ok(out)
}

fn record_traces(ledger: &mut Ledger, round: usize, trace: &[EvalTrace], embed_dim: usize) {
    for t in trace {
        ledger.record_evaluation(round, &t.node_rows, embed_dim);
    }
}

/// Embeddings and reconstructions the objective would read for `batch`.
pub fn forward_round(
    bundle: &ModelBundle,
    batch: &VerticalDataset,
    loss: &LossConfig,
) -> Result<EmbeddingSet> {
    let terms = losses::objective_terms(batch, loss)?;
    losses::forward_embeddings(bundle, batch, &terms)
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let text = serde_json::to_string(config)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_checksum: String,
    pub topology: Topology,
}

impl RunManifest {
    pub fn new<T: Serialize>(config: &T, seed: u64, data: &VerticalDataset) -> Result<Self> {
        Ok(Self {
            config: serde_json::to_value(config)?,
            seed,
            config_hash: config_hash(config)?,
            dataset_checksum: data.checksum(),
            topology: Topology::of(data)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes round logs as CSV with a fixed header.
pub fn write_round_logs(logs: &[RoundLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for log in logs {
        w.serialize(log)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
