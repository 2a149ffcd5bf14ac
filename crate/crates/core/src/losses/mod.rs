//! Decision losses, representation alignment, and the combined objective.
//!
//! ```text
//! L = L_dec + λ1 · DSAlign1 + λ2 · DSAlign2
//! ```
//!
//! `DSAlign1 = Σ_i MSE(h(Ẽ_i), h(E_i))` pulls each reconstruction towards the
//! real embedding; `DSAlign2 = Σ_i MSE(h(E_i), h(mean_j E_j))` pulls each
//! single-client prediction towards the joint one. Both use aligned samples
//! only and let gradients reach both arguments.

mod engine;
pub mod terms;

use serde::{Deserialize, Serialize};

use crate::dataset::VerticalDataset;
use crate::error::{Error, Result};
use crate::models::ModelBundle;

pub use engine::{evaluate, forward_embeddings, EmbeddingSet, Evaluation, Node, TermRecord};
pub use terms::{ClientSet, Term, TermKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Adds a decision term per partial client that completes its own
    /// masked features from its own embedding.
    pub xcom_self_input: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
            xcom_self_input: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Value of each loss component; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub decision: f64,
    pub align1: f64,
    pub align2: f64,
    pub self_input: f64,
}

pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub terms: Vec<TermRecord>,
    /// Gradient shaped like the bundle.
    pub grad: ModelBundle,
}

impl LossOutput {
    pub fn value(&self) -> f64 {
        self.breakdown.total
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        self.grad.flatten()
    }

    /// Number of samples that contributed to terms of the given kind.
    pub fn activations(&self, kind: &TermKind) -> usize {
        self.terms
            .iter()
            .filter(|t| &t.kind == kind)
            .map(|t| t.rows)
            .sum()
    }
}

pub fn breakdown(records: &[TermRecord]) -> LossBreakdown {
    let mut b = LossBreakdown::default();
    for r in records {
        let slot = match r.kind {
            TermKind::Decision { .. } => &mut b.decision,
            TermKind::SelfInput { .. } => &mut b.self_input,
            TermKind::Align1 { .. } => &mut b.align1,
            TermKind::Align2 { .. } => &mut b.align2,
        };
        *slot += r.value;
        b.total += r.weight * r.value;
    }
    b
}

fn run(bundle: &ModelBundle, batch: &VerticalDataset, terms: &[Term]) -> Result<LossOutput> {
    let eval = evaluate(bundle, batch, terms, true)?;
    Ok(LossOutput {
        breakdown: breakdown(&eval.terms),
        terms: eval.terms,
        grad: eval.grad.expect("gradient requested"),
    })
}

/// Two-client decision loss.
pub fn decision_loss_2client(bundle: &ModelBundle, batch: &VerticalDataset) -> Result<LossOutput> {
    let terms = terms::group(&terms::activation_2client(batch)?, |_| 1.0);
    run(bundle, batch, &terms)
}

/// `k`-client decision loss; identical to [`decision_loss_2client`] at `k = 2`.
pub fn decision_loss_k(bundle: &ModelBundle, batch: &VerticalDataset) -> Result<LossOutput> {
    let terms = terms::group(&terms::activation_k(batch)?, |_| 1.0);
    run(bundle, batch, &terms)
}

pub fn dsalign1(bundle: &ModelBundle, batch: &VerticalDataset) -> Result<LossOutput> {
    run(bundle, batch, &terms::align1_terms(batch, 1.0))
}

pub fn dsalign2(bundle: &ModelBundle, batch: &VerticalDataset) -> Result<LossOutput> {
    run(bundle, batch, &terms::align2_terms(batch, 1.0))
}

/// All terms of the combined objective for a batch.
pub fn objective_terms(batch: &VerticalDataset, config: &LossConfig) -> Result<Vec<Term>> {
    config.validate()?;
    let mut all = terms::group(&terms::activation_k(batch)?, |_| 1.0);
    if config.xcom_self_input {
        all.extend(terms::self_input_terms(batch));
    }
    if config.lambda1 > 0.0 {
        all.extend(terms::align1_terms(batch, config.lambda1));
    }
    if config.lambda2 > 0.0 {
        all.extend(terms::align2_terms(batch, config.lambda2));
    }
    Ok(all)
}

/// Combined objective with its gradient.
pub fn total_loss(
    bundle: &ModelBundle,
    batch: &VerticalDataset,
    config: &LossConfig,
) -> Result<LossOutput> {
    run(bundle, batch, &objective_terms(batch, config)?)
}

/// Combined objective without a backward pass.
pub fn total_loss_value(
    bundle: &ModelBundle,
    batch: &VerticalDataset,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let eval = evaluate(bundle, batch, &objective_terms(batch, config)?, false)?;
    Ok(breakdown(&eval.terms))
}
