//! SGD-type and PAGE-type updates over a flat parameter vector.
//!
//! PAGE keeps a running estimator `g`. After each update it either
//! refreshes `g` with a size-`b` minibatch (probability `p`) or corrects it
//! with one size-`b′` minibatch evaluated at the new and the previous
//! iterate.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{linear_forward, softmax_cross_entropy, Matrix};
use crate::rng::{self, Rng};

/// A differentiable objective with a stochastic sample model.
pub trait Objective {
    type Sample: Clone;

    fn dim(&self) -> usize;

    fn draw(&self, rng: &mut Rng) -> Self::Sample;

    /// Loss and gradient averaged over `batch`.
    fn loss_grad(&self, theta: &[f64], batch: &[Self::Sample]) -> Result<(f64, Vec<f64>)>;

    /// Exact loss and gradient of the population objective.
    fn full_loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff_norm_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A drawn minibatch with a sequence number for bookkeeping.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub id: u64,
    pub samples: Vec<S>,
}

/// Source of minibatches on the `optim/batch` stream.
pub struct Sampler {
    rng: Rng,
    next_id: u64,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng::stream(seed, "optim/batch"),
            next_id: 0,
        }
    }

    pub fn draw<O: Objective>(&mut self, obj: &O, size: usize) -> Batch<O::Sample> {
        let samples = (0..size).map(|_| obj.draw(&mut self.rng)).collect();
        let id = self.next_id;
        self.next_id += 1;
        Batch { id, samples }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Sgd,
    /// PAGE refresh with a size-`b` minibatch.
    Refresh,
    /// PAGE recursive correction with a size-`b′` minibatch.
    Correction,
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub branch: Branch,
    /// Stochastic-gradient evaluations spent by this step, counted in samples.
    pub grad_evals: usize,
    /// `‖g‖²` of the direction applied.
    pub grad_norm_sq: f64,
    /// Minibatch loss at the iterate the direction was computed at.
    pub loss: f64,
    pub batch_id: u64,
}

/// A step's record together with the direction it applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub record: StepRecord,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageConfig {
    pub eta: f64,
    pub p: f64,
    pub b: usize,
    pub b_prime: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) || self.batch == 0 {
            return Err(Error::config(format!("invalid SGD config {self:?}")));
        }
        Ok(())
    }
}

impl PageConfig {
    /// `p = b′/(b+b′)`.
    pub fn auto(eta: f64, b: usize, b_prime: usize) -> Self {
        Self {
            eta,
            p: b_prime as f64 / (b + b_prime) as f64,
            b,
            b_prime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta.is_finite()
            && self.eta >= 0.0
            && self.p > 0.0
            && self.p <= 1.0
            && self.b_prime >= 1
            && self.b >= self.b_prime;
        if !ok {
            return Err(Error::config(format!("invalid PAGE config {self:?}")));
        }
        Ok(())
    }

    /// Expected evaluations per step, `p·b + (1−p)·b′`.
    pub fn expected_evals(&self) -> f64 {
        self.p * self.b as f64 + (1.0 - self.p) * self.b_prime as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Page(PageConfig),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd(c) => c.validate(),
            OptimizerConfig::Page(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd(_) => "sgd",
            OptimizerConfig::Page(_) => "page",
        }
    }
}

fn check_finite(step: usize, loss: f64, g: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("non-finite loss {loss}"),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(())
}

fn descend(theta: &mut [f64], eta: f64, g: &[f64]) {
    for (t, gi) in theta.iter_mut().zip(g) {
        *t -= eta * gi;
    }
}

/// `θ ← θ − η·g` with `g` the gradient on a fresh minibatch. On a
/// non-finite gradient `θ` is left untouched.
pub fn sgd_step<O: Objective>(
    obj: &O,
    theta: &mut [f64],
    config: &SgdConfig,
    sampler: &mut Sampler,
    step: usize,
) -> Result<Step> {
    let batch = sampler.draw(obj, config.batch);
    let (loss, g) = obj.loss_grad(theta, &batch.samples)?;
    check_finite(step, loss, &g)?;
    descend(theta, config.eta, &g);
    Ok(Step {
        record: StepRecord {
            step,
            branch: Branch::Sgd,
            grad_evals: config.batch,
            grad_norm_sq: norm_sq(&g),
            loss,
            batch_id: batch.id,
        },
        direction: g,
    })
}

/// PAGE estimator state.
pub struct PageState {
    pub config: PageConfig,
    /// Estimator at the current iterate.
    pub g: Vec<f64>,
    /// Loss on the batch that produced the last refresh or correction.
    pub loss: f64,
    pub batch_id: u64,
    coin: Rng,
    /// Batch id of every gradient evaluation, in order.
    pub trace: Vec<u64>,
}

impl PageState {
    /// `g⁰` from a size-`b` minibatch at `θ⁰`; costs `b` evaluations.
    pub fn init<O: Objective>(
        obj: &O,
        theta: &[f64],
        config: PageConfig,
        sampler: &mut Sampler,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let batch = sampler.draw(obj, config.b);
        let (loss, g) = obj.loss_grad(theta, &batch.samples)?;
        check_finite(0, loss, &g)?;
        Ok(Self {
            config,
            g,
            loss,
            batch_id: batch.id,
            coin: rng::stream(seed, "optim/coin"),
            trace: vec![batch.id],
        })
    }

    pub fn init_evals(&self) -> usize {
        self.config.b
    }
}

/// Applies `θ ← θ − η·g`, then moves the estimator to the new iterate.
pub fn page_step<O: Objective>(
    obj: &O,
    theta: &mut Vec<f64>,
    state: &mut PageState,
    sampler: &mut Sampler,
    step: usize,
) -> Result<Step> {
    let applied = state.g.clone();
    let applied_loss = state.loss;
    let applied_id = state.batch_id;
    let mut next = theta.clone();
    descend(&mut next, state.config.eta, &applied);
    let u: f64 = state.coin.random();
    let (branch, evals) = if u < state.config.p {
        let batch = sampler.draw(obj, state.config.b);
        let (loss, g) = obj.loss_grad(&next, &batch.samples)?;
        check_finite(step, loss, &g)?;
        state.trace.push(batch.id);
        state.g = g;
        state.loss = loss;
        state.batch_id = batch.id;
        (Branch::Refresh, state.config.b)
    } else {
        let batch = sampler.draw(obj, state.config.b_prime);
        let (loss, g_new) = obj.loss_grad(&next, &batch.samples)?;
        let (_, g_old) = obj.loss_grad(theta, &batch.samples)?;
        state.trace.extend([batch.id, batch.id]);
        let g: Vec<f64> = state
            .g
            .iter()
            .zip(&g_new)
            .zip(&g_old)
            .map(|((p, n), o)| p + n - o)
            .collect();
        check_finite(step, loss, &g)?;
        state.g = g;
        state.loss = loss;
        state.batch_id = batch.id;
        (Branch::Correction, state.config.b_prime)
    };
    *theta = next;
    Ok(Step {
        record: StepRecord {
            step,
            branch,
            grad_evals: evals,
            grad_norm_sq: norm_sq(&applied),
            loss: applied_loss,
            batch_id: applied_id,
        },
        direction: applied,
    })
}

/// Step sizes and batch sizes from the rate theorems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremDefaults {
    pub sgd: SgdConfig,
    pub page: PageConfig,
}

fn ceil_guarded(x: f64) -> usize {
    // 2σ²/ε² lands a few ulps off an integer for decimal inputs
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// SGD: `η = min{2/β̂, √(2Δ̂₀/(β̂σ̂²T))}` with single-sample batches.
/// PAGE: `η = 1/(2β̂)`, `b = ⌈2σ̂²/ε²⌉`, `b′ = ⌈√b⌉`, `p = b′/(b+b′)`.
pub fn theorem_defaults(
    target_eps: f64,
    beta_hat: f64,
    sigma_hat: f64,
    delta0_hat: f64,
    t: usize,
) -> Result<TheoremDefaults> {
    let positive = [target_eps, beta_hat, sigma_hat, delta0_hat]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
    if !positive || t == 0 {
        return Err(Error::config(
            "theorem defaults need positive estimates and T >= 1",
        ));
    }
    let sigma2 = sigma_hat * sigma_hat;
    let eta_sgd = (2.0 / beta_hat).min((2.0 * delta0_hat / (beta_hat * sigma2 * t as f64)).sqrt());
    let b = ceil_guarded(2.0 * sigma2 / (target_eps * target_eps)).max(1);
    let b_prime = ceil_guarded((b as f64).sqrt()).max(1);
    Ok(TheoremDefaults {
        sgd: SgdConfig {
            eta: eta_sgd,
            batch: 1,
        },
        page: PageConfig::auto(1.0 / (2.0 * beta_hat), b, b_prime),
    })
}

/// Estimates of the smoothness constant, gradient-noise variance, and
/// initial suboptimality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub beta_hat: f64,
    pub sigma2_hat: f64,
    pub delta0_hat: f64,
}

impl Estimates {
    pub fn sigma_hat(&self) -> f64 {
        self.sigma2_hat.sqrt()
    }
}

/// Largest `‖g(θ₁)−g(θ₂)‖/‖θ₁−θ₂‖` over `pairs` probe pairs around `θ⁰`,
/// each pair sharing one sample.
pub fn estimate_beta<O: Objective>(
    obj: &O,
    theta0: &[f64],
    pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, "estimate/beta");
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let mut probe = || -> Vec<f64> {
            theta0
                .iter()
                .map(|t| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    t + radius * z
                })
                .collect()
        };
        let t1 = probe();
        let t2 = probe();
        let sample = vec![obj.draw(&mut r)];
        let (_, g1) = obj.loss_grad(&t1, &sample)?;
        let (_, g2) = obj.loss_grad(&t2, &sample)?;
        let dist = diff_norm_sq(&t1, &t2).sqrt();
        if dist > 0.0 {
            best = best.max(diff_norm_sq(&g1, &g2).sqrt() / dist);
        }
    }
    Ok(best)
}

/// Unbiased sample variance `Σ‖g_s − ḡ‖²/(n−1)` of single-sample gradients at `θ⁰`.
pub fn estimate_sigma2<O: Objective>(
    obj: &O,
    theta0: &[f64],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::config(
            "variance estimate needs at least two samples",
        ));
    }
    let mut r = rng::stream(seed, "estimate/sigma");
    let grads = (0..samples)
        .map(|_| obj.loss_grad(theta0, &[obj.draw(&mut r)]).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let d = theta0.len();
    let mut mean = vec![0.0; d];
    for g in &grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / samples as f64;
        }
    }
    Ok(grads.iter().map(|g| diff_norm_sq(g, &mean)).sum::<f64>() / (samples - 1) as f64)
}

/// `L(θ⁰)` minus the best full loss seen along a short SGD pilot.
pub fn estimate_delta0<O: Objective>(
    obj: &O,
    theta0: &[f64],
    pilot: &SgdConfig,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let (l0, _) = obj.full_loss_grad(theta0)?;
    let mut theta = theta0.to_vec();
    let mut sampler = Sampler::new(rng::derive_seed(seed, "estimate/delta0"));
    let mut best = l0;
    for step in 0..steps {
        match sgd_step(obj, &mut theta, pilot, &mut sampler, step) {
            Err(Error::Diverged { .. }) => break,
            other => {
                other?;
            }
        }
        let l = obj.full_loss_grad(&theta)?.0;
        if !l.is_finite() {
            break;
        }
        best = best.min(l);
    }
    Ok(l0 - best)
}

/// All three estimates with the default probe counts (32 pairs, 64 samples, 100 pilot steps).
pub fn estimate_all<O: Objective>(
    obj: &O,
    theta0: &[f64],
    pilot_eta: f64,
    seed: u64,
) -> Result<Estimates> {
    let beta_hat = estimate_beta(obj, theta0, 32, 0.1, seed)?;
    let sigma2_hat = estimate_sigma2(obj, theta0, 64, seed)?;
    let pilot = SgdConfig {
        eta: pilot_eta,
        batch: 1,
    };
    let delta0_hat = estimate_delta0(obj, theta0, &pilot, 100, seed)?;
    Ok(Estimates {
        beta_hat,
        sigma2_hat,
        delta0_hat,
    })
}

/// Final iterate and per-step records of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub records: Vec<StepRecord>,
    /// Total stochastic-gradient evaluations, including PAGE's `g⁰`.
    pub grad_evals: usize,
}

/// Runs `steps` updates. `observe(t, θ_t, g_t)` sees every iterate with
/// the direction applied to it.
pub fn run<O, F>(
    obj: &O,
    config: &OptimizerConfig,
    theta0: &[f64],
    steps: usize,
    seed: u64,
    mut observe: F,
) -> Result<Trajectory>
where
    O: Objective,
    F: FnMut(usize, &[f64], &[f64]) -> Result<()>,
{
    config.validate()?;
    let mut theta = theta0.to_vec();
    let mut sampler = Sampler::new(seed);
    let mut records = Vec::with_capacity(steps);
    let mut grad_evals = 0;
    match config {
        OptimizerConfig::Sgd(c) => {
            for t in 0..steps {
                let before = theta.clone();
                let step = sgd_step(obj, &mut theta, c, &mut sampler, t)?;
                observe(t, &before, &step.direction)?;
                grad_evals += step.record.grad_evals;
                records.push(step.record);
            }
        }
        OptimizerConfig::Page(c) => {
            let mut state = PageState::init(obj, &theta, *c, &mut sampler, seed)?;
            grad_evals += state.init_evals();
            for t in 0..steps {
                observe(t, &theta, &state.g)?;
                let step = page_step(obj, &mut theta, &mut state, &mut sampler, t)?;
                // the estimator built for the unreached iterate T is not charged
                if t + 1 < steps {
                    grad_evals += step.record.grad_evals;
                }
                records.push(step.record);
            }
        }
    }
    Ok(Trajectory {
        theta,
        records,
        grad_evals,
    })
}

/// Time-averaged `‖g_t − ∇L(θ_t)‖²` of the directions a run applies.
pub fn estimator_error<O: Objective>(
    obj: &O,
    config: &OptimizerConfig,
    theta0: &[f64],
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    run(obj, config, theta0, steps, seed, |_, theta, g| {
        sum += diff_norm_sq(g, &obj.full_loss_grad(theta)?.1);
        Ok(())
    })?;
    Ok(sum / steps.max(1) as f64)
}

/// `L(θ) = ½ Σ_j λ_j θ_j²` with stochastic gradients
/// `λ ⊙ a ⊙ θ + z`, `a_j ~ 1 + m·N(0,1)`, `z ~ N(0, σ²/d · I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyQuadratic {
    pub lambda: Vec<f64>,
    /// Additive noise variance `E‖z‖²`.
    pub sigma2: f64,
    /// Multiplicative noise scale `m`.
    pub mult: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadSample {
    pub a: Vec<f64>,
    pub z: Vec<f64>,
}

impl NoisyQuadratic {
    /// Curvatures log-spaced over `[10^lo, 1]`.
    pub fn log_spaced(d: usize, lo: f64, sigma2: f64, mult: f64) -> Self {
        let lambda = (0..d)
            .map(|j| {
                let f = if d > 1 {
                    j as f64 / (d - 1) as f64
                } else {
                    1.0
                };
                10f64.powf(lo * (1.0 - f))
            })
            .collect();
        Self {
            lambda,
            sigma2,
            mult,
        }
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * self
            .lambda
            .iter()
            .zip(theta)
            .map(|(l, t)| l * t * t)
            .sum::<f64>()
    }
}

impl Objective for NoisyQuadratic {
    type Sample = QuadSample;

    fn dim(&self) -> usize {
        self.lambda.len()
    }

    fn draw(&self, rng: &mut Rng) -> QuadSample {
        let d = self.dim();
        let zs = (self.sigma2 / d as f64).sqrt();
        let mut a = Vec::with_capacity(d);
        let mut z = Vec::with_capacity(d);
        for _ in 0..d {
            let na: f64 = StandardNormal.sample(rng);
            let nz: f64 = StandardNormal.sample(rng);
            a.push(1.0 + self.mult * na);
            z.push(zs * nz);
        }
        QuadSample { a, z }
    }

    fn loss_grad(&self, theta: &[f64], batch: &[QuadSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let mut g = vec![0.0; self.dim()];
        let w = 1.0 / batch.len() as f64;
        for s in batch {
            for j in 0..g.len() {
                g[j] += w * (self.lambda[j] * s.a[j] * theta[j] + s.z[j]);
            }
        }
        Ok((self.loss(theta), g))
    }

    fn full_loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = self.lambda.iter().zip(theta).map(|(l, t)| l * t).collect();
        Ok((self.loss(theta), g))
    }
}

/// Multinomial logistic regression over a fixed design; samples are row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Logistic {
    fn unpack(&self, theta: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        let m = self.x.cols();
        let c = self.classes;
        if theta.len() != m * c + c {
            return Err(Error::validation("parameter length mismatch"));
        }
        Ok((
            Matrix::from_vec(m, c, theta[..m * c].to_vec())?,
            theta[m * c..].to_vec(),
        ))
    }

    fn eval(&self, theta: &[f64], rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (w, b) = self.unpack(theta)?;
        let x = self.x.select_rows(rows);
        let logits = linear_forward(&x, &w, &b)?;
        let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        let mut g = x.t_matmul(&dlogits)?.into_vec();
        g.extend(dlogits.col_sums());
        Ok((loss, g))
    }
}

impl Objective for Logistic {
    type Sample = usize;

    fn dim(&self) -> usize {
        self.x.cols() * self.classes + self.classes
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        rng.random_range(0..self.x.rows())
    }

    fn loss_grad(&self, theta: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, batch)
    }

    fn full_loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let rows: Vec<usize> = (0..self.x.rows()).collect();
        self.eval(theta, &rows)
    }
}
