//! One (method, setting, seed) job: build data, train, evaluate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_vertical, even_fractions, SplitSpec, SyntheticSpec, VerticalDataset};
use crate::error::{Error, Result};
use crate::inference::{
    argmax_rows, collaborative_logits, evaluate_accuracy, independent_logits, self_completed_logits,
};
use crate::losses::LossConfig;
use crate::models::{ArchConfig, ModelBundle};
use crate::optim::OptimizerConfig;
use crate::protocol::{self, baseline_train, BaselineKind, BaselineModel, TrainConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Xvfl,
    Standalone,
    VanillaVfl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Xvfl => "xvfl",
            Method::Standalone => "standalone",
            Method::VanillaVfl => "vanilla_vfl",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic task shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub features: usize,
    pub classes: usize,
    pub clients: usize,
    pub separation: f64,
    pub noise: f64,
    pub test_fraction: f64,
    /// Per-client feature shares; even when absent.
    pub feature_fractions: Option<Vec<f64>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            features: 16,
            classes: 4,
            clients: 2,
            separation: 9.0,
            noise: 1.0,
            test_fraction: 0.2,
            feature_fractions: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.features == 0 || self.classes == 0 || self.clients == 0 {
            return Err(Error::config(
                "data needs n >= 2 and positive features, classes, clients",
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!(
                "test_fraction {} not in (0,1)",
                self.test_fraction
            )));
        }
        if self.features < self.clients {
            return Err(Error::config("fewer features than clients"));
        }
        Ok(())
    }

    fn fractions(&self) -> Vec<f64> {
        self.feature_fractions
            .clone()
            .unwrap_or_else(|| even_fractions(self.clients))
    }
}

/// Train and test halves sharing one vertical structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CellData {
    pub train: VerticalDataset,
    pub test: VerticalDataset,
}

/// Generates, splits, and masks the data of one seed.
pub fn prepare(
    data: &DataConfig,
    overlap_ratio: f64,
    missing_rate: f64,
    imbalance: Option<&[f64]>,
    seed: u64,
) -> Result<CellData> {
    data.validate()?;
    let spec = SyntheticSpec {
        separation: data.separation,
        noise: data.noise,
        ..SyntheticSpec::new(
            data.n,
            data.features,
            data.classes,
            rng::derive_seed(seed, "data"),
        )
    };
    let (x, labels) = spec.generate()?;
    let split = SplitSpec {
        overlap_ratio,
        missing_rate,
        imbalance: imbalance.map(<[f64]>::to_vec),
        seed: rng::derive_seed(seed, "split"),
    };
    let full = build_vertical(&x, labels, data.classes, &data.fractions(), &split)?;
    let mut order: Vec<usize> = (0..full.n()).collect();
    order.shuffle(&mut rng::stream(seed, "experiments/holdout"));
    let n_test = ((full.n() as f64 * data.test_fraction).round() as usize).clamp(1, full.n() - 1);
    let (test, train) = order.split_at(n_test);
    let mut test = test.to_vec();
    let mut train = train.to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(CellData {
        train: full.select(&train),
        test: full.select(&test),
    })
}

/// What one method is trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
}

pub enum Trained {
    Xvfl(ModelBundle),
    Baseline(BaselineModel),
}

/// Outcome of one trained cell on its test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    /// Client-alone accuracy per client over every test row.
    pub independent: Vec<f64>,
    pub collaborative: f64,
    pub diverged: bool,
}

impl CellScores {
    pub fn independent_mean(&self) -> f64 {
        self.independent.iter().sum::<f64>() / self.independent.len() as f64
    }

    pub fn gap(&self) -> f64 {
        (self.collaborative - self.independent_mean()).abs()
    }
}

pub fn train_method(
    method: Method,
    data: &VerticalDataset,
    setup: &TrainSetup,
    seed: u64,
) -> Result<(Trained, bool)> {
    match method {
        Method::Xvfl => {
            let bundle = ModelBundle::new(
                &setup.arch,
                &data.client_dims(),
                data.classes,
                rng::derive_seed(seed, "model"),
            )?;
            let cfg = TrainConfig {
                optimizer: setup.optimizer,
                steps: setup.steps,
                seed: rng::derive_seed(seed, "train"),
                checkpoints: None,
            };
            let out = protocol::train(data, &bundle, &setup.loss, &cfg)?;
            let diverged = out.diverged();
            Ok((Trained::Xvfl(out.bundle), diverged))
        }
        Method::Standalone | Method::VanillaVfl => {
            let kind = if method == Method::Standalone {
                BaselineKind::Standalone
            } else {
                BaselineKind::VanillaVfl
            };
            let fit = baseline_train(
                kind,
                data,
                &setup.arch,
                &setup.optimizer,
                setup.steps,
                rng::derive_seed(seed, "baseline"),
            )?;
            Ok((Trained::Baseline(fit.model), fit.diverged))
        }
    }
}

pub fn score(model: &Trained, test: &VerticalDataset) -> Result<CellScores> {
    let k = test.k();
    let mut independent = Vec::with_capacity(k);
    for i in 0..k {
        let pred = match model {
            Trained::Xvfl(b) => argmax_rows(&self_completed_logits(
                &b.client_view(i)?,
                &test.blocks[i],
                &test.masks[i],
            )?),
            Trained::Baseline(m) => m.predict_independent(i, &test.blocks[i])?,
        };
        independent.push(evaluate_accuracy(&pred, &test.labels)?);
    }
    let pred = match model {
        Trained::Xvfl(b) => argmax_rows(&collaborative_logits(b, &test.blocks, &test.masks)?),
        Trained::Baseline(m) => m.predict_collaborative(&test.blocks)?,
    };
    Ok(CellScores {
        independent,
        collaborative: evaluate_accuracy(&pred, &test.labels)?,
        diverged: false,
    })
}

/// Client-alone accuracy of an X-VFL bundle skipping completion: `h(f_i(x))`
/// on the sentinel-filled block.
pub fn zero_fill_accuracy(
    bundle: &ModelBundle,
    test: &VerticalDataset,
    client: usize,
) -> Result<f64> {
    let pred = argmax_rows(&independent_logits(
        &bundle.client_view(client)?,
        &test.blocks[client],
    )?);
    evaluate_accuracy(&pred, &test.labels)
}

pub fn run_cell(
    method: Method,
    data: &CellData,
    setup: &TrainSetup,
    seed: u64,
) -> Result<CellScores> {
    let (model, diverged) = train_method(method, &data.train, setup, seed)?;
    let mut s = score(&model, &data.test)?;
    s.diverged = diverged;
    Ok(s)
}
