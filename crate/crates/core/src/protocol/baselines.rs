//! Comparison methods: per-client standalone models and concatenation VFL.

use serde::{Deserialize, Serialize};

use crate::dataset::{VerticalDataset, SENTINEL};
use crate::error::{Error, Result};
use crate::models::ArchConfig;
use crate::numkit::{softmax, softmax_cross_entropy, Matrix, Mlp};
use crate::optim::{self, Objective, OptimizerConfig};
use crate::rng::{self, Rng};

use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Standalone,
    VanillaVfl,
}

/// Bottoms for a subset of clients feeding one top through concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNet {
    pub clients: Vec<usize>,
    pub bottoms: Vec<Mlp>,
    pub top: Mlp,
}

impl SplitNet {
    fn new(
        arch: &ArchConfig,
        clients: Vec<usize>,
        dims: &[usize],
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bottoms = clients
            .iter()
            .map(|&c| Mlp::new(&arch.bottom_dims(dims[c]), rng))
            .collect::<Result<Vec<_>>>()?;
        let top = Mlp::new(&arch.top_dims(clients.len() * arch.embed_dim, classes), rng)?;
        Ok(Self {
            clients,
            bottoms,
            top,
        })
    }

    pub fn top_input_width(&self) -> usize {
        self.top.in_dim()
    }

    fn param_count(&self) -> usize {
        self.bottoms.iter().map(Mlp::param_count).sum::<usize>() + self.top.param_count()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.bottoms {
            b.flatten_into(&mut out);
        }
        self.top.flatten_into(&mut out);
        out
    }

    fn load(&mut self, theta: &[f64]) -> Result<()> {
        let mut at = 0;
        for b in self.bottoms.iter_mut() {
            at += b.load_from(&theta[at..])?;
        }
        at += self.top.load_from(&theta[at..])?;
        if at != theta.len() {
            return Err(Error::Dimension {
                op: "split net load",
                left: (at, 1),
                right: (theta.len(), 1),
            });
        }
        Ok(())
    }

    /// Logits from one input block per member client, in `clients` order.
    pub fn logits(&self, blocks: &[&Matrix]) -> Result<Matrix> {
        let embs = self
            .bottoms
            .iter()
            .zip(blocks)
            .map(|(b, x)| b.predict(x))
            .collect::<Result<Vec<_>>>()?;
        self.top
            .predict(&Matrix::hcat(&embs.iter().collect::<Vec<_>>())?)
    }

    fn loss_grad(&self, blocks: &[&Matrix], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut caches = Vec::with_capacity(self.bottoms.len());
        let mut embs = Vec::with_capacity(self.bottoms.len());
        for (b, x) in self.bottoms.iter().zip(blocks) {
            let (e, c) = b.forward(x)?;
            embs.push(e);
            caches.push(c);
        }
        let (logits, top_cache) = self
            .top
            .forward(&Matrix::hcat(&embs.iter().collect::<Vec<_>>())?)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let mut grads = Self {
            clients: self.clients.clone(),
            bottoms: self.bottoms.iter().map(Mlp::zeros_like).collect(),
            top: self.top.zeros_like(),
        };
        let dcat = self.top.backward(&top_cache, &dlogits, &mut grads.top)?;
        let widths: Vec<usize> = embs.iter().map(Matrix::cols).collect();
        for ((b, (c, d)), g) in self
            .bottoms
            .iter()
            .zip(caches.iter().zip(dcat.split_cols(&widths)?))
            .zip(grads.bottoms.iter_mut())
        {
            b.backward(c, &d, g)?;
        }
        Ok((loss, grads.flatten()))
    }
}

struct SplitObjective<'a> {
    data: &'a VerticalDataset,
    rows: Vec<usize>,
    template: SplitNet,
}

impl SplitObjective<'_> {
    fn eval(&self, theta: &[f64], rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut net = self.template.clone();
        net.load(theta)?;
        let blocks: Vec<Matrix> = net
            .clients
            .iter()
            .map(|&c| self.data.blocks[c].select_rows(rows))
            .collect();
        let labels: Vec<usize> = rows.iter().map(|&r| self.data.labels[r]).collect();
        net.loss_grad(&blocks.iter().collect::<Vec<_>>(), &labels)
    }
}

impl Objective for SplitObjective<'_> {
    type Sample = usize;

    fn dim(&self) -> usize {
        self.template.param_count()
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        self.rows[rng.random_range(0..self.rows.len())]
    }

    fn loss_grad(&self, theta: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, batch)
    }

    fn full_loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, &self.rows)
    }
}

fn fit(
    data: &VerticalDataset,
    rows: Vec<usize>,
    mut net: SplitNet,
    optimizer: &OptimizerConfig,
    steps: usize,
    seed: u64,
) -> Result<(SplitNet, bool)> {
    if rows.is_empty() {
        return Err(Error::config(format!(
            "no fully observed training rows for clients {:?}",
            net.clients
        )));
    }
    let theta0 = net.flatten();
    let obj = SplitObjective {
        data,
        rows,
        template: net.clone(),
    };
    let mut last = theta0.clone();
    let diverged = match optim::run(&obj, optimizer, &theta0, steps, seed, |_, theta, _| {
        last.copy_from_slice(theta);
        Ok(())
    }) {
        Ok(traj) => {
            last = traj.theta;
            false
        }
        Err(Error::Diverged { .. }) => true,
        Err(e) => return Err(e),
    };
    net.load(&last)?;
    Ok((net, diverged))
}

/// A trained baseline; on divergence the parameters are the last finite iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFit {
    pub model: BaselineModel,
    pub diverged: bool,
}

/// One bottom and top per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandaloneModel {
    pub nets: Vec<SplitNet>,
}

/// All bottoms concatenated into one top of width `k·e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaVflModel {
    pub net: SplitNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineModel {
    Standalone(StandaloneModel),
    VanillaVfl(VanillaVflModel),
}

fn argmax(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

impl BaselineModel {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineModel::Standalone(_) => BaselineKind::Standalone,
            BaselineModel::VanillaVfl(_) => BaselineKind::VanillaVfl,
        }
    }

    /// Prediction from client `i`'s block alone. Vanilla VFL fills the
    /// other clients' embedding inputs from sentinel blocks.
    pub fn predict_independent(&self, client: usize, block: &Matrix) -> Result<Vec<usize>> {
        match self {
            BaselineModel::Standalone(m) => {
                let net = m
                    .nets
                    .get(client)
                    .ok_or_else(|| Error::validation(format!("no client {client}")))?;
                Ok(argmax(&net.logits(&[block])?))
            }
            BaselineModel::VanillaVfl(m) => {
                let k = m.net.bottoms.len();
                if client >= k {
                    return Err(Error::validation(format!("no client {client}")));
                }
                let fills: Vec<Matrix> = m
                    .net
                    .bottoms
                    .iter()
                    .map(|b| Matrix::filled(block.rows(), b.in_dim(), SENTINEL))
                    .collect();
                let blocks: Vec<&Matrix> = (0..k)
                    .map(|c| if c == client { block } else { &fills[c] })
                    .collect();
                Ok(argmax(&m.net.logits(&blocks)?))
            }
        }
    }

    /// Prediction from all clients' blocks; standalone averages class probabilities.
    pub fn predict_collaborative(&self, blocks: &[Matrix]) -> Result<Vec<usize>> {
        match self {
            BaselineModel::Standalone(m) => {
                if blocks.len() != m.nets.len() || blocks.is_empty() {
                    return Err(Error::validation("one block per client required"));
                }
                let mut acc: Option<Matrix> = None;
                for (net, x) in m.nets.iter().zip(blocks) {
                    let p = softmax(&net.logits(&[x])?);
                    match acc.as_mut() {
                        Some(a) => a.add_assign(&p)?,
                        None => acc = Some(p),
                    }
                }
                Ok(argmax(&acc.expect("nonempty")))
            }
            BaselineModel::VanillaVfl(m) => {
                if blocks.len() != m.net.bottoms.len() {
                    return Err(Error::validation("one block per client required"));
                }
                Ok(argmax(&m.net.logits(&blocks.iter().collect::<Vec<_>>())?))
            }
        }
    }
}

/// Trains a baseline on the rows where its clients are fully observed.
pub fn baseline_train(
    kind: BaselineKind,
    data: &VerticalDataset,
    arch: &ArchConfig,
    optimizer: &OptimizerConfig,
    steps: usize,
    seed: u64,
) -> Result<BaselineFit> {
    optimizer.validate()?;
    data.validate()?;
    let dims = data.client_dims();
    let mut init = rng::stream(seed, "baseline/init");
    match kind {
        BaselineKind::Standalone => {
            let nets = (0..data.k())
                .map(|c| {
                    let net = SplitNet::new(arch, vec![c], &dims, data.classes, &mut init)?;
                    let rows = (0..data.n()).filter(|&s| data.is_full(c, s)).collect();
                    fit(
                        data,
                        rows,
                        net,
                        optimizer,
                        steps,
                        rng::derive_seed(seed, &format!("standalone/{c}")),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let diverged = nets.iter().any(|(_, d)| *d);
            Ok(BaselineFit {
                model: BaselineModel::Standalone(StandaloneModel {
                    nets: nets.into_iter().map(|(n, _)| n).collect(),
                }),
                diverged,
            })
        }
        BaselineKind::VanillaVfl => {
            let net = SplitNet::new(
                arch,
                (0..data.k()).collect(),
                &dims,
                data.classes,
                &mut init,
            )?;
            let rows = (0..data.n())
                .filter(|&s| (0..data.k()).all(|c| data.is_full(c, s)))
                .collect();
            let (net, diverged) = fit(
                data,
                rows,
                net,
                optimizer,
                steps,
                rng::derive_seed(seed, "vanilla"),
            )?;
            Ok(BaselineFit {
                model: BaselineModel::VanillaVfl(VanillaVflModel { net }),
                diverged,
            })
        }
    }
}
