//! Dense layers with explicit forward and backward passes.
//!
//! An [`Mlp`] is a stack of affine layers with ReLU between consecutive
//! layers and a linear output. An `Mlp` with no layers is the identity map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// `out = input · weight + bias`, with the bias broadcast over rows.
pub fn linear_forward(input: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != weight.cols() {
        return Err(Error::Dimension {
            op: "linear_forward(bias)",
            left: weight.shape(),
            right: (1, bias.len()),
        });
    }
    let mut out = input.matmul(weight)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu(input: &Matrix) -> Matrix {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient of ReLU. `pre` is the forward input; the subgradient at 0 is 0.
pub fn relu_backward(upstream: &Matrix, pre: &Matrix) -> Result<Matrix> {
    if upstream.shape() != pre.shape() {
        return Err(Error::Dimension {
            op: "relu_backward",
            left: upstream.shape(),
            right: pre.shape(),
        });
    }
    let data = upstream
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(upstream.rows(), upstream.cols(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `d_in × d_out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6/(d_in+d_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Matrix::from_vec(d_in, d_out, data).expect("sized"),
            bias: vec![0.0; d_out],
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Per-layer values saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl LayerCache {
    /// Number of rows the cached forward pass was run on.
    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
    /// Width of the input when there are no layers.
    width: usize,
}

impl Mlp {
    /// `dims = [d_in, h_1, ..., d_out]`. A single entry gives the identity map.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            width: dims[0],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::validate_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            width: dims[0],
        })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("from_layers needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Dimension {
                    op: "Mlp::from_layers",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        let width = layers[0].d_in();
        Ok(Self { layers, width })
    }

    fn validate_dims(dims: &[usize]) -> Result<()> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::config(format!("invalid layer dims {dims:?}")));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims()).expect("dims of a valid network")
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(Linear::d_out));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(self.width, Linear::d_in)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.width, Linear::d_out)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, LayerCache)> {
        self.check_input(input)?;
        let mut cache = LayerCache::default();
        let mut x = input.clone();
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = linear_forward(&x, &layer.weight, &layer.bias)?;
            let next = if l < last { relu(&z) } else { z.clone() };
            cache.inputs.push(std::mem::replace(&mut x, next));
            cache.pre_activations.push(z);
        }
        Ok((x, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = input.clone();
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = linear_forward(&x, &layer.weight, &layer.bias)?;
            x = if l < last { relu(&z) } else { z };
        }
        Ok(x)
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.in_dim() {
            return Err(Error::Dimension {
                op: "Mlp::forward",
                left: input.shape(),
                right: (input.rows(), self.in_dim()),
            });
        }
        Ok(())
    }

    /// Backpropagates `grad_out` through the cached pass, accumulating
    /// parameter gradients into `grads` and returning the input gradient.
    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_out: &Matrix,
        grads: &mut Mlp,
    ) -> Result<Matrix> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::validation("cache does not belong to this network"));
        }
        let mut g = grad_out.clone();
        let last = self.layers.len().saturating_sub(1);
        for l in (0..self.layers.len()).rev() {
            if l < last {
                g = relu_backward(&g, &cache.pre_activations[l])?;
            }
            let layer = &self.layers[l];
            let dw = cache.inputs[l].t_matmul(&g)?;
            let gl = &mut grads.layers[l];
            gl.weight.add_assign(&dw)?;
            for (b, s) in gl.bias.iter_mut().zip(g.col_sums()) {
                *b += s;
            }
            g = g.matmul_t(&layer.weight)?;
        }
        Ok(g)
    }

    /// Appends parameters in layer order (weights row-major, then bias).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Reads parameters written by [`Mlp::flatten_into`]; returns the count consumed.
    pub fn load_from(&mut self, src: &[f64]) -> Result<usize> {
        if src.len() < self.param_count() {
            return Err(Error::validation(format!(
                "parameter vector too short: need {}, have {}",
                self.param_count(),
                src.len()
            )));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            let n = layer.weight.data().len();
            layer.weight.data_mut().copy_from_slice(&src[at..at + n]);
            at += n;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&src[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Mlp) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::validation(
                "add_scaled on differently shaped networks",
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(alpha, &b.weight)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += alpha * y;
            }
        }
        Ok(())
    }
}
