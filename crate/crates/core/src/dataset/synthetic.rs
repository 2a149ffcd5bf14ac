use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng;

/// Class-conditional Gaussian blobs.
///
/// In every coordinate the `C` class means sit on evenly spaced levels
/// spanning `separation · σ`, with the class-to-level assignment shuffled per
/// coordinate. Every coordinate therefore separates every pair of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub features: usize,
    pub classes: usize,
    /// Spread of class means per coordinate, in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, features: usize, classes: usize, seed: u64) -> Self {
        Self {
            n,
            features,
            classes,
            separation: 3.0,
            noise: 1.0,
            seed,
        }
    }

    pub fn class_means(&self) -> Matrix {
        let c = self.classes;
        let mut means = Matrix::zeros(c, self.features);
        let mut rng = rng::stream(self.seed, "synthetic/means");
        let mut levels: Vec<usize> = (0..c).collect();
        for j in 0..self.features {
            levels.shuffle(&mut rng);
            for (class, &level) in levels.iter().enumerate() {
                let centred = if c > 1 {
                    level as f64 / (c - 1) as f64 - 0.5
                } else {
                    0.0
                };
                means.set(class, j, centred * self.separation * self.noise);
            }
        }
        means
    }

    pub fn generate(&self) -> Result<(Matrix, Vec<usize>)> {
        if self.n == 0 || self.features == 0 || self.classes == 0 {
            return Err(Error::config("synthetic generator needs n, m, C >= 1"));
        }
        let means = self.class_means();
        let mut rng = rng::stream(self.seed, "synthetic/samples");
        let mut x = Matrix::zeros(self.n, self.features);
        let mut labels = Vec::with_capacity(self.n);
        for s in 0..self.n {
            let y = rng.random_range(0..self.classes);
            labels.push(y);
            for j in 0..self.features {
                let z: f64 = rng.sample(StandardNormal);
                x.set(s, j, means.get(y, j) + self.noise * z);
            }
        }
        Ok((x, labels))
    }
}

pub fn generate_synthetic(
    n: usize,
    m: usize,
    classes: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    SyntheticSpec::new(n, m, classes, seed).generate()
}
