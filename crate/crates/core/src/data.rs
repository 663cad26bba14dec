//! Synthetic clustered data: an anisotropic Gaussian mixture whose clusters
//! each have their own random linear shape, so residual distributions differ
//! from cluster to cluster.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    means: Matrix<f64>,
    /// One `dim × dim` mixing matrix per cluster, row-major.
    shapes: Vec<Vec<f64>>,
    /// Cumulative mixture weights.
    cumulative: Vec<f64>,
}

impl GaussianMixture {
    /// Random mixture. Cluster means are spread with standard deviation
    /// `spread`; each cluster's covariance is `A Aᵀ` with `A` a Gaussian
    /// matrix whose columns decay geometrically, giving elongated clusters in
    /// random orientations.
    pub fn random(dim: usize, clusters: usize, spread: f64, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || clusters == 0 {
            return Err(invalid("mixture needs at least one dimension and one cluster"));
        }
        let mut means = Matrix::zeros(clusters, dim);
        for v in means.as_mut_slice() {
            *v = spread * rng.normal();
        }
        let decay = num_traits::Float::powf(0.1f64, 1.0 / dim as f64);
        let norm = 1.0 / num_traits::Float::sqrt(dim as f64);
        let shapes = (0..clusters)
            .map(|_| {
                let mut a = Vec::with_capacity(dim * dim);
                for _ in 0..dim {
                    let mut s = norm;
                    for _ in 0..dim {
                        a.push(rng.normal() * s);
                        s *= decay;
                    }
                }
                a
            })
            .collect();
        let weights: Vec<f64> = (0..clusters).map(|_| 0.5 + rng.uniform()).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Self {
            dim,
            means,
            shapes,
            cumulative,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clusters(&self) -> usize {
        self.means.rows()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Matrix<f32> {
        let d = self.dim;
        let mut out = Matrix::zeros(n, d);
        let mut z = Vec::with_capacity(d);
        for i in 0..n {
            let u = rng.uniform();
            let c = self
                .cumulative
                .iter()
                .position(|&p| u < p)
                .unwrap_or(self.clusters() - 1);
            z.clear();
            z.extend((0..d).map(|_| rng.normal()));
            let a = &self.shapes[c];
            let mean = self.means.row(c);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let row = &a[j * d..(j + 1) * d];
                let v: f64 = row.iter().zip(&z).map(|(x, y)| x * y).sum();
                *o = (mean[j] + v) as f32;
            }
        }
        out
    }
}
