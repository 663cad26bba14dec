use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::{Matrix, Real};
use crate::error::{check_dim, invalid, Error, Result};

/// Tikhonov term added to the normal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `1e-6 * trace(AᵀA) / P`.
    Auto,
    Fixed(f64),
}

impl Ridge {
    pub const AUTO_RELATIVE: f64 = 1e-6;
}

/// Streaming accumulator for `AᵀA` (P×P) and `AᵀB` (P×D), in double
/// precision. Rows of `A` can be added densely or as sparse (column, weight)
/// lists, so design matrices never need to be materialized.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    p: usize,
    d: usize,
    ata: Vec<f64>,
    atb: Vec<f64>,
}

impl NormalEquations {
    pub fn new(p: usize, d: usize) -> Self {
        Self {
            p,
            d,
            ata: vec![0.0; p * p],
            atb: vec![0.0; p * d],
        }
    }

    pub fn unknowns(&self) -> usize {
        self.p
    }

    pub fn targets(&self) -> usize {
        self.d
    }

    pub fn ata(&self) -> &[f64] {
        &self.ata
    }

    pub fn atb(&self) -> &[f64] {
        &self.atb
    }

    pub fn add_dense_row<T: Real>(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.p);
        debug_assert_eq!(b.len(), self.d);
        for (i, ai) in a.iter().enumerate() {
            let ai = ai.as_f64();
            if ai == 0.0 {
                continue;
            }
            let row = &mut self.ata[i * self.p..(i + 1) * self.p];
            for (r, aj) in row.iter_mut().zip(a) {
                *r += ai * aj.as_f64();
            }
            let trow = &mut self.atb[i * self.d..(i + 1) * self.d];
            for (t, bj) in trow.iter_mut().zip(b) {
                *t += ai * bj.as_f64();
            }
        }
    }

    /// Adds a row of `A` given by its nonzero (column, weight) entries.
    pub fn add_sparse_row<T: Real>(&mut self, entries: &[(usize, f64)], b: &[T]) {
        debug_assert_eq!(b.len(), self.d);
        for &(i, wi) in entries {
            for &(j, wj) in entries {
                self.ata[i * self.p + j] += wi * wj;
            }
            let trow = &mut self.atb[i * self.d..(i + 1) * self.d];
            for (t, bj) in trow.iter_mut().zip(b) {
                *t += wi * bj.as_f64();
            }
        }
    }

    pub fn ridge_value(&self, ridge: Ridge) -> f64 {
        match ridge {
            Ridge::Fixed(v) => v,
            Ridge::Auto => {
                let trace: f64 = (0..self.p).map(|i| self.ata[i * self.p + i]).sum();
                Ridge::AUTO_RELATIVE * trace / self.p.max(1) as f64
            }
        }
    }

    /// Solves `(AᵀA + λI) X = AᵀB` by Cholesky factorization; X is P×D
    /// row-major.
    pub fn solve(&self, ridge: Ridge) -> Result<Vec<f64>> {
        let lambda = self.ridge_value(ridge);
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid("ridge must be a finite nonnegative value"));
        }
        let p = self.p;
        let mut l = self.ata.clone();
        let mut max_diag = 0.0f64;
        for i in 0..p {
            l[i * p + i] += lambda;
            max_diag = max_diag.max(l[i * p + i]);
        }
        let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
        for j in 0..p {
            let mut diag = l[j * p + j];
            for k in 0..j {
                diag -= l[j * p + k] * l[j * p + k];
            }
            if !(diag > tol) {
                return Err(Error::Singular);
            }
            let diag = Float::sqrt(diag);
            l[j * p + j] = diag;
            for i in j + 1..p {
                let mut s = l[i * p + j];
                for k in 0..j {
                    s -= l[i * p + k] * l[j * p + k];
                }
                l[i * p + j] = s / diag;
            }
        }
        let d = self.d;
        let mut x = self.atb.clone();
        // L y = AᵀB
        for i in 0..p {
            for k in 0..i {
                let lik = l[i * p + k];
                if lik != 0.0 {
                    let (head, tail) = x.split_at_mut(i * d);
                    for (xi, yk) in tail[..d].iter_mut().zip(&head[k * d..(k + 1) * d]) {
                        *xi -= lik * yk;
                    }
                }
            }
            let lii = l[i * p + i];
            x[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= lii);
        }
        // Lᵀ x = y
        for i in (0..p).rev() {
            for k in i + 1..p {
                let lki = l[k * p + i];
                if lki != 0.0 {
                    let (head, tail) = x.split_at_mut(k * d);
                    for (xi, xk) in head[i * d..(i + 1) * d].iter_mut().zip(&tail[..d]) {
                        *xi -= lki * xk;
                    }
                }
            }
            let lii = l[i * p + i];
            x[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= lii);
        }
        Ok(x)
    }

    /// `max |(AᵀA + λI) X − AᵀB|`, the optimality residual of a solution.
    pub fn residual_inf(&self, x: &[f64], ridge: Ridge) -> f64 {
        let lambda = self.ridge_value(ridge);
        let (p, d) = (self.p, self.d);
        let mut worst = 0.0f64;
        for i in 0..p {
            for c in 0..d {
                let mut s = lambda * x[i * d + c];
                for k in 0..p {
                    s += self.ata[i * p + k] * x[k * d + c];
                }
                worst = worst.max((s - self.atb[i * d + c]).abs());
            }
        }
        worst
    }

    pub fn atb_inf(&self) -> f64 {
        self.atb.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `argmin_X ‖AX − B‖² + λ‖X‖²` through the normal equations.
pub fn solve_least_squares<T: Real>(a: &Matrix<T>, b: &Matrix<T>, ridge: Ridge) -> Result<Matrix<T>> {
    check_dim(a.rows(), b.rows())?;
    if a.rows() == 0 || a.cols() == 0 {
        return Err(invalid("least squares needs at least one row and one column"));
    }
    let mut ne = NormalEquations::new(a.cols(), b.cols());
    for (ar, br) in a.iter_rows().zip(b.iter_rows()) {
        ne.add_dense_row(ar, br);
    }
    let x = ne.solve(ridge)?;
    Matrix::from_vec(a.cols(), b.cols(), x.into_iter().map(T::of).collect())
}
