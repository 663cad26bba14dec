//! Lloyd's k-means and the greedy residual quantizer built on top of it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{ensure_finite, nearest, sq_norm, Matrix, Real, Rng};
use crate::par::map_range;

pub const DEFAULT_KMEANS_ITERS: usize = 25;

#[derive(Clone, Debug)]
pub struct KmeansResult<T = f32> {
    pub centroids: Matrix<T>,
    pub assignments: Vec<usize>,
    /// Mean squared error of the final assignment.
    pub mse: f64,
    /// Training MSE after each assignment step, final assignment included.
    pub mse_history: Vec<f64>,
}

fn assign<T: Real>(data: &Matrix<T>, centroids: &Matrix<T>) -> Vec<(usize, f64)> {
    map_range(data.rows(), |i| nearest(data.row(i), centroids))
}

/// Lloyd's algorithm with a fixed iteration budget.
///
/// Centroids start at `k` distinct rows sampled with `rng`. A centroid that
/// loses all of its points is moved onto a random member of the cluster with
/// the largest squared error.
pub fn kmeans<T: Real>(data: &Matrix<T>, k: usize, iters: usize, rng: &mut Rng) -> Result<KmeansResult<T>> {
    let n = data.rows();
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if iters == 0 {
        return Err(invalid("kmeans needs at least one iteration"));
    }
    if n < k {
        return Err(Error::NotEnoughData { needed: k, got: n });
    }
    ensure_finite(data, "kmeans input")?;
    let d = data.cols();

    let mut centroids = data.select_rows(&rng.sample_distinct(n, k));
    let mut history = Vec::with_capacity(iters + 1);
    let mut assignment = assign(data, &centroids);

    for _ in 0..iters {
        history.push(assignment.iter().map(|a| a.1).sum::<f64>() / n as f64);

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        let mut sse = vec![0.0f64; k];
        for (row, &(c, dist)) in data.iter_rows().zip(&assignment) {
            counts[c] += 1;
            sse[c] += dist;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += v.as_f64();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = T::of(s * inv);
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..k)
                .filter(|&j| counts[j] > 1)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if sse[b] >= sse[j] => Some(b),
                    _ => Some(j),
                });
            let Some(donor) = donor else { continue };
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i].0 == donor).collect();
            let pick = members[rng.below(members.len())];
            centroids.row_mut(c).copy_from_slice(data.row(pick));
            sse[donor] -= assignment[pick].1;
            counts[donor] -= 1;
            counts[c] = 1;
            assignment[pick] = (c, 0.0);
        }

        assignment = assign(data, &centroids);
    }
    let mse = assignment.iter().map(|a| a.1).sum::<f64>() / n as f64;
    history.push(mse);
    Ok(KmeansResult {
        centroids,
        assignments: assignment.into_iter().map(|a| a.0).collect(),
        mse,
        mse_history: history,
    })
}

/// Conventional residual quantizer: one explicit K×D codebook per step.
#[derive(Clone, Debug, PartialEq)]
pub struct RqModel<T = f32> {
    pub codebooks: Vec<Matrix<T>>,
}

impl<T: Real> RqModel<T> {
    pub fn new(codebooks: Vec<Matrix<T>>) -> Result<Self> {
        let first = codebooks.first().ok_or_else(|| invalid("RQ needs at least one step"))?;
        let (k, d) = (first.rows(), first.cols());
        if k == 0 {
            return Err(invalid("codebooks must have at least one entry"));
        }
        for cb in &codebooks {
            check_dim(k, cb.rows())?;
            check_dim(d, cb.cols())?;
        }
        Ok(Self { codebooks })
    }

    pub fn steps(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].cols()
    }
}

/// Greedy RQ training (beam size one): step `m` runs k-means on the residuals
/// left by steps `1..m`. Returns the model and the training MSE after each
/// step.
pub fn rq_train<T: Real>(
    data: &Matrix<T>,
    steps: usize,
    k: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<(RqModel<T>, Vec<f64>)> {
    if steps == 0 {
        return Err(invalid("RQ needs at least one step"));
    }
    let mut residuals = data.clone();
    let mut codebooks = Vec::with_capacity(steps);
    let mut step_mse = Vec::with_capacity(steps);
    for _ in 0..steps {
        let km = kmeans(&residuals, k, iters, rng)?;
        for (i, &c) in km.assignments.iter().enumerate() {
            let cw = km.centroids.row(c);
            for (r, v) in residuals.row_mut(i).iter_mut().zip(cw) {
                *r -= *v;
            }
        }
        step_mse.push(km.mse);
        codebooks.push(km.centroids);
    }
    Ok((RqModel { codebooks }, step_mse))
}

/// Greedy encoding; also returns the squared norm of the final residual.
pub fn rq_encode_with_error<T: Real>(model: &RqModel<T>, x: &[T]) -> Result<(Vec<u32>, f64)> {
    check_dim(model.dim(), x.len())?;
    let mut r = x.to_vec();
    let mut codes = Vec::with_capacity(model.steps());
    for cb in &model.codebooks {
        let (k, _) = nearest(&r, cb);
        for (ri, v) in r.iter_mut().zip(cb.row(k)) {
            *ri -= *v;
        }
        codes.push(k as u32);
    }
    Ok((codes, sq_norm(&r)))
}

pub fn rq_encode<T: Real>(model: &RqModel<T>, x: &[T]) -> Result<Vec<u32>> {
    rq_encode_with_error(model, x).map(|(c, _)| c)
}

/// Sums the selected codewords of the first `codes.len()` steps.
pub fn rq_decode<T: Real>(model: &RqModel<T>, codes: &[u32]) -> Result<Vec<T>> {
    if codes.len() > model.steps() {
        return Err(invalid("more codes than RQ steps"));
    }
    let mut out = vec![T::zero(); model.dim()];
    for (cb, &c) in model.codebooks.iter().zip(codes) {
        if c as usize >= cb.rows() {
            return Err(Error::CodeOutOfRange {
                index: c,
                codebook_size: cb.rows(),
            });
        }
        for (o, v) in out.iter_mut().zip(cb.row(c as usize)) {
            *o += *v;
        }
    }
    Ok(out)
}
