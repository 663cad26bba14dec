//! Evaluation measures: reconstruction error, recall, codeword-usage entropy
//! and exact nearest neighbors for ground truth.

use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{Anchors, CodeArray};
use crate::error::{check_dim, invalid, Result};
use crate::linalg::{sq_l2, Matrix, Real};
use crate::model::QincoModel;
use crate::par::map_range;

/// Mean over rows of the squared L2 error.
pub fn mse<T: Real>(original: &Matrix<T>, reconstructed: &Matrix<T>) -> Result<f64> {
    check_dim(original.rows(), reconstructed.rows())?;
    check_dim(original.cols(), reconstructed.cols())?;
    if original.rows() == 0 {
        return Err(invalid("mse of an empty set"));
    }
    let total: f64 = (0..original.rows())
        .map(|i| sq_l2(original.row(i), reconstructed.row(i)))
        .sum();
    Ok(total / original.rows() as f64)
}

/// Fraction of queries whose true nearest neighbor is among the first `rank`
/// returned ids. Every result list must hold at least `rank` ids, unless the
/// searched set itself is smaller.
pub fn recall_at(results: &[Vec<usize>], truth: &[usize], rank: usize) -> Result<f64> {
    check_dim(truth.len(), results.len())?;
    if rank == 0 {
        return Err(invalid("rank must be at least 1"));
    }
    if results.is_empty() {
        return Err(invalid("recall over zero queries"));
    }
    if results.iter().any(|r| r.len() < rank) {
        return Err(invalid("result lists are shorter than the requested rank"));
    }
    let hits = results
        .iter()
        .zip(truth)
        .filter(|(r, t)| r[..rank].contains(t))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Shannon entropy (bits) of the index distribution of each step, averaged
/// over steps.
pub fn codeword_entropy(codes: &CodeArray) -> f64 {
    let (n, steps, k) = (codes.len(), codes.steps(), codes.codebook_size());
    if n == 0 || steps == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut counts = vec![0usize; k];
    for m in 0..steps {
        counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..n {
            counts[codes.row(i)[m] as usize] += 1;
        }
        for &c in counts.iter().filter(|&&c| c > 0) {
            let p = c as f64 / n as f64;
            total -= p * num_traits::Float::log2(p);
        }
    }
    total / steps as f64
}

/// MSE of the prefix reconstructions `decode(codes, m)` for `m = 1..=M`.
pub fn per_step_mse<T: Real>(
    model: &QincoModel<T>,
    data: &Matrix<T>,
    codes: &CodeArray,
    anchors: Option<Anchors<'_, T>>,
) -> Result<Vec<f64>> {
    check_dim(data.rows(), codes.len())?;
    (1..=codes.steps().min(model.steps()))
        .map(|m| mse(data, &model.decode_batch(codes, m, anchors)?))
        .collect()
}

/// `k` nearest rows of `points` to `query` by exact squared distance,
/// ascending, ties broken by smaller id.
pub fn knn_scan<T: Real>(points: &Matrix<T>, query: &[T], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..points.rows())
        .map(|i| (i, sq_l2(query, points.row(i))))
        .collect();
    let k = k.min(all.len());
    let by_dist = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if k < all.len() && k > 0 {
        all.select_nth_unstable_by(k - 1, by_dist);
    }
    all.truncate(k);
    all.sort_by(by_dist);
    all
}

/// Exact `k` nearest database ids for every query (double-precision
/// distances).
pub fn exact_knn<T: Real>(database: &Matrix<T>, queries: &Matrix<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    check_dim(database.cols(), queries.cols())?;
    Ok(map_range(queries.rows(), |q| {
        knn_scan(database, queries.row(q), k).into_iter().map(|(i, _)| i).collect()
    }))
}
