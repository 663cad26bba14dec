//! Evaluation reports, timing and CSV curves.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use qinco_core::metrics::{codeword_entropy, mse, recall_at};
use qinco_core::search::{exhaustive_search, Neighbor};
use qinco_core::{CodeArray, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

/// Ranks reported by default wherever recall is computed.
pub const RECALL_RANKS: [usize; 3] = [1, 10, 100];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub vectors: usize,
    pub steps: usize,
    pub codebook_size: usize,
    pub bytes_per_vector: usize,
    pub mse: f64,
    /// Entry `m` is the MSE after decoding the first `m + 1` steps.
    pub per_step_mse: Vec<f64>,
    pub entropy_bits: f64,
    /// Keyed by rank, e.g. `"1"`, `"10"`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub recall: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings_us_per_vector: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Fills everything except recall and timings.
    pub fn from_decodes(original: &Matrix<f32>, codes: &CodeArray, prefixes: &[Matrix<f32>]) -> Result<Self> {
        let per_step_mse = prefixes[1..].iter().map(|m| mse(original, m)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            vectors: codes.len(),
            steps: codes.steps(),
            codebook_size: codes.codebook_size(),
            bytes_per_vector: codes.steps() * codes.bytes_per_index(),
            mse: per_step_mse.last().copied().unwrap_or_else(|| mse(original, &prefixes[0]).unwrap_or(f64::NAN)),
            per_step_mse,
            entropy_bits: codeword_entropy(codes),
            ..Self::default()
        })
    }
}

/// Ground-truth nearest neighbor of every query (first column of a
/// ground-truth table).
pub fn first_column(gt: &[Vec<i32>]) -> Result<Vec<usize>> {
    gt.iter()
        .enumerate()
        .map(|(i, row)| match row.first() {
            Some(&v) if v >= 0 => Ok(v as usize),
            _ => Err(crate::Error::Usage(format!("ground-truth row {i} is empty or negative"))),
        })
        .collect()
}

pub fn ids(results: &[Vec<Neighbor>]) -> Vec<Vec<usize>> {
    results.iter().map(|r| r.iter().map(|n| n.id).collect()).collect()
}

/// Recall at every rank in `ranks` that the result lists are long enough
/// for; shorter ranks are omitted.
pub fn recalls(results: &[Vec<usize>], truth: &[usize], ranks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let shortest = results.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = BTreeMap::new();
    for &r in ranks.iter().filter(|&&r| r <= shortest) {
        out.insert(r, recall_at(results, truth, r)?);
    }
    Ok(out)
}

/// Exhaustive-search recall of `queries` against `reconstructions`.
pub fn exhaustive_recall(reconstructions: &Matrix<f32>, queries: &Matrix<f32>, truth: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let k = RECALL_RANKS.iter().copied().filter(|&r| r <= reconstructions.rows()).max().unwrap_or(1);
    let res = exhaustive_search(reconstructions, queries, k)?;
    recalls(&ids(&res), truth, &RECALL_RANKS)
}

/// Median wall-clock seconds of `reps` runs of `f` (at least five).
pub fn median_seconds(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(reps.max(5));
    for _ in 0..reps.max(5) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    })
}

/// One row per prefix length: `steps, bytes, mse`, then recall columns when
/// present.
pub struct PrefixRow {
    pub steps: usize,
    pub bytes: usize,
    pub mse: f64,
    pub recall: BTreeMap<usize, f64>,
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> crate::Error {
    crate::Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

pub fn per_step_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let header = ["step".to_string(), "mse".to_string()];
    let rows: Vec<Vec<String>> = report
        .per_step_mse
        .iter()
        .enumerate()
        .map(|(m, v)| vec![(m + 1).to_string(), v.to_string()])
        .collect();
    write_csv(path, &header, &rows)
}

pub fn prefix_csv(path: &Path, rows: &[PrefixRow]) -> Result<()> {
    let ranks: Vec<usize> = rows.first().map(|r| r.recall.keys().copied().collect()).unwrap_or_default();
    let mut header = vec!["prefix_steps".to_string(), "prefix_bytes".to_string(), "mse".to_string()];
    header.extend(ranks.iter().map(|r| format!("recall@{r}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.steps.to_string(), r.bytes.to_string(), r.mse.to_string()];
            v.extend(ranks.iter().map(|k| r.recall.get(k).map_or(String::new(), f64::to_string)));
            v
        })
        .collect();
    write_csv(path, &header, &body)
}

/// A row of the search sweep: recall columns are blank for ranks beyond the
/// number of results returned.
pub struct SweepRow {
    pub p_ivf: usize,
    pub n_short: usize,
    pub recall: BTreeMap<usize, f64>,
    pub qps: f64,
}

pub fn sweep_header() -> Vec<String> {
    let mut h = vec!["p_ivf".to_string(), "n_short".to_string()];
    h.extend(RECALL_RANKS.iter().map(|r| format!("recall@{r}")));
    h.push("qps".to_string());
    h
}

pub fn sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.p_ivf.to_string(), r.n_short.to_string()];
            v.extend(RECALL_RANKS.iter().map(|k| r.recall.get(k).map_or(String::new(), f64::to_string)));
            v.push(format!("{:.1}", r.qps));
            v
        })
        .collect();
    write_csv(path, &sweep_header(), &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_constant_work_is_finite() {
        let mut calls = 0;
        let t = median_seconds(3, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 5);
        assert!(t >= 0.0);
    }

    #[test]
    fn recall_ranks_beyond_results_are_skipped() {
        let res = vec![vec![3, 1], vec![0, 2]];
        let r = recalls(&res, &[1, 0], &RECALL_RANKS).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[&1], 0.5);
    }
}
