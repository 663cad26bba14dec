//! Approximate search over compressed vectors.
//!
//! The network decoder is too slow to run over a whole database, so the
//! pipeline works in three stages: the query is compared with the coarse
//! IVF centroids and the nearest buckets are probed; items in those buckets
//! are scored with lookup tables against an explicit additive decoder fitted
//! to the model's codes; the best `n_short` items are decoded with the model
//! and re-ranked by exact distance.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::clustering::kmeans;
use crate::codec::{Anchors, CodeArray};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, nearest, sq_l2, sq_norm, Matrix, NormalEquations, Real, Ridge, Rng};
use crate::model::QincoModel;
use crate::par::map_range;
use crate::training::{fit, EpochRecord, FitConfig, TrainData, TrainReport};

/// Explicit additive codebooks `g^m_k` fitted by least squares so that
/// `Σ_m g^m_{i^m}` approximates the vector behind code `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AqDecoder<T = f32> {
    pub codebooks: Vec<Matrix<T>>,
    /// Mean squared error of the fit on the fitting set.
    pub fitted_mse: f64,
}

/// Normal equations of the one-hot design: row `i` has a 1 in column
/// `m·K + i^m` for every step `m`.
pub fn aq_normal_equations<T: Real>(codes: &CodeArray, targets: &Matrix<T>) -> Result<NormalEquations> {
    check_dim(codes.len(), targets.rows())?;
    let (steps, k) = (codes.steps(), codes.codebook_size());
    let mut ne = NormalEquations::new(steps * k, targets.cols());
    let mut entries = Vec::with_capacity(steps);
    for i in 0..codes.len() {
        entries.clear();
        entries.extend(codes.row(i).iter().enumerate().map(|(m, &c)| (m * k + c as usize, 1.0)));
        ne.add_sparse_row(&entries, targets.row(i));
    }
    Ok(ne)
}

impl<T: Real> AqDecoder<T> {
    /// Least-squares fit of the codebooks to `targets` given `codes`.
    pub fn fit(codes: &CodeArray, targets: &Matrix<T>, ridge: Ridge) -> Result<Self> {
        if codes.is_empty() {
            return Err(invalid("cannot fit a decoder without data"));
        }
        let ne = aq_normal_equations(codes, targets)?;
        let solution = ne.solve(ridge)?;
        let (steps, k, d) = (codes.steps(), codes.codebook_size(), targets.cols());
        let codebooks = (0..steps)
            .map(|m| {
                let block = &solution[m * k * d..(m + 1) * k * d];
                Matrix::from_vec(k, d, block.iter().map(|&v| T::of(v)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dec = Self {
            codebooks,
            fitted_mse: 0.0,
        };
        let total: f64 = (0..codes.len())
            .map(|i| sq_l2(targets.row(i), &dec.decode(codes.row(i))))
            .sum();
        dec.fitted_mse = total / codes.len() as f64;
        Ok(dec)
    }

    pub fn steps(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.first().map_or(0, Matrix::rows)
    }

    pub fn dim(&self) -> usize {
        self.codebooks.first().map_or(0, Matrix::cols)
    }

    /// Codebooks stacked as the `M·K × D` solution of the normal equations.
    pub fn flat_solution(&self) -> Vec<f64> {
        self.codebooks
            .iter()
            .flat_map(|c| c.as_slice().iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn decode(&self, codes: &[u32]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        for (cb, &c) in self.codebooks.iter().zip(codes) {
            for (o, v) in out.iter_mut().zip(cb.row(c as usize)) {
                *o += *v;
            }
        }
        out
    }

    /// Inner products `⟨query, g^m_k⟩`, laid out `m·K + k`.
    pub fn lookup_table(&self, query: &[T]) -> Vec<f64> {
        self.codebooks
            .iter()
            .flat_map(|cb| cb.iter_rows().map(|g| dot(query, g).as_f64()))
            .collect()
    }
}

#[inline]
fn table_sum(table: &[f64], k: usize, code: &[u32]) -> f64 {
    code.iter().enumerate().map(|(m, &c)| table[m * k + c as usize]).sum()
}

/// Encodes `train` with the model and fits an additive decoder to the codes.
/// With anchors the targets are the vectors minus their starting points.
pub fn aq_fit<T: Real>(model: &QincoModel<T>, train: &Matrix<T>, anchors: Option<Anchors<'_, T>>) -> Result<AqDecoder<T>> {
    let codes = model.encode_batch(train, anchors)?;
    let targets = match &anchors {
        Some(a) => {
            let mut t = train.clone();
            for i in 0..t.rows() {
                for (v, c) in t.row_mut(i).iter_mut().zip(a.start(i)) {
                    *v -= *c;
                }
            }
            t
        }
        None => train.clone(),
    };
    AqDecoder::fit(&codes, &targets, Ridge::Auto)
}

/// Approximate squared distances `‖q‖² − 2 Σ_m ⟨q, g^m_{i^m}⟩ + norm²` from
/// the stored norms.
pub fn lut_distances<T: Real>(aq: &AqDecoder<T>, query: &[T], codes: &CodeArray) -> Result<Vec<f64>> {
    check_dim(aq.dim(), query.len())?;
    check_dim(aq.steps(), codes.steps())?;
    let norms = codes.norms().ok_or_else(|| invalid("codes carry no norms"))?;
    let table = aq.lookup_table(query);
    let qn = sq_norm(query);
    let k = aq.codebook_size();
    Ok((0..codes.len())
        .map(|i| {
            let n = norms[i] as f64;
            qn - 2.0 * table_sum(&table, k, codes.row(i)) + n * n
        })
        .collect())
}

/// Norms of the additive reconstructions of `codes`, so that
/// [`lut_distances`] is exact for the additive decoder.
pub fn aq_norms<T: Real>(aq: &AqDecoder<T>, codes: &CodeArray) -> Vec<f32> {
    (0..codes.len())
        .map(|i| crate::linalg::sqrt(sq_norm(&aq.decode(codes.row(i)))) as f32)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SearchParams {
    pub p_ivf: usize,
    pub n_short: usize,
    pub k: usize,
}

impl SearchParams {
    pub fn validate(&self, k_ivf: usize) -> Result<()> {
        if self.p_ivf == 0 || self.p_ivf > k_ivf {
            return Err(invalid("p_ivf must be in 1..=K_ivf"));
        }
        if self.k == 0 || self.n_short < self.k {
            return Err(invalid("need n_short ≥ k ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub dist: f64,
}

/// Heap entry ordered by (distance, id) so that the heap top is the worst
/// candidate kept.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    dist: f64,
    id: usize,
    bucket: usize,
    pos: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

fn push_bounded(heap: &mut BinaryHeap<Candidate>, cap: usize, c: Candidate) {
    if heap.len() < cap {
        heap.push(c);
    } else if let Some(mut top) = heap.peek_mut() {
        if c < *top {
            *top = c;
        }
    }
}

/// One bucket of the inverted file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvertedList {
    pub ids: Vec<usize>,
    /// Row-major `len × M` indices.
    pub codes: Vec<u32>,
    /// Norm of the additive reconstruction, including the bucket centroid.
    pub norms: Vec<f32>,
}

impl InvertedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvfIndex<T = f32> {
    pub centroids: Matrix<T>,
    pub model: QincoModel<T>,
    pub aq: AqDecoder<T>,
    pub lists: Vec<InvertedList>,
    decoded: Option<Vec<Matrix<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvfConfig {
    pub k_ivf: usize,
    /// Model and training settings; the model is forced to condition its
    /// first step on the bucket centroid.
    pub fit: FitConfig,
}

impl<T: Real> IvfIndex<T> {
    pub fn new(centroids: Matrix<T>, model: QincoModel<T>, aq: AqDecoder<T>) -> Result<Self> {
        check_dim(model.dim(), centroids.cols())?;
        check_dim(model.dim(), aq.dim())?;
        check_dim(model.steps(), aq.steps())?;
        check_dim(model.codebook_size(), aq.codebook_size())?;
        if !model.config().ivf_coupled_step1 {
            return Err(invalid("IVF index needs a model conditioned on the bucket centroid"));
        }
        let lists = vec![InvertedList::default(); centroids.rows()];
        Ok(Self {
            centroids,
            model,
            aq,
            lists,
            decoded: None,
        })
    }

    /// Rebuilds an index from stored parts, validating every list.
    pub fn from_parts(centroids: Matrix<T>, model: QincoModel<T>, aq: AqDecoder<T>, lists: Vec<InvertedList>) -> Result<Self> {
        let mut index = Self::new(centroids, model, aq)?;
        check_dim(index.centroids.rows(), lists.len())?;
        let (m, k) = (index.model.steps(), index.model.codebook_size());
        for l in &lists {
            check_dim(l.ids.len() * m, l.codes.len())?;
            check_dim(l.ids.len(), l.norms.len())?;
            if let Some(&index) = l.codes.iter().find(|&&c| c as usize >= k) {
                return Err(Error::CodeOutOfRange { index, codebook_size: k });
            }
        }
        index.lists = lists;
        Ok(index)
    }

    pub fn k_ivf(&self) -> usize {
        self.centroids.rows()
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(InvertedList::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assign(&self, data: &Matrix<T>) -> Result<Vec<usize>> {
        check_dim(self.centroids.cols(), data.cols())?;
        Ok(map_range(data.rows(), |i| nearest(data.row(i), &self.centroids).0))
    }

    /// Encodes `data` and appends it with ids `first_id..`.
    pub fn add(&mut self, data: &Matrix<T>, first_id: usize) -> Result<()> {
        let assignment = self.assign(data)?;
        let anchors = Anchors {
            centroids: &self.centroids,
            assignment: &assignment,
        };
        let codes = self.model.encode_batch(data, Some(anchors))?;
        for (i, &b) in assignment.iter().enumerate() {
            let code = codes.row(i);
            let mut rec = self.aq.decode(code);
            for (r, c) in rec.iter_mut().zip(self.centroids.row(b)) {
                *r += *c;
            }
            let list = &mut self.lists[b];
            list.ids.push(first_id + i);
            list.codes.extend_from_slice(code);
            list.norms.push(crate::linalg::sqrt(sq_norm(&rec)) as f32);
        }
        self.decoded = None;
        Ok(())
    }

    /// Model reconstruction of entry `pos` of bucket `bucket`.
    pub fn reconstruct(&self, bucket: usize, pos: usize) -> Result<Vec<T>> {
        if let Some(dec) = &self.decoded {
            return Ok(dec[bucket].row(pos).to_vec());
        }
        let m = self.model.steps();
        let code = &self.lists[bucket].codes[pos * m..(pos + 1) * m];
        self.model.decode_from(code, m, Some(self.centroids.row(bucket)))
    }

    /// Decodes every stored vector once so that re-ranking reads the
    /// reconstructions instead of running the decoder. Results are unchanged.
    pub fn cache_reconstructions(&mut self) -> Result<()> {
        self.decoded = None;
        let d = self.model.dim();
        let mut cache = Vec::with_capacity(self.lists.len());
        for b in 0..self.lists.len() {
            let rows = map_range(self.lists[b].len(), |p| self.reconstruct(b, p));
            let mut mat = Matrix::zeros(rows.len(), d);
            for (p, r) in rows.into_iter().enumerate() {
                mat.row_mut(p).copy_from_slice(&r?);
            }
            cache.push(mat);
        }
        self.decoded = Some(cache);
        Ok(())
    }

    pub fn has_cache(&self) -> bool {
        self.decoded.is_some()
    }

    /// Buckets to probe: the `p_ivf` nearest centroids, ties by index.
    fn probe(&self, query: &[T], p_ivf: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .centroids
            .iter_rows()
            .enumerate()
            .map(|(b, c)| (sq_l2(query, c), b))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(p_ivf);
        d.into_iter().map(|(_, b)| b).collect()
    }

    /// Shortlist of the `n_short` best items by approximate distance, sorted
    /// ascending by (distance, id).
    fn shortlist(&self, query: &[T], p_ivf: usize, n_short: usize) -> Vec<Candidate> {
        let table = self.aq.lookup_table(query);
        let qn = sq_norm(query);
        let (m, k) = (self.model.steps(), self.model.codebook_size());
        let buckets = self.probe(query, p_ivf);
        let total: usize = buckets.iter().map(|&b| self.lists[b].len()).sum();
        let scored = buckets.into_iter().flat_map(|b| {
            let list = &self.lists[b];
            let base = qn - 2.0 * dot(query, self.centroids.row(b)).as_f64();
            let table = &table;
            (0..list.len()).map(move |pos| {
                let code = &list.codes[pos * m..(pos + 1) * m];
                let n = list.norms[pos] as f64;
                Candidate {
                    dist: base - 2.0 * table_sum(table, k, code) + n * n,
                    id: list.ids[pos],
                    bucket: b,
                    pos,
                }
            })
        });
        // (dist, id) is a total order, so both paths return the same list;
        // a large heap is slower than selecting from all candidates
        if total <= 4 * n_short {
            let mut all: Vec<Candidate> = scored.collect();
            if all.len() > n_short {
                all.select_nth_unstable(n_short - 1);
                all.truncate(n_short);
            }
            all.sort_unstable();
            return all;
        }
        let mut heap = BinaryHeap::with_capacity(n_short + 1);
        for c in scored {
            push_bounded(&mut heap, n_short, c);
        }
        heap.into_sorted_vec()
    }

    /// Top-`k` by approximate (additive decoder) distance only.
    pub fn search_approx(&self, query: &[T], params: SearchParams) -> Result<Vec<Neighbor>> {
        params.validate(self.k_ivf())?;
        check_dim(self.model.dim(), query.len())?;
        Ok(self
            .shortlist(query, params.p_ivf, params.k)
            .into_iter()
            .map(|c| Neighbor { id: c.id, dist: c.dist })
            .collect())
    }

    /// Full pipeline: probe, shortlist by lookup tables, re-rank with the
    /// model's reconstructions. Results are sorted by (distance, id).
    pub fn search(&self, query: &[T], params: SearchParams) -> Result<Vec<Neighbor>> {
        params.validate(self.k_ivf())?;
        check_dim(self.model.dim(), query.len())?;
        let short = self.shortlist(query, params.p_ivf, params.n_short);
        let mut out = Vec::with_capacity(short.len());
        for c in short {
            let dist = match &self.decoded {
                Some(dec) => sq_l2(query, dec[c.bucket].row(c.pos)),
                None => sq_l2(query, &self.reconstruct(c.bucket, c.pos)?),
            };
            out.push(Neighbor { id: c.id, dist });
        }
        let order = |a: &Neighbor, b: &Neighbor| a.dist.total_cmp(&b.dist).then(a.id.cmp(&b.id));
        if out.len() > params.k {
            out.select_nth_unstable_by(params.k - 1, order);
            out.truncate(params.k);
        }
        out.sort_by(order);
        Ok(out)
    }

    pub fn search_batch(&self, queries: &Matrix<T>, params: SearchParams) -> Result<Vec<Vec<Neighbor>>> {
        map_range(queries.rows(), |q| self.search(queries.row(q), params))
            .into_iter()
            .collect()
    }

    /// Model reconstructions of all stored vectors, indexed by id. Ids must
    /// be `0..len`.
    pub fn reconstruct_all(&self) -> Result<Matrix<T>> {
        let n = self.len();
        let mut out = Matrix::zeros(n, self.model.dim());
        let mut seen = vec![false; n];
        for (b, list) in self.lists.iter().enumerate() {
            for (pos, &id) in list.ids.iter().enumerate() {
                if id >= n || seen[id] {
                    return Err(invalid("ids are not a permutation of 0..len"));
                }
                seen[id] = true;
                out.row_mut(id).copy_from_slice(&self.reconstruct(b, pos)?);
            }
        }
        Ok(out)
    }
}

/// Exhaustive search: every stored reconstruction is scored exactly.
pub fn exhaustive_search<T: Real>(reconstructions: &Matrix<T>, queries: &Matrix<T>, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    check_dim(reconstructions.cols(), queries.cols())?;
    Ok(map_range(queries.rows(), |q| {
        crate::metrics::knn_scan(reconstructions, queries.row(q), k)
            .into_iter()
            .map(|(id, dist)| Neighbor { id, dist })
            .collect()
    }))
}

/// Trains the coarse quantizer and the centroid-conditioned model, fits the
/// additive decoder on the training set and adds `database` with ids
/// `0..N`.
pub fn ivf_build<T: Real>(
    train: &Matrix<T>,
    valid: &Matrix<T>,
    database: &Matrix<T>,
    cfg: &IvfConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(IvfIndex<T>, TrainReport)> {
    let mut fit_cfg = cfg.fit.clone();
    fit_cfg.model.ivf_coupled_step1 = true;
    let mut rng = Rng::new(fit_cfg.train.seed).fork("ivf");
    let coarse = kmeans(train, cfg.k_ivf, fit_cfg.kmeans_iters, &mut rng)?;
    let centroids = coarse.centroids;
    let valid_assign: Vec<usize> = map_range(valid.rows(), |i| nearest(valid.row(i), &centroids).0);
    let train_anchors = Anchors {
        centroids: &centroids,
        assignment: &coarse.assignments,
    };
    let valid_anchors = Anchors {
        centroids: &centroids,
        assignment: &valid_assign,
    };
    let (model, report) = fit(
        TrainData {
            data: train,
            anchors: Some(train_anchors),
        },
        TrainData {
            data: valid,
            anchors: Some(valid_anchors),
        },
        &fit_cfg,
        observer,
    )?;
    let aq = aq_fit(&model, train, Some(train_anchors))?;
    let mut index = IvfIndex::new(centroids.clone(), model, aq)?;
    index.add(database, 0)?;
    Ok((index, report))
}
