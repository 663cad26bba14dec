//! Encoding and decoding with a trained model.
//!
//! Encoding is greedy: at each step the adapted codebook is generated from
//! the current partial reconstruction and the codeword closest to the
//! residual is selected. Decoding replays the same recursion, so it is
//! sequential, and any prefix of a code is itself a valid (coarser) code.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{sq_l2, sq_norm, sqrt, Matrix, Real};
use crate::model::QincoModel;
use crate::par::map_range;
use crate::training::{fit, FitConfig, TrainData, TrainReport};

/// Quantization indices of `n` vectors, row-major `n × steps`, with optional
/// reconstruction norms.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeArray {
    n: usize,
    steps: usize,
    codebook_size: usize,
    indices: Vec<u32>,
    norms: Option<Vec<f32>>,
}

impl CodeArray {
    pub fn new(steps: usize, codebook_size: usize, indices: Vec<u32>, norms: Option<Vec<f32>>) -> Result<Self> {
        if steps == 0 && !indices.is_empty() {
            return Err(invalid("zero-step codes cannot hold indices"));
        }
        if codebook_size == 0 || codebook_size > 1 << 16 {
            return Err(invalid("codebook size must be in 1..=65536"));
        }
        if steps > 0 && indices.len() % steps != 0 {
            return Err(invalid("index count is not a multiple of the code length"));
        }
        let n = if steps == 0 {
            norms.as_ref().map_or(0, Vec::len)
        } else {
            indices.len() / steps
        };
        if let Some(&index) = indices.iter().find(|&&i| i as usize >= codebook_size) {
            return Err(Error::CodeOutOfRange { index, codebook_size });
        }
        if let Some(norms) = &norms {
            check_dim(n, norms.len())?;
            if norms.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(invalid("norms must be finite and nonnegative"));
            }
        }
        Ok(Self {
            n,
            steps,
            codebook_size,
            indices,
            norms,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    /// Bytes per stored index: one when K ≤ 256, two otherwise.
    pub fn bytes_per_index(&self) -> usize {
        bytes_per_index(self.codebook_size)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.steps..(i + 1) * self.steps]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn norms(&self) -> Option<&[f32]> {
        self.norms.as_deref()
    }

    pub fn set_norms(&mut self, norms: Vec<f32>) -> Result<()> {
        *self = Self::new(self.steps, self.codebook_size, core::mem::take(&mut self.indices), Some(norms))?;
        Ok(())
    }

    /// First `steps` indices of every code; norms are dropped since they
    /// describe the full reconstruction.
    pub fn truncate(&self, steps: usize) -> Result<Self> {
        if steps > self.steps {
            return Err(invalid("cannot truncate codes to more steps than they hold"));
        }
        let mut indices = Vec::with_capacity(self.n * steps);
        for i in 0..self.n {
            indices.extend_from_slice(&self.row(i)[..steps]);
        }
        let mut out = Self::new(steps, self.codebook_size, indices, None)?;
        out.n = self.n;
        Ok(out)
    }
}

pub fn bytes_per_index(codebook_size: usize) -> usize {
    if codebook_size <= 256 {
        1
    } else {
        2
    }
}

/// Per-vector starting reconstructions taken from a coarse partition, in
/// original units: vector `i` starts at `centroids.row(assignment[i])`.
#[derive(Clone, Copy, Debug)]
pub struct Anchors<'a, T> {
    pub centroids: &'a Matrix<T>,
    pub assignment: &'a [usize],
}

impl<'a, T: Real> Anchors<'a, T> {
    #[inline]
    pub fn start(&self, i: usize) -> &'a [T] {
        self.centroids.row(self.assignment[i])
    }

    pub(crate) fn check(&self, n: usize, d: usize) -> Result<()> {
        check_dim(n, self.assignment.len())?;
        check_dim(d, self.centroids.cols())?;
        if self.assignment.iter().any(|&a| a >= self.centroids.rows()) {
            return Err(invalid("anchor assignment out of range"));
        }
        Ok(())
    }
}

/// Result of encoding one vector, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeTrace<T> {
    pub codes: Vec<u32>,
    /// `‖r^m − c^m‖²` after each step.
    pub step_errors: Vec<f64>,
    pub reconstruction: Vec<T>,
}

/// A model with the `x̂`-independent part of every step's concat projection
/// precomputed for all base codewords. Valid only while the model is not
/// modified.
pub struct Prepared<'a, T> {
    model: &'a QincoModel<T>,
    projections: Vec<Option<Matrix<T>>>,
}

impl<T: Real> QincoModel<T> {
    pub fn prepare(&self) -> Prepared<'_, T> {
        let projections = self
            .params
            .nets
            .iter()
            .zip(&self.params.base)
            .map(|(net, base)| {
                net.as_ref().map(|net| {
                    let width = match &net.concat {
                        crate::model::ConcatBlock::Full(l) => l.outputs,
                        crate::model::ConcatBlock::LowRank { down, .. } => down.outputs,
                    };
                    let mut proj = Matrix::zeros(base.rows(), width);
                    for k in 0..base.rows() {
                        net.project_base(base.row(k), proj.row_mut(k));
                    }
                    proj
                })
            })
            .collect();
        Prepared {
            model: self,
            projections,
        }
    }

    pub(crate) fn normalize(&self, x: &[T]) -> Vec<T> {
        x.iter().map(|&v| v / self.norm_scale).collect()
    }

    /// Encodes `x` (original units). `start` is the initial reconstruction
    /// for IVF-coupled models, in original units.
    pub fn encode_from(&self, x: &[T], start: Option<&[T]>) -> Result<EncodeTrace<T>> {
        check_dim(self.dim(), x.len())?;
        if let Some(s) = start {
            check_dim(self.dim(), s.len())?;
        }
        let xn = self.normalize(x);
        let sn = start.map(|s| self.normalize(s));
        Ok(self.prepare().encode_normalized(&xn, sn.as_deref()))
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<u32>> {
        self.encode_from(x, None).map(|t| t.codes)
    }

    /// Reconstruction from the first `steps` indices of `codes`, in original
    /// units. Zero steps yield the start point (the zero vector by default).
    pub fn decode_from(&self, codes: &[u32], steps: usize, start: Option<&[T]>) -> Result<Vec<T>> {
        if steps > self.steps() || steps > codes.len() {
            return Err(invalid("prefix longer than the code"));
        }
        let mut xhat = match start {
            Some(s) => {
                check_dim(self.dim(), s.len())?;
                self.normalize(s)
            }
            None => vec![T::zero(); self.dim()],
        };
        let mut cw = vec![T::zero(); self.dim()];
        for (m, &c) in codes[..steps].iter().enumerate() {
            self.codeword(m, &xhat, c as usize, &mut cw)?;
            for (x, v) in xhat.iter_mut().zip(&cw) {
                *x += *v;
            }
        }
        Ok(xhat.into_iter().map(|v| v * self.norm_scale).collect())
    }

    pub fn decode(&self, codes: &[u32], steps: usize) -> Result<Vec<T>> {
        self.decode_from(codes, steps, None)
    }

    /// Encodes every row. Norms of the reconstructions are stored with the
    /// codes.
    pub fn encode_batch(&self, data: &Matrix<T>, anchors: Option<Anchors<'_, T>>) -> Result<CodeArray> {
        let traces = self.encode_batch_traced(data, anchors)?;
        let mut indices = Vec::with_capacity(data.rows() * self.steps());
        let mut norms = Vec::with_capacity(data.rows());
        for t in &traces {
            indices.extend_from_slice(&t.codes);
            norms.push((sqrt(sq_norm(&t.reconstruction)) * self.norm_scale.as_f64()) as f32);
        }
        CodeArray::new(self.steps(), self.codebook_size(), indices, Some(norms))
    }

    pub fn encode_batch_traced(&self, data: &Matrix<T>, anchors: Option<Anchors<'_, T>>) -> Result<Vec<EncodeTrace<T>>> {
        check_dim(self.dim(), data.cols())?;
        if let Some(a) = &anchors {
            a.check(data.rows(), self.dim())?;
        }
        let prepared = self.prepare();
        Ok(map_range(data.rows(), |i| {
            let xn = self.normalize(data.row(i));
            let sn = anchors.as_ref().map(|a| self.normalize(a.start(i)));
            prepared.encode_normalized(&xn, sn.as_deref())
        }))
    }

    pub fn decode_batch(&self, codes: &CodeArray, steps: usize, anchors: Option<Anchors<'_, T>>) -> Result<Matrix<T>> {
        if let Some(a) = &anchors {
            a.check(codes.len(), self.dim())?;
        }
        if codes.codebook_size() != self.codebook_size() {
            return Err(invalid("codes were produced with a different codebook size"));
        }
        let rows = map_range(codes.len(), |i| {
            self.decode_from(codes.row(i), steps, anchors.as_ref().map(|a| a.start(i)))
        });
        let mut out = Matrix::zeros(codes.len(), self.dim());
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&r?);
        }
        Ok(out)
    }
}

impl<T: Real> Prepared<'_, T> {
    pub fn model(&self) -> &QincoModel<T> {
        self.model
    }

    /// Greedy encoding of a normalized vector from a normalized start point.
    pub fn encode_normalized(&self, x: &[T], start: Option<&[T]>) -> EncodeTrace<T> {
        let model = self.model;
        let (d, k) = (model.dim(), model.codebook_size());
        let mut xhat = start.map_or_else(|| vec![T::zero(); d], <[T]>::to_vec);
        let mut r: Vec<T> = match start {
            Some(s) => x.iter().zip(s).map(|(a, b)| *a - *b).collect(),
            None => x.to_vec(),
        };
        let mut codes = Vec::with_capacity(model.steps());
        let mut step_errors = Vec::with_capacity(model.steps());
        let mut hidden = vec![T::zero(); model.scratch_len()];
        let mut cw = vec![T::zero(); d];
        let mut best_cw = vec![T::zero(); d];
        for (m, base) in model.params.base.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            match (&model.params.nets[m], &self.projections[m]) {
                (Some(net), Some(proj)) => {
                    let ctx = net.context(&xhat);
                    for kk in 0..k {
                        net.finish(proj.row(kk), &ctx, base.row(kk), &mut hidden, &mut cw);
                        let dist = sq_l2(&r, &cw);
                        if dist < best.1 {
                            best = (kk, dist);
                            best_cw.copy_from_slice(&cw);
                        }
                    }
                }
                _ => {
                    for kk in 0..k {
                        let dist = sq_l2(&r, base.row(kk));
                        if dist < best.1 {
                            best = (kk, dist);
                        }
                    }
                    best_cw.copy_from_slice(base.row(best.0));
                }
            }
            for ((ri, xi), c) in r.iter_mut().zip(xhat.iter_mut()).zip(&best_cw) {
                *ri -= *c;
                *xi += *c;
            }
            codes.push(best.0 as u32);
            step_errors.push(best.1);
        }
        EncodeTrace {
            codes,
            step_errors,
            reconstruction: xhat,
        }
    }
}

/// Product split: the vector is cut into equal contiguous blocks, each
/// compressed by its own model. Codes are the concatenation of block codes.
#[derive(Clone, Debug, PartialEq)]
pub struct PqQincoModel<T = f32> {
    pub blocks: Vec<QincoModel<T>>,
}

impl<T: Real> PqQincoModel<T> {
    pub fn new(blocks: Vec<QincoModel<T>>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| invalid("need at least one block"))?;
        let cfg = *first.config();
        for b in &blocks {
            if b.config() != &cfg {
                return Err(invalid("all blocks must share one configuration"));
            }
        }
        Ok(Self { blocks })
    }

    /// Trains one model per block. Every block uses the same normalization
    /// scale (the maximum absolute value over the whole training set) and an
    /// independent seed derived from the block index.
    pub fn train(
        train: &Matrix<T>,
        valid: &Matrix<T>,
        num_blocks: usize,
        cfg: &FitConfig,
        observer: &mut dyn FnMut(usize, &crate::training::EpochRecord),
    ) -> Result<(Self, Vec<TrainReport>)> {
        let d = train.cols();
        if num_blocks == 0 || d % num_blocks != 0 {
            return Err(invalid("dimension must be divisible by the number of blocks"));
        }
        check_dim(d, valid.cols())?;
        let bd = d / num_blocks;
        check_dim(bd, cfg.model.dim)?;
        let scale = match cfg.norm_scale {
            Some(s) => s,
            None => crate::training::normalize_fit(train)?,
        };
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut reports = Vec::with_capacity(num_blocks);
        for b in 0..num_blocks {
            let mut bcfg = cfg.clone();
            bcfg.norm_scale = Some(scale);
            bcfg.train.seed = block_seed(cfg.train.seed, b);
            let tr = train.column_block(b * bd, bd);
            let va = valid.column_block(b * bd, bd);
            let (model, report) = fit(
                TrainData::plain(&tr),
                TrainData::plain(&va),
                &bcfg,
                &mut |rec| observer(b, rec),
            )?;
            blocks.push(model);
            reports.push(report);
        }
        Ok((Self { blocks }, reports))
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_dim(&self) -> usize {
        self.blocks[0].dim()
    }

    pub fn dim(&self) -> usize {
        self.block_dim() * self.num_blocks()
    }

    /// Steps per block.
    pub fn steps(&self) -> usize {
        self.blocks[0].steps()
    }

    pub fn codebook_size(&self) -> usize {
        self.blocks[0].codebook_size()
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<u32>> {
        check_dim(self.dim(), x.len())?;
        let bd = self.block_dim();
        let mut out = Vec::with_capacity(self.num_blocks() * self.steps());
        for (b, model) in self.blocks.iter().enumerate() {
            out.extend(model.encode(&x[b * bd..(b + 1) * bd])?);
        }
        Ok(out)
    }

    /// Decodes the first `steps` indices of every block's code.
    pub fn decode(&self, codes: &[u32], steps: usize) -> Result<Vec<T>> {
        let m = self.steps();
        check_dim(self.num_blocks() * m, codes.len())?;
        let mut out = Vec::with_capacity(self.dim());
        for (b, model) in self.blocks.iter().enumerate() {
            out.extend(model.decode(&codes[b * m..(b + 1) * m], steps)?);
        }
        Ok(out)
    }

    pub fn encode_batch(&self, data: &Matrix<T>) -> Result<CodeArray> {
        check_dim(self.dim(), data.cols())?;
        let rows = map_range(data.rows(), |i| self.encode(data.row(i)));
        let mut indices = Vec::with_capacity(data.rows() * self.num_blocks() * self.steps());
        let mut norms = Vec::with_capacity(data.rows());
        for r in rows {
            let r = r?;
            let rec = self.decode(&r, self.steps())?;
            norms.push(sqrt(sq_norm(&rec)) as f32);
            indices.extend(r);
        }
        CodeArray::new(self.num_blocks() * self.steps(), self.codebook_size(), indices, Some(norms))
    }

    pub fn decode_batch(&self, codes: &CodeArray, steps: usize) -> Result<Matrix<T>> {
        check_dim(self.num_blocks() * self.steps(), codes.steps())?;
        let rows = map_range(codes.len(), |i| self.decode(codes.row(i), steps));
        let mut out = Matrix::zeros(codes.len(), self.dim());
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&r?);
        }
        Ok(out)
    }
}

/// Seed used for PQ block `b`; block 0 keeps the run seed.
pub fn block_seed(seed: u64, block: usize) -> u64 {
    if block == 0 {
        seed
    } else {
        crate::linalg::derive_seed(seed, &alloc::format!("pq-block-{block}"))
    }
}
