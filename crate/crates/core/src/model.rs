//! The implicit-codebook network.
//!
//! For step `m` the adapted codeword is `f_m(x̂, c̄_k)`: an affine projection
//! of the concatenation `(c̄_k ‖ x̂)` back to `D` dimensions followed by `L`
//! residual MLP blocks `y ← y + W₂·relu(W₁·y + b₁) + b₂`. The first step has
//! no network (its codebook is the base codebook) unless the model is coupled
//! to an IVF partition, in which case `x̂¹` is the bucket centroid.

use alloc::vec;
use alloc::vec::Vec;

use crate::clustering::RqModel;
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, Matrix, Real, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Concatenation block is a single affine map ℝ^{2D} → ℝ^D.
    Standard,
    /// Concatenation block is ℝ^{2D} → ℝ^h → ℝ^D with a skip of the base
    /// codeword around it.
    LowRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QincoConfig {
    pub dim: usize,
    pub steps: usize,
    pub codebook_size: usize,
    /// Residual MLP blocks per step (L).
    pub blocks: usize,
    /// Hidden width of the residual MLPs, and of the low-rank projection (h).
    pub hidden: usize,
    pub variant: Variant,
    pub ivf_coupled_step1: bool,
}

impl QincoConfig {
    pub fn new(dim: usize, steps: usize, codebook_size: usize, blocks: usize, hidden: usize) -> Self {
        Self {
            dim,
            steps,
            codebook_size,
            blocks,
            hidden,
            variant: Variant::Standard,
            ivf_coupled_step1: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.steps == 0 || self.codebook_size == 0 || self.hidden == 0 {
            return Err(invalid("dim, steps, codebook size and hidden width must be at least 1"));
        }
        if self.codebook_size > 1 << 16 {
            return Err(invalid("codebook size is limited to 65536"));
        }
        Ok(())
    }

    /// Whether step `step` (0-based) has a network.
    #[inline]
    pub fn has_net(&self, step: usize) -> bool {
        step > 0 || self.ivf_coupled_step1
    }

    pub fn net_steps(&self) -> usize {
        if self.ivf_coupled_step1 {
            self.steps
        } else {
            self.steps - 1
        }
    }

    fn concat_params(&self) -> u64 {
        let (d, h) = (self.dim as u64, self.hidden as u64);
        match self.variant {
            Variant::Standard => 2 * d * d + d,
            Variant::LowRank => 2 * d * h + h + h * d + d,
        }
    }
}

/// Trainable parameter count in closed form:
/// `M·K·D + M'·[(2D² + D) + 2·L·D·h]`, where `M'` is the number of steps that
/// carry a network and the low-rank variant replaces `2D² + D` by
/// `2Dh + h + hD + D`. Residual-MLP biases are not included; see
/// [`exact_param_count`].
pub fn param_count(cfg: &QincoConfig) -> u64 {
    let (m, k, d, l, h) = (
        cfg.steps as u64,
        cfg.codebook_size as u64,
        cfg.dim as u64,
        cfg.blocks as u64,
        cfg.hidden as u64,
    );
    m * k * d + cfg.net_steps() as u64 * (cfg.concat_params() + 2 * l * d * h)
}

/// Number of scalars actually stored in a model, residual-MLP biases
/// included.
pub fn exact_param_count(cfg: &QincoConfig) -> u64 {
    let (l, d, h) = (cfg.blocks as u64, cfg.dim as u64, cfg.hidden as u64);
    param_count(cfg) + cfg.net_steps() as u64 * l * (h + d)
}

/// `out = W·x + b`, with `W` stored row-major `outputs × inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); outputs * inputs],
            bias: vec![T::zero(); outputs],
        }
    }

    /// Weights and biases uniform in `±sqrt(1 / inputs)`.
    pub fn uniform(outputs: usize, inputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / crate::linalg::sqrt(inputs as f64);
        let mut draw = || T::of((2.0 * rng.uniform() - 1.0) * bound);
        let weight = (0..outputs * inputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    #[inline]
    fn row(&self, i: usize) -> &[T] {
        &self.weight[i * self.inputs..(i + 1) * self.inputs]
    }

    #[inline]
    fn forward(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x) + self.bias[i];
        }
    }

    /// `grad_x[j] += Σ_i W[i][j]·g[i]`
    fn backward_input(&self, g: &[T], grad_x: &mut [T]) {
        for (i, gi) in g.iter().enumerate() {
            if *gi == T::zero() {
                continue;
            }
            for (gx, w) in grad_x.iter_mut().zip(self.row(i)) {
                *gx += *w * *gi;
            }
        }
    }

    /// `dW += g ⊗ x`, `db += g`
    fn accumulate(&mut self, g: &[T], x: &[T]) {
        for (i, gi) in g.iter().enumerate() {
            self.bias[i] += *gi;
            if *gi == T::zero() {
                continue;
            }
            let row = &mut self.weight[i * self.inputs..(i + 1) * self.inputs];
            for (w, xv) in row.iter_mut().zip(x) {
                *w += *gi * *xv;
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.outputs, self.inputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    /// ℝ^D → ℝ^h
    pub up: Linear<T>,
    /// ℝ^h → ℝ^D
    pub down: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConcatBlock<T> {
    /// D × 2D affine map on `(c̄ ‖ x̂)`.
    Full(Linear<T>),
    /// h × 2D then D × h; the block output is added to `c̄`.
    LowRank { down: Linear<T>, up: Linear<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepNet<T> {
    pub concat: ConcatBlock<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

impl<T: Real> StepNet<T> {
    /// Network whose output equals the base codeword for every input.
    pub fn pass_through(cfg: &QincoConfig, rng: &mut Rng) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden);
        let concat = match cfg.variant {
            Variant::Standard => {
                let mut lin = Linear::zeros(d, 2 * d);
                for i in 0..d {
                    lin.weight[i * 2 * d + i] = T::one();
                }
                ConcatBlock::Full(lin)
            }
            Variant::LowRank => ConcatBlock::LowRank {
                down: Linear::uniform(h, 2 * d, rng),
                up: Linear::zeros(d, h),
            },
        };
        let blocks = (0..cfg.blocks)
            .map(|_| ResidualBlock {
                up: Linear::uniform(h, d, rng),
                down: Linear::zeros(d, h),
            })
            .collect();
        Self { concat, blocks }
    }

    fn zeros_like(&self) -> Self {
        let concat = match &self.concat {
            ConcatBlock::Full(l) => ConcatBlock::Full(l.zeros_like()),
            ConcatBlock::LowRank { down, up } => ConcatBlock::LowRank {
                down: down.zeros_like(),
                up: up.zeros_like(),
            },
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| ResidualBlock {
                up: b.up.zeros_like(),
                down: b.down.zeros_like(),
            })
            .collect();
        Self { concat, blocks }
    }

    fn first_linear(&self) -> &Linear<T> {
        match &self.concat {
            ConcatBlock::Full(l) => l,
            ConcatBlock::LowRank { down, .. } => down,
        }
    }

    /// Width of the concat projection output (D, or h for low rank).
    fn concat_width(&self) -> usize {
        self.first_linear().outputs
    }

    /// Contribution of `x̂` to the concat projection, bias included. Shared
    /// by all K codewords of a step.
    pub(crate) fn context(&self, xhat: &[T]) -> Vec<T> {
        let lin = self.first_linear();
        let d = xhat.len();
        (0..lin.outputs)
            .map(|i| dot(&lin.row(i)[d..], xhat) + lin.bias[i])
            .collect()
    }

    /// Contribution of a base codeword to the concat projection. Independent
    /// of `x̂`, so it can be computed once per model snapshot.
    pub(crate) fn project_base(&self, cbar: &[T], out: &mut [T]) {
        let lin = self.first_linear();
        let d = cbar.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&lin.row(i)[..d], cbar);
        }
    }

    /// Completes the codeword from its base projection and the step context.
    /// `out` (len D) receives the codeword; `hidden` is scratch of len h.
    pub(crate) fn finish(&self, proj: &[T], ctx: &[T], cbar: &[T], hidden: &mut [T], out: &mut [T]) {
        match &self.concat {
            ConcatBlock::Full(_) => {
                for ((o, p), c) in out.iter_mut().zip(proj).zip(ctx) {
                    *o = *p + *c;
                }
            }
            ConcatBlock::LowRank { up, .. } => {
                let u: &mut [T] = &mut hidden[..proj.len()];
                for ((o, p), c) in u.iter_mut().zip(proj).zip(ctx) {
                    *o = *p + *c;
                }
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (dot(up.row(i), u) + up.bias[i]) + cbar[i];
                }
            }
        }
        for block in &self.blocks {
            let a = &mut hidden[..block.up.outputs];
            block.up.forward(out, a);
            for v in a.iter_mut() {
                *v = v.max(T::zero());
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o += dot(block.down.row(i), a) + block.down.bias[i];
            }
        }
    }

    fn for_each_tensor(&self, f: &mut dyn FnMut(&[T])) {
        match &self.concat {
            ConcatBlock::Full(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            ConcatBlock::LowRank { down, up } => {
                f(&down.weight);
                f(&down.bias);
                f(&up.weight);
                f(&up.bias);
            }
        }
        for b in &self.blocks {
            f(&b.up.weight);
            f(&b.up.bias);
            f(&b.down.weight);
            f(&b.down.bias);
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        match &mut self.concat {
            ConcatBlock::Full(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            ConcatBlock::LowRank { down, up } => {
                f(&mut down.weight);
                f(&mut down.bias);
                f(&mut up.weight);
                f(&mut up.bias);
            }
        }
        for b in &mut self.blocks {
            f(&mut b.up.weight);
            f(&mut b.up.bias);
            f(&mut b.down.weight);
            f(&mut b.down.bias);
        }
    }
}

/// All trainable tensors of a model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// Base codebooks, one K×D matrix per step.
    pub base: Vec<Matrix<T>>,
    /// `nets[m]` is `None` for a step without a network.
    pub nets: Vec<Option<StepNet<T>>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            base: self.base.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect(),
            nets: self.nets.iter().map(|n| n.as_ref().map(StepNet::zeros_like)).collect(),
        }
    }

    /// Visits every tensor in declaration order: for each step, the base
    /// codebook followed by the step network's tensors.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&[T])) {
        for (b, n) in self.base.iter().zip(&self.nets) {
            f(b.as_slice());
            if let Some(n) = n {
                n.for_each_tensor(&mut f);
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for (b, n) in self.base.iter_mut().zip(&mut self.nets) {
            f(b.as_mut_slice());
            if let Some(n) = n {
                n.for_each_tensor_mut(&mut f);
            }
        }
    }

    /// Tensors of one step only, in the same order as [`Self::for_each_tensor`].
    pub fn for_each_step_tensor(&self, step: usize, mut f: impl FnMut(&[T])) {
        f(self.base[step].as_slice());
        if let Some(n) = &self.nets[step] {
            n.for_each_tensor(&mut f);
        }
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.len());
        n
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.for_each_tensor(|t| out.extend_from_slice(t));
        out
    }

    /// Overwrites all tensors from a flat buffer in declaration order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        check_dim(self.num_scalars(), flat.len())?;
        let mut off = 0;
        self.for_each_tensor_mut(|t| {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        });
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        let flat = other.flatten();
        let mut off = 0;
        self.for_each_tensor_mut(|t| {
            let n = t.len();
            for (a, b) in t.iter_mut().zip(&flat[off..off + n]) {
                *a += *b;
            }
            off += n;
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Activations of one step's forward pass for a single selected codeword.
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    step: usize,
    index: usize,
    xhat: Vec<T>,
    /// Low-rank bottleneck activations; empty for the standard variant.
    bottleneck: Vec<T>,
    /// Input of every residual block, then the final output.
    ys: Vec<Vec<T>>,
    /// Pre-activation of every residual block's hidden layer.
    pre: Vec<Vec<T>>,
}

impl<T: Real> StepCache<T> {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn output(&self) -> &[T] {
        self.ys.last().expect("cache holds at least the concat output")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QincoModel<T = f32> {
    config: QincoConfig,
    /// Inputs are divided by this value before encoding and reconstructions
    /// multiplied by it after decoding.
    pub norm_scale: T,
    pub params: Params<T>,
}

impl<T: Real> QincoModel<T> {
    /// Model whose codebooks pass the RQ base codebooks through unchanged:
    /// concat weight `[I | 0]`, zero final layers in every residual block.
    /// Encoding and decoding with it are identical to greedy RQ.
    pub fn init_from_rq(rq: &RqModel<T>, config: QincoConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        check_dim(config.steps, rq.steps())?;
        check_dim(config.codebook_size, rq.codebook_size())?;
        check_dim(config.dim, rq.dim())?;
        let nets = (0..config.steps)
            .map(|m| config.has_net(m).then(|| StepNet::pass_through(&config, rng)))
            .collect();
        Ok(Self {
            config,
            norm_scale: T::one(),
            params: Params {
                base: rq.codebooks.clone(),
                nets,
            },
        })
    }

    pub fn from_parts(config: QincoConfig, norm_scale: T, params: Params<T>) -> Result<Self> {
        config.validate()?;
        check_dim(config.steps, params.base.len())?;
        check_dim(config.steps, params.nets.len())?;
        for (m, (b, n)) in params.base.iter().zip(&params.nets).enumerate() {
            check_dim(config.codebook_size, b.rows())?;
            check_dim(config.dim, b.cols())?;
            if n.is_some() != config.has_net(m) {
                return Err(invalid("step networks do not match the configuration"));
            }
        }
        if !(norm_scale > T::zero()) {
            return Err(invalid("norm scale must be positive"));
        }
        let template = Self::init_from_rq(&RqModel::new(params.base.clone())?, config, &mut Rng::new(0))?;
        let mut expected = Vec::new();
        template.params.for_each_tensor(|t| expected.push(t.len()));
        let mut got = Vec::new();
        params.for_each_tensor(|t| got.push(t.len()));
        if expected != got {
            return Err(invalid("parameter tensor shapes do not match the configuration"));
        }
        Ok(Self {
            config,
            norm_scale,
            params,
        })
    }

    pub fn with_norm_scale(mut self, scale: T) -> Self {
        self.norm_scale = scale;
        self
    }

    #[inline]
    pub fn config(&self) -> &QincoConfig {
        &self.config
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    #[inline]
    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step < self.config.steps {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                step,
                steps: self.config.steps,
            })
        }
    }

    pub(crate) fn scratch_len(&self) -> usize {
        self.config.hidden.max(self.config.dim)
    }

    /// All K codewords of step `step` (0-based) for partial reconstruction
    /// `xhat`, in normalized units.
    pub fn adapt_codebook(&self, step: usize, xhat: &[T]) -> Result<Matrix<T>> {
        self.check_step(step)?;
        check_dim(self.dim(), xhat.len())?;
        let base = &self.params.base[step];
        let Some(net) = &self.params.nets[step] else {
            return Ok(base.clone());
        };
        let ctx = net.context(xhat);
        let mut proj = vec![T::zero(); net.concat_width()];
        let mut hidden = vec![T::zero(); self.scratch_len()];
        let mut out = Matrix::zeros(base.rows(), base.cols());
        for k in 0..base.rows() {
            net.project_base(base.row(k), &mut proj);
            net.finish(&proj, &ctx, base.row(k), &mut hidden, out.row_mut(k));
        }
        Ok(out)
    }

    /// Single adapted codeword, without caching.
    pub fn codeword(&self, step: usize, xhat: &[T], index: usize, out: &mut [T]) -> Result<()> {
        self.check_step(step)?;
        check_dim(self.dim(), xhat.len())?;
        let base = &self.params.base[step];
        if index >= base.rows() {
            return Err(Error::CodeOutOfRange {
                index: index as u32,
                codebook_size: base.rows(),
            });
        }
        let cbar = base.row(index);
        match &self.params.nets[step] {
            None => out.copy_from_slice(cbar),
            Some(net) => {
                let ctx = net.context(xhat);
                let mut proj = vec![T::zero(); net.concat_width()];
                let mut hidden = vec![T::zero(); self.scratch_len()];
                net.project_base(cbar, &mut proj);
                net.finish(&proj, &ctx, cbar, &mut hidden, out);
            }
        }
        Ok(())
    }

    /// Forward pass for one selected codeword, keeping the activations that
    /// [`Self::backward_step`] needs.
    pub fn forward_step(&self, step: usize, xhat: &[T], index: usize) -> Result<StepCache<T>> {
        self.check_step(step)?;
        check_dim(self.dim(), xhat.len())?;
        let base = &self.params.base[step];
        if index >= base.rows() {
            return Err(Error::CodeOutOfRange {
                index: index as u32,
                codebook_size: base.rows(),
            });
        }
        let cbar = base.row(index);
        let d = self.dim();
        let mut cache = StepCache {
            step,
            index,
            xhat: xhat.to_vec(),
            bottleneck: Vec::new(),
            ys: Vec::with_capacity(self.config.blocks + 1),
            pre: Vec::with_capacity(self.config.blocks),
        };
        let Some(net) = &self.params.nets[step] else {
            cache.ys.push(cbar.to_vec());
            return Ok(cache);
        };
        let ctx = net.context(xhat);
        let mut proj = vec![T::zero(); net.concat_width()];
        net.project_base(cbar, &mut proj);
        let mut y = vec![T::zero(); d];
        match &net.concat {
            ConcatBlock::Full(_) => {
                for ((o, p), c) in y.iter_mut().zip(&proj).zip(&ctx) {
                    *o = *p + *c;
                }
            }
            ConcatBlock::LowRank { up, .. } => {
                let u: Vec<T> = proj.iter().zip(&ctx).map(|(p, c)| *p + *c).collect();
                for (i, o) in y.iter_mut().enumerate() {
                    *o = (dot(up.row(i), &u) + up.bias[i]) + cbar[i];
                }
                cache.bottleneck = u;
            }
        }
        for block in &net.blocks {
            let mut a = vec![T::zero(); block.up.outputs];
            block.up.forward(&y, &mut a);
            let s: Vec<T> = a.iter().map(|v| v.max(T::zero())).collect();
            let mut next = y.clone();
            for (i, o) in next.iter_mut().enumerate() {
                *o += dot(block.down.row(i), &s) + block.down.bias[i];
            }
            cache.ys.push(y);
            cache.pre.push(a);
            y = next;
        }
        cache.ys.push(y);
        Ok(cache)
    }

    /// Back-propagates `upstream` (gradient of the loss with respect to the
    /// codeword produced in `cache`) into `grads`, including the base
    /// codeword row, and returns the gradient with respect to `x̂`.
    pub fn backward_step(&self, cache: &StepCache<T>, upstream: &[T], grads: &mut Params<T>) -> Result<Vec<T>> {
        let d = self.dim();
        check_dim(d, upstream.len())?;
        if cache.step >= self.config.steps || cache.index >= self.config.codebook_size {
            return Err(Error::CacheMismatch("step or codeword index out of range"));
        }
        let step = cache.step;
        let net = &self.params.nets[step];
        let expected_blocks = net.as_ref().map_or(0, |n| n.blocks.len());
        if cache.xhat.len() != d || cache.pre.len() != expected_blocks || cache.ys.len() != expected_blocks + 1 {
            return Err(Error::CacheMismatch("activation shapes"));
        }
        let mut grad_xhat = vec![T::zero(); d];
        let Some(net) = net else {
            for (g, u) in grads.base[step].row_mut(cache.index).iter_mut().zip(upstream) {
                *g += *u;
            }
            return Ok(grad_xhat);
        };
        let gnet = grads.nets[step]
            .as_mut()
            .ok_or(Error::CacheMismatch("gradient buffer lacks a network"))?;

        let mut g = upstream.to_vec();
        for l in (0..net.blocks.len()).rev() {
            let block = &net.blocks[l];
            let gblock = &mut gnet.blocks[l];
            let a = &cache.pre[l];
            let s: Vec<T> = a.iter().map(|v| v.max(T::zero())).collect();
            gblock.down.accumulate(&g, &s);
            let mut gs = vec![T::zero(); a.len()];
            block.down.backward_input(&g, &mut gs);
            for (gv, av) in gs.iter_mut().zip(a) {
                if !(*av > T::zero()) {
                    *gv = T::zero();
                }
            }
            gblock.up.accumulate(&gs, &cache.ys[l]);
            block.up.backward_input(&gs, &mut g);
        }

        let cbar = self.params.base[step].row(cache.index);
        let mut concat_input = Vec::with_capacity(2 * d);
        concat_input.extend_from_slice(cbar);
        concat_input.extend_from_slice(&cache.xhat);
        let mut grad_in = vec![T::zero(); 2 * d];
        match (&net.concat, &mut gnet.concat) {
            (ConcatBlock::Full(lin), ConcatBlock::Full(glin)) => {
                glin.accumulate(&g, &concat_input);
                lin.backward_input(&g, &mut grad_in);
            }
            (ConcatBlock::LowRank { down, up }, ConcatBlock::LowRank { down: gdown, up: gup }) => {
                gup.accumulate(&g, &cache.bottleneck);
                let mut gu = vec![T::zero(); down.outputs];
                up.backward_input(&g, &mut gu);
                gdown.accumulate(&gu, &concat_input);
                down.backward_input(&gu, &mut grad_in);
                // skip connection around the low-rank block
                for (gi, gv) in grad_in[..d].iter_mut().zip(&g) {
                    *gi += *gv;
                }
            }
            _ => return Err(Error::CacheMismatch("gradient buffer variant")),
        }
        for (gb, gi) in grads.base[step].row_mut(cache.index).iter_mut().zip(&grad_in[..d]) {
            *gb += *gi;
        }
        grad_xhat.copy_from_slice(&grad_in[d..]);
        Ok(grad_xhat)
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> QincoModel<U> {
        let mut params = QincoModel::<U>::init_from_rq(
            &RqModel {
                codebooks: self.params.base.iter().map(|b| b.map(|v| U::of(v.as_f64()))).collect(),
            },
            self.config,
            &mut Rng::new(0),
        )
        .expect("shapes come from a valid model")
        .params;
        let flat: Vec<U> = self.params.flatten().into_iter().map(|v| U::of(v.as_f64())).collect();
        params.load_flat(&flat).expect("same configuration");
        QincoModel {
            config: self.config,
            norm_scale: U::of(self.norm_scale.as_f64()),
            params,
        }
    }
}
