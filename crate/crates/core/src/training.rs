//! End-to-end training of the codebook networks.
//!
//! The loss of a batch is computed in two passes: the batch is first encoded
//! without gradients, then the selected codewords are recomputed with
//! activations kept and the per-step squared errors are back-propagated,
//! including through the partial reconstructions of later steps.

use alloc::vec;
use alloc::vec::Vec;

use crate::clustering::{rq_train, DEFAULT_KMEANS_ITERS};
use crate::codec::Anchors;
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{Matrix, Real, Rng};
use crate::model::{Params, QincoConfig, QincoModel};
use crate::par::map_range;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// Sum of the per-step losses of all steps.
    Summed,
    /// Only the loss after the last step.
    LastOnly,
    /// Sum of per-step losses, but step `m`'s loss only reaches step `m`'s
    /// parameters.
    Detached,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_patience_epochs: usize,
    pub stop_patience_epochs: usize,
    pub max_epochs: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clipping; off by default.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            base_lr: 1e-4,
            lr_drop_factor: 10.0,
            lr_patience_epochs: 10,
            stop_patience_epochs: 50,
            max_epochs: 500,
            loss_mode: LossMode::Summed,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(invalid("learning rate and drop factor must be positive"));
        }
        if self.lr_patience_epochs == 0 || self.stop_patience_epochs == 0 {
            return Err(invalid("patience values must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean summed loss over the epoch's batches, normalized units.
    pub train_loss: f64,
    /// Summed per-step loss on the validation set, normalized units.
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_valid_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch improved on the initial model.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    /// Validation MSE after each step for the returned model, original units.
    pub final_step_mse: Vec<f64>,
}

/// Training vectors with optional IVF anchors (starting reconstructions).
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a, T> {
    pub data: &'a Matrix<T>,
    pub anchors: Option<Anchors<'a, T>>,
}

impl<'a, T: Real> TrainData<'a, T> {
    pub fn plain(data: &'a Matrix<T>) -> Self {
        Self { data, anchors: None }
    }
}

/// Normalization divisor: the largest absolute component of the training set.
pub fn normalize_fit<T: Real>(train: &Matrix<T>) -> Result<f64> {
    let m = train.max_abs().as_f64();
    if !m.is_finite() {
        return Err(Error::NonFinite("training data"));
    }
    if m == 0.0 {
        return Err(invalid("training set is all zeros"));
    }
    Ok(m)
}

/// Data and starting points divided by the model's scale.
struct Normalized<T> {
    x: Matrix<T>,
    starts: Option<Matrix<T>>,
}

impl<T: Real> Normalized<T> {
    fn new(model: &QincoModel<T>, set: &TrainData<'_, T>) -> Result<Self> {
        check_dim(model.dim(), set.data.cols())?;
        let s = model.norm_scale;
        let starts = match &set.anchors {
            Some(a) => {
                a.check(set.data.rows(), model.dim())?;
                let mut m = Matrix::zeros(set.data.rows(), model.dim());
                for i in 0..set.data.rows() {
                    for (dst, v) in m.row_mut(i).iter_mut().zip(a.start(i)) {
                        *dst = *v / s;
                    }
                }
                Some(m)
            }
            None if model.config().ivf_coupled_step1 => {
                return Err(invalid("IVF-coupled model needs anchors"));
            }
            None => None,
        };
        Ok(Self {
            x: set.data.map(|v| v / s),
            starts,
        })
    }

    fn start(&self, i: usize) -> Option<&[T]> {
        self.starts.as_ref().map(|s| s.row(i))
    }
}

/// Forward/backward over one vector with known codes. Adds `weight_scale`
/// times the gradient into `grads` and the per-step squared errors into
/// `losses`.
fn vector_gradients<T: Real>(
    model: &QincoModel<T>,
    x: &[T],
    start: Option<&[T]>,
    codes: &[u32],
    mode: LossMode,
    weight_scale: T,
    grads: Option<&mut Params<T>>,
    losses: &mut [f64],
) -> Result<()> {
    let (d, steps) = (model.dim(), model.steps());
    let mut xhat = start.map_or_else(|| vec![T::zero(); d], <[T]>::to_vec);
    let mut caches = Vec::with_capacity(steps);
    let mut diffs = Vec::with_capacity(steps);
    for m in 0..steps {
        let cache = model.forward_step(m, &xhat, codes[m] as usize)?;
        let c = cache.output();
        let diff: Vec<T> = (0..d).map(|i| (x[i] - xhat[i]) - c[i]).collect();
        losses[m] += diff.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        for (xh, cv) in xhat.iter_mut().zip(c) {
            *xh += *cv;
        }
        caches.push(cache);
        diffs.push(diff);
    }
    let Some(grads) = grads else { return Ok(()) };
    let propagate = mode != LossMode::Detached;
    let mut g_next = vec![T::zero(); d];
    for m in (0..steps).rev() {
        let w = match mode {
            LossMode::LastOnly if m + 1 != steps => T::zero(),
            _ => weight_scale,
        };
        let two = T::of(-2.0) * w;
        let mut gc: Vec<T> = diffs[m].iter().map(|v| two * *v).collect();
        if propagate {
            for (g, n) in gc.iter_mut().zip(&g_next) {
                *g += *n;
            }
        }
        let gx = model.backward_step(&caches[m], &gc, grads)?;
        if propagate {
            for ((n, g), x) in g_next.iter_mut().zip(&gc).zip(&gx) {
                *n = *g + *x;
            }
        }
    }
    Ok(())
}

/// Rows are processed in fixed-size chunks whose partial gradients are
/// summed in chunk order, so results do not depend on the worker count.
const GRAD_CHUNK: usize = 64;

fn batch_pass<T: Real>(
    model: &QincoModel<T>,
    data: &Normalized<T>,
    rows: &[usize],
    codes: &[Vec<u32>],
    mode: LossMode,
    with_grads: bool,
) -> Result<(Option<Params<T>>, Vec<f64>)> {
    let steps = model.steps();
    let b = rows.len();
    let scale = T::of(1.0 / b as f64);
    let n_chunks = b.div_ceil(GRAD_CHUNK);
    let parts = map_range(n_chunks, |c| -> Result<(Option<Params<T>>, Vec<f64>)> {
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(b);
        let mut grads = with_grads.then(|| model.params.zeros_like());
        let mut losses = vec![0.0; steps];
        for j in lo..hi {
            let i = rows[j];
            vector_gradients(
                model,
                data.x.row(i),
                data.start(i),
                &codes[j],
                mode,
                scale,
                grads.as_mut(),
                &mut losses,
            )?;
        }
        Ok((grads, losses))
    });
    let mut total_grads: Option<Params<T>> = None;
    let mut total_losses = vec![0.0; steps];
    for part in parts {
        let (g, l) = part?;
        for (t, v) in total_losses.iter_mut().zip(&l) {
            *t += v;
        }
        if let Some(g) = g {
            match &mut total_grads {
                Some(t) => t.add_assign(&g),
                None => total_grads = Some(g),
            }
        }
    }
    total_losses.iter_mut().for_each(|v| *v /= b.max(1) as f64);
    Ok((total_grads, total_losses))
}

fn encode_rows<T: Real>(model: &QincoModel<T>, data: &Normalized<T>, rows: &[usize]) -> Vec<Vec<u32>> {
    let prepared = model.prepare();
    map_range(rows.len(), |j| {
        let i = rows[j];
        prepared.encode_normalized(data.x.row(i), data.start(i)).codes
    })
}

/// Mean per-step losses `‖r^m − f_m(x̂^m, c̄^m_{i^m})‖²` (normalized units)
/// over `batch`, with codes from a gradient-free encoding pass.
pub fn step_losses<T: Real>(model: &QincoModel<T>, batch: TrainData<'_, T>) -> Result<Vec<f64>> {
    let data = Normalized::new(model, &batch)?;
    let rows: Vec<usize> = (0..batch.data.rows()).collect();
    let codes = encode_rows(model, &data, &rows);
    let (_, losses) = batch_pass(model, &data, &rows, &codes, LossMode::Summed, false)?;
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss"));
    }
    Ok(losses)
}

/// Per-step losses of `batch` for fixed `codes` (the second pass without
/// gradients).
pub fn losses_with_codes<T: Real>(model: &QincoModel<T>, batch: TrainData<'_, T>, codes: &[Vec<u32>]) -> Result<Vec<f64>> {
    check_dim(batch.data.rows(), codes.len())?;
    let data = Normalized::new(model, &batch)?;
    let rows: Vec<usize> = (0..batch.data.rows()).collect();
    batch_pass(model, &data, &rows, codes, LossMode::Summed, false).map(|(_, l)| l)
}

/// Gradient of the batch loss under `mode`, together with the per-step
/// losses. Codes are given, i.e. this is the second of the two passes.
pub fn batch_gradients<T: Real>(
    model: &QincoModel<T>,
    batch: TrainData<'_, T>,
    codes: &[Vec<u32>],
    mode: LossMode,
) -> Result<(Params<T>, Vec<f64>)> {
    check_dim(batch.data.rows(), codes.len())?;
    let data = Normalized::new(model, &batch)?;
    let rows: Vec<usize> = (0..batch.data.rows()).collect();
    let (g, l) = batch_pass(model, &data, &rows, codes, mode, true)?;
    Ok((g.unwrap_or_else(|| model.params.zeros_like()), l))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.t += 1;
        let g = grads.flatten();
        let bc1 = 1.0 - num_traits::Float::powi(self.beta1, self.t);
        let bc2 = 1.0 - num_traits::Float::powi(self.beta2, self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.for_each_tensor_mut(|t| {
            for (j, p) in t.iter_mut().enumerate() {
                let i = off + j;
                let gi = g[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= T::of(lr * mhat / (crate::linalg::sqrt(vhat) + eps));
            }
            off += t.len();
        });
    }
}

fn clip<T: Real>(grads: &mut Params<T>, max_norm: f64) {
    let mut sq = 0.0;
    grads.for_each_tensor(|t| sq += t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    let norm = crate::linalg::sqrt(sq);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.for_each_tensor_mut(|t| t.iter_mut().for_each(|v| *v *= s));
    }
}

fn valid_loss<T: Real>(model: &QincoModel<T>, valid: &Normalized<T>) -> Result<Vec<f64>> {
    let rows: Vec<usize> = (0..valid.x.rows()).collect();
    let codes = encode_rows(model, valid, &rows);
    batch_pass(model, valid, &rows, &codes, LossMode::Summed, false).map(|(_, l)| l)
}

/// Trains `model` with Adam. The learning rate is divided by
/// `lr_drop_factor` whenever the validation loss has not decreased for
/// `lr_patience_epochs` epochs, and training stops after
/// `stop_patience_epochs` epochs without improvement. Returns the snapshot
/// with the lowest validation loss (possibly the initial model).
pub fn train<T: Real>(
    model: QincoModel<T>,
    train_set: TrainData<'_, T>,
    valid_set: TrainData<'_, T>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(QincoModel<T>, TrainReport)> {
    cfg.validate()?;
    if train_set.data.rows() == 0 || valid_set.data.rows() == 0 {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    let train_n = Normalized::new(&model, &train_set)?;
    let valid_n = Normalized::new(&model, &valid_set)?;
    let mut rng = Rng::new(cfg.seed).fork("shuffle");
    let mut model = model;
    let mut adam = Adam::new(model.num_params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    let initial: f64 = valid_loss(&model, &valid_n)?.iter().sum();
    if !initial.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    let mut best = (0usize, initial, model.clone());
    let mut lr = cfg.base_lr;
    let mut since_lr = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.data.rows()).collect();

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut train_sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let codes = encode_rows(&model, &train_n, rows);
            let (grads, losses) = batch_pass(&model, &train_n, rows, &codes, cfg.loss_mode, true)?;
            let mut grads = grads.expect("gradients requested");
            let total: f64 = losses.iter().sum();
            if !total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            if let Some(max_norm) = cfg.clip_grad_norm {
                clip(&mut grads, max_norm);
            }
            adam.step(&mut model.params, &grads, lr);
            train_sum += total * rows.len() as f64;
        }
        let valid: f64 = valid_loss(&model, &valid_n)?.iter().sum();
        if !valid.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_sum / order.len() as f64,
            valid_loss: valid,
            lr,
        };
        observer(&record);
        epochs.push(record);
        if valid < best.1 {
            best = (epoch, valid, model.clone());
            since_lr = 0;
            since_best = 0;
        } else {
            since_lr += 1;
            since_best += 1;
            if since_best >= cfg.stop_patience_epochs {
                break;
            }
            if since_lr >= cfg.lr_patience_epochs {
                lr /= cfg.lr_drop_factor;
                since_lr = 0;
            }
        }
    }
    let (best_epoch, best_valid_loss, best_model) = best;
    let s2 = best_model.norm_scale.as_f64() * best_model.norm_scale.as_f64();
    let final_step_mse = valid_loss(&best_model, &valid_n)?
        .iter()
        .map(|v| v * s2)
        .collect();
    Ok((
        best_model,
        TrainReport {
            initial_valid_loss: initial,
            epochs,
            best_epoch,
            best_valid_loss,
            final_step_mse,
        },
    ))
}

/// Full recipe: normalization, greedy RQ on the (anchor-relative) training
/// vectors, pass-through initialization, then [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub model: QincoConfig,
    pub train: TrainConfig,
    pub kmeans_iters: usize,
    /// Overrides the scale computed from the training set.
    pub norm_scale: Option<f64>,
}

impl FitConfig {
    pub fn new(model: QincoConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            norm_scale: None,
        }
    }
}

/// Pass-through model initialized from greedy RQ trained on the normalized
/// training set (relative to the anchors, when present).
pub fn init_model<T: Real>(train_set: TrainData<'_, T>, cfg: &FitConfig) -> Result<(QincoModel<T>, Vec<f64>)> {
    cfg.model.validate()?;
    check_dim(cfg.model.dim, train_set.data.cols())?;
    if cfg.model.ivf_coupled_step1 != train_set.anchors.is_some() {
        return Err(invalid("anchors must be given exactly for IVF-coupled models"));
    }
    let scale = match cfg.norm_scale {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(_) => return Err(invalid("norm scale must be positive")),
        None => normalize_fit(train_set.data)?,
    };
    let rng = Rng::new(cfg.train.seed);
    let s = T::of(scale);
    let mut targets = train_set.data.map(|v| v / s);
    if let Some(a) = &train_set.anchors {
        a.check(targets.rows(), targets.cols())?;
        for i in 0..targets.rows() {
            for (t, c) in targets.row_mut(i).iter_mut().zip(a.start(i)) {
                *t -= *c / s;
            }
        }
    }
    let (rq, rq_mse) = rq_train(
        &targets,
        cfg.model.steps,
        cfg.model.codebook_size,
        cfg.kmeans_iters,
        &mut rng.fork("rq"),
    )?;
    let model = QincoModel::init_from_rq(&rq, cfg.model, &mut rng.fork("init"))?.with_norm_scale(s);
    Ok((model, rq_mse))
}

pub fn fit<T: Real>(
    train_set: TrainData<'_, T>,
    valid_set: TrainData<'_, T>,
    cfg: &FitConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(QincoModel<T>, TrainReport)> {
    let (model, _) = init_model(train_set, cfg)?;
    train(model, train_set, valid_set, &cfg.train, observer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_fit_hand_case() {
        let m = Matrix::from_rows(&[[2.0f32, -4.0]]).unwrap();
        assert_eq!(normalize_fit(&m).unwrap(), 4.0);
        let scaled = m.map(|v| v / 4.0);
        assert_eq!(scaled.max_abs(), 1.0);
        assert!(normalize_fit(&Matrix::<f32>::zeros(2, 2)).is_err());
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut rng = Rng::new(0);
        let cfg = QincoConfig::new(4, 3, 5, 1, 6);
        let data = Matrix::from_vec(40, 4, (0..160).map(|_| rng.normal() as f32).collect()).unwrap();
        let (model, _) = init_model(TrainData::plain(&data), &FitConfig::new(cfg, TrainConfig::default())).unwrap();
        let codes: Vec<Vec<u32>> = (0..40).map(|i| model.encode(data.row(i)).unwrap()).collect();
        let (grads, _) = batch_gradients(&model, TrainData::plain(&data), &codes, LossMode::Summed).unwrap();
        let mut params = model.params.clone();
        let mut adam = Adam::new(model.num_params(), 0.9, 0.999, 1e-8);
        adam.step(&mut params, &grads, 0.0);
        assert_eq!(params, model.params);
    }

    #[test]
    fn single_centroid_vector_has_zero_loss() {
        let data = Matrix::from_rows(&[[1.0f32, -2.0], [3.0, 0.5], [1.0, -2.0]]).unwrap();
        let mut cfg = FitConfig::new(QincoConfig::new(2, 1, 2, 1, 2), TrainConfig::default());
        cfg.norm_scale = Some(1.0);
        let (model, _) = init_model(TrainData::plain(&data), &cfg).unwrap();
        let one = Matrix::from_rows(&[[1.0f32, -2.0]]).unwrap();
        assert_eq!(step_losses(&model, TrainData::plain(&one)).unwrap(), vec![0.0]);
    }
}
