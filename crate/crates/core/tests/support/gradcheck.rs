//! Central finite-difference check of the analytic gradients, shared by the
//! gradient tests and the acceptance suite.

use qinco_core::codec::Anchors;
use qinco_core::model::Variant;
use qinco_core::training::{batch_gradients, losses_with_codes, LossMode, TrainData};
use qinco_core::{Matrix, QincoConfig, QincoModel, Real, Rng, RqModel};

pub struct Instance<T> {
    pub model: QincoModel<T>,
    pub data: Matrix<T>,
    pub centroids: Matrix<T>,
    pub assignment: Vec<usize>,
}

impl<T: Real> Instance<T> {
    pub fn batch(&self) -> TrainData<'_, T> {
        TrainData {
            data: &self.data,
            anchors: self.model.config().ivf_coupled_step1.then_some(Anchors {
                centroids: &self.centroids,
                assignment: &self.assignment,
            }),
        }
    }

    pub fn codes(&self) -> Vec<Vec<u32>> {
        let batch = self.batch();
        (0..self.data.rows())
            .map(|i| {
                let start = batch.anchors.map(|a| a.start(i));
                self.model.encode_from(self.data.row(i), start).unwrap().codes
            })
            .collect()
    }
}

/// Random small configuration within D ≤ 16, M ≤ 4, K ≤ 8, L ≤ 2, h ≤ 32.
pub fn random_config(rng: &mut Rng) -> QincoConfig {
    let mut cfg = QincoConfig::new(
        2 + rng.below(15),
        2 + rng.below(3),
        2 + rng.below(7),
        rng.below(3),
        1 + rng.below(32),
    );
    if rng.below(3) == 0 {
        cfg.variant = Variant::LowRank;
    }
    cfg.ivf_coupled_step1 = rng.below(3) == 0;
    cfg
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Model with every parameter drawn at random (the pass-through
/// initialization would zero whole layers) and a small random batch.
pub fn random_instance(cfg: QincoConfig, rng: &mut Rng) -> Instance<f64> {
    let rq = RqModel::new(
        (0..cfg.steps)
            .map(|_| random_matrix(cfg.codebook_size, cfg.dim, 0.5, rng))
            .collect(),
    )
    .unwrap();
    let mut model = QincoModel::init_from_rq(&rq, cfg, rng).unwrap();
    let flat: Vec<f64> = (0..model.num_params()).map(|_| 0.4 * rng.normal()).collect();
    model.params.load_flat(&flat).unwrap();
    model.norm_scale = 0.5 + rng.uniform() * 2.0;
    let n = 6;
    Instance {
        model,
        data: random_matrix(n, cfg.dim, 1.0, rng),
        centroids: random_matrix(2, cfg.dim, 1.0, rng),
        assignment: (0..n).map(|_| rng.below(2)).collect(),
    }
}

pub fn cast_instance<U: Real>(inst: &Instance<f64>) -> Instance<U> {
    Instance {
        model: inst.model.cast(),
        data: inst.data.map(U::of),
        centroids: inst.centroids.map(U::of),
        assignment: inst.assignment.clone(),
    }
}

fn loss(inst: &Instance<f64>, codes: &[Vec<u32>], mode: LossMode) -> f64 {
    let l = losses_with_codes(&inst.model, inst.batch(), codes).unwrap();
    match mode {
        LossMode::LastOnly => *l.last().unwrap(),
        _ => l.iter().sum(),
    }
}

fn group_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-10 {
        err
    } else {
        err / scale
    }
}

/// Largest per-tensor relative error `‖g_a − g_fd‖∞ / ‖g_fd‖∞` between
/// `analytic` (gradient of the loss of `inst_analytic`, any precision) and
/// central differences of the double-precision loss of `inst`, for fixed
/// codes taken from `inst_analytic`.
pub fn param_error<T: Real>(inst: &Instance<f64>, inst_analytic: &Instance<T>, mode: LossMode) -> f64 {
    let codes = inst_analytic.codes();
    let (grads, _) = batch_gradients(&inst_analytic.model, inst_analytic.batch(), &codes, mode).unwrap();
    let analytic: Vec<f64> = grads.flatten().into_iter().map(|v| v.as_f64()).collect();
    let mut work = Instance {
        model: inst.model.clone(),
        data: inst.data.clone(),
        centroids: inst.centroids.clone(),
        assignment: inst.assignment.clone(),
    };
    let base = inst.model.params.flatten();
    let h = 1e-6;
    let mut numeric = vec![0.0; base.len()];
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        work.model.params.load_flat(&flat).unwrap();
        let up = loss(&work, &codes, mode);
        flat[i] = base[i] - h;
        work.model.params.load_flat(&flat).unwrap();
        let down = loss(&work, &codes, mode);
        flat[i] = base[i];
        numeric[i] = (up - down) / (2.0 * h);
    }
    let mut lens = Vec::new();
    inst.model.params.for_each_tensor(|t| lens.push(t.len()));
    let mut off = 0;
    let mut worst = 0.0f64;
    for len in lens {
        worst = worst.max(group_error(&analytic[off..off + len], &numeric[off..off + len]));
        off += len;
    }
    worst
}

/// Relative error of the gradient of `⟨u, f_m(x̂, c̄_k)⟩` with respect to
/// `x̂`, for every step that has a network.
pub fn xhat_error<T: Real>(inst: &Instance<f64>, inst_analytic: &Instance<T>, rng: &mut Rng) -> f64 {
    let model = &inst.model;
    let d = model.dim();
    let mut worst = 0.0f64;
    for m in 0..model.steps() {
        if model.params.nets[m].is_none() {
            continue;
        }
        let xhat: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let k = rng.below(model.codebook_size());
        let xt: Vec<T> = xhat.iter().map(|&v| T::of(v)).collect();
        let ut: Vec<T> = u.iter().map(|&v| T::of(v)).collect();
        let am = &inst_analytic.model;
        let cache = am.forward_step(m, &xt, k).unwrap();
        let mut sink = am.params.zeros_like();
        let analytic: Vec<f64> = am
            .backward_step(&cache, &ut, &mut sink)
            .unwrap()
            .into_iter()
            .map(|v| v.as_f64())
            .collect();
        let f = |x: &[f64]| {
            let mut out = vec![0.0; d];
            model.codeword(m, x, k, &mut out).unwrap();
            out.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        let mut x = xhat.clone();
        let numeric: Vec<f64> = (0..d)
            .map(|i| {
                x[i] = xhat[i] + h;
                let up = f(&x);
                x[i] = xhat[i] - h;
                let down = f(&x);
                x[i] = xhat[i];
                (up - down) / (2.0 * h)
            })
            .collect();
        worst = worst.max(group_error(&analytic, &numeric));
    }
    worst
}

/// Worst parameter and `x̂` errors over `seeds` random configurations, in
/// double and single precision.
pub fn sweep(seeds: u64) -> (f64, f64) {
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(1000 + seed);
        let cfg = random_config(&mut rng);
        let inst = random_instance(cfg, &mut rng);
        let inst32 = cast_instance::<f32>(&inst);
        worst64 = worst64
            .max(param_error(&inst, &inst, LossMode::Summed))
            .max(xhat_error(&inst, &inst, &mut rng.fork("x64")));
        worst32 = worst32
            .max(param_error(&inst, &inst32, LossMode::Summed))
            .max(xhat_error(&inst, &inst32, &mut rng.fork("x32")));
    }
    (worst64, worst32)
}
