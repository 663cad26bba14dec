use qinco_core::data::GaussianMixture;
use qinco_core::training::{fit, step_losses, FitConfig, TrainData};
use qinco_core::{LossMode, Matrix, QincoConfig, Rng, TrainConfig};

fn mixture_sets(seed: u64) -> (Matrix<f32>, Matrix<f32>) {
    let mut rng = Rng::new(seed);
    let g = GaussianMixture::random(8, 6, 1.5, &mut rng).unwrap();
    (g.sample(800, &mut rng), g.sample(200, &mut rng))
}

fn config(epochs: usize) -> FitConfig {
    let mut t = TrainConfig::default();
    t.max_epochs = epochs;
    t.batch_size = 64;
    t.base_lr = 1e-3;
    t.seed = 4;
    FitConfig::new(QincoConfig::new(8, 3, 8, 1, 16), t)
}

#[test]
fn training_is_reproducible() {
    let (train, valid) = mixture_sets(1);
    let run = || fit(TrainData::plain(&train), TrainData::plain(&valid), &config(4), &mut |_| {}).unwrap();
    let (ma, ra) = run();
    let (mb, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(ma, mb);
}

#[test]
fn returned_model_is_the_best_snapshot() {
    let (train, valid) = mixture_sets(2);
    let (model, report) = fit(TrainData::plain(&train), TrainData::plain(&valid), &config(6), &mut |_| {}).unwrap();
    let recomputed: f64 = step_losses(&model, TrainData::plain(&valid)).unwrap().iter().sum();
    let min = report
        .epochs
        .iter()
        .map(|e| e.valid_loss)
        .fold(report.initial_valid_loss, f64::min);
    assert_eq!(report.best_valid_loss, min);
    assert!((recomputed - min).abs() <= 1e-12 * min);
    for e in &report.epochs[report.best_epoch.saturating_sub(1)..] {
        assert!(report.best_valid_loss <= e.valid_loss);
    }
    assert!(report.best_valid_loss < report.initial_valid_loss);
}

#[test]
fn learning_rate_drops_by_the_factor_after_plateaus() {
    let (train, valid) = mixture_sets(3);
    let mut cfg = config(14);
    cfg.train.base_lr = 0.3;
    cfg.train.lr_patience_epochs = 1;
    cfg.train.stop_patience_epochs = 6;
    let mut records = Vec::new();
    let (_, report) = fit(TrainData::plain(&train), TrainData::plain(&valid), &cfg, &mut |r| records.push(r.clone())).unwrap();
    assert_eq!(records, report.epochs);
    let mut best = report.initial_valid_loss;
    let mut drops = 0;
    for w in records.windows(2) {
        if w[0].valid_loss < best {
            best = w[0].valid_loss;
            assert_eq!(w[1].lr, w[0].lr);
        } else if w[1].lr != w[0].lr {
            assert!((w[0].lr / w[1].lr - 10.0).abs() < 1e-12);
            drops += 1;
        }
    }
    assert!(drops >= 1, "{records:?}");
}

#[test]
fn step_losses_ignore_batch_order() {
    let (train, valid) = mixture_sets(4);
    let (model, _) = fit(TrainData::plain(&train), TrainData::plain(&valid), &config(1), &mut |_| {}).unwrap();
    let mut order: Vec<usize> = (0..valid.rows()).collect();
    Rng::new(0).shuffle(&mut order);
    let shuffled = valid.select_rows(&order);
    let a = step_losses(&model, TrainData::plain(&valid)).unwrap();
    let b = step_losses(&model, TrainData::plain(&shuffled)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * x);
    }
}

#[test]
fn loss_modes_train() {
    let (train, valid) = mixture_sets(5);
    for mode in [LossMode::LastOnly, LossMode::Detached] {
        let mut cfg = config(2);
        cfg.train.loss_mode = mode;
        let (_, report) = fit(TrainData::plain(&train), TrainData::plain(&valid), &cfg, &mut |_| {}).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert!(report.best_valid_loss.is_finite());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, valid) = mixture_sets(6);
    let mut cfg = config(1);
    cfg.train.batch_size = 0;
    assert!(fit(TrainData::plain(&train), TrainData::plain(&valid), &cfg, &mut |_| {}).is_err());
    let zeros = Matrix::<f32>::zeros(50, 8);
    assert!(fit(TrainData::plain(&zeros), TrainData::plain(&valid), &config(1), &mut |_| {}).is_err());
}
