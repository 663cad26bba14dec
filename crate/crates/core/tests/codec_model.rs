use qinco_core::codec::{block_seed, PqQincoModel};
use qinco_core::data::GaussianMixture;
use qinco_core::linalg::{sq_l2, sq_norm};
use qinco_core::model::{ConcatBlock, Variant};
use qinco_core::training::{fit, init_model, step_losses, FitConfig, TrainData};
use qinco_core::{rq_decode, rq_encode, rq_train, Matrix, QincoConfig, QincoModel, Rng, RqModel, TrainConfig};

fn gaussian(n: usize, d: usize, rng: &mut Rng) -> Matrix<f32> {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn randomized(cfg: QincoConfig, seed: u64) -> QincoModel<f64> {
    let mut rng = Rng::new(seed);
    let books = (0..cfg.steps)
        .map(|_| Matrix::from_vec(cfg.codebook_size, cfg.dim, (0..cfg.codebook_size * cfg.dim).map(|_| rng.normal()).collect()).unwrap())
        .collect();
    let mut model = QincoModel::init_from_rq(&RqModel::new(books).unwrap(), cfg, &mut rng).unwrap();
    let flat: Vec<f64> = (0..model.num_params()).map(|_| 0.3 * rng.normal()).collect();
    model.params.load_flat(&flat).unwrap();
    model
}

fn quick_cfg(model: QincoConfig, epochs: usize, seed: u64) -> FitConfig {
    let mut train = TrainConfig::default();
    train.max_epochs = epochs;
    train.batch_size = 64;
    train.base_lr = 1e-3;
    train.seed = seed;
    FitConfig::new(model, train)
}

#[test]
fn pass_through_model_is_bit_identical_to_rq() {
    for variant in [Variant::Standard, Variant::LowRank] {
        let mut rng = Rng::new(21);
        let data = gaussian(1000, 8, &mut rng);
        let (rq, _) = rq_train(&data, 3, 16, 10, &mut rng).unwrap();
        let mut cfg = QincoConfig::new(8, 3, 16, 2, 12);
        cfg.variant = variant;
        let model = QincoModel::init_from_rq(&rq, cfg, &mut rng).unwrap();
        let codes = model.encode_batch(&data, None).unwrap();
        for i in 0..data.rows() {
            let x = data.row(i);
            let want = rq_encode(&rq, x).unwrap();
            assert_eq!(codes.row(i), &want[..]);
            for m in 0..=3 {
                assert_eq!(model.decode(&want, m).unwrap(), rq_decode(&rq, &want[..m]).unwrap());
            }
        }
        for m in 0..3 {
            let xhat: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
            assert_eq!(model.adapt_codebook(m, &xhat).unwrap(), rq.codebooks[m]);
        }
    }
}

#[test]
fn init_step_losses_equal_rq_training_mse() {
    let mut rng = Rng::new(8);
    let data = gaussian(400, 6, &mut rng);
    let cfg = quick_cfg(QincoConfig::new(6, 3, 8, 1, 8), 0, 3);
    let (model, rq_mse) = init_model(TrainData::plain(&data), &cfg).unwrap();
    let losses = step_losses(&model, TrainData::plain(&data)).unwrap();
    for (l, r) in losses.iter().zip(&rq_mse) {
        assert!((l - r).abs() <= 1e-5 * r, "{l} vs {r}");
    }
}

/// Forward pass written as plain loops over the stored weights.
fn scalar_codeword(model: &QincoModel<f64>, m: usize, xhat: &[f64], k: usize) -> Vec<f64> {
    let d = model.dim();
    let cbar = model.params.base[m].row(k).to_vec();
    let Some(net) = &model.params.nets[m] else {
        return cbar;
    };
    let input: Vec<f64> = cbar.iter().chain(xhat).copied().collect();
    let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|i| b[i] + (0..x.len()).map(|j| w[i * x.len() + j] * x[j]).sum::<f64>())
            .collect()
    };
    let mut y = match &net.concat {
        ConcatBlock::Full(l) => affine(&l.weight, &l.bias, &input),
        ConcatBlock::LowRank { down, up } => {
            let u = affine(&down.weight, &down.bias, &input);
            let z = affine(&up.weight, &up.bias, &u);
            (0..d).map(|i| z[i] + cbar[i]).collect()
        }
    };
    for b in &net.blocks {
        let a: Vec<f64> = affine(&b.up.weight, &b.up.bias, &y).into_iter().map(|v| v.max(0.0)).collect();
        let delta = affine(&b.down.weight, &b.down.bias, &a);
        for (yi, di) in y.iter_mut().zip(delta) {
            *yi += di;
        }
    }
    y
}

#[test]
fn adapt_codebook_matches_scalar_oracle() {
    for (seed, variant) in [(1, Variant::Standard), (2, Variant::LowRank)] {
        let mut cfg = QincoConfig::new(5, 3, 4, 2, 7);
        cfg.variant = variant;
        let model = randomized(cfg, seed);
        let mut rng = Rng::new(seed + 10);
        for m in 0..3 {
            let xhat: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let book = model.adapt_codebook(m, &xhat).unwrap();
            for k in 0..4 {
                let want = scalar_codeword(&model, m, &xhat, k);
                for (a, b) in book.row(k).iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn encode_matches_exhaustive_step_scan() {
    let model = randomized(QincoConfig::new(4, 3, 5, 1, 6), 4);
    let mut rng = Rng::new(40);
    for _ in 0..50 {
        let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
        let codes = model.encode(&x).unwrap();
        let mut xhat = vec![0.0; 4];
        for m in 0..3 {
            let r: Vec<f64> = x.iter().zip(&xhat).map(|(a, b)| a - b).collect();
            let mut best = (0, f64::INFINITY);
            for k in 0..5 {
                let c = scalar_codeword(&model, m, &xhat, k);
                let dist = sq_l2(&r, &c);
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            assert_eq!(codes[m] as usize, best.0);
            let c = scalar_codeword(&model, m, &xhat, best.0);
            xhat.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
    }
}

#[test]
fn decodable_point_is_a_fixed_point_for_one_step() {
    let model = randomized(QincoConfig::new(3, 1, 6, 1, 4), 5);
    for k in 0..6u32 {
        let x = model.decode(&[k], 1).unwrap();
        let trace = model.encode_from(&x, None).unwrap();
        assert_eq!(trace.codes, vec![k]);
        assert_eq!(model.decode(&trace.codes, 1).unwrap(), x);
    }
}

#[test]
fn prefix_decoding_is_incremental() {
    let mut model = randomized(QincoConfig::new(4, 4, 3, 1, 5), 6);
    model.norm_scale = 2.5;
    let codes = [2u32, 0, 1, 2];
    assert_eq!(model.decode(&codes, 0).unwrap(), vec![0.0; 4]);
    for m in 0..4 {
        assert_eq!(model.decode(&codes[..m], m).unwrap(), model.decode(&codes, m).unwrap());
        let prev = model.decode(&codes, m).unwrap();
        let next = model.decode(&codes, m + 1).unwrap();
        let xhat: Vec<f64> = prev.iter().map(|v| v / 2.5).collect();
        let mut cw = vec![0.0; 4];
        model.codeword(m, &xhat, codes[m] as usize, &mut cw).unwrap();
        for i in 0..4 {
            assert!((prev[i] + cw[i] * 2.5 - next[i]).abs() < 1e-12);
        }
    }
    assert!(model.decode(&[3, 0, 0, 0], 1).is_err());
    assert!(model.decode(&codes, 5).is_err());
}

#[test]
fn round_trip_error_equals_encoder_residual() {
    let mut rng = Rng::new(12);
    let g = GaussianMixture::random(8, 4, 2.0, &mut rng).unwrap();
    let train = g.sample(600, &mut rng);
    let valid = g.sample(200, &mut rng);
    let held = g.sample(300, &mut rng);
    let cfg = quick_cfg(QincoConfig::new(8, 3, 8, 1, 16), 3, 1);
    let (model, _) = fit(TrainData::plain(&train), TrainData::plain(&valid), &cfg, &mut |_| {}).unwrap();
    let traces = model.encode_batch_traced(&held, None).unwrap();
    let s2 = (model.norm_scale as f64).powi(2);
    let from_encoder = traces.iter().map(|t| t.step_errors[2]).sum::<f64>() / 300.0 * s2;
    let codes = model.encode_batch(&held, None).unwrap();
    let rec = model.decode_batch(&codes, 3, None).unwrap();
    let direct = qinco_core::metrics::mse(&held, &rec).unwrap();
    assert!((direct - from_encoder).abs() <= 1e-5 * direct, "{direct} vs {from_encoder}");
    let norms = codes.norms().unwrap();
    for i in 0..held.rows() {
        assert!((norms[i] as f64 - sq_norm(rec.row(i)).sqrt()).abs() <= 1e-4 * (norms[i] as f64).max(1.0));
    }
}

#[test]
fn decode_is_in_original_units() {
    let mut rng = Rng::new(13);
    let data = gaussian(300, 4, &mut rng);
    let scaled = data.map(|v| v * 64.0);
    let cfg = quick_cfg(QincoConfig::new(4, 2, 4, 1, 4), 0, 0);
    let (small, _) = init_model(TrainData::plain(&data), &cfg).unwrap();
    let (big, _) = init_model(TrainData::plain(&scaled), &cfg).unwrap();
    assert_eq!(big.norm_scale, small.norm_scale * 64.0);
    for i in 0..20 {
        let codes = big.encode(scaled.row(i)).unwrap();
        assert_eq!(codes, small.encode(data.row(i)).unwrap());
        let a = big.decode(&codes, 2).unwrap();
        let b = small.decode(&codes, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y * 64.0).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }
}

#[test]
fn single_block_pq_equals_plain_model() {
    let mut rng = Rng::new(14);
    let train = gaussian(300, 6, &mut rng);
    let valid = gaussian(60, 6, &mut rng);
    let cfg = quick_cfg(QincoConfig::new(6, 2, 8, 1, 8), 2, 9);
    assert_eq!(block_seed(9, 0), 9);
    let (plain, _) = fit(TrainData::plain(&train), TrainData::plain(&valid), &cfg, &mut |_| {}).unwrap();
    let (pq, _) = PqQincoModel::train(&train, &valid, 1, &cfg, &mut |_, _| {}).unwrap();
    assert_eq!(pq.blocks[0], plain);
    let a = pq.encode_batch(&valid).unwrap();
    let b = plain.encode_batch(&valid, None).unwrap();
    assert_eq!(a.indices(), b.indices());
}

#[test]
fn pq_blocks_are_independent() {
    let mut rng = Rng::new(15);
    let train = gaussian(200, 4, &mut rng);
    let valid = gaussian(40, 4, &mut rng);
    let mut cfg = quick_cfg(QincoConfig::new(2, 2, 4, 1, 4), 1, 2);
    cfg.norm_scale = Some(5.0);
    let (a, _) = PqQincoModel::train(&train, &valid, 2, &cfg, &mut |_, _| {}).unwrap();
    // scramble the second block's columns across rows
    let mut other = train.clone();
    for i in 0..other.rows() {
        let j = (i * 7 + 3) % other.rows();
        let (x, y) = (train.get(j, 2), train.get(j, 3));
        other.set(i, 2, x);
        other.set(i, 3, y);
    }
    let (b, _) = PqQincoModel::train(&other, &valid, 2, &cfg, &mut |_, _| {}).unwrap();
    assert_eq!(a.blocks[0], b.blocks[0]);
    let (ca, cb) = (a.encode_batch(&valid).unwrap(), b.encode_batch(&valid).unwrap());
    for i in 0..valid.rows() {
        assert_eq!(ca.row(i)[..2], cb.row(i)[..2]);
    }
    assert!(PqQincoModel::train(&train, &valid, 3, &cfg, &mut |_, _| {}).is_err());
}

#[test]
fn pq_byte_budget_grid_runs_end_to_end() {
    let mut rng = Rng::new(16);
    let g = GaussianMixture::random(32, 8, 1.0, &mut rng).unwrap();
    let train = g.sample(400, &mut rng);
    let valid = g.sample(50, &mut rng);
    let cfg = quick_cfg(QincoConfig::new(2, 2, 256, 1, 4), 1, 3);
    let (pq, _) = PqQincoModel::train(&train, &valid, 16, &cfg, &mut |_, _| {}).unwrap();
    let codes = pq.encode_batch(&valid).unwrap();
    assert_eq!(codes.steps() * codes.bytes_per_index(), 32);
    let rec = pq.decode_batch(&codes, 2).unwrap();
    let coarse = pq.decode_batch(&codes, 1).unwrap();
    let (fine, rough) = (
        qinco_core::metrics::mse(&valid, &rec).unwrap(),
        qinco_core::metrics::mse(&valid, &coarse).unwrap(),
    );
    assert!(fine.is_finite() && fine <= rough);
}
