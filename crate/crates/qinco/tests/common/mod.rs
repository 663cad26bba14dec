#![allow(dead_code)]

use qinco_core::codec::PqQincoModel;
use qinco_core::search::{AqDecoder, InvertedList, IvfIndex};
use qinco_core::{Matrix, QincoConfig, QincoModel, Rng, RqModel, Variant};

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f32> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal() as f32).collect()).unwrap()
}

pub fn random_config(rng: &mut Rng) -> QincoConfig {
    let mut cfg = QincoConfig::new(1 + rng.below(12), 1 + rng.below(4), 1 + rng.below(300), rng.below(3), 1 + rng.below(16));
    if rng.below(2) == 0 {
        cfg.variant = Variant::LowRank;
    }
    cfg.ivf_coupled_step1 = rng.below(3) == 0;
    cfg
}

/// Model whose every parameter is random.
pub fn random_model(cfg: QincoConfig, rng: &mut Rng) -> QincoModel<f32> {
    let rq = RqModel::new((0..cfg.steps).map(|_| random_matrix(cfg.codebook_size, cfg.dim, rng)).collect()).unwrap();
    let mut model = QincoModel::init_from_rq(&rq, cfg, rng).unwrap();
    let flat: Vec<f32> = (0..model.num_params()).map(|_| rng.normal() as f32).collect();
    model.params.load_flat(&flat).unwrap();
    model.with_norm_scale(0.1 + rng.uniform() as f32 * 10.0)
}

pub fn random_pq(rng: &mut Rng) -> PqQincoModel<f32> {
    let mut cfg = random_config(rng);
    cfg.ivf_coupled_step1 = false;
    let blocks = 1 + rng.below(3);
    PqQincoModel::new((0..blocks).map(|_| random_model(cfg, rng)).collect()).unwrap()
}

pub fn random_index(rng: &mut Rng) -> IvfIndex<f32> {
    let mut cfg = random_config(rng);
    cfg.ivf_coupled_step1 = true;
    let model = random_model(cfg, rng);
    let k_ivf = 1 + rng.below(5);
    let centroids = random_matrix(k_ivf, cfg.dim, rng);
    let aq = AqDecoder {
        codebooks: (0..cfg.steps).map(|_| random_matrix(cfg.codebook_size, cfg.dim, rng)).collect(),
        fitted_mse: rng.uniform(),
    };
    let n = rng.below(40);
    let mut lists = vec![InvertedList::default(); k_ivf];
    for id in 0..n {
        let l = &mut lists[rng.below(k_ivf)];
        l.ids.push(id);
        l.codes.extend((0..cfg.steps).map(|_| rng.below(cfg.codebook_size) as u32));
        l.norms.push(rng.uniform() as f32);
    }
    IvfIndex::from_parts(centroids, model, aq, lists).unwrap()
}

pub fn flat_bits(m: &QincoModel<f32>) -> Vec<u32> {
    m.params.flatten().iter().map(|v| v.to_bits()).collect()
}
