use proptest::prelude::*;
use qinco_core::codec::Anchors;
use qinco_core::data::GaussianMixture;
use qinco_core::linalg::sq_l2;
use qinco_core::search::{aq_fit, aq_normal_equations, aq_norms, exhaustive_search, ivf_build, lut_distances, IvfConfig};
use qinco_core::training::{init_model, FitConfig, TrainData};
use qinco_core::{AqDecoder, CodeArray, IvfIndex, Matrix, QincoConfig, Ridge, Rng, SearchParams, TrainConfig};

fn random_aq(steps: usize, k: usize, d: usize, rng: &mut Rng) -> AqDecoder<f32> {
    AqDecoder {
        codebooks: (0..steps)
            .map(|_| Matrix::from_vec(k, d, (0..k * d).map(|_| rng.normal() as f32).collect()).unwrap())
            .collect(),
        fitted_mse: 0.0,
    }
}

fn random_codes(n: usize, steps: usize, k: usize, rng: &mut Rng) -> CodeArray {
    CodeArray::new(steps, k, (0..n * steps).map(|_| rng.below(k) as u32).collect(), None).unwrap()
}

proptest! {
    #[test]
    fn lut_matches_decode_then_distance(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let aq = random_aq(3, 5, 6, &mut rng);
        let mut codes = random_codes(20, 3, 5, &mut rng);
        codes.set_norms(aq_norms(&aq, &codes)).unwrap();
        let q: Vec<f32> = (0..6).map(|_| rng.normal() as f32).collect();
        let lut = lut_distances(&aq, &q, &codes).unwrap();
        for i in 0..20 {
            let direct = sq_l2(&q, &aq.decode(codes.row(i)));
            prop_assert!((lut[i] - direct).abs() <= 1e-4 * direct.max(1.0));
            // the same formula evaluated without the table
            let dot: f64 = aq.decode(codes.row(i)).iter().zip(&q).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let n = codes.norms().unwrap()[i] as f64;
            let naive = q.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() - 2.0 * dot + n * n;
            prop_assert!((lut[i] - naive).abs() <= 1e-5 * naive.abs().max(1.0));
        }
    }
}

#[test]
fn single_step_lut_is_exact_distance() {
    let mut rng = Rng::new(3);
    let aq = random_aq(1, 4, 3, &mut rng);
    let mut codes = CodeArray::new(1, 4, vec![2], None).unwrap();
    codes.set_norms(aq_norms(&aq, &codes)).unwrap();
    let q = [0.5f32, -1.0, 2.0];
    let got = lut_distances(&aq, &q, &codes).unwrap()[0];
    assert!((got - sq_l2(&q, aq.codebooks[0].row(2))).abs() < 1e-5);
}

#[test]
fn aq_fit_is_least_squares_optimal_and_beats_base_codebooks() {
    let mut rng = Rng::new(4);
    let g = GaussianMixture::random(8, 5, 2.0, &mut rng).unwrap();
    let data = g.sample(2000, &mut rng);
    let mut t = TrainConfig::default();
    t.seed = 2;
    let (model, _) = init_model(TrainData::plain(&data), &FitConfig::new(QincoConfig::new(8, 3, 16, 1, 8), t)).unwrap();
    let aq = aq_fit(&model, &data, None).unwrap();
    let codes = model.encode_batch(&data, None).unwrap();
    let ne = aq_normal_equations(&codes, &data).unwrap();
    let residual = ne.residual_inf(&aq.flat_solution(), Ridge::Auto);
    assert!(residual <= 1e-4 * ne.atb_inf(), "{residual}");
    let base = model.decode_batch(&codes, 3, None).unwrap();
    let base_mse = qinco_core::metrics::mse(&data, &base).unwrap();
    assert!(aq.fitted_mse <= base_mse * (1.0 + 1e-6), "{} > {base_mse}", aq.fitted_mse);
}

fn small_index(k_ivf: usize, seed: u64) -> (IvfIndex<f32>, Matrix<f32>, Matrix<f32>) {
    let mut rng = Rng::new(seed);
    let g = GaussianMixture::random(8, 6, 3.0, &mut rng).unwrap();
    let train = g.sample(600, &mut rng);
    let valid = g.sample(100, &mut rng);
    let db = g.sample(300, &mut rng);
    let queries = g.sample(20, &mut rng);
    let mut t = TrainConfig::default();
    t.max_epochs = 2;
    t.batch_size = 64;
    t.base_lr = 1e-3;
    t.seed = seed;
    let cfg = IvfConfig {
        k_ivf,
        fit: FitConfig::new(QincoConfig::new(8, 2, 8, 1, 8), t),
    };
    let (index, _) = ivf_build(&train, &valid, &db, &cfg, &mut |_| {}).unwrap();
    (index, db, queries)
}

#[test]
fn every_id_is_stored_exactly_once() {
    let (index, db, _) = small_index(4, 1);
    let mut ids: Vec<usize> = index.lists.iter().flat_map(|l| l.ids.clone()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..db.rows()).collect::<Vec<_>>());
    assert!(index.model.params.nets[0].is_some());
}

#[test]
fn full_probe_and_shortlist_equal_exhaustive_search() {
    let (mut index, db, queries) = small_index(4, 2);
    let params = SearchParams { p_ivf: 4, n_short: db.rows(), k: 10 };
    let exhaustive = exhaustive_search(&index.reconstruct_all().unwrap(), &queries, 10).unwrap();
    let got = index.search_batch(&queries, params).unwrap();
    assert_eq!(got, exhaustive);
    index.cache_reconstructions().unwrap();
    assert_eq!(index.search_batch(&queries, params).unwrap(), got);
}

#[test]
fn single_bucket_scans_everything() {
    let (index, db, queries) = small_index(1, 3);
    assert_eq!(index.lists[0].len(), db.rows());
    let params = SearchParams { p_ivf: 1, n_short: db.rows(), k: 5 };
    let got = index.search_batch(&queries, params).unwrap();
    let exhaustive = exhaustive_search(&index.reconstruct_all().unwrap(), &queries, 5).unwrap();
    assert_eq!(got, exhaustive);
}

#[test]
fn search_is_deterministic_and_pools_are_nested() {
    let (index, _, queries) = small_index(4, 4);
    for q in 0..queries.rows() {
        let query = queries.row(q);
        let mut prev: Vec<usize> = Vec::new();
        for p in 1..=4 {
            let params = SearchParams { p_ivf: p, n_short: 1000, k: 1000 };
            let a = index.search(query, params).unwrap();
            assert_eq!(a, index.search(query, params).unwrap());
            let ids: Vec<usize> = a.iter().map(|n| n.id).collect();
            assert!(prev.iter().all(|id| ids.contains(id)));
            prev = ids;
        }
    }
}

#[test]
fn empty_buckets_give_empty_results() {
    let (index, _, queries) = small_index(2, 5);
    let empty = IvfIndex::new(index.centroids.clone(), index.model.clone(), index.aq.clone()).unwrap();
    let params = SearchParams { p_ivf: 2, n_short: 5, k: 5 };
    assert!(empty.search(queries.row(0), params).unwrap().is_empty());
    assert!(index.search(queries.row(0), SearchParams { p_ivf: 3, n_short: 5, k: 5 }).is_err());
}

#[test]
fn ivf_anchors_fold_into_reconstruction() {
    let (index, db, _) = small_index(3, 6);
    let assignment = index.assign(&db).unwrap();
    let anchors = Anchors { centroids: &index.centroids, assignment: &assignment };
    let codes = index.model.encode_batch(&db, Some(anchors)).unwrap();
    let rec = index.model.decode_batch(&codes, 0, Some(anchors)).unwrap();
    for i in 0..db.rows() {
        for (a, b) in rec.row(i).iter().zip(index.centroids.row(assignment[i])) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
}
