use proptest::prelude::*;
use qinco_core::clustering::rq_encode_with_error;
use qinco_core::linalg::sq_l2;
use qinco_core::{kmeans, rq_decode, rq_encode, rq_train, Matrix, Rng, RqModel};

fn gaussian(n: usize, d: usize, rng: &mut Rng) -> Matrix<f32> {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal() as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kmeans_mse_never_increases(seed in 0u64..10_000, k in 1usize..8) {
        let mut rng = Rng::new(seed);
        let data = gaussian(60, 3, &mut rng);
        let res = kmeans(&data, k, 15, &mut rng).unwrap();
        for w in res.mse_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", res.mse_history);
        }
        prop_assert!(res.assignments.iter().all(|&a| a < k));
        prop_assert!(res.centroids.is_finite());
    }

    #[test]
    fn rq_step_mse_never_increases(seed in 0u64..10_000, steps in 1usize..5, k in 1usize..6) {
        let mut rng = Rng::new(seed);
        let data = gaussian(50, 4, &mut rng);
        let (_, mse) = rq_train(&data, steps, k, 10, &mut rng).unwrap();
        prop_assert_eq!(mse.len(), steps);
        for w in mse.windows(2) {
            // residuals are stored in single precision
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-6));
        }
    }

    #[test]
    fn rq_encode_matches_per_step_scan(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let books = (0..3).map(|_| gaussian(5, 3, &mut rng)).collect();
        let model = RqModel::new(books).unwrap();
        let x: Vec<f32> = (0..3).map(|_| rng.normal() as f32).collect();
        let codes = rq_encode(&model, &x).unwrap();
        let mut r = x.clone();
        for (m, book) in model.codebooks.iter().enumerate() {
            let mut best = 0;
            for k in 1..book.rows() {
                if sq_l2(&r, book.row(k)) < sq_l2(&r, book.row(best)) {
                    best = k;
                }
            }
            prop_assert_eq!(codes[m] as usize, best);
            for (ri, c) in r.iter_mut().zip(book.row(best)) {
                *ri -= *c;
            }
        }
        let (_, err) = rq_encode_with_error(&model, &x).unwrap();
        let rec = rq_decode(&model, &codes).unwrap();
        prop_assert!((sq_l2(&x, &rec) - err).abs() <= 1e-6 * err.max(1e-3));
    }
}

#[test]
fn encoding_is_reproducible() {
    let mut rng = Rng::new(11);
    let data = gaussian(200, 6, &mut rng);
    let train = |seed| rq_train(&data, 3, 8, 10, &mut Rng::new(seed)).unwrap().0;
    let (a, b) = (train(5), train(5));
    assert_eq!(a, b);
    for i in 0..data.rows() {
        assert_eq!(rq_encode(&a, data.row(i)).unwrap(), rq_encode(&b, data.row(i)).unwrap());
    }
}
