use nalgebra::DMatrix;
use proptest::prelude::*;
use qinco_core::linalg::{pairwise_sq_l2, solve_least_squares, NormalEquations};
use qinco_core::{Matrix, Ridge, Rng};

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

#[test]
fn least_squares_matches_pseudo_inverse() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let a = random(10, 3, &mut rng);
        let b = random(10, 2, &mut rng);
        let x = solve_least_squares(&a, &b, Ridge::Fixed(0.0)).unwrap();
        let pinv = to_na(&a).pseudo_inverse(1e-12).unwrap();
        let oracle = pinv * to_na(&b);
        for i in 0..3 {
            for j in 0..2 {
                let (got, want) = (x.get(i, j), oracle[(i, j)]);
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }
}

#[test]
fn ridge_solution_matches_regularized_oracle() {
    let mut rng = Rng::new(4);
    let a = random(6, 4, &mut rng);
    let b = random(6, 1, &mut rng);
    let lambda = 0.7;
    let x = solve_least_squares(&a, &b, Ridge::Fixed(lambda)).unwrap();
    let na = to_na(&a);
    let lhs = na.transpose() * &na + DMatrix::identity(4, 4) * lambda;
    let oracle = lhs.cholesky().unwrap().solve(&(na.transpose() * to_na(&b)));
    for i in 0..4 {
        assert!((x.get(i, 0) - oracle[(i, 0)]).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn residual_is_orthogonal_to_columns(seed in 0u64..10_000, n in 4usize..30, p in 1usize..4, d in 1usize..4) {
        let mut rng = Rng::new(seed);
        let a = random(n, p, &mut rng);
        let b = random(n, d, &mut rng);
        let mut ne = NormalEquations::new(p, d);
        for i in 0..n {
            ne.add_dense_row(a.row(i), b.row(i));
        }
        let x = ne.solve(Ridge::Fixed(0.0)).unwrap();
        prop_assert!(ne.residual_inf(&x, Ridge::Fixed(0.0)) <= 1e-5 * ne.atb_inf());
    }

    #[test]
    fn pairwise_is_nonnegative_and_zero_on_identical_rows(seed in 0u64..10_000, n in 1usize..6, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let q = random(n, d, &mut rng).map(|v| v as f32);
        let dist = pairwise_sq_l2(&q, &q).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!(dist.get(i, j) >= 0.0);
                prop_assert_eq!(dist.get(i, j) == 0.0, q.row(i) == q.row(j));
            }
        }
    }
}
