mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsefeat::linalg::Matrix;
use sparsefeat::solver::{fista_solve, ista_solve, SmoothTerm, SolveConfig};

use common::{lasso_cd, lasso_objective};

fn problem(rows: usize, cols: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Matrix::random_normal(rows, cols, &mut rng);
    d.normalize_columns();
    let x = Matrix::random_normal(rows, 1, &mut rng).data().to_vec();
    (d, x)
}

fn cfg(lambda: f64, max_iter: usize) -> SolveConfig {
    SolveConfig {
        lambda_l1: lambda,
        max_iter,
        tol: 1e-14,
        ..SolveConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fista_reaches_the_coordinate_descent_minimum(
        rows in 3usize..10, cols in 3usize..20, lambda in 0.05f64..1.5, seed in 0u64..10_000,
    ) {
        let (d, x) = problem(rows, cols, seed);
        let h = SmoothTerm::recon(&x, &d);
        let res = fista_solve(&h, &cfg(lambda, 20_000), &vec![0.0; cols]).unwrap();
        let oracle = lasso_objective(&d, &x, &lasso_cd(&d, &x, lambda), lambda);
        let got = lasso_objective(&d, &x, &res.z, lambda);
        prop_assert!(got - oracle < 1e-6 * oracle.max(1.0), "fista {got} oracle {oracle}");
        prop_assert!((res.objective() - got).abs() < 1e-9 * got.max(1.0));
    }

    #[test]
    fn both_solvers_never_increase_the_objective(
        rows in 3usize..10, cols in 3usize..20, lambda in 0.05f64..1.5, seed in 0u64..10_000,
    ) {
        let (d, x) = problem(rows, cols, seed);
        let h = SmoothTerm::recon(&x, &d);
        for res in [
            fista_solve(&h, &cfg(lambda, 100), &vec![0.0; cols]).unwrap(),
            ista_solve(&h, &cfg(lambda, 100), &vec![0.0; cols]).unwrap(),
        ] {
            for w in res.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn large_penalty_gives_the_zero_code() {
    let (d, x) = problem(6, 12, 7);
    // zero is optimal once λ ≥ 2‖Dᵀx‖∞
    let lambda = 2.0 * d.matvec_t(&x).iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-9;
    let h = SmoothTerm::recon(&x, &d);
    let res = fista_solve(&h, &cfg(lambda, 500), &[0.3; 12]).unwrap();
    assert!(res.z.iter().all(|&v| v == 0.0), "{:?}", res.z);
}

#[test]
fn warm_start_at_the_minimum_stays_there() {
    let (d, x) = problem(8, 16, 21);
    let lambda = 0.4;
    let z = lasso_cd(&d, &x, lambda);
    let h = SmoothTerm::recon(&x, &d);
    let res = fista_solve(&h, &cfg(lambda, 50), &z).unwrap();
    let start = lasso_objective(&d, &x, &z, lambda);
    assert!((res.objective() - start).abs() < 1e-10 * start);
}
