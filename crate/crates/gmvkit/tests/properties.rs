//! Property tests for module invariants beyond the acceptance suite's
//! criterion-9 sweep.

use gmvkit::market_data::{sample_covariance, CovEstimate};
use gmvkit::benchmarks::project_simplex;
use gmvkit::pgd::{gmv_pgd, project_sum_one, risk, PgdConfig, PgdMode};
use gmvkit::robust::{ActionEstimator, RobustConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random_psd(n: usize) -> impl Strategy<Value = CovEstimate> {
    proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |entries| {
        let a = DMatrix::from_vec(n, n, entries);
        let mut m = &a * a.transpose() / n as f64;
        for i in 0..n {
            m[(i, i)] += 1e-6;
        }
        CovEstimate::exact(m).expect("constructed PSD")
    })
}

proptest! {
    #[test]
    fn projection_is_nonexpansive(
        n in 2usize..20,
        seed_x in proptest::collection::vec(-10.0f64..10.0, 20),
        seed_y in proptest::collection::vec(-10.0f64..10.0, 20),
    ) {
        let x = DVector::from_vec(seed_x[..n].to_vec());
        let y = DVector::from_vec(seed_y[..n].to_vec());
        let px = project_sum_one(&x);
        let py = project_sum_one(&y);
        let lhs = (px.as_vector() - py.as_vector()).norm();
        prop_assert!(lhs <= (x - y).norm() + 1e-10);
    }

    #[test]
    fn projection_lands_on_hyperplane_and_is_closest(
        n in 2usize..20,
        seed in proptest::collection::vec(-10.0f64..10.0, 20),
    ) {
        let x = DVector::from_vec(seed[..n].to_vec());
        let p = project_sum_one(&x);
        let sum: f64 = p.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        // Any other feasible point is at least as far from x.
        let q = project_sum_one(&DVector::from_element(n, 0.0));
        let dx = (x.clone() - p.as_vector()).norm();
        let dq = (x - q.as_vector()).norm();
        prop_assert!(dx <= dq + 1e-10);
    }

    #[test]
    fn gmv_descent_is_monotone_on_random_psd(
        cov in (2usize..=50).prop_flat_map(random_psd),
    ) {
        let action = ActionEstimator::plugin(cov.clone());
        let config = PgdConfig {
            mode: PgdMode::Gmv,
            eta: None,
            steps: Some(60),
            gamma: None,
        };
        let trace = gmv_pgd(&action, &config).unwrap();
        for s in 1..=trace.num_steps() {
            let prev = risk(&trace.weights_at(s - 1).unwrap(), &cov).unwrap();
            let next = risk(&trace.weights_at(s).unwrap(), &cov).unwrap();
            prop_assert!(next <= prev + 1e-12, "risk rose at step {s}: {prev} -> {next}");
        }
    }

    #[test]
    fn simplex_projection_feasible_and_idempotent(
        n in 1usize..25,
        seed in proptest::collection::vec(-5.0f64..5.0, 25),
    ) {
        let x = DVector::from_vec(seed[..n].to_vec());
        let w = project_simplex(&x);
        let sum: f64 = w.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        let again = project_simplex(w.as_vector());
        prop_assert!((again.as_vector() - w.as_vector()).norm() < 1e-12);
    }

    #[test]
    fn robust_action_scales_linearly(
        t in 24usize..60,
        n in 2usize..5,
        c in prop_oneof![Just(2.0f64), Just(0.5), Just(4.0), Just(3.0)],
        w_seed in proptest::collection::vec(-3.0f64..3.0, 5),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sample = DMatrix::from_fn(t, n, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        });
        let est = ActionEstimator::robust(&sample, &RobustConfig::default()).unwrap();
        let w = DVector::from_vec(w_seed[..n].to_vec());
        let base = est.action(&w).unwrap();
        let scaled = est.action(&(&w * c)).unwrap();
        prop_assert!((scaled - &base * c).norm() <= 1e-10 * (1.0 + base.norm()));
    }

    #[test]
    fn sample_covariance_permutation_equivariant(
        t in 4usize..20,
        n in 2usize..6,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(t, n, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        });
        let reversed = DMatrix::from_fn(t, n, |i, j| data[(i, n - 1 - j)]);
        let cov = sample_covariance(&data).unwrap();
        let cov_rev = sample_covariance(&reversed).unwrap();
        for i in 0..n {
            for j in 0..n {
                let gap = (cov.matrix()[(i, j)] - cov_rev.matrix()[(n - 1 - i, n - 1 - j)]).abs();
                prop_assert!(gap < 1e-12);
            }
        }
    }
}
