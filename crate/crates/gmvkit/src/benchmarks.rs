//! Reference allocation strategies: equally weighted, sample GMV, long-only
//! GMV, linear-shrinkage GMV, and the robust GMV built on the PGD core.
//!
//! Strategy names as used in configs and the CLI: `ew`, `gmv`, `gmv_long`,
//! `gmv_lin`, `gmv_robust`. The name `gmv_nlin` is reserved but the
//! nonlinear-shrinkage estimator is not provided.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::market_data::{sample_covariance, CovEstimate, CovKind};
use crate::pgd::{gmv_pgd, PgdConfig, PgdMode, WeightVector};
use crate::robust::{ActionEstimator, RobustConfig};
use crate::{linalg, Error, Result};

/// Maximum covariance condition number `sample_gmv` accepts.
pub const MAX_CONDITION: f64 = 1e12;

/// Registered strategy kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Ew,
    GmvSample,
    GmvLong,
    GmvLin,
    GmvRobust,
}

impl StrategyKind {
    /// Parse a CLI/config name. `gmv_nlin` is recognized but unimplemented.
    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "ew" => Ok(Self::Ew),
            "gmv" => Ok(Self::GmvSample),
            "gmv_long" => Ok(Self::GmvLong),
            "gmv_lin" => Ok(Self::GmvLin),
            "gmv_robust" => Ok(Self::GmvRobust),
            "gmv_nlin" => Err(Error::NotImplemented("gmv_nlin")),
            other => Err(Error::InvalidInput(format!("unknown strategy `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ew => "ew",
            Self::GmvSample => "gmv",
            Self::GmvLong => "gmv_long",
            Self::GmvLin => "gmv_lin",
            Self::GmvRobust => "gmv_robust",
        }
    }
}

/// A strategy plus the parameters its fit needs.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Robust-estimator parameters, used by `gmv_robust`.
    pub robust: RobustConfig,
    /// Step-size/step-count overrides for `gmv_robust` (mode is forced to GMV).
    pub pgd: PgdConfig,
    /// PGD step budget for the long-only strategy.
    pub long_budget: usize,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            robust: RobustConfig::default(),
            pgd: PgdConfig::default(),
            long_budget: 10_000,
        }
    }

    /// Fit the strategy on one estimation window (rows are observations).
    pub fn fit(&self, window: &DMatrix<f64>) -> Result<WeightVector> {
        match self.kind {
            StrategyKind::Ew => ew_weights(window.ncols()),
            StrategyKind::GmvSample => sample_gmv(&sample_covariance(window)?),
            StrategyKind::GmvLong => gmv_long(&sample_covariance(window)?, self.long_budget),
            StrategyKind::GmvLin => {
                let cov = sample_covariance(window)?;
                sample_gmv(&linear_shrinkage(&cov, window)?)
            }
            StrategyKind::GmvRobust => {
                let action = ActionEstimator::robust(window, &self.robust)?;
                let config = PgdConfig {
                    mode: PgdMode::Gmv,
                    gamma: None,
                    ..self.pgd.clone()
                };
                gmv_pgd(&action, &config)?.final_weights()
            }
        }
    }
}

/// The naive `1/N` allocation.
pub fn ew_weights(n: usize) -> Result<WeightVector> {
    WeightVector::equal(n)
}

/// Sample-based GMV weights `Σ̂⁻¹1 / (1ᵀΣ̂⁻¹1)` via a symmetric linear solve.
pub fn sample_gmv(cov: &CovEstimate) -> Result<WeightVector> {
    let condition = cov.condition_number();
    if !condition.is_finite() || condition >= MAX_CONDITION {
        return Err(Error::SingularCovariance { condition });
    }
    let ones = DVector::from_element(cov.dim(), 1.0);
    let x = linalg::solve_spd(cov.matrix(), &ones)?;
    let denom = ones.dot(&x);
    if denom.abs() < 1e-300 {
        return Err(Error::SingularCovariance {
            condition: f64::INFINITY,
        });
    }
    WeightVector::new(x / denom)
}

/// Euclidean projection onto the probability simplex
/// `{w : w·1 = 1, w ≥ 0}` by sort-and-threshold.
pub fn project_simplex(x: &DVector<f64>) -> WeightVector {
    let n = x.len();
    let mut sorted: Vec<f64> = x.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    WeightVector::new(DVector::from_fn(n, |i, _| (x[i] - tau).max(0.0)))
        .expect("simplex projection is feasible by construction")
}

/// Long-only GMV: PGD on `½wᵀΣ̂w` with the simplex projection in place of the
/// hyperplane projection. Monotone descent from the (feasible) equal-weight
/// start keeps the in-sample risk at or below the EW risk.
pub fn gmv_long(cov: &CovEstimate, budget: usize) -> Result<WeightVector> {
    let n = cov.dim();
    let mut w = WeightVector::equal(n)?.into_vector();
    let top = cov.spectral_norm();
    if top <= 0.0 {
        // Zero risk everywhere; EW is already optimal.
        return WeightVector::new(w);
    }
    let eta = 1.0 / (1.05 * top);
    let start_norm = w.norm();
    for s in 1..=budget {
        let grad = cov.action(&w);
        w.axpy(-eta, &grad, 1.0);
        w = project_simplex(&w).into_vector();
        if w.iter().any(|x| !x.is_finite()) || w.norm() > 1e6 * start_norm {
            return Err(Error::Numerical(format!(
                "long-only PGD diverged at step {s}"
            )));
        }
    }
    WeightVector::new(w)
}

/// Ledoit–Wolf-style shrinkage intensity toward the scaled identity target
/// `μI`, `μ = Tr(Σ̂)/N`:
/// `ρ = min(1, max(0, T⁻²Σₜ‖XₜXₜᵀ − Σ̂‖²_F / ‖Σ̂ − μI‖²_F))`
/// with `Xₜ` the mean-centered observations.
pub fn shrinkage_intensity(cov: &CovEstimate, sample: &DMatrix<f64>) -> Result<f64> {
    let t = sample.nrows();
    if t < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: t,
        });
    }
    let n = cov.dim();
    if sample.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: sample.ncols(),
        });
    }
    let mean = sample.row_mean();
    let mut centered = sample.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }

    let sigma = cov.matrix();
    let sigma_fro_sq = sigma.iter().map(|x| x * x).sum::<f64>();
    // ‖xxᵀ − S‖²_F = ‖x‖⁴ − 2 xᵀSx + ‖S‖²_F
    let mut numerator = 0.0;
    for i in 0..t {
        let x = centered.row(i).transpose();
        let norm_sq = x.norm_squared();
        let quad = x.dot(&(sigma * &x));
        numerator += norm_sq * norm_sq - 2.0 * quad + sigma_fro_sq;
    }
    numerator /= (t * t) as f64;

    let mu = cov.trace() / n as f64;
    let mut denominator = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { mu } else { 0.0 };
            let diff = sigma[(i, j)] - target;
            denominator += diff * diff;
        }
    }
    if denominator <= 0.0 {
        // Sample covariance already equals the target.
        return Ok(0.0);
    }
    Ok((numerator / denominator).clamp(0.0, 1.0))
}

/// Convex combination `ρ·μI + (1−ρ)·Σ̂` for a given intensity.
pub fn shrink_with_intensity(cov: &CovEstimate, rho: f64) -> Result<CovEstimate> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!(
            "shrinkage intensity must be in [0, 1], got {rho}"
        )));
    }
    let n = cov.dim();
    let mu = cov.trace() / n as f64;
    let mut shrunk = cov.matrix() * (1.0 - rho);
    for i in 0..n {
        shrunk[(i, i)] += rho * mu;
    }
    CovEstimate::new(shrunk, CovKind::LinearShrinkage)
}

/// Linear-shrinkage covariance with the data-driven intensity.
pub fn linear_shrinkage(cov: &CovEstimate, sample: &DMatrix<f64>) -> Result<CovEstimate> {
    let rho = shrinkage_intensity(cov, sample)?;
    shrink_with_intensity(cov, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ew_examples() {
        let w = ew_weights(4).unwrap();
        assert_eq!(w.as_slice(), &[0.25; 4]);
        let w = ew_weights(1).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
        assert!(ew_weights(0).is_err());

        let w = ew_weights(10_000).unwrap();
        let sum = linalg::compensated_sum(w.as_slice().iter().copied());
        assert!((sum - 1.0).abs() <= 1e-15);
    }

    fn exact(entries: &[f64], n: usize) -> CovEstimate {
        CovEstimate::exact(DMatrix::from_row_slice(n, n, entries)).unwrap()
    }

    #[test]
    fn sample_gmv_examples() {
        let w = sample_gmv(&exact(&[1.0, 0.0, 0.0, 1.0], 2)).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);

        let w = sample_gmv(&exact(&[1.0, 0.0, 0.0, 2.0], 2)).unwrap();
        assert_relative_eq!(w.as_slice()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(w.as_slice()[1], 1.0 / 3.0, epsilon = 1e-12);

        let w = sample_gmv(&exact(&[1.0, 0.5, 0.5, 1.0], 2)).unwrap();
        assert_relative_eq!(w.as_slice()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sample_gmv_scale_invariant() {
        let base = exact(&[2.0, 0.3, 0.3, 1.0], 2);
        let scaled = CovEstimate::exact(base.matrix() * 7.3).unwrap();
        let a = sample_gmv(&base).unwrap();
        let b = sample_gmv(&scaled).unwrap();
        assert!((a.as_vector() - b.as_vector()).norm() < 1e-12);
    }

    #[test]
    fn sample_gmv_rejects_singular() {
        let singular = exact(&[1.0, 1.0, 1.0, 1.0], 2);
        assert!(matches!(
            sample_gmv(&singular),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn simplex_projection_examples() {
        let already = DVector::from_vec(vec![0.3, 0.7]);
        let w = project_simplex(&already);
        assert_relative_eq!(w.as_slice()[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[1], 0.7, epsilon = 1e-15);

        let w = project_simplex(&DVector::from_vec(vec![2.0, 0.0]));
        assert_relative_eq!(w.as_slice()[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[1], 0.0, epsilon = 1e-15);

        let w = project_simplex(&DVector::from_vec(vec![0.6, 0.6]));
        assert_relative_eq!(w.as_slice()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gmv_long_identity_is_ew() {
        let w = gmv_long(&exact(&[1.0, 0.0, 0.0, 1.0], 2), 1000).unwrap();
        assert_relative_eq!(w.as_slice()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gmv_long_interior_optimum() {
        // diag(1, 100): the unconstrained optimum (100/101, 1/101) is already
        // nonnegative, so the constraint is slack.
        let w = gmv_long(&exact(&[1.0, 0.0, 0.0, 100.0], 2), 20_000).unwrap();
        assert_relative_eq!(w.as_slice()[0], 100.0 / 101.0, epsilon = 1e-6);
        assert_relative_eq!(w.as_slice()[1], 1.0 / 101.0, epsilon = 1e-6);
    }

    #[test]
    fn gmv_long_clamps_negative_optimum() {
        // Strong correlation pushes the unconstrained optimum negative on the
        // second asset; the long-only solution sits on the boundary.
        let eps = 0.05;
        let cov = exact(&[1.0, 0.9, 0.9, 0.81 + eps], 2);
        let unconstrained = sample_gmv(&cov).unwrap();
        assert!(unconstrained.as_slice().iter().any(|&x| x < 0.0));

        let w = gmv_long(&cov, 20_000).unwrap();
        assert!(w.as_slice().iter().all(|&x| x >= 0.0));

        // Grid search over the 1-simplex, step 0.001.
        let mut best = f64::INFINITY;
        let mut best_t = 0.0;
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            let v = DVector::from_vec(vec![t, 1.0 - t]);
            let r = 0.5 * v.dot(&cov.action(&v));
            if r < best {
                best = r;
                best_t = t;
            }
        }
        assert_relative_eq!(w.as_slice()[0], best_t, epsilon = 2e-3);
        let r_pgd = 0.5 * w.as_vector().dot(&cov.action(w.as_vector()));
        assert!(r_pgd <= best + 1e-8);
    }

    #[test]
    fn gmv_long_beats_grid_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let n = 5;
            let a = DMatrix::from_fn(n, n, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x
            });
            let cov = CovEstimate::exact(&a * a.transpose() / n as f64).unwrap();
            let w = gmv_long(&cov, 20_000).unwrap();
            let risk_w = 0.5 * w.as_vector().dot(&cov.action(w.as_vector()));

            let ew = ew_weights(n).unwrap();
            let risk_ew = 0.5 * ew.as_vector().dot(&cov.action(ew.as_vector()));
            assert!(risk_w <= risk_ew + 1e-8);

            // Dense grid over the 4-simplex with step 0.01 (percent units).
            let mut best = f64::INFINITY;
            let mut v = DVector::zeros(n);
            for a1 in 0..=100u32 {
                for a2 in 0..=(100 - a1) {
                    for a3 in 0..=(100 - a1 - a2) {
                        for a4 in 0..=(100 - a1 - a2 - a3) {
                            let a5 = 100 - a1 - a2 - a3 - a4;
                            v[0] = a1 as f64 / 100.0;
                            v[1] = a2 as f64 / 100.0;
                            v[2] = a3 as f64 / 100.0;
                            v[3] = a4 as f64 / 100.0;
                            v[4] = a5 as f64 / 100.0;
                            let r = 0.5 * v.dot(&cov.action(&v));
                            if r < best {
                                best = r;
                            }
                        }
                    }
                }
            }
            assert!(risk_w <= best + 1e-8, "PGD {risk_w} vs grid {best}");
        }
    }

    #[test]
    fn shrinkage_forced_intensities() {
        let cov = exact(&[2.0, 0.5, 0.5, 1.0], 2);
        let identity_target = shrink_with_intensity(&cov, 1.0).unwrap();
        let mu = cov.trace() / 2.0;
        assert_relative_eq!(identity_target.matrix()[(0, 0)], mu, epsilon = 1e-15);
        assert_relative_eq!(identity_target.matrix()[(0, 1)], 0.0, epsilon = 1e-15);

        let unchanged = shrink_with_intensity(&cov, 0.0).unwrap();
        assert!((unchanged.matrix() - cov.matrix()).norm() < 1e-15);
    }

    #[test]
    fn shrinkage_improves_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = DMatrix::from_fn(30, 10, |_, _| StandardNormal.sample(&mut rng));
        let cov = sample_covariance(&data).unwrap();
        let shrunk = linear_shrinkage(&cov, &data).unwrap();
        let rho = shrinkage_intensity(&cov, &data).unwrap();
        assert!(rho > 0.0);
        assert!(shrunk.condition_number() <= cov.condition_number());
    }

    #[test]
    fn shrinkage_reduces_out_of_sample_variance() {
        // i.i.d. N(0, I), N = 50, T = 60: shrunk GMV weights should beat the
        // plain sample GMV out of sample (true variance is ‖w‖²) in at least
        // 80% of 50 replications.
        let n = 50;
        let t = 60;
        let mut wins = 0;
        let mut total = 0;
        for rep in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + rep);
            let data = DMatrix::from_fn(t, n, |_, _| StandardNormal.sample(&mut rng));
            let cov = sample_covariance(&data).unwrap();
            let plain = match sample_gmv(&cov) {
                Ok(w) => w,
                Err(_) => continue, // ill-conditioned draw; skip
            };
            let shrunk = sample_gmv(&linear_shrinkage(&cov, &data).unwrap()).unwrap();
            total += 1;
            if shrunk.as_vector().norm_squared() < plain.as_vector().norm_squared() {
                wins += 1;
            }
        }
        assert!(total >= 40, "too many singular draws: {total}");
        assert!(
            wins * 10 >= total * 8,
            "shrinkage won only {wins}/{total} replications"
        );
    }

    #[test]
    fn strategy_names_round_trip() {
        for kind in [
            StrategyKind::Ew,
            StrategyKind::GmvSample,
            StrategyKind::GmvLong,
            StrategyKind::GmvLin,
            StrategyKind::GmvRobust,
        ] {
            assert_eq!(StrategyKind::parse_name(kind.name()).unwrap(), kind);
        }
        assert!(matches!(
            StrategyKind::parse_name("gmv_nlin"),
            Err(Error::NotImplemented("gmv_nlin"))
        ));
        assert!(matches!(
            StrategyKind::parse_name("momentum"),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn strategies_emit_feasible_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = DMatrix::from_fn(120, 6, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * 0.01
        });
        for kind in [
            StrategyKind::Ew,
            StrategyKind::GmvSample,
            StrategyKind::GmvLong,
            StrategyKind::GmvLin,
            StrategyKind::GmvRobust,
        ] {
            let w = Strategy::new(kind).fit(&data).unwrap();
            let sum = linalg::compensated_sum(w.as_slice().iter().copied());
            assert!((sum - 1.0).abs() < 1e-8, "{}: sum {sum}", kind.name());
            if kind == StrategyKind::GmvLong {
                assert!(w.as_slice().iter().all(|&x| x >= 0.0));
            }
        }
    }
}
