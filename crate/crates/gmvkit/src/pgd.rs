//! Projected gradient descent for GMV and mean-variance portfolios over the
//! affine constraint `w·1 = 1`.
//!
//! The GMV updates are `wₛ = Π₁[wₛ₋₁ − η â(wₛ₋₁)]` from the equally-weighted
//! start, where `â` is any [`ActionEstimator`]; the mean-variance updates add
//! the estimated mean to the gradient. The step size defaults to
//! `1/(1.05·λ̂_max)` with the top eigenvalue measured through the action
//! estimator itself, and the step count to the bias/variance balance
//! `S = ⌈1/(η·Δ̂_Σ)⌉`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::market_data::CovEstimate;
use crate::robust::ActionEstimator;
use crate::{linalg, Error, Result};

/// Portfolio allocation summing to one. Short positions (negative entries)
/// are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(DVector<f64>);

impl WeightVector {
    /// Validates finiteness and the budget constraint (sum within 1e-10).
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight".into()));
        }
        let sum = linalg::compensated_sum(weights.iter().copied());
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self(weights))
    }

    /// Equally weighted portfolio `1/N`.
    pub fn equal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("N must be at least 1".into()));
        }
        Ok(Self(DVector::from_element(n, 1.0 / n as f64)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Optimization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PgdMode {
    Gmv,
    Mv,
}

/// PGD parameters. JSON keys: `mode`, `eta` (null = auto), `steps`
/// (null = auto), `gamma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdConfig {
    pub mode: PgdMode,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            mode: PgdMode::Gmv,
            eta: None,
            steps: None,
            gamma: None,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "eta must be positive, got {eta}"
                )));
            }
        }
        if let Some(steps) = self.steps {
            if steps < 1 {
                return Err(Error::InvalidInput("steps must be at least 1".into()));
            }
        }
        if self.mode == PgdMode::Mv {
            match self.gamma {
                Some(g) if g > 0.0 && g.is_finite() => {}
                _ => {
                    return Err(Error::InvalidInput(
                        "mv mode requires a positive gamma".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Weight path and per-step risk proxies of one PGD run. Row `s` of the path
/// is the iterate after `s` steps; `risks[s]` is `½ wₛ·â(wₛ)` under the
/// estimator that drove the run.
#[derive(Debug, Clone)]
pub struct PgdTrace {
    path: DMatrix<f64>,
    risks: Vec<f64>,
    eta: f64,
}

impl PgdTrace {
    /// Number of steps taken (the path has one more row).
    pub fn num_steps(&self) -> usize {
        self.path.nrows() - 1
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn weights_at(&self, step: usize) -> Result<WeightVector> {
        WeightVector::new(self.path.row(step).transpose())
    }

    pub fn final_weights(&self) -> Result<WeightVector> {
        self.weights_at(self.num_steps())
    }

    /// Raw iterate without the feasibility re-check.
    pub fn iterate(&self, step: usize) -> DVector<f64> {
        self.path.row(step).transpose()
    }

    pub fn risks(&self) -> &[f64] {
        &self.risks
    }
}

/// Orthogonal projection onto `{w : w·1 = 1}`:
/// `Π₁x = (I − N⁻¹11ᵀ)x + N⁻¹1`. Idempotent, and the closest feasible point
/// in the Euclidean sense.
pub fn project_sum_one(x: &DVector<f64>) -> WeightVector {
    let mut w = x.clone();
    project_sum_one_mut(&mut w);
    WeightVector(w)
}

fn project_sum_one_mut(w: &mut DVector<f64>) {
    let n = w.len() as f64;
    let shift = (linalg::compensated_sum(w.iter().copied()) - 1.0) / n;
    w.add_scalar_mut(-shift);
}

const STEP_SIZE_SEED: u64 = 0x51e9_a7d4_c0ff_ee01;

/// Step size `η = 1/(1.05·λ̂_max)` with `λ̂_max` from 30 power iterations
/// through the action estimator (random unit start, fixed seed; up to three
/// restarts on collapse).
pub fn estimate_step_size(action: &ActionEstimator) -> Result<f64> {
    let n = action.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(STEP_SIZE_SEED);
    let mut failure: Option<Error> = None;
    for _ in 0..3 {
        let start = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        if start.norm() < 1e-9 {
            continue;
        }
        let mut action_error = None;
        let result = linalg::power_iteration(&start, 30, |v, out| {
            match action.action(v) {
                Ok(av) => out.copy_from(&av),
                Err(e) => {
                    action_error = Some(e);
                    out.fill(0.0);
                }
            }
        });
        if let Some(e) = action_error {
            return Err(e);
        }
        match result {
            Some(p) if p.eigenvalue > 0.0 => return Ok(1.0 / (1.05 * p.eigenvalue)),
            _ => {
                failure = Some(Error::Numerical(
                    "power iteration collapsed while estimating the step size".into(),
                ));
            }
        }
    }
    Err(failure.unwrap_or_else(|| {
        Error::Numerical("power iteration failed to produce a positive eigenvalue".into())
    }))
}

/// Step count `S = ⌈1/(η·Δ̂_Σ)⌉` with the plug-in deviation level
/// `Δ̂_Σ = ‖Σ̂‖·√((r̂·ln(max(r̂,e)) + ln(1/δ)) / T)`, clamped to `[1, 10⁶]`.
pub fn default_step_count(t: usize, r_hat: f64, delta: f64, eta: f64, sigma_norm: f64) -> usize {
    let log_term = r_hat.max(std::f64::consts::E).ln();
    let delta_sigma = sigma_norm * ((r_hat * log_term + (1.0 / delta).ln()) / t as f64).sqrt();
    let product = eta * delta_sigma;
    if product.is_nan() || product <= 0.0 || product.is_infinite() {
        return 1_000_000;
    }
    // The small slack absorbs float noise at integer boundaries.
    let steps = (1.0 / product - 1e-9).ceil();
    if steps < 1.0 {
        1
    } else if steps > 1e6 {
        1_000_000
    } else {
        steps as usize
    }
}

/// Auto step count for an estimator that carries its own sample statistics
/// (the robust estimator knows its sample size, spectrum plug-ins, and δ).
/// Plug-in estimators have no sample size, so callers must set `steps`.
fn auto_step_count(action: &ActionEstimator, eta: f64) -> Result<usize> {
    match action {
        ActionEstimator::Robust { sample, config } => {
            let top = sample.plug_in_top_eigenvalue();
            let trace = sample.plug_in_trace();
            if top <= 0.0 || trace <= 0.0 {
                return Err(Error::Numerical(
                    "degenerate spectrum plug-ins for the step-count rule".into(),
                ));
            }
            Ok(default_step_count(
                sample.num_raw(),
                trace / top,
                config.delta,
                eta,
                top,
            ))
        }
        ActionEstimator::PlugIn { .. } => Err(Error::InvalidInput(
            "steps must be set explicitly for a plug-in estimator".into(),
        )),
    }
}

const DIVERGENCE_FACTOR: f64 = 1e6;

fn run_pgd(
    action: &ActionEstimator,
    eta: f64,
    steps: usize,
    drift: impl Fn(&DVector<f64>, &mut DVector<f64>),
) -> Result<PgdTrace> {
    let n = action.dim();
    let mut w = WeightVector::equal(n)?.into_vector();
    let start_norm = w.norm();
    let mut path = DMatrix::zeros(steps + 1, n);
    let mut risks = Vec::with_capacity(steps + 1);
    path.row_mut(0).copy_from(&w.transpose());

    let mut update = DVector::zeros(n);
    for s in 1..=steps {
        let av = action.action(&w)?;
        risks.push(0.5 * w.dot(&av));
        // update = −η·gradient (the drift hook computes it from â(w)).
        drift(&av, &mut update);
        w.axpy(eta, &update, 1.0);
        project_sum_one_mut(&mut w);
        if w.iter().any(|x| !x.is_finite()) || w.norm() > DIVERGENCE_FACTOR * start_norm {
            return Err(Error::Numerical(format!(
                "PGD diverged at step {s}; the step size is too large"
            )));
        }
        path.row_mut(s).copy_from(&w.transpose());
    }
    let av = action.action(&w)?;
    risks.push(0.5 * w.dot(&av));
    Ok(PgdTrace { path, risks, eta })
}

/// GMV descent `wₛ = Π₁[wₛ₋₁ − η â(wₛ₋₁)]` from the equally-weighted start.
pub fn gmv_pgd(action: &ActionEstimator, config: &PgdConfig) -> Result<PgdTrace> {
    config.validate()?;
    if config.mode != PgdMode::Gmv {
        return Err(Error::InvalidInput("config is not in gmv mode".into()));
    }
    let eta = match config.eta {
        Some(eta) => eta,
        None => estimate_step_size(action)?,
    };
    let steps = match config.steps {
        Some(steps) => steps,
        None => auto_step_count(action, eta)?,
    };
    run_pgd(action, eta, steps, |av, update| {
        update.copy_from(av);
        update.neg_mut();
    })
}

/// Mean-variance ascent `wₛ = Π₁[wₛ₋₁ + η(μ̂ − γ â(wₛ₋₁))]`. The automatic
/// step size becomes `1/(1.05·γ·λ̂_max)`.
pub fn mv_pgd(
    mean: &DVector<f64>,
    action: &ActionEstimator,
    config: &PgdConfig,
) -> Result<PgdTrace> {
    config.validate()?;
    if config.mode != PgdMode::Mv {
        return Err(Error::InvalidInput("config is not in mv mode".into()));
    }
    let gamma = config.gamma.expect("validated above");
    if mean.len() != action.dim() {
        return Err(Error::DimensionMismatch {
            expected: action.dim(),
            actual: mean.len(),
        });
    }
    let eta = match config.eta {
        Some(eta) => eta,
        None => estimate_step_size(action)? / gamma,
    };
    let steps = match config.steps {
        Some(steps) => steps,
        None => auto_step_count(action, eta * gamma)?,
    };
    run_pgd(action, eta, steps, |av, update| {
        update.copy_from(mean);
        update.axpy(-gamma, av, 1.0);
    })
}

/// In-sample risk `R(w; Σ) = ½ wᵀΣw`.
pub fn risk(w: &WeightVector, cov: &CovEstimate) -> Result<f64> {
    if w.len() != cov.dim() {
        return Err(Error::DimensionMismatch {
            expected: cov.dim(),
            actual: w.len(),
        });
    }
    Ok(0.5 * w.as_vector().dot(&cov.action(w.as_vector())))
}

/// Mean-variance utility `M_γ(w; μ, Σ) = μᵀw − (γ/2) wᵀΣw`.
pub fn mv_utility(w: &WeightVector, mean: &DVector<f64>, cov: &CovEstimate, gamma: f64) -> Result<f64> {
    if mean.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            actual: mean.len(),
        });
    }
    Ok(mean.dot(w.as_vector()) - gamma * risk(w, cov)?)
}

/// Closed-form mean-variance optimum
/// `w* = γ⁻¹Σ⁻¹μ + ((1 − γ⁻¹1ᵀΣ⁻¹μ)/(1ᵀΣ⁻¹1))Σ⁻¹1` for invertible Σ;
/// the independent oracle the PGD path is tested against.
pub fn mv_optimal_weights(
    mean: &DVector<f64>,
    cov: &CovEstimate,
    gamma: f64,
) -> Result<WeightVector> {
    if mean.len() != cov.dim() {
        return Err(Error::DimensionMismatch {
            expected: cov.dim(),
            actual: mean.len(),
        });
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidInput("gamma must be positive".into()));
    }
    let ones = DVector::from_element(cov.dim(), 1.0);
    let sigma_inv_mu = linalg::solve_spd(cov.matrix(), mean)?;
    let sigma_inv_ones = linalg::solve_spd(cov.matrix(), &ones)?;
    let denom = ones.dot(&sigma_inv_ones);
    if denom.abs() < 1e-300 {
        return Err(Error::SingularCovariance {
            condition: f64::INFINITY,
        });
    }
    let scale = (1.0 - ones.dot(&sigma_inv_mu) / gamma) / denom;
    let w = sigma_inv_mu / gamma + sigma_inv_ones * scale;
    WeightVector::new(w)
}
