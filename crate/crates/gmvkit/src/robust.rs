//! Robust estimation of the covariance action `w ↦ Σw` and of the mean.
//!
//! The action estimator works in four steps: pair-difference the raw
//! observations to cancel the mean, split into buckets, form truncated
//! per-bucket means of `(X̃ᵢᵀw)X̃ᵢ`, and combine the bucket means through a
//! spectral-center solver. Everything is expressed through inner products
//! with the observations, so no N×N matrix is ever materialized on the
//! robust path; the per-evaluation working set is O(N·ℓ + T·N).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::market_data::CovEstimate;
use crate::{linalg, Error, Result};

/// Parameters of the robust estimator. Serialized with the JSON keys
/// `epsilon`, `delta`, `buckets`, `truncation_scale`, `center_iterations`,
/// `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustConfig {
    /// Spectral-center slack, in (0, 1/2).
    pub epsilon: f64,
    /// Failure probability, in (0, 1).
    pub delta: f64,
    /// Bucket-count override; `None` selects the theoretical formula.
    pub buckets: Option<usize>,
    /// Multiplier on the theoretical truncation level. The default is large
    /// so truncation rarely binds.
    pub truncation_scale: f64,
    /// Rounds of the spectral-center reweighing heuristic.
    pub center_iterations: usize,
    /// Seed for the deterministic power-iteration starts.
    pub seed: u64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 3.0,
            delta: 0.05,
            buckets: Some(10),
            truncation_scale: 10.0,
            center_iterations: 20,
            seed: 0,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be in (0, 1/2), got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if let Some(b) = self.buckets {
            if b < 2 {
                return Err(Error::InvalidInput(format!(
                    "bucket override must be at least 2, got {b}"
                )));
            }
        }
        if self.truncation_scale.is_nan() || self.truncation_scale <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "truncation_scale must be positive, got {}",
                self.truncation_scale
            )));
        }
        if self.center_iterations < 1 {
            return Err(Error::InvalidInput(
                "center_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Effective number of buckets: the override when set, otherwise the
    /// theoretical `bucket_count(epsilon, delta)`.
    pub fn effective_buckets(&self) -> Result<usize> {
        self.validate()?;
        match self.buckets {
            Some(b) => Ok(b),
            None => bucket_count(self.epsilon, self.delta),
        }
    }
}

/// Theoretical bucket count `⌈2 (ε/10)⁻² ln(2/δ)⌉`, clamped to at least 2.
pub fn bucket_count(epsilon: f64, delta: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be in (0, 1/2), got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    let raw = 2.0 * (epsilon / 10.0).powi(-2) * (2.0 / delta).ln();
    Ok((raw.ceil() as usize).max(2))
}

/// Pair-difference the sample: row `i` of the output is
/// `(X_{2i} − X_{2i+1}) / √2` (0-based), which has zero mean and the same
/// covariance as the input distribution. A trailing odd row is discarded.
pub fn centralize_pairs(sample: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = sample.nrows();
    if t < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: t,
        });
    }
    let m = t / 2;
    let n = sample.ncols();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    Ok(DMatrix::from_fn(m, n, |i, j| {
        (sample[(2 * i, j)] - sample[(2 * i + 1, j)]) * inv_sqrt2
    }))
}

/// Norm-truncation level `D = c_D ‖Σ̂‖^{1/2} (T·r̂ / ln(max(r̂, e)))^{1/4}`
/// from plug-in spectrum estimates (`r̂ = trace/top`). `t` is the number of
/// observations feeding the bucket estimators.
pub fn truncation_level(trace_estimate: f64, top_eigenvalue: f64, t: f64, c_d: f64) -> Result<f64> {
    if !(top_eigenvalue > 0.0 && trace_estimate > 0.0) {
        return Err(Error::Numerical(format!(
            "degenerate spectrum estimate: trace {trace_estimate}, top {top_eigenvalue}"
        )));
    }
    if t.is_nan() || t < 2.0 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: t as usize,
        });
    }
    if c_d.is_nan() || c_d <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "truncation scale must be positive, got {c_d}"
        )));
    }
    let r_hat = trace_estimate / top_eigenvalue;
    let log_term = r_hat.max(std::f64::consts::E).ln();
    Ok(c_d * top_eigenvalue.sqrt() * (t * r_hat / log_term).powf(0.25))
}

/// Pair-differenced observations split into buckets, with the truncation
/// level applied at evaluation time.
#[derive(Debug, Clone)]
pub struct BucketedSample {
    centered: DMatrix<f64>,
    row_norms: Vec<f64>,
    buckets: Vec<std::ops::Range<usize>>,
    truncation: f64,
    num_raw: usize,
    plug_in_trace: f64,
    plug_in_top: f64,
}

/// Contiguous index ranges of sizes differing by at most one.
fn contiguous_buckets(total: usize, count: usize) -> Vec<std::ops::Range<usize>> {
    let base = total / count;
    let remainder = total % count;
    let mut buckets = Vec::with_capacity(count);
    let mut start = 0;
    for j in 0..count {
        let size = base + usize::from(j < remainder);
        buckets.push(start..start + size);
        start += size;
    }
    buckets
}

impl BucketedSample {
    /// Build from raw observations: pair-difference, estimate the truncation
    /// level from the centered pairs (trace and top eigenvalue obtained
    /// matrix-free), and split into contiguous buckets in input order.
    pub fn from_raw(sample: &DMatrix<f64>, config: &RobustConfig) -> Result<Self> {
        config.validate()?;
        let centered = centralize_pairs(sample)?;
        let m = centered.nrows();
        let ell = config.effective_buckets()?;
        if ell > m {
            return Err(Error::InsufficientData {
                required: 2 * ell,
                actual: sample.nrows(),
            });
        }

        let row_norms: Vec<f64> = (0..m).map(|i| centered.row(i).norm()).collect();
        let trace_estimate = row_norms.iter().map(|x| x * x).sum::<f64>() / m as f64;

        // Top eigenvalue of the pair sample covariance, through its action.
        let n = centered.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let start = random_unit_vector(&mut rng, n);
        let top = linalg::power_iteration(&start, 30, |v, out| {
            out.fill(0.0);
            for i in 0..m {
                let row = centered.row(i);
                let coeff = row.transpose().dot(v) / m as f64;
                for j in 0..n {
                    out[j] += coeff * row[j];
                }
            }
        })
        .map(|p| p.eigenvalue)
        .unwrap_or(0.0);

        let truncation = truncation_level(trace_estimate, top, m as f64, config.truncation_scale)?;
        Ok(Self {
            centered,
            row_norms,
            buckets: contiguous_buckets(m, ell),
            truncation,
            num_raw: sample.nrows(),
            plug_in_trace: trace_estimate,
            plug_in_top: top,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.centered.nrows()
    }

    /// Number of raw observations the sample was built from.
    pub fn num_raw(&self) -> usize {
        self.num_raw
    }

    /// Trace of the pair sample covariance, `(1/m) Σ ‖X̃ᵢ‖²`.
    pub fn plug_in_trace(&self) -> f64 {
        self.plug_in_trace
    }

    /// Power-iteration estimate of the pair sample covariance's top
    /// eigenvalue.
    pub fn plug_in_top_eigenvalue(&self) -> f64 {
        self.plug_in_top
    }

    pub fn dim(&self) -> usize {
        self.centered.ncols()
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    /// Per-bucket means `Yⱼ = |Bⱼ|⁻¹ Σ_{i∈Bⱼ} (X̃ᵢᵀw) X̃ᵢ · 1[‖X̃ᵢ‖ ≤ D]`,
    /// cost O(|Bⱼ|·N) per bucket.
    pub fn bucket_action_means(&self, w: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let n = self.dim();
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: w.len(),
            });
        }
        let mut means = Vec::with_capacity(self.buckets.len());
        for bucket in &self.buckets {
            if bucket.is_empty() {
                return Err(Error::InvalidInput("empty bucket".into()));
            }
            let mut y = DVector::zeros(n);
            for i in bucket.clone() {
                if self.row_norms[i] <= self.truncation {
                    let row = self.centered.row(i);
                    let coeff = row.transpose().dot(w);
                    for j in 0..n {
                        y[j] += coeff * row[j];
                    }
                }
            }
            y /= bucket.len() as f64;
            means.push(y);
        }
        Ok(means)
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Result of the spectral-center solver.
#[derive(Debug, Clone)]
pub struct SpectralCenter {
    /// The center `θ̂ = Σ uⱼYⱼ`.
    pub center: DVector<f64>,
    /// The weights `u ∈ Δ_{ℓ,ε}` that produced it.
    pub weights: Vec<f64>,
    /// Top eigenvalue of `Σ uⱼ(Yⱼ−θ̂)(Yⱼ−θ̂)ᵀ` (the squared radius).
    pub radius_sq: f64,
}

/// Top eigenvalue of the weighted scatter `Σ uⱼ(Yⱼ−θ)(Yⱼ−θ)ᵀ` together with
/// its eigenvector, matrix-free. Returns radius 0 when every residual
/// vanishes.
fn weighted_scatter_top(
    points: &[DVector<f64>],
    weights: &[f64],
    theta: &DVector<f64>,
) -> (f64, Option<DVector<f64>>) {
    let residual_norm = |j: usize| (&points[j] - theta).norm();
    let mut best_j = 0;
    let mut best_norm = 0.0;
    for j in 0..points.len() {
        let norm = residual_norm(j);
        if norm > best_norm {
            best_norm = norm;
            best_j = j;
        }
    }
    if best_norm < 1e-300 {
        return (0.0, None);
    }
    let start = (&points[best_j] - theta) / best_norm;
    let result = linalg::power_iteration(&start, 40, |v, out| {
        out.fill(0.0);
        for (j, point) in points.iter().enumerate() {
            if weights[j] == 0.0 {
                continue;
            }
            let diff = point - theta;
            let coeff = weights[j] * diff.dot(v);
            out.axpy(coeff, &diff, 1.0);
        }
    });
    match result {
        Some(p) => (p.eigenvalue.max(0.0), Some(p.eigenvector)),
        None => (0.0, None),
    }
}

/// Water-filling over `Δ_{ℓ,ε}`: cap weight on the `⌊ℓ(1−ε)⌋` points with the
/// smallest squared projections, the leftover mass on the next one. Ties are
/// broken by lower index.
fn water_fill(projections_sq: &[f64], epsilon: f64) -> Vec<f64> {
    let ell = projections_sq.len();
    let cap = 1.0 / (ell as f64 * (1.0 - epsilon));
    let k = (ell as f64 * (1.0 - epsilon)).floor() as usize;
    let mut order: Vec<usize> = (0..ell).collect();
    order.sort_by(|&a, &b| {
        projections_sq[a]
            .partial_cmp(&projections_sq[b])
            .expect("projections are finite")
            .then(a.cmp(&b))
    });
    let mut weights = vec![0.0; ell];
    for &j in order.iter().take(k) {
        weights[j] = cap;
    }
    let leftover = 1.0 - cap * k as f64;
    if leftover > 1e-15 && k < ell {
        weights[order[k]] = leftover;
    }
    weights
}

/// Spectral center of `Y₁…Y_ℓ` by alternating reweighing: from the
/// coordinate-wise median, repeatedly extract the top eigenvector of the
/// weighted scatter, water-fill the weights against it, and re-center;
/// the best-radius iterate over the round budget is returned, so the result
/// is never worse than the median initialization.
pub fn spectral_center(
    points: &[DVector<f64>],
    epsilon: f64,
    iterations: usize,
) -> Result<SpectralCenter> {
    let ell = points.len();
    if ell < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: ell,
        });
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be in (0, 1/2), got {epsilon}"
        )));
    }
    if ell as f64 * (1.0 - epsilon) < 1.0 {
        return Err(Error::InvalidInput(
            "constraint set empty: ℓ(1−ε) < 1".into(),
        ));
    }
    let n = points[0].len();
    if points.iter().any(|p| p.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: points.iter().map(|p| p.len()).find(|&l| l != n).unwrap(),
        });
    }

    let mut theta = coordinate_median(points);
    let mut weights = vec![1.0 / ell as f64; ell];
    let (mut best_radius_sq, mut direction) = {
        let (r2, dir) = weighted_scatter_top(points, &weights, &theta);
        (r2, dir)
    };
    let mut best = SpectralCenter {
        center: theta.clone(),
        weights: weights.clone(),
        radius_sq: best_radius_sq,
    };

    for _ in 0..iterations {
        let Some(v) = direction.take() else {
            break; // all residuals vanish: perfect center
        };
        let projections_sq: Vec<f64> = points
            .iter()
            .map(|p| {
                let proj = (p - &theta).dot(&v);
                proj * proj
            })
            .collect();
        weights = water_fill(&projections_sq, epsilon);
        theta.fill(0.0);
        for (j, point) in points.iter().enumerate() {
            theta.axpy(weights[j], point, 1.0);
        }
        let (radius_sq, dir) = weighted_scatter_top(points, &weights, &theta);
        direction = dir;
        if radius_sq < best_radius_sq {
            best_radius_sq = radius_sq;
            best = SpectralCenter {
                center: theta.clone(),
                weights: weights.clone(),
                radius_sq,
            };
        }
    }

    debug_assert!(
        {
            let cap = 1.0 / (ell as f64 * (1.0 - epsilon));
            let sum: f64 = best.weights.iter().sum();
            (sum - 1.0).abs() < 1e-9
                && best
                    .weights
                    .iter()
                    .all(|&u| (-1e-12..=cap + 1e-12).contains(&u))
        },
        "spectral-center weights left the constraint set"
    );
    Ok(best)
}

fn coordinate_median(points: &[DVector<f64>]) -> DVector<f64> {
    let n = points[0].len();
    let ell = points.len();
    let mut column = vec![0.0; ell];
    DVector::from_fn(n, |coord, _| {
        for (j, point) in points.iter().enumerate() {
            column[j] = point[coord];
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        if ell % 2 == 1 {
            column[ell / 2]
        } else {
            0.5 * (column[ell / 2 - 1] + column[ell / 2])
        }
    })
}

/// Estimator of the covariance action `w ↦ Σw`: either the robust bucketed
/// construction or a plug-in `Σ̂w`.
#[derive(Debug, Clone)]
pub enum ActionEstimator {
    Robust {
        sample: BucketedSample,
        config: RobustConfig,
    },
    PlugIn {
        cov: CovEstimate,
    },
}

impl ActionEstimator {
    /// Robust estimator built from raw observations.
    pub fn robust(sample: &DMatrix<f64>, config: &RobustConfig) -> Result<Self> {
        Ok(Self::Robust {
            sample: BucketedSample::from_raw(sample, config)?,
            config: config.clone(),
        })
    }

    /// Plug-in estimator `w ↦ Σ̂w` for a given covariance estimate.
    pub fn plugin(cov: CovEstimate) -> Self {
        Self::PlugIn { cov }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Robust { sample, .. } => sample.dim(),
            Self::PlugIn { cov } => cov.dim(),
        }
    }

    /// Estimate `Σw`. Robust mode combines the bucket action means through
    /// the spectral center; plug-in mode is the exact matrix-vector product.
    pub fn action(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: w.len(),
            });
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight vector".into()));
        }
        match self {
            Self::Robust { sample, config } => {
                let means = sample.bucket_action_means(w)?;
                let center = spectral_center(&means, config.epsilon, config.center_iterations)?;
                Ok(center.center)
            }
            Self::PlugIn { cov } => Ok(cov.action(w)),
        }
    }
}

/// Robust mean: spectral center of the bucket means of the raw observations
/// (no pair-differencing, no truncation).
pub fn robust_mean(sample: &DMatrix<f64>, config: &RobustConfig) -> Result<DVector<f64>> {
    config.validate()?;
    let t = sample.nrows();
    let ell = config.effective_buckets()?;
    if t < ell {
        return Err(Error::InsufficientData {
            required: ell,
            actual: t,
        });
    }
    let n = sample.ncols();
    let mut means = Vec::with_capacity(ell);
    for bucket in contiguous_buckets(t, ell) {
        let mut mean = DVector::zeros(n);
        for i in bucket.clone() {
            for j in 0..n {
                mean[j] += sample[(i, j)];
            }
        }
        mean /= bucket.len() as f64;
        means.push(mean);
    }
    Ok(spectral_center(&means, config.epsilon, config.center_iterations)?.center)
}

/// Check whether `θ` is an `(r, κ)`-combinatorial center of the points along
/// the supplied unit directions: for every direction `v`, the inequality
/// `|vᵀ(Yⱼ − θ)| ≤ r` must hold for at least `(1−κ)ℓ` indices. The
/// definition quantifies over all unit vectors; exhaustive checking is
/// infeasible, so callers supply the directions to probe.
pub fn is_combinatorial_center(
    theta: &DVector<f64>,
    points: &[DVector<f64>],
    r: f64,
    kappa: f64,
    directions: &[DVector<f64>],
) -> Result<bool> {
    if directions.is_empty() {
        return Err(Error::InvalidInput("no directions supplied".into()));
    }
    let ell = points.len() as f64;
    for v in directions {
        if (v.norm() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "direction is not a unit vector (norm {})",
                v.norm()
            )));
        }
        let within = points
            .iter()
            .filter(|y| (*y - theta).dot(v).abs() <= r)
            .count();
        if (within as f64) + 1e-12 < (1.0 - kappa) * ell {
            return Ok(false);
        }
    }
    Ok(true)
}
