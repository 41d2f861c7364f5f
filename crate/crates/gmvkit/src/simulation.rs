//! Seeded synthetic generators and risk-curve experiments.
//!
//! Every generator is a pure function of its spec and an explicit seed
//! (ChaCha8 streams, derived per replication with a splitmix64 step), so
//! identical inputs give bit-identical outputs and robust-vs-plug-in
//! comparisons always consume the same samples.

use std::io::Write;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::market_data::{sample_covariance, CovEstimate};
use crate::pgd::{gmv_pgd, PgdConfig, PgdMode, PgdTrace};
use crate::robust::{ActionEstimator, RobustConfig};
use crate::{linalg, Error, Result};

/// Deterministic per-replication seed (splitmix64 of master and index).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Weekday-only calendar starting at `start`, useful for synthetic panels.
pub fn trading_calendar(start: NaiveDate, len: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(len);
    let mut d = start;
    while dates.len() < len {
        if d.weekday().num_days_from_monday() < 5 {
            dates.push(d);
        }
        d = d.succ_opt().expect("date range exhausted");
    }
    dates
}

/// Heavy-tailed mixture `X = S^{1/2}Y` with
/// `Y ~ (1−p)·N(0, I) + p·D`, where `D` is the random-subset sign vector.
#[derive(Debug, Clone)]
pub struct HeavyMixtureSpec {
    cov_sqrt: DMatrix<f64>,
    p_heavy: f64,
}

impl HeavyMixtureSpec {
    /// `cov_sqrt` must be a symmetric PSD factor; `p_heavy` in `[0, 1)`
    /// (zero degenerates to the plain Gaussian).
    pub fn new(cov_sqrt: DMatrix<f64>, p_heavy: f64) -> Result<Self> {
        let n = cov_sqrt.nrows();
        if n != cov_sqrt.ncols() {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: cov_sqrt.ncols(),
            });
        }
        if !(0.0..1.0).contains(&p_heavy) {
            return Err(Error::InvalidInput(format!(
                "p_heavy must be in [0, 1), got {p_heavy}"
            )));
        }
        let values = linalg::symmetric_eigenvalues_desc(&cov_sqrt)?;
        if values[n - 1] < -1e-8 * values[0].abs().max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidInput(
                "cov_sqrt must be a PSD factor".into(),
            ));
        }
        Ok(Self { cov_sqrt, p_heavy })
    }

    /// Factor the covariance and use the paper-default mixture weight 0.001.
    pub fn from_cov(cov: &CovEstimate, p_heavy: f64) -> Result<Self> {
        Self::new(linalg::psd_sqrt(cov.matrix())?, p_heavy)
    }

    pub fn dim(&self) -> usize {
        self.cov_sqrt.nrows()
    }

    pub fn cov_sqrt(&self) -> &DMatrix<f64> {
        &self.cov_sqrt
    }

    pub fn p_heavy(&self) -> f64 {
        self.p_heavy
    }

    /// Analytic mixture covariance
    /// `S^{1/2} [(1 − p/3)·I + (p/3)·11ᵀ] S^{1/2}`.
    pub fn population_covariance(&self) -> Result<CovEstimate> {
        let n = self.dim();
        let p = self.p_heavy;
        let mut middle = DMatrix::from_element(n, n, p / 3.0);
        for i in 0..n {
            middle[(i, i)] += 1.0 - p / 3.0;
        }
        let mut cov = &self.cov_sqrt * middle * &self.cov_sqrt;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = avg;
                cov[(j, i)] = avg;
            }
        }
        CovEstimate::exact(cov)
    }
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `T` i.i.d. rows from `N(0, Σ)` via the symmetric PSD square root.
pub fn sample_gaussian(cov: &CovEstimate, t: usize, seed: u64) -> Result<DMatrix<f64>> {
    let factor = linalg::psd_sqrt(cov.matrix())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian_rows(&factor, t, &mut rng))
}

fn gaussian_rows(factor: &DMatrix<f64>, t: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = factor.nrows();
    let mut out = DMatrix::zeros(t, n);
    for i in 0..t {
        let x = factor * standard_normal_vector(rng, n);
        out.row_mut(i).copy_from(&x.transpose());
    }
    out
}

fn rademacher_subset_with(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let k = rng.random_range(0..=n);
    // Uniform size-k subset: partial Fisher–Yates over the index pool.
    let mut pool: Vec<usize> = (0..n).collect();
    let mut z = DVector::from_element(n, -1.0);
    for slot in 0..k {
        let pick = rng.random_range(slot..n);
        pool.swap(slot, pick);
        z[pool[slot]] = 1.0;
    }
    z
}

/// One draw of the heavy component: `k` uniform in `{0, …, N}`, a uniform
/// size-`k` subset gets `+1`, the rest `−1`.
pub fn sample_rademacher_subset(n: usize, seed: u64) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(Error::InvalidInput("N must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rademacher_subset_with(&mut rng, n))
}

const MIX_STREAM_SALT: u64 = 0x6d69_7874_7572_6531;

/// `T` i.i.d. rows of the heavy mixture. The Gaussian component consumes the
/// same stream as [`sample_gaussian`], so forcing `p_heavy = 0` reproduces
/// the plain Gaussian sample bit-for-bit (given the same factor).
pub fn sample_heavy_mixture(spec: &HeavyMixtureSpec, t: usize, seed: u64) -> DMatrix<f64> {
    let n = spec.dim();
    let mut rng_gauss = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_mix = ChaCha8Rng::seed_from_u64(seed ^ MIX_STREAM_SALT);
    let mut out = DMatrix::zeros(t, n);
    for i in 0..t {
        let heavy = rng_mix.random::<f64>() < spec.p_heavy;
        let y = if heavy {
            rademacher_subset_with(&mut rng_mix, n)
        } else {
            standard_normal_vector(&mut rng_gauss, n)
        };
        let x = &spec.cov_sqrt * y;
        out.row_mut(i).copy_from(&x.transpose());
    }
    out
}

/// Rotation output: the conjugated covariance and the rotation itself.
#[derive(Debug, Clone)]
pub struct BenignRotation {
    pub rotated: CovEstimate,
    pub rotation: DMatrix<f64>,
}

/// Rotate the eigenbasis so the normalized ones-vector lies in the span of
/// the top `m` eigenvectors: a single plane rotation mapping that span's
/// nearest unit vector onto `1/√N`, identity elsewhere.
pub fn rotate_for_benign_optimum(s1: &CovEstimate, m: usize) -> Result<BenignRotation> {
    let n = s1.dim();
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!(
            "top-eigenvector count {m} out of range for N={n}"
        )));
    }
    let (values, vectors) = linalg::symmetric_eigen_desc(s1.matrix())?;
    if values[m - 1] <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "need at least {m} positive eigenvalues"
        )));
    }
    let u = DVector::from_element(n, 1.0 / (n as f64).sqrt());

    // Projection of u onto the top-m span.
    let top = vectors.columns(0, m);
    let coeffs = top.transpose() * &u;
    let p = top * coeffs;
    let p_norm = p.norm();
    let q = if p_norm > 1e-12 {
        p / p_norm
    } else {
        vectors.column(0).into_owned()
    };

    let rotation = if (&u - &q).norm() <= 1e-12 {
        DMatrix::identity(n, n)
    } else {
        // Plane rotation with R q = u, identity on the orthogonal complement.
        let c = q.dot(&u);
        let ortho = &u - &q * c;
        let s = ortho.norm();
        let b = ortho / s;
        let mut r = DMatrix::identity(n, n);
        r += (&q * q.transpose() + &b * b.transpose()) * (c - 1.0);
        r += (&b * q.transpose() - &q * b.transpose()) * s;
        r
    };

    let mut s2 = &rotation * s1.matrix() * rotation.transpose();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (s2[(i, j)] + s2[(j, i)]);
            s2[(i, j)] = avg;
            s2[(j, i)] = avg;
        }
    }
    Ok(BenignRotation {
        rotated: CovEstimate::exact(s2)?,
        rotation,
    })
}

/// Which covariance-action estimator an experiment runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Bucketed spectral-center estimator from the drawn sample.
    Robust,
    /// Sample-covariance plug-in from the drawn sample.
    PlugIn,
    /// The true covariance itself (no estimation noise).
    Exact,
}

/// Build the action estimator a mode prescribes for one drawn sample.
pub fn estimator_for_sample(
    mode: EstimatorMode,
    sample: &DMatrix<f64>,
    true_cov: &CovEstimate,
    robust: &RobustConfig,
) -> Result<ActionEstimator> {
    match mode {
        EstimatorMode::Robust => ActionEstimator::robust(sample, robust),
        EstimatorMode::PlugIn => Ok(ActionEstimator::plugin(sample_covariance(sample)?)),
        EstimatorMode::Exact => Ok(ActionEstimator::plugin(true_cov.clone())),
    }
}

/// Risk of every iterate of a PGD trace against a fixed covariance.
pub fn pgd_risk_curve(trace: &PgdTrace, cov: &CovEstimate) -> Vec<f64> {
    (0..=trace.num_steps())
        .map(|s| {
            let w = trace.iterate(s);
            0.5 * w.dot(&cov.action(&w))
        })
        .collect()
}

fn gmv_trace(action: &ActionEstimator, steps: usize) -> Result<PgdTrace> {
    let config = PgdConfig {
        mode: PgdMode::Gmv,
        eta: None,
        steps: Some(steps),
        gamma: None,
    };
    gmv_pgd(action, &config)
}

/// Per-step mean/quantile summaries of one or two estimator modes.
/// Curves that were not produced stay empty; all produced curves have equal
/// length `steps + 1`.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub steps: Vec<usize>,
    pub mean_risk_robust: Vec<f64>,
    pub q95_risk_robust: Vec<f64>,
    pub mean_risk_plugin: Vec<f64>,
    pub q95_risk_plugin: Vec<f64>,
    pub mean_insample: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    pub replication_seeds: Vec<u64>,
}

/// Empirical `q`-quantile as the `⌈q·n⌉`-th order statistic; with one
/// replication this degenerates to the single realization.
fn empirical_quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite risks"));
    let idx = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[idx - 1]
}

fn mean_and_q95(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = curves[0].len();
    let mut mean = vec![0.0; len];
    let mut q95 = vec![0.0; len];
    let mut column = vec![0.0; curves.len()];
    for s in 0..len {
        for (r, curve) in curves.iter().enumerate() {
            column[r] = curve[s];
        }
        mean[s] = column.iter().sum::<f64>() / column.len() as f64;
        q95[s] = empirical_quantile(&mut column, 0.95);
    }
    (mean, q95)
}

/// Run `count` independent replications, in parallel, with deterministic
/// per-index outputs (the worker derives everything from the index).
fn run_replications<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(count)
        .max(1);
    if workers == 1 {
        return (0..count).map(&f).collect();
    }
    type Slot<'a, T> = (usize, &'a mut Option<Result<T>>);
    let mut slots: Vec<Option<Result<T>>> = Vec::with_capacity(count);
    slots.resize_with(count, || None);
    let chunks: Vec<Vec<Slot<'_, T>>> = {
        let mut chunks: Vec<Vec<_>> = (0..workers).map(|_| Vec::new()).collect();
        for (i, slot) in slots.iter_mut().enumerate() {
            chunks[i % workers].push((i, slot));
        }
        chunks
    };
    std::thread::scope(|scope| {
        for chunk in chunks {
            let f = &f;
            scope.spawn(move || {
                for (i, slot) in chunk {
                    *slot = Some(f(i));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("replication slot filled"))
        .collect()
}

/// Convergence curves for one estimator mode: per-step mean population risk
/// (against `cov`), its 95% quantile, and mean in-sample risk (against each
/// replication's sample covariance; equal to the population curve in exact
/// mode, which draws no data).
pub fn convergence_experiment(
    cov: &CovEstimate,
    t: usize,
    steps: usize,
    replications: usize,
    mode: EstimatorMode,
    robust: &RobustConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    if replications == 0 || steps == 0 {
        return Err(Error::InvalidInput(
            "steps and replications must be positive".into(),
        ));
    }
    let rep_seeds: Vec<u64> = (0..replications as u64)
        .map(|r| derive_seed(seed, r))
        .collect();

    let curves: Vec<(Vec<f64>, Vec<f64>)> = run_replications(replications, |r| {
        if mode == EstimatorMode::Exact {
            let action = ActionEstimator::plugin(cov.clone());
            let trace = gmv_trace(&action, steps)?;
            let population = pgd_risk_curve(&trace, cov);
            return Ok((population.clone(), population));
        }
        let sample = sample_gaussian(cov, t, rep_seeds[r])?;
        let action = estimator_for_sample(mode, &sample, cov, robust)?;
        let trace = gmv_trace(&action, steps)?;
        let population = pgd_risk_curve(&trace, cov);
        let insample = pgd_risk_curve(&trace, &sample_covariance(&sample)?);
        Ok((population, insample))
    })?;

    let population: Vec<Vec<f64>> = curves.iter().map(|(p, _)| p.clone()).collect();
    let insample: Vec<Vec<f64>> = curves.iter().map(|(_, i)| i.clone()).collect();
    let (mean_pop, q95_pop) = mean_and_q95(&population);
    let (mean_ins, _) = mean_and_q95(&insample);

    let mut report = ExperimentReport {
        steps: (0..=steps).collect(),
        replications,
        master_seed: seed,
        replication_seeds: rep_seeds,
        mean_insample: mean_ins,
        ..ExperimentReport::default()
    };
    match mode {
        EstimatorMode::Robust => {
            report.mean_risk_robust = mean_pop;
            report.q95_risk_robust = q95_pop;
        }
        EstimatorMode::PlugIn | EstimatorMode::Exact => {
            report.mean_risk_plugin = mean_pop;
            report.q95_risk_plugin = q95_pop;
        }
    }
    Ok(report)
}

/// Paired heavy-tail comparison: robust and plug-in estimators consume the
/// same samples; population risk is measured against the analytic mixture
/// covariance. `mean_insample` tracks the plug-in path's in-sample risk.
pub fn tail_experiment(
    spec: &HeavyMixtureSpec,
    t: usize,
    replications: usize,
    steps: usize,
    robust: &RobustConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    if replications == 0 || steps == 0 {
        return Err(Error::InvalidInput(
            "steps and replications must be positive".into(),
        ));
    }
    let population = spec.population_covariance()?;
    let rep_seeds: Vec<u64> = (0..replications as u64)
        .map(|r| derive_seed(seed, r))
        .collect();

    type TailCurves = (Vec<f64>, Vec<f64>, Vec<f64>);
    let curves: Vec<TailCurves> = run_replications(replications, |r| {
        let sample = sample_heavy_mixture(spec, t, rep_seeds[r]);
        let robust_action = estimator_for_sample(EstimatorMode::Robust, &sample, &population, robust)?;
        let plugin_action = estimator_for_sample(EstimatorMode::PlugIn, &sample, &population, robust)?;
        let robust_trace = gmv_trace(&robust_action, steps)?;
        let plugin_trace = gmv_trace(&plugin_action, steps)?;
        Ok((
            pgd_risk_curve(&robust_trace, &population),
            pgd_risk_curve(&plugin_trace, &population),
            plugin_trace.risks().to_vec(),
        ))
    })?;

    let robust_curves: Vec<Vec<f64>> = curves.iter().map(|(r, _, _)| r.clone()).collect();
    let plugin_curves: Vec<Vec<f64>> = curves.iter().map(|(_, p, _)| p.clone()).collect();
    let insample_curves: Vec<Vec<f64>> = curves.iter().map(|(_, _, i)| i.clone()).collect();
    let (mean_robust, q95_robust) = mean_and_q95(&robust_curves);
    let (mean_plugin, q95_plugin) = mean_and_q95(&plugin_curves);
    let (mean_insample, _) = mean_and_q95(&insample_curves);

    Ok(ExperimentReport {
        steps: (0..=steps).collect(),
        mean_risk_robust: mean_robust,
        q95_risk_robust: q95_robust,
        mean_risk_plugin: mean_plugin,
        q95_risk_plugin: q95_plugin,
        mean_insample,
        replications,
        master_seed: seed,
        replication_seeds: rep_seeds,
    })
}

/// Population-risk curves of the single-contamination experiment: one
/// Gaussian sample, a copy with the first row replaced by a raw sign-vector
/// draw (an outlier of norm √N, far above the scale of daily returns), and
/// both estimator modes run on each. Risks are measured against the original
/// covariance.
#[derive(Debug, Clone)]
pub struct ContaminationCurves {
    pub steps: Vec<usize>,
    pub clean_robust: Vec<f64>,
    pub clean_plugin: Vec<f64>,
    pub contaminated_robust: Vec<f64>,
    pub contaminated_plugin: Vec<f64>,
}

pub fn contamination_experiment(
    cov: &CovEstimate,
    t: usize,
    steps: usize,
    robust: &RobustConfig,
    seed: u64,
) -> Result<ContaminationCurves> {
    if t < 2 * 2 {
        return Err(Error::InsufficientData {
            required: 4,
            actual: t,
        });
    }
    let clean = sample_gaussian(cov, t, derive_seed(seed, 0))?;
    let mut contaminated = clean.clone();
    let z = sample_rademacher_subset(cov.dim(), derive_seed(seed, 1))?;
    contaminated.row_mut(0).copy_from(&z.transpose());

    let curve = |sample: &DMatrix<f64>, mode: EstimatorMode| -> Result<Vec<f64>> {
        let action = estimator_for_sample(mode, sample, cov, robust)?;
        Ok(pgd_risk_curve(&gmv_trace(&action, steps)?, cov))
    };

    Ok(ContaminationCurves {
        steps: (0..=steps).collect(),
        clean_robust: curve(&clean, EstimatorMode::Robust)?,
        clean_plugin: curve(&clean, EstimatorMode::PlugIn)?,
        contaminated_robust: curve(&contaminated, EstimatorMode::Robust)?,
        contaminated_plugin: curve(&contaminated, EstimatorMode::PlugIn)?,
    })
}

/// `experiment_<name>.csv`: step, mean_risk_robust, q95_risk_robust,
/// mean_risk_plugin, q95_risk_plugin, mean_insample. Absent curves emit
/// empty fields.
pub fn write_experiment_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(out);
    writer.write_record([
        "step",
        "mean_risk_robust",
        "q95_risk_robust",
        "mean_risk_plugin",
        "q95_risk_plugin",
        "mean_insample",
    ])?;
    let field = |curve: &[f64], s: usize| -> String {
        curve
            .get(s)
            .map(|&x| crate::backtest::sig10(x))
            .unwrap_or_default()
    };
    for (i, step) in report.steps.iter().enumerate() {
        writer.write_record([
            step.to_string(),
            field(&report.mean_risk_robust, i),
            field(&report.q95_risk_robust, i),
            field(&report.mean_risk_plugin, i),
            field(&report.q95_risk_plugin, i),
            field(&report.mean_insample, i),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn diag(values: &[f64]) -> CovEstimate {
        CovEstimate::exact(DMatrix::from_diagonal(&DVector::from_row_slice(values))).unwrap()
    }

    /// One dominant factor over a flat bulk; effective rank exactly 3.
    fn factor_cov(n: usize, scale: f64) -> CovEstimate {
        let mut values = vec![scale; n];
        values[0] = (n as f64 - 1.0) / 2.0 * scale;
        diag(&values)
    }

    #[test]
    fn gaussian_zero_covariance() {
        let cov = diag(&[0.0, 0.0]);
        let sample = sample_gaussian(&cov, 5, 1).unwrap();
        assert!(sample.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gaussian_law_of_large_numbers() {
        let cov = diag(&[1.0, 1.0]);
        let sample = sample_gaussian(&cov, 100_000, 7).unwrap();
        let emp = sample_covariance(&sample).unwrap();
        let gap = (emp.matrix() - cov.matrix()).norm();
        assert!(gap < 0.05, "spectral gap {gap}");
    }

    #[test]
    fn gaussian_deterministic() {
        let cov = diag(&[1.0, 2.0, 0.5]);
        let a = sample_gaussian(&cov, 50, 99).unwrap();
        let b = sample_gaussian(&cov, 50, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rademacher_moments() {
        let n = 5;
        let draws = 100_000u64;
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for i in 0..draws {
            let z = sample_rademacher_subset(n, derive_seed(31, i)).unwrap();
            mean += &z;
            second += &z * z.transpose();
        }
        mean /= draws as f64;
        second /= draws as f64;
        for j in 0..n {
            assert!(mean[j].abs() < 0.02, "mean[{j}] = {}", mean[j]);
        }
        // Var(Z) = (2/3)I + (1/3)11ᵀ: diagonal 1, off-diagonal 1/3.
        for i in 0..n {
            for j in 0..n {
                let expected = if i == j { 1.0 } else { 1.0 / 3.0 };
                let observed = second[(i, j)] - mean[i] * mean[j];
                assert!(
                    (observed - expected).abs() < 0.05,
                    "var[{i},{j}] = {observed}"
                );
            }
        }
    }

    #[test]
    fn rademacher_single_coordinate() {
        let mut plus = 0u32;
        let draws = 20_000u64;
        for i in 0..draws {
            let z = sample_rademacher_subset(1, derive_seed(17, i)).unwrap();
            assert!(z[0] == 1.0 || z[0] == -1.0);
            if z[0] == 1.0 {
                plus += 1;
            }
        }
        let frac = plus as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.02, "P(+1) = {frac}");
    }

    #[test]
    fn heavy_mixture_row_count_and_determinism() {
        let spec = HeavyMixtureSpec::new(DMatrix::identity(4, 4), 0.001).unwrap();
        let a = sample_heavy_mixture(&spec, 250, 5);
        let b = sample_heavy_mixture(&spec, 250, 5);
        assert_eq!(a, b);
        assert_eq!(a.nrows(), 250);
    }

    #[test]
    fn heavy_mixture_expected_heavy_rows() {
        // T = 250 at p = 0.001 gives a quarter heavy row on average; count
        // over many samples to see the rate.
        let n = 3;
        let spec = HeavyMixtureSpec::new(DMatrix::identity(n, n), 0.001).unwrap();
        let mut heavy_rows = 0u32;
        let samples = 400u64;
        for s in 0..samples {
            let x = sample_heavy_mixture(&spec, 250, derive_seed(23, s));
            for i in 0..x.nrows() {
                // Identity factor: heavy rows are exactly ±1 vectors.
                if (0..n).all(|j| (x[(i, j)].abs() - 1.0).abs() < 1e-12) {
                    heavy_rows += 1;
                }
            }
        }
        let per_sample = heavy_rows as f64 / samples as f64;
        assert!(
            (per_sample - 0.25).abs() < 0.08,
            "heavy rows per sample {per_sample}"
        );
    }

    #[test]
    fn heavy_mixture_degenerates_to_gaussian() {
        let cov = diag(&[1.5, 0.5, 1.0]);
        let factor = linalg::psd_sqrt(cov.matrix()).unwrap();
        let spec = HeavyMixtureSpec::new(factor, 0.0).unwrap();
        let mixture = sample_heavy_mixture(&spec, 100, 11);
        let gaussian = sample_gaussian(&cov, 100, 11).unwrap();
        assert_eq!(mixture, gaussian);
    }

    #[test]
    fn heavy_mixture_middle_matrix_spectrum() {
        // Analytic middle matrix (1 − p/3)I + (p/3)11ᵀ at p = 0.001, N = 82:
        // eigenvalues (1 − p/3) with multiplicity N−1 and (1 − p/3 + p·N/3).
        let n = 82;
        let p = 0.001;
        let small = 1.0 - p / 3.0;
        let large = small + p * n as f64 / 3.0;
        assert_relative_eq!(small, 0.999_666_666_666_666_7, epsilon = 1e-15);
        assert_relative_eq!(large, 1.027, epsilon = 1e-12);
        // Reported range [0.999, 1.055] with ±0.03 slack.
        let band = (0.999 - 0.03)..=(1.055 + 0.03);
        assert!(band.contains(&small));
        assert!(band.contains(&large));
    }

    #[test]
    fn heavy_mixture_empirical_matches_analytic() {
        let n = 5;
        let mut base = DMatrix::identity(n, n);
        base[(0, 0)] = 2.0;
        let spec = HeavyMixtureSpec::new(base, 0.001).unwrap();
        let population = spec.population_covariance().unwrap();
        let sample = sample_heavy_mixture(&spec, 100_000, 13);
        let emp = sample_covariance(&sample).unwrap();
        let rel = (emp.matrix() - population.matrix()).norm() / population.matrix().norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn rotation_identity_when_already_in_span() {
        let n = 6;
        let u = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let s1 = CovEstimate::exact(
            &u * u.transpose() * 2.0 + (DMatrix::identity(n, n) - &u * u.transpose()),
        )
        .unwrap();
        let result = rotate_for_benign_optimum(&s1, 1).unwrap();
        assert!((&result.rotation - DMatrix::identity(n, n)).norm() < 1e-10);
        assert!((result.rotated.matrix() - s1.matrix()).norm() < 1e-10);
    }

    #[test]
    fn rotation_two_by_two() {
        let s1 = diag(&[2.0, 1.0]);
        let result = rotate_for_benign_optimum(&s1, 1).unwrap();
        let u = DVector::from_element(2, 1.0 / 2.0f64.sqrt());
        let image = result.rotated.matrix() * &u;
        // u is the top eigenvector of S2, eigenvalue 2.
        assert_relative_eq!((image - &u * 2.0).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn rotation_is_orthogonal_and_preserves_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 8;
        let a = DMatrix::from_fn(n, n, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        });
        let s1 = CovEstimate::exact(&a * a.transpose() / n as f64).unwrap();
        let result = rotate_for_benign_optimum(&s1, 3).unwrap();
        let r = &result.rotation;
        assert!((r.transpose() * r - DMatrix::identity(n, n)).norm() <= 1e-10);
        let e1 = s1.eigenvalues();
        let e2 = result.rotated.eigenvalues();
        assert!((e1 - e2).amax() <= 1e-9);

        // Residual of 1/√N against the rotated top-m span.
        let (_, vectors) = linalg::symmetric_eigen_desc(result.rotated.matrix()).unwrap();
        let u = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let top = vectors.columns(0, 3);
        let residual = (&u - top * (top.transpose() * &u)).norm();
        assert!(residual <= 1e-8, "residual {residual}");
    }

    #[test]
    fn rotation_rejects_m_larger_than_n() {
        let s1 = diag(&[1.0, 1.0]);
        assert!(rotate_for_benign_optimum(&s1, 3).is_err());
    }

    #[test]
    fn exact_mode_curves_coincide_and_descend() {
        let cov = diag(&[2.0, 1.0, 0.5, 0.25]);
        let report = convergence_experiment(
            &cov,
            50,
            40,
            3,
            EstimatorMode::Exact,
            &RobustConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(report.mean_risk_plugin, report.mean_insample);
        for s in 1..report.mean_risk_plugin.len() {
            assert!(report.mean_risk_plugin[s] <= report.mean_risk_plugin[s - 1] + 1e-12);
        }
    }

    #[test]
    fn plugin_mode_population_risk_has_interior_minimum() {
        // Ill-conditioned covariance (dominant factor over a flat bulk),
        // small sample: the in-sample risk keeps falling while the
        // population risk turns back up.
        let cov = factor_cov(40, 1.0);
        let report = convergence_experiment(
            &cov,
            60,
            80,
            8,
            EstimatorMode::PlugIn,
            &RobustConfig::default(),
            3,
        )
        .unwrap();
        let curve = &report.mean_risk_plugin;
        let argmin = curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(argmin > 0 && argmin < curve.len() - 1, "argmin {argmin}");
        for s in 1..report.mean_insample.len() {
            assert!(report.mean_insample[s] <= report.mean_insample[s - 1] + 1e-9);
        }
    }

    #[test]
    fn replication_scaling_shrinks_standard_error() {
        // Standard error of the mean curve at the final step, estimated over
        // 10 trials, should drop by roughly √2 when replications double.
        let cov = factor_cov(6, 1.0);
        let robust = RobustConfig::default();
        let final_mean = |replications: usize, trial: u64| -> f64 {
            let report = convergence_experiment(
                &cov,
                30,
                12,
                replications,
                EstimatorMode::PlugIn,
                &robust,
                derive_seed(22 + trial, replications as u64),
            )
            .unwrap();
            *report.mean_risk_plugin.last().unwrap()
        };
        let spread = |replications: usize| -> f64 {
            let values: Vec<f64> = (0..10).map(|t| final_mean(replications, t)).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
                .sqrt()
        };
        let ratio = spread(20) / spread(40);
        assert!(
            (1.2..=1.7).contains(&ratio),
            "scaling ratio {ratio} outside [1.2, 1.7]"
        );
    }

    #[test]
    fn tail_experiment_small_scale() {
        let n = 8;
        let spec = HeavyMixtureSpec::new(DMatrix::identity(n, n), 0.001).unwrap();
        let report = tail_experiment(&spec, 60, 12, 20, &RobustConfig::default(), 5).unwrap();
        assert_eq!(report.mean_risk_robust.len(), 21);
        assert_eq!(report.q95_risk_plugin.len(), 21);
        // Paired design: identical seeds recorded for both modes.
        assert_eq!(report.replication_seeds.len(), 12);
    }

    #[test]
    fn tail_experiment_mean_curves_stay_close() {
        // Robust and plug-in mean risk differ by ≤ 10% of the plug-in mean
        // at the plug-in's optimal step.
        let n = 20;
        let base = factor_cov(n, 1.0);
        let rotated = rotate_for_benign_optimum(&base, 15).unwrap().rotated;
        let spec = HeavyMixtureSpec::from_cov(&rotated, 0.001).unwrap();
        let report = tail_experiment(&spec, 120, 50, 40, &RobustConfig::default(), 7).unwrap();
        let (s_p, &plugin_min) = report
            .mean_risk_plugin
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let robust_min = report
            .mean_risk_robust
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let gap = (robust_min - plugin_min).abs();
        assert!(
            gap <= 0.10 * plugin_min,
            "mean gap {:.2}% at plug-in optimum step {s_p}",
            100.0 * gap / plugin_min
        );
    }

    #[test]
    fn tail_experiment_single_replication_quantile_degenerates() {
        let n = 4;
        let spec = HeavyMixtureSpec::new(DMatrix::identity(n, n), 0.001).unwrap();
        let report = tail_experiment(&spec, 40, 1, 10, &RobustConfig::default(), 9).unwrap();
        assert_eq!(report.mean_risk_robust, report.q95_risk_robust);
        assert_eq!(report.mean_risk_plugin, report.q95_risk_plugin);
    }

    #[test]
    fn contamination_zero_replacement_matches_clean() {
        // Replacing the first row with itself must reproduce the clean curves
        // bit-for-bit: same estimator, same sample, same seed path.
        let cov = diag(&[1.0, 0.7, 0.4]);
        let robust = RobustConfig::default();
        let clean = sample_gaussian(&cov, 30, derive_seed(77, 0)).unwrap();
        let copy = clean.clone();
        let curve = |sample: &DMatrix<f64>, mode: EstimatorMode| -> Vec<f64> {
            let action = estimator_for_sample(mode, sample, &cov, &robust).unwrap();
            pgd_risk_curve(&gmv_trace(&action, 15).unwrap(), &cov)
        };
        assert_eq!(
            curve(&clean, EstimatorMode::Robust),
            curve(&copy, EstimatorMode::Robust)
        );
        assert_eq!(
            curve(&clean, EstimatorMode::PlugIn),
            curve(&copy, EstimatorMode::PlugIn)
        );
    }

    #[test]
    fn contamination_robust_beats_plugin_at_the_minimum() {
        // Daily-return covariance scale: the ±1 outlier row dwarfs the data.
        let n = 10;
        let values: Vec<f64> = (0..n).map(|i| (0.7f64).powi(i) * 1e-4).collect();
        let cov = diag(&values);
        let curves =
            contamination_experiment(&cov, 60, 40, &RobustConfig::default(), 12345).unwrap();
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            min(&curves.contaminated_robust) <= min(&curves.contaminated_plugin) + 1e-12,
            "robust {} vs plugin {}",
            min(&curves.contaminated_robust),
            min(&curves.contaminated_plugin)
        );
    }

    #[test]
    fn contamination_never_helps_plugin() {
        let n = 6;
        let values: Vec<f64> = (0..n).map(|i| (0.7f64).powi(i) * 1e-4).collect();
        let cov = diag(&values);
        let curves =
            contamination_experiment(&cov, 50, 30, &RobustConfig::default(), 4242).unwrap();
        for s in 0..curves.steps.len() {
            assert!(
                curves.contaminated_plugin[s] >= curves.clean_plugin[s] - 1e-12,
                "step {s}: contaminated {} < clean {}",
                curves.contaminated_plugin[s],
                curves.clean_plugin[s]
            );
        }
    }

    #[test]
    fn experiment_csv_shape() {
        let cov = diag(&[1.0, 0.5]);
        let report = convergence_experiment(
            &cov,
            20,
            5,
            2,
            EstimatorMode::PlugIn,
            &RobustConfig::default(),
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_experiment_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,mean_risk_robust,q95_risk_robust,mean_risk_plugin,q95_risk_plugin,mean_insample"
        );
        assert_eq!(text.lines().count(), 7); // header + 6 steps (0..=5)
        assert!(text.contains("\r\n"));
    }
}
