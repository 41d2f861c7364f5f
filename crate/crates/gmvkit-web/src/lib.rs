//! WebAssembly bindings for the interactive risk-curve demos.
//!
//! Three operations, each taking a JSON parameter object and returning a
//! JSON payload of curves for the static page in `www/` to plot:
//!
//! - [`convergence_curves`]: in-sample vs population risk along one PGD run
//!   (the early-stopping U-shape);
//! - [`tail_curves`]: paired robust vs plug-in mean and 95%-quantile risk
//!   curves on heavy-mixture samples;
//! - [`contamination_curves`]: clean vs contaminated runs of both
//!   estimators with a single gross-error row.
//!
//! All functions are pure and seeded, so the page is fully reproducible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use gmvkit::market_data::CovEstimate;
use gmvkit::robust::RobustConfig;
use gmvkit::simulation::{
    contamination_experiment, convergence_experiment, rotate_for_benign_optimum, tail_experiment,
    EstimatorMode, HeavyMixtureSpec,
};

/// Dominant-factor covariance with a flat bulk and the requested effective
/// rank, optionally rotated so the ones-vector joins the top eigenspace.
fn synthetic_cov(n: usize, effective_rank: f64, scale: f64, rotate: bool) -> Result<CovEstimate, String> {
    if n < 2 {
        return Err("n must be at least 2".into());
    }
    if !(effective_rank > 1.0 && effective_rank < n as f64) {
        return Err(format!("effective_rank must be in (1, {n})"));
    }
    let mut values = vec![scale; n];
    values[0] = (n as f64 - 1.0) / (effective_rank - 1.0) * scale;
    let cov = CovEstimate::exact(DMatrix::from_diagonal(&DVector::from_row_slice(&values)))
        .map_err(|e| e.to_string())?;
    if rotate {
        let m = 15.min(n - 1).max(1);
        Ok(rotate_for_benign_optimum(&cov, m)
            .map_err(|e| e.to_string())?
            .rotated)
    } else {
        Ok(cov)
    }
}

fn robust_config(seed: u64) -> RobustConfig {
    RobustConfig {
        seed,
        ..RobustConfig::default()
    }
}

fn reply<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn fail(message: String) -> String {
    reply(&serde_json::json!({ "error": message }))
}

#[derive(Deserialize)]
#[serde(default)]
struct ConvergenceParams {
    n: usize,
    t: usize,
    steps: usize,
    replications: usize,
    effective_rank: f64,
    estimator: String,
    seed: u64,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        Self {
            n: 30,
            t: 60,
            steps: 60,
            replications: 8,
            effective_rank: 3.0,
            estimator: "plugin".into(),
            seed: 1,
        }
    }
}

#[derive(Serialize)]
struct ConvergenceReply {
    steps: Vec<usize>,
    mean_population: Vec<f64>,
    mean_insample: Vec<f64>,
    argmin_population: usize,
}

/// Mean in-sample and population risk along the PGD trace.
#[wasm_bindgen]
pub fn convergence_curves(params_json: &str) -> String {
    let params: ConvergenceParams = match serde_json::from_str(params_json) {
        Ok(p) => p,
        Err(e) => return fail(format!("bad parameters: {e}")),
    };
    let mode = match params.estimator.as_str() {
        "robust" => EstimatorMode::Robust,
        "plugin" => EstimatorMode::PlugIn,
        "exact" => EstimatorMode::Exact,
        other => return fail(format!("unknown estimator `{other}`")),
    };
    if params.steps == 0 || params.steps > 2_000 || params.replications > 200 {
        return fail("steps must be in 1..=2000 and replications at most 200".into());
    }
    let cov = match synthetic_cov(params.n, params.effective_rank, 1.0, false) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let report = match convergence_experiment(
        &cov,
        params.t,
        params.steps,
        params.replications,
        mode,
        &robust_config(params.seed),
        params.seed,
    ) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let population = if report.mean_risk_plugin.is_empty() {
        report.mean_risk_robust
    } else {
        report.mean_risk_plugin
    };
    let argmin = population
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite risks"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    reply(&ConvergenceReply {
        steps: report.steps,
        mean_population: population,
        mean_insample: report.mean_insample,
        argmin_population: argmin,
    })
}

#[derive(Deserialize)]
#[serde(default)]
struct TailParams {
    n: usize,
    t: usize,
    steps: usize,
    replications: usize,
    p_heavy: f64,
    effective_rank: f64,
    seed: u64,
}

impl Default for TailParams {
    fn default() -> Self {
        Self {
            n: 20,
            t: 120,
            steps: 40,
            replications: 30,
            p_heavy: 0.005,
            effective_rank: 3.0,
            seed: 2,
        }
    }
}

#[derive(Serialize)]
struct TailReply {
    steps: Vec<usize>,
    mean_robust: Vec<f64>,
    q95_robust: Vec<f64>,
    mean_plugin: Vec<f64>,
    q95_plugin: Vec<f64>,
}

/// Paired robust vs plug-in population-risk curves on heavy-mixture samples.
#[wasm_bindgen]
pub fn tail_curves(params_json: &str) -> String {
    let params: TailParams = match serde_json::from_str(params_json) {
        Ok(p) => p,
        Err(e) => return fail(format!("bad parameters: {e}")),
    };
    if params.steps == 0 || params.steps > 500 || params.replications == 0 || params.replications > 100
    {
        return fail("steps must be in 1..=500 and replications in 1..=100".into());
    }
    if !(0.0..1.0).contains(&params.p_heavy) {
        return fail("p_heavy must be in [0, 1)".into());
    }
    let cov = match synthetic_cov(params.n, params.effective_rank, 1.0, true) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let spec = match HeavyMixtureSpec::from_cov(&cov, params.p_heavy) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let report = match tail_experiment(
        &spec,
        params.t,
        params.replications,
        params.steps,
        &robust_config(params.seed),
        params.seed,
    ) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    reply(&TailReply {
        steps: report.steps,
        mean_robust: report.mean_risk_robust,
        q95_robust: report.q95_risk_robust,
        mean_plugin: report.mean_risk_plugin,
        q95_plugin: report.q95_risk_plugin,
    })
}

#[derive(Deserialize)]
#[serde(default)]
struct ContaminationParams {
    n: usize,
    t: usize,
    steps: usize,
    effective_rank: f64,
    seed: u64,
}

impl Default for ContaminationParams {
    fn default() -> Self {
        Self {
            n: 20,
            t: 100,
            steps: 30,
            effective_rank: 3.0,
            seed: 3,
        }
    }
}

#[derive(Serialize)]
struct ContaminationReply {
    steps: Vec<usize>,
    clean_robust: Vec<f64>,
    clean_plugin: Vec<f64>,
    contaminated_robust: Vec<f64>,
    contaminated_plugin: Vec<f64>,
}

/// Clean vs contaminated risk curves for both estimators; the contaminated
/// sample has one raw ±1 row, a gross outlier at daily-return scale.
#[wasm_bindgen]
pub fn contamination_curves(params_json: &str) -> String {
    let params: ContaminationParams = match serde_json::from_str(params_json) {
        Ok(p) => p,
        Err(e) => return fail(format!("bad parameters: {e}")),
    };
    if params.steps == 0 || params.steps > 500 {
        return fail("steps must be in 1..=500".into());
    }
    // Daily-return scale makes the sign-vector row a genuine outlier.
    let cov = match synthetic_cov(params.n, params.effective_rank, 1e-4, false) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let curves = match contamination_experiment(
        &cov,
        params.t,
        params.steps,
        &robust_config(params.seed),
        params.seed,
    ) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    reply(&ContaminationReply {
        steps: curves.steps,
        clean_robust: curves.clean_robust,
        clean_plugin: curves.clean_plugin,
        contaminated_robust: curves.contaminated_robust,
        contaminated_plugin: curves.contaminated_plugin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_reply_is_well_formed() {
        let out = convergence_curves("{}");
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(value.get("error").is_none(), "{out}");
        let steps = value["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 61);
        assert_eq!(value["mean_population"].as_array().unwrap().len(), 61);
        assert_eq!(value["mean_insample"].as_array().unwrap().len(), 61);
        let argmin = value["argmin_population"].as_u64().unwrap() as usize;
        assert!(argmin < 61);
    }

    #[test]
    fn convergence_exact_mode_curves_match() {
        let out = convergence_curves(r#"{"estimator":"exact","steps":20,"n":6}"#);
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(value["mean_population"], value["mean_insample"]);
    }

    #[test]
    fn tail_reply_is_well_formed_and_deterministic() {
        let params = r#"{"replications":5,"steps":10,"n":8,"t":60}"#;
        let a = tail_curves(params);
        let b = tail_curves(params);
        assert_eq!(a, b);
        let value: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert!(value.get("error").is_none(), "{a}");
        assert_eq!(value["mean_robust"].as_array().unwrap().len(), 11);
        assert_eq!(value["q95_plugin"].as_array().unwrap().len(), 11);
    }

    #[test]
    fn contamination_reply_reports_four_curves() {
        let out = contamination_curves(r#"{"n":8,"t":40,"steps":12,"seed":5}"#);
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(value.get("error").is_none(), "{out}");
        for key in [
            "clean_robust",
            "clean_plugin",
            "contaminated_robust",
            "contaminated_plugin",
        ] {
            assert_eq!(value[key].as_array().unwrap().len(), 13, "{key}");
        }
    }

    #[test]
    fn bad_parameters_produce_error_payloads() {
        let out = convergence_curves(r#"{"estimator":"psychic"}"#);
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(value["error"].as_str().unwrap().contains("psychic"));

        let out = tail_curves(r#"{"p_heavy":1.5}"#);
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(value.get("error").is_some());

        let out = contamination_curves("not json");
        let value: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(value.get("error").is_some());
    }
}
