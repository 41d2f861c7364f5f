//! Batch command-line entry point.
//!
//! Three subcommands: `backtest` (rolling-window strategy comparison over a
//! price CSV), `simulate` (synthetic risk-curve experiments), and `estimate`
//! (one robust GMV fit on the trailing window). Flags override config-file
//! keys, which override built-in defaults. Every run writes a
//! `run_manifest.json` with the fully resolved configuration and SHA-256
//! checksums of the artifacts, so outputs are reproducible from the manifest
//! alone.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 strategy-
//! fatal error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gmvkit::backtest::{
    run_backtest, write_metrics_csv, write_wealth_csv, write_weights_csv, BacktestConfig,
};
use gmvkit::benchmarks::{Strategy, StrategyKind};
use gmvkit::market_data::{load_price_csv, sample_covariance, to_log_returns, CovEstimate};
use gmvkit::pgd::{default_step_count, gmv_pgd, PgdConfig, PgdMode};
use gmvkit::robust::{ActionEstimator, RobustConfig};
use gmvkit::simulation::{
    contamination_experiment, convergence_experiment, rotate_for_benign_optimum, tail_experiment,
    write_experiment_csv, EstimatorMode, ExperimentReport, HeavyMixtureSpec,
};

#[derive(Parser, Debug)]
#[command(name = "gmvkit", version, about = "Robust global-minimum-variance portfolio toolbox")]
struct Cli {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input price CSV (`date,<ticker>,...`).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Estimation window length in trading days.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Proportional transaction cost per unit traded.
    #[arg(long, global = true)]
    cost: Option<f64>,
    /// Comma-separated strategy list (ew,gmv,gmv_long,gmv_lin,gmv_robust).
    #[arg(long, global = true, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Master seed for all randomized components.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Estimator mode for `estimate`: robust or plugin.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[command(subcommand)]
    command: CommandKind,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum CommandKind {
    /// Rolling-window, monthly-rebalanced strategy comparison.
    Backtest,
    /// Synthetic experiments: convergence, tail, contamination.
    Simulate,
    /// One robust (or plug-in) GMV fit on the trailing window.
    Estimate,
}

/// Optional keys of the JSON config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    input: Option<String>,
    out: Option<String>,
    window: Option<usize>,
    cost: Option<f64>,
    strategies: Option<Vec<String>>,
    seed: Option<u64>,
    mode: Option<String>,
    robust: Option<RobustConfig>,
    pgd: Option<PgdConfig>,
    experiment: Option<ExperimentConfig>,
}

/// Synthetic-experiment parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    /// convergence | tail | contamination
    name: String,
    n: usize,
    t: usize,
    steps: usize,
    replications: usize,
    p_heavy: f64,
    /// convergence only: robust | plugin | exact
    estimator: String,
    /// Effective rank of the synthetic factor covariance.
    effective_rank: f64,
    /// Scale of the synthetic covariance (variance units).
    scale: f64,
    /// Rotate so the ones-vector lies in the top eigenspace (tail experiment
    /// default).
    rotate: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "tail".into(),
            n: 40,
            t: 250,
            steps: 60,
            replications: 200,
            p_heavy: 0.001,
            estimator: "plugin".into(),
            effective_rank: 3.0,
            scale: 1.0,
            rotate: true,
        }
    }
}

/// Fully resolved configuration, echoed into the run manifest.
#[derive(Debug, Serialize)]
struct ResolvedConfig {
    command: String,
    input: Option<String>,
    out: String,
    window: usize,
    cost: f64,
    strategies: Vec<String>,
    seed: u64,
    mode: String,
    robust: RobustConfig,
    pgd: PgdConfig,
    experiment: ExperimentConfig,
}

struct CliError {
    code: u8,
    source: anyhow::Error,
}

type CliResult<T> = Result<T, CliError>;

trait IntoCliError<T> {
    fn config_err(self) -> CliResult<T>;
    fn data_err(self) -> CliResult<T>;
    fn fatal_err(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> IntoCliError<T> for Result<T, E> {
    fn config_err(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: 2,
            source: e.into(),
        })
    }
    fn data_err(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: 3,
            source: e.into(),
        })
    }
    fn fatal_err(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: 4,
            source: e.into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<ResolvedConfig> {
    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .config_err()?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .config_err()?
        }
        None => FileConfig::default(),
    };

    let strategies = cli
        .strategies
        .clone()
        .or(file.strategies)
        .unwrap_or_else(|| {
            ["ew", "gmv", "gmv_long", "gmv_lin", "gmv_robust"]
                .map(String::from)
                .to_vec()
        });
    for name in &strategies {
        StrategyKind::parse_name(name)
            .map_err(|e| anyhow!("{e} (config key `strategies`)"))
            .config_err()?;
    }

    let mode = cli.mode.clone().or(file.mode).unwrap_or_else(|| "robust".into());
    if !matches!(mode.as_str(), "robust" | "plugin") {
        return Err(anyhow!("mode must be `robust` or `plugin`, got `{mode}`")).config_err();
    }

    let robust = file.robust.unwrap_or_default();
    robust.validate().config_err()?;
    let pgd = file.pgd.unwrap_or_default();
    pgd.validate().config_err()?;

    let config = ResolvedConfig {
        command: match cli.command {
            CommandKind::Backtest => "backtest",
            CommandKind::Simulate => "simulate",
            CommandKind::Estimate => "estimate",
        }
        .into(),
        input: cli
            .input
            .as_ref()
            .map(|p| p.display().to_string())
            .or(file.input),
        out: cli
            .out
            .as_ref()
            .map(|p| p.display().to_string())
            .or(file.out)
            .unwrap_or_else(|| "out".into()),
        window: cli.window.or(file.window).unwrap_or(252),
        cost: cli.cost.or(file.cost).unwrap_or(0.005),
        strategies,
        seed: cli.seed.or(file.seed).unwrap_or(0),
        mode,
        robust,
        pgd,
        experiment: file.experiment.unwrap_or_default(),
    };
    if config.window < 2 {
        return Err(anyhow!("window must be at least 2")).config_err();
    }
    if config.cost.is_nan() || config.cost < 0.0 {
        return Err(anyhow!("cost must be nonnegative")).config_err();
    }
    Ok(config)
}

fn run(cli: Cli) -> CliResult<()> {
    let config = resolve(&cli)?;
    std::fs::create_dir_all(&config.out)
        .with_context(|| format!("creating output directory {}", config.out))
        .data_err()?;
    let mut artifacts: BTreeMap<String, String> = BTreeMap::new();
    match cli.command {
        CommandKind::Backtest => cmd_backtest(&config, &mut artifacts)?,
        CommandKind::Simulate => cmd_simulate(&config, &mut artifacts)?,
        CommandKind::Estimate => cmd_estimate(&config, &mut artifacts)?,
    }
    write_manifest(&config, &artifacts)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_artifact(
    out_dir: &str,
    name: &str,
    bytes: &[u8],
    artifacts: &mut BTreeMap<String, String>,
) -> CliResult<()> {
    let path = Path::new(out_dir).join(name);
    std::fs::write(&path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .data_err()?;
    artifacts.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

fn write_manifest(
    config: &ResolvedConfig,
    artifacts: &BTreeMap<String, String>,
) -> CliResult<()> {
    let manifest = serde_json::json!({
        "config": config,
        "artifacts": artifacts,
    });
    let path = Path::new(&config.out).join("run_manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).config_err()?)
        .with_context(|| format!("writing {}", path.display()))
        .data_err()?;
    Ok(())
}

fn strategies_from(config: &ResolvedConfig) -> Vec<Strategy> {
    config
        .strategies
        .iter()
        .map(|name| {
            let kind = StrategyKind::parse_name(name).expect("validated at resolve time");
            let mut strategy = Strategy::new(kind);
            strategy.robust = config.robust.clone();
            strategy.pgd = config.pgd.clone();
            strategy
        })
        .collect()
}

fn load_returns(config: &ResolvedConfig) -> CliResult<gmvkit::market_data::ReturnPanel> {
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| anyhow!("no input CSV given (flag --input or config key `input`)"))
        .config_err()?;
    let panel = load_price_csv(input).data_err()?;
    to_log_returns(&panel).data_err()
}

fn cmd_backtest(config: &ResolvedConfig, artifacts: &mut BTreeMap<String, String>) -> CliResult<()> {
    let returns = load_returns(config)?;
    let backtest_config = BacktestConfig {
        window_length: config.window,
        cost_rate: config.cost,
        strategies: strategies_from(config),
    };
    let result = run_backtest(&returns, &backtest_config).data_err()?;
    for (name, diagnostic) in &result.failures {
        eprintln!("strategy `{name}` failed: {diagnostic}");
    }
    if result.runs.is_empty() {
        return Err(anyhow!("all strategies failed")).fatal_err();
    }

    let mut metrics = Vec::new();
    write_metrics_csv(&result, &mut metrics).data_err()?;
    write_artifact(&config.out, "metrics.csv", &metrics, artifacts)?;

    for run in &result.runs {
        let mut weights = Vec::new();
        write_weights_csv(run, returns.tickers(), &mut weights).data_err()?;
        write_artifact(&config.out, &format!("weights_{}.csv", run.name), &weights, artifacts)?;

        let mut wealth = Vec::new();
        write_wealth_csv(run, &mut wealth).data_err()?;
        write_artifact(&config.out, &format!("wealth_{}.csv", run.name), &wealth, artifacts)?;
    }
    Ok(())
}

/// Synthetic factor covariance with the requested effective rank: a dominant
/// eigenvalue over a flat bulk.
fn synthetic_covariance(n: usize, effective_rank: f64, scale: f64) -> CliResult<CovEstimate> {
    if !(effective_rank > 1.0 && (effective_rank as usize) < n.max(2)) {
        return Err(anyhow!(
            "effective_rank must be in (1, N), got {effective_rank} for N={n}"
        ))
        .config_err();
    }
    let top = (n as f64 - 1.0) / (effective_rank - 1.0);
    let mut values = vec![scale; n];
    values[0] = top * scale;
    CovEstimate::exact(DMatrix::from_diagonal(&DVector::from_row_slice(&values))).config_err()
}

fn cmd_simulate(config: &ResolvedConfig, artifacts: &mut BTreeMap<String, String>) -> CliResult<()> {
    let exp = &config.experiment;
    let cov = synthetic_covariance(exp.n, exp.effective_rank, exp.scale)?;
    let cov = if exp.rotate {
        let m = 15.min(exp.n.saturating_sub(1)).max(1);
        rotate_for_benign_optimum(&cov, m).fatal_err()?.rotated
    } else {
        cov
    };

    let report: ExperimentReport = match exp.name.as_str() {
        "convergence" => {
            let mode = match exp.estimator.as_str() {
                "robust" => EstimatorMode::Robust,
                "plugin" => EstimatorMode::PlugIn,
                "exact" => EstimatorMode::Exact,
                other => {
                    return Err(anyhow!(
                        "unknown estimator `{other}` (config key `experiment.estimator`)"
                    ))
                    .config_err()
                }
            };
            convergence_experiment(
                &cov,
                exp.t,
                exp.steps,
                exp.replications,
                mode,
                &config.robust,
                config.seed,
            )
            .fatal_err()?
        }
        "tail" => {
            let spec = HeavyMixtureSpec::from_cov(&cov, exp.p_heavy).config_err()?;
            tail_experiment(
                &spec,
                exp.t,
                exp.replications,
                exp.steps,
                &config.robust,
                config.seed,
            )
            .fatal_err()?
        }
        "contamination" => {
            let curves =
                contamination_experiment(&cov, exp.t, exp.steps, &config.robust, config.seed)
                    .fatal_err()?;
            // Single realization: the 95% quantile degenerates to the curve.
            ExperimentReport {
                steps: curves.steps.clone(),
                mean_risk_robust: curves.contaminated_robust.clone(),
                q95_risk_robust: curves.contaminated_robust,
                mean_risk_plugin: curves.contaminated_plugin.clone(),
                q95_risk_plugin: curves.contaminated_plugin,
                mean_insample: Vec::new(),
                replications: 1,
                master_seed: config.seed,
                replication_seeds: vec![config.seed],
            }
        }
        other => {
            return Err(anyhow!(
                "unknown experiment `{other}` (config key `experiment.name`)"
            ))
            .config_err()
        }
    };

    let mut csv = Vec::new();
    write_experiment_csv(&report, &mut csv).data_err()?;
    write_artifact(&config.out, &format!("experiment_{}.csv", exp.name), &csv, artifacts)?;
    Ok(())
}

fn cmd_estimate(config: &ResolvedConfig, artifacts: &mut BTreeMap<String, String>) -> CliResult<()> {
    let returns = load_returns(config)?;
    let t = returns.num_rows();
    if t < config.window {
        return Err(anyhow!(
            "input has {t} return rows, window needs {}",
            config.window
        ))
        .data_err()?;
    }
    let window = returns.window_data(t - config.window, t - 1);

    let mut robust = config.robust.clone();
    robust.seed = config.seed;
    let (action, buckets, truncation) = if config.mode == "robust" {
        let action = ActionEstimator::robust(&window, &robust).fatal_err()?;
        let (buckets, truncation) = match &action {
            ActionEstimator::Robust { sample, .. } => {
                (Some(sample.num_buckets()), Some(sample.truncation()))
            }
            ActionEstimator::PlugIn { .. } => (None, None),
        };
        (action, buckets, truncation)
    } else {
        let cov = sample_covariance(&window).data_err()?;
        (ActionEstimator::plugin(cov), None, None)
    };

    let eta = match config.pgd.eta {
        Some(eta) => eta,
        None => gmvkit::pgd::estimate_step_size(&action).fatal_err()?,
    };
    let steps = match config.pgd.steps {
        Some(steps) => steps,
        None => match &action {
            ActionEstimator::Robust { .. } => 0, // auto inside gmv_pgd
            ActionEstimator::PlugIn { cov } => {
                let r_hat = cov.trace() / cov.spectral_norm();
                default_step_count(config.window, r_hat, robust.delta, eta, cov.spectral_norm())
            }
        },
    };
    let pgd_config = PgdConfig {
        mode: PgdMode::Gmv,
        eta: Some(eta),
        steps: if steps == 0 { None } else { Some(steps) },
        gamma: None,
    };
    let trace = gmv_pgd(&action, &pgd_config).fatal_err()?;
    let weights = trace.final_weights().fatal_err()?;

    let weight_map: BTreeMap<&str, f64> = returns
        .tickers()
        .iter()
        .map(String::as_str)
        .zip(weights.as_slice().iter().copied())
        .collect();
    let output = serde_json::json!({
        "mode": config.mode,
        "weights": weight_map,
        "eta": trace.eta(),
        "steps": trace.num_steps(),
        "buckets": buckets,
        "truncation": truncation,
        "trace_summary": {
            "initial_risk": trace.risks().first(),
            "final_risk": trace.risks().last(),
        },
    });
    let bytes = serde_json::to_vec_pretty(&output).config_err()?;
    write_artifact(&config.out, "estimate_weights.json", &bytes, artifacts)?;
    Ok(())
}
