//! Rolling-window, monthly-rebalanced out-of-sample evaluation.
//!
//! Wealth accumulates additively (`W_{l+1} = W_l + ŵ_lᵀX_{l+1}`, net of the
//! proportional transaction cost on rebalance days), weights drift between
//! rebalances by exact price relatives, and a strategy's daily return uses
//! the weights held that day. Output files are RFC-4180 CSV with CRLF row
//! terminators and 10 significant digits.

use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DVector;

use crate::benchmarks::Strategy;
use crate::market_data::{monthly_windows, ReturnPanel};
use crate::pgd::WeightVector;
use crate::{linalg, Error, Result};

/// Backtest parameters. Initial wealth is fixed at 1.
#[derive(Debug, Clone)]
pub struct BacktestConfig {
    /// Estimation window length in trading days.
    pub window_length: usize,
    /// Proportional transaction cost per unit traded.
    pub cost_rate: f64,
    pub strategies: Vec<Strategy>,
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 {
            return Err(Error::InvalidInput("window length must be ≥ 2".into()));
        }
        if !(self.cost_rate >= 0.0 && self.cost_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cost rate must be nonnegative, got {}",
                self.cost_rate
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidInput("no strategies configured".into()));
        }
        Ok(())
    }
}

/// Performance measures of one return/wealth series.
#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    pub to: f64,
    pub tto: f64,
    pub cw: f64,
    pub sd: f64,
    /// `None` when the return series is constant (SD = 0).
    pub sr: Option<f64>,
    /// `None` when the wealth path never draws down.
    pub cr: Option<f64>,
}

/// Per-rebalance weight statistics, averaged over rebalances. `sd` is the
/// population standard deviation of the weight entries within a period.
#[derive(Debug, Clone, Copy)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub sd: f64,
    pub range: f64,
    pub mad_ew: f64,
}

/// Everything recorded for one strategy over the out-of-sample period.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub name: String,
    pub rebalance_dates: Vec<NaiveDate>,
    /// Target weights fixed at each rebalance.
    pub targets: Vec<WeightVector>,
    /// Holdings drifted to just before each rebalance after the first.
    pub drifted: Vec<WeightVector>,
    /// Out-of-sample days.
    pub dates: Vec<NaiveDate>,
    pub gross_returns: Vec<f64>,
    pub net_returns: Vec<f64>,
    /// Wealth paths starting at 1 (one more entry than days).
    pub gross_wealth: Vec<f64>,
    pub net_wealth: Vec<f64>,
    pub gross_metrics: Metrics,
    pub net_metrics: Metrics,
    pub weight_stats: WeightStats,
}

/// Per-strategy runs (ordered by strategy name) plus diagnostics for
/// strategies that failed and were excluded.
#[derive(Debug, Clone)]
pub struct BacktestResult {
    pub runs: Vec<StrategyRun>,
    pub failures: Vec<(String, String)>,
}

fn l1_distance(a: &WeightVector, b: &WeightVector) -> f64 {
    a.as_vector()
        .iter()
        .zip(b.as_vector().iter())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Weights drifted by a holding period of log returns: component `j` grows
/// by `exp(Σ_t r_{j,t})`, then the vector is renormalized to sum one.
pub fn drifted_weights(w: &WeightVector, period_returns: &[DVector<f64>]) -> Result<WeightVector> {
    let n = w.len();
    let mut growth = DVector::from_element(n, 0.0);
    for r in period_returns {
        if r.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: r.len(),
            });
        }
        growth += r;
    }
    let scaled = DVector::from_fn(n, |j, _| w.as_vector()[j] * growth[j].exp());
    let denom = linalg::compensated_sum(scaled.iter().copied());
    if !denom.is_finite() || denom.abs() < 1e-12 {
        return Err(Error::Numerical(
            "drifted weights degenerate: portfolio value near zero".into(),
        ));
    }
    WeightVector::new(scaled / denom)
}

/// Turnover `TO = M⁻¹ Σ_l ‖target_{l+1} − drifted_l‖₁` over the `M`
/// transitions between consecutive rebalances.
pub fn turnover(targets: &[WeightVector], drifted: &[WeightVector]) -> Result<f64> {
    if targets.len() < 2 {
        return Err(Error::InvalidInput(
            "turnover needs at least one transition".into(),
        ));
    }
    if drifted.len() != targets.len() - 1 {
        return Err(Error::DimensionMismatch {
            expected: targets.len() - 1,
            actual: drifted.len(),
        });
    }
    let m = drifted.len();
    let total: f64 = (0..m)
        .map(|l| l1_distance(&targets[l + 1], &drifted[l]))
        .sum();
    Ok(total / m as f64)
}

/// Target turnover `TTO = M⁻¹ Σ_l ‖target_{l+1} − target_l‖₁`; zero by
/// construction for a constant-target strategy such as EW.
pub fn target_turnover(targets: &[WeightVector]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("no targets".into()));
    }
    if targets.len() == 1 {
        return Ok(0.0);
    }
    let m = targets.len() - 1;
    let total: f64 = (0..m)
        .map(|l| l1_distance(&targets[l + 1], &targets[l]))
        .sum();
    Ok(total / m as f64)
}

/// Proportional cost of one rebalance: `tc = c·Σ_j |new_j − drifted_j|`.
pub fn transaction_cost(w_new: &WeightVector, w_drifted: &WeightVector, cost_rate: f64) -> f64 {
    cost_rate * l1_distance(w_new, w_drifted)
}

/// Additive wealth accumulation from daily holdings and return vectors:
/// `W_{t+1} = W_t + w_tᵀX_t − tc_t` (the cost only when `net`). The result
/// starts at `W₀ = 1` and has one more entry than there are days.
pub fn cumulative_wealth(
    weights: &[DVector<f64>],
    returns: &[DVector<f64>],
    costs: &[f64],
    net: bool,
) -> Result<Vec<f64>> {
    if weights.len() != returns.len() || costs.len() != returns.len() {
        return Err(Error::DimensionMismatch {
            expected: returns.len(),
            actual: weights.len().min(costs.len()),
        });
    }
    let mut wealth = Vec::with_capacity(returns.len() + 1);
    wealth.push(1.0);
    let mut w = 1.0;
    for t in 0..returns.len() {
        w += weights[t].dot(&returns[t]);
        if net {
            w -= costs[t];
        }
        wealth.push(w);
    }
    Ok(wealth)
}

/// Sample standard deviation (divisor `n−1`) and Sharpe ratio of a daily
/// return series. A constant series has SD 0 and no Sharpe ratio.
pub fn sd_sr(returns: &[f64]) -> Result<(f64, f64)> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(Error::Numerical(
            "constant return series: Sharpe ratio undefined".into(),
        ));
    }
    Ok((sd, mean / sd))
}

/// Maximum relative peak-to-trough drawdown of a positive wealth path.
pub fn max_drawdown(wealth: &[f64]) -> Result<f64> {
    if wealth.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            actual: 0,
        });
    }
    let mut peak = f64::MIN;
    let mut drawdown = 0.0f64;
    for &w in wealth {
        if w <= 0.0 || !w.is_finite() {
            return Err(Error::Numerical(format!(
                "non-positive wealth {w} encountered"
            )));
        }
        peak = peak.max(w);
        drawdown = drawdown.max((peak - w) / peak);
    }
    Ok(drawdown)
}

/// Calmar ratio `252·AV / D_P`; undefined when the path never draws down.
pub fn calmar(returns: &[f64], wealth: &[f64]) -> Result<f64> {
    let drawdown = max_drawdown(wealth)?;
    if drawdown == 0.0 {
        return Err(Error::Numerical(
            "no drawdown: Calmar ratio undefined".into(),
        ));
    }
    let av = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
    Ok(252.0 * av / drawdown)
}

/// Weight statistics per rebalance, averaged over rebalances.
pub fn weight_stats(targets: &[WeightVector]) -> Result<WeightStats> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("no rebalances".into()));
    }
    let mut acc = WeightStats {
        min: 0.0,
        max: 0.0,
        sd: 0.0,
        range: 0.0,
        mad_ew: 0.0,
    };
    for w in targets {
        let v = w.as_vector();
        let n = v.len() as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.sum() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mad_ew = v.iter().map(|x| (x - 1.0 / n).abs()).sum::<f64>() / n;
        acc.min += min;
        acc.max += max;
        acc.sd += sd;
        acc.range += max - min;
        acc.mad_ew += mad_ew;
    }
    let l = targets.len() as f64;
    Ok(WeightStats {
        min: acc.min / l,
        max: acc.max / l,
        sd: acc.sd / l,
        range: acc.range / l,
        mad_ew: acc.mad_ew / l,
    })
}

fn metrics_for(
    targets: &[WeightVector],
    drifted: &[WeightVector],
    returns: &[f64],
    wealth: &[f64],
) -> Result<Metrics> {
    let to = if targets.len() >= 2 {
        turnover(targets, drifted)?
    } else {
        0.0
    };
    let tto = target_turnover(targets)?;
    let cw = *wealth.last().expect("wealth path is non-empty");
    let (sd, sr) = match sd_sr(returns) {
        Ok((sd, sr)) => (sd, Some(sr)),
        Err(_) => (0.0, None),
    };
    let cr = calmar(returns, wealth).ok();
    Ok(Metrics {
        to,
        tto,
        cw,
        sd,
        sr,
        cr,
    })
}

fn run_strategy(
    strategy: &Strategy,
    panel: &ReturnPanel,
    windows: &[crate::market_data::EstimationWindow],
    cost_rate: f64,
) -> Result<StrategyRun> {
    let n = panel.num_assets();
    let len = panel.num_rows();
    let returns = panel.returns();

    let mut targets = Vec::with_capacity(windows.len());
    for w in windows {
        targets.push(strategy.fit(&panel.window_data(w.start, w.end))?);
    }

    let first_row = windows[0].rebalance_row;
    let mut rebalance_rows: Vec<usize> = windows.iter().map(|w| w.rebalance_row).collect();
    rebalance_rows.push(len); // sentinel: end of panel

    let mut holdings = targets[0].clone();
    let mut drifted = Vec::with_capacity(windows.len().saturating_sub(1));
    let mut gross_returns = Vec::with_capacity(len - first_row);
    let mut net_returns = Vec::with_capacity(len - first_row);
    let mut held_weights: Vec<DVector<f64>> = Vec::with_capacity(len - first_row);
    let mut costs = vec![0.0; len - first_row];

    let mut next_rebalance = 1; // index into targets
    for row in first_row..len {
        if next_rebalance < targets.len() && row == rebalance_rows[next_rebalance] {
            // Holdings just before this rebalance.
            drifted.push(holdings.clone());
            costs[row - first_row] =
                transaction_cost(&targets[next_rebalance], &holdings, cost_rate);
            holdings = targets[next_rebalance].clone();
            next_rebalance += 1;
        }
        let day = returns.row(row).transpose();
        let gross = holdings.as_vector().dot(&day);
        gross_returns.push(gross);
        net_returns.push(gross - costs[row - first_row]);
        held_weights.push(holdings.as_vector().clone());
        // Drift holdings through the day just traded.
        holdings = drifted_weights(&holdings, &[day])?;
    }

    let day_returns: Vec<DVector<f64>> = (first_row..len)
        .map(|row| returns.row(row).transpose())
        .collect();
    let gross_wealth = cumulative_wealth(&held_weights, &day_returns, &costs, false)?;
    let net_wealth = cumulative_wealth(&held_weights, &day_returns, &costs, true)?;

    let gross_metrics = metrics_for(&targets, &drifted, &gross_returns, &gross_wealth)?;
    let net_metrics = metrics_for(&targets, &drifted, &net_returns, &net_wealth)?;
    let stats = weight_stats(&targets)?;

    debug_assert_eq!(drifted.len() + 1, targets.len());
    let _ = n;
    Ok(StrategyRun {
        name: strategy.kind.name().to_string(),
        rebalance_dates: windows.iter().map(|w| w.rebalance_date).collect(),
        targets,
        drifted,
        dates: panel.dates()[first_row..].to_vec(),
        gross_returns,
        net_returns,
        gross_wealth,
        net_wealth,
        gross_metrics,
        net_metrics,
        weight_stats: stats,
    })
}

/// Run every configured strategy over the panel. Strategies evaluate in
/// parallel; a failing strategy is excluded with a diagnostic instead of
/// aborting the run. Results are ordered by strategy name.
pub fn run_backtest(panel: &ReturnPanel, config: &BacktestConfig) -> Result<BacktestResult> {
    config.validate()?;
    let windows = monthly_windows(panel, config.window_length)?;

    let outcomes: Vec<(String, Result<StrategyRun>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .strategies
            .iter()
            .map(|strategy| {
                let windows = &windows;
                scope.spawn(move || {
                    (
                        strategy.kind.name().to_string(),
                        run_strategy(strategy, panel, windows, config.cost_rate),
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("strategy thread panicked"))
            .collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (name, outcome) in outcomes {
        match outcome {
            Ok(run) => runs.push(run),
            Err(e) => failures.push((name, e.to_string())),
        }
    }
    runs.sort_by(|a, b| a.name.cmp(&b.name));
    failures.sort();
    if runs.is_empty() {
        if let Some((name, diag)) = failures.first() {
            return Err(Error::Numerical(format!(
                "all strategies failed; first diagnostic ({name}): {diag}"
            )));
        }
    }
    Ok(BacktestResult { runs, failures })
}

/// Ten significant digits, scientific notation.
pub(crate) fn sig10(x: f64) -> String {
    format!("{x:.9e}")
}

fn opt_sig10(x: Option<f64>) -> String {
    x.map(sig10).unwrap_or_default()
}

/// `metrics.csv`: one row per strategy × {gross, net} with columns
/// TO, TTO, CW, SD, SR, CR.
pub fn write_metrics_csv<W: Write>(result: &BacktestResult, out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(out);
    writer.write_record(["strategy", "series", "TO", "TTO", "CW", "SD", "SR", "CR"])?;
    for run in &result.runs {
        for (series, m) in [("gross", &run.gross_metrics), ("net", &run.net_metrics)] {
            writer.write_record([
                run.name.as_str(),
                series,
                &sig10(m.to),
                &sig10(m.tto),
                &sig10(m.cw),
                &sig10(m.sd),
                &opt_sig10(m.sr),
                &opt_sig10(m.cr),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// `weights_<strategy>.csv`: rebalance date × ticker.
pub fn write_weights_csv<W: Write>(run: &StrategyRun, tickers: &[String], out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(out);
    let mut header = vec!["date".to_string()];
    header.extend_from_slice(tickers);
    writer.write_record(&header)?;
    for (date, w) in run.rebalance_dates.iter().zip(run.targets.iter()) {
        let mut record = vec![date.format("%Y-%m-%d").to_string()];
        record.extend(w.as_slice().iter().map(|&x| sig10(x)));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// `wealth_<strategy>.csv`: date, gross, net.
pub fn write_wealth_csv<W: Write>(run: &StrategyRun, out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(out);
    writer.write_record(["date", "gross", "net"])?;
    // Wealth paths have a leading W₀ = 1 entry; pair dates with end-of-day wealth.
    for (i, date) in run.dates.iter().enumerate() {
        writer.write_record([
            date.format("%Y-%m-%d").to_string(),
            sig10(run.gross_wealth[i + 1]),
            sig10(run.net_wealth[i + 1]),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
