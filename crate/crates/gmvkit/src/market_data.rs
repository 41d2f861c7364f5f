//! Price/return panels, rolling estimation windows, and spectrum summaries.
//!
//! CSV input contract: header row `date,<ticker>,...`, ISO-8601 dates
//! (`YYYY-MM-DD`), `.` decimal point, UTF-8. Rows are sorted by date on load;
//! missing or non-positive prices are rejected, not imputed. Cell positions in
//! errors are 1-based and count the header as row 1.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};

use crate::{linalg, Error, Result};

/// Dated matrix of positive price levels, one column per ticker.
#[derive(Debug, Clone)]
pub struct PricePanel {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    prices: DMatrix<f64>,
}

/// Dated matrix of log returns derived from consecutive prices.
#[derive(Debug, Clone)]
pub struct ReturnPanel {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    returns: DMatrix<f64>,
}

/// One estimation window: rows `start..=end` of a return panel feed the
/// strategy that takes effect at `rebalance_row` (the first out-of-sample
/// row).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimationWindow {
    pub start: usize,
    pub end: usize,
    pub rebalance_row: usize,
    pub rebalance_date: NaiveDate,
}

/// Provenance tag of a covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovKind {
    Sample,
    LinearShrinkage,
    ExactSynthetic,
}

/// Symmetric PSD covariance estimate with cached (descending) eigenvalues.
#[derive(Debug, Clone)]
pub struct CovEstimate {
    matrix: DMatrix<f64>,
    kind: CovKind,
    eigenvalues: DVector<f64>,
}

fn check_dates_and_tickers(dates: &[NaiveDate], tickers: &[String]) -> Result<()> {
    for pair in dates.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidInput(format!(
                "dates not strictly increasing: {} followed by {}",
                pair[0], pair[1]
            )));
        }
    }
    for (i, t) in tickers.iter().enumerate() {
        if tickers[..i].contains(t) {
            return Err(Error::InvalidInput(format!("duplicate ticker `{t}`")));
        }
    }
    Ok(())
}

impl PricePanel {
    pub fn new(dates: Vec<NaiveDate>, tickers: Vec<String>, prices: DMatrix<f64>) -> Result<Self> {
        if prices.nrows() != dates.len() || prices.ncols() != tickers.len() {
            return Err(Error::DimensionMismatch {
                expected: dates.len() * tickers.len(),
                actual: prices.nrows() * prices.ncols(),
            });
        }
        check_dates_and_tickers(&dates, &tickers)?;
        for (row, date) in dates.iter().enumerate() {
            for col in 0..tickers.len() {
                let p = prices[(row, col)];
                if !p.is_finite() || p <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "non-positive or non-finite price {p} for {} on {date}",
                        tickers[col]
                    )));
                }
            }
        }
        Ok(Self {
            dates,
            tickers,
            prices,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    pub fn num_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn num_assets(&self) -> usize {
        self.tickers.len()
    }
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, tickers: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        if returns.nrows() != dates.len() || returns.ncols() != tickers.len() {
            return Err(Error::DimensionMismatch {
                expected: dates.len() * tickers.len(),
                actual: returns.nrows() * returns.ncols(),
            });
        }
        check_dates_and_tickers(&dates, &tickers)?;
        if returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("non-finite return entry".into()));
        }
        Ok(Self {
            dates,
            tickers,
            returns,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn num_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn num_assets(&self) -> usize {
        self.tickers.len()
    }

    /// Copy of rows `start..=end` as a dense matrix.
    pub fn window_data(&self, start: usize, end: usize) -> DMatrix<f64> {
        self.returns.rows(start, end - start + 1).into_owned()
    }
}

impl CovEstimate {
    /// Validates symmetry (1e-10 relative) and positive semi-definiteness
    /// (smallest eigenvalue ≥ −1e-8·largest).
    pub fn new(matrix: DMatrix<f64>, kind: CovKind) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: matrix.ncols(),
            });
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite covariance entry".into()));
        }
        let scale = matrix.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (matrix[(i, j)] - matrix[(j, i)]).abs();
                if gap > 1e-10 * scale.max(f64::MIN_POSITIVE) {
                    return Err(Error::InvalidInput(format!(
                        "covariance not symmetric at ({i},{j}): gap {gap:e}"
                    )));
                }
            }
        }
        let eigenvalues = linalg::symmetric_eigenvalues_desc(&matrix)?;
        let top = eigenvalues[0];
        if eigenvalues[n - 1] < -1e-8 * top.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidInput(format!(
                "covariance not PSD: smallest eigenvalue {:e}",
                eigenvalues[n - 1]
            )));
        }
        Ok(Self {
            matrix,
            kind,
            eigenvalues,
        })
    }

    /// Exact synthetic covariance, e.g. for oracles and simulations.
    pub fn exact(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix, CovKind::ExactSynthetic)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> CovKind {
        self.kind
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues[0].max(0.0)
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().sum()
    }

    /// λ_max / λ_min; infinite when the smallest eigenvalue is ≤ 0.
    pub fn condition_number(&self) -> f64 {
        let min = self.eigenvalues[self.dim() - 1];
        if min <= 0.0 {
            f64::INFINITY
        } else {
            self.eigenvalues[0] / min
        }
    }

    /// Covariance action `w ↦ Σw`.
    pub fn action(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.matrix * w
    }
}

/// Load a price panel from CSV. Rows are returned sorted by date.
pub fn load_price_csv<P: AsRef<Path>>(path: P) -> Result<PricePanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;

    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers[0].to_lowercase() != "date" {
        return Err(Error::InvalidInput(
            "first CSV column must be `date`".into(),
        ));
    }
    let tickers: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    if tickers.is_empty() {
        return Err(Error::InvalidInput("no ticker columns in CSV".into()));
    }

    let mut rows: Vec<(NaiveDate, Vec<f64>)> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let file_row = idx + 2; // 1-based, header is row 1
        if record.len() != tickers.len() + 1 {
            return Err(Error::BadCell {
                row: file_row,
                column: record.len(),
                message: format!("expected {} fields, got {}", tickers.len() + 1, record.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| Error::BadCell {
            row: file_row,
            column: 1,
            message: format!("unparseable date `{}`: {e}", &record[0]),
        })?;
        let mut prices = Vec::with_capacity(tickers.len());
        for (j, field) in record.iter().skip(1).enumerate() {
            let column = j + 2;
            let value: f64 = field.parse().map_err(|_| Error::BadCell {
                row: file_row,
                column,
                message: format!("unparseable price `{field}`"),
            })?;
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::BadCell {
                    row: file_row,
                    column,
                    message: format!("price must be positive and finite, got `{field}`"),
                });
            }
            prices.push(value);
        }
        rows.push((date, prices));
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            actual: 0,
        });
    }

    rows.sort_by_key(|(date, _)| *date);
    let dates: Vec<NaiveDate> = rows.iter().map(|(d, _)| *d).collect();
    let n = tickers.len();
    let prices = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].1[j]);
    PricePanel::new(dates, tickers, prices)
}

/// Log returns between consecutive rows: `r[t][j] = ln(p[t+1][j] / p[t][j])`.
pub fn to_log_returns(panel: &PricePanel) -> Result<ReturnPanel> {
    let t_raw = panel.num_rows();
    if t_raw < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: t_raw,
        });
    }
    let n = panel.num_assets();
    let prices = panel.prices();
    let returns = DMatrix::from_fn(t_raw - 1, n, |t, j| {
        (prices[(t + 1, j)] / prices[(t, j)]).ln()
    });
    ReturnPanel::new(
        panel.dates()[1..].to_vec(),
        panel.tickers().to_vec(),
        returns,
    )
}

/// Rolling estimation windows with monthly rebalancing.
///
/// A rebalance happens on the first trading row of each calendar month that
/// has at least `window_length` rows of history before it; the window is the
/// `window_length` rows immediately preceding the rebalance row.
pub fn monthly_windows(panel: &ReturnPanel, window_length: usize) -> Result<Vec<EstimationWindow>> {
    if window_length < 2 {
        return Err(Error::InvalidInput(
            "window length must be at least 2".into(),
        ));
    }
    if panel.num_rows() <= window_length {
        return Err(Error::InsufficientData {
            required: window_length + 1,
            actual: panel.num_rows(),
        });
    }
    let dates = panel.dates();
    let mut windows = Vec::new();
    for row in 1..dates.len() {
        let month_start = dates[row].month() != dates[row - 1].month()
            || dates[row].year() != dates[row - 1].year();
        if month_start && row >= window_length {
            windows.push(EstimationWindow {
                start: row - window_length,
                end: row - 1,
                rebalance_row: row,
                rebalance_date: dates[row],
            });
        }
    }
    if windows.is_empty() {
        return Err(Error::InsufficientData {
            required: window_length + 1,
            actual: panel.num_rows(),
        });
    }
    Ok(windows)
}

/// Mean-centered sample covariance with divisor `T`:
/// `(1/T) Σ (Xᵢ − X̄)(Xᵢ − X̄)ᵀ`.
pub fn sample_covariance(data: &DMatrix<f64>) -> Result<CovEstimate> {
    let t = data.nrows();
    if t < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: t,
        });
    }
    let n = data.ncols();
    let mean = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = centered.transpose() * &centered;
    cov /= t as f64;
    // Symmetrize away round-off so the estimate passes its own invariant.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    CovEstimate::new(cov, CovKind::Sample)
}

/// Effective rank `Tr(Σ) / λ_max(Σ)`; always in `[1, N]` for nonzero PSD input.
pub fn effective_rank(cov: &CovEstimate) -> Result<f64> {
    let top = cov.spectral_norm();
    if top <= 0.0 {
        return Err(Error::InvalidInput(
            "effective rank undefined for the zero matrix".into(),
        ));
    }
    Ok(cov.trace() / top)
}
