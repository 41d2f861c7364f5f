//! Global-minimum-variance (GMV) portfolio construction toolbox.
//!
//! The centerpiece is a projected-gradient-descent (PGD) optimizer for the
//! GMV and mean-variance objectives over the budget constraint `w·1 = 1`,
//! driven by an estimator of the covariance *action* `w ↦ Σw`. The action can
//! be estimated classically (sample covariance plug-in) or robustly via
//! bucketed means of pair-differenced observations combined through a
//! spectral-center solver, which keeps near-Gaussian accuracy under heavy
//! tails without ever forming an N×N covariance estimate.
//!
//! Around the optimizer the crate provides:
//!
//! - [`market_data`]: price/return panels, rolling estimation windows,
//!   sample covariance and effective rank;
//! - [`robust`]: the bucketed robust estimator of `Σw` and of the mean;
//! - [`pgd`]: projections, step-size and step-count rules, and the PGD loops;
//! - [`benchmarks`]: equally-weighted, sample GMV, long-only GMV and
//!   linear-shrinkage GMV reference strategies;
//! - [`backtest`]: rolling-window monthly-rebalanced evaluation with
//!   turnover, wealth, Sharpe/Calmar and weight-stability measures;
//! - [`simulation`]: seeded synthetic generators (Gaussian, heavy mixture,
//!   contamination) and risk-curve experiments.

pub mod backtest;
pub mod benchmarks;
pub mod linalg;
pub mod market_data;
pub mod pgd;
pub mod robust;
pub mod simulation;

pub use backtest::{BacktestConfig, BacktestResult};
pub use market_data::{CovEstimate, EstimationWindow, PricePanel, ReturnPanel};
pub use pgd::{PgdConfig, PgdMode, PgdTrace, WeightVector};
pub use robust::{ActionEstimator, BucketedSample, RobustConfig};

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// A cell of an input file could not be used; row/column are 1-based
    /// as a user would count them in the file.
    #[error("bad cell at row {row}, column {column}: {message}")]
    BadCell {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient data: need at least {required} observations, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("covariance is singular or near-singular (condition estimate {condition:.3e})")]
    SingularCovariance { condition: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("strategy `{0}` is not implemented")]
    NotImplemented(&'static str),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
