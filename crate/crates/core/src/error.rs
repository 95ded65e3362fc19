//! Error type shared by all numerical modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A point fell outside the open box of valid chart coordinates.
    #[error("point {point:?} is outside the chart bounds")]
    OutsideChart { point: Vec<f64> },

    /// The metric failed its positive-definiteness / conditioning check.
    #[error("metric is singular or badly conditioned at {point:?} (min eigenvalue {min_eig:e})")]
    SingularMetric { point: Vec<f64>, min_eig: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A geodesic (or transported frame) left the chart before the requested time.
    #[error("trajectory escaped the chart bounds at t = {exit_time}")]
    Escape { exit_time: f64 },

    #[error("{what} failed to converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A closed-form evaluation received parameters outside its validity region.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced at step {step}: {what}")]
    NonFinite { what: &'static str, step: usize },

    /// The PDE time stepping produced a non-finite value.
    #[error("solution blew up at time level {time_index}, node {node_index}")]
    BlowUp {
        time_index: usize,
        node_index: usize,
    },

    /// A quadrature did not stabilise under refinement.
    #[error("quadrature accuracy failure: relative change {change:e} above {tolerance:e}")]
    Accuracy { change: f64, tolerance: f64 },

    #[error("not enough samples: need at least {needed}, got {got}")]
    Statistics { needed: usize, got: usize },

    /// Too many Monte Carlo paths were censored at the horizon.
    #[error("censoring probability {censored:e} exceeds the allowed {allowed:e}")]
    Horizon { censored: f64, allowed: f64 },

    #[error("regression basis is rank-deficient (rank {rank} of {cols} columns)")]
    Basis { rank: usize, cols: usize },

    #[error("metric must be positive: g({x}) = {value}")]
    NonPositiveMetric { x: f64, value: f64 },

    /// A path left the PDE working window during interpolation.
    #[error("point {point:?} is outside the solved space-time window")]
    Extrapolation { point: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;
