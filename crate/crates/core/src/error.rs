use thiserror::Error;

/// Errors raised by the model, solvers, estimators and simulation harness.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A parameter set violates a domain invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Vector or matrix sizes disagree.
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An iterative solver ran out of iterations.
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// The second-order condition `R + B'PB > 0` failed.
    #[error("second-order condition failed at step {step}: R + B'PB = {value:e}")]
    Indefinite { step: usize, value: f64 },

    /// A closed-loop matrix has spectral radius of at least one.
    #[error("closed loop is not stable (spectral radius {spectral_radius})")]
    Unstable { spectral_radius: f64 },

    /// The feasible parameter set is empty.
    #[error("infeasible parameter domain: {0}")]
    Infeasible(String),

    /// A policy failed while recomputing its gain for a candidate estimate.
    #[error("policy {policy} failed at period {period} for theta {theta:?}: {source}")]
    Policy {
        policy: String,
        period: usize,
        theta: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    /// A simulated path failed.
    #[error("path {path} ({policy}) failed: {source}")]
    Path {
        path: usize,
        policy: String,
        #[source]
        source: Box<Error>,
    },

    /// Input to a statistics routine was too small or degenerate.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;
