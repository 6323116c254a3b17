use thiserror::Error;

use crate::decomposition::DecompositionResult;

/// Errors raised by the lattice engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("scalar fixed point at step {step}, node {node} did not converge after {iterations} iterations")]
    Convergence {
        step: usize,
        node: usize,
        iterations: usize,
    },

    #[error("a single lattice step violates the contraction criterion (lambda={lambda}, mu={mu}, dt={dt})")]
    NonContraction { lambda: f64, mu: f64, dt: f64 },

    #[error("Picard iteration on steps [{from}, {to}] did not reach tolerance after {iterations} sweeps (last change {last_change:e})")]
    Picard {
        from: usize,
        to: usize,
        iterations: usize,
        last_change: f64,
    },

    #[error("penalization residual {} above target {target:e} after schedule exhausted", residuals.last().copied().unwrap_or(f64::NAN))]
    ToleranceNotReached {
        target: f64,
        residuals: Vec<f64>,
        result: Box<DecompositionResult>,
    },

    #[error("generator recovery failed on {} of {total} cells; first: {}", failures.len(), failures.first().map(String::as_str).unwrap_or(""))]
    Recovery { total: usize, failures: Vec<String> },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
