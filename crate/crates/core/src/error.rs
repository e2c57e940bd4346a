use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature did not reach tolerance {tol:e} on [{lo}, {hi}] (estimate {estimate:e})")]
    Integration { lo: f64, hi: f64, tol: f64, estimate: f64 },
    #[error("time step {dt:e} exceeds the stability limit {limit:e}")]
    Cfl { dt: f64, limit: f64 },
    #[error("update produced a nonpositive density {value:e} in cell {cell}; reduce dt")]
    Stability { cell: usize, value: f64 },
    #[error("step size too large: {0}")]
    StepSize(String),
    #[error("density left the admissible band [{lo}, {hi}] at t = {t} (value {value})")]
    Bounds { t: f64, value: f64, lo: f64, hi: f64 },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("perturbed direction has vanishing norm {0:e}")]
    SingularDirection(f64),
    #[error("transport solver failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
