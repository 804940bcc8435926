use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("free-flow regime unsupported: backward speed mu = {mu} m/s must be positive")]
    FreeFlow { mu: f64 },

    #[error("CFL condition violated: courant number {courant:.4} > 1")]
    Cfl { courant: f64 },

    #[error("numerical instability detected at t = {t} s")]
    Instability { t: f64 },

    #[error("kernel iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
