use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diverged at step {step} (t = {time:.4} s)")]
    Divergence { step: usize, time: f64 },

    #[error("measurement buffer is empty")]
    EmptyBuffer,

    #[error("measurement at t = {time:.4} s lies outside the input trajectory span [{start:.4}, {end:.4}]")]
    OutOfSpan { time: f64, start: f64, end: f64 },

    #[error("trajectory grid mismatch: {0}")]
    GridMismatch(String),

    #[error("Riccati recursion produced non-finite values at step {0}")]
    RiccatiBlowup(usize),

    #[error("task optimization did not converge in {iterations} iterations (|DJ.zeta| = {slope:.3e})")]
    NotConverged {
        iterations: usize,
        slope: f64,
        last: Box<crate::trajopt::TaskTrajectory>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
