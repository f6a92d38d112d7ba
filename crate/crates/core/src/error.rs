use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unstable closed loop: spectral radius {rho:.6} >= 1 ({context})")]
    Instability { rho: f64, context: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate data moments: lambda_min(sigma_D) = {lambda_min:e} < 1e-10")]
    MomentDegeneracy { lambda_min: f64 },

    #[error("step size {eta} violates eta < 2/L = {limit}")]
    StepSize { eta: f64, limit: f64 },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("numerical inconsistency: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Unwraps nested stage wrappers down to the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Attaches a pipeline stage name to an error.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage, source: Box::new(e) })
    }
}
