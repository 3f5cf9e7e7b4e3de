use thiserror::Error;

/// Errors raised while building designs, fitting, resampling or simulating.
#[derive(Error, Debug, Clone)]
pub enum AqmmError {
    #[error("input error: {0}")]
    Input(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("model specification error: {0}")]
    Spec(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("covariance parameterization error: {0}")]
    Parameterization(String),

    #[error("fixed-effects design is rank deficient; dependent columns: {}", columns.join(", "))]
    Estimability { columns: Vec<String> },

    #[error("mode solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best_w: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("bootstrap diagnostic: {0}")]
    Diagnostic(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, AqmmError>;

impl From<std::io::Error> for AqmmError {
    fn from(e: std::io::Error) -> Self {
        AqmmError::Io(e.to_string())
    }
}
