use thiserror::Error;

/// Errors raised by the estimation and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("layer {layer}: degenerate factor (scale {value:e} is not positive)")]
    DegenerateFactor { layer: usize, value: f64 },

    #[error("extraction produced a zero layer at {found} of {requested}")]
    RankDeficient { found: usize, requested: usize },

    #[error("nodewise regression for column {column} left residual variance {value:e}")]
    SingularColumn { column: usize, value: f64 },

    #[error("layer {layer}: trailing-layer core matrix is near singular (condition {cond:e})")]
    NearSingularCore { layer: usize, cond: f64 },

    #[error("layer {layer}: matrix A is near singular (condition {cond:e})")]
    SingularA { layer: usize, cond: f64 },

    #[error("projected latent covariance is near singular (condition {cond:e})")]
    SingularSigma11 { cond: f64 },

    #[error("layer {layer}, component {component}: variance estimate {value:e} is not positive")]
    NotPositive {
        layer: usize,
        component: usize,
        value: f64,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures caused by the numbers rather than by the caller or
    /// the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateFactor { .. }
                | Error::RankDeficient { .. }
                | Error::SingularColumn { .. }
                | Error::NearSingularCore { .. }
                | Error::SingularA { .. }
                | Error::SingularSigma11 { .. }
                | Error::NotPositive { .. }
        )
    }
}
