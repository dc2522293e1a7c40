use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range for `{name}`: {detail}")]
    InvalidRange { name: &'static str, detail: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown location {location} (only {count} locations exist)")]
    UnknownLocation { location: usize, count: usize },

    #[error("location {0} was already measured in this episode")]
    RepeatMeasurement(usize),

    #[error("no candidate locations remain")]
    ExhaustedCandidates,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("budget {budget} exceeds the {steps} reverse diffusion steps")]
    BudgetExceedsSteps { budget: usize, steps: usize },

    #[error("instance too large for brute-force oracle: {0}")]
    SizeLimit(String),

    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: &std::path::Path, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::ExhaustedCandidates | Error::SizeLimit(_))
    }
}

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
