use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulation and analysis chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("no peak: {0}")]
    NoPeak(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bootstrap aborted: {failed} of {total} resamples failed (last error: {last})")]
    Bootstrap {
        failed: usize,
        total: usize,
        last: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for the "no peak" family, including a fit whose amplitude
    /// came out non-positive.
    pub fn is_no_peak(&self) -> bool {
        match self {
            Error::NoPeak(_) => true,
            Error::Stage { source, .. } => source.is_no_peak(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
