use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("schedule order: t_prev ({t_prev}) must be below t ({t})")]
    ScheduleOrder { t: usize, t_prev: usize },

    #[error("grid arrangement: {0}")]
    Arrangement(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("non-finite loss at step {step} (t={t}, seed={seed}, object={object})")]
    NonFiniteLoss {
        step: u64,
        t: usize,
        seed: u64,
        object: String,
    },

    #[error("object {object}: {source}")]
    Object {
        object: String,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Whether the error traces back to bad input (files, flags, configs)
    /// rather than a defect or numerical failure inside the pipeline.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Object { source, .. } => source.is_user_error(),
            Error::Consistency(_) | Error::Pipeline(_) | Error::NonFiniteLoss { .. } | Error::ScheduleOrder { .. } => {
                false
            }
            _ => true,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
