use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("layer {index} ({kind}): {message}")]
    Shape {
        index: usize,
        kind: &'static str,
        message: String,
    },

    #[error("invalid network spec: {0}")]
    Network(String),

    #[error("backward called before forward")]
    TapeState,

    #[error("variant {variant} requires {modality}")]
    MissingModality {
        variant: &'static str,
        modality: &'static str,
    },

    #[error("variant {variant} does not support {what}")]
    UnsupportedVariant { variant: &'static str, what: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stratification: {0}")]
    Stratification(String),

    #[error("bootstrap unstable: metric undefined on {undefined} of {total} resamples")]
    BootstrapUnstable { undefined: usize, total: usize },

    #[error("encoding: feature `{feature}`: {message}")]
    Encoding { feature: String, message: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
