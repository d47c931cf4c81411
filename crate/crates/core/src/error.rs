use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CareError> = std::result::Result<T, E>;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum CareError {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// Malformed or inconsistent on-disk data, located by file and row.
    #[error("{}: {detail}", location(file, *row))]
    Data {
        file: PathBuf,
        row: Option<usize>,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown {modality} entity ids: {ids:?}")]
    UnknownEntities { modality: String, ids: Vec<u32> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(file: &std::path::Path, row: Option<usize>) -> String {
    match row {
        Some(r) => format!("{}:{}", file.display(), r),
        None => file.display().to_string(),
    }
}

impl CareError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CareError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        CareError::Contract(detail.into())
    }

    pub(crate) fn data(file: impl Into<PathBuf>, row: Option<usize>, detail: impl Into<String>) -> Self {
        CareError::Data {
            file: file.into(),
            row,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CareError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs or usage.
    pub fn is_numeric(&self) -> bool {
        matches!(self, CareError::NonFinite(_))
    }

    /// True for failures caused by bad input data or files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            CareError::Data { .. } | CareError::Io { .. } | CareError::UnknownEntities { .. }
        )
    }
}
