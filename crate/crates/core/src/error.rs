use crate::geogrid::CellKey;

/// Errors produced anywhere in the place-recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("cell {0} is not present in the label map")]
    UnknownCell(CellKey),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: u32 },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("every logit is masked")]
    AllMasked,

    #[error("target label {0} is inside the mask")]
    TargetMasked(u32),

    #[error("vector norm {0:e} is too small to normalize")]
    NearZeroNorm(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no database entries for map {0}")]
    NoEntriesForMap(u32),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Whether the error stems from bad user input or configuration rather
    /// than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Empty(_)
                | Error::UnknownCell(_)
                | Error::LabelOutOfRange { .. }
                | Error::TargetMasked(_)
                | Error::Format { .. }
                | Error::Json(_)
        )
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
