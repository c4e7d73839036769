use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input bytes or text (bad magic, bad header, bad row lengths).
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for axis of length {len}")]
    Index { index: usize, len: usize },

    #[error("no measurements within {tol} of b={b_target}")]
    EmptyShell { b_target: f64, tol: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite loss during training. `slice` is set when the failing job
    /// is one slice of a per-slice encode.
    #[error("training diverged at epoch {epoch}{}", slice.map(|s| format!(" (slice {s})")).unwrap_or_default())]
    Divergence { epoch: usize, slice: Option<usize> },

    #[error("value {value} cannot be represented in half precision")]
    QuantizationOverflow { value: f64 },

    #[error("inconsistent networks: {0}")]
    Consistency(String),

    #[error("corrupt container: {0}")]
    Corruption(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("image of {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("no voxels carry label {0}")]
    EmptySelection(String),

    #[error("degenerate gradient scheme: {0}")]
    DegenerateScheme(String),

    #[error("underdetermined fit: {directions} directions for {coefficients} coefficients")]
    Underdetermined {
        directions: usize,
        coefficients: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
