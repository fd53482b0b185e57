use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum VpaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("archive format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training aborted at epoch {epoch}, term `{term}`: {message}")]
    Training {
        epoch: usize,
        term: String,
        message: String,
    },

    #[error("encoding failed: {0}")]
    Encoding(String),

    #[error("planning failed after {expansions} expansions (best heuristic {best_h:.4})")]
    Planning {
        expansions: usize,
        best_h: f64,
        /// Best partial path found before the budget ran out.
        partial: Vec<Vec<f64>>,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VpaError>;

impl VpaError {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        VpaError::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
