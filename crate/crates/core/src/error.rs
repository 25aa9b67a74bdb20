use std::io;

use thiserror::Error;

/// Errors surfaced by every layer of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown symbol {symbol} (alphabet has {alphabet} symbols)")]
    UnknownSymbol { symbol: usize, alphabet: usize },

    #[error("unseen symbols: data uses {data} symbols but the model only embeds {model}")]
    UnseenSymbols { data: usize, model: usize },

    #[error("unknown task type {id} (model has {known} task types)")]
    UnknownTaskType { id: usize, known: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that stem from the numerics (loss blew up, NaN gradients).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    /// True for errors about input data rather than configuration or numerics.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Dataset { .. }
                | Error::UnknownSymbol { .. }
                | Error::UnseenSymbols { .. }
                | Error::UnknownTaskType { .. }
                | Error::InvalidGrid(_)
                | Error::Checkpoint(_)
                | Error::Generation(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
