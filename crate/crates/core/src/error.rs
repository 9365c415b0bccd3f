use thiserror::Error;

use crate::model::{SymbolId, SymbolType};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("symbol {0} is outside the model (|Q| = {1})")]
    UnknownSymbol(u32, usize),

    #[error("symbol {symbol} has type {ty}, expected {expected}")]
    WrongType {
        symbol: SymbolId,
        ty: SymbolType,
        expected: &'static str,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("concentration parameters must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("letter {0:?} is not in the alphabet")]
    UnknownLetter(char),

    #[error("no parse found for {text:?} after {restarts} restart(s)")]
    Unparseable { text: String, restarts: usize },

    #[error("count underflow in {context} at cell {cell}")]
    CountUnderflow { context: String, cell: usize },

    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),

    #[error("schedule inconsistency: {0}")]
    Schedule(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
