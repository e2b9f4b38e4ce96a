use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid config: {0}")]
    GridConfig(String),

    #[error("cannot resize {height}x{width}: {constraint}")]
    UnsatisfiableBudget {
        height: u32,
        width: u32,
        constraint: String,
    },

    #[error("{height}x{width} is not a multiple of cell size {cell}")]
    NotCellMultiple { height: u32, width: u32, cell: u32 },

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("vocabulary {path}:{line}: {message}")]
    VocabParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("word {word:?} is {width}px wide but a row holds at most {available}px")]
    WordTooWide {
        word: String,
        width: u32,
        available: u32,
    },

    #[error("layout needs more than {rows} rows")]
    LayoutOverflow { rows: u32 },

    #[error("invalid render spec: {0}")]
    RenderSpec(String),

    #[error("non-finite value in logits at position {position}")]
    NonFinite { position: usize },

    #[error("loss is not applicable: {0}")]
    LossInapplicable(String),

    #[error("invalid loss input: {0}")]
    LossInput(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("image is {actual:?} but grid expects {expected:?}")]
    ImageDims {
        actual: (u32, u32),
        expected: (u32, u32),
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("parameter file: {0}")]
    ParamFormat(String),

    #[error("empty frequency table")]
    EmptyFrequencyTable,

    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{key}: path {path} does not exist")]
    MissingPath { key: String, path: PathBuf },

    #[error("image decode: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation errors are caller mistakes (bad config, bad input files);
    /// everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::GridConfig(_)
                | Error::VocabParse { .. }
                | Error::Vocab(_)
                | Error::RenderSpec(_)
                | Error::ModelConfig(_)
                | Error::Record { .. }
                | Error::Config(_)
                | Error::MissingPath { .. }
                | Error::ParamFormat(_)
                | Error::EmptyFrequencyTable
        )
    }
}
