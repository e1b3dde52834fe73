//! Crate-wide error type. Every fallible public operation returns [`Result`];
//! shape and domain violations are reported explicitly rather than papered
//! over with broadcasting or silent clamping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor arguments whose shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// Argument values outside an operation's domain (empty input, scale <= 0, ...).
    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },

    /// Invalid experiment configuration; the message names the offending field.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed dataset file. `offset` is the byte position of the problem.
    #[error("dataset format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Malformed client/server exchange (duplicate upload, class out of range, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A NaN or infinity escaped a numeric path that must stay finite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A round with no present (client, class) prototype pairs.
    #[error("empty round: no prototypes present")]
    EmptyRound,

    /// Wrapper attaching the federation round index to a failure inside it.
    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    /// Round index attached via [`Error::in_round`], if any.
    pub fn round_index(&self) -> Option<usize> {
        match self {
            Error::Round { round, .. } => Some(*round),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
