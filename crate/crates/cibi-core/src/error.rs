//! Crate-wide error type.
//!
//! Variants are deliberately fine-grained so callers (and the CLI exit-code
//! mapping) can distinguish configuration problems from data problems from
//! runtime failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field failed validation. Carries the offending field.
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A token is not part of the active vocabulary.
    #[error("unknown token `{token}`")]
    Vocabulary { token: String },

    /// A question does not start with any prefix from the structure table.
    #[error("question has no recognised structure prefix: `{question}`")]
    UnstructuredQuestion { question: String },

    /// A question is not of the shape the generator can produce, so the
    /// oracles cannot score it.
    #[error("question not generable under the model: {reason}")]
    MalformedQuestion { reason: String },

    /// Keyword selection had no scorable candidate.
    #[error("no keyword candidate in question `{question}`")]
    NoKeyword { question: String },

    /// Mutual information is undefined because a marginal count is zero.
    #[error("mutual information undefined for (`{token}`, `{answer}`): zero marginal")]
    UndefinedScore { token: String, answer: String },

    /// A synonym swap was requested for a token without group partners.
    #[error("token `{token}` has no synonym partner")]
    NoSynonym { token: String },

    /// A structure swap was requested for a prefix without equivalents.
    #[error("prefix `{prefix}` has no equivalent structure")]
    NoEquivalentStructure { prefix: String },

    /// The contrastive loss needs at least two in-batch items.
    #[error("contrastive batch of size {batch} has no negatives")]
    InsufficientNegatives { batch: usize },

    /// An embedding norm fell below the cosine-similarity guard.
    #[error("degenerate similarity: embedding norm below 1e-12")]
    DegenerateSimilarity,

    /// An operation that needs data received none.
    #[error("empty input: {what}")]
    EmptyInput { what: String },

    /// An answer index is outside the answer list.
    #[error("answer index {index} out of range for {count} answers")]
    AnswerOutOfRange { index: usize, count: usize },

    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch in {what}: expected {expected}, got {found}")]
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },

    /// A dataset or checkpoint line failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A file carries an unsupported schema version.
    #[error("schema version {found} not supported (expected {expected})")]
    SchemaVersion { found: String, expected: String },

    /// Artifacts produced under incompatible configurations were combined.
    #[error("incompatible artifacts: {message}")]
    Compatibility { message: String },

    /// Training produced a non-finite quantity and aborted.
    #[error("non-finite value in {what}: epoch {epoch}, batch {batch}")]
    NonFinite {
        what: String,
        epoch: usize,
        batch: usize,
    },

    /// Internal state error (missing tape node, optimizer mismatch, ...).
    #[error("state error: {message}")]
    State { message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn state(message: impl Into<String>) -> Self {
        Error::State {
            message: message.into(),
        }
    }
}
