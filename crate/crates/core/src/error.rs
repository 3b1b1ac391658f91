use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown word id {0}")]
    UnknownWordId(usize),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("auxiliary word {word:?} repeats the attribute of \"{attribute} {object}\"; regenerate it")]
    AuxRepeatsAttribute { attribute: String, object: String, word: String },

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("invalid target distribution: {0}")]
    InvalidTargets(String),

    #[error("no auxiliary attributes cached for \"{0}\"")]
    CacheMiss(String),

    #[error("could not parse {expected} items from transcript ({found} found)")]
    Parse { expected: usize, found: usize, transcript: String },

    #[error("text provider failed: {0}")]
    Provider(String),

    #[error("auxiliary generation for \"{composition}\" failed after {attempts} attempts: {last_error}")]
    Generation { composition: String, attempts: usize, last_error: String },

    #[error("dataset schema error: {0}")]
    Schema(String),

    #[error("synthetic dataset spec error: {0}")]
    SyntheticSpec(String),

    #[error("non-finite loss in epoch {epoch} (batch images: {image_ids:?})")]
    NonFiniteLoss { epoch: usize, image_ids: Vec<String> },

    #[error("candidate set is empty")]
    EmptyCandidates,
}
