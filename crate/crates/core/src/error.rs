use std::path::PathBuf;

/// Errors produced by the corpus, model, training and evaluation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} is not valid UTF-8 text")]
    Decode { path: PathBuf },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stream already contains the thinking token; refusing to inject twice")]
    AlreadyInjected,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: &'static str },

    #[error("non-finite parameter in tensor {tensor} after update")]
    NonFiniteParam { tensor: &'static str },

    #[error("no scorable positions")]
    NoScorablePositions,

    #[error("checkpoint magic mismatch (not a model checkpoint)")]
    CheckpointMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint file is truncated or has trailing bytes")]
    CheckpointTruncated,

    #[error("stream file magic mismatch (not an encoded id stream)")]
    StreamMagic,

    #[error("id stream was encoded with a different vocabulary (hash {stream:#018x} vs {vocab:#018x})")]
    StreamVocabMismatch { stream: u64, vocab: u64 },

    #[error("training diverged at epoch {epoch}: validation NLL {nll}")]
    Diverged { epoch: usize, nll: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
