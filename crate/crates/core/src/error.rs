//! Error type shared by the core algorithms.

use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core pipeline stages.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("codes not in label space: {0:?}")]
    UnknownCodes(Vec<String>),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("document id {0:?} has no split assignment")]
    UnassignedDoc(String),
    #[error("split assignment references unknown document id {0:?}")]
    UnknownSplitDoc(String),
    #[error("max_length {max_length} is not a positive multiple of chunk_size {chunk_size}")]
    BadChunkConfig { chunk_size: usize, max_length: usize },
    #[error("stride {stride} must be in 1..={chunk_size}")]
    BadStride { stride: usize, chunk_size: usize },
    #[error("label space is empty")]
    EmptyLabelSpace,
    #[error("label {0:?} has an empty description")]
    EmptyDescription(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("synthetic corpus needs n_labels * signature_size <= vocab_size ({needed} > {vocab_size})")]
    SignatureOverflow { needed: usize, vocab_size: usize },
    #[error("synthetic corpus arguments must all be >= 1")]
    BadSyntheticArgs,
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenIdOutOfRange { id: usize, vocab_size: usize },
    #[error("zero-norm embedding vector (index {0})")]
    ZeroNormEmbedding(usize),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dissimilarity matrix must be square and symmetric")]
    BadDissimilarityMatrix,
    #[error("exact solver limited to n <= {cap} candidates, got {n}; use the greedy solver")]
    ExactSolverCap { n: usize, cap: usize },
    #[error("m must be >= 1")]
    BadSubsetSize,
    #[error("no attendable content: every position in every chunk is padding")]
    NoAttendableContent,
    #[error("all attention branches disabled")]
    AllBranchesDisabled,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("threshold grid is empty or has values outside (0, 1)")]
    BadThresholdGrid,
    #[error("p@n requires 1 <= n <= number of labels, got n={n} with {labels} labels")]
    BadPrecisionAtN { n: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("knowledge base has no entries for code {0:?}")]
    MissingKnowledge(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;
