//! Crate-wide error type. Variants are grouped by the subsystem that raises
//! them; the CLI maps them onto distinct exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // engine
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value during backward at node {node} (op {op})")]
    NonFiniteBackward { node: usize, op: &'static str },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at perturbed point (param {param}, coord {coord})")]
    NonFinitePerturbedLoss { param: String, coord: usize },

    // tokenizer
    #[error("cannot tokenize non-finite value {0}")]
    NonFiniteValue(f64),
    #[error("bin index {bin} out of range (n_bins {n_bins})")]
    BinOutOfRange { bin: usize, n_bins: usize },
    #[error("token {token} outside expected vocab segment {segment}")]
    TokenOutsideSegment { token: u32, segment: &'static str },

    // env
    #[error("object placement failed after {0} attempts")]
    PlacementFailed(usize),
    #[error("no object of the target category present")]
    NoTargetObject,

    // data
    #[error("expert failure rate {0:.2} exceeds 0.5; environment config looks broken")]
    ExpertFailureRate(f64),
    #[error("need at least 2 episodes to split, got {0}")]
    TooFewEpisodes(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: file is truncated or corrupted")]
    ChecksumMismatch,

    // sequence
    #[error("sample start {t} out of range for episode of length {len} ({reason})")]
    TimeOutOfRange { t: usize, len: usize, reason: &'static str },
    #[error("malformed token structure at position {position}: {reason}")]
    MalformedTokens { position: usize, reason: String },

    // masks
    #[error("mask kind {kind} incompatible with {layout} layout")]
    MaskLayoutMismatch { kind: &'static str, layout: &'static str },

    // model
    #[error("token id {0} out of vocabulary (size {1})")]
    TokenOutOfVocab(u32, usize),
    #[error("sequence length {0} exceeds model maximum {1}")]
    SequenceTooLong(usize, usize),
    #[error("chunk size {k} exceeds configured maximum {k_max}")]
    ChunkTooLarge { k: usize, k_max: usize },
    #[error("discrete loss mask selects no positions")]
    EmptyLossMask,
    #[error("constrained decoding produced token {token} outside segment {segment}")]
    ConstraintViolation { token: u32, segment: &'static str },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    // training
    #[error("all sample kinds disabled by feature flags")]
    NoSampleKindEnabled,
    #[error("non-finite loss at step {step} (dis_action {dis_action}, img {img}, conti {conti})")]
    NonFiniteTrainingLoss { step: u64, dis_action: f64, img: f64, conti: f64 },

    // eval
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("configs differ in {0} flags, expected exactly one")]
    ConfigPairMismatch(usize),

    // config / cli
    #[error("config error: {0}")]
    Config(String),
}
