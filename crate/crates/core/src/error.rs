use std::io;

/// Errors produced by the exemplar-partitioning engine.
///
/// Variants are named after the failure, so CLI front-ends can report them
/// verbatim on stderr.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate activation: distance to the centre is below {eps:e}")]
    DegenerateActivation { eps: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("trailing bytes after the declared payload")]
    TrailingBytes,

    #[error("record count mismatch: header declares {declared}, wrote {written}")]
    CountMismatch { declared: u64, written: u64 },

    #[error("stream count is unknown (header count = 0)")]
    UnknownCount,

    #[error("invalid provenance record: {0}")]
    InvalidProvenance(String),

    #[error("empty input")]
    EmptyInput,

    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("percentile must lie in (0, 100), got {0}")]
    InvalidPercentile(f64),

    #[error("insufficient calibration sample: {usable} usable vectors, need at least 2")]
    InsufficientSample { usable: usize },

    #[error("region direction sum cancels to zero (region {region})")]
    ZeroSum { region: u32 },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("dictionary has no regions")]
    EmptyDictionary,

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("degenerate variance: a rank vector is constant")]
    DegenerateVariance,

    #[error("need at least {needed} dictionaries, got {got}")]
    TooFewDictionaries { needed: usize, got: usize },

    #[error("incompatible dictionaries: {0}")]
    IncompatibleDictionaries(String),

    #[error("no eligible profiles on the {0} side")]
    EmptyProfiles(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
