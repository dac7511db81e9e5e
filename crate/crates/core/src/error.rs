use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("time series is empty")]
    EmptySeries,
    #[error("segment length must be at least 1")]
    ZeroSegment,
    #[error("alphabet size {0} out of range (2..=26)")]
    AlphabetSize(usize),
    #[error("symbol {symbol} out of range for alphabet of size {t}")]
    SymbolOutOfRange { symbol: u8, t: usize },
    #[error("invalid symbol character {0:?}")]
    InvalidSymbolChar(char),
    #[error("distance undefined: {0}")]
    UndefinedDistance(&'static str),
    #[error("privacy budget must be a non-negative number, got {0}")]
    InvalidBudget(f64),
    #[error("perturbation domain of size {0} is degenerate (need at least 2)")]
    DegenerateDomain(usize),
    #[error("value {value} outside domain of size {domain}")]
    ValueOutOfDomain { value: usize, domain: usize },
    #[error("debiasing undefined: keep and flip probabilities are equal (epsilon = 0)")]
    DegenerateBudget,
    #[error("tallies sum to {sum}, expected {expected}")]
    CountMismatch { sum: u64, expected: u64 },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("duplicate candidate {0}")]
    DuplicateCandidate(String),
    #[error("frontier is empty after pruning")]
    EmptyFrontier,
    #[error("invalid population split: {0}")]
    InvalidSplit(String),
    #[error("invalid length range [{low}, {high}]")]
    InvalidLengthRange { low: usize, high: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence length {0} too short: at least 2 symbols are needed for pairs")]
    TooShortForPairs(usize),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("label vectors differ in length ({0} vs {1})")]
    LabelLengthMismatch(usize, usize),
    #[error("at least {needed} items required, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("candidate universe too large: {0}")]
    UniverseTooLarge(String),
    #[error("shape {0} has no label")]
    UnlabelledShape(usize),
    #[error("missing class label on instance {0}")]
    MissingLabel(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
