//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! grouped by failure family rather than by module so that callers (the CLI
//! in particular) can map them onto exit codes without string matching.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure while reading or writing an artifact file.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file or inline text artifact is malformed (bad magic, bad field,
    /// truncated payload, unparsable line, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Tensor or matrix dimensions do not line up for the requested
    /// operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument value is outside its documented domain.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// An operation was handed a tensor in the wrong numeric mode
    /// (e.g. quantizing an already fixed-point tensor).
    #[error("numeric mode error: {0}")]
    Numeric(String),

    /// The empirical tile-alignment search could not certify a unique
    /// offset; usually a symptom of corrupted transform matrices.
    #[error("alignment search failed: {0}")]
    Alignment(String),

    /// A sparse kernel exceeds the multiplier budget of the compute unit
    /// while hardware-conformance checking is enabled.
    #[error("hardware budget exceeded: {0}")]
    Budget(String),

    /// The chain scheduler cannot make progress with the configured buffer
    /// banks; `detail` names the blocked layers and the rows they wait on.
    #[error("chain deadlock at step {step}: {detail}")]
    Deadlock { step: u64, detail: String },

    /// A simulator or buffer configuration is inconsistent (e.g. a bank
    /// smaller than one feature row).
    #[error("config error: {0}")]
    Config(String),

    /// A layer graph violates a structural rule (cycle, dangling edge,
    /// shape disagreement across an edge, unknown node kind).
    #[error("graph error: {0}")]
    Graph(String),
}
