//! Crate-wide error type.
//!
//! Every fallible operation returns `Result<_, Error>`. Variants are grouped
//! roughly by subsystem; the CLI maps them onto process exit codes (config /
//! numerical / I/O).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix was constructed from, or found to contain, non-finite entries.
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// Shapes of two operands (or an index set and a matrix) do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An iterative numerical routine failed to converge within its cap.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The interpolation subsystem solved during greedy index selection was
    /// singular beyond tolerance.
    #[error("singular interpolation subsystem at step {step}: |pivot| = {pivot:.3e}")]
    SingularSubsystem { step: usize, pivot: f64 },

    /// An activation-aware strategy was requested without calibration norms.
    #[error("strategy {0} requires activation norms but none were supplied")]
    MissingActivations(String),

    /// The random strategy was requested without a seed.
    #[error("random index selection requires a seed")]
    MissingSeed,

    /// A token id fell outside the model vocabulary.
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    /// Angular distance is undefined for a zero vector.
    #[error("angular distance undefined for zero vector")]
    ZeroVector,

    /// A dataset-consuming operation received no examples.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Layer ranking needs at least three layers (first and last are protected).
    #[error("too few layers: {got} (need at least {need})")]
    TooFewLayers { got: usize, need: usize },

    /// Two models that must share a configuration do not.
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    /// A compression plan touched the protected first or last layer.
    #[error("plan selects protected layer {0} (first and last layers are never compressed)")]
    PlanLayerProtected(usize),

    /// Filesystem-level failure while persisting or loading artifacts.
    #[error("i/o failure: {context}: {source}")]
    IoFailure {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// The manifest is unreadable or internally inconsistent.
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    /// A tensor file's byte length disagrees with the shape in the manifest.
    #[error("shape mismatch for {name}: expected {expected} bytes, found {found}")]
    ShapeMismatch {
        name: String,
        expected: u64,
        found: u64,
    },

    /// The manifest declares a format version this build does not understand.
    #[error("unsupported manifest format version {0} (this build reads version 1)")]
    UnsupportedVersion(u64),
}

impl Error {
    /// Convenience constructor for I/O failures with a path-ish context string.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::IoFailure {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
