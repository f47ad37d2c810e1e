//! CLI error type and its mapping onto process exit codes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O failure. Every failure is emitted as a single JSON line on stderr
//! (`{"error": {"kind", "message", "exit_code"}}`) so wrapping scripts can
//! parse it without scraping prose.

use curlib::Error as LibError;

#[derive(Debug)]
pub enum CliError {
    /// Invalid or missing configuration: bad file syntax, bad flag value,
    /// or a required setting absent from both flags and file.
    Config(String),
    /// `--preset` named an architecture this build does not know.
    UnknownPreset { name: String },
    /// Two flags were given whose meanings contradict each other.
    ConflictingFlags(String),
    /// A failure surfacing from the library.
    Lib(LibError),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<LibError> for CliError {
    fn from(e: LibError) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::UnknownPreset { name } => write!(
                f,
                "unknown preset `{name}` (known: {})",
                crate::config::PRESET_NAMES.join(", ")
            ),
            CliError::ConflictingFlags(msg) => write!(f, "conflicting flags: {msg}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    /// Stable machine-readable discriminator for the error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::UnknownPreset { .. } => "unknown-preset",
            CliError::ConflictingFlags(_) => "conflicting-flags",
            CliError::Lib(e) => match e {
                LibError::InvalidMatrix(_) => "invalid-matrix",
                LibError::DimensionMismatch(_) => "dimension-mismatch",
                LibError::NumericalFailure(_) => "numerical-failure",
                LibError::SingularSubsystem { .. } => "singular-subsystem",
                LibError::MissingActivations(_) => "missing-activations",
                LibError::MissingSeed => "missing-seed",
                LibError::TokenOutOfRange { .. } => "token-out-of-range",
                LibError::ZeroVector => "zero-vector",
                LibError::EmptyDataset(_) => "empty-dataset",
                LibError::TooFewLayers { .. } => "too-few-layers",
                LibError::ArchitectureMismatch(_) => "architecture-mismatch",
                LibError::PlanLayerProtected(_) => "plan-layer-protected",
                LibError::IoFailure { .. } => "io-failure",
                LibError::CorruptManifest(_) => "corrupt-manifest",
                LibError::ShapeMismatch { .. } => "shape-mismatch",
                LibError::UnsupportedVersion(_) => "unsupported-version",
            },
        }
    }

    /// 2 for anything the user can fix in the invocation, 3 for numerical
    /// breakdowns, 4 for filesystem and artifact-format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::UnknownPreset { .. } | CliError::ConflictingFlags(_) => {
                2
            }
            CliError::Lib(e) => match e {
                LibError::InvalidMatrix(_)
                | LibError::NumericalFailure(_)
                | LibError::SingularSubsystem { .. }
                | LibError::ZeroVector => 3,
                LibError::IoFailure { .. }
                | LibError::CorruptManifest(_)
                | LibError::ShapeMismatch { .. }
                | LibError::UnsupportedVersion(_) => 4,
                _ => 2,
            },
        }
    }
}
