//! Crate-wide error type.
//!
//! Each variant corresponds to one failure class surfaced by the public API;
//! the CLI maps `Config`/`Parameter`/`Usage` to exit code 2 and everything
//! else to exit code 3.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; carries file context and (when known) a line.
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Recognized but unimplemented input feature (e.g. quadratic elements).
    #[error("unsupported feature: {0}")]
    Unsupported(String),

    /// Mesh or matrix failed a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An electrode could not be located in the mesh.
    #[error("electrode location error: electrode {index} at ({x:.6}, {y:.6}, {z:.6}) {reason}")]
    ElectrodeLocation {
        index: usize,
        x: f64,
        y: f64,
        z: f64,
        reason: String,
    },

    /// A scalar parameter is out of its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Pure-Neumann right-hand side violates the compatibility condition.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// A request exceeds a configured resource budget.
    #[error("resource error: {0}")]
    Resource(String),

    /// Factorization found the matrix singular (pivot index reported).
    #[error("singular system: {0}")]
    Singular(String),

    /// Iterative solver failed to reach the requested tolerance.
    #[error("convergence failure: {0}")]
    Convergence(String),

    /// API misuse (e.g. RMSE with a non-positive noise std).
    #[error("usage error: {0}")]
    Usage(String),

    /// Run configuration is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable kind tag, one token, used on stderr and in
    /// run manifests.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Unsupported(_) => "unsupported-feature",
            Error::Validation(_) => "validation",
            Error::ElectrodeLocation { .. } => "electrode-location",
            Error::Parameter(_) => "parameter",
            Error::Compatibility(_) => "compatibility",
            Error::Resource(_) => "resource",
            Error::Singular(_) => "singular-system",
            Error::Convergence(_) => "convergence",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    /// True for errors the CLI treats as configuration mistakes (exit 2).
    pub fn is_config_class(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parameter(_) | Error::Usage(_)
        )
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
