use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate mesh: face {face} ({reason})")]
    DegenerateMesh { face: usize, reason: String },

    #[error("face {face} references vertex {index} but mesh has {n} vertices")]
    IndexOutOfRange { face: usize, index: usize, n: usize },

    #[error("mesh is disconnected: vertex {vertex} unreachable from {source_vertex}")]
    DisconnectedMesh { source_vertex: usize, vertex: usize },

    #[error("eigensolver did not converge: {0}")]
    ConvergenceFailure(String),

    #[error("requested order {k} exceeds available {max}")]
    KTooLarge { k: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("linear system is not positive definite")]
    SingularSystem,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("noise level {sigma} outside [{min}, {max}]")]
    SigmaOutOfRange { sigma: f64, min: f64, max: f64 },

    #[error("deformation exceeded edge distortion bound after {attempts} attempts (last {distortion:.3})")]
    DistortionBoundExceeded { attempts: usize, distortion: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// True for failures caused by numerics rather than malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ConvergenceFailure(_)
                | Error::SingularSystem
                | Error::NonFinite(_)
                | Error::DistortionBoundExceeded { .. }
        )
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "ParseError",
            Error::Io { .. } => "IoError",
            Error::DegenerateMesh { .. } => "DegenerateMesh",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::DisconnectedMesh { .. } => "DisconnectedMesh",
            Error::ConvergenceFailure(_) => "ConvergenceFailure",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::SingularSystem => "SingularSystem",
            Error::NonFinite(_) => "NonFinite",
            Error::EmptyDataset => "EmptyDataset",
            Error::SigmaOutOfRange { .. } => "SigmaOutOfRange",
            Error::DistortionBoundExceeded { .. } => "DistortionBoundExceeded",
            Error::Format(_) => "FormatError",
            Error::Version { .. } => "VersionError",
            Error::InvalidArgument(_) => "InvalidArgument",
        }
    }
}
