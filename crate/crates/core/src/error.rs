use std::path::PathBuf;

use thiserror::Error;

use crate::guidance::GuidanceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("texture file {0} referenced by the mesh does not exist")]
    MissingTexture(PathBuf),

    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid deformation spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range for {len} {what}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error(
        "connected component {component} (containing vertex {vertex}, {size} vertices) has no constrained vertex"
    )]
    UnconstrainedComponent {
        component: usize,
        vertex: usize,
        size: usize,
    },

    #[error("Cholesky factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("transform for handle {handle} is singular (determinant {det:e})")]
    SingularTransform { handle: usize, det: f64 },

    #[error("rotation fit did not converge for cell {cell}")]
    SvdFailure { cell: usize },

    #[error("triangulation failed: {0}")]
    Triangulation(String),

    #[error(transparent)]
    Guidance(#[from] GuidanceError),

    #[error("optimization aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        trace: Vec<crate::deform::TraceRecord>,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure classes, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Numerical,
    Guidance,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Json { .. }
            | Error::Image { .. }
            | Error::MissingTexture(_)
            | Error::InvalidSpec(_)
            | Error::InvalidConfig(_) => ErrorCategory::Io,
            Error::Guidance(_) => ErrorCategory::Guidance,
            Error::Aborted { source, .. } => source.category(),
            _ => ErrorCategory::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
