use thiserror::Error;

/// Errors raised anywhere in the WG pipeline.
///
/// The split between [`WgError::is_validation`] and numerical failures drives
/// the CLI exit codes.
#[derive(Debug, Error)]
pub enum WgError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unsupported quadrature exactness degree {degree} (max {max})")]
    UnsupportedQuadrature { degree: usize, max: usize },

    #[error("factorization failed in {stage}: {detail}")]
    Factorization { stage: &'static str, detail: String },

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("residual {residual:.3e} exceeds tolerance {tolerance:.3e} for eigenpair {index}")]
    Residual {
        index: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("vector has no boundary content (b_w(u,u) = 0)")]
    NoBoundaryContent,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<WgError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl WgError {
    pub fn param(msg: impl Into<String>) -> Self {
        WgError::InvalidParameter(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        WgError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for user-input problems (bad flags, bad indices), false for
    /// numerical or I/O failures.
    pub fn is_validation(&self) -> bool {
        match self {
            WgError::InvalidParameter(_)
            | WgError::InvalidMesh(_)
            | WgError::IndexOutOfRange { .. }
            | WgError::UnsupportedQuadrature { .. }
            | WgError::NoBoundaryContent => true,
            WgError::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = WgError> = std::result::Result<T, E>;

pub(crate) fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index < len {
        Ok(())
    } else {
        Err(WgError::IndexOutOfRange { what, index, len })
    }
}
