use std::fmt;

use thiserror::Error;

use crate::trajectory::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Tree statistics attached to a planning failure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlannerStats {
    pub iterations: usize,
    pub nodes: usize,
    pub rewires: usize,
    pub collision_rejections: usize,
    /// Smallest value metric to the goal seen over all nodes.
    pub best_goal_metric: f64,
}

impl fmt::Display for PlannerStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} iterations, {} nodes, {} rewires, {} collision rejections, best goal metric {:.4e}",
            self.iterations, self.nodes, self.rewires, self.collision_rejections, self.best_goal_metric
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("singular Riccati inner matrix at step {step}")]
    SingularRiccati { step: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("planning failed: {0}")]
    PlanningFailed(PlannerStats),

    #[error("closed-loop matrix is not stable (spectral radius {0:.6})")]
    Unstable(f64),

    #[error("RPI iteration exceeded {limit} vertices in one block; use a larger epsilon")]
    VertexExplosion { limit: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("constraint tightening produced an empty set: {0}")]
    InfeasibleTightening(String),

    #[error("quadratic program infeasible; violated constraints {violated:?}")]
    InfeasibleQp { violated: Vec<usize> },

    #[error("tracking error left the tube (support excess {excess:.3e})")]
    TubeViolation { excess: f64 },

    #[error("information matrix is singular even after regularization")]
    SingularInformation,

    #[error("excitation design failed: {reason}")]
    ExcitationFailed {
        reason: String,
        best: Box<Trajectory>,
    },

    #[error("unidentifiable parameters: {}", .0.join(", "))]
    Unidentifiable(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("segment {segment}: {source}")]
    Segment { segment: u8, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_segment(self, segment: u8) -> Self {
        Error::Segment {
            segment,
            source: Box::new(self),
        }
    }

    /// True for failures of an algorithm on a valid problem (as opposed to bad input).
    pub fn is_algorithmic(&self) -> bool {
        match self {
            Error::Segment { source, .. } => source.is_algorithmic(),
            Error::PlanningFailed(_)
            | Error::InfeasibleQp { .. }
            | Error::TubeViolation { .. }
            | Error::ExcitationFailed { .. }
            | Error::Unidentifiable(_)
            | Error::SingularInformation
            | Error::SingularRiccati { .. }
            | Error::VertexExplosion { .. }
            | Error::InfeasibleTightening(_)
            | Error::Unstable(_) => true,
            _ => false,
        }
    }
}
