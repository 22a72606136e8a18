use std::path::PathBuf;

use crate::topology::NodeId;

/// Errors raised across the simulator, ledger, and learner.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("node {0} is unknown or not active")]
    NodeNotActive(NodeId),
    #[error("degenerate link: distance {0} m must be positive")]
    DegenerateLink(f64),
    #[error("zero rate on link {from} -> {to}")]
    ZeroRate { from: NodeId, to: NodeId },
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error("demand conservation violated at step {step}: {detail}")]
    ConservationViolation { step: u64, detail: String },
    #[error("degenerate hop delay {0}")]
    DegenerateDelay(f64),
    #[error("degenerate geometry: both distances are zero")]
    DegenerateGeometry,
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("training diverged at episode {episode}, step {step}: {detail}")]
    DivergenceDetected { episode: u64, step: u64, detail: String },
    #[error("no feasible routing within horizon {0}")]
    Infeasible(usize),
    #[error("instance too large for exact search: {0}")]
    InstanceTooLarge(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed record: {0}")]
    Decode(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
