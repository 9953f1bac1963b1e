//! Crate-wide error type.

use crate::partition::NodeId;

pub type Result<T> = std::result::Result<T, HaptError>;

#[derive(Debug, thiserror::Error)]
pub enum HaptError {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("value {value} lies outside the domain ({lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },

    #[error("observation {value} in sample {sample} lies outside the domain ({lo}, {hi}]")]
    SampleOutOfDomain { value: f64, sample: usize, lo: f64, hi: f64 },

    #[error(
        "quadrature did not reach tolerance {requested:.3e} (achieved {achieved:.3e}){}",
        node.map(|n| format!(" at node ({}, {})", n.level, n.index)).unwrap_or_default()
    )]
    Quadrature { requested: f64, achieved: f64, node: Option<NodeId> },

    #[error("non-finite integrand in {context}")]
    NonFinite { context: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl HaptError {
    pub(crate) fn invalid(msg: String) -> Self {
        HaptError::Invalid(msg)
    }

    /// Attaches a node id to quadrature failures bubbling out of per-node work.
    pub(crate) fn at_node(self, id: NodeId) -> Self {
        match self {
            HaptError::Quadrature { requested, achieved, node: None } => {
                HaptError::Quadrature { requested, achieved, node: Some(id) }
            }
            other => other,
        }
    }
}
