//! Instance-level and cluster-level contrastive objectives.

pub mod cluster;
pub mod instance;

pub use cluster::{
    assignment_entropy, cluster_infonce_pair, cluster_loss, column_similarity, ClusterLossOptions,
    ClusterMatrices, ClusterPairTerms, Temperature,
};
pub use instance::{
    instance_loss, pair_loss, pairwise_mse, symmetrized_instance_loss, ExchangeMode,
    InstanceLossInputs, MirroredInputs,
};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be finite and > 0, got {0}")]
    Temperature(f64),
    #[error("{what}: batch size mismatch ({left} vs {right})")]
    BatchMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{what}: need at least {min}, got {got}")]
    TooSmall {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
