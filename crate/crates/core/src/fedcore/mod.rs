//! Federated learning: algorithm registry, local update rules, aggregation
//! and a round-based training engine over toy models.

pub mod algorithms;
pub mod checkpoint;
pub mod engine;
pub mod model;
pub mod registry;

pub use algorithms::{aggregate_fedavg, aggregate_fednova, LocalSettings};
pub use engine::{
    centralized_sgd, run_federated_training, Algorithm, RoundLog, Shard, TrainingConfig, TrainingEvent,
    TrainingOutcome,
};
pub use model::{ModelSpec, Sample};
pub use registry::{AlgorithmDescriptor, Family, Registry, Selection};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FedError {
    #[error("no parameter vectors to aggregate")]
    Empty,
    #[error("parameter vectors differ in length")]
    LengthMismatch,
    #[error("total sample count is zero")]
    ZeroTotal,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("algorithm {0:?} is not in the registry")]
    UnknownAlgorithm(String),
    #[error("algorithm {0:?} has no executable implementation")]
    NotExecutable(String),
    #[error("every client shard is empty")]
    NoData,
}
