//! Deterministic discrete-event simulation of a cluster: virtual nodes,
//! capped links, stream generators, and the experiment scenarios.

mod engine;
pub mod experiments;
pub mod network;
mod scenario;

pub use engine::{run_scenario, PipelineOutput, SimOutput};
pub use network::{Bandwidth, Transfer};
pub use scenario::{
    generate, Fault, LabelSpec, LinkOverride, LinkSpec, Nic, NodeSpec, Pattern, PipelineSpec, Routing, Scenario,
    StreamSpec, Topology,
};

use crate::broker::BrokerError;
use crate::metrics::MetricsError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario parse error at line {line}, column {column}: {reason}")]
    Parse { line: usize, column: usize, reason: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("node {node:?} cannot reach the leader")]
    Unreachable { node: String },
    #[error("stream {stream}: {reason}")]
    Generate { stream: String, reason: String },
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
