//! Streaming inference over multiple timestamped streams: header-only routing
//! through a leader broker, temporal joins, rate and freshness SLOs, and a
//! deterministic simulator for evaluating placements.

pub mod broker;
pub mod join;
pub mod metrics;
pub mod net;
pub mod replay;
pub mod runtime;
pub mod sim;
pub mod store;
pub mod time;
pub mod types;
pub mod wire;

pub use time::{Bound, Duration, Timestamp};
pub use types::{
    compute_skew, is_fresh, Body, ContractError, Header, ItemRef, JoinMode, JoinTuple, NodeAddr, Payload,
    PayloadLocator, Slot, StreamId, TimeBasis, TopicConfig, TopicId,
};
