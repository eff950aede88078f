//! Domain types shared by every module, plus the skew and freshness arithmetic.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::time::{Bound, Duration, Timestamp};

/// Opaque payload bytes. Cheap to clone.
pub type Payload = Bytes;

/// Default upper bound on a single payload.
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024 * 1024;

/// Maximum encoded length of a stream or topic name.
pub const MAX_NAME_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContractError {
    #[error("cannot compute skew over an empty list of timestamps")]
    EmptyTimestamps,
    #[error("invalid name {0:?}: must be 1..=255 bytes of UTF-8")]
    InvalidName(String),
    #[error("invalid topic config for {topic}: {reason}")]
    InvalidConfig { topic: String, reason: String },
    #[error("invalid address {0:?}: expected host:port")]
    InvalidAddress(String),
}

macro_rules! name_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(name: impl Into<String>) -> Result<Self, ContractError> {
                let name = name.into();
                if name.is_empty() || name.len() > MAX_NAME_LEN {
                    return Err(ContractError::InvalidName(name));
                }
                Ok($name(name))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = ContractError;

            fn try_from(value: String) -> Result<Self, Self::Error> {
                $name::new(value)
            }
        }

        impl TryFrom<&str> for $name {
            type Error = ContractError;

            fn try_from(value: &str) -> Result<Self, Self::Error> {
                $name::new(value)
            }
        }

        impl From<$name> for String {
            fn from(value: $name) -> String {
                value.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

name_type!(
    /// Name of a stream; unique within its topic.
    StreamId
);
name_type!(
    /// Name of a topic; unique network-wide.
    TopicId
);

/// Network address of a node: host plus port.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeAddr {
    pub host: String,
    pub port: u16,
}

impl NodeAddr {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        NodeAddr { host: host.into(), port }
    }
}

impl fmt::Display for NodeAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for NodeAddr {
    type Err = ContractError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| ContractError::InvalidAddress(s.to_string()))?;
        let port = port
            .parse()
            .map_err(|_| ContractError::InvalidAddress(s.to_string()))?;
        if host.is_empty() {
            return Err(ContractError::InvalidAddress(s.to_string()));
        }
        Ok(NodeAddr::new(host, port))
    }
}

impl TryFrom<String> for NodeAddr {
    type Error = ContractError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<NodeAddr> for String {
    fn from(value: NodeAddr) -> String {
        value.to_string()
    }
}

/// Claim check for a payload held in a source node's log.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PayloadLocator {
    pub node: NodeAddr,
    pub segment: u64,
    pub offset: u64,
    pub length: u32,
}

/// Either a locator (lazy routing) or the payload itself (eager routing).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    Lazy(PayloadLocator),
    Inline(Payload),
}

/// The routable unit: identity, timestamps and a body.
///
/// `seq` is the source's per-stream sequence number; together with topic and
/// stream it identifies one item for metrics and replay.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub topic: TopicId,
    pub stream: StreamId,
    pub seq: u64,
    pub event_ts: Timestamp,
    pub publish_ts: Timestamp,
    pub body: Body,
}

impl Header {
    pub fn new(topic: TopicId, stream: StreamId, seq: u64, event_ts: Timestamp, body: Body) -> Self {
        Header {
            topic,
            stream,
            seq,
            event_ts,
            publish_ts: event_ts,
            body,
        }
    }

    /// The timestamp the join and skew logic should use under `basis`.
    pub fn basis_ts(&self, basis: TimeBasis) -> Timestamp {
        match basis {
            TimeBasis::EventTime => self.event_ts,
            TimeBasis::ProcessingTime => self.publish_ts,
        }
    }

    /// Length of the payload this header refers to or carries.
    pub fn payload_len(&self) -> usize {
        match &self.body {
            Body::Lazy(loc) => loc.length as usize,
            Body::Inline(p) => p.len(),
        }
    }

    pub fn is_lazy(&self) -> bool {
        matches!(self.body, Body::Lazy(_))
    }

    pub fn item_ref(&self) -> ItemRef {
        ItemRef {
            stream: self.stream.clone(),
            seq: self.seq,
            event_ts: self.event_ts,
        }
    }
}

/// Identifies one item within a topic.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemRef {
    pub stream: StreamId,
    pub seq: u64,
    pub event_ts: Timestamp,
}

impl fmt::Display for ItemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.stream, self.seq)
    }
}

/// Which timestamp drives joins and skew: the source's event time or the broker's publish time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBasis {
    #[default]
    EventTime,
    ProcessingTime,
}

/// Join strategy of a topic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JoinMode {
    TimeTriggered { window: Duration },
    DataTriggered,
    Hybrid { min_interval: Duration },
}

/// A topic's streams and timing SLOs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub topic: TopicId,
    /// Slot order of every tuple emitted for this topic.
    pub streams: Vec<StreamId>,
    pub join: JoinMode,
    #[serde(default)]
    pub max_skew: Bound,
    #[serde(default)]
    pub freshness_threshold: Bound,
    #[serde(default)]
    pub target_prediction_frequency: Bound,
    #[serde(default)]
    pub time_basis: TimeBasis,
}

impl TopicConfig {
    /// A data-triggered topic with no SLOs.
    pub fn new(topic: TopicId, streams: Vec<StreamId>) -> Self {
        TopicConfig {
            topic,
            streams,
            join: JoinMode::DataTriggered,
            max_skew: Bound::Unlimited,
            freshness_threshold: Bound::Unlimited,
            target_prediction_frequency: Bound::Unlimited,
            time_basis: TimeBasis::EventTime,
        }
    }

    pub fn with_join(mut self, join: JoinMode) -> Self {
        self.join = join;
        self
    }

    pub fn with_max_skew(mut self, max_skew: Bound) -> Self {
        self.max_skew = max_skew;
        self
    }

    pub fn with_freshness(mut self, threshold: Bound) -> Self {
        self.freshness_threshold = threshold;
        self
    }

    pub fn with_time_basis(mut self, basis: TimeBasis) -> Self {
        self.time_basis = basis;
        self
    }

    pub fn stream_index(&self, stream: &StreamId) -> Option<usize> {
        self.streams.iter().position(|s| s == stream)
    }

    pub fn validate(&self) -> Result<(), ContractError> {
        let invalid = |reason: &str| ContractError::InvalidConfig {
            topic: self.topic.to_string(),
            reason: reason.to_string(),
        };
        if self.streams.is_empty() {
            return Err(invalid("streams must be nonempty"));
        }
        let mut seen = HashSet::new();
        for s in &self.streams {
            if !seen.insert(s) {
                return Err(invalid(&format!("duplicate stream {s}")));
            }
        }
        match self.join {
            JoinMode::TimeTriggered { window } if window <= Duration::ZERO => {
                return Err(invalid("window must be positive"))
            }
            JoinMode::Hybrid { min_interval } if min_interval <= Duration::ZERO => {
                return Err(invalid("min_interval must be positive"))
            }
            _ => {}
        }
        for (name, bound) in [
            ("max_skew", self.max_skew),
            ("freshness_threshold", self.freshness_threshold),
            ("target_prediction_frequency", self.target_prediction_frequency),
        ] {
            if matches!(bound, Bound::Limited(d) if d.is_negative()) {
                return Err(invalid(&format!("{name} must not be negative")));
            }
        }
        Ok(())
    }
}

/// One position of a join tuple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub header: Header,
    /// Filled in by the runtime once the payload is fetched or read inline.
    pub payload: Option<Payload>,
    /// Set when fail-soft handling substituted an earlier payload.
    pub substituted: bool,
}

impl Slot {
    pub fn pending(header: Header) -> Self {
        Slot {
            header,
            payload: None,
            substituted: false,
        }
    }
}

/// Latest known item of every stream of a topic, in topic stream order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinTuple {
    pub topic: TopicId,
    pub slots: Vec<Slot>,
    pub trigger_stream: StreamId,
    pub trigger_ts: Timestamp,
    pub emit_ts: Timestamp,
    /// Items this emission reacts to: every item that reached the joiner since
    /// the previous emission and was considered for this one.
    pub covers: Vec<ItemRef>,
}

impl JoinTuple {
    pub fn slot_refs(&self) -> Vec<ItemRef> {
        self.slots.iter().map(|s| s.header.item_ref()).collect()
    }

    pub fn slot_timestamps(&self, basis: TimeBasis) -> Vec<Timestamp> {
        self.slots.iter().map(|s| s.header.basis_ts(basis)).collect()
    }

    pub fn trigger_ref(&self) -> Option<ItemRef> {
        self.slots
            .iter()
            .find(|s| s.header.stream == self.trigger_stream)
            .map(|s| s.header.item_ref())
    }
}

/// Overall time skew of a set of timestamps: `max - min`.
pub fn compute_skew(timestamps: &[Timestamp]) -> Result<Duration, ContractError> {
    let max = timestamps.iter().max().ok_or(ContractError::EmptyTimestamps)?;
    let min = timestamps.iter().min().ok_or(ContractError::EmptyTimestamps)?;
    Ok(*max - *min)
}

/// Whether `header` is within `threshold` of `now`. Headers stamped in the
/// future relative to `now` have age zero.
pub fn is_fresh(header: &Header, now: Timestamp, threshold: Bound) -> bool {
    threshold.admits(now.age_of(header.event_ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(v: &[u64]) -> Vec<Timestamp> {
        v.iter().copied().map(Timestamp::from_micros).collect()
    }

    fn header_at(event_ms: u64) -> Header {
        Header::new(
            TopicId::new("t").unwrap(),
            StreamId::new("s").unwrap(),
            0,
            Timestamp::from_millis(event_ms),
            Body::Inline(Payload::new()),
        )
    }

    #[test]
    fn skew_examples() {
        assert_eq!(compute_skew(&ts(&[4, 2, 3, 4])).unwrap(), Duration::from_micros(2));
        assert_eq!(compute_skew(&ts(&[7, 7, 7])).unwrap(), Duration::ZERO);
        assert_eq!(compute_skew(&ts(&[1000, 400, 990])).unwrap(), Duration::from_micros(600));
        assert_eq!(compute_skew(&[]), Err(ContractError::EmptyTimestamps));
    }

    #[test]
    fn freshness_examples() {
        let now = Timestamp::from_millis(1000);
        assert!(!is_fresh(&header_at(400), now, Bound::millis(500)));
        assert!(is_fresh(&header_at(600), now, Bound::millis(500)));
        assert!(is_fresh(&header_at(1000), now, Bound::millis(0)));
        assert!(is_fresh(&header_at(0), now, Bound::Unlimited));
        // future-stamped header is age zero
        assert!(is_fresh(&header_at(1200), now, Bound::millis(0)));
    }

    #[test]
    fn names_are_validated() {
        assert!(StreamId::new("").is_err());
        assert!(StreamId::new("x".repeat(256)).is_err());
        assert!(StreamId::new("x".repeat(255)).is_ok());
        assert!(serde_json::from_str::<TopicId>("\"\"").is_err());
    }

    #[test]
    fn config_validation() {
        let s = |n: &str| StreamId::new(n).unwrap();
        let t = TopicId::new("t").unwrap();
        assert!(TopicConfig::new(t.clone(), vec![]).validate().is_err());
        assert!(TopicConfig::new(t.clone(), vec![s("a"), s("a")]).validate().is_err());
        let tt = TopicConfig::new(t.clone(), vec![s("a")])
            .with_join(JoinMode::TimeTriggered { window: Duration::ZERO });
        assert!(tt.validate().is_err());
        assert!(TopicConfig::new(t, vec![s("a"), s("b")]).validate().is_ok());
    }

    #[test]
    fn topic_config_json_shape() {
        let json = r#"{"topic":"cam","streams":["a","b"],
            "join":{"mode":"time_triggered","window":"1s"},
            "max_skew":"25ms","freshness_threshold":"unlimited"}"#;
        let cfg: TopicConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.join, JoinMode::TimeTriggered { window: Duration::from_secs(1) });
        assert_eq!(cfg.max_skew, Bound::millis(25));
        assert_eq!(cfg.time_basis, TimeBasis::EventTime);
        let back: TopicConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn node_addr_parse() {
        let a: NodeAddr = "10.0.0.1:7000".parse().unwrap();
        assert_eq!(a, NodeAddr::new("10.0.0.1", 7000));
        assert!("nohost".parse::<NodeAddr>().is_err());
        assert!(":7".parse::<NodeAddr>().is_err());
    }

    proptest! {
        #[test]
        fn skew_is_translation_and_permutation_invariant(
            mut v in prop::collection::vec(0u64..1_000_000, 1..20),
            shift in 0u64..1_000_000,
        ) {
            let base = compute_skew(&ts(&v)).unwrap();
            let shifted: Vec<u64> = v.iter().map(|x| x + shift).collect();
            prop_assert_eq!(compute_skew(&ts(&shifted)).unwrap(), base);
            v.reverse();
            prop_assert_eq!(compute_skew(&ts(&v)).unwrap(), base);
            prop_assert!(base >= Duration::ZERO);
            let all_equal = v.iter().all(|x| *x == v[0]);
            prop_assert_eq!(base == Duration::ZERO, all_equal);
        }

        #[test]
        fn freshness_is_monotone_in_threshold(
            event in 0u64..10_000, now in 0u64..10_000, t in 0i64..10_000, extra in 0i64..10_000,
        ) {
            let h = header_at(event);
            let now = Timestamp::from_millis(now);
            if is_fresh(&h, now, Bound::millis(t)) {
                prop_assert!(is_fresh(&h, now, Bound::millis(t + extra)));
            }
        }
    }
}
