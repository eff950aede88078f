//! Re-run logged joiner decisions and diff them against the log.
//!
//! Each pipeline logs its topic config on start, every delivery it handed to
//! the joiner (`broker_deliver` with `join=1`), every accepted tuple
//! (`join_emit`) and a `shutdown` record carrying the last joiner clock.
//! Replay feeds the same deliveries at the same times to a fresh joiner,
//! applies the skew filter, and compares slot lists tuple by tuple.

use std::collections::BTreeMap;
use std::fmt;

use crate::join::{skew_filter, SkewVerdict, TopicJoiner};
use crate::metrics::{parse_refs, EventKind, MetricEvent};
use crate::time::Timestamp;
use crate::types::{Body, Header, NodeAddr, PayloadLocator, StreamId, TopicConfig, TopicId};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("incomplete log: {0}")]
    Incomplete(String),
    #[error("bad config record for {node}/{topic}: {reason}")]
    Config { node: String, topic: String, reason: String },
}

/// Slot list of one tuple, as `(stream, seq)`.
pub type Slots = Vec<(String, u64)>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub node: String,
    pub topic: String,
    /// Position in the pipeline's tuple sequence.
    pub index: usize,
    pub logged: Option<Slots>,
    pub replayed: Option<Slots>,
}

impl Divergence {
    /// Sequence number of the trigger-side item where the runs part ways.
    pub fn seq(&self) -> Option<u64> {
        self.logged
            .as_ref()
            .or(self.replayed.as_ref())
            .and_then(|s| s.iter().map(|(_, q)| *q).max())
    }
}

fn show(s: &Option<Slots>) -> String {
    match s {
        None => "nothing".into(),
        Some(v) => v.iter().map(|(s, q)| format!("{s}:{q}")).collect::<Vec<_>>().join(","),
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}: tuple #{} differs (seq {}): logged {}, replayed {}",
            self.node,
            self.topic,
            self.index,
            self.seq().map_or_else(|| "-".into(), |s| s.to_string()),
            show(&self.logged),
            show(&self.replayed)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineReplay {
    pub node: String,
    pub topic: String,
    pub tuples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub pipelines: Vec<PipelineReplay>,
    pub divergence: Option<Divergence>,
}

#[derive(Default)]
struct Group<'a> {
    config: Option<&'a MetricEvent>,
    deliveries: Vec<&'a MetricEvent>,
    emits: Vec<&'a MetricEvent>,
    shutdown: Option<&'a MetricEvent>,
}

fn header_of(e: &MetricEvent) -> Result<Header, ReplayError> {
    let bad = |what: &str| ReplayError::Incomplete(format!("broker_deliver at {} has {what}", e.at));
    let publish = e
        .get("pub")
        .and_then(|p| p.parse::<u64>().ok())
        .ok_or_else(|| bad("no publish time"))?;
    let topic = TopicId::new(&e.topic).map_err(|_| bad("a bad topic"))?;
    let stream = StreamId::new(&e.stream).map_err(|_| bad("a bad stream"))?;
    let mut h = Header::new(
        topic,
        stream,
        e.seq,
        e.event_ts,
        Body::Lazy(PayloadLocator {
            node: NodeAddr::new("replay", 0),
            segment: 0,
            offset: 0,
            length: 0,
        }),
    );
    h.publish_ts = Timestamp::from_micros(publish);
    Ok(h)
}

/// Replay every pipeline found in a merged log. Stops at the first divergence.
pub fn replay(events: &[MetricEvent]) -> Result<ReplayReport, ReplayError> {
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for e in events {
        let key = || (e.node.clone(), e.topic.clone());
        match e.kind {
            EventKind::Config => groups.entry(key()).or_default().config = Some(e),
            EventKind::BrokerDeliver if e.get("join") == Some("1") => groups.entry(key()).or_default().deliveries.push(e),
            EventKind::JoinEmit => groups.entry(key()).or_default().emits.push(e),
            EventKind::Shutdown => {
                if let Some(g) = groups.get_mut(&key()) {
                    g.shutdown = Some(e);
                }
            }
            _ => {}
        }
    }

    let mut report = ReplayReport::default();
    for ((node, topic), g) in groups {
        let cfg_event = g
            .config
            .ok_or_else(|| ReplayError::Incomplete(format!("{node}/{topic}: no config record")))?;
        let shutdown = g
            .shutdown
            .ok_or_else(|| ReplayError::Incomplete(format!("{node}/{topic}: no shutdown record")))?;
        let config: TopicConfig = serde_json::from_str(&cfg_event.extra).map_err(|err| ReplayError::Config {
            node: node.clone(),
            topic: topic.clone(),
            reason: err.to_string(),
        })?;
        config.validate().map_err(|err| ReplayError::Config {
            node: node.clone(),
            topic: topic.clone(),
            reason: err.to_string(),
        })?;

        let mut joiner = TopicJoiner::new(&config);
        let mut replayed: Vec<Slots> = Vec::new();
        let accept = |tuples: Vec<crate::types::JoinTuple>, out: &mut Vec<Slots>| {
            for t in tuples {
                if skew_filter(&t, config.max_skew, config.time_basis) == SkewVerdict::Accept {
                    out.push(
                        t.slot_refs()
                            .into_iter()
                            .map(|r| (r.stream.as_str().to_string(), r.seq))
                            .collect(),
                    );
                }
            }
        };
        for d in &g.deliveries {
            let h = header_of(d)?;
            let tuples = joiner
                .on_arrival(h, d.at)
                .map_err(|err| ReplayError::Incomplete(format!("{node}/{topic}: {err}")))?;
            accept(tuples, &mut replayed);
        }
        if let Some(clock) = shutdown.get("clock").and_then(|c| c.parse::<u64>().ok()) {
            let tuples = joiner.on_tick(Timestamp::from_micros(clock));
            accept(tuples, &mut replayed);
        }

        let logged = g
            .emits
            .iter()
            .map(|e| parse_refs(e.get("slots").unwrap_or("")).map_err(ReplayError::Incomplete))
            .collect::<Result<Vec<Slots>, _>>()?;

        let n = logged.len().max(replayed.len());
        let first = (0..n).find(|&i| logged.get(i) != replayed.get(i));
        report.pipelines.push(PipelineReplay {
            node: node.clone(),
            topic: topic.clone(),
            tuples: replayed.len(),
        });
        if let Some(index) = first {
            report.divergence = Some(Divergence {
                node,
                topic,
                index,
                logged: logged.get(index).cloned(),
                replayed: replayed.get(index).cloned(),
            });
            return Ok(report);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{run_to_completion, FailSoft, ModelKind, ModelOperator, Pipeline, PipelineConfig};
    use crate::time::Duration;
    use crate::types::{JoinMode, Payload};

    fn sid(s: &str) -> StreamId {
        StreamId::new(s).unwrap()
    }

    fn logged_run(join: JoinMode) -> Vec<MetricEvent> {
        let cfg = TopicConfig::new(TopicId::new("t").unwrap(), vec![sid("a"), sid("b")]).with_join(join);
        let mut p = Pipeline::new(
            PipelineConfig {
                node: "m".into(),
                topic: cfg,
                operator: ModelOperator {
                    id: "id".into(),
                    model: ModelKind::Identity,
                    cost: Duration::from_millis(1),
                    output: None,
                },
                fail_soft: FailSoft::DropTuple,
            },
            Timestamp::ZERO,
        )
        .unwrap();
        let arrivals = [("a", 0), ("b", 3), ("a", 4), ("a", 7), ("b", 9), ("b", 12), ("a", 15)];
        let deliveries = arrivals
            .iter()
            .enumerate()
            .map(|(i, (s, ms))| {
                let h = Header::new(
                    TopicId::new("t").unwrap(),
                    sid(s),
                    i as u64,
                    Timestamp::from_millis(*ms),
                    Body::Inline(Payload::from_static(b"x")),
                );
                (Timestamp::from_millis(*ms), None, h)
            })
            .collect();
        run_to_completion(&mut p, deliveries, |_, _| unreachable!()).unwrap();
        p.take_events()
    }

    #[test]
    fn replays_its_own_log() {
        for join in [
            JoinMode::DataTriggered,
            JoinMode::Hybrid {
                min_interval: Duration::from_millis(5),
            },
            JoinMode::TimeTriggered {
                window: Duration::from_millis(5),
            },
        ] {
            let events = logged_run(join);
            let r = replay(&events).unwrap();
            assert_eq!(r.divergence, None, "{join:?}");
            assert_eq!(r.pipelines.len(), 1);
            let emitted = events.iter().filter(|e| e.kind == EventKind::JoinEmit).count();
            assert_eq!(r.pipelines[0].tuples, emitted);
            assert!(emitted > 0);
        }
    }

    #[test]
    fn mutated_slot_is_reported() {
        let mut events = logged_run(JoinMode::DataTriggered);
        let i = events.iter().position(|e| e.kind == EventKind::JoinEmit).unwrap();
        let j = events.iter().skip(i + 1).position(|e| e.kind == EventKind::JoinEmit).unwrap() + i + 1;
        let t = events[j].get("t").unwrap().to_string();
        events[j].extra = format!("t={t};slots=a:99,b:1;reacts=a:99");
        let d = replay(&events).unwrap().divergence.unwrap();
        assert_eq!(d.index, 1);
        assert_eq!(d.logged, Some(vec![("a".into(), 99), ("b".into(), 1)]));
        assert_eq!(d.seq(), Some(99));
        assert!(d.to_string().contains("tuple #1"));
    }

    #[test]
    fn dropped_delivery_diverges() {
        let mut events = logged_run(JoinMode::DataTriggered);
        let i = events
            .iter()
            .rposition(|e| e.kind == EventKind::BrokerDeliver)
            .unwrap();
        events.remove(i);
        assert!(replay(&events).unwrap().divergence.is_some());
    }

    #[test]
    fn empty_log_is_empty_success() {
        assert_eq!(replay(&[]).unwrap(), ReplayReport::default());
    }

    #[test]
    fn missing_shutdown_is_incomplete() {
        let mut events = logged_run(JoinMode::DataTriggered);
        events.retain(|e| e.kind != EventKind::Shutdown);
        assert!(matches!(replay(&events), Err(ReplayError::Incomplete(_))));
    }
}
