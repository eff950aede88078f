//! Builders for the shipped scenarios and the experiment drivers around them.
//!
//! Each builder returns the scenario with the knob under study exposed as an
//! argument; [`builtin`] gives the canonical variant written to `scenarios/`.

use std::collections::BTreeMap;

use super::network::Bandwidth;
use super::scenario::{
    LabelSpec, Nic, NodeSpec, Pattern, PipelineSpec, Routing, Scenario, StreamSpec, Topology,
};
use super::{run_scenario, SimError};
use crate::runtime::{FailSoft, ModelKind, ModelOperator, OutputStream};
use crate::time::{Bound, Duration};
use crate::types::{JoinMode, StreamId, TimeBasis, TopicConfig, TopicId};

pub const BUILTIN: &[&str] = &[
    "table4_reaction",
    "table5_congestion",
    "fig5_backlog",
    "fig6_crossover",
    "fig7_scaling",
    "fig8_skipping",
    "topology1_activity",
    "topology2_activity",
    "topology3_activity",
    "delay_tolerance",
];

/// Canonical variant of a shipped scenario.
pub fn builtin(name: &str) -> Option<Scenario> {
    Some(match name {
        "table4_reaction" => table4_reaction(JoinMode::TimeTriggered {
            window: Duration::from_secs(1),
        }),
        "table5_congestion" => table5_congestion(Routing::Lazy, Some(CONGESTED)),
        "fig5_backlog" => fig5_backlog(1000, None),
        "fig6_crossover" => fig6_crossover(Routing::Lazy, 512 * 1024),
        "fig7_scaling" => fig7_scaling(Routing::Lazy, 4, Duration::from_millis(200)),
        "fig8_skipping" => fig8_skipping(Routing::Lazy, 0.5),
        "topology1_activity" => activity(Fusion::Early, Duration::ZERO),
        "topology2_activity" => activity(Fusion::Parallel(2), Duration::ZERO),
        "topology3_activity" => activity(Fusion::Late, Duration::ZERO),
        "delay_tolerance" => delay_tolerance(Fusion::Late, 1),
        _ => return None,
    })
}

fn sid(s: &str) -> StreamId {
    StreamId::new(s).expect("valid stream name")
}

fn tid(s: &str) -> TopicId {
    TopicId::new(s).expect("valid topic name")
}

fn topic(name: &str, streams: &[&str], join: JoinMode) -> TopicConfig {
    TopicConfig::new(tid(name), streams.iter().map(|s| sid(s)).collect()).with_join(join)
}

fn nodes(ids: &[&str]) -> Vec<NodeSpec> {
    ids.iter().map(|id| NodeSpec::new(id)).collect()
}

fn stream(name: &str, topic: &str, node: &str, pattern: Pattern) -> StreamSpec {
    StreamSpec {
        stream: sid(name),
        topic: tid(topic),
        node: node.into(),
        pattern,
        start: Duration::ZERO,
        publish_delay: Duration::ZERO,
    }
}

fn model(id: &str, model: ModelKind, cost: Duration) -> ModelOperator {
    ModelOperator {
        id: id.into(),
        model,
        cost,
        output: None,
    }
}

fn pipeline(node: &str, topic: &str, operator: ModelOperator) -> PipelineSpec {
    PipelineSpec {
        node: node.into(),
        topic: tid(topic),
        operator,
        shared: false,
        fail_soft: FailSoft::DropTuple,
        skip_fraction: 0.0,
    }
}

fn base(name: &str, topology: Topology, run_length: Duration) -> Scenario {
    Scenario {
        name: name.into(),
        seed: 1,
        topology,
        routing: Routing::Lazy,
        run_length,
        leader: "leader".into(),
        nodes: Vec::new(),
        default_link: Default::default(),
        default_nic: None,
        links: Vec::new(),
        p2p_setup: Duration::from_millis(5),
        p2p_pooling: true,
        fetch_cache_bytes: 256 << 20,
        topics: Vec::new(),
        streams: Vec::new(),
        pipelines: Vec::new(),
        faults: Vec::new(),
        labels: None,
        base_dir: None,
    }
}

/// A 5 s stream of 5 MB items and a 10 Hz stream of 1 B items joined at one
/// consumer; the join mode is the knob.
pub fn table4_reaction(join: JoinMode) -> Scenario {
    let mut s = base("table4_reaction", Topology::EarlyFusion, Duration::from_secs(60));
    s.nodes = nodes(&["leader", "camera", "imu", "model"]);
    s.topics = vec![topic("reaction", &["steady", "bursty"], join)];
    s.streams = vec![
        stream(
            "steady",
            "reaction",
            "camera",
            Pattern::Periodic {
                period: Duration::from_secs(5),
                payload_size: 5_000_000,
            },
        ),
        StreamSpec {
            start: Duration::from_millis(50),
            ..stream(
                "bursty",
                "reaction",
                "imu",
                Pattern::Bursty {
                    quiet: Duration::ZERO,
                    rate_hz: 10.0,
                    burst_len: 10,
                    payload_size: 1,
                },
            )
        },
    ];
    s.pipelines = vec![pipeline(
        "model",
        "reaction",
        model("detector", ModelKind::ByteCount, Duration::from_millis(1)),
    )];
    s
}

/// Leader NIC cap for the congested runs.
pub const CONGESTED: Bandwidth = Bandwidth::BytesPerSec(500_000);

/// Two 2 MB frame streams at 0.8 fps joined at a detector; `leader_cap`
/// limits the leader's NIC in both directions.
pub fn table5_congestion(routing: Routing, leader_cap: Option<Bandwidth>) -> Scenario {
    let mut s = base("table5_congestion", Topology::EarlyFusion, Duration::from_millis(37_500));
    s.routing = routing;
    s.nodes = nodes(&["leader", "cam1", "cam2", "detector"]);
    s.default_nic = Some(Nic {
        up: Bandwidth::gbps(1.0),
        down: Bandwidth::gbps(1.0),
    });
    if let Some(cap) = leader_cap {
        s.nodes[0].nic = Some(Nic { up: cap, down: cap });
    }
    s.topics = vec![topic("frames", &["left", "right"], JoinMode::DataTriggered)];
    let frames = |name: &str, node: &str| {
        stream(
            name,
            "frames",
            node,
            Pattern::Periodic {
                period: Duration::from_millis(1250),
                payload_size: 2_000_000,
            },
        )
    };
    s.streams = vec![frames("left", "cam1"), frames("right", "cam2")];
    s.pipelines = vec![pipeline(
        "detector",
        "frames",
        model("qr", ModelKind::ByteCount, Duration::from_millis(300)),
    )];
    s
}

/// One sensor at period 26 ms into a 30 ms model. `min_interval` turns on
/// the hybrid throttle.
pub fn fig5_backlog(items: u64, min_interval: Option<Duration>) -> Scenario {
    let period = Duration::from_millis(26);
    let mut s = base(
        "fig5_backlog",
        Topology::EarlyFusion,
        Duration::from_micros(period.as_micros() * items as i64),
    );
    s.routing = Routing::Eager;
    s.nodes = nodes(&["leader", "sensor", "model"]);
    let join = match min_interval {
        Some(min_interval) => JoinMode::Hybrid { min_interval },
        None => JoinMode::DataTriggered,
    };
    s.topics = vec![topic("readings", &["reading"], join)];
    s.streams = vec![stream(
        "reading",
        "readings",
        "sensor",
        Pattern::Periodic {
            period,
            payload_size: 8,
        },
    )];
    s.pipelines = vec![pipeline(
        "model",
        "readings",
        model("classifier", ModelKind::Sum, Duration::from_millis(30)),
    )];
    s
}

/// Messages of one size from a source to a receiver through the leader.
/// Every fetch opens a fresh connection.
pub fn fig6_crossover(routing: Routing, payload_size: usize) -> Scenario {
    let mut s = base("fig6_crossover", Topology::EarlyFusion, Duration::from_secs(4));
    s.routing = routing;
    s.p2p_pooling = false;
    s.nodes = nodes(&["leader", "source", "receiver"]);
    s.topics = vec![topic("messages", &["message"], JoinMode::DataTriggered)];
    s.streams = vec![stream(
        "message",
        "messages",
        "source",
        Pattern::Periodic {
            period: Duration::from_millis(200),
            payload_size,
        },
    )];
    s.pipelines = vec![pipeline(
        "receiver",
        "messages",
        model("sink", ModelKind::ByteCount, Duration::ZERO),
    )];
    s
}

/// 100 items of 512 KiB into a shared queue drained by `k` consumers.
pub fn fig7_scaling(routing: Routing, k: usize, cost: Duration) -> Scenario {
    let items = 100;
    let mut s = base(
        "fig7_scaling",
        Topology::EarlyFusionParallel { consumers: k },
        Duration::from_millis(items),
    );
    s.routing = routing;
    let mut ids = vec!["leader".to_string(), "producer".to_string()];
    ids.extend((1..=k).map(|i| format!("consumer{i}")));
    s.nodes = ids.iter().map(|id| NodeSpec::new(id)).collect();
    s.default_nic = Some(Nic {
        up: Bandwidth::gbps(1.0),
        down: Bandwidth::gbps(1.0),
    });
    s.topics = vec![topic("work", &["blob"], JoinMode::DataTriggered)];
    s.streams = vec![stream(
        "blob",
        "work",
        "producer",
        Pattern::Periodic {
            period: Duration::from_millis(1),
            payload_size: 512 * 1024,
        },
    )];
    s.pipelines = (1..=k)
        .map(|i| PipelineSpec {
            shared: true,
            ..pipeline(&format!("consumer{i}"), "work", model("worker", ModelKind::ByteCount, cost))
        })
        .collect();
    s
}

/// 50 frames of 1 MB from a camera to a sink that skips a fraction of them.
pub fn fig8_skipping(routing: Routing, skip_fraction: f64) -> Scenario {
    let mut s = base("fig8_skipping", Topology::EarlyFusion, Duration::from_secs(5));
    s.routing = routing;
    s.nodes = nodes(&["leader", "camera", "sink"]);
    s.topics = vec![topic("video", &["frame"], JoinMode::DataTriggered)];
    s.streams = vec![stream(
        "frame",
        "video",
        "camera",
        Pattern::Periodic {
            period: Duration::from_millis(100),
            payload_size: 1_000_000,
        },
    )];
    s.pipelines = vec![PipelineSpec {
        skip_fraction,
        ..pipeline("sink", "video", model("sink", ModelKind::ByteCount, Duration::ZERO))
    }];
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// One model over all four raw streams.
    Early,
    /// Examples assembled at the leader, then the early-fusion model
    /// replicated over `n` shared consumers.
    Parallel(usize),
    /// A local model per sensor and a majority vote over their predictions.
    Late,
}

/// Publication delay of the lagging sensor in the delay-tolerance runs.
pub const DELAY: Duration = Duration::from_millis(600);
pub const MAX_SKEW: Duration = Duration::from_millis(200);
const SENSORS: [&str; 4] = ["imu1", "imu2", "imu3", "imu4"];
const CLASSES: i64 = 4;

/// Four sensors sampling a shared label process at 10 Hz. The fourth sensor
/// sits on a slower node and publishes `delay` late.
pub fn activity(fusion: Fusion, delay: Duration) -> Scenario {
    let (name, topology) = match fusion {
        Fusion::Early => ("topology1_activity", Topology::EarlyFusion),
        Fusion::Parallel(n) => ("topology2_activity", Topology::EarlyFusionParallel { consumers: n }),
        Fusion::Late => ("topology3_activity", Topology::LateFusion),
    };
    let mut s = base(name, topology, Duration::from_secs(60));
    s.labels = Some(LabelSpec {
        classes: CLASSES,
        min_segment: Duration::from_secs(1),
        max_segment: Duration::from_secs(3),
    });
    let mut ids = vec!["leader"];
    ids.extend(["node1", "node2", "node3", "node4"]);
    s.nodes = nodes(&ids);
    s.nodes[4].cost_multiplier = 3.0;
    let sensor_node = |i: usize| format!("node{}", i + 1);
    let raw_join = |t: &str, streams: &[&str]| {
        let mut c = topic(t, streams, JoinMode::DataTriggered).with_time_basis(TimeBasis::ProcessingTime);
        c.max_skew = Bound::Limited(MAX_SKEW);
        c
    };
    let sensor = |i: usize, topic: &str| StreamSpec {
        publish_delay: if i == 3 { delay } else { Duration::ZERO },
        ..stream(
            SENSORS[i],
            topic,
            &sensor_node(i),
            Pattern::Labels {
                period: Duration::from_millis(100),
                noise: 0.05,
            },
        )
    };
    match fusion {
        Fusion::Early | Fusion::Parallel(_) => {
            s.topics = vec![raw_join("activity", &SENSORS)];
            s.streams = (0..4).map(|i| sensor(i, "activity")).collect();
            let table: BTreeMap<String, i64> = (0..CLASSES).map(|l| (format!("{l},{l},{l},{l}"), l)).collect();
            let op = model(
                "fused",
                ModelKind::TableLookup { table, default: -1 },
                Duration::from_millis(10),
            );
            match fusion {
                Fusion::Parallel(n) => {
                    // The leader assembles whole examples so that shared
                    // round-robin dispatch hands each consumer a complete one.
                    s.topics.push(topic("examples", &["example"], JoinMode::DataTriggered));
                    let assemble = ModelOperator {
                        output: Some(OutputStream {
                            topic: tid("examples"),
                            stream: sid("example"),
                        }),
                        ..model("assemble", ModelKind::Identity, Duration::from_millis(1))
                    };
                    s.pipelines = vec![pipeline("leader", "activity", assemble)];
                    s.nodes.extend((1..=n).map(|i| NodeSpec::new(&format!("model{i}"))));
                    s.pipelines.extend((1..=n).map(|i| PipelineSpec {
                        shared: true,
                        ..pipeline(&format!("model{i}"), "examples", op.clone())
                    }));
                }
                _ => {
                    s.nodes.push(NodeSpec::new("model"));
                    s.pipelines = vec![pipeline("model", "activity", op)];
                }
            }
        }
        Fusion::Late => {
            let preds = ["pred1", "pred2", "pred3", "pred4"];
            s.topics = (0..4)
                .map(|i| raw_join(&format!("local{}", i + 1), &SENSORS[i..=i]))
                .collect();
            s.topics.push(raw_join("votes", &preds));
            s.streams = (0..4).map(|i| sensor(i, &format!("local{}", i + 1))).collect();
            s.pipelines = (0..4)
                .map(|i| {
                    let op = ModelOperator {
                        output: Some(OutputStream {
                            topic: tid("votes"),
                            stream: sid(preds[i]),
                        }),
                        ..model("local", ModelKind::Identity, Duration::from_millis(5))
                    };
                    pipeline(&sensor_node(i), &format!("local{}", i + 1), op)
                })
                .collect();
            s.nodes.push(NodeSpec::new("fusion"));
            s.pipelines.push(pipeline(
                "fusion",
                "votes",
                model("vote", ModelKind::MajorityVote, Duration::from_millis(1)),
            ));
        }
    }
    s
}

/// [`activity`] with the fourth sensor lagging by [`DELAY`].
pub fn delay_tolerance(fusion: Fusion, seed: u64) -> Scenario {
    let mut s = activity(fusion, DELAY);
    s.name = "delay_tolerance".into();
    s.seed = seed;
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingPoint {
    pub k: usize,
    pub total_working_duration: Duration,
    /// Relative to k = 1.
    pub speedup: f64,
}

/// Total working duration of [`fig7_scaling`] for each `k`, normalized to k = 1.
pub fn scaling_experiment(routing: Routing, ks: &[usize], cost: Duration) -> Result<Vec<ScalingPoint>, SimError> {
    let mut out = Vec::new();
    let mut baseline = None;
    for &k in ks {
        let run = run_scenario(&fig7_scaling(routing, k, cost))?;
        let d = run
            .report
            .total_working_duration
            .ok_or_else(|| SimError::InvalidScenario("no item completed".into()))?;
        let b = *baseline.get_or_insert(if k == 1 {
            d
        } else {
            run_scenario(&fig7_scaling(routing, 1, cost))?
                .report
                .total_working_duration
                .unwrap_or(d)
        });
        out.push(ScalingPoint {
            k,
            total_working_duration: d,
            speedup: b.as_secs_f64() / d.as_secs_f64(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in BUILTIN {
            let s = builtin(name).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&s.name, name);
        }
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn builtins_round_trip_json() {
        for name in BUILTIN {
            let s = builtin(name).unwrap();
            assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s, "{name}");
        }
    }
}
