//! Scenario files and the stream generators they describe.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Bandwidth;
use super::SimError;
use crate::metrics::LabelTimeline;
use crate::runtime::{encode_label, FailSoft, ModelKind, ModelOperator};
use crate::time::{Duration, Timestamp};
use crate::types::{Payload, StreamId, TopicConfig, TopicId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    EarlyFusion,
    EarlyFusionParallel { consumers: usize },
    LateFusion,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Headers through the broker, payloads fetched peer to peer.
    #[default]
    Lazy,
    /// Payloads inline in broker messages.
    Eager,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nic {
    pub up: Bandwidth,
    pub down: Bandwidth,
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    /// Scales the declared cost of every model placed on this node.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub cost_multiplier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nic: Option<Nic>,
}

impl NodeSpec {
    pub fn new(id: &str) -> Self {
        NodeSpec {
            id: id.to_string(),
            cost_multiplier: 1.0,
            nic: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub latency: Duration,
    pub bandwidth: Bandwidth,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            latency: Duration::from_micros(200),
            bandwidth: Bandwidth::gbps(1.0),
        }
    }
}

/// Replaces the default link between `a` and `b`, both directions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkOverride {
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Duration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<Bandwidth>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub down: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// One item every `period`.
    Periodic { period: Duration, payload_size: usize },
    /// Bursts of `burst_len` items at `rate_hz`, separated by `quiet`.
    Bursty {
        quiet: Duration,
        rate_hz: f64,
        burst_len: usize,
        payload_size: usize,
    },
    /// CSV rows `event_ts_micros,payload_hex`.
    Trace { file: PathBuf },
    /// 8-byte labels sampled from the scenario's ground truth every `period`.
    Labels {
        period: Duration,
        #[serde(default)]
        noise: f64,
    },
}

fn is_zero(d: &Duration) -> bool {
    *d == Duration::ZERO
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub stream: StreamId,
    pub topic: TopicId,
    /// Source node.
    pub node: String,
    pub pattern: Pattern,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub start: Duration,
    /// Constant delay between capture and publication.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub publish_delay: Duration,
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_zero_f(v: &f64) -> bool {
    *v == 0.0
}

fn is_drop(f: &FailSoft) -> bool {
    *f == FailSoft::DropTuple
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub node: String,
    pub topic: TopicId,
    pub operator: ModelOperator,
    /// Join a shared subscription instead of an exclusive one.
    #[serde(default, skip_serializing_if = "is_false")]
    pub shared: bool,
    #[serde(default, skip_serializing_if = "is_drop")]
    pub fail_soft: FailSoft,
    /// Fraction of deliveries the consumer skips before fetching, spread evenly.
    #[serde(default, skip_serializing_if = "is_zero_f")]
    pub skip_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// The consumer on `node` leaves `topic`.
    Disconnect { at: Duration, node: String, topic: TopicId },
}

/// Ground-truth label process: piecewise constant segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub classes: i64,
    pub min_segment: Duration,
    pub max_segment: Duration,
}

fn default_p2p_setup() -> Duration {
    Duration::from_millis(5)
}

fn default_true() -> bool {
    true
}

fn default_cache() -> u64 {
    256 << 20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub topology: Topology,
    #[serde(default)]
    pub routing: Routing,
    /// Generators produce items with `event_ts < run_length`.
    pub run_length: Duration,
    pub leader: String,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub default_link: LinkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_nic: Option<Nic>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkOverride>,
    /// Cost of opening a peer-to-peer connection for fetches.
    #[serde(default = "default_p2p_setup")]
    pub p2p_setup: Duration,
    /// Reuse one connection per (consumer, source) pair.
    #[serde(default = "default_true")]
    pub p2p_pooling: bool,
    #[serde(default = "default_cache")]
    pub fetch_cache_bytes: u64,
    pub topics: Vec<TopicConfig>,
    pub streams: Vec<StreamSpec>,
    pub pipelines: Vec<PipelineSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<Fault>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelSpec>,
    /// Directory relative trace paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Parse {
            line: e.line(),
            column: e.column(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path)?;
        let mut s = Self::from_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn topic(&self, t: &TopicId) -> Option<&TopicConfig> {
        self.topics.iter().find(|c| &c.topic == t)
    }

    fn link_down(&self, a: &str, b: &str) -> bool {
        a != b
            && self
                .links
                .iter()
                .any(|l| l.down && ((l.a == a && l.b == b) || (l.a == b && l.b == a)))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return bad(format!("duplicate node {:?}", n.id));
            }
            if !(n.cost_multiplier >= 0.0) {
                return bad(format!("node {:?} has a negative cost multiplier", n.id));
            }
        }
        let known = |id: &str| ids.contains(id);
        if !known(&self.leader) {
            return bad(format!("leader {:?} is not a node", self.leader));
        }
        if self.run_length <= Duration::ZERO {
            return bad("run_length must be positive".into());
        }
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !known(end) {
                    return bad(format!("link end {end:?} is not a node"));
                }
            }
        }
        let mut topics = HashSet::new();
        for t in &self.topics {
            t.validate().map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            if !topics.insert(&t.topic) {
                return bad(format!("duplicate topic {}", t.topic));
            }
        }
        let mut produced = HashSet::new();
        for s in &self.streams {
            if !known(&s.node) {
                return bad(format!("stream {} is on unknown node {:?}", s.stream, s.node));
            }
            let Some(t) = self.topic(&s.topic) else {
                return bad(format!("stream {} names unknown topic {}", s.stream, s.topic));
            };
            if t.stream_index(&s.stream).is_none() {
                return bad(format!("topic {} has no stream {}", s.topic, s.stream));
            }
            if !produced.insert((&s.topic, &s.stream)) {
                return bad(format!("stream {} is generated twice", s.stream));
            }
            if self.link_down(&s.node, &self.leader) {
                return Err(SimError::Unreachable { node: s.node.clone() });
            }
            if matches!(s.pattern, Pattern::Labels { .. }) && self.labels.is_none() {
                return bad(format!("stream {} samples labels but the scenario has none", s.stream));
            }
        }
        let mut placed = HashSet::new();
        for p in &self.pipelines {
            if !known(&p.node) {
                return bad(format!("pipeline on unknown node {:?}", p.node));
            }
            if self.topic(&p.topic).is_none() {
                return bad(format!("pipeline on {:?} consumes unknown topic {}", p.node, p.topic));
            }
            if !placed.insert((&p.node, &p.topic)) {
                return bad(format!("two pipelines for topic {} on node {:?}", p.topic, p.node));
            }
            if !(0.0..1.0).contains(&p.skip_fraction) {
                return bad(format!("skip_fraction {} outside [0, 1)", p.skip_fraction));
            }
            if p.operator.cost < Duration::ZERO {
                return bad(format!("model {} has a negative cost", p.operator.id));
            }
            if let Some(out) = &p.operator.output {
                match self.topic(&out.topic) {
                    Some(t) if t.stream_index(&out.stream).is_some() => {}
                    _ => return bad(format!("model {} outputs to unknown stream {}/{}", p.operator.id, out.topic, out.stream)),
                }
                if !produced.insert((&out.topic, &out.stream)) {
                    return bad(format!("stream {} has two producers", out.stream));
                }
            }
            if self.link_down(&p.node, &self.leader) {
                return Err(SimError::Unreachable { node: p.node.clone() });
            }
        }
        for f in &self.faults {
            let Fault::Disconnect { node, topic, .. } = f;
            if !self.pipelines.iter().any(|p| &p.node == node && &p.topic == topic) {
                return bad(format!("fault names no pipeline {node}/{topic}"));
            }
        }
        self.check_topology()
    }

    fn check_topology(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidTopology(m));
        match &self.topology {
            Topology::EarlyFusion => {
                if self.pipelines.iter().any(|p| p.shared) {
                    return bad("early fusion uses exclusive subscriptions".into());
                }
            }
            Topology::EarlyFusionParallel { consumers } => {
                let topics: BTreeSet<&TopicId> = self.pipelines.iter().map(|p| &p.topic).collect();
                let fits = topics
                    .iter()
                    .any(|t| self.pipelines.iter().filter(|p| p.shared && &p.topic == *t).count() == *consumers);
                if *consumers == 0 || !fits {
                    return bad(format!("no topic has exactly {consumers} shared consumers"));
                }
            }
            Topology::LateFusion => {
                if !self.pipelines.iter().any(|p| p.operator.model == ModelKind::MajorityVote) {
                    return bad("late fusion needs a majority-vote pipeline".into());
                }
            }
        }
        Ok(())
    }

    /// Ground truth for labeled streams, covering the whole run.
    pub fn truth(&self) -> Option<LabelTimeline> {
        let spec = self.labels.as_ref()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6c61_6265_6c73);
        let mut steps = Vec::new();
        let mut t = Timestamp::ZERO;
        let mut prev: Option<i64> = None;
        let end = Timestamp::ZERO + self.run_length * 2.0;
        let lo = spec.min_segment.as_micros().max(1);
        let hi = spec.max_segment.as_micros().max(lo);
        while t < end {
            let mut l = rng.gen_range(0..spec.classes.max(1));
            if spec.classes > 1 && Some(l) == prev {
                l = (l + 1) % spec.classes;
            }
            steps.push((t, l));
            prev = Some(l);
            t = t + Duration::from_micros(rng.gen_range(lo..=hi));
        }
        Some(LabelTimeline::new(steps))
    }
}

/// Deterministic payload: the item index, then seeded filler.
fn payload(rng: &mut ChaCha8Rng, size: usize, index: u64) -> Payload {
    let mut block = [0u8; 64];
    rng.fill_bytes(&mut block);
    let mut v: Vec<u8> = block.iter().copied().cycle().take(size).collect();
    let head = index.to_le_bytes();
    let n = size.min(8);
    v[..n].copy_from_slice(&head[..n]);
    Payload::from(v)
}

fn stream_rng(seed: u64, stream: &StreamId) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_str().bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Timed payload schedule of one stream: items with `start <= ts < run_length`.
pub fn generate(
    spec: &StreamSpec,
    run_length: Duration,
    seed: u64,
    truth: Option<&LabelTimeline>,
    base_dir: Option<&Path>,
) -> Result<Vec<(Timestamp, Payload)>, SimError> {
    let mut rng = stream_rng(seed, &spec.stream);
    let end = Timestamp::ZERO + run_length;
    let first = Timestamp::ZERO + spec.start;
    let err = |m: String| SimError::Generate {
        stream: spec.stream.to_string(),
        reason: m,
    };
    let mut out = Vec::new();
    match &spec.pattern {
        Pattern::Periodic { period, payload_size } => {
            if *period <= Duration::ZERO {
                return Err(err("period must be positive".into()));
            }
            let mut t = first;
            while t < end {
                let i = out.len() as u64;
                out.push((t, payload(&mut rng, *payload_size, i)));
                t = t + *period;
            }
        }
        Pattern::Bursty {
            quiet,
            rate_hz,
            burst_len,
            payload_size,
        } => {
            if !(*rate_hz > 0.0) || *burst_len == 0 || *quiet < Duration::ZERO {
                return Err(err("bursts need a positive rate and length".into()));
            }
            let gap = Duration::from_micros((1e6 / rate_hz).round().max(1.0) as i64);
            let mut t = first;
            'run: loop {
                for _ in 0..*burst_len {
                    if t >= end {
                        break 'run;
                    }
                    let i = out.len() as u64;
                    out.push((t, payload(&mut rng, *payload_size, i)));
                    t = t + gap;
                }
                t = t + *quiet;
            }
        }
        Pattern::Trace { file } => {
            let path = match base_dir {
                Some(b) if file.is_relative() => b.join(file),
                _ => file.clone(),
            };
            let text = fs::read_to_string(&path).map_err(|e| err(format!("{}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with("event_ts") {
                    continue;
                }
                let row = |m: &str| err(format!("{}:{}: {m}", path.display(), n + 1));
                let (ts, hexed) = line.split_once(',').ok_or_else(|| row("expected `event_ts_micros,hex`"))?;
                let ts: u64 = ts.trim().parse().map_err(|_| row("bad timestamp"))?;
                let bytes = hex::decode(hexed.trim()).map_err(|_| row("bad hex payload"))?;
                out.push((Timestamp::from_micros(ts), Payload::from(bytes)));
            }
            out.sort_by_key(|(t, _)| *t);
        }
        Pattern::Labels { period, noise } => {
            if *period <= Duration::ZERO {
                return Err(err("period must be positive".into()));
            }
            let truth = truth.ok_or_else(|| err("no ground truth".into()))?;
            let classes = truth.steps().iter().map(|(_, l)| *l).max().unwrap_or(0) + 1;
            let mut t = first;
            while t < end {
                let mut l = truth.label_at(t).unwrap_or(0);
                if rng.gen_bool(noise.clamp(0.0, 1.0)) {
                    l = rng.gen_range(0..classes.max(1));
                }
                out.push((t, encode_label(l)));
                t = t + *period;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pattern: Pattern) -> StreamSpec {
        StreamSpec {
            stream: StreamId::new("s").unwrap(),
            topic: TopicId::new("t").unwrap(),
            node: "n".into(),
            pattern,
            start: Duration::ZERO,
            publish_delay: Duration::ZERO,
        }
    }

    #[test]
    fn periodic_count() {
        let s = spec(Pattern::Periodic {
            period: Duration::from_secs(5),
            payload_size: 4,
        });
        let g = generate(&s, Duration::from_secs(60), 1, None, None).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g[11].0, Timestamp::from_secs(55));
    }

    #[test]
    fn continuous_burst_count() {
        let s = spec(Pattern::Bursty {
            quiet: Duration::ZERO,
            rate_hz: 10.0,
            burst_len: 10,
            payload_size: 1,
        });
        assert_eq!(generate(&s, Duration::from_secs(60), 1, None, None).unwrap().len(), 600);
    }

    #[test]
    fn bursts_with_gaps() {
        let s = spec(Pattern::Bursty {
            quiet: Duration::from_secs(1),
            rate_hz: 10.0,
            burst_len: 5,
            payload_size: 1,
        });
        let g = generate(&s, Duration::from_secs(3), 1, None, None).unwrap();
        let ts: Vec<u64> = g.iter().map(|(t, _)| t.as_micros() / 1000).collect();
        assert_eq!(ts[..6], [0, 100, 200, 300, 400, 1500]);
    }

    #[test]
    fn trace_replays_rows() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t.csv"), "event_ts_micros,payload_hex\n10,00ff\n20,01\n30,\n").unwrap();
        let s = spec(Pattern::Trace { file: "t.csv".into() });
        let g = generate(&s, Duration::from_secs(1), 1, None, Some(dir.path())).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[0], (Timestamp::from_micros(10), Payload::from_static(&[0, 255])));
        assert_eq!(g[2].1.len(), 0);
    }

    #[test]
    fn nonpositive_period_is_rejected() {
        let s = spec(Pattern::Periodic {
            period: Duration::ZERO,
            payload_size: 1,
        });
        assert!(matches!(
            generate(&s, Duration::from_secs(1), 1, None, None),
            Err(SimError::Generate { .. })
        ));
    }

    #[test]
    fn schedules_are_seeded() {
        let s = spec(Pattern::Periodic {
            period: Duration::from_millis(10),
            payload_size: 100,
        });
        let a = generate(&s, Duration::from_secs(1), 7, None, None).unwrap();
        let b = generate(&s, Duration::from_secs(1), 7, None, None).unwrap();
        let c = generate(&s, Duration::from_secs(1), 8, None, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
