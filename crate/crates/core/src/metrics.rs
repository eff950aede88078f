//! Lifecycle event log and the latency metrics computed from it.
//!
//! Every node appends one line per event:
//!
//! ```text
//! ts_micros \t node \t kind \t topic \t stream \t event_ts \t seq \t extra
//! ```
//!
//! `extra` is a `;`-separated list of `key=value` pairs. Item references
//! inside it are written `stream:seq`, comma-separated. Tabs, newlines and
//! backslashes in any field are backslash-escaped; `%`, `,`, `;`, `=` and `:`
//! in names inside `extra` are percent-encoded.
//!
//! Metric definitions, per raw item:
//!
//! * producer sending latency: `produce_begin` to `produce_end`
//! * consumer receiving latency: `produce_end` to the first `broker_deliver`
//! * total communication latency: the sum of the two
//! * reaction time: `join_emit` of the first tuple reacting to the item, minus
//!   its `produce_begin`
//! * processing latency: `model_begin` to `model_end` of a tuple
//! * end-to-end latency: `produce_begin` to the `model_end` at the last stage
//!   of the earliest completed lineage containing the item
//! * queueing time: `model_end` of a local model to the first `join_emit`
//!   downstream whose slots hold that prediction
//! * total working duration: first `produce_begin` to last `model_end`
//! * backlog: end-to-end latency of the last-produced item that completed

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use crate::join::SkipReason;
use crate::time::{Duration, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    ProduceBegin,
    ProduceEnd,
    BrokerDeliver,
    FetchBegin,
    FetchEnd,
    JoinEmit,
    ModelBegin,
    ModelEnd,
    PredictPublish,
    Skip(SkipReason),
    /// A pipeline's topic config, as JSON in `extra`.
    Config,
    /// Clean end of a node's run.
    Shutdown,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::ProduceBegin => "produce_begin",
            EventKind::ProduceEnd => "produce_end",
            EventKind::BrokerDeliver => "broker_deliver",
            EventKind::FetchBegin => "fetch_begin",
            EventKind::FetchEnd => "fetch_end",
            EventKind::JoinEmit => "join_emit",
            EventKind::ModelBegin => "model_begin",
            EventKind::ModelEnd => "model_end",
            EventKind::PredictPublish => "predict_publish",
            EventKind::Skip(r) => return write!(f, "skip:{r}"),
            EventKind::Config => "config",
            EventKind::Shutdown => "shutdown",
        };
        f.write_str(s)
    }
}

impl EventKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "produce_begin" => EventKind::ProduceBegin,
            "produce_end" => EventKind::ProduceEnd,
            "broker_deliver" => EventKind::BrokerDeliver,
            "fetch_begin" => EventKind::FetchBegin,
            "fetch_end" => EventKind::FetchEnd,
            "join_emit" => EventKind::JoinEmit,
            "model_begin" => EventKind::ModelBegin,
            "model_end" => EventKind::ModelEnd,
            "predict_publish" => EventKind::PredictPublish,
            "config" => EventKind::Config,
            "shutdown" => EventKind::Shutdown,
            other => EventKind::Skip(SkipReason::parse(other.strip_prefix("skip:")?)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricEvent {
    pub at: Timestamp,
    pub node: String,
    pub kind: EventKind,
    pub topic: String,
    pub stream: String,
    pub event_ts: Timestamp,
    pub seq: u64,
    pub extra: String,
}

impl MetricEvent {
    pub fn new(at: Timestamp, node: &str, kind: EventKind) -> Self {
        MetricEvent {
            at,
            node: node.to_string(),
            kind,
            topic: "-".into(),
            stream: "-".into(),
            event_ts: Timestamp::ZERO,
            seq: 0,
            extra: String::new(),
        }
    }

    pub fn item(mut self, topic: &str, stream: &str, event_ts: Timestamp, seq: u64) -> Self {
        self.topic = topic.to_string();
        self.stream = stream.to_string();
        self.event_ts = event_ts;
        self.seq = seq;
        self
    }

    pub fn extra(mut self, extra: impl Into<String>) -> Self {
        self.extra = extra.into();
        self
    }

    pub fn key(&self) -> ItemKey {
        ItemKey {
            topic: self.topic.clone(),
            stream: self.stream.clone(),
            seq: self.seq,
        }
    }

    /// Value of `key` in `extra`.
    pub fn get(&self, key: &str) -> Option<&str> {
        extra_get(&self.extra, key)
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.at.as_micros(),
            escape(&self.node),
            self.kind,
            escape(&self.topic),
            escape(&self.stream),
            self.event_ts.as_micros(),
            self.seq,
            escape(&self.extra)
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 tab-separated fields, found {}", f.len()));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| format!("bad {what} {s:?}"));
        Ok(MetricEvent {
            at: Timestamp::from_micros(num(f[0], "timestamp")?),
            node: unescape(f[1]),
            kind: EventKind::parse(f[2]).ok_or_else(|| format!("unknown event kind {:?}", f[2]))?,
            topic: unescape(f[3]),
            stream: unescape(f[4]),
            event_ts: Timestamp::from_micros(num(f[5], "event_ts")?),
            seq: num(f[6], "seq")?,
            extra: unescape(f[7]),
        })
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Percent-encode the characters reserved inside `extra`.
pub fn encode_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' | ',' | ';' | '=' | ':' => {
                let _ = write!(out, "%{:02X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

pub fn decode_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let b = s.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'%' && i + 3 <= b.len() && b[i + 1].is_ascii_hexdigit() && b[i + 2].is_ascii_hexdigit() {
            let v = u8::from_str_radix(&s[i + 1..i + 3], 16).unwrap();
            out.push(v as char);
            i += 3;
            continue;
        }
        let ch = s[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

pub fn extra_get<'a>(extra: &'a str, key: &str) -> Option<&'a str> {
    extra
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

/// `stream:seq` list as written in `slots=` and `reacts=`.
pub fn format_refs<'a>(refs: impl IntoIterator<Item = (&'a str, u64)>) -> String {
    refs.into_iter()
        .map(|(s, q)| format!("{}:{q}", encode_name(s)))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_refs(s: &str) -> Result<Vec<(String, u64)>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|r| {
            let (name, seq) = r.rsplit_once(':').ok_or_else(|| format!("bad item ref {r:?}"))?;
            let seq = seq.parse().map_err(|_| format!("bad item ref {r:?}"))?;
            Ok((decode_name(name), seq))
        })
        .collect()
}

/// Identity of an item across the whole run.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemKey {
    pub topic: String,
    pub stream: String,
    pub seq: u64,
}

impl ItemKey {
    pub fn new(topic: &str, stream: &str, seq: u64) -> Self {
        ItemKey {
            topic: topic.to_string(),
            stream: stream.to_string(),
            seq,
        }
    }
}

/// Per-node append-only event sink.
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    events: Vec<MetricEvent>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    pub fn push(&mut self, event: MetricEvent) {
        self.events.push(event);
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = MetricEvent>) {
        self.events.extend(events);
    }

    pub fn events(&self) -> &[MetricEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<MetricEvent> {
        self.events
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.events {
            writeln!(w, "{}", e.to_line())?;
        }
        w.flush()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("{file}:{line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("empty log")]
    EmptyLog,
    #[error("incomplete log: {0}")]
    Incomplete(String),
    #[error("no predictions to evaluate")]
    NoPredictions,
}

pub fn read_log_file(path: &Path) -> Result<Vec<MetricEvent>, MetricsError> {
    let f = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(MetricEvent::parse_line(&line).map_err(|reason| MetricsError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            reason,
        })?);
    }
    Ok(out)
}

/// Every `*.log` file under `dir`, merged and stably ordered by timestamp.
pub fn read_logs(dir: &Path) -> Result<Vec<MetricEvent>, MetricsError> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "log"))
        .collect();
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(read_log_file(&f)?);
    }
    all.sort_by_key(|e| e.at);
    Ok(all)
}

/// Write one `<node>.log` per node.
pub fn write_logs(dir: &Path, events: &[MetricEvent]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut by_node: BTreeMap<&str, Vec<&MetricEvent>> = BTreeMap::new();
    for e in events {
        by_node.entry(e.node.as_str()).or_default().push(e);
    }
    for (node, evs) in by_node {
        let safe: String = node
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        let mut w = io::BufWriter::new(fs::File::create(dir.join(format!("{safe}.log")))?);
        for e in evs {
            writeln!(w, "{}", e.to_line())?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Nearest-rank percentile of an ascending sample, `p` in (0, 100].
pub fn percentile(sorted: &[i64], p: f64) -> Option<i64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub min: Duration,
    pub max: Duration,
    pub mean: f64,
    pub median: Duration,
    pub p95: Duration,
    pub p99: Duration,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Duration>) -> Option<Self> {
        let mut v: Vec<i64> = values.into_iter().map(Duration::as_micros).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_unstable();
        let d = |p| Duration::from_micros(percentile(&v, p).unwrap());
        Some(Summary {
            count: v.len(),
            min: Duration::from_micros(v[0]),
            max: Duration::from_micros(*v.last().unwrap()),
            mean: v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64,
            median: d(50.0),
            p95: d(95.0),
            p99: d(99.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fate {
    Predicted,
    Skipped(SkipReason),
    Unaccounted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemMetrics {
    pub key: ItemKey,
    pub produce_begin: Timestamp,
    pub producer_sending: Option<Duration>,
    pub consumer_receiving: Option<Duration>,
    pub total_communication: Option<Duration>,
    pub reaction: Option<Duration>,
    /// Processing latency of the tuple that completed the item's lineage.
    pub processing: Option<Duration>,
    pub end_to_end: Option<Duration>,
    pub fate: Fate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub items: Vec<ItemMetrics>,
    pub producer_sending: Option<Summary>,
    pub consumer_receiving: Option<Summary>,
    pub total_communication: Option<Summary>,
    pub reaction: Option<Summary>,
    pub processing: Option<Summary>,
    pub end_to_end: Option<Summary>,
    pub queueing: Option<Summary>,
    pub queueing_samples: Vec<(ItemKey, Duration)>,
    pub total_working_duration: Option<Duration>,
    pub backlog: Option<Duration>,
    /// Bytes of inline payload that crossed the broker.
    pub broker_payload_bytes: u64,
    pub broker_frame_bytes: u64,
    /// Payload bytes moved by peer-to-peer fetches.
    pub p2p_fetched_bytes: u64,
    /// Tuples whose model invocation completed, published or not.
    pub predictions: usize,
    pub substitutions: u64,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub unaccounted: usize,
}

#[derive(Debug)]
struct TupleRec {
    emit: Timestamp,
    slots: Vec<ItemKey>,
    model_begin: Option<Timestamp>,
    model_end: Option<Timestamp>,
    prediction: Option<ItemKey>,
}

/// Compute every metric from a merged event log.
pub fn report(events: &[MetricEvent]) -> Result<MetricReport, MetricsError> {
    if events.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let mut begin: HashMap<ItemKey, Timestamp> = HashMap::new();
    let mut order: Vec<ItemKey> = Vec::new();
    let mut end: HashMap<ItemKey, Timestamp> = HashMap::new();
    let mut deliver: HashMap<ItemKey, Timestamp> = HashMap::new();
    let mut first_skip: HashMap<ItemKey, SkipReason> = HashMap::new();
    let mut tuples: BTreeMap<String, TupleRec> = BTreeMap::new();
    let mut tuple_order: Vec<String> = Vec::new();
    let mut pred_source: HashMap<ItemKey, String> = HashMap::new();
    let mut pred_time: HashMap<ItemKey, Timestamp> = HashMap::new();
    let mut reacted: HashMap<ItemKey, Timestamp> = HashMap::new();
    let mut p2p = 0u64;
    let mut broker_payload = 0u64;
    let mut broker_frames = 0u64;
    let mut substitutions = 0u64;

    for e in events {
        let key = e.key();
        match e.kind {
            EventKind::ProduceBegin => {
                if begin.insert(key.clone(), e.at).is_none() {
                    order.push(key);
                }
            }
            EventKind::ProduceEnd => {
                end.entry(key).or_insert(e.at);
            }
            EventKind::BrokerDeliver => {
                deliver.entry(key).or_insert(e.at);
            }
            EventKind::FetchEnd => {
                p2p += e.get("bytes").and_then(|b| b.parse().ok()).unwrap_or(0);
            }
            EventKind::JoinEmit => {
                let id = e
                    .get("t")
                    .ok_or_else(|| MetricsError::Incomplete("join_emit without tuple id".into()))?
                    .to_string();
                let slots = parse_refs(e.get("slots").unwrap_or(""))
                    .map_err(MetricsError::Incomplete)?
                    .into_iter()
                    .map(|(s, q)| ItemKey::new(&e.topic, &s, q))
                    .collect();
                for (s, q) in parse_refs(e.get("reacts").unwrap_or("")).map_err(MetricsError::Incomplete)? {
                    reacted.entry(ItemKey::new(&e.topic, &s, q)).or_insert(e.at);
                }
                tuple_order.push(id.clone());
                tuples.insert(
                    id,
                    TupleRec {
                        emit: e.at,
                        slots,
                        model_begin: None,
                        model_end: None,
                        prediction: None,
                    },
                );
            }
            EventKind::ModelBegin | EventKind::ModelEnd => {
                if let Some(t) = e.get("t").and_then(|id| tuples.get_mut(id)) {
                    if e.kind == EventKind::ModelBegin {
                        t.model_begin = Some(e.at);
                        substitutions += e.get("subs").and_then(|s| s.parse().ok()).unwrap_or(0);
                    } else {
                        t.model_end = Some(e.at);
                    }
                }
            }
            EventKind::PredictPublish => {
                if let Some(id) = e.get("t") {
                    pred_source.insert(key.clone(), id.to_string());
                    pred_time.insert(key.clone(), e.at);
                    if let Some(t) = tuples.get_mut(id) {
                        t.prediction = Some(key);
                    }
                }
            }
            EventKind::Skip(r) => {
                first_skip.entry(key).or_insert(r);
            }
            EventKind::Shutdown => {
                broker_payload += e.get("broker_payload_bytes").and_then(|b| b.parse().ok()).unwrap_or(0);
                broker_frames += e.get("broker_frame_bytes").and_then(|b| b.parse().ok()).unwrap_or(0);
            }
            _ => {}
        }
    }

    // tuples holding each item, in emission order
    let mut holders: HashMap<&ItemKey, Vec<&str>> = HashMap::new();
    for id in &tuple_order {
        for k in &tuples[id].slots {
            holders.entry(k).or_default().push(id);
        }
    }

    // terminal completion of a tuple: follow its prediction downstream
    fn terminal(
        id: &str,
        tuples: &BTreeMap<String, TupleRec>,
        holders: &HashMap<&ItemKey, Vec<&str>>,
        memo: &mut HashMap<String, Option<(Timestamp, String)>>,
        depth: usize,
    ) -> Option<(Timestamp, String)> {
        if let Some(v) = memo.get(id) {
            return v.clone();
        }
        let t = &tuples[id];
        let own = t.model_end.map(|e| (e, id.to_string()));
        let down = if depth < 32 {
            t.prediction
                .as_ref()
                .and_then(|p| holders.get(p))
                .and_then(|hs| {
                    hs.iter()
                        .filter_map(|h| terminal(h, tuples, holders, memo, depth + 1))
                        .min_by_key(|(at, _)| *at)
                })
        } else {
            None
        };
        let v = match own {
            Some(o) => Some(down.unwrap_or(o)),
            None => None,
        };
        memo.insert(id.to_string(), v.clone());
        v
    }

    let mut memo = HashMap::new();
    let mut items = Vec::with_capacity(order.len());
    let mut skipped: BTreeMap<SkipReason, usize> = BTreeMap::new();
    let mut unaccounted = 0;
    for key in &order {
        let pb = begin[key];
        let producer_sending = end.get(key).map(|e| *e - pb);
        let consumer_receiving = match (end.get(key), deliver.get(key)) {
            (Some(e), Some(d)) => Some(*d - *e),
            _ => None,
        };
        let total_communication = match (producer_sending, consumer_receiving) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        let hs = holders.get(key).map(Vec::as_slice).unwrap_or(&[]);
        let completed = hs.iter().any(|h| tuples[*h].model_end.is_some());
        let best = hs
            .iter()
            .filter_map(|h| terminal(h, &tuples, &holders, &mut memo, 0))
            .min_by_key(|(at, _)| *at);
        let (end_to_end, processing) = match &best {
            Some((at, tid)) => {
                let t = &tuples[tid];
                (Some(*at - pb), t.model_begin.zip(t.model_end).map(|(b, e)| e - b))
            }
            None => (None, None),
        };
        let fate = if completed {
            Fate::Predicted
        } else if let Some(r) = first_skip.get(key) {
            *skipped.entry(*r).or_default() += 1;
            Fate::Skipped(*r)
        } else {
            unaccounted += 1;
            Fate::Unaccounted
        };
        items.push(ItemMetrics {
            key: key.clone(),
            produce_begin: pb,
            producer_sending,
            consumer_receiving,
            total_communication,
            reaction: reacted.get(key).map(|r| *r - pb),
            processing,
            end_to_end,
            fate,
        });
    }

    let mut queueing_samples = Vec::new();
    for (pred, src) in &pred_source {
        let Some(made) = tuples.get(src).and_then(|t| t.model_end) else { continue };
        if let Some(first) = holders.get(pred).and_then(|hs| hs.iter().map(|h| tuples[*h].emit).min()) {
            queueing_samples.push((pred.clone(), first - made));
        }
    }
    queueing_samples.sort_by(|a, b| a.0.cmp(&b.0));

    // prediction items react too: their production time is the publish
    let mut reactions: Vec<Duration> = items.iter().filter_map(|i| i.reaction).collect();
    for (k, at) in &reacted {
        if let Some(p) = pred_time.get(k) {
            reactions.push(*at - *p);
        }
    }

    let first_begin = begin.values().min().copied();
    let last_end = tuples.values().filter_map(|t| t.model_end).max();
    let backlog = items
        .iter()
        .filter(|i| i.end_to_end.is_some())
        .max_by_key(|i| (i.produce_begin, i.key.clone()))
        .and_then(|i| i.end_to_end);

    Ok(MetricReport {
        producer_sending: Summary::of(items.iter().filter_map(|i| i.producer_sending)),
        consumer_receiving: Summary::of(items.iter().filter_map(|i| i.consumer_receiving)),
        total_communication: Summary::of(items.iter().filter_map(|i| i.total_communication)),
        reaction: Summary::of(reactions),
        processing: Summary::of(
            tuples
                .values()
                .filter_map(|t| t.model_begin.zip(t.model_end).map(|(b, e)| e - b)),
        ),
        end_to_end: Summary::of(items.iter().filter_map(|i| i.end_to_end)),
        queueing: Summary::of(queueing_samples.iter().map(|(_, d)| *d)),
        queueing_samples,
        total_working_duration: first_begin.zip(last_end).map(|(b, e)| e - b),
        backlog,
        broker_payload_bytes: broker_payload,
        broker_frame_bytes: broker_frames,
        p2p_fetched_bytes: p2p,
        predictions: tuples.values().filter(|t| t.model_end.is_some()).count(),
        substitutions,
        skipped,
        unaccounted,
        items,
    })
}

impl MetricReport {
    /// `metric,statistic,value` rows; durations in milliseconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,statistic,value\n");
        let dists = [
            ("producer_sending_latency_ms", &self.producer_sending),
            ("consumer_receiving_latency_ms", &self.consumer_receiving),
            ("total_communication_latency_ms", &self.total_communication),
            ("reaction_time_ms", &self.reaction),
            ("processing_latency_ms", &self.processing),
            ("end_to_end_latency_ms", &self.end_to_end),
            ("queueing_time_ms", &self.queueing),
        ];
        for (name, s) in dists {
            let Some(s) = s else { continue };
            let _ = writeln!(out, "{name},count,{}", s.count);
            for (stat, d) in [
                ("min", s.min),
                ("median", s.median),
                ("p95", s.p95),
                ("p99", s.p99),
                ("max", s.max),
            ] {
                let _ = writeln!(out, "{name},{stat},{:.3}", d.as_millis_f64());
            }
            let _ = writeln!(out, "{name},mean,{:.3}", s.mean / 1e3);
        }
        if let Some(d) = self.total_working_duration {
            let _ = writeln!(out, "total_working_duration_ms,value,{:.3}", d.as_millis_f64());
        }
        if let Some(d) = self.backlog {
            let _ = writeln!(out, "backlog_ms,value,{:.3}", d.as_millis_f64());
        }
        let _ = writeln!(out, "broker_payload_bytes,total,{}", self.broker_payload_bytes);
        let _ = writeln!(out, "broker_frame_bytes,total,{}", self.broker_frame_bytes);
        let _ = writeln!(out, "p2p_fetched_bytes,total,{}", self.p2p_fetched_bytes);
        let _ = writeln!(out, "items,total,{}", self.items.len());
        let _ = writeln!(out, "predictions,total,{}", self.predictions);
        let _ = writeln!(out, "substitutions,total,{}", self.substitutions);
        for r in SkipReason::ALL {
            let _ = writeln!(out, "skipped,{},{}", r, self.skipped.get(&r).copied().unwrap_or(0));
        }
        let _ = writeln!(out, "unaccounted,total,{}", self.unaccounted);
        out
    }

    pub fn item(&self, key: &ItemKey) -> Option<&ItemMetrics> {
        self.items.iter().find(|i| &i.key == key)
    }
}

/// Step function of ground-truth labels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelTimeline {
    steps: Vec<(Timestamp, i64)>,
}

impl LabelTimeline {
    pub fn new(mut steps: Vec<(Timestamp, i64)>) -> Self {
        steps.sort_by_key(|(t, _)| *t);
        LabelTimeline { steps }
    }

    /// Label in force at `t`: the last step at or before `t`.
    pub fn label_at(&self, t: Timestamp) -> Option<i64> {
        let i = self.steps.partition_point(|(s, _)| *s <= t);
        i.checked_sub(1).map(|i| self.steps[i].1)
    }

    pub fn steps(&self) -> &[(Timestamp, i64)] {
        &self.steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<i64, f64>,
    pub evaluated: usize,
    /// Predictions emitted before the first label.
    pub excluded: usize,
}

/// Score `(emit_ts, label)` predictions against the label in force at emission.
pub fn real_time_accuracy(predictions: &[(Timestamp, i64)], truth: &LabelTimeline) -> Result<AccuracyReport, MetricsError> {
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for (t, p) in predictions {
        match truth.label_at(*t) {
            Some(l) => pairs.push((*p, l)),
            None => excluded += 1,
        }
    }
    if pairs.is_empty() {
        return Err(MetricsError::NoPredictions);
    }
    let correct = pairs.iter().filter(|(p, l)| p == l).count();
    let classes: HashSet<i64> = pairs.iter().flat_map(|(p, l)| [*p, *l]).collect();
    let mut per_class_f1 = BTreeMap::new();
    for c in classes {
        let tp = pairs.iter().filter(|(p, l)| *p == c && *l == c).count() as f64;
        let fp = pairs.iter().filter(|(p, l)| *p == c && *l != c).count() as f64;
        let fneg = pairs.iter().filter(|(p, l)| *p != c && *l == c).count() as f64;
        let denom = 2.0 * tp + fp + fneg;
        per_class_f1.insert(c, if denom == 0.0 { 0.0 } else { 2.0 * tp / denom });
    }
    let macro_f1 = per_class_f1.values().sum::<f64>() / per_class_f1.len() as f64;
    Ok(AccuracyReport {
        accuracy: correct as f64 / pairs.len() as f64,
        macro_f1,
        per_class_f1,
        evaluated: pairs.len(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> Timestamp {
        Timestamp::from_millis(v)
    }

    fn ev(at: u64, node: &str, kind: EventKind, stream: &str, seq: u64) -> MetricEvent {
        MetricEvent::new(ms(at), node, kind).item("t", stream, ms(0), seq)
    }

    #[test]
    fn line_round_trip_with_escapes() {
        let e = MetricEvent::new(ms(5), "node\t1", EventKind::Skip(SkipReason::Stale))
            .item("top", "s\\x", ms(3), 9)
            .extra("a=1;b=x\ny");
        let line = e.to_line();
        assert_eq!(line.split('\t').count(), 8);
        assert!(!line.contains('\n'));
        assert_eq!(MetricEvent::parse_line(&line).unwrap(), e);
        assert_eq!(
            MetricEvent::parse_line("1\tn\tskip:nope\tt\ts\t0\t0\t").unwrap_err(),
            "unknown event kind \"skip:nope\""
        );
    }

    #[test]
    fn refs_round_trip() {
        let s = format_refs([("a:b", 1), ("c,d", 2), ("e%", 3)]);
        assert_eq!(
            parse_refs(&s).unwrap(),
            vec![("a:b".to_string(), 1), ("c,d".to_string(), 2), ("e%".to_string(), 3)]
        );
        assert!(parse_refs("").unwrap().is_empty());
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<i64> = (1..=10).collect();
        assert_eq!(percentile(&v, 50.0), Some(5));
        assert_eq!(percentile(&v, 95.0), Some(10));
        assert_eq!(percentile(&v, 10.0), Some(1));
        assert_eq!(percentile(&[7], 99.0), Some(7));
        assert_eq!(percentile(&[], 50.0), None);
    }

    /// One item through every stage at hand-picked times.
    fn single_item_log() -> Vec<MetricEvent> {
        vec![
            ev(0, "src", EventKind::ProduceBegin, "a", 0),
            ev(2, "src", EventKind::ProduceEnd, "a", 0),
            ev(5, "m", EventKind::BrokerDeliver, "a", 0),
            ev(6, "m", EventKind::JoinEmit, "a", 0).extra("t=m/t#0;slots=a:0;reacts=a:0"),
            ev(7, "m", EventKind::FetchBegin, "a", 0),
            ev(11, "m", EventKind::FetchEnd, "a", 0).extra("bytes=100"),
            ev(12, "m", EventKind::ModelBegin, "a", 0).extra("t=m/t#0"),
            ev(20, "m", EventKind::ModelEnd, "a", 0).extra("t=m/t#0"),
        ]
    }

    #[test]
    fn single_item_hand_subtraction() {
        let r = report(&single_item_log()).unwrap();
        let i = &r.items[0];
        assert_eq!(i.producer_sending, Some(Duration::from_millis(2)));
        assert_eq!(i.consumer_receiving, Some(Duration::from_millis(3)));
        assert_eq!(i.total_communication, Some(Duration::from_millis(5)));
        assert_eq!(i.reaction, Some(Duration::from_millis(6)));
        assert_eq!(i.processing, Some(Duration::from_millis(8)));
        assert_eq!(i.end_to_end, Some(Duration::from_millis(20)));
        assert_eq!(i.fate, Fate::Predicted);
        assert_eq!(r.total_working_duration, Some(Duration::from_millis(20)));
        assert_eq!(r.backlog, Some(Duration::from_millis(20)));
        assert_eq!(r.p2p_fetched_bytes, 100);
    }

    #[test]
    fn reaction_example() {
        let log = vec![
            ev(100, "src", EventKind::ProduceBegin, "a", 0),
            ev(109, "m", EventKind::JoinEmit, "a", 0).extra("t=x;slots=a:0;reacts=a:0"),
        ];
        assert_eq!(report(&log).unwrap().items[0].reaction, Some(Duration::from_millis(9)));
    }

    #[test]
    fn queueing_of_late_fusion() {
        let mut log = Vec::new();
        let finish = [10, 11, 12, 40];
        for (i, f) in finish.iter().enumerate() {
            let s = format!("s{i}");
            let id = format!("l{i}");
            log.push(ev(0, "src", EventKind::ProduceBegin, &s, 0));
            log.push(ev(1, &id, EventKind::JoinEmit, &s, 0).extra(format!("t={id};slots={s}:0;reacts={s}:0")));
            log.push(ev(2, &id, EventKind::ModelBegin, &s, 0).extra(format!("t={id}")));
            log.push(ev(*f, &id, EventKind::ModelEnd, &s, 0).extra(format!("t={id}")));
            log.push(
                MetricEvent::new(ms(*f), &id, EventKind::PredictPublish)
                    .item("votes", &format!("p{i}"), ms(*f), 0)
                    .extra(format!("t={id};value=1")),
            );
        }
        log.push(
            MetricEvent::new(ms(40), "ens", EventKind::JoinEmit)
                .item("votes", "p3", ms(40), 0)
                .extra("t=e;slots=p0:0,p1:0,p2:0,p3:0;reacts=p3:0"),
        );
        log.push(MetricEvent::new(ms(41), "ens", EventKind::ModelBegin).extra("t=e"));
        log.push(MetricEvent::new(ms(42), "ens", EventKind::ModelEnd).extra("t=e"));
        log.sort_by_key(|e| e.at);
        let r = report(&log).unwrap();
        let q: Vec<i64> = r.queueing_samples.iter().map(|(_, d)| d.as_micros() / 1000).collect();
        assert_eq!(q, vec![30, 29, 28, 0]);
        // lineage: raw items complete at the ensemble
        for i in &r.items {
            assert_eq!(i.end_to_end, Some(Duration::from_millis(42)));
        }
    }

    #[test]
    fn skipped_items_take_first_reason() {
        let log = vec![
            ev(0, "src", EventKind::ProduceBegin, "a", 0),
            ev(0, "src", EventKind::ProduceBegin, "a", 1),
            ev(0, "src", EventKind::ProduceBegin, "a", 2),
            ev(3, "m", EventKind::Skip(SkipReason::Stale), "a", 0),
            ev(4, "m", EventKind::Skip(SkipReason::Skew), "a", 0),
        ];
        let r = report(&log).unwrap();
        assert_eq!(r.items[0].fate, Fate::Skipped(SkipReason::Stale));
        assert_eq!(r.items[1].fate, Fate::Unaccounted);
        assert_eq!(r.unaccounted, 2);
        assert!(report(&[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let truth = LabelTimeline::new((0..10).map(|k| (ms(k * 100), (k % 2) as i64)).collect());
        let exact: Vec<_> = (0..10).map(|k| (ms(k * 100 + 10), (k % 2) as i64)).collect();
        assert_eq!(real_time_accuracy(&exact, &truth).unwrap().accuracy, 1.0);
        // each prediction emitted 150 ms after its label's start sees the successor label
        let late: Vec<_> = (0..9).map(|k| (ms(k * 100 + 150), (k % 2) as i64)).collect();
        let r = real_time_accuracy(&late, &truth).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.macro_f1, 0.0);
        assert!(matches!(real_time_accuracy(&[], &truth), Err(MetricsError::NoPredictions)));
        let truth2 = LabelTimeline::new(vec![(ms(100), 1)]);
        let r = real_time_accuracy(&[(ms(50), 1), (ms(150), 1)], &truth2).unwrap();
        assert_eq!((r.evaluated, r.excluded), (1, 1));
    }

    #[test]
    fn csv_has_rows() {
        let csv = report(&single_item_log()).unwrap().to_csv();
        assert!(csv.starts_with("metric,statistic,value\n"));
        assert!(csv.contains("end_to_end_latency_ms,median,20.000"));
        assert!(csv.contains("skipped,stale,0"));
    }

    #[test]
    fn logs_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let log = single_item_log();
        write_logs(dir.path(), &log).unwrap();
        let back = read_logs(dir.path()).unwrap();
        assert_eq!(report(&back).unwrap(), report(&log).unwrap());
    }

    /// Step-function oracle: walk labels and predictions in time order.
    fn walk_accuracy(labels: &[(u64, i64)], preds: &[(u64, i64)]) -> Option<f64> {
        let mut ok = 0;
        let mut n = 0;
        for (t, p) in preds {
            let mut cur = None;
            for (lt, l) in labels {
                if lt <= t {
                    cur = Some(*l);
                }
            }
            if let Some(l) = cur {
                n += 1;
                if l == *p {
                    ok += 1;
                }
            }
        }
        (n > 0).then(|| ok as f64 / n as f64)
    }

    proptest! {
        #[test]
        fn accuracy_matches_walk(
            gaps in prop::collection::vec((1u64..50, 0i64..3), 1..30),
            preds in prop::collection::vec((0u64..1500, 0i64..3), 0..60),
        ) {
            let mut t = 0;
            let labels: Vec<(u64, i64)> = gaps.iter().map(|(g, l)| { t += g; (t, *l) }).collect();
            let truth = LabelTimeline::new(labels.iter().map(|(t, l)| (ms(*t), *l)).collect());
            let p: Vec<_> = preds.iter().map(|(t, l)| (ms(*t), *l)).collect();
            match (real_time_accuracy(&p, &truth), walk_accuracy(&labels, &preds)) {
                (Ok(r), Some(a)) => prop_assert!((r.accuracy - a).abs() < 1e-12),
                (Err(_), None) => {}
                (r, a) => prop_assert!(false, "mismatch {:?} {:?}", r, a),
            }
        }

        #[test]
        fn report_is_pure(offsets in prop::collection::vec(0u64..50, 1..20)) {
            let mut log = Vec::new();
            for (i, o) in offsets.iter().enumerate() {
                let id = format!("x{i}");
                log.push(ev(*o, "s", EventKind::ProduceBegin, "a", i as u64));
                log.push(ev(o + 1, "s", EventKind::ProduceEnd, "a", i as u64));
                log.push(ev(o + 3, "m", EventKind::BrokerDeliver, "a", i as u64));
                log.push(ev(o + 4, "m", EventKind::JoinEmit, "a", i as u64).extra(format!("t={id};slots=a:{i};reacts=a:{i}")));
                log.push(ev(o + 5, "m", EventKind::ModelBegin, "a", i as u64).extra(format!("t={id}")));
                log.push(ev(o + 9, "m", EventKind::ModelEnd, "a", i as u64).extra(format!("t={id}")));
            }
            log.sort_by_key(|e| e.at);
            let a = report(&log).unwrap();
            prop_assert_eq!(&a, &report(&log).unwrap());
            for i in &a.items {
                let e2e = i.end_to_end.unwrap();
                prop_assert_eq!(i.total_communication.unwrap(), i.producer_sending.unwrap() + i.consumer_receiving.unwrap());
                prop_assert!(e2e >= i.total_communication.unwrap());
                prop_assert!(e2e >= i.processing.unwrap());
            }
        }
    }
}
