//! Model operators and the per-topic pipeline that feeds them.
//!
//! [`Pipeline`] does no I/O. A driver (the simulator or a live consumer
//! process) hands it deliveries, resolves the payload fetches it asks for,
//! waits out the model cost, and carries out the returned [`Effect`]s. The
//! pipeline records every lifecycle event for the metrics log.
//!
//! Flow for one tuple: `on_deliver` → joiner → skew filter → FIFO queue →
//! `start_next` (freshness recheck, fetch list) → `on_fetched` (fail-soft,
//! freshness recheck, model call) → `on_model_done` (prediction published).
//! At most one invocation is in flight.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::join::{skew_filter, JoinError, SkewVerdict, SkipReason, TopicJoiner};
use crate::metrics::{format_refs, EventKind, MetricEvent};
use crate::store::FetchError;
use crate::time::{Duration, Timestamp};
use crate::types::{
    is_fresh, Body, ContractError, Header, ItemRef, JoinTuple, Payload, PayloadLocator, StreamId, TopicConfig, TopicId,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("slot {slot} is not a whole number of 8-byte labels")]
    NotALabel { slot: usize },
    #[error("empty input")]
    Empty,
}

/// Read the little-endian `i64` label at the start of a payload.
pub fn label_of(payload: &[u8]) -> Option<i64> {
    payload.get(..8).map(|b| i64::from_le_bytes(b.try_into().unwrap()))
}

pub fn encode_label(v: i64) -> Payload {
    Payload::copy_from_slice(&v.to_le_bytes())
}

/// Modal label; ties go to the label seen at the lowest slot index.
pub fn majority_vote(labels: &[i64]) -> Option<i64> {
    let mut counts: Vec<(i64, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(v, _)| v == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((*l, 1)),
        }
    }
    let best = counts.iter().map(|(_, c)| *c).max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(v, _)| v)
}

/// Synthetic deterministic models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Concatenate slot payloads in slot order.
    Identity,
    /// Sum of slot labels.
    Sum,
    /// `above` if the sum of slot labels is at least `threshold`, else `below`.
    Threshold { threshold: i64, above: i64, below: i64 },
    /// Look up the comma-joined labels; `default` when absent.
    TableLookup { table: BTreeMap<String, i64>, default: i64 },
    MajorityVote,
    /// Total payload length as a label. Cheap stand-in for a model over large inputs.
    ByteCount,
}

impl ModelKind {
    /// Slot labels in order. A slot may carry several labels back to back,
    /// as produced by an `Identity` stage over label streams.
    fn labels(payloads: &[Payload]) -> Result<Vec<i64>, ModelError> {
        if payloads.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut out = Vec::with_capacity(payloads.len());
        for (slot, p) in payloads.iter().enumerate() {
            if p.is_empty() || p.len() % 8 != 0 {
                return Err(ModelError::NotALabel { slot });
            }
            out.extend(p.chunks_exact(8).map(|c| label_of(c).unwrap()));
        }
        Ok(out)
    }

    pub fn apply(&self, payloads: &[Payload]) -> Result<Payload, ModelError> {
        match self {
            ModelKind::Identity => {
                let mut out = Vec::with_capacity(payloads.iter().map(|p| p.len()).sum());
                for p in payloads {
                    out.extend_from_slice(p);
                }
                Ok(Payload::from(out))
            }
            ModelKind::Sum => Ok(encode_label(Self::labels(payloads)?.iter().sum())),
            ModelKind::Threshold {
                threshold,
                above,
                below,
            } => {
                let s: i64 = Self::labels(payloads)?.iter().sum();
                Ok(encode_label(if s >= *threshold { *above } else { *below }))
            }
            ModelKind::TableLookup { table, default } => {
                let key = Self::labels(payloads)?
                    .iter()
                    .map(i64::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                Ok(encode_label(table.get(&key).copied().unwrap_or(*default)))
            }
            ModelKind::MajorityVote => {
                let labels = Self::labels(payloads)?;
                Ok(encode_label(majority_vote(&labels).ok_or(ModelError::Empty)?))
            }
            ModelKind::ByteCount => Ok(encode_label(payloads.iter().map(|p| p.len() as i64).sum())),
        }
    }

    /// CLI names: `identity`, `sum`, `majority_vote`, `byte_count`, `threshold:<n>`.
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "identity" => ModelKind::Identity,
            "sum" => ModelKind::Sum,
            "majority_vote" | "majority" => ModelKind::MajorityVote,
            "byte_count" => ModelKind::ByteCount,
            other => {
                let n = other.strip_prefix("threshold:")?.parse().ok()?;
                ModelKind::Threshold {
                    threshold: n,
                    above: 1,
                    below: 0,
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailSoft {
    #[default]
    DropTuple,
    /// Reuse the stream's most recent good payload; drop if there is none.
    LastKnownGood,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputStream {
    pub topic: TopicId,
    pub stream: StreamId,
}

/// A model bound to the topic it consumes and the stream it produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOperator {
    pub id: String,
    pub model: ModelKind,
    /// Time one call takes.
    #[serde(default)]
    pub cost: Duration,
    #[serde(default)]
    pub output: Option<OutputStream>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub node: String,
    pub topic: TopicConfig,
    pub operator: ModelOperator,
    pub fail_soft: FailSoft,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub value: Payload,
    pub source_model: String,
    pub tuple_id: String,
    pub input_trigger_ts: Timestamp,
    pub emit_ts: Timestamp,
}

/// Something the driver must do on the pipeline's behalf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Effect {
    /// Release a shared-mode delivery at the broker.
    Ack { seq: u64 },
    /// Publish a prediction header (inline payload) to the broker.
    Publish(Header),
}

/// A dequeued tuple waiting for its lazy payloads.
#[derive(Clone, Debug)]
pub struct Job {
    pub id: String,
    pub tuple: JoinTuple,
    /// Slots whose payload must be fetched, with the locator to use.
    pub fetches: Vec<(usize, PayloadLocator)>,
    acks: Vec<u64>,
}

/// A model call whose result becomes visible at `finish_at`.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub id: String,
    pub tuple: JoinTuple,
    pub value: Result<Payload, ModelError>,
    pub finish_at: Timestamp,
    acks: Vec<u64>,
}

pub enum FetchOutcome {
    Invoke(Invocation),
    Dropped(Vec<Effect>),
}

#[derive(Clone, Debug)]
struct Queued {
    id: String,
    tuple: JoinTuple,
    acks: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub tuples_accepted: u64,
    pub tuples_rejected_skew: u64,
    pub tuples_stale: u64,
    pub tuples_failed: u64,
    pub substitutions: u64,
    pub predictions: u64,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    joiner: TopicJoiner,
    queue: VecDeque<Queued>,
    busy: bool,
    next_tuple: u64,
    next_out: u64,
    last_good: Vec<Option<Payload>>,
    /// Latest time the joiner was driven to; logged at shutdown for replay.
    driven: Option<Timestamp>,
    events: Vec<MetricEvent>,
    predictions: Vec<Prediction>,
    stats: PipelineStats,
}

impl Pipeline {
    /// Logs a `config` record at `now` so the run can be replayed.
    pub fn new(cfg: PipelineConfig, now: Timestamp) -> Result<Self, ContractError> {
        cfg.topic.validate()?;
        let joiner = TopicJoiner::new(&cfg.topic);
        let n = cfg.topic.streams.len();
        let config_json = serde_json::to_string(&cfg.topic).expect("topic config serializes");
        let mut p = Pipeline {
            joiner,
            queue: VecDeque::new(),
            busy: false,
            next_tuple: 0,
            next_out: 0,
            last_good: vec![None; n],
            driven: None,
            events: Vec::new(),
            predictions: Vec::new(),
            stats: PipelineStats::default(),
            cfg,
        };
        let topic = p.cfg.topic.topic.to_string();
        p.events.push(
            MetricEvent::new(now, &p.cfg.node, EventKind::Config)
                .item(&topic, "-", now, 0)
                .extra(config_json),
        );
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.joiner.next_deadline()
    }

    pub fn take_events(&mut self) -> Vec<MetricEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn take_predictions(&mut self) -> Vec<Prediction> {
        std::mem::take(&mut self.predictions)
    }

    fn topic_name(&self) -> String {
        self.cfg.topic.topic.to_string()
    }

    fn item_event(&self, at: Timestamp, kind: EventKind, r: &ItemRef) -> MetricEvent {
        MetricEvent::new(at, &self.cfg.node, kind).item(&self.topic_name(), r.stream.as_str(), r.event_ts, r.seq)
    }

    /// Skip records for every item a discarded tuple touched.
    fn skip_tuple(&mut self, tuple: &JoinTuple, reason: SkipReason, now: Timestamp, extra: &str) {
        let mut seen = HashSet::new();
        let refs: Vec<ItemRef> = tuple
            .covers
            .iter()
            .cloned()
            .chain(tuple.slot_refs())
            .filter(|r| seen.insert((r.stream.clone(), r.seq)))
            .collect();
        for r in refs {
            let e = self.item_event(now, EventKind::Skip(reason), &r).extra(extra);
            self.events.push(e);
        }
    }

    fn drain_dropped(&mut self, now: Timestamp) {
        for (r, reason) in self.joiner.take_dropped() {
            let e = self.item_event(now, EventKind::Skip(reason), &r);
            self.events.push(e);
        }
    }

    /// Filter joiner output and queue the survivors. Returns whether any tuple was queued.
    fn admit(&mut self, tuples: Vec<JoinTuple>, now: Timestamp, ack: Option<u64>) -> bool {
        let mut ack = ack;
        let mut queued = false;
        for tuple in tuples {
            if let SkewVerdict::Reject(skew) = skew_filter(&tuple, self.cfg.topic.max_skew, self.cfg.topic.time_basis) {
                self.stats.tuples_rejected_skew += 1;
                self.skip_tuple(&tuple, SkipReason::Skew, now, &format!("skew={}", skew.as_micros()));
                continue;
            }
            let id = format!("{}/{}#{}", self.cfg.node, self.cfg.topic.topic, self.next_tuple);
            self.next_tuple += 1;
            self.stats.tuples_accepted += 1;
            let trig = tuple.trigger_ref().expect("trigger stream has a slot");
            let slots = tuple.slot_refs();
            let extra = format!(
                "t={id};slots={};reacts={}",
                format_refs(slots.iter().map(|r| (r.stream.as_str(), r.seq))),
                format_refs(tuple.covers.iter().map(|r| (r.stream.as_str(), r.seq)))
            );
            let e = self.item_event(tuple.emit_ts.max(now), EventKind::JoinEmit, &trig).extra(extra);
            self.events.push(e);
            self.queue.push_back(Queued {
                id,
                tuple,
                acks: ack.take().into_iter().collect(),
            });
            queued = true;
        }
        queued
    }

    /// A header arrived from the broker (`broker_seq` set) or locally.
    pub fn on_deliver(&mut self, broker_seq: Option<u64>, header: Header, now: Timestamp) -> Result<Vec<Effect>, JoinError> {
        let fresh = is_fresh(&header, now, self.cfg.topic.freshness_threshold);
        let inline = match &header.body {
            Body::Inline(p) => p.len(),
            Body::Lazy(_) => 0,
        };
        let r = header.item_ref();
        let e = self.item_event(now, EventKind::BrokerDeliver, &r).extra(format!(
            "pub={};join={};bytes={inline}",
            header.publish_ts.as_micros(),
            u8::from(fresh)
        ));
        self.events.push(e);
        let mut effects = Vec::new();
        if !fresh {
            let e = self.item_event(now, EventKind::Skip(SkipReason::Stale), &r);
            self.events.push(e);
            effects.extend(broker_seq.map(|seq| Effect::Ack { seq }));
            return Ok(effects);
        }
        let tuples = self.joiner.on_arrival(header, now)?;
        self.driven = self.driven.max(Some(now));
        if !self.admit(tuples, now, broker_seq) {
            effects.extend(broker_seq.map(|seq| Effect::Ack { seq }));
        }
        self.drain_dropped(now);
        Ok(effects)
    }

    /// Record a delivery the consumer chose not to join, e.g. when downsampling.
    pub fn skip_delivery(&mut self, broker_seq: Option<u64>, header: &Header, reason: SkipReason, now: Timestamp) -> Vec<Effect> {
        let r = header.item_ref();
        let e = self.item_event(now, EventKind::BrokerDeliver, &r).extra(format!(
            "pub={};join=0;bytes={}",
            header.publish_ts.as_micros(),
            match &header.body {
                Body::Inline(p) => p.len(),
                Body::Lazy(_) => 0,
            }
        ));
        self.events.push(e);
        let e = self.item_event(now, EventKind::Skip(reason), &r);
        self.events.push(e);
        broker_seq.map(|seq| Effect::Ack { seq }).into_iter().collect()
    }

    /// Close due windows of a time-triggered join.
    pub fn on_tick(&mut self, now: Timestamp) {
        let tuples = self.joiner.on_tick(now);
        self.driven = self.driven.max(Some(now));
        self.admit(tuples, now, None);
        self.drain_dropped(now);
    }

    fn release(&mut self, acks: Vec<u64>) -> Vec<Effect> {
        self.busy = false;
        acks.into_iter().map(|seq| Effect::Ack { seq }).collect()
    }

    fn any_stale(&self, tuple: &JoinTuple, now: Timestamp) -> bool {
        tuple
            .slots
            .iter()
            .any(|s| !s.substituted && !is_fresh(&s.header, now, self.cfg.topic.freshness_threshold))
    }

    /// Dequeue the next tuple unless a model call is in flight.
    pub fn start_next(&mut self, now: Timestamp) -> (Option<Job>, Vec<Effect>) {
        let mut effects = Vec::new();
        if self.busy {
            return (None, effects);
        }
        while let Some(Queued { id, mut tuple, acks }) = self.queue.pop_front() {
            if self.any_stale(&tuple, now) {
                self.stats.tuples_stale += 1;
                self.skip_tuple(&tuple, SkipReason::Stale, now, &format!("t={id}"));
                effects.extend(acks.into_iter().map(|seq| Effect::Ack { seq }));
                continue;
            }
            let mut fetches = Vec::new();
            for (i, slot) in tuple.slots.iter_mut().enumerate() {
                match &slot.header.body {
                    Body::Inline(p) => slot.payload = Some(p.clone()),
                    Body::Lazy(loc) => fetches.push((i, loc.clone())),
                }
            }
            for (i, _) in &fetches {
                let r = tuple.slots[*i].header.item_ref();
                let e = self.item_event(now, EventKind::FetchBegin, &r).extra(format!("t={id}"));
                self.events.push(e);
            }
            self.busy = true;
            return (
                Some(Job {
                    id,
                    tuple,
                    fetches,
                    acks,
                }),
                effects,
            );
        }
        (None, effects)
    }

    /// Results arrive in the order of `job.fetches`.
    pub fn on_fetched(&mut self, job: Job, results: Vec<Result<Payload, FetchError>>, now: Timestamp) -> FetchOutcome {
        let Job {
            id,
            mut tuple,
            fetches,
            acks,
        } = job;
        let mut failed = None;
        for ((i, _), res) in fetches.iter().zip(results) {
            let r = tuple.slots[*i].header.item_ref();
            let bytes = res.as_ref().map_or(0, |p| p.len());
            let status = match &res {
                Ok(_) => "ok",
                Err(FetchError::Stale) => "stale",
                Err(FetchError::Evicted) => "evicted",
                Err(FetchError::NotFound) => "not_found",
                Err(FetchError::Transport(_)) => "transport",
            };
            let e = self
                .item_event(now, EventKind::FetchEnd, &r)
                .extra(format!("t={id};bytes={bytes};status={status}"));
            self.events.push(e);
            match res {
                Ok(p) => tuple.slots[*i].payload = Some(p),
                Err(FetchError::Stale) => failed = failed.or(Some(SkipReason::Stale)),
                Err(_) => match (self.cfg.fail_soft, &self.last_good[*i]) {
                    (FailSoft::LastKnownGood, Some(prev)) => {
                        tuple.slots[*i].payload = Some(prev.clone());
                        tuple.slots[*i].substituted = true;
                    }
                    _ => failed = failed.or(Some(SkipReason::FailedFetch)),
                },
            }
        }
        if failed.is_none() && self.any_stale(&tuple, now) {
            failed = Some(SkipReason::Stale);
        }
        if let Some(reason) = failed {
            match reason {
                SkipReason::Stale => self.stats.tuples_stale += 1,
                _ => self.stats.tuples_failed += 1,
            }
            self.skip_tuple(&tuple, reason, now, &format!("t={id}"));
            return FetchOutcome::Dropped(self.release(acks));
        }
        let subs = tuple.slots.iter().filter(|s| s.substituted).count();
        self.stats.substitutions += subs as u64;
        for (i, s) in tuple.slots.iter().enumerate() {
            if !s.substituted {
                self.last_good[i] = s.payload.clone();
            }
        }
        let trig = tuple.trigger_ref().expect("trigger stream has a slot");
        let e = self
            .item_event(now, EventKind::ModelBegin, &trig)
            .extra(format!("t={id};subs={subs}"));
        self.events.push(e);
        let payloads: Vec<Payload> = tuple.slots.iter().map(|s| s.payload.clone().unwrap()).collect();
        let value = self.cfg.operator.model.apply(&payloads);
        FetchOutcome::Invoke(Invocation {
            id,
            finish_at: now + self.cfg.operator.cost,
            tuple,
            value,
            acks,
        })
    }

    pub fn on_model_done(&mut self, inv: Invocation, now: Timestamp) -> Vec<Effect> {
        let Invocation {
            id, tuple, value, acks, ..
        } = inv;
        let trig = tuple.trigger_ref().expect("trigger stream has a slot");
        let value = match value {
            Ok(v) => v,
            Err(err) => {
                self.skip_tuple(&tuple, SkipReason::ModelError, now, &format!("t={id};error={err}"));
                return self.release(acks);
            }
        };
        let e = self.item_event(now, EventKind::ModelEnd, &trig).extra(format!("t={id}"));
        self.events.push(e);
        self.stats.predictions += 1;
        let mut effects = Vec::new();
        if let Some(out) = &self.cfg.operator.output {
            let header = Header::new(
                out.topic.clone(),
                out.stream.clone(),
                self.next_out,
                now,
                Body::Inline(value.clone()),
            );
            self.next_out += 1;
            let shown = label_of(&value).map_or_else(|| format!("{}B", value.len()), |l| l.to_string());
            let e = MetricEvent::new(now, &self.cfg.node, EventKind::PredictPublish)
                .item(out.topic.as_str(), out.stream.as_str(), now, header.seq)
                .extra(format!("t={id};value={shown}"));
            self.events.push(e);
            effects.push(Effect::Publish(header));
        }
        self.predictions.push(Prediction {
            value,
            source_model: self.cfg.operator.id.clone(),
            tuple_id: id,
            input_trigger_ts: tuple.trigger_ts,
            emit_ts: now,
        });
        effects.extend(self.release(acks));
        effects
    }

    /// End of run: account for everything the joiner still holds, then log shutdown.
    pub fn finish(&mut self, now: Timestamp) {
        self.joiner.finish();
        self.drain_dropped(now);
        let topic = self.topic_name();
        let mut e = MetricEvent::new(now, &self.cfg.node, EventKind::Shutdown).item(&topic, "-", now, 0);
        if let Some(d) = self.driven {
            e = e.extra(format!("clock={}", d.as_micros()));
        }
        self.events.push(e);
    }
}

/// Drive a pipeline with no transport delay: each delivery is handled at its
/// time, fetches resolve instantly through `fetch`, and each model call
/// occupies the pipeline for its declared cost.
pub fn run_to_completion(
    pipeline: &mut Pipeline,
    deliveries: Vec<(Timestamp, Option<u64>, Header)>,
    mut fetch: impl FnMut(&PayloadLocator, Timestamp) -> Result<Payload, FetchError>,
) -> Result<Vec<Effect>, JoinError> {
    let mut effects = Vec::new();
    let mut clock = Timestamp::ZERO;
    let mut pending: Option<Invocation> = None;
    let mut it = deliveries.into_iter().peekable();
    loop {
        let next_arrival = it.peek().map(|(t, _, _)| *t);
        let next_done = pending.as_ref().map(|i| i.finish_at);
        let next_tick = pipeline.next_deadline().filter(|_| next_arrival.is_some());
        let candidates = [next_done, next_tick, next_arrival];
        let Some(t) = candidates.iter().flatten().min().copied() else { break };
        clock = clock.max(t);
        if next_done == Some(t) {
            let inv = pending.take().unwrap();
            effects.extend(pipeline.on_model_done(inv, clock));
        } else if next_tick == Some(t) {
            pipeline.on_tick(clock);
        } else {
            let (_, seq, h) = it.next().unwrap();
            effects.extend(pipeline.on_deliver(seq, h, clock)?);
        }
        while pending.is_none() {
            let (job, acks) = pipeline.start_next(clock);
            effects.extend(acks);
            let Some(job) = job else { break };
            let results = job.fetches.iter().map(|(_, loc)| fetch(loc, clock)).collect();
            match pipeline.on_fetched(job, results, clock) {
                FetchOutcome::Invoke(inv) => pending = Some(inv),
                FetchOutcome::Dropped(e) => effects.extend(e),
            }
        }
    }
    pipeline.finish(clock);
    Ok(effects)
}
