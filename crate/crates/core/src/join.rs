//! Temporal joins over the streams of a topic.
//!
//! Three strategies share one contract: feed arrivals in delivery order,
//! collect [`JoinTuple`]s, and drain the items that can no longer appear in
//! any tuple through [`TopicJoiner::take_dropped`].
//!
//! * [`DataTriggeredJoin`]: every arrival pairs with the latest item of every
//!   other stream once all streams have produced.
//! * [`TimeTriggeredJoin`]: one tuple per tumbling window, closing at
//!   multiples of the window width.
//! * [`HybridJoin`]: data-triggered, but an arrival only emits when at least
//!   `min_interval` has passed since the previous emission.

use std::fmt;

use crate::time::{Bound, Duration, Timestamp};
use crate::types::{
    compute_skew, Header, ItemRef, JoinMode, JoinTuple, Slot, StreamId, TimeBasis, TopicConfig, TopicId,
};

/// Why an item never reached a model, or why a tuple was discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    Stale,
    Skew,
    SupersededByHybrid,
    SharedRebalance,
    FailedFetch,
    SupersededByWindow,
    Warmup,
    LateArrival,
    ModelError,
}

impl SkipReason {
    pub const ALL: [SkipReason; 9] = [
        SkipReason::Stale,
        SkipReason::Skew,
        SkipReason::SupersededByHybrid,
        SkipReason::SharedRebalance,
        SkipReason::FailedFetch,
        SkipReason::SupersededByWindow,
        SkipReason::Warmup,
        SkipReason::LateArrival,
        SkipReason::ModelError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::Stale => "stale",
            SkipReason::Skew => "skew",
            SkipReason::SupersededByHybrid => "superseded_by_hybrid",
            SkipReason::SharedRebalance => "shared_rebalance",
            SkipReason::FailedFetch => "failed_fetch",
            SkipReason::SupersededByWindow => "superseded_by_window",
            SkipReason::Warmup => "warmup",
            SkipReason::LateArrival => "late_arrival",
            SkipReason::ModelError => "model_error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SkipReason::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JoinError {
    #[error("stream {stream} is not part of topic {topic}")]
    UnknownStream { topic: TopicId, stream: StreamId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkewVerdict {
    Accept,
    Reject(Duration),
}

/// Accept iff the skew of the slot timestamps under `basis` is within `max_skew`.
pub fn skew_filter(tuple: &JoinTuple, max_skew: Bound, basis: TimeBasis) -> SkewVerdict {
    let Bound::Limited(limit) = max_skew else {
        return SkewVerdict::Accept;
    };
    match compute_skew(&tuple.slot_timestamps(basis)) {
        Ok(skew) if skew > limit => SkewVerdict::Reject(skew),
        _ => SkewVerdict::Accept,
    }
}

/// Latest item of one stream.
#[derive(Clone, Debug, Default)]
struct Latest {
    item: Option<Header>,
    /// Whether `item` has been placed in an emitted tuple.
    used: bool,
}

/// Per-stream latest state shared by the data-triggered and hybrid joiners.
#[derive(Clone, Debug)]
struct LatestState {
    topic: TopicId,
    streams: Vec<StreamId>,
    basis: TimeBasis,
    latest: Vec<Latest>,
    dropped: Vec<(ItemRef, SkipReason)>,
}

impl LatestState {
    fn new(config: &TopicConfig) -> Self {
        LatestState {
            topic: config.topic.clone(),
            streams: config.streams.clone(),
            basis: config.time_basis,
            latest: vec![Latest::default(); config.streams.len()],
            dropped: Vec::new(),
        }
    }

    fn index(&self, header: &Header) -> Result<usize, JoinError> {
        if header.topic == self.topic {
            if let Some(i) = self.streams.iter().position(|s| *s == header.stream) {
                return Ok(i);
            }
        }
        Err(JoinError::UnknownStream {
            topic: self.topic.clone(),
            stream: header.stream.clone(),
        })
    }

    fn latest_ts(&self, i: usize) -> Option<Timestamp> {
        self.latest[i].item.as_ref().map(|h| h.basis_ts(self.basis))
    }

    fn others_ready(&self, i: usize) -> bool {
        self.latest
            .iter()
            .enumerate()
            .all(|(j, l)| j == i || l.item.is_some())
    }

    fn all_ready(&self) -> bool {
        self.latest.iter().all(|l| l.item.is_some())
    }

    /// Tuple of the latest items with `arriving` in slot `i`.
    fn build(&mut self, i: usize, arriving: &Header, now: Timestamp, covers: Vec<ItemRef>) -> JoinTuple {
        let slots = (0..self.streams.len())
            .map(|j| {
                if j == i {
                    Slot::pending(arriving.clone())
                } else {
                    self.latest[j].used = true;
                    Slot::pending(self.latest[j].item.clone().expect("others ready"))
                }
            })
            .collect();
        JoinTuple {
            topic: self.topic.clone(),
            slots,
            trigger_stream: arriving.stream.clone(),
            trigger_ts: arriving.basis_ts(self.basis),
            emit_ts: now,
            covers,
        }
    }

    /// The `t > latest_ts` update. `emitted` says whether `header` went into a
    /// tuple; an item that neither emitted nor stayed stored is dropped with
    /// `reason`, as is a replaced latest that never emitted.
    fn update(&mut self, i: usize, header: Header, emitted: bool, reason: SkipReason) {
        let t = header.basis_ts(self.basis);
        if self.latest_ts(i).map_or(true, |lt| t > lt) {
            let old = std::mem::replace(
                &mut self.latest[i],
                Latest {
                    item: Some(header),
                    used: emitted,
                },
            );
            if let Some(h) = old.item {
                if !old.used {
                    self.dropped.push((h.item_ref(), reason));
                }
            }
        } else if !emitted {
            self.dropped.push((header.item_ref(), reason));
        }
    }

    fn finish(&mut self, reason: SkipReason) {
        for l in &mut self.latest {
            if let Some(h) = &l.item {
                if !l.used {
                    self.dropped.push((h.item_ref(), reason));
                    l.used = true;
                }
            }
        }
    }
}

/// Emit on every arrival once all other streams hold an item.
#[derive(Clone, Debug)]
pub struct DataTriggeredJoin {
    state: LatestState,
}

impl DataTriggeredJoin {
    pub fn new(config: &TopicConfig) -> Self {
        DataTriggeredJoin {
            state: LatestState::new(config),
        }
    }

    pub fn on_arrival(&mut self, header: Header, now: Timestamp) -> Result<Option<JoinTuple>, JoinError> {
        let i = self.state.index(&header)?;
        let tuple = if self.state.others_ready(i) {
            Some(self.state.build(i, &header, now, vec![header.item_ref()]))
        } else {
            None
        };
        self.state.update(i, header, tuple.is_some(), SkipReason::Warmup);
        Ok(tuple)
    }

    /// Latest stored item per stream, in slot order.
    pub fn latest(&self) -> Vec<Option<&Header>> {
        self.state.latest.iter().map(|l| l.item.as_ref()).collect()
    }
}

/// Data-triggered emission throttled to at most one tuple per `min_interval`.
#[derive(Clone, Debug)]
pub struct HybridJoin {
    state: LatestState,
    min_interval: Duration,
    last_emit: Option<Timestamp>,
    pending: Vec<ItemRef>,
}

impl HybridJoin {
    pub fn new(config: &TopicConfig, min_interval: Duration) -> Self {
        HybridJoin {
            state: LatestState::new(config),
            min_interval,
            last_emit: None,
            pending: Vec::new(),
        }
    }

    pub fn last_emit(&self) -> Option<Timestamp> {
        self.last_emit
    }

    pub fn on_arrival(&mut self, header: Header, now: Timestamp) -> Result<Option<JoinTuple>, JoinError> {
        let i = self.state.index(&header)?;
        self.pending.push(header.item_ref());
        let open = self.last_emit.map_or(true, |last| now.since(last) >= self.min_interval);
        let (tuple, reason) = if !self.state.others_ready(i) {
            (None, SkipReason::Warmup)
        } else if open {
            let covers = std::mem::take(&mut self.pending);
            self.last_emit = Some(now);
            (Some(self.state.build(i, &header, now, covers)), SkipReason::SupersededByHybrid)
        } else {
            (None, SkipReason::SupersededByHybrid)
        };
        self.state.update(i, header, tuple.is_some(), reason);
        Ok(tuple)
    }
}

/// One tuple per window `[k·T, (k+1)·T)`, emitted at `(k+1)·T`.
///
/// At each close the slot of stream `i` holds the item with the largest basis
/// timestamp strictly below the window end among everything received so far.
/// Items that arrive more than one window behind the last closed window are
/// dropped as late.
#[derive(Clone, Debug)]
pub struct TimeTriggeredJoin {
    topic: TopicId,
    streams: Vec<StreamId>,
    basis: TimeBasis,
    window: Duration,
    next_close: Option<Timestamp>,
    last_closed: Option<Timestamp>,
    buffer: Vec<Vec<Header>>,
    latest: Vec<Latest>,
    /// Items consumed by closes since the last emitted tuple.
    pending: Vec<ItemRef>,
    /// Items that arrived but were not yet considered by any close.
    uncovered: Vec<ItemRef>,
    dropped: Vec<(ItemRef, SkipReason)>,
    warm: bool,
}

impl TimeTriggeredJoin {
    pub fn new(config: &TopicConfig, window: Duration) -> Self {
        TimeTriggeredJoin {
            topic: config.topic.clone(),
            streams: config.streams.clone(),
            basis: config.time_basis,
            window,
            next_close: None,
            last_closed: None,
            buffer: vec![Vec::new(); config.streams.len()],
            latest: vec![Latest::default(); config.streams.len()],
            pending: Vec::new(),
            uncovered: Vec::new(),
            dropped: Vec::new(),
            warm: false,
        }
    }

    fn boundary_after(&self, t: Timestamp) -> Timestamp {
        let w = self.window.as_micros().max(1) as u64;
        Timestamp::from_micros((t.as_micros() / w + 1) * w)
    }

    /// Next window end, once the joiner has seen any time.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.next_close
    }

    fn start(&mut self, now: Timestamp) {
        if self.next_close.is_none() {
            self.next_close = Some(self.boundary_after(now));
        }
    }

    /// Close every window whose end is at or before `now`.
    pub fn on_tick(&mut self, now: Timestamp) -> Vec<JoinTuple> {
        self.start(now);
        let mut out = Vec::new();
        while let Some(end) = self.next_close.filter(|e| *e <= now) {
            if let Some(t) = self.close(end) {
                out.push(t);
            }
            self.next_close = Some(end + self.window);
        }
        out
    }

    pub fn on_arrival(&mut self, header: Header, now: Timestamp) -> Result<Vec<JoinTuple>, JoinError> {
        let i = self
            .streams
            .iter()
            .position(|s| *s == header.stream)
            .filter(|_| header.topic == self.topic)
            .ok_or_else(|| JoinError::UnknownStream {
                topic: self.topic.clone(),
                stream: header.stream.clone(),
            })?;
        let out = self.on_tick(now);
        let t = header.basis_ts(self.basis);
        if let Some(closed) = self.last_closed {
            if t < closed - self.window {
                self.dropped.push((header.item_ref(), SkipReason::LateArrival));
                return Ok(out);
            }
        }
        self.buffer[i].push(header);
        Ok(out)
    }

    fn close(&mut self, end: Timestamp) -> Option<JoinTuple> {
        let basis = self.basis;
        for i in 0..self.streams.len() {
            let (due, later): (Vec<Header>, Vec<Header>) =
                std::mem::take(&mut self.buffer[i]).into_iter().partition(|h| h.basis_ts(basis) < end);
            self.buffer[i] = later;
            for h in due {
                self.uncovered.push(h.item_ref());
                let t = h.basis_ts(basis);
                let newer = self.latest[i].item.as_ref().map_or(true, |l| t > l.basis_ts(basis));
                let reason = if self.warm {
                    SkipReason::SupersededByWindow
                } else {
                    SkipReason::Warmup
                };
                if newer {
                    let old = std::mem::replace(
                        &mut self.latest[i],
                        Latest {
                            item: Some(h),
                            used: false,
                        },
                    );
                    if let Some(o) = old.item.filter(|_| !old.used) {
                        self.dropped.push((o.item_ref(), reason));
                    }
                } else {
                    self.dropped.push((h.item_ref(), reason));
                }
            }
        }
        self.last_closed = Some(end);
        self.pending.append(&mut self.uncovered);
        if !self.latest.iter().all(|l| l.item.is_some()) {
            return None;
        }
        self.warm = true;
        let slots: Vec<Slot> = self
            .latest
            .iter_mut()
            .map(|l| {
                l.used = true;
                Slot::pending(l.item.clone().unwrap())
            })
            .collect();
        let trigger = slots
            .iter()
            .max_by_key(|s| s.header.basis_ts(basis))
            .map(|s| s.header.clone())
            .unwrap();
        Some(JoinTuple {
            topic: self.topic.clone(),
            slots,
            trigger_stream: trigger.stream.clone(),
            trigger_ts: trigger.basis_ts(basis),
            emit_ts: end,
            covers: std::mem::take(&mut self.pending),
        })
    }

    fn finish(&mut self) {
        let reason = if self.warm {
            SkipReason::SupersededByWindow
        } else {
            SkipReason::Warmup
        };
        for b in &mut self.buffer {
            for h in b.drain(..) {
                self.dropped.push((h.item_ref(), reason));
            }
        }
        for l in &mut self.latest {
            if let Some(h) = l.item.as_ref().filter(|_| !l.used) {
                self.dropped.push((h.item_ref(), reason));
                l.used = true;
            }
        }
    }
}

/// The joiner a topic's config asks for.
///
/// A data-triggered topic with a bounded target prediction frequency runs as
/// a hybrid join with that interval.
#[derive(Clone, Debug)]
pub enum TopicJoiner {
    Data(DataTriggeredJoin),
    Time(TimeTriggeredJoin),
    Hybrid(HybridJoin),
}

impl TopicJoiner {
    pub fn new(config: &TopicConfig) -> Self {
        match (config.join, config.target_prediction_frequency) {
            (JoinMode::TimeTriggered { window }, _) => TopicJoiner::Time(TimeTriggeredJoin::new(config, window)),
            (JoinMode::Hybrid { min_interval }, _) => TopicJoiner::Hybrid(HybridJoin::new(config, min_interval)),
            (JoinMode::DataTriggered, Bound::Limited(interval)) => {
                TopicJoiner::Hybrid(HybridJoin::new(config, interval))
            }
            (JoinMode::DataTriggered, Bound::Unlimited) => TopicJoiner::Data(DataTriggeredJoin::new(config)),
        }
    }

    pub fn on_arrival(&mut self, header: Header, now: Timestamp) -> Result<Vec<JoinTuple>, JoinError> {
        match self {
            TopicJoiner::Data(j) => j.on_arrival(header, now).map(|t| t.into_iter().collect()),
            TopicJoiner::Hybrid(j) => j.on_arrival(header, now).map(|t| t.into_iter().collect()),
            TopicJoiner::Time(j) => j.on_arrival(header, now),
        }
    }

    pub fn on_tick(&mut self, now: Timestamp) -> Vec<JoinTuple> {
        match self {
            TopicJoiner::Time(j) => j.on_tick(now),
            _ => Vec::new(),
        }
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        match self {
            TopicJoiner::Time(j) => j.next_deadline(),
            _ => None,
        }
    }

    /// Items that can no longer appear in any tuple, with the reason.
    pub fn take_dropped(&mut self) -> Vec<(ItemRef, SkipReason)> {
        match self {
            TopicJoiner::Data(j) => std::mem::take(&mut j.state.dropped),
            TopicJoiner::Hybrid(j) => std::mem::take(&mut j.state.dropped),
            TopicJoiner::Time(j) => std::mem::take(&mut j.dropped),
        }
    }

    /// End of input: everything still held but never emitted is dropped.
    pub fn finish(&mut self) {
        match self {
            TopicJoiner::Data(j) => j.state.finish(SkipReason::Warmup),
            TopicJoiner::Hybrid(j) => {
                let reason = if j.state.all_ready() {
                    SkipReason::SupersededByHybrid
                } else {
                    SkipReason::Warmup
                };
                j.state.finish(reason);
            }
            TopicJoiner::Time(j) => j.finish(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Body, Payload};
    use proptest::prelude::*;
    use std::collections::{HashMap, HashSet};

    fn config(streams: &[&str]) -> TopicConfig {
        TopicConfig::new(
            TopicId::new("t").unwrap(),
            streams.iter().map(|s| StreamId::new(*s).unwrap()).collect(),
        )
        .with_time_basis(TimeBasis::EventTime)
    }

    fn item(stream: &str, seq: u64, ms: u64) -> Header {
        Header::new(
            TopicId::new("t").unwrap(),
            StreamId::new(stream).unwrap(),
            seq,
            Timestamp::from_millis(ms),
            Body::Inline(Payload::new()),
        )
    }

    fn label(t: &JoinTuple) -> String {
        let slots: Vec<String> = t
            .slots
            .iter()
            .map(|s| format!("{}{}", s.header.stream.as_str().to_uppercase(), s.header.seq))
            .collect();
        let trig = t.trigger_ref().unwrap();
        format!("({})>{}{}", slots.join(","), trig.stream.as_str().to_uppercase(), trig.seq)
    }

    /// Arrival order of the worked join example.
    fn worked_schedule() -> Vec<Header> {
        vec![
            item("a", 1, 1),
            item("b", 1, 2),
            item("c", 1, 3),
            item("d", 1, 4),
            item("b", 2, 6),
            item("d", 2, 8),
            item("b", 3, 11),
            item("c", 2, 13),
            item("a", 2, 16),
        ]
    }

    #[test]
    fn data_triggered_worked_example() {
        let cfg = config(&["a", "b", "c", "d"]);
        let mut j = DataTriggeredJoin::new(&cfg);
        let out: Vec<String> = worked_schedule()
            .into_iter()
            .filter_map(|h| {
                let now = h.event_ts;
                j.on_arrival(h, now).unwrap()
            })
            .map(|t| label(&t))
            .collect();
        assert_eq!(
            out,
            vec![
                "(A1,B1,C1,D1)>D1",
                "(A1,B2,C1,D1)>B2",
                "(A1,B2,C1,D2)>D2",
                "(A1,B3,C1,D2)>B3",
                "(A1,B3,C2,D2)>C2",
                "(A2,B3,C2,D2)>A2",
            ]
        );
    }

    #[test]
    fn time_triggered_worked_example() {
        let cfg = config(&["a", "b", "c", "d"]);
        let mut j = TimeTriggeredJoin::new(&cfg, Duration::from_millis(5));
        let mut out = j.on_tick(Timestamp::ZERO);
        for h in worked_schedule() {
            let now = h.event_ts;
            out.extend(j.on_arrival(h, now).unwrap());
        }
        out.extend(j.on_tick(Timestamp::from_millis(20)));
        let labels: Vec<String> = out
            .iter()
            .map(|t| label(t).split('>').next().unwrap().to_string())
            .collect();
        assert_eq!(labels, vec!["(A1,B1,C1,D1)", "(A1,B2,C1,D2)", "(A1,B3,C2,D2)", "(A2,B3,C2,D2)"]);
        let ends: Vec<u64> = out.iter().map(|t| t.emit_ts.as_micros() / 1000).collect();
        assert_eq!(ends, vec![5, 10, 15, 20]);
    }

    #[test]
    fn time_triggered_carry_forward_and_warmup() {
        let cfg = config(&["a", "b"]);
        let mut j = TimeTriggeredJoin::new(&cfg, Duration::from_millis(5));
        assert!(j.on_arrival(item("a", 1, 1), Timestamp::from_millis(1)).unwrap().is_empty());
        // first boundary with b still empty: nothing
        assert!(j.on_tick(Timestamp::from_millis(5)).is_empty());
        j.on_arrival(item("b", 1, 6), Timestamp::from_millis(6)).unwrap();
        let t1 = j.on_tick(Timestamp::from_millis(10));
        let t2 = j.on_tick(Timestamp::from_millis(15));
        assert_eq!(t1.len(), 1);
        assert_eq!(t2.len(), 1);
        assert_eq!(t1[0].slots, t2[0].slots);
        assert!(t2[0].covers.is_empty());
    }

    #[test]
    fn warmup_yields_nothing() {
        let cfg = config(&["a", "b", "c", "d"]);
        let mut j = DataTriggeredJoin::new(&cfg);
        for h in [item("a", 1, 1), item("b", 1, 2), item("c", 1, 3)] {
            let now = h.event_ts;
            assert!(j.on_arrival(h, now).unwrap().is_none());
        }
    }

    #[test]
    fn late_item_emits_without_replacing_state() {
        let cfg = config(&["a", "b"]);
        let mut j = DataTriggeredJoin::new(&cfg);
        j.on_arrival(item("a", 2, 10), Timestamp::from_millis(10)).unwrap();
        j.on_arrival(item("b", 1, 11), Timestamp::from_millis(11)).unwrap();
        let t = j.on_arrival(item("a", 1, 5), Timestamp::from_millis(12)).unwrap().unwrap();
        assert_eq!(t.slots[0].header.seq, 1);
        assert_eq!(j.latest()[0].unwrap().seq, 2);
    }

    #[test]
    fn equal_timestamp_does_not_replace() {
        let cfg = config(&["a", "b"]);
        let mut j = DataTriggeredJoin::new(&cfg);
        j.on_arrival(item("b", 1, 0), Timestamp::ZERO).unwrap();
        j.on_arrival(item("a", 1, 5), Timestamp::ZERO).unwrap();
        let t = j.on_arrival(item("a", 2, 5), Timestamp::ZERO).unwrap();
        assert!(t.is_some());
        assert_eq!(j.latest()[0].unwrap().seq, 1);
    }

    #[test]
    fn unknown_stream_errors() {
        let cfg = config(&["a"]);
        let mut j = TopicJoiner::new(&cfg);
        assert!(matches!(
            j.on_arrival(item("z", 0, 0), Timestamp::ZERO),
            Err(JoinError::UnknownStream { .. })
        ));
    }

    #[test]
    fn hybrid_throttle_example() {
        let cfg = config(&["a", "b"]);
        let mut j = HybridJoin::new(&cfg, Duration::from_millis(10));
        // warm stream a before the clock starts
        j.on_arrival(item("a", 0, 0), Timestamp::ZERO).unwrap();
        let mut emitted = Vec::new();
        for (seq, ms) in [(0, 0), (1, 3), (2, 5), (3, 12)] {
            if let Some(t) = j.on_arrival(item("b", seq, ms), Timestamp::from_millis(ms)).unwrap() {
                emitted.push((t.emit_ts.as_micros() / 1000, t.slots[1].header.seq, t.covers.len()));
            }
        }
        assert_eq!(emitted, vec![(0, 0, 2), (12, 3, 3)]);
        let mut tj = TopicJoiner::Hybrid(j);
        let dropped: Vec<u64> = tj.take_dropped().into_iter().map(|(r, _)| r.seq).collect();
        assert_eq!(dropped, vec![1, 2]);
    }

    #[test]
    fn hybrid_exact_interval_emits_every_arrival() {
        let cfg = config(&["a"]);
        let mut j = HybridJoin::new(&cfg, Duration::from_millis(10));
        let n = (0..5)
            .filter_map(|k| j.on_arrival(item("a", k, k * 10), Timestamp::from_millis(k * 10)).unwrap())
            .count();
        assert_eq!(n, 5);
    }

    #[test]
    fn data_triggered_with_target_frequency_is_hybrid() {
        let mut cfg = config(&["a"]);
        cfg.target_prediction_frequency = Bound::millis(30);
        assert!(matches!(TopicJoiner::new(&cfg), TopicJoiner::Hybrid(_)));
    }

    #[test]
    fn skew_filter_examples() {
        let cfg = config(&["a", "b", "c", "d"]);
        let mut j = DataTriggeredJoin::new(&cfg);
        let mut last = None;
        for h in [item("a", 0, 100), item("b", 0, 102), item("c", 0, 103), item("d", 0, 101)] {
            let now = h.event_ts;
            last = j.on_arrival(h, now).unwrap();
        }
        let t = last.unwrap();
        assert_eq!(skew_filter(&t, Bound::millis(5), TimeBasis::EventTime), SkewVerdict::Accept);

        let cfg = config(&["a", "b"]);
        let mut j = DataTriggeredJoin::new(&cfg);
        j.on_arrival(item("a", 0, 100), Timestamp::ZERO).unwrap();
        let t = j.on_arrival(item("b", 0, 130), Timestamp::ZERO).unwrap().unwrap();
        assert_eq!(
            skew_filter(&t, Bound::millis(25), TimeBasis::EventTime),
            SkewVerdict::Reject(Duration::from_millis(30))
        );
        assert_eq!(skew_filter(&t, Bound::Unlimited, TimeBasis::EventTime), SkewVerdict::Accept);
    }

    #[test]
    fn skip_reason_names_round_trip() {
        for r in SkipReason::ALL {
            assert_eq!(SkipReason::parse(r.as_str()), Some(r));
        }
    }

    #[test]
    fn time_triggered_drops_stragglers() {
        let cfg = config(&["a"]);
        let mut j = TimeTriggeredJoin::new(&cfg, Duration::from_millis(10));
        j.on_arrival(item("a", 0, 25), Timestamp::from_millis(25)).unwrap();
        j.on_tick(Timestamp::from_millis(30));
        // one window late: buffered; two windows late: dropped
        j.on_arrival(item("a", 1, 21), Timestamp::from_millis(31)).unwrap();
        j.on_arrival(item("a", 2, 15), Timestamp::from_millis(31)).unwrap();
        let mut tj = TopicJoiner::Time(j);
        let d = tj.take_dropped();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].0.seq, 2);
        assert_eq!(d[0].1, SkipReason::LateArrival);
    }

    // ---- randomized schedules against a step-through oracle ----

    #[derive(Clone, Debug)]
    struct Arrival {
        stream: usize,
        ts: u64,
        now: u64,
    }

    fn schedule() -> impl Strategy<Value = (usize, Vec<Arrival>)> {
        (2usize..=6).prop_flat_map(|n| {
            let arrivals = prop::collection::vec((0..n, 0u64..1000, 0u64..20), 0..=200).prop_map(|raw| {
                let mut now = 0;
                raw.into_iter()
                    .map(|(stream, ts, gap)| {
                        now += gap;
                        Arrival { stream, ts, now }
                    })
                    .collect::<Vec<_>>()
            });
            (Just(n), arrivals)
        })
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn to_headers(n: usize, arrivals: &[Arrival]) -> Vec<Header> {
        let names = names(n);
        arrivals
            .iter()
            .enumerate()
            .map(|(k, a)| item(&names[a.stream], k as u64, a.ts))
            .collect()
    }

    /// Direct transcription of the two-way algorithm generalised to n
    /// streams: `(latest, latest_ts)` per stream, `None` as minus infinity.
    fn oracle(n: usize, arrivals: &[Arrival]) -> Vec<Vec<u64>> {
        let mut latest: Vec<Option<(u64, u64)>> = vec![None; n];
        let mut out = Vec::new();
        for (k, a) in arrivals.iter().enumerate() {
            let k = k as u64;
            if (0..n).all(|j| j == a.stream || latest[j].is_some()) {
                out.push(
                    (0..n)
                        .map(|j| if j == a.stream { k } else { latest[j].unwrap().0 })
                        .collect(),
                );
            }
            match latest[a.stream] {
                Some((_, t)) if a.ts <= t => {}
                _ => latest[a.stream] = Some((k, a.ts)),
            }
        }
        out
    }

    fn run_data(n: usize, arrivals: &[Arrival]) -> Vec<JoinTuple> {
        let cfg = config(&names(n).iter().map(String::as_str).collect::<Vec<_>>());
        let mut j = DataTriggeredJoin::new(&cfg);
        to_headers(n, arrivals)
            .into_iter()
            .zip(arrivals)
            .filter_map(|(h, a)| j.on_arrival(h, Timestamp::from_millis(a.now)).unwrap())
            .collect()
    }

    fn run_hybrid(n: usize, arrivals: &[Arrival], interval: i64) -> Vec<JoinTuple> {
        let cfg = config(&names(n).iter().map(String::as_str).collect::<Vec<_>>());
        let mut j = HybridJoin::new(&cfg, Duration::from_millis(interval));
        to_headers(n, arrivals)
            .into_iter()
            .zip(arrivals)
            .filter_map(|(h, a)| j.on_arrival(h, Timestamp::from_millis(a.now)).unwrap())
            .collect()
    }

    fn seqs(t: &JoinTuple) -> Vec<u64> {
        t.slots.iter().map(|s| s.header.seq).collect()
    }

    proptest! {
        #[test]
        fn data_triggered_matches_oracle((n, arrivals) in schedule()) {
            let got: Vec<Vec<u64>> = run_data(n, &arrivals).iter().map(seqs).collect();
            prop_assert_eq!(got, oracle(n, &arrivals));
        }

        #[test]
        fn data_triggered_completeness((n, arrivals) in schedule()) {
            let tuples = run_data(n, &arrivals);
            let present: HashSet<u64> = tuples.iter().flat_map(seqs).collect();
            let mut seen = vec![false; n];
            for (k, a) in arrivals.iter().enumerate() {
                let warm = (0..n).all(|j| j == a.stream || seen[j]);
                seen[a.stream] = true;
                if warm {
                    prop_assert!(present.contains(&(k as u64)), "item {} missing", k);
                }
            }
        }

        #[test]
        fn hybrid_spacing_and_degenerate((n, arrivals) in schedule(), interval in 1i64..30) {
            let tuples = run_hybrid(n, &arrivals, interval);
            for w in tuples.windows(2) {
                prop_assert!(w[1].emit_ts.since(w[0].emit_ts) >= Duration::from_millis(interval));
            }
            let zero: Vec<Vec<u64>> = run_hybrid(n, &arrivals, 0).iter().map(seqs).collect();
            let data: Vec<Vec<u64>> = run_data(n, &arrivals).iter().map(seqs).collect();
            prop_assert_eq!(zero, data);
        }

        #[test]
        fn every_item_emitted_or_dropped_once((n, arrivals) in schedule(), mode in 0u8..3) {
            let cfg = config(&names(n).iter().map(String::as_str).collect::<Vec<_>>());
            let cfg = match mode {
                0 => cfg,
                1 => cfg.with_join(JoinMode::Hybrid { min_interval: Duration::from_millis(15) }),
                _ => cfg.with_join(JoinMode::TimeTriggered { window: Duration::from_millis(40) }),
            };
            let mut j = TopicJoiner::new(&cfg);
            let mut in_slots = HashSet::new();
            for (h, a) in to_headers(n, &arrivals).into_iter().zip(&arrivals) {
                for t in j.on_arrival(h, Timestamp::from_millis(a.now)).unwrap() {
                    in_slots.extend(seqs(&t));
                }
            }
            j.finish();
            let mut dropped: HashMap<u64, usize> = HashMap::new();
            for (r, _) in j.take_dropped() {
                *dropped.entry(r.seq).or_default() += 1;
            }
            for k in 0..arrivals.len() as u64 {
                let d = dropped.get(&k).copied().unwrap_or(0);
                prop_assert!(d <= 1, "item {} dropped twice", k);
                prop_assert!(in_slots.contains(&k) ^ (d == 1), "item {} slots={} dropped={}", k, in_slots.contains(&k), d);
            }
        }

        #[test]
        fn time_triggered_slots_hold_max_so_far((n, arrivals) in schedule()) {
            let cfg = config(&names(n).iter().map(String::as_str).collect::<Vec<_>>())
                .with_time_basis(TimeBasis::ProcessingTime);
            let mut j = TimeTriggeredJoin::new(&cfg, Duration::from_millis(25));
            // processing-time basis: publish_ts = arrival time
            let headers: Vec<Header> = to_headers(n, &arrivals).into_iter().zip(&arrivals).map(|(mut h, a)| {
                h.publish_ts = Timestamp::from_millis(a.now);
                h
            }).collect();
            let mut fed: Vec<Header> = Vec::new();
            let mut last_emit = None;
            for h in headers {
                let now = h.publish_ts;
                for t in j.on_arrival(h.clone(), now).unwrap() {
                    prop_assert!(last_emit.map_or(true, |e| t.emit_ts > e));
                    last_emit = Some(t.emit_ts);
                    for (i, slot) in t.slots.iter().enumerate() {
                        let best = fed.iter()
                            .filter(|f| f.stream == cfg.streams[i] && f.publish_ts < t.emit_ts)
                            .map(|f| f.publish_ts)
                            .max()
                            .unwrap();
                        prop_assert_eq!(slot.header.publish_ts, best);
                    }
                }
                fed.push(h);
            }
        }

        #[test]
        fn joiners_are_deterministic((n, arrivals) in schedule()) {
            let a: Vec<Vec<u64>> = run_hybrid(n, &arrivals, 7).iter().map(seqs).collect();
            let b: Vec<Vec<u64>> = run_hybrid(n, &arrivals, 7).iter().map(seqs).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn accepted_tuples_respect_max_skew((n, arrivals) in schedule(), limit in 0i64..500) {
            for t in run_data(n, &arrivals) {
                if skew_filter(&t, Bound::millis(limit), TimeBasis::EventTime) == SkewVerdict::Accept {
                    let skew = compute_skew(&t.slot_timestamps(TimeBasis::EventTime)).unwrap();
                    prop_assert!(skew <= Duration::from_millis(limit));
                }
            }
        }
    }
}
