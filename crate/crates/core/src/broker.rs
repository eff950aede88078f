//! Leader-side pub/sub: per-topic header logs with exclusive and shared delivery.
//!
//! [`TopicQueue`] is a sans-IO state machine. The simulator drives it
//! directly; the TCP server in [`crate::net`] wraps each queue in a mutex.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::time::Timestamp;
use crate::types::{Body, ContractError, Header, StreamId, TopicConfig, TopicId, DEFAULT_MAX_PAYLOAD};
use crate::wire;

pub const DEFAULT_RETENTION: usize = 65_536;
pub const DEFAULT_SHARED_WINDOW: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrokerConfig {
    /// Headers kept per topic.
    pub retention: usize,
    /// In-flight headers allowed per shared consumer.
    pub shared_window: usize,
    /// Largest accepted `PublishHeader` frame.
    pub max_frame: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            retention: DEFAULT_RETENTION,
            shared_window: DEFAULT_SHARED_WINDOW,
            max_frame: wire::MAX_FRAME.min(DEFAULT_MAX_PAYLOAD + 4096),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BrokerError {
    #[error("unknown topic {0}")]
    UnknownTopic(TopicId),
    #[error("topic {0} already exists")]
    DuplicateTopic(TopicId),
    #[error("stream {stream} is not part of topic {topic}")]
    UnknownStream { topic: TopicId, stream: StreamId },
    #[error("consumer {consumer} already subscribed to {topic}")]
    DuplicateConsumer { topic: TopicId, consumer: String },
    #[error("consumer {consumer} is not subscribed to {topic}")]
    UnknownConsumer { topic: TopicId, consumer: String },
    #[error("header frame of {len} bytes exceeds the {max} byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error(transparent)]
    InvalidConfig(#[from] ContractError),
}

impl BrokerError {
    pub fn wire_code(&self) -> u8 {
        use wire::error_code::*;
        match self {
            BrokerError::UnknownTopic(_) => UNKNOWN_TOPIC,
            BrokerError::DuplicateTopic(_) => DUPLICATE_TOPIC,
            BrokerError::UnknownStream { .. } => UNKNOWN_STREAM,
            BrokerError::DuplicateConsumer { .. } => DUPLICATE_CONSUMER,
            BrokerError::UnknownConsumer { .. } => OTHER,
            BrokerError::FrameTooLarge { .. } => FRAME_TOO_LARGE,
            BrokerError::InvalidConfig(_) => INVALID_CONFIG,
        }
    }
}

/// One unit handed to a subscriber.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Delivery {
    Header { seq: u64, header: Header },
    /// Sequence numbers `first_missing..resume_at` were evicted before delivery.
    Gap { first_missing: u64, resume_at: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BrokerStats {
    pub headers_published: u64,
    pub headers_delivered: u64,
    /// Frame bytes of every publish and delivery.
    pub frame_bytes: u64,
    /// Inline payload bytes carried by those frames. Zero under lazy routing.
    pub payload_bytes: u64,
    pub redelivered: u64,
    /// Headers a shared group lost to retention before dispatch.
    pub shared_lost: u64,
}

#[derive(Debug, Default)]
struct SharedConsumer {
    in_flight: BTreeMap<u64, Header>,
    outbox: VecDeque<(u64, Header)>,
}

#[derive(Debug)]
pub struct TopicQueue {
    config: TopicConfig,
    log: VecDeque<(u64, Header)>,
    next_seq: u64,
    retention: usize,
    window: usize,
    max_frame: usize,
    /// Next sequence number owed to each exclusive subscriber.
    exclusive: BTreeMap<String, u64>,
    shared_order: Vec<String>,
    shared: HashMap<String, SharedConsumer>,
    shared_cursor: Option<u64>,
    redeliver: VecDeque<(u64, Header)>,
    rr: usize,
    stats: BrokerStats,
}

fn inline_len(h: &Header) -> u64 {
    match &h.body {
        Body::Inline(p) => p.len() as u64,
        Body::Lazy(_) => 0,
    }
}

impl TopicQueue {
    pub fn new(config: TopicConfig, broker: &BrokerConfig) -> Result<Self, BrokerError> {
        config.validate()?;
        Ok(TopicQueue {
            config,
            log: VecDeque::new(),
            next_seq: 0,
            retention: broker.retention.max(1),
            window: broker.shared_window.max(1),
            max_frame: broker.max_frame,
            exclusive: BTreeMap::new(),
            shared_order: Vec::new(),
            shared: HashMap::new(),
            shared_cursor: None,
            redeliver: VecDeque::new(),
            rr: 0,
            stats: BrokerStats::default(),
        })
    }

    pub fn config(&self) -> &TopicConfig {
        &self.config
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.stats
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    fn first_retained(&self) -> u64 {
        self.log.front().map(|(s, _)| *s).unwrap_or(self.next_seq)
    }

    fn get(&self, seq: u64) -> Option<&Header> {
        let first = self.first_retained();
        if seq < first || seq >= self.next_seq {
            return None;
        }
        self.log.get((seq - first) as usize).map(|(_, h)| h)
    }

    /// Append a header and return its sequence number. The broker stamps
    /// `publish_ts = max(now, event_ts)`.
    pub fn publish(&mut self, mut header: Header, now: Timestamp) -> Result<u64, BrokerError> {
        if header.topic != self.config.topic {
            return Err(BrokerError::UnknownTopic(header.topic));
        }
        if self.config.stream_index(&header.stream).is_none() {
            return Err(BrokerError::UnknownStream {
                topic: header.topic,
                stream: header.stream,
            });
        }
        let len = wire::header_frame_len(&header);
        if len > self.max_frame {
            return Err(BrokerError::FrameTooLarge {
                len,
                max: self.max_frame,
            });
        }
        header.publish_ts = now.max(header.event_ts);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.headers_published += 1;
        self.stats.frame_bytes += len as u64;
        self.stats.payload_bytes += inline_len(&header);
        self.log.push_back((seq, header));
        while self.log.len() > self.retention {
            self.log.pop_front();
        }
        Ok(seq)
    }

    pub fn subscribe(&mut self, consumer: &str, shared: bool) -> Result<(), BrokerError> {
        if self.exclusive.contains_key(consumer) || self.shared.contains_key(consumer) {
            return Err(BrokerError::DuplicateConsumer {
                topic: self.config.topic.clone(),
                consumer: consumer.to_string(),
            });
        }
        if shared {
            self.shared_cursor.get_or_insert(self.next_seq);
            self.shared_order.push(consumer.to_string());
            self.shared.insert(consumer.to_string(), SharedConsumer::default());
        } else {
            self.exclusive.insert(consumer.to_string(), self.next_seq);
        }
        Ok(())
    }

    pub fn is_subscribed(&self, consumer: &str) -> bool {
        self.exclusive.contains_key(consumer) || self.shared.contains_key(consumer)
    }

    fn count_delivery(&mut self, header: &Header) {
        self.stats.headers_delivered += 1;
        self.stats.frame_bytes += wire::header_frame_len(header) as u64 + 8;
        self.stats.payload_bytes += inline_len(header);
    }

    /// Up to `max` pending deliveries for an exclusive subscriber, in sequence order.
    pub fn poll_exclusive(&mut self, consumer: &str, max: usize) -> Result<Vec<Delivery>, BrokerError> {
        let first = self.first_retained();
        let next = self.next_seq;
        let cursor = self
            .exclusive
            .get_mut(consumer)
            .ok_or_else(|| BrokerError::UnknownConsumer {
                topic: self.config.topic.clone(),
                consumer: consumer.to_string(),
            })?;
        let mut out = Vec::new();
        if *cursor < first {
            out.push(Delivery::Gap {
                first_missing: *cursor,
                resume_at: first,
            });
            *cursor = first;
        }
        let start = *cursor;
        let end = next.min(start.saturating_add(max as u64));
        *cursor = end;
        let headers: Vec<(u64, Header)> = (start..end)
            .filter_map(|s| self.get(s).map(|h| (s, h.clone())))
            .collect();
        for (seq, header) in headers {
            self.count_delivery(&header);
            out.push(Delivery::Header { seq, header });
        }
        Ok(out)
    }

    /// Assign undispatched headers to shared consumers, round-robin, skipping
    /// consumers whose in-flight window is full. Assigned headers wait in the
    /// consumer's outbox until [`TopicQueue::drain_shared`].
    pub fn dispatch_shared(&mut self) {
        if self.shared_order.is_empty() {
            return;
        }
        loop {
            let item = if let Some(item) = self.redeliver.front() {
                Some(item.clone())
            } else {
                let Some(cursor) = self.shared_cursor else { return };
                let first = self.first_retained();
                if cursor < first {
                    self.stats.shared_lost += first - cursor;
                    self.shared_cursor = Some(first);
                    continue;
                }
                self.get(cursor).map(|h| (cursor, h.clone()))
            };
            let Some((seq, header)) = item else { return };
            let n = self.shared_order.len();
            let window = self.window;
            let pick = (0..n)
                .map(|i| (self.rr + i) % n)
                .find(|&i| self.shared[&self.shared_order[i]].in_flight.len() < window);
            let Some(i) = pick else { return };
            self.rr = (i + 1) % n;
            if self.redeliver.front().map(|(s, _)| *s) == Some(seq) {
                self.redeliver.pop_front();
                self.stats.redelivered += 1;
            } else {
                self.shared_cursor = Some(seq + 1);
            }
            self.count_delivery(&header);
            let c = self.shared.get_mut(&self.shared_order[i]).unwrap();
            c.in_flight.insert(seq, header.clone());
            c.outbox.push_back((seq, header));
        }
    }

    /// Take the headers assigned to a shared consumer since the last drain.
    pub fn drain_shared(&mut self, consumer: &str) -> Vec<(u64, Header)> {
        self.shared
            .get_mut(consumer)
            .map(|c| c.outbox.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn in_flight(&self, consumer: &str) -> usize {
        self.shared.get(consumer).map_or(0, |c| c.in_flight.len())
    }

    /// Release a shared header. Acks from exclusive subscribers are no-ops.
    pub fn ack(&mut self, consumer: &str, seq: u64) {
        if let Some(c) = self.shared.get_mut(consumer) {
            c.in_flight.remove(&seq);
        }
    }

    /// Drop a subscriber. A shared consumer's unacknowledged headers are
    /// queued for redelivery to the survivors.
    pub fn disconnect(&mut self, consumer: &str) {
        self.exclusive.remove(consumer);
        if let Some(c) = self.shared.remove(consumer) {
            if let Some(pos) = self.shared_order.iter().position(|s| s == consumer) {
                self.shared_order.remove(pos);
                if pos < self.rr {
                    self.rr -= 1;
                }
                if self.rr >= self.shared_order.len() {
                    self.rr = 0;
                }
            }
            let mut pending: Vec<(u64, Header)> = self.redeliver.drain(..).collect();
            pending.extend(c.in_flight);
            pending.sort_by_key(|(s, _)| *s);
            self.redeliver = pending.into();
        }
    }

    pub fn shared_consumers(&self) -> &[String] {
        &self.shared_order
    }
}

/// All topics hosted by one leader.
#[derive(Debug, Default)]
pub struct Broker {
    config: BrokerConfig,
    topics: HashMap<TopicId, TopicQueue>,
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Broker {
            config,
            topics: HashMap::new(),
        }
    }

    pub fn create_topic(&mut self, config: TopicConfig) -> Result<(), BrokerError> {
        if self.topics.contains_key(&config.topic) {
            return Err(BrokerError::DuplicateTopic(config.topic));
        }
        let q = TopicQueue::new(config, &self.config)?;
        self.topics.insert(q.config.topic.clone(), q);
        Ok(())
    }

    pub fn topic(&self, topic: &TopicId) -> Result<&TopicQueue, BrokerError> {
        self.topics
            .get(topic)
            .ok_or_else(|| BrokerError::UnknownTopic(topic.clone()))
    }

    pub fn topic_mut(&mut self, topic: &TopicId) -> Result<&mut TopicQueue, BrokerError> {
        self.topics
            .get_mut(topic)
            .ok_or_else(|| BrokerError::UnknownTopic(topic.clone()))
    }

    pub fn publish(&mut self, header: Header, now: Timestamp) -> Result<u64, BrokerError> {
        let topic = header.topic.clone();
        self.topic_mut(&topic)?.publish(header, now)
    }

    pub fn subscribe(&mut self, topic: &TopicId, consumer: &str, shared: bool) -> Result<&TopicConfig, BrokerError> {
        let q = self.topic_mut(topic)?;
        q.subscribe(consumer, shared)?;
        Ok(&q.config)
    }

    /// Sum of every topic's counters.
    pub fn stats(&self) -> BrokerStats {
        let mut total = BrokerStats::default();
        for q in self.topics.values() {
            let s = &q.stats;
            total.headers_published += s.headers_published;
            total.headers_delivered += s.headers_delivered;
            total.frame_bytes += s.frame_bytes;
            total.payload_bytes += s.payload_bytes;
            total.redelivered += s.redelivered;
            total.shared_lost += s.shared_lost;
        }
        total
    }
}
