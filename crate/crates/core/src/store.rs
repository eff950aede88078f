//! Source-side time-indexed payload logs and the consumer-side fetch path.
//!
//! A source appends each payload to its stream's log before publishing the
//! header, and hands out a [`PayloadLocator`] as the claim check. Consumers
//! redeem locators through a [`FetchClient`], which applies the freshness gate
//! and keeps an LRU cache so a payload reused by several tuples moves once.
//!
//! Segment file layout (all integers little-endian):
//!
//! ```text
//! seg-<start_event_ts_micros>.log := record*
//! record                          := event_ts:u64 length:u32 payload[length]
//! seg-<start_event_ts_micros>.idx := (event_ts:u64 offset:u64)*   one entry every 64 records
//! ```
//!
//! A locator's `offset` points at the start of the record, so the payload
//! starts at `offset + 12`.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use lru::LruCache;

use crate::time::{Bound, Duration, Timestamp};
use crate::types::{NodeAddr, Payload, PayloadLocator, StreamId, DEFAULT_MAX_PAYLOAD};
use crate::wire::FetchStatus;

pub const RECORD_HEADER: u64 = 12;
pub const INDEX_EVERY: usize = 64;
pub const DEFAULT_RETENTION_BYTES: u64 = 1 << 30;
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreConfig {
    /// Payload bytes kept per stream before the oldest records are evicted.
    pub retention_bytes: u64,
    pub segment_bytes: u64,
    pub segment_span: Duration,
    pub max_payload: usize,
    /// Write segment files under `<dir>/<stream>/` when set.
    pub dir: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            retention_bytes: DEFAULT_RETENTION_BYTES,
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            segment_span: Duration::from_secs(600),
            max_payload: DEFAULT_MAX_PAYLOAD,
            dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("payload of {len} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("payload of {len} bytes does not fit the {budget} byte retention budget")]
    StorageFull { len: u64, budget: u64 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

struct Record {
    offset: u64,
    event_ts: Timestamp,
    len: u32,
    /// `None` once evicted, or always when the segment lives on disk.
    bytes: Option<Payload>,
}

struct Segment {
    id: u64,
    start_ts: Timestamp,
    size: u64,
    /// Records with index below this have been evicted.
    evicted: usize,
    records: Vec<Record>,
    file: Option<(PathBuf, BufWriter<File>)>,
    index: Option<BufWriter<File>>,
}

impl Segment {
    fn find(&self, offset: u64) -> Option<usize> {
        self.records.binary_search_by_key(&offset, |r| r.offset).ok()
    }
}

/// One stream's append-only log.
pub struct PayloadLog {
    stream: StreamId,
    segments: VecDeque<Segment>,
    live_bytes: u64,
    dir: Option<PathBuf>,
}

impl PayloadLog {
    fn new(stream: StreamId, base: Option<&Path>) -> io::Result<Self> {
        let dir = match base {
            Some(b) => {
                let d = b.join(stream.as_str());
                fs::create_dir_all(&d)?;
                Some(d)
            }
            None => None,
        };
        Ok(PayloadLog {
            stream,
            segments: VecDeque::new(),
            live_bytes: 0,
            dir,
        })
    }

    pub fn stream(&self) -> &StreamId {
        &self.stream
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    fn open_segment(&self, id: u64, start_ts: Timestamp) -> io::Result<Segment> {
        let (file, index) = match &self.dir {
            Some(d) => {
                let path = d.join(format!("seg-{id}.log"));
                let f = OpenOptions::new().create(true).truncate(true).write(true).open(&path)?;
                let idx = File::create(d.join(format!("seg-{id}.idx")))?;
                (Some((path, BufWriter::new(f))), Some(BufWriter::new(idx)))
            }
            None => (None, None),
        };
        Ok(Segment {
            id,
            start_ts,
            size: 0,
            evicted: 0,
            records: Vec::new(),
            file,
            index,
        })
    }

    /// Oldest-first record eviction until `extra` more bytes fit the budget.
    /// Returns ids of segments that became empty and were dropped.
    fn evict_for(&mut self, extra: u64, budget: u64) -> Vec<u64> {
        let mut dropped = Vec::new();
        while self.live_bytes + extra > budget {
            let Some(seg) = self.segments.front_mut() else { break };
            if seg.evicted < seg.records.len() {
                let r = &mut seg.records[seg.evicted];
                r.bytes = None;
                self.live_bytes -= r.len as u64;
                seg.evicted += 1;
            }
            let drained = seg.evicted == seg.records.len();
            if drained && self.segments.len() > 1 {
                let seg = self.segments.pop_front().unwrap();
                if let Some((path, _)) = &seg.file {
                    let _ = fs::remove_file(path);
                    let _ = fs::remove_file(path.with_extension("idx"));
                }
                dropped.push(seg.id);
            } else if drained {
                break;
            }
        }
        dropped
    }

    fn lookup(&mut self, segment: u64, offset: u64, length: u32) -> Result<(Timestamp, Payload), FetchStatus> {
        let seg = self
            .segments
            .iter_mut()
            .find(|s| s.id == segment)
            .ok_or(FetchStatus::NotFound)?;
        let i = seg.find(offset).ok_or(FetchStatus::NotFound)?;
        if i < seg.evicted {
            return Err(FetchStatus::Evicted);
        }
        let r = &seg.records[i];
        if r.len != length {
            return Err(FetchStatus::NotFound);
        }
        if let Some(b) = &r.bytes {
            return Ok((r.event_ts, b.clone()));
        }
        let (path, w) = seg.file.as_mut().ok_or(FetchStatus::NotFound)?;
        w.flush().map_err(|_| FetchStatus::NotFound)?;
        let mut f = File::open(path).map_err(|_| FetchStatus::NotFound)?;
        f.seek(SeekFrom::Start(offset + RECORD_HEADER))
            .map_err(|_| FetchStatus::NotFound)?;
        let mut buf = vec![0u8; length as usize];
        f.read_exact(&mut buf).map_err(|_| FetchStatus::NotFound)?;
        Ok((r.event_ts, Payload::from(buf)))
    }

    /// First live record with `event_ts >= ts`, as `(segment, offset)`.
    pub fn seek(&self, ts: Timestamp) -> Option<(u64, u64)> {
        for seg in &self.segments {
            let live = &seg.records[seg.evicted..];
            if let Some(r) = live.iter().find(|r| r.event_ts >= ts) {
                return Some((seg.id, r.offset));
            }
        }
        None
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub appended: u64,
    pub appended_bytes: u64,
    pub served: u64,
    pub served_bytes: u64,
    pub stale_rejected: u64,
}

/// All payload logs of one source node.
pub struct PayloadStore {
    node: NodeAddr,
    config: StoreConfig,
    logs: HashMap<StreamId, PayloadLog>,
    owner: HashMap<u64, StreamId>,
    tombstones: BTreeSet<u64>,
    stats: StoreStats,
}

impl PayloadStore {
    pub fn new(node: NodeAddr, config: StoreConfig) -> Self {
        PayloadStore {
            node,
            config,
            logs: HashMap::new(),
            owner: HashMap::new(),
            tombstones: BTreeSet::new(),
            stats: StoreStats::default(),
        }
    }

    pub fn node(&self) -> &NodeAddr {
        &self.node
    }

    pub fn stats(&self) -> &StoreStats {
        &self.stats
    }

    pub fn log(&self, stream: &StreamId) -> Option<&PayloadLog> {
        self.logs.get(stream)
    }

    fn unique_id(&self, start: Timestamp) -> u64 {
        let mut id = start.as_micros();
        while self.owner.contains_key(&id) || self.tombstones.contains(&id) {
            id += 1;
        }
        id
    }

    /// Durably record `payload` and return its claim check.
    pub fn append(&mut self, stream: &StreamId, event_ts: Timestamp, payload: Payload) -> Result<PayloadLocator, StoreError> {
        let len = payload.len();
        if len > self.config.max_payload {
            return Err(StoreError::PayloadTooLarge {
                len,
                max: self.config.max_payload,
            });
        }
        if len as u64 > self.config.retention_bytes {
            return Err(StoreError::StorageFull {
                len: len as u64,
                budget: self.config.retention_bytes,
            });
        }
        if !self.logs.contains_key(stream) {
            let log = PayloadLog::new(stream.clone(), self.config.dir.as_deref())?;
            self.logs.insert(stream.clone(), log);
        }
        let rec_size = RECORD_HEADER + len as u64;
        let needs_roll = match self.logs[stream].segments.back() {
            None => true,
            Some(seg) => {
                (seg.size > 0 && seg.size + rec_size > self.config.segment_bytes)
                    || event_ts.since(seg.start_ts) >= self.config.segment_span
            }
        };
        if needs_roll {
            let id = self.unique_id(event_ts);
            let seg = self.logs[stream].open_segment(id, event_ts)?;
            self.owner.insert(id, stream.clone());
            self.logs.get_mut(stream).unwrap().segments.push_back(seg);
        }
        let log = self.logs.get_mut(stream).unwrap();
        for id in log.evict_for(len as u64, self.config.retention_bytes) {
            self.owner.remove(&id);
            self.tombstones.insert(id);
        }
        let seg = log.segments.back_mut().unwrap();
        let offset = seg.size;
        let bytes = match &mut seg.file {
            Some((_, w)) => {
                w.write_all(&event_ts.as_micros().to_le_bytes())?;
                w.write_all(&(len as u32).to_le_bytes())?;
                w.write_all(&payload)?;
                None
            }
            None => Some(payload),
        };
        if seg.records.len() % INDEX_EVERY == 0 {
            if let Some(idx) = &mut seg.index {
                idx.write_all(&event_ts.as_micros().to_le_bytes())?;
                idx.write_all(&offset.to_le_bytes())?;
                idx.flush()?;
            }
        }
        seg.records.push(Record {
            offset,
            event_ts,
            len: len as u32,
            bytes,
        });
        seg.size += rec_size;
        log.live_bytes += len as u64;
        self.stats.appended += 1;
        self.stats.appended_bytes += len as u64;
        Ok(PayloadLocator {
            node: self.node.clone(),
            segment: seg.id,
            offset,
            length: len as u32,
        })
    }

    /// Resolve a locator to its record timestamp and bytes.
    pub fn lookup(&mut self, locator: &PayloadLocator) -> Result<(Timestamp, Payload), FetchStatus> {
        if locator.node != self.node {
            return Err(FetchStatus::NotFound);
        }
        let Some(stream) = self.owner.get(&locator.segment).cloned() else {
            return Err(if self.tombstones.contains(&locator.segment) {
                FetchStatus::Evicted
            } else {
                FetchStatus::NotFound
            });
        };
        self.logs
            .get_mut(&stream)
            .ok_or(FetchStatus::NotFound)?
            .lookup(locator.segment, locator.offset, locator.length)
    }

    /// Answer a fetch request. The age check uses this node's clock and the
    /// logged event time, so it holds even if the requester's clock differs.
    pub fn serve(&mut self, locator: &PayloadLocator, max_age: Bound, now: Timestamp) -> (FetchStatus, Payload) {
        match self.lookup(locator) {
            Ok((ts, _)) if !max_age.admits(now.age_of(ts)) => {
                self.stats.stale_rejected += 1;
                (FetchStatus::StaleRejected, Payload::new())
            }
            Ok((_, bytes)) => {
                self.stats.served += 1;
                self.stats.served_bytes += bytes.len() as u64;
                (FetchStatus::Ok, bytes)
            }
            Err(status) => (status, Payload::new()),
        }
    }

    /// Flush buffered segment writes.
    pub fn flush(&mut self) -> io::Result<()> {
        for log in self.logs.values_mut() {
            for seg in &mut log.segments {
                if let Some((_, w)) = &mut seg.file {
                    w.flush()?;
                }
            }
        }
        Ok(())
    }
}

/// Parse a segment file into `(offset, event_ts, payload)` records.
pub fn read_segment_file(path: &Path) -> io::Result<Vec<(u64, Timestamp, Vec<u8>)>> {
    let data = fs::read(path)?;
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < data.len() {
        if data.len() - pos < RECORD_HEADER as usize {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated record header"));
        }
        let ts = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap());
        let len = u32::from_le_bytes(data[pos + 8..pos + 12].try_into().unwrap()) as usize;
        let start = pos + RECORD_HEADER as usize;
        if data.len() - start < len {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated record payload"));
        }
        out.push((pos as u64, Timestamp::from_micros(ts), data[start..start + len].to_vec()));
        pos = start + len;
    }
    Ok(out)
}

/// Parse a sparse index file into `(event_ts, offset)` pairs.
pub fn read_index_file(path: &Path) -> io::Result<Vec<(Timestamp, u64)>> {
    let data = fs::read(path)?;
    Ok(data
        .chunks_exact(16)
        .map(|c| {
            (
                Timestamp::from_micros(u64::from_le_bytes(c[..8].try_into().unwrap())),
                u64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect())
}

/// Consumer-side LRU cache of fetched payloads, bounded by total bytes.
pub struct FetchCache {
    entries: LruCache<PayloadLocator, Payload>,
    capacity_bytes: u64,
    used: u64,
}

impl FetchCache {
    pub fn new(capacity_bytes: u64) -> Self {
        FetchCache {
            entries: LruCache::unbounded(),
            capacity_bytes,
            used: 0,
        }
    }

    pub fn get(&mut self, locator: &PayloadLocator) -> Option<Payload> {
        self.entries.get(locator).cloned()
    }

    pub fn contains(&self, locator: &PayloadLocator) -> bool {
        self.entries.contains(locator)
    }

    pub fn insert(&mut self, locator: PayloadLocator, payload: Payload) {
        let len = payload.len() as u64;
        if len > self.capacity_bytes {
            return;
        }
        if let Some(old) = self.entries.put(locator, payload) {
            self.used -= old.len() as u64;
        }
        self.used += len;
        while self.used > self.capacity_bytes {
            match self.entries.pop_lru() {
                Some((_, p)) => self.used -= p.len() as u64,
                None => break,
            }
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchError {
    #[error("payload not found")]
    NotFound,
    #[error("payload evicted by retention")]
    Evicted,
    #[error("payload older than the freshness threshold")]
    Stale,
    #[error("transport failure: {0}")]
    Transport(String),
}

impl FetchError {
    pub fn from_status(status: FetchStatus) -> Option<Self> {
        match status {
            FetchStatus::Ok => None,
            FetchStatus::NotFound => Some(FetchError::NotFound),
            FetchStatus::Evicted => Some(FetchError::Evicted),
            FetchStatus::StaleRejected => Some(FetchError::Stale),
        }
    }
}

/// One request/response exchange with the node named in a locator.
pub trait FetchTransport {
    fn fetch(&mut self, locator: &PayloadLocator, max_age: Bound) -> Result<(FetchStatus, Payload), FetchError>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FetchStats {
    pub network_fetches: u64,
    pub bytes_fetched: u64,
    pub cache_hits: u64,
    /// Rejected before any request was sent.
    pub stale_local: u64,
    /// Rejected by the serving node.
    pub stale_remote: u64,
}

/// Cache plus freshness gate in front of a transport.
pub struct FetchClient<T> {
    transport: T,
    cache: FetchCache,
    stats: FetchStats,
}

impl<T: FetchTransport> FetchClient<T> {
    pub fn new(transport: T, cache_bytes: u64) -> Self {
        FetchClient {
            transport,
            cache: FetchCache::new(cache_bytes),
            stats: FetchStats::default(),
        }
    }

    pub fn stats(&self) -> &FetchStats {
        &self.stats
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// Fetch the payload behind `locator`, whose header carries `event_ts`.
    ///
    /// With `freshness = Some((now, threshold))` an item already older than
    /// the threshold is rejected without contacting the source.
    pub fn fetch(
        &mut self,
        locator: &PayloadLocator,
        event_ts: Timestamp,
        freshness: Option<(Timestamp, Bound)>,
    ) -> Result<Payload, FetchError> {
        if let Some((now, threshold)) = freshness {
            if !threshold.admits(now.age_of(event_ts)) {
                self.stats.stale_local += 1;
                return Err(FetchError::Stale);
            }
        }
        if let Some(p) = self.cache.get(locator) {
            self.stats.cache_hits += 1;
            return Ok(p);
        }
        let max_age = freshness.map_or(Bound::Unlimited, |(_, t)| t);
        let (status, payload) = self.transport.fetch(locator, max_age)?;
        self.stats.network_fetches += 1;
        self.stats.bytes_fetched += payload.len() as u64;
        if let Some(err) = FetchError::from_status(status) {
            if err == FetchError::Stale {
                self.stats.stale_remote += 1;
            }
            return Err(err);
        }
        self.cache.insert(locator.clone(), payload.clone());
        Ok(payload)
    }
}

/// In-process transport over shared stores; the clock gives the serving
/// node's notion of now.
#[derive(Clone)]
pub struct LocalTransport {
    stores: HashMap<NodeAddr, Arc<Mutex<PayloadStore>>>,
    clock: Arc<dyn Fn() -> Timestamp + Send + Sync>,
}

impl LocalTransport {
    pub fn new(clock: Arc<dyn Fn() -> Timestamp + Send + Sync>) -> Self {
        LocalTransport {
            stores: HashMap::new(),
            clock,
        }
    }

    pub fn add(&mut self, store: Arc<Mutex<PayloadStore>>) {
        let node = store.lock().unwrap().node().clone();
        self.stores.insert(node, store);
    }
}

impl FetchTransport for LocalTransport {
    fn fetch(&mut self, locator: &PayloadLocator, max_age: Bound) -> Result<(FetchStatus, Payload), FetchError> {
        let store = self
            .stores
            .get(&locator.node)
            .ok_or_else(|| FetchError::Transport(format!("no route to {}", locator.node)))?;
        let now = (self.clock)();
        Ok(store.lock().unwrap().serve(locator, max_age, now))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MIB: usize = 1 << 20;

    fn node() -> NodeAddr {
        NodeAddr::new("src", 7000)
    }

    fn s(name: &str) -> StreamId {
        StreamId::new(name).unwrap()
    }

    fn store(cfg: StoreConfig) -> Arc<Mutex<PayloadStore>> {
        Arc::new(Mutex::new(PayloadStore::new(node(), cfg)))
    }

    fn client(st: &Arc<Mutex<PayloadStore>>, now: Timestamp) -> FetchClient<LocalTransport> {
        let mut t = LocalTransport::new(Arc::new(move || now));
        t.add(st.clone());
        FetchClient::new(t, 1 << 30)
    }

    #[test]
    fn append_then_fetch_round_trip() {
        let st = store(StoreConfig::default());
        let locs: Vec<_> = (0..3u8)
            .map(|i| {
                st.lock()
                    .unwrap()
                    .append(&s("a"), Timestamp::from_millis(i as u64), Payload::from(vec![i; 5]))
                    .unwrap()
            })
            .collect();
        assert_eq!(locs.iter().collect::<HashSet<_>>().len(), 3);
        let mut c = client(&st, Timestamp::ZERO);
        for (i, loc) in locs.iter().enumerate() {
            assert_eq!(c.fetch(loc, Timestamp::ZERO, None).unwrap(), vec![i as u8; 5]);
        }
    }

    use std::collections::HashSet;

    #[test]
    fn retention_evicts_oldest() {
        let cfg = StoreConfig {
            retention_bytes: 5 * MIB as u64,
            ..StoreConfig::default()
        };
        let st = store(cfg);
        let locs: Vec<_> = (0..10u64)
            .map(|i| {
                st.lock()
                    .unwrap()
                    .append(&s("a"), Timestamp::from_millis(i), Payload::from(vec![i as u8; MIB]))
                    .unwrap()
            })
            .collect();
        let mut c = client(&st, Timestamp::ZERO);
        assert_eq!(c.fetch(&locs[0], Timestamp::ZERO, None), Err(FetchError::Evicted));
        assert_eq!(c.fetch(&locs[4], Timestamp::ZERO, None), Err(FetchError::Evicted));
        assert_eq!(c.fetch(&locs[5], Timestamp::ZERO, None).unwrap()[0], 5);
        assert_eq!(st.lock().unwrap().log(&s("a")).unwrap().live_bytes(), 5 * MIB as u64);
    }

    #[test]
    fn evicted_segment_still_reports_evicted() {
        let cfg = StoreConfig {
            retention_bytes: 100,
            segment_bytes: 40,
            ..StoreConfig::default()
        };
        let st = store(cfg);
        let first = st
            .lock()
            .unwrap()
            .append(&s("a"), Timestamp::ZERO, Payload::from(vec![0u8; 30]))
            .unwrap();
        for i in 1..10 {
            st.lock()
                .unwrap()
                .append(&s("a"), Timestamp::from_millis(i), Payload::from(vec![0u8; 30]))
                .unwrap();
        }
        let mut g = st.lock().unwrap();
        assert!(g.log(&s("a")).unwrap().segment_count() <= 4);
        assert_eq!(g.lookup(&first), Err(FetchStatus::Evicted));
        let bogus = PayloadLocator {
            segment: 999_999,
            ..first
        };
        assert_eq!(g.lookup(&bogus), Err(FetchStatus::NotFound));
    }

    #[test]
    fn oversize_payload_errors() {
        let cfg = StoreConfig {
            retention_bytes: 10,
            max_payload: 20,
            ..StoreConfig::default()
        };
        let mut st = PayloadStore::new(node(), cfg);
        assert!(matches!(
            st.append(&s("a"), Timestamp::ZERO, Payload::from(vec![0u8; 21])),
            Err(StoreError::PayloadTooLarge { .. })
        ));
        assert!(matches!(
            st.append(&s("a"), Timestamp::ZERO, Payload::from(vec![0u8; 11])),
            Err(StoreError::StorageFull { .. })
        ));
    }

    #[test]
    fn second_fetch_hits_cache() {
        let st = store(StoreConfig::default());
        let loc = st
            .lock()
            .unwrap()
            .append(&s("a"), Timestamp::ZERO, Payload::from(vec![1u8; 100]))
            .unwrap();
        let mut c = client(&st, Timestamp::ZERO);
        c.fetch(&loc, Timestamp::ZERO, None).unwrap();
        let before = c.stats().bytes_fetched;
        c.fetch(&loc, Timestamp::ZERO, None).unwrap();
        assert_eq!(c.stats().bytes_fetched, before);
        assert_eq!(c.stats().network_fetches, 1);
        assert_eq!(c.stats().cache_hits, 1);
    }

    #[test]
    fn stale_gate_moves_no_bytes() {
        let st = store(StoreConfig::default());
        let ts = Timestamp::from_millis(400);
        let loc = st.lock().unwrap().append(&s("a"), ts, Payload::from(vec![1u8; 100])).unwrap();
        let now = Timestamp::from_millis(1000);
        let mut c = client(&st, now);
        assert_eq!(c.fetch(&loc, ts, Some((now, Bound::millis(500)))), Err(FetchError::Stale));
        assert_eq!(c.stats().bytes_fetched, 0);
        assert_eq!(c.stats().network_fetches, 0);
    }

    #[test]
    fn server_reverifies_freshness() {
        let st = store(StoreConfig::default());
        let ts = Timestamp::from_millis(400);
        let loc = st.lock().unwrap().append(&s("a"), ts, Payload::from(vec![1u8; 100])).unwrap();
        // consumer clock lags: thinks the item is fresh; server clock says otherwise
        let mut c = client(&st, Timestamp::from_millis(1000));
        let lagging_now = Timestamp::from_millis(600);
        assert_eq!(
            c.fetch(&loc, ts, Some((lagging_now, Bound::millis(500)))),
            Err(FetchError::Stale)
        );
        assert_eq!(c.stats().stale_remote, 1);
        assert_eq!(c.stats().bytes_fetched, 0);
    }

    #[test]
    fn skipping_fetches_proportional_bytes() {
        let st = store(StoreConfig::default());
        let sizes: Vec<usize> = (0..150).map(|i| 1000 + (i * 37) % 500).collect();
        let locs: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                st.lock()
                    .unwrap()
                    .append(&s("a"), Timestamp::from_millis(i as u64), Payload::from(vec![0u8; *n]))
                    .unwrap()
            })
            .collect();
        let mut c = client(&st, Timestamp::ZERO);
        let total: usize = sizes.iter().sum();
        for (i, loc) in locs.iter().enumerate() {
            // skip 40%: two of every five
            if i % 5 >= 2 {
                c.fetch(loc, Timestamp::ZERO, None).unwrap();
            }
        }
        let expect = 0.6 * total as f64;
        assert!((c.stats().bytes_fetched as f64 - expect).abs() <= 1500.0);
    }

    #[test]
    fn cache_is_byte_bounded_lru() {
        let mut cache = FetchCache::new(25);
        let loc = |i: u64| PayloadLocator {
            node: node(),
            segment: 0,
            offset: i,
            length: 10,
        };
        cache.insert(loc(0), Payload::from(vec![0u8; 10]));
        cache.insert(loc(1), Payload::from(vec![1u8; 10]));
        cache.get(&loc(0));
        cache.insert(loc(2), Payload::from(vec![2u8; 10]));
        assert!(cache.contains(&loc(0)));
        assert!(!cache.contains(&loc(1)));
        assert_eq!(cache.used_bytes(), 20);
    }

    #[test]
    fn file_backed_layout_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StoreConfig {
            dir: Some(dir.path().to_path_buf()),
            ..StoreConfig::default()
        };
        let mut st = PayloadStore::new(node(), cfg);
        let mut locs = Vec::new();
        for i in 0..130u64 {
            locs.push(
                st.append(&s("cam"), Timestamp::from_millis(1000 + i), Payload::from(vec![i as u8; 3]))
                    .unwrap(),
            );
        }
        st.flush().unwrap();
        let seg = locs[0].segment;
        assert_eq!(seg, 1_000_000);
        let path = dir.path().join("cam").join(format!("seg-{seg}.log"));
        let recs = read_segment_file(&path).unwrap();
        assert_eq!(recs.len(), 130);
        assert_eq!(recs[1], (15, Timestamp::from_millis(1001), vec![1u8; 3]));
        let idx = read_index_file(&path.with_extension("idx")).unwrap();
        assert_eq!(
            idx,
            vec![
                (Timestamp::from_millis(1000), 0),
                (Timestamp::from_millis(1064), 64 * 15),
                (Timestamp::from_millis(1128), 128 * 15)
            ]
        );
        assert_eq!(st.lookup(&locs[77]).unwrap().1, vec![77u8; 3]);
        assert_eq!(
            st.log(&s("cam")).unwrap().seek(Timestamp::from_millis(1077)),
            Some((seg, 77 * 15))
        );
    }

    #[test]
    fn segments_roll_on_time_span() {
        let cfg = StoreConfig {
            segment_span: Duration::from_secs(600),
            ..StoreConfig::default()
        };
        let mut st = PayloadStore::new(node(), cfg);
        let a = st.append(&s("a"), Timestamp::from_secs(0), Payload::from_static(b"x")).unwrap();
        let b = st.append(&s("a"), Timestamp::from_secs(599), Payload::from_static(b"x")).unwrap();
        let c = st.append(&s("a"), Timestamp::from_secs(600), Payload::from_static(b"x")).unwrap();
        assert_eq!(a.segment, b.segment);
        assert_ne!(b.segment, c.segment);
        // two streams starting at the same instant get distinct segment ids
        let d = st.append(&s("b"), Timestamp::from_secs(0), Payload::from_static(b"y")).unwrap();
        assert_ne!(d.segment, a.segment);
        assert_eq!(st.lookup(&d).unwrap().1, Payload::from_static(b"y"));
    }

    proptest! {
        #[test]
        fn fetch_count_and_byte_accounting(picks in prop::collection::vec(0usize..20, 1..200)) {
            let st = store(StoreConfig::default());
            let locs: Vec<_> = (0..20u64).map(|i| st.lock().unwrap()
                .append(&s("a"), Timestamp::from_millis(i), Payload::from(vec![i as u8; 1 + i as usize])).unwrap()).collect();
            let mut c = client(&st, Timestamp::ZERO);
            let mut distinct = HashSet::new();
            for p in picks {
                let got = c.fetch(&locs[p], Timestamp::ZERO, None).unwrap();
                prop_assert_eq!(got, vec![p as u8; 1 + p]);
                distinct.insert(p);
            }
            prop_assert_eq!(c.stats().network_fetches as usize, distinct.len());
            let expect: u64 = distinct.iter().map(|p| 1 + *p as u64).sum();
            prop_assert_eq!(c.stats().bytes_fetched, expect);
        }
    }
}
