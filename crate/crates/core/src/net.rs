//! Live mode over TCP: the broker and fetch servers, their clients, and the
//! source and model loops the CLI runs.
//!
//! One thread per connection. The broker serializes all topic state behind a
//! single mutex and wakes delivery threads through a condvar.
//!
//! Replies on a broker connection:
//!
//! | request         | success                   | failure        |
//! |-----------------|---------------------------|----------------|
//! | `CreateTopic`   | `Ack { sequence: 0 }`     | `Error`        |
//! | `PublishHeader` | `Ack { sequence: seq }`   | `Error`        |
//! | `Subscribe`     | `CreateTopic(config)`     | `Error`        |
//! | `Ack`           | none                      | none           |
//!
//! After a successful `Subscribe` the broker streams `Deliver` and `Gap`
//! frames on that connection; the subscriber sends `Ack`s back for shared
//! deliveries.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, LineWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};

use crate::broker::{Broker, BrokerConfig, BrokerError, Delivery};
use crate::metrics::{EventKind, MetricEvent};
use crate::runtime::{Effect, FailSoft, FetchOutcome, ModelOperator, Pipeline, PipelineConfig, Prediction};
use crate::store::{FetchClient, FetchError, FetchTransport, PayloadStore, StoreConfig};
use crate::time::{Bound, Duration, Timestamp};
use crate::types::{Body, Header, NodeAddr, Payload, PayloadLocator, StreamId, TopicConfig, TopicId};
use crate::wire::{error_code, read_frame, write_frame, FetchStatus, WireError, WireMessage};

const POLL: std::time::Duration = std::time::Duration::from_millis(20);
const DELIVERY_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("broker error {code}: {message}")]
    Remote { code: u8, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection closed by peer")]
    Closed,
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl NetError {
    /// Whether the broker rejected the request because the topic does not exist.
    pub fn is_unknown_topic(&self) -> bool {
        matches!(self, NetError::Remote { code, .. } if *code == error_code::UNKNOWN_TOPIC)
    }
}

fn connect(addr: &str) -> Result<TcpStream, NetError> {
    let s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    Ok(s)
}

/// Append-only metric log for one live process, flushed line by line.
pub struct LiveLog {
    node: String,
    out: Mutex<LineWriter<File>>,
}

impl LiveLog {
    /// Open `<dir>/<file_stem>.log`, creating `dir` if needed.
    pub fn create(dir: &Path, node: &str, file_stem: &str) -> io::Result<Arc<LiveLog>> {
        fs::create_dir_all(dir)?;
        let f = File::create(dir.join(format!("{file_stem}.log")))?;
        Ok(Arc::new(LiveLog {
            node: node.to_string(),
            out: Mutex::new(LineWriter::new(f)),
        }))
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn record(&self, e: &MetricEvent) {
        let mut w = self.out.lock().unwrap();
        if let Err(err) = writeln!(w, "{}", e.to_line()) {
            log::error!("metric log write failed: {err}");
        }
    }

    pub fn record_all(&self, events: impl IntoIterator<Item = MetricEvent>) {
        for e in events {
            self.record(&e);
        }
    }

    pub fn flush(&self) {
        let _ = self.out.lock().unwrap().flush();
    }

    pub fn shutdown(&self, extra: &str) {
        self.record(&MetricEvent::new(Timestamp::now_wall(), &self.node, EventKind::Shutdown).extra(extra));
        let _ = self.out.lock().unwrap().flush();
    }
}

// ---------- broker server ----------

struct BrokerShared {
    broker: Mutex<Broker>,
    changed: Condvar,
    stop: AtomicBool,
    log: Arc<LiveLog>,
    conns: Mutex<Vec<TcpStream>>,
}

/// A running broker. Dropping it without [`BrokerServer::stop`] leaves the
/// threads running until the process exits.
pub struct BrokerServer {
    addr: SocketAddr,
    shared: Arc<BrokerShared>,
    accept: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn start(
        listener: TcpListener,
        config: BrokerConfig,
        topics: Vec<TopicConfig>,
        log: Arc<LiveLog>,
    ) -> Result<BrokerServer, NetError> {
        let mut broker = Broker::new(config);
        for t in topics {
            broker
                .create_topic(t)
                .map_err(|e| NetError::Config(e.to_string()))?;
        }
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shared = Arc::new(BrokerShared {
            broker: Mutex::new(broker),
            changed: Condvar::new(),
            stop: AtomicBool::new(false),
            log,
            conns: Mutex::new(Vec::new()),
        });
        let sh = shared.clone();
        let accept = thread::spawn(move || {
            while !sh.stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        if let Ok(c) = stream.try_clone() {
                            sh.conns.lock().unwrap().push(c);
                        }
                        let sh = sh.clone();
                        thread::spawn(move || {
                            if let Err(e) = broker_conn(&sh, stream) {
                                log::debug!("broker connection {peer} ended: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        });
        Ok(BrokerServer {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting, close every connection and log the shutdown marker.
    pub fn stop(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.changed.notify_all();
        for c in self.shared.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let stats = self.shared.broker.lock().unwrap().stats();
        self.shared.log.shutdown(&format!(
            "broker_payload_bytes={};broker_frame_bytes={}",
            stats.payload_bytes, stats.frame_bytes
        ));
    }
}

fn error_frame(e: &BrokerError) -> WireMessage {
    WireMessage::Error {
        code: e.wire_code(),
        message: e.to_string(),
    }
}

fn broker_conn(sh: &Arc<BrokerShared>, stream: TcpStream) -> Result<(), NetError> {
    let writer = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let mut reader = BufReader::new(stream);
    let mut subscription: Option<(TopicId, String)> = None;
    let reply = |m: &WireMessage| -> Result<(), NetError> {
        let mut w = writer.lock().unwrap();
        write_frame(&mut *w, m)?;
        w.flush()?;
        Ok(())
    };
    let result = loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e.into()),
        };
        match msg {
            WireMessage::CreateTopic(cfg) => {
                let r = sh.broker.lock().unwrap().create_topic(cfg);
                reply(&match r {
                    Ok(()) => WireMessage::Ack { sequence: 0 },
                    Err(e) => error_frame(&e),
                })?;
            }
            WireMessage::PublishHeader(header) => {
                let now = Timestamp::now_wall();
                let item = header.item_ref();
                let topic = header.topic.clone();
                let r = sh.broker.lock().unwrap().publish(header, now);
                match r {
                    Ok(seq) => {
                        sh.log.record(
                            &MetricEvent::new(now, sh.log.node(), EventKind::ProduceEnd).item(
                                topic.as_str(),
                                item.stream.as_str(),
                                item.event_ts,
                                item.seq,
                            ),
                        );
                        sh.changed.notify_all();
                        reply(&WireMessage::Ack { sequence: seq })?;
                    }
                    Err(e) => reply(&error_frame(&e))?,
                }
            }
            WireMessage::Subscribe { topic, consumer, shared } => {
                if subscription.is_some() {
                    reply(&WireMessage::Error {
                        code: error_code::PROTOCOL,
                        message: "one subscription per connection".into(),
                    })?;
                    continue;
                }
                let r = sh
                    .broker
                    .lock()
                    .unwrap()
                    .subscribe(&topic, &consumer, shared)
                    .map(|c| c.clone());
                match r {
                    Ok(cfg) => {
                        reply(&WireMessage::CreateTopic(cfg))?;
                        subscription = Some((topic.clone(), consumer.clone()));
                        let (sh, w) = (sh.clone(), writer.clone());
                        thread::spawn(move || deliver_loop(&sh, &topic, &consumer, shared, &w));
                    }
                    Err(e) => reply(&error_frame(&e))?,
                }
            }
            WireMessage::Ack { sequence } => {
                if let Some((topic, consumer)) = &subscription {
                    if let Ok(q) = sh.broker.lock().unwrap().topic_mut(topic) {
                        q.ack(consumer, sequence);
                    }
                    sh.changed.notify_all();
                }
            }
            other => {
                reply(&WireMessage::Error {
                    code: error_code::PROTOCOL,
                    message: format!("unexpected message type {}", other.msg_type()),
                })?;
            }
        }
    };
    if let Some((topic, consumer)) = subscription {
        if let Ok(q) = sh.broker.lock().unwrap().topic_mut(&topic) {
            q.disconnect(&consumer);
        }
        sh.changed.notify_all();
    }
    result
}

fn deliver_loop(
    sh: &Arc<BrokerShared>,
    topic: &TopicId,
    consumer: &str,
    shared: bool,
    writer: &Mutex<BufWriter<TcpStream>>,
) {
    loop {
        let batch = {
            let mut b = sh.broker.lock().unwrap();
            loop {
                if sh.stop.load(Ordering::SeqCst) {
                    return;
                }
                let Ok(q) = b.topic_mut(topic) else { return };
                if !q.is_subscribed(consumer) {
                    return;
                }
                let batch: Vec<Delivery> = if shared {
                    q.dispatch_shared();
                    q.drain_shared(consumer)
                        .into_iter()
                        .map(|(seq, header)| Delivery::Header { seq, header })
                        .collect()
                } else {
                    q.poll_exclusive(consumer, DELIVERY_BATCH).unwrap_or_default()
                };
                if !batch.is_empty() {
                    break batch;
                }
                b = sh.changed.wait_timeout(b, POLL * 5).unwrap().0;
            }
        };
        let mut w = writer.lock().unwrap();
        for d in batch {
            let m = match d {
                Delivery::Header { seq, header } => WireMessage::Deliver { seq, header },
                Delivery::Gap {
                    first_missing,
                    resume_at,
                } => WireMessage::Gap {
                    first_missing,
                    resume_at,
                },
            };
            if write_frame(&mut *w, &m).is_err() {
                return;
            }
        }
        if w.flush().is_err() {
            return;
        }
    }
}

// ---------- broker client ----------

/// Request/response connection to the broker.
pub struct BrokerClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl BrokerClient {
    pub fn connect(addr: &str) -> Result<BrokerClient, NetError> {
        let s = connect(addr)?;
        Ok(BrokerClient {
            reader: BufReader::new(s.try_clone()?),
            writer: BufWriter::new(s),
        })
    }

    fn call(&mut self, m: &WireMessage) -> Result<WireMessage, NetError> {
        write_frame(&mut self.writer, m)?;
        self.writer.flush()?;
        match read_frame(&mut self.reader)? {
            Some(WireMessage::Error { code, message }) => Err(NetError::Remote { code, message }),
            Some(reply) => Ok(reply),
            None => Err(NetError::Closed),
        }
    }

    pub fn create_topic(&mut self, config: TopicConfig) -> Result<(), NetError> {
        match self.call(&WireMessage::CreateTopic(config))? {
            WireMessage::Ack { .. } => Ok(()),
            other => Err(NetError::Protocol(format!("unexpected reply type {}", other.msg_type()))),
        }
    }

    /// Returns the broker sequence number.
    pub fn publish(&mut self, header: Header) -> Result<u64, NetError> {
        match self.call(&WireMessage::PublishHeader(header))? {
            WireMessage::Ack { sequence } => Ok(sequence),
            other => Err(NetError::Protocol(format!("unexpected reply type {}", other.msg_type()))),
        }
    }

    /// Subscribe and turn the connection into a delivery stream.
    pub fn subscribe(mut self, topic: &TopicId, consumer: &str, shared: bool) -> Result<Subscription, NetError> {
        let reply = self.call(&WireMessage::Subscribe {
            topic: topic.clone(),
            consumer: consumer.to_string(),
            shared,
        })?;
        let WireMessage::CreateTopic(config) = reply else {
            return Err(NetError::Protocol(format!("unexpected reply type {}", reply.msg_type())));
        };
        let (tx, rx) = mpsc::channel();
        let mut reader = self.reader;
        let reader_thread = thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(Some(m)) => {
                    if tx.send(Ok(m)).is_err() {
                        return;
                    }
                }
                Ok(None) => {
                    let _ = tx.send(Err(NetError::Closed));
                    return;
                }
                Err(e) => {
                    let _ = tx.send(Err(e.into()));
                    return;
                }
            }
        });
        Ok(Subscription {
            config,
            incoming: rx,
            writer: self.writer,
            _reader: reader_thread,
        })
    }
}

pub struct Subscription {
    pub config: TopicConfig,
    incoming: mpsc::Receiver<Result<WireMessage, NetError>>,
    writer: BufWriter<TcpStream>,
    _reader: JoinHandle<()>,
}

impl Subscription {
    /// Next delivery, or `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: std::time::Duration) -> Result<Option<WireMessage>, NetError> {
        match self.incoming.recv_timeout(timeout) {
            Ok(r) => r.map(Some),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(NetError::Closed),
        }
    }

    pub fn ack(&mut self, sequence: u64) -> Result<(), NetError> {
        write_frame(&mut self.writer, &WireMessage::Ack { sequence })?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn close(self) {
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

// ---------- payload fetch ----------

/// Serves `FetchRequest`s from a source's payload store.
pub struct FetchServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl FetchServer {
    pub fn start(listener: TcpListener, store: Arc<Mutex<PayloadStore>>) -> io::Result<FetchServer> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let (st, cs) = (stop.clone(), conns.clone());
        let accept = thread::spawn(move || {
            while !st.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        if let Ok(c) = stream.try_clone() {
                            cs.lock().unwrap().push(c);
                        }
                        let store = store.clone();
                        thread::spawn(move || {
                            if let Err(e) = fetch_conn(&store, stream) {
                                log::debug!("fetch connection ended: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        });
        Ok(FetchServer {
            addr,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn fetch_conn(store: &Mutex<PayloadStore>, stream: TcpStream) -> Result<(), NetError> {
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut reader = BufReader::new(stream);
    while let Some(msg) = read_frame(&mut reader)? {
        let reply = match msg {
            WireMessage::FetchRequest { locator, max_age } => {
                let (status, payload) = store.lock().unwrap().serve(&locator, max_age, Timestamp::now_wall());
                WireMessage::FetchResponse { status, payload }
            }
            other => WireMessage::Error {
                code: error_code::PROTOCOL,
                message: format!("unexpected message type {}", other.msg_type()),
            },
        };
        write_frame(&mut writer, &reply)?;
        writer.flush()?;
    }
    Ok(())
}

/// Fetches over TCP with one pooled connection per peer.
#[derive(Default)]
pub struct TcpFetchTransport {
    pool: HashMap<NodeAddr, (BufReader<TcpStream>, BufWriter<TcpStream>)>,
    /// Connections opened so far.
    pub connects: u64,
}

impl TcpFetchTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn exchange(&mut self, locator: &PayloadLocator, max_age: Bound) -> Result<(FetchStatus, Payload), NetError> {
        let node = &locator.node;
        if !self.pool.contains_key(node) {
            let s = connect(&node.to_string())?;
            self.connects += 1;
            self.pool
                .insert(node.clone(), (BufReader::new(s.try_clone()?), BufWriter::new(s)));
        }
        let (r, w) = self.pool.get_mut(node).unwrap();
        let req = WireMessage::FetchRequest {
            locator: locator.clone(),
            max_age,
        };
        write_frame(w, &req)?;
        w.flush()?;
        match read_frame(r)? {
            Some(WireMessage::FetchResponse { status, payload }) => Ok((status, payload)),
            Some(other) => Err(NetError::Protocol(format!("unexpected reply type {}", other.msg_type()))),
            None => Err(NetError::Closed),
        }
    }
}

impl FetchTransport for TcpFetchTransport {
    fn fetch(&mut self, locator: &PayloadLocator, max_age: Bound) -> Result<(FetchStatus, Payload), FetchError> {
        match self.exchange(locator, max_age) {
            Ok(r) => Ok(r),
            Err(first) => {
                // a pooled connection may have gone stale; retry once on a fresh one
                self.pool.remove(&locator.node);
                log::debug!("fetch from {} failed ({first}), reconnecting", locator.node);
                self.exchange(locator, max_age).map_err(|e| {
                    self.pool.remove(&locator.node);
                    FetchError::Transport(e.to_string())
                })
            }
        }
    }
}

// ---------- source ----------

pub struct SourceConfig {
    pub node: String,
    pub leader: String,
    pub topic: TopicId,
    pub stream: StreamId,
    /// Keep payloads at the source and publish claim checks.
    pub lazy: bool,
    /// Address for the fetch server; port 0 picks one.
    pub listen: String,
    /// Host put into locators; defaults to the bound address.
    pub advertise: Option<String>,
    pub period: Duration,
    pub store: StoreConfig,
    /// How long to keep serving fetches after the last publish.
    pub linger: Duration,
}

/// Publish `payloads` one per period, then serve fetches until `stop` or the linger time.
pub fn run_source(
    cfg: &SourceConfig,
    payloads: impl IntoIterator<Item = Payload>,
    log: &LiveLog,
    stop: &AtomicBool,
) -> Result<u64, NetError> {
    let mut client = BrokerClient::connect(&cfg.leader)?;
    let mut server = None;
    let store = if cfg.lazy {
        let listener = TcpListener::bind(&cfg.listen)?;
        let bound = listener.local_addr()?;
        let host = cfg.advertise.clone().unwrap_or_else(|| bound.ip().to_string());
        let store = Arc::new(Mutex::new(PayloadStore::new(
            NodeAddr::new(host, bound.port()),
            cfg.store.clone(),
        )));
        server = Some(FetchServer::start(listener, store.clone())?);
        Some(store)
    } else {
        None
    };
    let start = Timestamp::now_wall();
    let mut sent = 0u64;
    let mut outcome = Ok(());
    for (seq, payload) in payloads.into_iter().enumerate() {
        let due = start + Duration::from_micros(cfg.period.as_micros() * seq as i64);
        if !sleep_until(due, stop) {
            break;
        }
        let ts = Timestamp::now_wall();
        let seq = seq as u64;
        log.record(
            &MetricEvent::new(ts, &cfg.node, EventKind::ProduceBegin)
                .item(cfg.topic.as_str(), cfg.stream.as_str(), ts, seq)
                .extra(format!("bytes={}", payload.len())),
        );
        let body = match &store {
            Some(s) => match s.lock().unwrap().append(&cfg.stream, ts, payload) {
                Ok(loc) => Body::Lazy(loc),
                Err(e) => {
                    outcome = Err(NetError::Config(e.to_string()));
                    break;
                }
            },
            None => Body::Inline(payload),
        };
        let header = Header::new(cfg.topic.clone(), cfg.stream.clone(), seq, ts, body);
        if let Err(e) = client.publish(header) {
            outcome = Err(e);
            break;
        }
        sent += 1;
    }
    if outcome.is_ok() && server.is_some() {
        sleep_until(Timestamp::now_wall() + cfg.linger, stop);
    }
    if let Some(s) = server.take() {
        s.stop();
    }
    if let Some(s) = store {
        let _ = s.lock().unwrap().flush();
    }
    log.shutdown(&format!("published={sent}"));
    outcome.map(|_| sent)
}

/// Sleep until `t` in short steps. Returns false if `stop` was raised.
fn sleep_until(t: Timestamp, stop: &AtomicBool) -> bool {
    loop {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        let left = t.since(Timestamp::now_wall());
        if left <= Duration::ZERO {
            return true;
        }
        thread::sleep(left.to_std().min(POLL));
    }
}

// ---------- model ----------

pub struct ModelConfig {
    pub node: String,
    pub leader: String,
    pub topic: TopicId,
    pub consumer: String,
    pub shared: bool,
    pub operator: ModelOperator,
    pub fail_soft: FailSoft,
    pub cache_bytes: u64,
    /// Exit after this many predictions.
    pub max_predictions: Option<usize>,
    /// Exit after this long without a delivery.
    pub idle_timeout: Option<Duration>,
}

/// Why the model loop returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelExit {
    Stopped,
    MaxPredictions,
    Idle,
    BrokerClosed,
}

/// Subscribe and run the pipeline until a stop condition.
pub fn run_model(
    cfg: &ModelConfig,
    log: &LiveLog,
    stop: &AtomicBool,
    mut on_prediction: impl FnMut(&Prediction),
) -> Result<ModelExit, NetError> {
    let mut sub = BrokerClient::connect(&cfg.leader)?.subscribe(&cfg.topic, &cfg.consumer, cfg.shared)?;
    let mut out = match &cfg.operator.output {
        Some(_) => Some(BrokerClient::connect(&cfg.leader)?),
        None => None,
    };
    let pcfg = PipelineConfig {
        node: cfg.node.clone(),
        topic: sub.config.clone(),
        operator: cfg.operator.clone(),
        fail_soft: cfg.fail_soft,
    };
    let mut pipeline = Pipeline::new(pcfg, Timestamp::now_wall()).map_err(|e| NetError::Config(e.to_string()))?;
    log.record_all(pipeline.take_events());
    let mut fetcher = FetchClient::new(TcpFetchTransport::new(), cfg.cache_bytes);
    let mut predictions = 0usize;
    let mut last_delivery = Timestamp::now_wall();

    let exit = 'run: loop {
        if stop.load(Ordering::SeqCst) {
            break ModelExit::Stopped;
        }
        let now = Timestamp::now_wall();
        if let Some(idle) = cfg.idle_timeout {
            if now.since(last_delivery) >= idle {
                break ModelExit::Idle;
            }
        }
        let wait = match pipeline.next_deadline() {
            Some(d) if d <= now => std::time::Duration::ZERO,
            Some(d) => d.since(now).to_std().min(POLL),
            None => POLL,
        };
        let msg = match sub.recv_timeout(wait) {
            Ok(m) => m,
            Err(NetError::Closed) => break ModelExit::BrokerClosed,
            Err(e) => return Err(e),
        };
        let now = Timestamp::now_wall();
        let mut effects = Vec::new();
        match msg {
            Some(WireMessage::Deliver { seq, header }) => {
                last_delivery = now;
                let broker_seq = cfg.shared.then_some(seq);
                match pipeline.on_deliver(broker_seq, header, now) {
                    Ok(e) => effects.extend(e),
                    Err(e) => log::warn!("{}: delivery rejected: {e}", cfg.node),
                }
            }
            Some(WireMessage::Gap {
                first_missing,
                resume_at,
            }) => log::warn!("{}: broker retention gap {first_missing}..{resume_at}", cfg.node),
            Some(other) => log::warn!("{}: ignoring message type {}", cfg.node, other.msg_type()),
            None => {}
        }
        if pipeline.next_deadline().is_some_and(|d| d <= now) {
            pipeline.on_tick(now);
        }
        loop {
            let (job, eff) = pipeline.start_next(Timestamp::now_wall());
            effects.extend(eff);
            let Some(job) = job else { break };
            let results: Vec<_> = job
                .fetches
                .iter()
                .map(|(i, loc)| {
                    let h = &job.tuple.slots[*i].header;
                    let gate = (Timestamp::now_wall(), sub.config.freshness_threshold);
                    fetcher.fetch(loc, h.event_ts, Some(gate))
                })
                .collect();
            match pipeline.on_fetched(job, results, Timestamp::now_wall()) {
                FetchOutcome::Dropped(e) => effects.extend(e),
                FetchOutcome::Invoke(inv) => {
                    if !sleep_until(inv.finish_at, stop) {
                        log.record_all(pipeline.take_events());
                        break 'run ModelExit::Stopped;
                    }
                    effects.extend(pipeline.on_model_done(inv, Timestamp::now_wall()));
                    for p in pipeline.take_predictions() {
                        on_prediction(&p);
                        predictions += 1;
                    }
                }
            }
            log.record_all(pipeline.take_events());
            apply_effects(&mut effects, &mut sub, out.as_mut())?;
            if cfg.max_predictions.is_some_and(|m| predictions >= m) {
                break 'run ModelExit::MaxPredictions;
            }
        }
        log.record_all(pipeline.take_events());
        apply_effects(&mut effects, &mut sub, out.as_mut())?;
    };
    // the pipeline's shutdown record closes the log
    pipeline.finish(Timestamp::now_wall());
    log.record_all(pipeline.take_events());
    log.flush();
    sub.close();
    Ok(exit)
}

fn apply_effects(effects: &mut Vec<Effect>, sub: &mut Subscription, out: Option<&mut BrokerClient>) -> Result<(), NetError> {
    let mut out = out;
    for e in effects.drain(..) {
        match e {
            Effect::Ack { seq } => sub.ack(seq)?,
            Effect::Publish(h) => match out.as_deref_mut() {
                Some(c) => {
                    c.publish(h)?;
                }
                None => log::warn!("prediction produced without an output connection"),
            },
        }
    }
    Ok(())
}
