//! The discrete-event loop.
//!
//! Every node runs the same broker, store and pipeline code as live mode;
//! only the transport is simulated. Events are ordered by
//! `(time, class, insertion)` with window ticks before anything else at the
//! same instant, so a run is a pure function of the scenario.

use std::collections::{BTreeMap, BTreeSet};

use super::network::{Link, Network, Transfer};
use super::scenario::{generate, Fault, PipelineSpec, Routing, Scenario};
use super::SimError;
use crate::broker::{Broker, BrokerConfig, BrokerStats, Delivery};
use crate::join::SkipReason;
use crate::metrics::{self, EventKind, LabelTimeline, MetricEvent, MetricReport};
use crate::runtime::{Effect, FetchOutcome, Invocation, Job, Pipeline, PipelineConfig, Prediction};
use crate::store::{FetchCache, FetchError, PayloadStore, StoreConfig};
use crate::time::{Bound, Duration, Timestamp};
use crate::types::{Body, Header, JoinMode, NodeAddr, Payload, PayloadLocator, TopicId};
use crate::wire::{self, FetchStatus, WireMessage};

/// Predictions made by one pipeline, in order.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub node: String,
    pub topic: TopicId,
    pub model: String,
    pub predictions: Vec<Prediction>,
}

pub struct SimOutput {
    /// Every node's events, stable-sorted by time.
    pub events: Vec<MetricEvent>,
    pub report: MetricReport,
    pub outputs: Vec<PipelineOutput>,
    pub transfers: Vec<Transfer>,
    pub node_names: Vec<String>,
    pub broker: BrokerStats,
    pub truth: Option<LabelTimeline>,
    /// Time the last event was handled.
    pub end: Timestamp,
}

impl SimOutput {
    pub fn output(&self, node: &str, topic: &str) -> Option<&PipelineOutput> {
        self.outputs.iter().find(|o| o.node == node && o.topic.as_str() == topic)
    }

    pub fn write_logs(&self, dir: &std::path::Path) -> std::io::Result<()> {
        metrics::write_logs(dir, &self.events)
    }
}

enum Msg {
    Publish { header: Header, item: bool },
    Deliver { pipe: usize, seq: Option<u64>, header: Header },
    Ack { pipe: usize, seq: u64 },
    FetchReq { pipe: usize, slot: usize, locator: PayloadLocator, max_age: Bound },
    FetchResp { pipe: usize, slot: usize, locator: PayloadLocator, result: Result<Payload, FetchError> },
}

enum Ev {
    Tick { pipe: usize },
    Generate { src: usize, idx: usize },
    Send { src: usize, header: Header },
    Arrive { to: usize, msg: Msg },
    ModelDone { pipe: usize, inv: Invocation },
    Fault { idx: usize },
}

impl Ev {
    fn class(&self) -> u8 {
        match self {
            Ev::Tick { .. } => 0,
            _ => 1,
        }
    }
}

struct Source {
    node: usize,
    topic: TopicId,
    stream: crate::types::StreamId,
    delay: Duration,
    schedule: Vec<(Timestamp, Payload)>,
}

struct PendingFetch {
    job: Job,
    results: Vec<Option<Result<Payload, FetchError>>>,
}

struct Pipe {
    node: usize,
    consumer: String,
    topic: TopicId,
    pipeline: Pipeline,
    shared: bool,
    skip_fraction: f64,
    delivered: u64,
    connected: bool,
    running: bool,
    fetching: Option<PendingFetch>,
    cache: FetchCache,
    horizon: Timestamp,
    tick_at: Option<Timestamp>,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    now: Timestamp,
    queue: BTreeMap<(Timestamp, u8, u64), Ev>,
    next_id: u64,
    net: Network,
    leader: usize,
    broker: Broker,
    stores: Vec<PayloadStore>,
    sources: Vec<Source>,
    pipes: Vec<Pipe>,
    pool: BTreeSet<(usize, usize)>,
    events: Vec<MetricEvent>,
    node_names: Vec<String>,
}

fn fetch_request_len(locator: &PayloadLocator, max_age: Bound) -> u64 {
    let m = WireMessage::FetchRequest {
        locator: locator.clone(),
        max_age,
    };
    wire::encode(&m).map_or(64, |b| b.len() as u64)
}

fn fetch_response_len(payload_len: usize) -> u64 {
    let m = WireMessage::FetchResponse {
        status: FetchStatus::Ok,
        payload: Payload::new(),
    };
    wire::encode(&m).map_or(16, |b| b.len() as u64) + payload_len as u64
}

const ACK_LEN: u64 = 14;

impl<'a> Sim<'a> {
    fn push(&mut self, at: Timestamp, ev: Ev) {
        let id = self.next_id;
        self.next_id += 1;
        self.queue.insert((at, ev.class(), id), ev);
    }

    fn log(&mut self, e: MetricEvent) {
        self.events.push(e);
    }

    fn drain_pipe_events(&mut self, pipe: usize) {
        let evs = self.pipes[pipe].pipeline.take_events();
        self.events.extend(evs);
    }

    fn send(&mut self, from: usize, to: usize, bytes: u64, kind: &'static str, msg: Msg) {
        let at = self.net.send(from, to, bytes, self.now, kind);
        self.push(at, Ev::Arrive { to, msg });
    }

    fn on_generate(&mut self, src: usize, idx: usize) {
        let s = &self.sources[src];
        let (ts, payload) = s.schedule[idx].clone();
        let (node, topic, stream, delay) = (s.node, s.topic.clone(), s.stream.clone(), s.delay);
        let name = self.node_names[node].clone();
        self.log(
            MetricEvent::new(self.now, &name, EventKind::ProduceBegin)
                .item(topic.as_str(), stream.as_str(), ts, idx as u64)
                .extra(format!("bytes={}", payload.len())),
        );
        let body = match self.scenario.routing {
            Routing::Eager => Body::Inline(payload),
            Routing::Lazy => match self.stores[node].append(&stream, ts, payload) {
                Ok(loc) => Body::Lazy(loc),
                Err(e) => {
                    log::warn!("{name}: dropping {stream}#{idx}: {e}");
                    self.log(
                        MetricEvent::new(self.now, &name, EventKind::Skip(SkipReason::FailedFetch))
                            .item(topic.as_str(), stream.as_str(), ts, idx as u64)
                            .extra("error=store"),
                    );
                    return;
                }
            },
        };
        let header = Header::new(topic, stream, idx as u64, ts, body);
        if delay > Duration::ZERO {
            self.push(self.now + delay, Ev::Send { src, header });
        } else {
            self.on_send(src, header);
        }
    }

    fn on_send(&mut self, src: usize, header: Header) {
        let node = self.sources[src].node;
        let bytes = wire::header_frame_len(&header) as u64;
        self.send(node, self.leader, bytes, "publish", Msg::Publish { header, item: true });
    }

    fn source_node_of(&self, topic: &TopicId, stream: &crate::types::StreamId) -> Option<usize> {
        self.sources
            .iter()
            .find(|s| &s.topic == topic && &s.stream == stream)
            .map(|s| s.node)
    }

    fn on_publish(&mut self, header: Header, item: bool) {
        if item {
            let node = self
                .source_node_of(&header.topic, &header.stream)
                .map(|n| self.node_names[n].clone())
                .unwrap_or_default();
            self.log(
                MetricEvent::new(self.now, &node, EventKind::ProduceEnd).item(
                    header.topic.as_str(),
                    header.stream.as_str(),
                    header.event_ts,
                    header.seq,
                ),
            );
        }
        let topic = header.topic.clone();
        if let Err(e) = self.broker.publish(header, self.now) {
            log::warn!("broker rejected a publish: {e}");
            return;
        }
        self.pump(&topic);
    }

    /// Hand every pending header of `topic` to its subscribers.
    fn pump(&mut self, topic: &TopicId) {
        let mut outgoing = Vec::new();
        let Ok(q) = self.broker.topic_mut(topic) else { return };
        q.dispatch_shared();
        for (i, p) in self.pipes.iter().enumerate() {
            if &p.topic != topic || !p.connected {
                continue;
            }
            if p.shared {
                for (seq, h) in q.drain_shared(&p.consumer) {
                    outgoing.push((i, Some(seq), h));
                }
            } else if let Ok(ds) = q.poll_exclusive(&p.consumer, usize::MAX) {
                for d in ds {
                    match d {
                        Delivery::Header { header, .. } => outgoing.push((i, None, header)),
                        Delivery::Gap { first_missing, resume_at } => {
                            log::warn!("{}: gap {first_missing}..{resume_at}", p.consumer)
                        }
                    }
                }
            }
        }
        for (pipe, seq, header) in outgoing {
            let bytes = wire::header_frame_len(&header) as u64 + 8;
            let to = self.pipes[pipe].node;
            self.send(self.leader, to, bytes, "deliver", Msg::Deliver { pipe, seq, header });
        }
    }

    fn effects(&mut self, pipe: usize, effects: Vec<Effect>) {
        let node = self.pipes[pipe].node;
        for e in effects {
            match e {
                Effect::Ack { seq } => self.send(node, self.leader, ACK_LEN, "ack", Msg::Ack { pipe, seq }),
                Effect::Publish(header) => {
                    let bytes = wire::header_frame_len(&header) as u64;
                    self.send(node, self.leader, bytes, "publish", Msg::Publish { header, item: false })
                }
            }
        }
    }

    fn on_deliver(&mut self, pipe: usize, seq: Option<u64>, header: Header) {
        let p = &mut self.pipes[pipe];
        if !p.connected {
            return;
        }
        let n = p.delivered;
        p.delivered += 1;
        let f = p.skip_fraction;
        let skip = f > 0.0 && ((n + 1) as f64 * f).floor() > (n as f64 * f).floor();
        let effects = if skip {
            p.pipeline
                .skip_delivery(seq, &header, SkipReason::SupersededByHybrid, self.now)
        } else {
            match p.pipeline.on_deliver(seq, header, self.now) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("{}: {e}", p.consumer);
                    Vec::new()
                }
            }
        };
        self.drain_pipe_events(pipe);
        self.effects(pipe, effects);
        self.kick(pipe);
        self.schedule_tick(pipe);
    }

    fn schedule_tick(&mut self, pipe: usize) {
        let p = &self.pipes[pipe];
        let Some(d) = p.pipeline.next_deadline() else { return };
        if d > p.horizon || p.tick_at == Some(d) || !p.connected {
            return;
        }
        let at = d.max(self.now);
        self.pipes[pipe].tick_at = Some(d);
        self.push(at, Ev::Tick { pipe });
    }

    fn on_tick(&mut self, pipe: usize) {
        let p = &mut self.pipes[pipe];
        p.tick_at = None;
        if p.connected {
            p.pipeline.on_tick(self.now);
        }
        self.drain_pipe_events(pipe);
        self.kick(pipe);
        self.schedule_tick(pipe);
    }

    /// Start the next queued tuple if the pipeline is idle.
    fn kick(&mut self, pipe: usize) {
        loop {
            let p = &mut self.pipes[pipe];
            if p.running || p.fetching.is_some() {
                return;
            }
            let (job, acks) = p.pipeline.start_next(self.now);
            self.drain_pipe_events(pipe);
            self.effects(pipe, acks);
            let Some(job) = job else { return };
            let p = &mut self.pipes[pipe];
            let mut results: Vec<Option<Result<Payload, FetchError>>> = Vec::with_capacity(job.fetches.len());
            let mut misses = Vec::new();
            for (k, (_, loc)) in job.fetches.iter().enumerate() {
                match p.cache.get(loc) {
                    Some(hit) => results.push(Some(Ok(hit))),
                    None => {
                        results.push(None);
                        misses.push((k, loc.clone()));
                    }
                }
            }
            if misses.is_empty() {
                self.finish_fetch(pipe, job, results);
                continue;
            }
            let max_age = p.pipeline.config().topic.freshness_threshold;
            let from = p.node;
            p.fetching = Some(PendingFetch { job, results });
            for (slot, locator) in misses {
                let Some(to) = self.scenario.node_index(&locator.node.host) else {
                    self.on_fetch_resp(pipe, slot, locator, Err(FetchError::NotFound));
                    continue;
                };
                let mut depart = self.now;
                if from != to && (!self.scenario.p2p_pooling || self.pool.insert((from, to))) {
                    depart = depart + self.scenario.p2p_setup;
                }
                let bytes = fetch_request_len(&locator, max_age);
                let at = self.net.send(from, to, bytes, depart, "fetch_request");
                self.push(
                    at,
                    Ev::Arrive {
                        to,
                        msg: Msg::FetchReq {
                            pipe,
                            slot,
                            locator,
                            max_age,
                        },
                    },
                );
            }
            return;
        }
    }

    fn finish_fetch(&mut self, pipe: usize, job: Job, results: Vec<Option<Result<Payload, FetchError>>>) {
        let results = results.into_iter().map(|r| r.expect("every fetch resolved")).collect();
        let outcome = self.pipes[pipe].pipeline.on_fetched(job, results, self.now);
        self.drain_pipe_events(pipe);
        match outcome {
            FetchOutcome::Invoke(inv) => {
                self.pipes[pipe].running = true;
                self.push(inv.finish_at, Ev::ModelDone { pipe, inv });
            }
            FetchOutcome::Dropped(effects) => self.effects(pipe, effects),
        }
    }

    fn on_fetch_req(&mut self, at_node: usize, pipe: usize, slot: usize, locator: PayloadLocator, max_age: Bound) {
        let (status, payload) = self.stores[at_node].serve(&locator, max_age, self.now);
        let result = match FetchError::from_status(status) {
            None => Ok(payload),
            Some(e) => Err(e),
        };
        let len = result.as_ref().map_or(0, |p| p.len());
        let to = self.pipes[pipe].node;
        self.send(
            at_node,
            to,
            fetch_response_len(len),
            "fetch_response",
            Msg::FetchResp {
                pipe,
                slot,
                locator,
                result,
            },
        );
    }

    fn on_fetch_resp(&mut self, pipe: usize, slot: usize, locator: PayloadLocator, result: Result<Payload, FetchError>) {
        let p = &mut self.pipes[pipe];
        if let Ok(bytes) = &result {
            p.cache.insert(locator, bytes.clone());
        }
        let Some(pending) = p.fetching.as_mut() else { return };
        pending.results[slot] = Some(result);
        if pending.results.iter().all(Option::is_some) {
            let PendingFetch { job, results } = p.fetching.take().unwrap();
            self.finish_fetch(pipe, job, results);
            self.kick(pipe);
        }
    }

    fn on_model_done(&mut self, pipe: usize, inv: Invocation) {
        let effects = self.pipes[pipe].pipeline.on_model_done(inv, self.now);
        self.pipes[pipe].running = false;
        self.drain_pipe_events(pipe);
        self.effects(pipe, effects);
        self.kick(pipe);
    }

    fn on_ack(&mut self, pipe: usize, seq: u64) {
        let topic = self.pipes[pipe].topic.clone();
        let consumer = self.pipes[pipe].consumer.clone();
        if let Ok(q) = self.broker.topic_mut(&topic) {
            q.ack(&consumer, seq);
        }
        self.pump(&topic);
    }

    fn on_fault(&mut self, idx: usize) {
        let Fault::Disconnect { node, topic, .. } = &self.scenario.faults[idx];
        let Some(pipe) = self
            .pipes
            .iter()
            .position(|p| &self.node_names[p.node] == node && &p.topic == topic)
        else {
            return;
        };
        self.pipes[pipe].connected = false;
        let consumer = self.pipes[pipe].consumer.clone();
        if let Ok(q) = self.broker.topic_mut(topic) {
            q.disconnect(&consumer);
        }
        let topic = topic.clone();
        self.pump(&topic);
    }

    fn step(&mut self, ev: Ev) {
        match ev {
            Ev::Tick { pipe } => self.on_tick(pipe),
            Ev::Generate { src, idx } => self.on_generate(src, idx),
            Ev::Send { src, header } => self.on_send(src, header),
            Ev::ModelDone { pipe, inv } => self.on_model_done(pipe, inv),
            Ev::Fault { idx } => self.on_fault(idx),
            Ev::Arrive { to, msg } => match msg {
                Msg::Publish { header, item } => self.on_publish(header, item),
                Msg::Deliver { pipe, seq, header } => self.on_deliver(pipe, seq, header),
                Msg::Ack { pipe, seq } => self.on_ack(pipe, seq),
                Msg::FetchReq {
                    pipe,
                    slot,
                    locator,
                    max_age,
                } => self.on_fetch_req(to, pipe, slot, locator, max_age),
                Msg::FetchResp {
                    pipe,
                    slot,
                    locator,
                    result,
                } => self.on_fetch_resp(pipe, slot, locator, result),
            },
        }
    }
}

fn build_network(s: &Scenario) -> Network {
    let n = s.nodes.len();
    let base = Link {
        latency: s.default_link.latency,
        bandwidth: s.default_link.bandwidth,
        up: true,
    };
    let mut links = vec![vec![base; n]; n];
    for o in &s.links {
        let (a, b) = (s.node_index(&o.a).unwrap(), s.node_index(&o.b).unwrap());
        for (x, y) in [(a, b), (b, a)] {
            let l = &mut links[x][y];
            if let Some(lat) = o.latency {
                l.latency = lat;
            }
            if let Some(bw) = o.bandwidth {
                l.bandwidth = bw;
            }
            l.up = !o.down;
        }
    }
    let nic = |i: usize| s.nodes[i].nic.or(s.default_nic).unwrap_or_default();
    Network::new(
        s.nodes.iter().map(|n| n.id.clone()).collect(),
        links,
        (0..n).map(|i| nic(i).up).collect(),
        (0..n).map(|i| nic(i).down).collect(),
    )
}

fn pipeline_config(s: &Scenario, p: &PipelineSpec) -> PipelineConfig {
    let mult = s.nodes[s.node_index(&p.node).unwrap()].cost_multiplier;
    let mut operator = p.operator.clone();
    operator.cost = operator.cost * mult;
    PipelineConfig {
        node: p.node.clone(),
        topic: s.topic(&p.topic).unwrap().clone(),
        operator,
        fail_soft: p.fail_soft,
    }
}

/// Run a scenario to quiescence and compute its metrics.
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let truth = scenario.truth();
    let node_names: Vec<String> = scenario.nodes.iter().map(|n| n.id.clone()).collect();
    let leader = scenario.node_index(&scenario.leader).unwrap();

    let mut broker = Broker::new(BrokerConfig {
        retention: usize::MAX,
        ..BrokerConfig::default()
    });
    for t in &scenario.topics {
        broker.create_topic(t.clone())?;
    }
    let stores = node_names
        .iter()
        .map(|n| PayloadStore::new(NodeAddr::new(n, 0), StoreConfig::default()))
        .collect();

    let mut sources = Vec::new();
    let mut last_item = Timestamp::ZERO;
    for spec in &scenario.streams {
        let schedule = generate(
            spec,
            scenario.run_length,
            scenario.seed,
            truth.as_ref(),
            scenario.base_dir.as_deref(),
        )?;
        if let Some((t, _)) = schedule.last() {
            last_item = last_item.max(*t);
        }
        sources.push(Source {
            node: scenario.node_index(&spec.node).unwrap(),
            topic: spec.topic.clone(),
            stream: spec.stream.clone(),
            delay: spec.publish_delay,
            schedule,
        });
    }

    let mut pipes = Vec::new();
    for spec in &scenario.pipelines {
        let cfg = pipeline_config(scenario, spec);
        let window = match cfg.topic.join {
            JoinMode::TimeTriggered { window } => window,
            _ => Duration::ZERO,
        };
        let consumer = format!("{}/{}", spec.node, spec.topic);
        broker.subscribe(&spec.topic, &consumer, spec.shared)?;
        pipes.push(Pipe {
            node: scenario.node_index(&spec.node).unwrap(),
            consumer,
            topic: spec.topic.clone(),
            pipeline: Pipeline::new(cfg, Timestamp::ZERO).map_err(|e| SimError::InvalidScenario(e.to_string()))?,
            shared: spec.shared,
            skip_fraction: spec.skip_fraction,
            delivered: 0,
            connected: true,
            running: false,
            fetching: None,
            cache: FetchCache::new(scenario.fetch_cache_bytes),
            horizon: last_item + window,
            tick_at: None,
        });
    }

    let mut sim = Sim {
        scenario,
        now: Timestamp::ZERO,
        queue: BTreeMap::new(),
        next_id: 0,
        net: build_network(scenario),
        leader,
        broker,
        stores,
        sources,
        pipes,
        pool: BTreeSet::new(),
        events: Vec::new(),
        node_names: node_names.clone(),
    };
    for i in 0..sim.pipes.len() {
        sim.drain_pipe_events(i);
        sim.schedule_tick(i);
    }
    for src in 0..sim.sources.len() {
        for idx in 0..sim.sources[src].schedule.len() {
            let at = sim.sources[src].schedule[idx].0;
            sim.push(at, Ev::Generate { src, idx });
        }
    }
    for (idx, f) in scenario.faults.iter().enumerate() {
        let Fault::Disconnect { at, .. } = f;
        sim.push(Timestamp::ZERO + *at, Ev::Fault { idx });
    }

    while let Some(((at, _, _), ev)) = sim.queue.pop_first() {
        sim.now = sim.now.max(at);
        sim.step(ev);
    }

    let end = sim.now;
    let mut outputs = Vec::new();
    for i in 0..sim.pipes.len() {
        sim.pipes[i].pipeline.finish(end);
        sim.drain_pipe_events(i);
        let p = &mut sim.pipes[i];
        outputs.push(PipelineOutput {
            node: node_names[p.node].clone(),
            topic: p.topic.clone(),
            model: p.pipeline.config().operator.id.clone(),
            predictions: p.pipeline.take_predictions(),
        });
    }
    let stats = sim.broker.stats();
    sim.events.push(
        MetricEvent::new(end, &scenario.leader, EventKind::Shutdown).extra(format!(
            "broker_payload_bytes={};broker_frame_bytes={}",
            stats.payload_bytes, stats.frame_bytes
        )),
    );
    for (i, name) in node_names.iter().enumerate() {
        let is_source = sim.sources.iter().any(|s| s.node == i);
        if i != leader && is_source {
            sim.events.push(MetricEvent::new(end, name, EventKind::Shutdown));
        }
    }
    let mut events = std::mem::take(&mut sim.events);
    events.sort_by_key(|e| e.at);
    let report = metrics::report(&events)?;
    Ok(SimOutput {
        events,
        report,
        outputs,
        transfers: sim.net.ledger().to_vec(),
        node_names,
        broker: stats,
        truth,
        end,
    })
}
