use std::fs;
use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration as StdDuration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgestream::broker::BrokerConfig;
use edgestream::metrics::{read_logs, report, write_logs};
use edgestream::net::{
    run_model, run_source, BrokerServer, LiveLog, ModelConfig, ModelExit, NetError, SourceConfig,
};
use edgestream::replay::{replay, ReplayError};
use edgestream::runtime::{FailSoft, ModelKind, ModelOperator, OutputStream};
use edgestream::sim::{experiments, run_scenario, Scenario, SimError};
use edgestream::store::StoreConfig;
use edgestream::{Duration, Payload, StreamId, TopicConfig, TopicId};

const LOG_DIR_ENV: &str = "EDGESTREAM_LOG_DIR";

#[derive(Parser)]
#[command(name = "edgestream", version, about = "Multi-stream inference runtime and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the leader's broker.
    Broker(BrokerArgs),
    /// Publish a stream of items.
    Source(SourceArgs),
    /// Consume a topic, run a model over its join tuples, print predictions.
    Model(ModelArgs),
    /// Run a scenario in the simulator.
    Sim(SimArgs),
    /// Metrics over event logs.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// Re-run the logged joiner inputs and compare against the logged tuples.
    Replay(ReplayArgs),
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Write the metric summary as CSV.
    Report {
        #[arg(long)]
        logs: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct LogArgs {
    /// Metric log directory. `EDGESTREAM_LOG_DIR` takes precedence when set.
    #[arg(long, default_value = "logs")]
    log_dir: PathBuf,
}

impl LogArgs {
    fn dir(&self) -> PathBuf {
        log_dir_override().unwrap_or_else(|| self.log_dir.clone())
    }
}

fn log_dir_override() -> Option<PathBuf> {
    std::env::var_os(LOG_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

#[derive(Args)]
struct BrokerArgs {
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: String,
    /// Headers kept per topic.
    #[arg(long, default_value_t = 65536)]
    retention: usize,
    /// Shared-queue in-flight window per consumer.
    #[arg(long, default_value_t = 16)]
    shared_window: usize,
    /// `name=stream1,stream2` with a data-triggered join. Repeatable.
    #[arg(long = "topic")]
    topics: Vec<String>,
    /// JSON file holding a list of topic configs, or a scenario whose topics to create.
    #[arg(long)]
    topics_file: Option<PathBuf>,
    #[arg(long, default_value = "leader")]
    node: String,
    #[command(flatten)]
    log: LogArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Routing {
    Lazy,
    Eager,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    leader: String,
    #[arg(long)]
    topic: String,
    #[arg(long)]
    stream: String,
    #[arg(long)]
    node: Option<String>,
    #[arg(long, value_enum, default_value = "lazy")]
    routing: Routing,
    /// Fetch server address (lazy routing).
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Host to put in locators instead of the bound address.
    #[arg(long)]
    advertise: Option<String>,
    #[arg(long, default_value_t = 100)]
    period_ms: u64,
    /// One payload per line; `-` reads stdin.
    #[arg(long, conflicts_with_all = ["count", "payload_size"])]
    input: Option<PathBuf>,
    /// Number of synthetic payloads.
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 1024)]
    payload_size: usize,
    /// Keep serving fetches this long after the last publish.
    #[arg(long, default_value_t = 2000)]
    linger_ms: u64,
    #[command(flatten)]
    log: LogArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum FailSoftArg {
    DropTuple,
    LastKnownGood,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    leader: String,
    #[arg(long)]
    topic: String,
    /// identity, sum, majority_vote, byte_count or threshold:<n>.
    #[arg(long, default_value = "identity")]
    model: String,
    /// Publish predictions as this stream.
    #[arg(long)]
    output: Option<String>,
    /// Topic for `--output`; defaults to the stream name.
    #[arg(long)]
    output_topic: Option<String>,
    #[arg(long, default_value_t = 0)]
    cost_ms: u64,
    #[arg(long)]
    shared: bool,
    #[arg(long)]
    node: Option<String>,
    #[arg(long)]
    consumer: Option<String>,
    #[arg(long, value_enum, default_value = "drop-tuple")]
    fail_soft: FailSoftArg,
    #[arg(long, default_value_t = 256 << 20)]
    fetch_cache_bytes: u64,
    /// Exit after this many predictions.
    #[arg(long)]
    max_predictions: Option<usize>,
    /// Exit after this long without a delivery.
    #[arg(long)]
    idle_exit_ms: Option<u64>,
    #[command(flatten)]
    log: LogArgs,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario file, or the name of a shipped scenario.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    logs: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Runtime(String),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Divergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Divergence(m) => m,
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(m) => Failure::Config(m),
            e if e.is_unknown_topic() => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Broker(a) => broker(a),
        Command::Source(a) => source(a),
        Command::Model(a) => model(a),
        Command::Sim(a) => sim(a),
        Command::Metrics {
            command: MetricsCommand::Report { logs, out },
        } => metrics_report(&logs, out.as_deref()),
        Command::Replay(a) => replay_cmd(&a.logs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("edgestream: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn stop_flag() -> Result<Arc<AtomicBool>, Failure> {
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    Ok(stop)
}

fn topic_id(s: &str) -> Result<TopicId, Failure> {
    TopicId::new(s).map_err(|e| Failure::Config(e.to_string()))
}

fn stream_id(s: &str) -> Result<StreamId, Failure> {
    StreamId::new(s).map_err(|e| Failure::Config(e.to_string()))
}

fn parse_topic_flag(spec: &str) -> Result<TopicConfig, Failure> {
    let (name, streams) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("--topic {spec:?}: expected name=stream1,stream2")))?;
    let streams = streams.split(',').map(|s| stream_id(s.trim())).collect::<Result<Vec<_>, _>>()?;
    let cfg = TopicConfig::new(topic_id(name.trim())?, streams);
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn load_topics_file(path: &Path) -> Result<Vec<TopicConfig>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let parse_err =
        |e: serde_json::Error| Failure::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    if value.is_array() {
        serde_json::from_value(value).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    } else {
        Scenario::from_json(&text)
            .map(|s| s.topics)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }
}

fn broker(a: BrokerArgs) -> Result<(), Failure> {
    let mut topics = Vec::new();
    if let Some(p) = &a.topics_file {
        topics.extend(load_topics_file(p)?);
    }
    for t in &a.topics {
        topics.push(parse_topic_flag(t)?);
    }
    let config = BrokerConfig {
        retention: a.retention,
        shared_window: a.shared_window,
        ..BrokerConfig::default()
    };
    let stop = stop_flag()?;
    let listener = TcpListener::bind(&a.listen).map_err(|e| Failure::Runtime(format!("listen on {}: {e}", a.listen)))?;
    let log = LiveLog::create(&a.log.dir(), &a.node, &a.node)?;
    let server = BrokerServer::start(listener, config, topics, log)?;
    println!("listening on {}", server.local_addr());
    io::stdout().flush()?;
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(StdDuration::from_millis(50));
    }
    server.stop();
    Ok(())
}

fn read_payloads(path: &Path) -> Result<Vec<Payload>, Failure> {
    let reader: Box<dyn BufRead> = if path == Path::new("-") {
        Box::new(io::stdin().lock())
    } else {
        let f = fs::File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Box::new(io::BufReader::new(f))
    };
    reader
        .lines()
        .map(|l| l.map(|l| Payload::from(l.into_bytes())).map_err(Failure::from))
        .collect()
}

fn source(a: SourceArgs) -> Result<(), Failure> {
    let payloads = match &a.input {
        Some(p) => read_payloads(p)?,
        None => (0..a.count)
            .map(|i| {
                let mut v = vec![0u8; a.payload_size];
                for (j, b) in v.iter_mut().enumerate() {
                    *b = (i + j) as u8;
                }
                Payload::from(v)
            })
            .collect(),
    };
    let node = a.node.clone().unwrap_or_else(|| format!("source-{}", a.stream));
    let cfg = SourceConfig {
        node: node.clone(),
        leader: a.leader.clone(),
        topic: topic_id(&a.topic)?,
        stream: stream_id(&a.stream)?,
        lazy: matches!(a.routing, Routing::Lazy),
        listen: a.listen.clone(),
        advertise: a.advertise.clone(),
        period: Duration::from_millis(a.period_ms as i64),
        store: StoreConfig::default(),
        linger: Duration::from_millis(a.linger_ms as i64),
    };
    let stop = stop_flag()?;
    let log = LiveLog::create(&a.log.dir(), &node, &node)?;
    let sent = run_source(&cfg, payloads, &log, &stop)?;
    log::info!("{node}: published {sent} items");
    Ok(())
}

fn model(a: ModelArgs) -> Result<(), Failure> {
    let kind = ModelKind::parse(&a.model).ok_or_else(|| Failure::Config(format!("unknown model {:?}", a.model)))?;
    let output = match &a.output {
        Some(s) => Some(OutputStream {
            topic: topic_id(a.output_topic.as_deref().unwrap_or(s))?,
            stream: stream_id(s)?,
        }),
        None => None,
    };
    let node = a.node.clone().unwrap_or_else(|| format!("model-{}", a.topic));
    let cfg = ModelConfig {
        node: node.clone(),
        leader: a.leader.clone(),
        topic: topic_id(&a.topic)?,
        consumer: a.consumer.clone().unwrap_or_else(|| node.clone()),
        shared: a.shared,
        operator: ModelOperator {
            id: a.model.clone(),
            model: kind,
            cost: Duration::from_millis(a.cost_ms as i64),
            output,
        },
        fail_soft: match a.fail_soft {
            FailSoftArg::DropTuple => FailSoft::DropTuple,
            FailSoftArg::LastKnownGood => FailSoft::LastKnownGood,
        },
        cache_bytes: a.fetch_cache_bytes,
        max_predictions: a.max_predictions,
        idle_timeout: a.idle_exit_ms.map(|ms| Duration::from_millis(ms as i64)),
    };
    let stop = stop_flag()?;
    let log = LiveLog::create(&a.log.dir(), &node, &node)?;
    let stdout = io::stdout();
    let exit = run_model(&cfg, &log, &stop, |p| {
        let mut out = stdout.lock();
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            p.emit_ts.as_micros(),
            p.tuple_id,
            String::from_utf8_lossy(&p.value).escape_debug()
        );
        let _ = out.flush();
    })?;
    if exit == ModelExit::BrokerClosed {
        return Err(Failure::Runtime("broker closed the connection".into()));
    }
    Ok(())
}

fn load_scenario(spec: &str) -> Result<Scenario, Failure> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(s) = experiments::builtin(spec) {
            return Ok(s);
        }
    }
    let s = Scenario::load(path).map_err(|e| match e {
        SimError::Io(e) => Failure::Config(format!("{spec}: {e}")),
        e => Failure::Config(format!("{spec}: {e}")),
    })?;
    s.validate().map_err(|e| Failure::Config(format!("{spec}: {e}")))?;
    Ok(s)
}

fn sim(a: SimArgs) -> Result<(), Failure> {
    let mut scenario = load_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        scenario = scenario.with_seed(seed);
    }
    let out = run_scenario(&scenario).map_err(|e| match e {
        e @ (SimError::InvalidScenario(_)
        | SimError::InvalidTopology(_)
        | SimError::Unreachable { .. }
        | SimError::Generate { .. }
        | SimError::Parse { .. }) => Failure::Config(e.to_string()),
        e => Failure::Runtime(e.to_string()),
    })?;
    fs::create_dir_all(&a.out)?;
    let log_dir = log_dir_override().unwrap_or_else(|| a.out.clone());
    write_logs(&log_dir, &out.events)?;
    fs::write(a.out.join("report.csv"), out.report.to_csv())?;
    let r = &out.report;
    println!(
        "{}: seed {}, {} items, {} predictions, skipped {}, simulated {:.3}s",
        scenario.name,
        scenario.seed,
        r.items.len(),
        r.predictions,
        r.skipped.values().sum::<usize>(),
        out.end.as_micros() as f64 / 1e6
    );
    Ok(())
}

fn metrics_report(logs: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let events = read_logs(logs).map_err(|e| Failure::Runtime(format!("{}: {e}", logs.display())))?;
    let r = report(&events).map_err(|e| Failure::Runtime(e.to_string()))?;
    let csv = r.to_csv();
    match out {
        Some(p) => fs::write(p, csv)?,
        None => io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn replay_cmd(logs: &Path) -> Result<(), Failure> {
    let events = if logs.exists() {
        read_logs(logs).map_err(|e| Failure::Runtime(format!("{}: {e}", logs.display())))?
    } else {
        return Err(Failure::Config(format!("{}: no such directory", logs.display())));
    };
    let r = replay(&events).map_err(|e| match e {
        e @ ReplayError::Incomplete(_) => Failure::Runtime(e.to_string()),
        e => Failure::Runtime(e.to_string()),
    })?;
    if let Some(d) = r.divergence {
        return Err(Failure::Divergence(format!("first divergence at {d}")));
    }
    let tuples: usize = r.pipelines.iter().map(|p| p.tuples).sum();
    println!("{} pipelines, {tuples} join decisions reproduced", r.pipelines.len());
    Ok(())
}
