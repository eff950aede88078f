use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_edgestream");

fn edgestream(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("EDGESTREAM_LOG_DIR").output().unwrap()
}

struct Broker {
    child: Child,
    addr: String,
}

impl Broker {
    fn start(logs: &Path, topics: &[&str]) -> Broker {
        let mut cmd = Command::new(BIN);
        cmd.args(["broker", "--listen", "127.0.0.1:0", "--log-dir"]).arg(logs);
        for t in topics {
            cmd.args(["--topic", t]);
        }
        let mut child = cmd
            .env_remove("EDGESTREAM_LOG_DIR")
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect(&line).to_string();
        Broker { child, addr }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn sigterm(child: &Child) {
    let ok = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(ok.success());
}

fn wait_with_timeout(child: &mut Child, limit: Duration) -> std::process::ExitStatus {
    let start = Instant::now();
    loop {
        if let Some(s) = child.try_wait().unwrap() {
            return s;
        }
        if start.elapsed() > limit {
            let _ = child.kill();
            panic!("process did not exit within {limit:?}");
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn last_kind(log: &Path) -> String {
    let text = fs::read_to_string(log).unwrap();
    text.lines().last().unwrap().split('\t').nth(2).unwrap().to_string()
}

#[test]
fn broker_source_and_identity_model_round_trip() {
    for routing in ["lazy", "eager"] {
        let dir = tempfile::tempdir().unwrap();
        let logs = dir.path().join("logs");
        let broker = Broker::start(&logs, &["cam=frame"]);
        let input = dir.path().join("frames.txt");
        let lines: Vec<String> = (0..8).map(|i| format!("frame-{i}")).collect();
        fs::write(&input, lines.join("\n")).unwrap();

        let model = Command::new(BIN)
            .args(["model", "--leader", &broker.addr, "--topic", "cam", "--max-predictions", "8"])
            .args(["--idle-exit-ms", "10000", "--node", "m", "--log-dir"])
            .arg(&logs)
            .env_remove("EDGESTREAM_LOG_DIR")
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        thread::sleep(Duration::from_millis(400));
        let src = Command::new(BIN)
            .args(["source", "--leader", &broker.addr, "--topic", "cam", "--stream", "frame"])
            .args(["--routing", routing, "--period-ms", "5", "--linger-ms", "1500", "--input"])
            .arg(&input)
            .arg("--log-dir")
            .arg(&logs)
            .env_remove("EDGESTREAM_LOG_DIR")
            .status()
            .unwrap();
        assert!(src.success());
        let out = model.wait_with_output().unwrap();
        assert!(out.status.success(), "{routing}: {:?}", out.status);
        let got: Vec<String> = String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| l.split('\t').nth(2).unwrap().to_string())
            .collect();
        assert_eq!(got, lines, "{routing}");
        assert_eq!(last_kind(&logs.join("m.log")), "shutdown");
    }
}

#[test]
fn unknown_topic_is_a_config_error_naming_the_topic() {
    let dir = tempfile::tempdir().unwrap();
    let broker = Broker::start(dir.path(), &[]);
    let out = edgestream(&[
        "model",
        "--leader",
        &broker.addr,
        "--topic",
        "nosuchtopic",
        "--log-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nosuchtopic"));
}

#[test]
fn sigterm_leaves_a_shutdown_marker() {
    let dir = tempfile::tempdir().unwrap();
    let mut broker = Broker::start(dir.path(), &["t=s"]);
    let mut model = Command::new(BIN)
        .args(["model", "--leader", &broker.addr, "--topic", "t", "--node", "m", "--log-dir"])
        .arg(dir.path())
        .env_remove("EDGESTREAM_LOG_DIR")
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(400));
    sigterm(&model);
    assert!(wait_with_timeout(&mut model, Duration::from_secs(5)).success());
    assert_eq!(last_kind(&dir.path().join("m.log")), "shutdown");

    sigterm(&broker.child);
    assert!(wait_with_timeout(&mut broker.child, Duration::from_secs(5)).success());
    assert_eq!(last_kind(&dir.path().join("leader.log")), "shutdown");
}

#[test]
fn sim_then_report_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = edgestream(&["sim", "--scenario", "fig8_skipping", "--seed", "4", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("metric,statistic,value\n"));

    let report = dir.path().join("again.csv");
    let out = edgestream(&["metrics", "report", "--logs", out_dir.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(report).unwrap(), csv);

    let out = edgestream(&["replay", "--logs", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn replay_flags_a_tampered_tuple() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(edgestream(&["sim", "--scenario", "table4_reaction", "--out", run.to_str().unwrap()])
        .status
        .success());
    let model_log = run.join("model.log");
    let text = fs::read_to_string(&model_log).unwrap();
    let mut tampered = false;
    let lines: Vec<String> = text
        .lines()
        .map(|l| {
            if !tampered && l.contains("\tjoin_emit\t") && l.contains("slots=steady:0,") {
                tampered = true;
                return l.replacen("slots=steady:0,", "slots=steady:7,", 1);
            }
            l.to_string()
        })
        .collect();
    assert!(tampered, "no join_emit line in model.log");
    fs::write(&model_log, lines.join("\n") + "\n").unwrap();
    let out = edgestream(&["replay", "--logs", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn replay_of_an_empty_directory_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(edgestream(&["replay", "--logs", dir.path().to_str().unwrap()]).status.code(), Some(0));
    let missing = dir.path().join("missing");
    assert_eq!(edgestream(&["replay", "--logs", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_one_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"name\": \"x\",\n  oops\n}\n").unwrap();
    let out = edgestream(&["sim", "--scenario", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");

    assert_eq!(edgestream(&["model"]).status.code(), Some(1));
    assert_eq!(edgestream(&["--help"]).status.code(), Some(0));
    assert_eq!(edgestream(&["--version"]).status.code(), Some(0));
}

#[test]
fn log_dir_env_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let env_dir = dir.path().join("env");
    let out = Command::new(BIN)
        .args(["sim", "--scenario", "table4_reaction", "--out", out_dir.to_str().unwrap()])
        .env("EDGESTREAM_LOG_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env_dir.join("model.log").exists());
    assert!(!out_dir.join("model.log").exists());
    assert!(out_dir.join("report.csv").exists());
}
