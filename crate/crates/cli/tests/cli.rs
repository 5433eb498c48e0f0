use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use serde_json::json;
use socketstore::catalog;
use socketstore::service::{Client, TcpTransport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_socketstore"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios")
}

fn text(o: &[u8]) -> String {
    String::from_utf8_lossy(o).into_owned()
}

#[test]
fn run_prints_the_report_and_exits_zero() {
    let out = bin().arg("run").arg(scenarios().join("dtn.scn")).output().unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["scenario"], "dtn");
}

#[test]
fn run_writes_the_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = bin().arg("run").arg(scenarios().join("pooling.scn")).arg("--seed").arg("3").arg("--report").arg(&path).output().unwrap();
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
}

#[test]
fn failing_assertions_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("topologies")).unwrap();
    fs::copy(scenarios().join("topologies/triangle.json"), dir.path().join("topologies/triangle.json")).unwrap();
    let mut s: serde_json::Value = serde_json::from_str(&fs::read_to_string(scenarios().join("fallback.scn")).unwrap()).unwrap();
    s["expected"].as_array_mut().unwrap().push(json!({ "check": "allocations", "count": 99 }));
    let path = dir.path().join("bad.scn");
    fs::write(&path, s.to_string()).unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("FAILED"), "{}", text(&out.stderr));
}

#[test]
fn broken_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.scn");
    fs::write(&path, "{ not json").unwrap();
    assert_eq!(bin().arg("run").arg(&path).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("run").arg(dir.path().join("missing.scn")).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "listen = \"127.0.0.1:0\"\nsurprise = 1\n").unwrap();
    assert_eq!(bin().args(["serve", "registry", "--config"]).arg(&cfg).output().unwrap().status.code(), Some(2));
}

/// A registry process on an ephemeral port, killed on drop.
struct Served {
    child: Child,
    addr: String,
    _dir: tempfile::TempDir,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve_registry() -> Served {
    serve("registry", "listen = \"127.0.0.1:0\"\nlog = \"ops.jsonl\"\n")
}

fn serve(service: &str, config: &str) -> Served {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(scenarios().join("topologies/triangle.json"), dir.path().join("triangle.json")).unwrap();
    let cfg = dir.path().join("service.toml");
    fs::write(&cfg, config).unwrap();
    let mut child = bin()
        .args(["serve", service, "--config"])
        .arg(&cfg)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listen banner").to_string();
    Served { child, addr, _dir: dir }
}

fn store(s: &Served, args: &[&str]) -> Output {
    bin().args(["store", "--registry", &s.addr]).args(args).output().unwrap()
}

#[test]
fn rank_on_an_empty_registry_prints_only_the_header() {
    let s = serve_registry();
    let out = store(&s, &["rank"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("rank"));
}

#[test]
fn publish_review_browse_purchase_over_tcp() {
    let s = serve_registry();
    let descriptor = s._dir.path().join("fwd.json");
    fs::write(&descriptor, serde_json::to_string(&catalog::reference("fwd").unwrap()).unwrap()).unwrap();

    let out = store(&s, &["publish", descriptor.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let listed = text(&store(&s, &["browse"]).stdout);
    let row = listed.lines().find(|l| l.starts_with("fwd")).expect(&listed);
    assert!(row.contains("under_review"), "{row}");

    assert!(store(&s, &["review", "fwd", "accept"]).status.success());
    let listed = text(&store(&s, &["browse", "--text", "fw"]).stdout);
    let row = listed.lines().find(|l| l.starts_with("fwd")).expect(&listed);
    assert!(row.contains("published"), "{row}");

    let out = store(&s, &["purchase", "fwd", "--app", "demo"]);
    assert!(out.status.success());
    let ent: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ent["module_key"], "fwd");

    let out = store(&s, &["rate", "fwd", "--rater", "r", "--stars", "9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(store(&s, &["rate", "fwd", "--rater", "r", "--stars", "4"]).status.success());
    let ranked = text(&store(&s, &["rank"]).stdout);
    assert_eq!(ranked.lines().nth(1).unwrap().split_whitespace().take(2).collect::<Vec<_>>(), ["1", "fwd"]);
}

#[test]
fn disposing_an_efficient_module_is_refused() {
    let s = serve_registry();
    let descriptor = s._dir.path().join("lg.json");
    fs::write(&descriptor, serde_json::to_string(&catalog::reference("lg").unwrap()).unwrap()).unwrap();
    assert!(store(&s, &["publish", descriptor.to_str().unwrap()]).status.success());
    assert!(store(&s, &["review", "lg", "accept"]).status.success());

    let mut client = Client::new(Box::new(TcpTransport::connect(&s.addr, Duration::from_secs(5)).unwrap()));
    for _ in 0..20 {
        let _: serde_json::Value = client.call("record_sample", json!({ "module_key": "lg", "attained": true })).unwrap();
    }
    assert!(store(&s, &["deprecate", "lg"]).status.success());
    let out = store(&s, &["dispose", "lg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("efficient"), "{}", text(&out.stderr));
}

#[test]
fn unreachable_registry_is_an_operation_failure() {
    let out = bin().args(["store", "--registry", "127.0.0.1:1", "rank"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn proxy_serves_devices_and_forwards_registry_calls() {
    let registry = serve_registry();
    let netsim = serve(
        "netsim",
        "listen = \"127.0.0.1:0\"\ntopology = \"triangle.json\"\nhosts = [{ ip = \"10.0.0.1\", node = \"A\" }, { ip = \"10.0.0.3\", node = \"C\" }]\n",
    );
    let proxy = serve(
        "proxy",
        &format!(
            "listen = \"127.0.0.1:0\"\nregistry = \"{}\"\nnetsim = \"{}\"\nhosts = [{{ ip = \"10.0.0.3\", node = \"C\", endpoints = {{ 7 = \"echo\" }} }}]\n",
            registry.addr, netsim.addr
        ),
    );
    let out = store(&proxy, &["rank"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("rank"));
}
