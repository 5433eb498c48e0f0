//! Deterministic end-to-end scenarios over a [`World`] on virtual time.
//!
//! A scenario names a topology, the hosts attached to it and a timeline of
//! steps. Running it yields a [`TraceReport`] that is a pure function of the
//! scenario and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog;
use crate::dataplane::lock;
use crate::domain::{sha256_hex, Entitlement, Lifecycle, Millis, ModuleDescriptor, ObjectiveStats, Rating};
use crate::netsim::{parse_topology, LinkChange, NetworkEvent, NodeId};
use crate::proxy::{PoolPolicy, ProxyCounters, SsoId, TraceRecord};
use crate::registry::{ComposeRequest, RankEntry, RankQuery, RegistryConfig, Verdict};
use crate::sdk::{Connection, ConnectionKind, DsoRuntime};
use crate::world::{HostSpec, World, STORE_ENDPOINT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Relative to the scenario file.
    pub topology: PathBuf,
    #[serde(default)]
    pub hosts: Vec<HostSpec>,
    #[serde(default)]
    pub policy: PoolPolicy,
    #[serde(default)]
    pub registry: RegistryConfig,
    pub timeline: Vec<Step>,
    #[serde(default)]
    pub expected: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at_ms: Millis,
    #[serde(flatten)]
    pub action: Action,
    /// Error code the step must fail with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Either a bundled reference module by key or a full descriptor.
    Publish {
        #[serde(default)]
        reference: Option<String>,
        #[serde(default)]
        descriptor: Option<Box<ModuleDescriptor>>,
    },
    Review { module_key: String, verdict: Verdict },
    Compose { parts: Vec<String>, request: ComposeRequest },
    Purchase { app: String, module_key: String },
    InitDevice {
        device: String,
        app: String,
        ip: String,
        /// Purchased module keys whose entitlements the device holds.
        #[serde(default)]
        modules: Vec<String>,
        /// Cache directory name; devices naming the same cache share it.
        #[serde(default)]
        cache: Option<String>,
    },
    Connect {
        device: String,
        conn: String,
        ip: String,
        port: u16,
        #[serde(default)]
        module_id: Option<String>,
    },
    Send {
        conn: String,
        #[serde(default)]
        data: Option<String>,
        /// Seeded random payload of this many bytes.
        #[serde(default)]
        random: Option<usize>,
    },
    Recv {
        conn: String,
        #[serde(default)]
        expect: Option<String>,
    },
    Control { conn: String, verb: String },
    Sample { conn: String, value: f64 },
    Close { conn: String },
    Shutdown { device: String },
    SetLinkState { link: String, change: LinkChange },
    /// Takes the store endpoint off the network or brings it back.
    SetStore { up: bool },
    /// Lets time pass to `at_ms`, running the timeout sweep.
    AdvanceTime {},
    Rate { module_key: String, rater: String, stars: u8 },
    Deprecate { module_key: String },
    Dispose { module_key: String },
    Assert { expect: Check },
}

impl Action {
    fn name(&self) -> &'static str {
        match self {
            Action::Publish { .. } => "publish",
            Action::Review { .. } => "review",
            Action::Compose { .. } => "compose",
            Action::Purchase { .. } => "purchase",
            Action::InitDevice { .. } => "init_device",
            Action::Connect { .. } => "connect",
            Action::Send { .. } => "send",
            Action::Recv { .. } => "recv",
            Action::Control { .. } => "control",
            Action::Sample { .. } => "sample",
            Action::Close { .. } => "close",
            Action::Shutdown { .. } => "shutdown",
            Action::SetLinkState { .. } => "set_link_state",
            Action::SetStore { .. } => "set_store",
            Action::AdvanceTime {} => "advance_time",
            Action::Rate { .. } => "rate",
            Action::Deprecate { .. } => "deprecate",
            Action::Dispose { .. } => "dispose",
            Action::Assert { .. } => "assert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    ConnectionKind { conn: String, kind: ConnectionKind },
    /// Every payload received on the connection so far, in order.
    Received { conn: String, payloads: Vec<String> },
    /// Everything received on the connection equals everything sent on it.
    Echoed { conn: String },
    /// Every payload the data plane delivered to `ip:port`, in order.
    Delivered { endpoint: String, payloads: Vec<String> },
    /// Nodes of a path held by the session behind `conn`. `part` selects a
    /// part of a composed session; `role` is needed when several paths are held.
    HeldPath {
        conn: String,
        #[serde(default)]
        part: Option<usize>,
        #[serde(default)]
        role: Option<String>,
        nodes: Vec<NodeId>,
    },
    Counter { name: String, value: u64 },
    DeviceStat { device: String, name: String, value: u64 },
    Allocations { count: usize },
    ActiveSessions { count: usize },
    Lifecycle { module_key: String, state: Lifecycle },
    /// Rank table keys, best first.
    Rank { keys: Vec<String> },
    /// Number of proxy trace records of one event type.
    TraceCount { event: String, count: usize },
}

impl Check {
    fn conn(&self) -> Option<&str> {
        match self {
            Check::ConnectionKind { conn, .. }
            | Check::Received { conn, .. }
            | Check::Echoed { conn }
            | Check::HeldPath { conn, .. } => Some(conn),
            _ => None,
        }
    }

    fn device(&self) -> Option<&str> {
        match self {
            Check::DeviceStat { device, .. } => Some(device),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("topology: {0}")]
    Topology(String),
    #[error("step {step}: {message}")]
    Step { step: usize, message: String },
}

impl ScenarioError {
    /// Index of the offending step, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            ScenarioError::Step { step, .. } => Some(*step),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEntry {
    Step {
        at: Millis,
        step: usize,
        action: &'static str,
        outcome: String,
        /// Frames exchanged with the store during the step.
        frames: u64,
    },
    Proxy(TraceRecord),
    Network { at: Millis, event: NetworkEvent, dispatched_to: Vec<SsoId> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub kind: ConnectionKind,
    pub sso_id: Option<SsoId>,
    /// Held path nodes by role; parts of a composed session appear as `part<i>/<role>`.
    pub paths: BTreeMap<String, Vec<NodeId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub attainment: BTreeMap<String, ObjectiveStats>,
    pub rank: Vec<RankEntry>,
    pub counters: ProxyCounters,
    pub allocations: usize,
    pub deliveries: BTreeMap<String, Vec<String>>,
    pub sessions: BTreeMap<String, SessionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    /// Timeline step of an inline assertion; `None` for final expectations.
    pub step: Option<usize>,
    pub check: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub scenario: String,
    pub seed: u64,
    pub events: Vec<TraceEntry>,
    pub metrics: FinalMetrics,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

impl TraceReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssertionResult> {
        self.assertions.iter().filter(|a| !a.passed)
    }
}

impl Scenario {
    pub fn parse(json: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(json).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    /// Checks ordering and that every referenced name is defined by an
    /// earlier step.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut last = 0;
        let mut devices = BTreeSet::new();
        let mut conns = BTreeSet::new();
        let mut purchased = BTreeSet::new();
        let err = |step: usize, message: String| ScenarioError::Step { step, message };
        for (i, step) in self.timeline.iter().enumerate() {
            if step.at_ms < last {
                return Err(err(i, format!("at_ms {} precedes the previous step ({last})", step.at_ms)));
            }
            last = step.at_ms;
            let need_conn = |c: &str| {
                if conns.contains(c) {
                    Ok(())
                } else {
                    Err(err(i, format!("undefined connection {c:?}")))
                }
            };
            match &step.action {
                Action::Publish { reference, descriptor } => match (reference, descriptor) {
                    (Some(r), None) if catalog::reference(r).is_none() => {
                        return Err(err(i, format!("unknown reference module {r:?}")))
                    }
                    (Some(_), None) | (None, Some(_)) => {}
                    _ => return Err(err(i, "publish takes exactly one of reference and descriptor".into())),
                },
                Action::Purchase { app, module_key } => {
                    purchased.insert((app.clone(), module_key.clone()));
                }
                Action::InitDevice { device, app, modules, .. } => {
                    if let Some(m) = modules.iter().find(|m| !purchased.contains(&(app.clone(), (*m).clone()))) {
                        return Err(err(i, format!("{app} has not purchased {m:?}")));
                    }
                    devices.insert(device.clone());
                }
                Action::Connect { device, conn, .. } => {
                    if !devices.contains(device) {
                        return Err(err(i, format!("undefined device {device:?}")));
                    }
                    if !conns.insert(conn.clone()) {
                        return Err(err(i, format!("connection {conn:?} defined twice")));
                    }
                }
                Action::Send { conn, data, random } => {
                    need_conn(conn)?;
                    if data.is_some() == random.is_some() {
                        return Err(err(i, "send takes exactly one of data and random".into()));
                    }
                }
                Action::Recv { conn, .. }
                | Action::Control { conn, .. }
                | Action::Sample { conn, .. }
                | Action::Close { conn } => need_conn(conn)?,
                Action::Shutdown { device } => {
                    if !devices.contains(device) {
                        return Err(err(i, format!("undefined device {device:?}")));
                    }
                }
                Action::Assert { expect } => {
                    if let Some(c) = expect.conn() {
                        need_conn(c)?;
                    }
                    if let Some(d) = expect.device().filter(|d| !devices.contains(*d)) {
                        return Err(err(i, format!("undefined device {d:?}")));
                    }
                }
                _ => {}
            }
        }
        let end = self.timeline.len();
        for c in &self.expected {
            if let Some(conn) = c.conn().filter(|c| !conns.contains(*c)) {
                return Err(err(end, format!("expectation names undefined connection {conn:?}")));
            }
            if let Some(d) = c.device().filter(|d| !devices.contains(*d)) {
                return Err(err(end, format!("expectation names undefined device {d:?}")));
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
    Scenario::parse(&text)
}

/// Loads and runs a scenario file. `seed` overrides the scenario's own.
pub fn run_scenario(path: &Path, seed: Option<u64>) -> Result<TraceReport, ScenarioError> {
    let scenario = load_scenario(path)?;
    run(&scenario, path.parent().unwrap_or(Path::new(".")), seed)
}

/// Runs a scenario whose relative paths resolve against `base`.
pub fn run(scenario: &Scenario, base: &Path, seed: Option<u64>) -> Result<TraceReport, ScenarioError> {
    scenario.validate()?;
    let topo_path = base.join(&scenario.topology);
    let text = fs::read_to_string(&topo_path)
        .map_err(|e| ScenarioError::Io { path: topo_path.display().to_string(), message: e.to_string() })?;
    let topology = parse_topology(&text).map_err(|e| ScenarioError::Topology(e.to_string()))?;
    let world = World::new(topology, scenario.policy, scenario.registry.clone());
    for (i, h) in scenario.hosts.iter().enumerate() {
        world.add_host(h).map_err(|message| ScenarioError::Step { step: i, message: format!("host: {message}") })?;
    }
    let seed = seed.unwrap_or(scenario.seed);
    let root = tempfile::tempdir().map_err(|e| ScenarioError::Io { path: "tempdir".into(), message: e.to_string() })?;
    let mut runner = Runner {
        world,
        root: root.path().to_path_buf(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        entitlements: BTreeMap::new(),
        devices: BTreeMap::new(),
        conns: BTreeMap::new(),
        sent: BTreeMap::new(),
        received: BTreeMap::new(),
        events: Vec::new(),
        proxy_seen: 0,
        results: Vec::new(),
    };
    for (i, step) in scenario.timeline.iter().enumerate() {
        runner.step(i, step);
    }
    for c in &scenario.expected {
        runner.check(None, c);
    }
    runner.drain_proxy();
    let metrics = runner.metrics();
    for conn in runner.conns.values() {
        // Dropping connections must not touch the report, but close them so
        // the temporary cache root is released cleanly.
        let _ = conn.close();
    }
    let passed = runner.results.iter().all(|r| r.passed);
    Ok(TraceReport {
        scenario: scenario.name.clone(),
        seed,
        events: runner.events,
        metrics,
        assertions: runner.results,
        passed,
    })
}

/// Text form of a payload in reports: UTF-8 when valid, otherwise its
/// length and a digest prefix.
pub fn show_payload(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => format!("bin:{}:{}", bytes.len(), &sha256_hex(bytes)[..16]),
    }
}

struct Runner {
    world: World,
    root: PathBuf,
    rng: ChaCha8Rng,
    entitlements: BTreeMap<(String, String), Entitlement>,
    devices: BTreeMap<String, DsoRuntime>,
    conns: BTreeMap<String, Connection>,
    sent: BTreeMap<String, Vec<u8>>,
    received: BTreeMap<String, Vec<Vec<u8>>>,
    events: Vec<TraceEntry>,
    proxy_seen: usize,
    results: Vec<AssertionResult>,
}

/// An error code plus a message.
type StepError = (String, String);

fn fail(code: &str, e: &dyn std::fmt::Display) -> StepError {
    (code.to_string(), e.to_string())
}

impl Runner {
    fn drain_proxy(&mut self) {
        let proxy = lock(&self.world.proxy);
        let trace = proxy.trace();
        self.events.extend(trace[self.proxy_seen..].iter().cloned().map(TraceEntry::Proxy));
        self.proxy_seen = trace.len();
    }

    fn step(&mut self, index: usize, step: &Step) {
        let now = self.world.now();
        if step.at_ms > now {
            self.world.advance(step.at_ms - now);
        }
        self.drain_proxy();
        let frames = self.world.frames();
        let result = self.act(index, &step.action);
        self.drain_proxy();
        let outcome = match (&result, &step.expect_error) {
            (Ok(o), None) => o.clone(),
            (Ok(o), Some(code)) => {
                self.record(Some(index), format!("step fails with {code}"), Err(format!("step succeeded: {o}")));
                o.clone()
            }
            (Err((code, msg)), expected) => {
                let check = format!("step fails with {}", expected.as_deref().unwrap_or("nothing"));
                let verdict = match expected {
                    Some(e) if e == code => Ok(()),
                    _ => Err(format!("{code}: {msg}")),
                };
                self.record(Some(index), check, verdict);
                format!("error {code}: {msg}")
            }
        };
        self.events.push(TraceEntry::Step {
            at: self.world.now(),
            step: index,
            action: step.action.name(),
            outcome,
            frames: self.world.frames() - frames,
        });
    }

    fn conn(&self, name: &str) -> &Connection {
        &self.conns[name]
    }

    fn act(&mut self, index: usize, action: &Action) -> Result<String, StepError> {
        let now = self.world.now();
        match action {
            Action::Publish { reference, descriptor } => {
                let desc = match (reference, descriptor) {
                    (Some(r), _) => catalog::reference(r).expect("validated"),
                    (_, Some(d)) => (**d).clone(),
                    _ => unreachable!("validated"),
                };
                let key = desc.module_key.clone();
                let submitter = desc.contributor.clone();
                lock(&self.world.registry).publish_module(desc, &submitter, now).map_err(|e| fail(e.code(), &e))?;
                Ok(format!("published {key}"))
            }
            Action::Review { module_key, verdict } => {
                lock(&self.world.registry).review_module(module_key, *verdict).map_err(|e| fail(e.code(), &e))?;
                Ok(format!("{module_key} reviewed"))
            }
            Action::Compose { parts, request } => {
                let key = lock(&self.world.registry)
                    .compose_modules(parts, request.clone(), now)
                    .map_err(|e| fail(e.code(), &e))?;
                Ok(format!("composed {key}"))
            }
            Action::Purchase { app, module_key } => {
                let ent = lock(&self.world.registry)
                    .purchase(app, module_key, None, now)
                    .map_err(|e| fail(e.code(), &e))?;
                self.entitlements.insert((app.clone(), module_key.clone()), ent);
                Ok(format!("{app} owns {module_key}"))
            }
            Action::InitDevice { device, app, ip, modules, cache } => {
                let ents = modules.iter().map(|m| self.entitlements[&(app.clone(), m.clone())].clone()).collect();
                let dir = self.root.join(cache.as_deref().unwrap_or(device));
                fs::create_dir_all(&dir).map_err(|e| fail("Io", &e))?;
                let rt = self.world.device(app, ip, &dir, ents).map_err(|e| fail(e.code(), &e))?;
                let stats = rt.stats();
                let outcome = format!(
                    "{} transfers, {} discards{}",
                    stats.to_transfers,
                    stats.cache_discards,
                    if rt.is_degraded() { ", degraded" } else { "" }
                );
                self.devices.insert(device.clone(), rt);
                Ok(outcome)
            }
            Action::Connect { device, conn, ip, port, module_id } => {
                let rt = &self.devices[device];
                let before = rt.fallback_reasons().len();
                let c = rt.connect("tcp", ip, *port, module_id.as_deref()).map_err(|e| fail(e.code(), &e))?;
                let mut outcome = serde_json::to_value(c.kind()).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                if let Some(reason) = rt.fallback_reasons().get(before) {
                    outcome = format!("{outcome} ({reason})");
                }
                if let Some(id) = c.session() {
                    outcome = format!("{outcome} sso {id}");
                }
                self.conns.insert(conn.clone(), c);
                self.received.insert(conn.clone(), Vec::new());
                Ok(outcome)
            }
            Action::Send { conn, data, random } => {
                let payload = match (data, random) {
                    (Some(d), _) => d.as_bytes().to_vec(),
                    (_, Some(n)) => {
                        let mut buf = vec![0u8; *n];
                        self.rng.fill_bytes(&mut buf);
                        buf
                    }
                    _ => unreachable!("validated"),
                };
                self.conn(conn).send(&payload).map_err(|e| fail(e.code(), &e))?;
                self.sent.entry(conn.clone()).or_default().extend_from_slice(&payload);
                Ok(format!("sent {} bytes", payload.len()))
            }
            Action::Recv { conn, expect } => {
                let got = self.conn(conn).recv().map_err(|e| fail(e.code(), &e))?;
                let shown = show_payload(&got);
                self.received.get_mut(conn).expect("validated").push(got);
                if let Some(want) = expect {
                    let verdict = if *want == shown { Ok(()) } else { Err(format!("expected {want:?}, got {shown:?}")) };
                    self.record(Some(index), format!("recv on {conn} yields {want:?}"), verdict);
                }
                Ok(format!("received {shown:?}"))
            }
            Action::Control { conn, verb } => {
                self.conn(conn).control(verb).map_err(|e| fail(e.code(), &e))?;
                Ok(format!("{verb} done"))
            }
            Action::Sample { conn, value } => {
                let reply = self.conn(conn).report_sample(*value).map_err(|e| fail(e.code(), &e))?;
                Ok(format!("ewma {}, violation {}", reply.ewma, reply.violation))
            }
            Action::Close { conn } => {
                self.conn(conn).close().map_err(|e| fail(e.code(), &e))?;
                Ok("closed".into())
            }
            Action::Shutdown { device } => {
                let rt = &self.devices[device];
                let before = rt.stats().close_frames;
                rt.shutdown();
                Ok(format!("{} sessions signalled", rt.stats().close_frames - before))
            }
            Action::SetLinkState { link, change } => {
                let dispatched = self.world.set_link(link, *change).map_err(|e| fail(e.code(), &e))?;
                let n = dispatched.len();
                for (event, ssos) in dispatched {
                    self.events.push(TraceEntry::Network { at: now, event, dispatched_to: ssos });
                }
                Ok(format!("{n} events"))
            }
            Action::SetStore { up } => {
                self.world.set_endpoint_down(STORE_ENDPOINT, !up);
                Ok(if *up { "store up" } else { "store down" }.into())
            }
            Action::AdvanceTime {} => Ok(format!("now {now}")),
            Action::Rate { module_key, rater, stars } => {
                let rating = Rating { rater: rater.clone(), stars: *stars, comment: String::new(), at: now };
                lock(&self.world.registry).rate_module(module_key, rating).map_err(|e| fail(e.code(), &e))?;
                Ok(format!("{module_key} rated {stars}"))
            }
            Action::Deprecate { module_key } => {
                lock(&self.world.registry)
                    .transition_lifecycle(module_key, Lifecycle::Deprecated, now)
                    .map_err(|e| fail(e.code(), &e))?;
                Ok(format!("{module_key} deprecated"))
            }
            Action::Dispose { module_key } => {
                lock(&self.world.registry)
                    .transition_lifecycle(module_key, Lifecycle::Disposed, now)
                    .map_err(|e| fail(e.code(), &e))?;
                Ok(format!("{module_key} disposed"))
            }
            Action::Assert { expect } => {
                let passed = self.check(Some(index), expect);
                Ok(if passed { "passed" } else { "failed" }.into())
            }
        }
    }

    fn record(&mut self, step: Option<usize>, check: String, verdict: Result<(), String>) -> bool {
        let passed = verdict.is_ok();
        self.results.push(AssertionResult { step, check, passed, detail: verdict.err().unwrap_or_default() });
        passed
    }

    fn check(&mut self, step: Option<usize>, check: &Check) -> bool {
        let label = serde_json::to_string(check).expect("check serializes");
        let verdict = self.evaluate(check);
        self.record(step, label, verdict)
    }

    fn evaluate(&self, check: &Check) -> Result<(), String> {
        fn eq<T: PartialEq + std::fmt::Debug>(want: &T, got: &T) -> Result<(), String> {
            if want == got {
                Ok(())
            } else {
                Err(format!("expected {want:?}, got {got:?}"))
            }
        }
        match check {
            Check::ConnectionKind { conn, kind } => eq(kind, &self.conn(conn).kind()),
            Check::Received { conn, payloads } => {
                let got: Vec<String> = self.received[conn].iter().map(|p| show_payload(p)).collect();
                eq(payloads, &got)
            }
            Check::Echoed { conn } => {
                let got: Vec<u8> = self.received[conn].concat();
                let sent = self.sent.get(conn).cloned().unwrap_or_default();
                if got == sent {
                    Ok(())
                } else {
                    Err(format!("sent {} bytes, received {} differing bytes", sent.len(), got.len()))
                }
            }
            Check::Delivered { endpoint, payloads } => {
                let got = self.deliveries().remove(endpoint).unwrap_or_default();
                eq(payloads, &got)
            }
            Check::HeldPath { conn, part, role, nodes } => {
                let paths = self.session_paths(self.conn(conn).session());
                let prefix = part.map(|p| format!("part{p}/")).unwrap_or_default();
                let held: Vec<(&String, &Vec<NodeId>)> = paths
                    .iter()
                    .filter(|(k, _)| match (part, role) {
                        (_, Some(r)) => **k == format!("{prefix}{r}"),
                        (Some(_), None) => k.starts_with(&prefix),
                        (None, None) => !k.contains('/'),
                    })
                    .collect();
                match held.as_slice() {
                    [(_, got)] => eq(nodes, got),
                    [] => Err("no matching held path".into()),
                    many => Err(format!("{} paths match, name a role", many.len())),
                }
            }
            Check::Counter { name, value } => {
                let counters = serde_json::to_value(lock(&self.world.proxy).counters()).expect("counters serialize");
                let got = counters.get(name).and_then(Value::as_u64).ok_or_else(|| format!("no counter {name:?}"))?;
                eq(value, &got)
            }
            Check::DeviceStat { device, name, value } => {
                let stats = serde_json::to_value(self.devices[device].stats()).expect("stats serialize");
                let got = stats.get(name).and_then(Value::as_u64).ok_or_else(|| format!("no device stat {name:?}"))?;
                eq(value, &got)
            }
            Check::Allocations { count } => eq(count, &self.world.allocations()),
            Check::ActiveSessions { count } => eq(count, &lock(&self.world.proxy).active_sessions()),
            Check::Lifecycle { module_key, state } => {
                eq(&Some(*state), &lock(&self.world.registry).lifecycle(module_key))
            }
            Check::Rank { keys } => {
                let got: Vec<String> = lock(&self.world.registry)
                    .rank_modules(&RankQuery::default())
                    .into_iter()
                    .map(|e| e.module_key)
                    .collect();
                eq(keys, &got)
            }
            Check::TraceCount { event, count } => {
                let got = lock(&self.world.proxy)
                    .trace()
                    .iter()
                    .filter(|r| {
                        serde_json::to_value(r).ok().and_then(|v| v.get("event").and_then(Value::as_str).map(|s| s == event))
                            == Some(true)
                    })
                    .count();
                eq(count, &got)
            }
        }
    }

    fn deliveries(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for d in lock(&self.world.plane).deliveries() {
            out.entry(d.dst.clone()).or_default().push(show_payload(&d.payload));
        }
        out
    }

    fn session_paths(&self, sso: Option<SsoId>) -> BTreeMap<String, Vec<NodeId>> {
        let proxy = lock(&self.world.proxy);
        let mut out = BTreeMap::new();
        let Some(inst) = sso.and_then(|id| proxy.instance(id)) else {
            return out;
        };
        for (role, p) in &inst.pool {
            out.insert(role.clone(), p.nodes.clone());
        }
        for (part, child) in &inst.children {
            if let Some(c) = proxy.instance(*child) {
                for (role, p) in &c.pool {
                    out.insert(format!("part{part}/{role}"), p.nodes.clone());
                }
            }
        }
        out
    }

    fn metrics(&self) -> FinalMetrics {
        let sessions = self
            .conns
            .iter()
            .map(|(name, c)| {
                let summary = SessionSummary { kind: c.kind(), sso_id: c.session(), paths: self.session_paths(c.session()) };
                (name.clone(), summary)
            })
            .collect();
        let reg = lock(&self.world.registry);
        FinalMetrics {
            attainment: reg.state().attainment.clone(),
            rank: reg.rank_modules(&RankQuery::default()),
            counters: lock(&self.world.proxy).counters(),
            allocations: self.world.allocations(),
            deliveries: self.deliveries(),
            sessions,
        }
    }
}
