//! `socketstore`: run the store services, drive the registry as a developer
//! or contributor, and replay scenarios.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use socketstore::behaviors::manifest::BehaviorManifest;
use socketstore::dataplane::{lock, EndpointKind, SimDataPlane};
use socketstore::domain::{Entitlement, Lifecycle, Metric, ModuleDescriptor, Rating};
use socketstore::netsim::{parse_topology, NetworkSim};
use socketstore::proxy::{PoolPolicy, StoreProxy};
use socketstore::registry::{BrowseEntry, RankEntry, RankQuery, Registry, RegistryConfig, RegistryOp, Verdict};
use socketstore::scenario::run_scenario;
use socketstore::service::{
    serve_tcp, Client, Clock, Forwarding, NetService, RemoteDirectory, RemoteNet, SharedHandler, StoreService,
    SystemClock, TcpTransport,
};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Parser)]
#[command(name = "socketstore", version, about = "Socket Store services, registry client and scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one service over TCP until killed.
    Serve {
        service: Service,
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay a scenario file on virtual time.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Registry operations against a running registry.
    Store {
        #[arg(long, default_value = "127.0.0.1:7400")]
        registry: String,
        #[command(subcommand)]
        op: StoreOp,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Service {
    Registry,
    Proxy,
    Netsim,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReviewVerdict {
    Accept,
    Revise,
}

#[derive(Subcommand)]
enum StoreOp {
    /// Submit a module descriptor (JSON file).
    Publish {
        manifest: PathBuf,
        /// Defaults to the descriptor's contributor.
        #[arg(long)]
        submitter: Option<String>,
    },
    Review { module_key: String, verdict: ReviewVerdict },
    Browse {
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Prints the entitlement as JSON.
    Purchase {
        module_key: String,
        #[arg(long)]
        app: String,
        #[arg(long)]
        fingerprint: Option<String>,
    },
    Rate {
        module_key: String,
        #[arg(long)]
        rater: String,
        #[arg(long)]
        stars: u8,
        #[arg(long, default_value = "")]
        comment: String,
    },
    Rank {
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        metric: Option<String>,
    },
    Deprecate { module_key: String },
    Dispose { module_key: String },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn usage(e: impl Display) -> Failure {
    Failure { code: EXIT_USAGE, message: e.to_string() }
}

fn failed(e: impl Display) -> Failure {
    Failure { code: EXIT_FAILED, message: e.to_string() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Serve { service, config } => serve(service, &config),
        Command::Run { scenario, seed, report } => run(&scenario, seed, report.as_deref()),
        Command::Store { registry, op } => store(&registry, op),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

// ---- serve ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryServe {
    listen: String,
    /// Operation log; state is rebuilt from it on start.
    #[serde(default)]
    log: Option<PathBuf>,
    #[serde(default)]
    manifest: Option<PathBuf>,
    #[serde(default)]
    registry: RegistryConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetsimServe {
    listen: String,
    topology: PathBuf,
    /// Host addresses attached to topology nodes.
    #[serde(default)]
    hosts: Vec<HostConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProxyServe {
    listen: String,
    registry: String,
    netsim: String,
    #[serde(default)]
    policy: PoolPolicy,
    /// Echo/sink endpoints of the simulated data plane.
    #[serde(default)]
    hosts: Vec<HostConfig>,
    /// Interval of network event polling and the timeout sweep.
    #[serde(default = "default_poll_ms")]
    poll_ms: u64,
}

/// A host entry. TOML keys are strings, so ports are parsed here.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HostConfig {
    ip: String,
    node: String,
    #[serde(default)]
    endpoints: BTreeMap<String, EndpointKind>,
}

impl HostConfig {
    fn endpoints(&self) -> Result<Vec<(u16, EndpointKind)>, Failure> {
        self.endpoints
            .iter()
            .map(|(port, kind)| port.parse().map(|p| (p, *kind)).map_err(|_| usage(format!("host {}: bad port {port:?}", self.ip))))
            .collect()
    }
}

fn default_poll_ms() -> u64 {
    100
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn relative(config: &Path, p: &Path) -> PathBuf {
    config.parent().unwrap_or(Path::new(".")).join(p)
}

fn remote(addr: &str) -> Result<Client, Failure> {
    TcpTransport::connect(addr, CONNECT_TIMEOUT)
        .map(|t| Client::new(Box::new(t)))
        .map_err(|e| usage(format!("{addr}: {e}")))
}

fn serve(service: Service, config: &Path) -> Result<(), Failure> {
    let (listen, handler): (String, SharedHandler) = match service {
        Service::Registry => {
            let c: RegistryServe = read_config(config)?;
            let manifest = match &c.manifest {
                Some(p) => BehaviorManifest::load(&relative(config, p)).map_err(usage)?,
                None => BehaviorManifest::builtin(),
            };
            let registry = match &c.log {
                Some(p) => Registry::open(c.registry, manifest, &relative(config, p)).map_err(usage)?,
                None => Registry::new(c.registry, manifest),
            };
            let svc = StoreService::new(Some(Arc::new(Mutex::new(registry))), None, Arc::new(SystemClock::default()));
            (c.listen, Arc::new(Mutex::new(svc)))
        }
        Service::Netsim => {
            let c: NetsimServe = read_config(config)?;
            let path = relative(config, &c.topology);
            let text = fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let mut net = NetworkSim::new(parse_topology(&text).map_err(usage)?);
            for h in &c.hosts {
                net.attach_host(h.ip.as_str(), h.node.as_str()).map_err(usage)?;
            }
            (c.listen, Arc::new(Mutex::new(NetService::new(Arc::new(Mutex::new(net))))))
        }
        Service::Proxy => {
            let c: ProxyServe = read_config(config)?;
            if !c.policy.is_valid() {
                return Err(usage("pool policy needs a positive window and threshold"));
            }
            let mut plane = SimDataPlane::new();
            for h in &c.hosts {
                for (port, kind) in h.endpoints()? {
                    plane.add_endpoint(&h.ip, port, kind).map_err(usage)?;
                }
            }
            let proxy = Arc::new(Mutex::new(StoreProxy::new(
                c.policy,
                Box::new(RemoteNet::new(remote(&c.netsim)?)),
                Box::new(RemoteDirectory::new(remote(&c.registry)?)),
                Box::new(Arc::new(Mutex::new(plane))),
            )));
            let clock = Arc::new(SystemClock::default());
            spawn_housekeeping(proxy.clone(), clock.clone(), Duration::from_millis(c.poll_ms.max(1)));
            let front: SharedHandler = Arc::new(Mutex::new(StoreService::new(None, Some(proxy), clock)));
            let registry = TcpTransport::connect(&c.registry, CONNECT_TIMEOUT).map_err(usage)?;
            (c.listen, Arc::new(Mutex::new(Forwarding::new(front, Box::new(registry)))))
        }
    };
    let listener = TcpListener::bind(&listen).map_err(|e| usage(format!("bind {listen}: {e}")))?;
    let addr = listener.local_addr().map_err(failed)?;
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    serve_tcp(listener, handler).map_err(failed)
}

/// Network events arrive by polling in separate-process mode.
fn spawn_housekeeping(proxy: Arc<Mutex<StoreProxy>>, clock: Arc<SystemClock>, every: Duration) {
    thread::spawn(move || loop {
        thread::sleep(every);
        let now = clock.now();
        let mut p = lock(&proxy);
        p.pump_events(now);
        p.sweep_timeouts(now);
    });
}

// ---- run ----

fn run(scenario: &Path, seed: Option<u64>, report: Option<&Path>) -> Result<(), Failure> {
    let r = run_scenario(scenario, seed).map_err(usage)?;
    let json = r.to_json();
    match report {
        Some(p) => fs::write(p, &json).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => print!("{json}"),
    }
    if r.passed {
        return Ok(());
    }
    for f in r.failures() {
        let at = f.step.map_or("final".to_string(), |s| format!("step {s}"));
        eprintln!("FAILED {at}: {}\n  {}", f.check, f.detail);
    }
    Err(Failure { code: EXIT_FAILED, message: String::new() })
}

// ---- store ----

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn execute(client: &mut Client, op: RegistryOp) -> Result<Value, Failure> {
    client.call("execute", json!(op)).map_err(failed)
}

fn query(text: Option<String>, metric: Option<String>) -> Result<RankQuery, Failure> {
    let metric = metric
        .map(|m| serde_json::from_value::<Metric>(Value::String(m.clone())).map_err(|_| usage(format!("unknown metric {m:?}"))))
        .transpose()?;
    Ok(RankQuery { text, metric })
}

fn store(addr: &str, op: StoreOp) -> Result<(), Failure> {
    let mut client = TcpTransport::connect(addr, CONNECT_TIMEOUT)
        .map(|t| Client::new(Box::new(t)))
        .map_err(|e| failed(format!("registry {addr}: {e}")))?;
    let now = now_ms();
    match op {
        StoreOp::Publish { manifest, submitter } => {
            let text = fs::read_to_string(&manifest).map_err(|e| usage(format!("{}: {e}", manifest.display())))?;
            let descriptor: ModuleDescriptor =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", manifest.display())))?;
            let key = descriptor.module_key.clone();
            let submitter = submitter.unwrap_or_else(|| descriptor.contributor.clone());
            execute(&mut client, RegistryOp::Publish { descriptor, submitter, now })?;
            println!("submitted {key}");
        }
        StoreOp::Review { module_key, verdict } => {
            let verdict = match verdict {
                ReviewVerdict::Accept => Verdict::Accept,
                ReviewVerdict::Revise => Verdict::RequestRevision,
            };
            execute(&mut client, RegistryOp::Review { module_key: module_key.clone(), verdict })?;
            println!("reviewed {module_key}");
        }
        StoreOp::Browse { text, metric } => {
            let rows: Vec<BrowseEntry> = client.call("browse", json!(query(text, metric)?)).map_err(failed)?;
            println!("{:<16} {:<8} {:<20} {:<24} module_ids", "module_key", "version", "lifecycle", "name");
            for r in rows {
                println!("{:<16} {:<8} {:<20} {:<24} {}", r.module_key, r.version, r.lifecycle.as_str(), r.name, r.module_ids.join(","));
            }
        }
        StoreOp::Purchase { module_key, app, fingerprint } => {
            let ent: Entitlement = serde_json::from_value(execute(
                &mut client,
                RegistryOp::Purchase { app_id: app, module_key, device_fingerprint: fingerprint, now },
            )?)
            .map_err(failed)?;
            println!("{}", serde_json::to_string(&ent).map_err(failed)?);
        }
        StoreOp::Rate { module_key, rater, stars, comment } => {
            let rating = Rating { rater, stars, comment, at: now };
            execute(&mut client, RegistryOp::Rate { module_key: module_key.clone(), rating })?;
            println!("rated {module_key}");
        }
        StoreOp::Rank { text, metric } => {
            let rows: Vec<RankEntry> = client.call("rank", json!(query(text, metric)?)).map_err(failed)?;
            println!("{:<6} {:<16} score", "rank", "module_key");
            for (i, r) in rows.iter().enumerate() {
                println!("{:<6} {:<16} {:.4}", i + 1, r.module_key, r.score);
            }
        }
        StoreOp::Deprecate { module_key } => {
            let target = Lifecycle::Deprecated;
            execute(&mut client, RegistryOp::Transition { module_key: module_key.clone(), target, now })?;
            println!("{module_key} deprecated");
        }
        StoreOp::Dispose { module_key } => {
            let target = Lifecycle::Disposed;
            execute(&mut client, RegistryOp::Transition { module_key: module_key.clone(), target, now })?;
            println!("{module_key} disposed");
        }
    }
    Ok(())
}
