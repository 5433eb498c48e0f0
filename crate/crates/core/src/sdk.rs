//! Device-side runtime (DSO). Initialization checks the local TO cache
//! against the store; `connect` with a module id runs the cached device
//! behavior and opens a store session, and any failure on that route falls
//! back to a plain direct connection (`LegacySocket`).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behaviors::device::{DeviceBehavior, DeviceBehaviors, DeviceOp, DEFAULT_REDIRECT};
use crate::dataplane::{lock, DataPlaneError, DirectListener, DirectNet, DirectStream};
use crate::domain::{module_key_of, Entitlement, ParameterSet, TransferableObject};
use crate::service::{Client, ClientError, Transport, TransportError};
use crate::wire::{
    CloseSessionBody, DataBody, DataOp, DataReplyBody, HelloBody, MessageKind, Notification, OpenSessionBody, Peer,
    SampleBody, SampleReplyBody, SessionClosedBody, SessionOpenedBody, ToRequestBody, ToResponse, MAX_FRAME_LEN,
    PROTOCOL_VERSION,
};

/// Largest application payload: base64 plus the JSON envelope must fit a frame.
pub const MAX_PAYLOAD: usize = MAX_FRAME_LEN / 4 * 3 - 4096;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SdkError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("payload of {0} bytes exceeds the frame bound")]
    FrameTooLarge(usize),
    #[error("connect to {0} failed")]
    ConnectFailed(String),
    #[error("bind to port {0} failed")]
    BindFailed(u16),
    #[error("unsupported on this connection: {0}")]
    Unsupported(String),
    #[error("no data before the deadline")]
    Timeout,
    #[error("store: {code}: {message}")]
    Store { code: String, message: String },
}

impl SdkError {
    pub fn code(&self) -> &str {
        match self {
            SdkError::Config(_) => "Config",
            SdkError::ConnectionClosed => "ConnectionClosed",
            SdkError::FrameTooLarge(_) => "FrameTooLarge",
            SdkError::ConnectFailed(_) => "ConnectFailed",
            SdkError::BindFailed(_) => "BindFailed",
            SdkError::Unsupported(_) => "Unsupported",
            SdkError::Timeout => "Timeout",
            SdkError::Store { code, .. } => code,
        }
    }
}

impl From<ClientError> for SdkError {
    fn from(e: ClientError) -> Self {
        let message = match &e {
            ClientError::Remote(r) => r.message.clone(),
            other => other.to_string(),
        };
        SdkError::Store { code: e.code().to_string(), message }
    }
}

/// Opens transports to store endpoints.
pub trait Connector: Send + Sync {
    fn connect(&self, endpoint: &str) -> Result<Box<dyn Transport>, TransportError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DsoConfig {
    pub app_id: String,
    /// Address of this device on the simulated network.
    pub device_ip: String,
    pub store_endpoints: Vec<String>,
    #[serde(default)]
    pub entitlements: Vec<Entitlement>,
    pub cache_dir: PathBuf,
    #[serde(default = "default_deadline")]
    pub recv_deadline_ms: u64,
}

fn default_deadline() -> u64 {
    1000
}

/// On-disk TO cache: `<module_key>.to.json` plus `<module_key>.ver`.
#[derive(Debug, Clone)]
pub struct ToCache {
    dir: PathBuf,
}

impl ToCache {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, module_key: &str) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("{module_key}.to.json")), self.dir.join(format!("{module_key}.ver")))
    }

    /// The cached TO, if present and intact. Entries that fail to parse,
    /// disagree with their version file or fail the checksum are deleted.
    pub fn load(&self, module_key: &str) -> CacheLookup {
        let (to_path, ver_path) = self.paths(module_key);
        let (Ok(text), Ok(ver)) = (fs::read_to_string(&to_path), fs::read_to_string(&ver_path)) else {
            if to_path.exists() || ver_path.exists() {
                self.remove(module_key);
                return CacheLookup::Discarded;
            }
            return CacheLookup::Missing;
        };
        match serde_json::from_str::<TransferableObject>(&text) {
            Ok(to)
                if to.verify_checksum()
                    && to.module_key == module_key
                    && ver.trim().parse::<u32>().ok() == Some(to.version) =>
            {
                CacheLookup::Hit(to)
            }
            _ => {
                self.remove(module_key);
                CacheLookup::Discarded
            }
        }
    }

    pub fn store(&self, to: &TransferableObject) -> io::Result<usize> {
        let (to_path, ver_path) = self.paths(&to.module_key);
        let json = serde_json::to_string_pretty(to)?;
        fs::write(&to_path, &json)?;
        fs::write(&ver_path, to.version.to_string())?;
        Ok(json.len())
    }

    pub fn remove(&self, module_key: &str) {
        let (to_path, ver_path) = self.paths(module_key);
        let _ = fs::remove_file(to_path);
        let _ = fs::remove_file(ver_path);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheLookup {
    Hit(TransferableObject),
    Missing,
    Discarded,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub to_transfers: u64,
    pub to_bytes: u64,
    pub cache_discards: u64,
    pub module_connects: u64,
    pub fallbacks: u64,
    pub close_frames: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    ModuleSocket,
    LegacySocket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    IncomingData,
    ObjectiveViolation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DsoEvent {
    IncomingData(Vec<u8>),
    ObjectiveViolation { value: Option<f64>, reason: String },
}

impl DsoEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            DsoEvent::IncomingData(_) => EventKind::IncomingData,
            DsoEvent::ObjectiveViolation { .. } => EventKind::ObjectiveViolation,
        }
    }
}

pub type EventHandler = Box<dyn FnMut(&DsoEvent) + Send>;

struct Inner {
    config: DsoConfig,
    connector: Box<dyn Connector>,
    behaviors: DeviceBehaviors,
    cache: ToCache,
    client: Mutex<Option<Client>>,
    direct: Mutex<Box<dyn DirectNet>>,
    /// Current TO per entitled module, verified against the store at init.
    tos: Mutex<BTreeMap<String, TransferableObject>>,
    sessions: Mutex<BTreeSet<u64>>,
    stats: Mutex<RuntimeStats>,
    degraded: Mutex<bool>,
    fallback_reasons: Mutex<Vec<String>>,
}

impl Inner {
    fn request<B: Serialize, T: serde::de::DeserializeOwned>(&self, kind: MessageKind, body: &B) -> Result<T, SdkError> {
        let mut client = lock(&self.client);
        if client.is_none() {
            *client = open_client(&*self.connector, &self.config.store_endpoints);
        }
        let c = client.as_mut().ok_or_else(|| SdkError::Store { code: "Unreachable".into(), message: "no store endpoint".into() })?;
        let result = c.request(kind, body);
        if let Err(ClientError::Transport(_)) = &result {
            // Reconnect on the next call.
            *client = None;
        }
        Ok(result?)
    }

    fn close_session(&self, sso_id: u64) {
        if !lock(&self.sessions).remove(&sso_id) {
            return;
        }
        lock(&self.stats).close_frames += 1;
        if let Err(e) = self.request::<_, SessionClosedBody>(MessageKind::CloseSession, &CloseSessionBody { sso_id }) {
            log::warn!("close of session {sso_id} not acknowledged: {e}");
        }
    }
}

fn open_client(connector: &dyn Connector, endpoints: &[String]) -> Option<Client> {
    for ep in endpoints {
        match connector.connect(ep) {
            Ok(t) => {
                let mut c = Client::new(t);
                let hello = HelloBody { protocol_version: PROTOCOL_VERSION, role: "device".into() };
                match c.request::<_, HelloBody>(MessageKind::Hello, &hello) {
                    Ok(_) => return Some(c),
                    Err(e) => log::info!("store endpoint {ep} rejected hello: {e}"),
                }
            }
            Err(e) => log::info!("store endpoint {ep} unreachable: {e}"),
        }
    }
    None
}

/// One app's device-side runtime. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct DsoRuntime {
    inner: Arc<Inner>,
}

impl DsoRuntime {
    /// Resolves a store endpoint and brings the TO cache up to date. With no
    /// endpoint reachable the runtime starts degraded: every module connect
    /// falls back.
    pub fn init(
        config: DsoConfig,
        connector: Box<dyn Connector>,
        direct: Box<dyn DirectNet>,
        behaviors: DeviceBehaviors,
    ) -> Result<Self, SdkError> {
        if config.store_endpoints.is_empty() {
            return Err(SdkError::Config("no store endpoint configured".into()));
        }
        let cache = ToCache::new(&config.cache_dir).map_err(|e| SdkError::Config(e.to_string()))?;
        let client = open_client(&*connector, &config.store_endpoints);
        let degraded = client.is_none();
        let inner = Arc::new(Inner {
            config,
            connector,
            behaviors,
            cache,
            client: Mutex::new(client),
            direct: Mutex::new(direct),
            tos: Mutex::new(BTreeMap::new()),
            sessions: Mutex::new(BTreeSet::new()),
            stats: Mutex::new(RuntimeStats::default()),
            degraded: Mutex::new(degraded),
            fallback_reasons: Mutex::new(Vec::new()),
        });
        let rt = Self { inner };
        if !degraded {
            rt.refresh_tos();
        }
        Ok(rt)
    }

    fn refresh_tos(&self) {
        let inner = &self.inner;
        for ent in &inner.config.entitlements {
            let key = &ent.module_key;
            let cached = match inner.cache.load(key) {
                CacheLookup::Hit(to) => Some(to),
                CacheLookup::Missing => None,
                CacheLookup::Discarded => {
                    lock(&inner.stats).cache_discards += 1;
                    None
                }
            };
            let req = ToRequestBody {
                entitlement: ent.clone(),
                module_key: key.clone(),
                cached_version: cached.as_ref().map(|t| t.version),
            };
            let to = match inner.request::<_, ToResponse>(MessageKind::ToRequest, &req) {
                Ok(ToResponse::UpToDate { .. }) => cached,
                Ok(ToResponse::NewTo { to }) => {
                    if !to.verify_checksum() || &to.module_key != key {
                        log::warn!("TO for {key} failed verification; not cached");
                        inner.cache.remove(key);
                        continue;
                    }
                    match inner.cache.store(&to) {
                        Ok(bytes) => {
                            let mut s = lock(&inner.stats);
                            s.to_transfers += 1;
                            s.to_bytes += bytes as u64;
                        }
                        Err(e) => log::warn!("TO cache write for {key} failed: {e}"),
                    }
                    Some(to)
                }
                Ok(ToResponse::DefaultDevice { version }) => {
                    let to = TransferableObject::new(key.clone(), version, DEFAULT_REDIRECT, ParameterSet::new());
                    if let Err(e) = inner.cache.store(&to) {
                        log::warn!("TO cache write for {key} failed: {e}");
                    }
                    Some(to)
                }
                Err(e) => {
                    log::info!("TO check for {key} failed: {e}");
                    if matches!(&e, SdkError::Store { code, .. } if code == "NotFound") {
                        inner.cache.remove(key);
                    }
                    None
                }
            };
            if let Some(to) = to {
                lock(&inner.tos).insert(key.clone(), to);
            }
        }
    }

    pub fn stats(&self) -> RuntimeStats {
        *lock(&self.inner.stats)
    }

    pub fn is_degraded(&self) -> bool {
        *lock(&self.inner.degraded)
    }

    pub fn cache(&self) -> &ToCache {
        &self.inner.cache
    }

    /// Version of the TO the runtime would execute for `module_key`.
    pub fn to_version(&self, module_key: &str) -> Option<u32> {
        lock(&self.inner.tos).get(module_key).map(|t| t.version)
    }

    /// Why recent module connects fell back, oldest first.
    pub fn fallback_reasons(&self) -> Vec<String> {
        lock(&self.inner.fallback_reasons).clone()
    }

    pub fn open_sessions(&self) -> usize {
        lock(&self.inner.sessions).len()
    }

    /// Runs the module route: cached TO, device behavior, store session.
    fn module_route(&self, module_id: &str, peer: &Peer) -> Result<(u64, Box<dyn DeviceBehavior>), String> {
        let inner = &self.inner;
        if self.is_degraded() {
            return Err("store unavailable".into());
        }
        let key = module_key_of(module_id).ok_or_else(|| format!("module id {module_id:?} names no module"))?;
        let to = lock(&inner.tos).get(key).cloned().ok_or_else(|| format!("no verified TO for {key}"))?;
        if !to.verify_checksum() {
            return Err(format!("TO for {key} fails its checksum"));
        }
        let mut behavior = inner.behaviors.instantiate(&to.behavior_id, &to.params).map_err(|e| e.to_string())?;
        behavior.on_connect(peer).map_err(|e| e.to_string())?;
        let ent = inner
            .config
            .entitlements
            .iter()
            .find(|e| e.module_key == key)
            .cloned()
            .ok_or_else(|| format!("not entitled to {key}"))?;
        let body = OpenSessionBody {
            entitlement: ent,
            module_key: key.to_string(),
            module_id: module_id.to_string(),
            src_ip: inner.config.device_ip.clone(),
            dst: peer.clone(),
        };
        let opened: SessionOpenedBody = inner.request(MessageKind::OpenSession, &body).map_err(|e| e.to_string())?;
        lock(&inner.sessions).insert(opened.sso_id);
        lock(&inner.stats).module_connects += 1;
        Ok((opened.sso_id, behavior))
    }

    fn note_fallback(&self, reason: String) {
        log::info!("falling back to a legacy socket: {reason}");
        lock(&self.inner.stats).fallbacks += 1;
        lock(&self.inner.fallback_reasons).push(reason);
    }

    /// Establishes a connection. With a module id the module route is tried
    /// first; every failure on it yields a `LegacySocket` instead.
    pub fn connect(&self, protocol: &str, ip: &str, port: u16, module_id: Option<&str>) -> Result<Connection, SdkError> {
        let peer = Peer::new(protocol, ip, port);
        if let Some(id) = module_id {
            match self.module_route(id, &peer) {
                Ok((sso_id, behavior)) => {
                    return Ok(Connection::new(self, peer, Channel::Module { sso_id, behavior }, ConnectionKind::ModuleSocket))
                }
                Err(reason) => self.note_fallback(reason),
            }
        }
        let stream = lock(&self.inner.direct)
            .connect(&self.inner.config.device_ip, &peer)
            .map_err(|_| SdkError::ConnectFailed(format!("{ip}:{port}")))?;
        Ok(Connection::new(self, peer, Channel::Legacy { stream }, ConnectionKind::LegacySocket))
    }

    /// Binds a local port. With a module id, a store session for the bound
    /// interface is opened and accepted connections are module sockets; on
    /// any failure of that route the listener is a legacy one.
    pub fn bind_listen(&self, port: u16, module_id: Option<&str>) -> Result<Listener, SdkError> {
        let ip = self.inner.config.device_ip.clone();
        let listener = lock(&self.inner.direct).listen(&ip, port).map_err(|_| SdkError::BindFailed(port))?;
        let mut session = None;
        if let Some(id) = module_id {
            match self.module_route(id, &Peer::new("tcp", ip.as_str(), port)) {
                Ok((sso_id, _)) => session = Some(sso_id),
                Err(reason) => self.note_fallback(reason),
            }
        }
        Ok(Listener { rt: self.clone(), port, listener, session, closed: false })
    }

    /// Signals every open module session to the store; the TO cache stays.
    pub fn shutdown(&self) {
        let open: Vec<u64> = lock(&self.inner.sessions).iter().copied().collect();
        for id in open {
            self.inner.close_session(id);
        }
        *lock(&self.inner.client) = None;
    }
}

enum Channel {
    Module { sso_id: u64, behavior: Box<dyn DeviceBehavior> },
    Legacy { stream: Box<dyn DirectStream> },
    /// Accepted on a module listener: data arrives directly, the listener's
    /// session carries the module.
    Accepted { sso_id: u64, stream: Box<dyn DirectStream> },
}

struct ConnState {
    channel: Channel,
    inbox: VecDeque<Vec<u8>>,
    handlers: BTreeMap<EventKind, Vec<EventHandler>>,
    closed: bool,
}

impl ConnState {
    fn dispatch(&mut self, event: DsoEvent) {
        if let Some(hs) = self.handlers.get_mut(&event.kind()) {
            for h in hs {
                h(&event);
            }
        }
    }

    fn absorb(&mut self, reply: DataReplyBody) {
        for n in reply.notifications {
            let Notification::ObjectiveViolation { value, reason } = n;
            self.dispatch(DsoEvent::ObjectiveViolation { value, reason });
        }
        for p in reply.inbound {
            self.dispatch(DsoEvent::IncomingData(p.clone()));
            self.inbox.push_back(p);
        }
    }
}

/// A socket returned by [`DsoRuntime::connect`]. Operations on one
/// connection are serialized.
pub struct Connection {
    rt: DsoRuntime,
    kind: ConnectionKind,
    peer: Peer,
    state: Mutex<ConnState>,
}

impl Connection {
    fn new(rt: &DsoRuntime, peer: Peer, channel: Channel, kind: ConnectionKind) -> Self {
        let state = ConnState { channel, inbox: VecDeque::new(), handlers: BTreeMap::new(), closed: false };
        Self { rt: rt.clone(), kind, peer, state: Mutex::new(state) }
    }

    pub fn kind(&self) -> ConnectionKind {
        self.kind
    }

    pub fn peer(&self) -> &Peer {
        &self.peer
    }

    pub fn session(&self) -> Option<u64> {
        match lock(&self.state).channel {
            Channel::Module { sso_id, .. } | Channel::Accepted { sso_id, .. } => Some(sso_id),
            Channel::Legacy { .. } => None,
        }
    }

    fn open_state(&self) -> Result<std::sync::MutexGuard<'_, ConnState>, SdkError> {
        let st = lock(&self.state);
        let session_gone = match st.channel {
            Channel::Module { sso_id, .. } => !lock(&self.rt.inner.sessions).contains(&sso_id),
            _ => false,
        };
        if st.closed || session_gone {
            return Err(SdkError::ConnectionClosed);
        }
        Ok(st)
    }

    /// A session the store no longer knows (reclaimed after inactivity) ends
    /// the connection; no close frame is owed for it.
    fn data(&self, sso_id: u64, op: DataOp) -> Result<DataReplyBody, SdkError> {
        match self.rt.inner.request(MessageKind::Data, &DataBody { sso_id, op }) {
            Err(SdkError::Store { code, .. }) if code == "InvalidSession" => {
                lock(&self.rt.inner.sessions).remove(&sso_id);
                Err(SdkError::ConnectionClosed)
            }
            other => other,
        }
    }

    pub fn send(&self, payload: &[u8]) -> Result<(), SdkError> {
        let mut st = self.open_state()?;
        if payload.len() > MAX_PAYLOAD {
            return Err(SdkError::FrameTooLarge(payload.len()));
        }
        let st = &mut *st;
        match &mut st.channel {
            Channel::Module { sso_id, behavior } => {
                let sso_id = *sso_id;
                let ops = behavior
                    .on_send(payload.to_vec())
                    .map_err(|e| SdkError::Unsupported(e.to_string()))?;
                for op in ops {
                    let op = match op {
                        DeviceOp::Send(p) => DataOp::Send { payload: p },
                        DeviceOp::Control(verb) => DataOp::Control { verb },
                    };
                    let reply = self.data(sso_id, op)?;
                    st.absorb(reply);
                }
                Ok(())
            }
            Channel::Legacy { stream } | Channel::Accepted { stream, .. } => {
                stream.send(payload).map_err(direct_err)
            }
        }
    }

    /// Sends everything `src` yields as one application payload.
    pub fn send_stream(&self, src: &mut dyn Read) -> Result<usize, SdkError> {
        let mut buf = Vec::new();
        src.read_to_end(&mut buf).map_err(|e| SdkError::Unsupported(format!("stream source: {e}")))?;
        self.send(&buf)?;
        Ok(buf.len())
    }

    /// Next received payload, waiting up to the runtime's deadline.
    pub fn recv(&self) -> Result<Vec<u8>, SdkError> {
        self.recv_within(Duration::from_millis(self.rt.inner.config.recv_deadline_ms))
    }

    pub fn recv_within(&self, deadline: Duration) -> Result<Vec<u8>, SdkError> {
        let start = Instant::now();
        loop {
            {
                let mut st = self.open_state()?;
                if let Some(p) = st.inbox.pop_front() {
                    return Ok(p);
                }
                let st = &mut *st;
                match &mut st.channel {
                    Channel::Module { sso_id, .. } => {
                        let sso_id = *sso_id;
                        let reply = self.data(sso_id, DataOp::Poll)?;
                        st.absorb(reply);
                    }
                    Channel::Legacy { stream } | Channel::Accepted { stream, .. } => {
                        if let Some(p) = stream.try_recv().map_err(direct_err)? {
                            st.dispatch(DsoEvent::IncomingData(p.clone()));
                            st.inbox.push_back(p);
                        }
                    }
                }
                if let Some(p) = st.inbox.pop_front() {
                    return Ok(p);
                }
            }
            if start.elapsed() >= deadline {
                return Err(SdkError::Timeout);
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    /// Invokes a behavior utility such as `undo_send`.
    pub fn control(&self, verb: &str) -> Result<(), SdkError> {
        let mut st = self.open_state()?;
        let Channel::Module { sso_id, behavior } = &st.channel else {
            return Err(SdkError::Unsupported(format!("{verb} on a legacy socket")));
        };
        if !behavior.verbs().contains(&verb) {
            return Err(SdkError::Unsupported(format!("{verb} is not offered by {}", behavior.behavior_id())));
        }
        let sso_id = *sso_id;
        let reply = self.data(sso_id, DataOp::Control { verb: verb.to_string() })?;
        st.absorb(reply);
        Ok(())
    }

    /// Reports a measured value of the module's objective metric. A report
    /// whose smoothed value violates the objective raises one
    /// `ObjectiveViolation` event.
    pub fn report_sample(&self, value: f64) -> Result<SampleReplyBody, SdkError> {
        let mut st = self.open_state()?;
        let sso_id = match st.channel {
            Channel::Module { sso_id, .. } | Channel::Accepted { sso_id, .. } => sso_id,
            Channel::Legacy { .. } => return Err(SdkError::Unsupported("samples on a legacy socket".into())),
        };
        let reply: SampleReplyBody = self.rt.inner.request(MessageKind::Sample, &SampleBody { sso_id, value })?;
        if reply.violation {
            st.dispatch(DsoEvent::ObjectiveViolation { value: Some(reply.ewma), reason: "objective violated".into() });
        }
        Ok(reply)
    }

    pub fn on_event(&self, kind: EventKind, handler: EventHandler) -> Result<(), SdkError> {
        if kind == EventKind::ObjectiveViolation && self.kind == ConnectionKind::LegacySocket {
            return Err(SdkError::Unsupported("legacy sockets have no objective".into()));
        }
        let mut st = self.open_state()?;
        st.handlers.entry(kind).or_default().push(handler);
        Ok(())
    }

    /// Closes the connection; a module socket signals the store so it can
    /// reclaim the session.
    pub fn close(&self) -> Result<(), SdkError> {
        let mut st = self.open_state()?;
        st.closed = true;
        match &mut st.channel {
            Channel::Module { sso_id, .. } => self.rt.inner.close_session(*sso_id),
            Channel::Legacy { stream } | Channel::Accepted { stream, .. } => stream.close(),
        }
        Ok(())
    }
}

fn direct_err(e: DataPlaneError) -> SdkError {
    match e {
        DataPlaneError::Closed => SdkError::ConnectionClosed,
        other => SdkError::ConnectFailed(other.to_string()),
    }
}

pub struct Listener {
    rt: DsoRuntime,
    port: u16,
    listener: Box<dyn DirectListener>,
    session: Option<u64>,
    closed: bool,
}

impl Listener {
    pub fn kind(&self) -> ConnectionKind {
        if self.session.is_some() {
            ConnectionKind::ModuleSocket
        } else {
            ConnectionKind::LegacySocket
        }
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn accept(&mut self) -> Result<Option<Connection>, SdkError> {
        if self.closed {
            return Err(SdkError::ConnectionClosed);
        }
        let Some(stream) = self.listener.accept() else { return Ok(None) };
        let peer = Peer::new("tcp", self.rt.inner.config.device_ip.as_str(), self.port);
        Ok(Some(match self.session {
            Some(sso_id) => Connection::new(&self.rt, peer, Channel::Accepted { sso_id, stream }, ConnectionKind::ModuleSocket),
            None => Connection::new(&self.rt, peer, Channel::Legacy { stream }, ConnectionKind::LegacySocket),
        }))
    }

    pub fn close(&mut self) {
        if std::mem::replace(&mut self.closed, true) {
            return;
        }
        self.listener.close();
        if let Some(id) = self.session {
            self.rt.inner.close_session(id);
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.close();
    }
}
