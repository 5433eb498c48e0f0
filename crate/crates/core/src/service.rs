//! Service endpoints over the wire protocol: the store (registry plus proxy)
//! and network control, the transports that reach them (in-process loopback
//! through real frames, or TCP), and typed clients for the proxy's remote
//! dependencies.

use std::collections::BTreeSet;
use std::io;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::behaviors::NetView;
use crate::dataplane::lock;
use crate::domain::{Entitlement, Millis, ModuleDescriptor, ObjectiveStats};
use crate::netsim::{
    EventType, LinkChange, LinkId, NetError, NetworkEvent, NetworkSim, NodeId, Path, PathConstraints, PathId,
    PathMetrics, Route, SubscriptionId,
};
use crate::proxy::{CloseReason, ModuleDirectory, NetworkControl, StoreProxy};
use crate::registry::{OpOutput, RankQuery, Registry, RegistryError, RegistryOp};
use crate::wire::{
    decode_frame, encode_frame, read_message, write_message, CallBody, CloseSessionBody, DataBody, DecodeError, ErrorBody,
    HelloBody, Message, MessageKind, OpenSessionBody, RemoteError, ReplyBody, SampleBody, SessionClosedBody,
    SubscribeBody, SubscribedBody, ToRequestBody, PROTOCOL_VERSION,
};

/// Source of the current time in milliseconds.
pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

/// Manually advanced clock shared by everything in a scenario.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn new(start: Millis) -> Self {
        Self(Arc::new(AtomicU64::new(start)))
    }

    pub fn set(&self, now: Millis) {
        self.0.store(now, Ordering::SeqCst);
    }

    pub fn advance(&self, by: Millis) -> Millis {
        self.0.fetch_add(by, Ordering::SeqCst) + by
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Millis {
        self.0.load(Ordering::SeqCst)
    }
}

/// Milliseconds elapsed since construction.
#[derive(Debug, Clone)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Millis {
        self.0.elapsed().as_millis() as Millis
    }
}

/// Answers one request message with one response message.
pub trait Handler: Send {
    fn handle(&mut self, msg: &Message) -> Message;
}

pub type SharedHandler = Arc<Mutex<dyn Handler>>;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("endpoint {0} unreachable")]
    Unreachable(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Request/response channel to one service.
pub trait Transport: Send {
    fn request(&mut self, msg: &Message) -> Result<Message, TransportError>;
}

/// In-process transport that still encodes and decodes every frame.
pub struct Loopback {
    handler: SharedHandler,
    frames: Arc<AtomicU64>,
}

impl Loopback {
    pub fn new(handler: SharedHandler) -> Self {
        Self { handler, frames: Arc::new(AtomicU64::new(0)) }
    }

    /// Counts frames sent in both directions.
    pub fn with_counter(handler: SharedHandler, frames: Arc<AtomicU64>) -> Self {
        Self { handler, frames }
    }
}

fn roundtrip(msg: &Message) -> Result<Message, TransportError> {
    let bytes = encode_frame(msg).map_err(|e| TransportError::Protocol(e.to_string()))?;
    match decode_frame(&bytes) {
        Ok((m, rest)) if rest.is_empty() => Ok(m),
        Ok(_) => Err(TransportError::Protocol("trailing bytes".into())),
        Err(DecodeError::NeedMoreBytes) => Err(TransportError::Protocol("truncated frame".into())),
        Err(DecodeError::Protocol(e)) => Err(TransportError::Protocol(e)),
    }
}

impl Transport for Loopback {
    fn request(&mut self, msg: &Message) -> Result<Message, TransportError> {
        let inbound = roundtrip(msg)?;
        let response = lock(&self.handler).handle(&inbound);
        self.frames.fetch_add(2, Ordering::SeqCst);
        roundtrip(&response)
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, TransportError> {
        let unreachable = |e: io::Error| TransportError::Unreachable(format!("{addr}: {e}"));
        let sock = addr
            .to_socket_addrs()
            .map_err(unreachable)?
            .next()
            .ok_or_else(|| TransportError::Unreachable(addr.to_string()))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(unreachable)?;
        stream.set_read_timeout(Some(timeout)).map_err(|e| TransportError::Io(e.to_string()))?;
        stream.set_nodelay(true).ok();
        Ok(Self { stream })
    }
}

impl Transport for TcpTransport {
    fn request(&mut self, msg: &Message) -> Result<Message, TransportError> {
        write_message(&mut self.stream, msg).map_err(|e| TransportError::Io(e.to_string()))?;
        match read_message(&mut self.stream) {
            Ok(Some(m)) => Ok(m),
            Ok(None) => Err(TransportError::Io("connection closed".into())),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => Err(TransportError::Protocol(e.to_string())),
            Err(e) => Err(TransportError::Io(e.to_string())),
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Accepts connections forever, one thread per connection. A malformed
/// frame is answered with a `ProtocolError` and the connection dropped.
pub fn serve_tcp(listener: TcpListener, handler: SharedHandler) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let handler = handler.clone();
        thread::spawn(move || {
            if let Err(e) = serve_connection(stream, handler) {
                log::debug!("connection ended: {e}");
            }
        });
    }
    Ok(())
}

fn serve_connection(mut stream: TcpStream, handler: SharedHandler) -> io::Result<()> {
    stream.set_nodelay(true).ok();
    loop {
        match read_message(&mut stream) {
            Ok(Some(msg)) => {
                let response = lock(&handler).handle(&msg);
                write_message(&mut stream, &response)?;
            }
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                write_message(&mut stream, &Message::error(0, "ProtocolError", e.to_string()))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Transport(TransportError::Unreachable(_)) => "Unreachable",
            ClientError::Transport(TransportError::Io(_)) => "Io",
            ClientError::Transport(TransportError::Protocol(_)) => "ProtocolError",
            ClientError::Remote(r) => &r.code,
        }
    }
}

/// Correlating client over any transport.
pub struct Client {
    transport: Box<dyn Transport>,
    next_id: u64,
}

impl Client {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self { transport, next_id: 1 }
    }

    pub fn request<B: Serialize, T: DeserializeOwned>(&mut self, kind: MessageKind, body: &B) -> Result<T, ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        let response = self.transport.request(&Message::new(kind, id, body))?;
        if response.correlation_id != id && response.kind != MessageKind::Error {
            return Err(TransportError::Protocol(format!("correlation {} for request {id}", response.correlation_id)).into());
        }
        Ok(response.expect_response(kind)?)
    }

    pub fn call<T: DeserializeOwned>(&mut self, method: &str, args: Value) -> Result<T, ClientError> {
        let reply: ReplyBody = self.request(MessageKind::Call, &CallBody { method: method.into(), args })?;
        serde_json::from_value(reply.result)
            .map_err(|e| TransportError::Protocol(format!("bad {method} result: {e}")).into())
    }
}

fn reply_to<T: Serialize>(msg: &Message, result: Result<T, (String, String)>) -> Message {
    match result {
        Ok(body) => msg.reply(&body),
        Err((code, message)) => Message::error(msg.correlation_id, code, message),
    }
}

fn protocol(e: impl ToString) -> (String, String) {
    ("ProtocolError".to_string(), e.to_string())
}

fn body<T: DeserializeOwned>(msg: &Message) -> Result<T, (String, String)> {
    msg.body_as().map_err(protocol)
}

fn args<T: DeserializeOwned>(call: &CallBody) -> Result<T, (String, String)> {
    serde_json::from_value(call.args.clone()).map_err(|e| protocol(format!("bad arguments to {}: {e}", call.method)))
}

fn hello(msg: &Message, role: &str) -> Message {
    match msg.body_as::<HelloBody>() {
        Ok(h) if h.protocol_version == PROTOCOL_VERSION => {
            msg.reply(&HelloBody { protocol_version: PROTOCOL_VERSION, role: role.into() })
        }
        Ok(h) => Message::error(msg.correlation_id, "ProtocolError", format!("unsupported version {}", h.protocol_version)),
        Err(e) => Message::error(msg.correlation_id, "ProtocolError", e.to_string()),
    }
}

fn jv<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

fn registry_err(e: RegistryError) -> (String, String) {
    (e.code().to_string(), e.to_string())
}

#[derive(Deserialize)]
struct KeyArg {
    module_key: String,
}

#[derive(Deserialize)]
struct KeyAtArg {
    module_key: String,
    now: Millis,
}

#[derive(Deserialize)]
struct SampleArg {
    module_key: String,
    attained: bool,
}

/// The Socket Store front: registry downloads and administration plus the
/// proxy's session interface. Either half may be absent.
pub struct StoreService {
    registry: Option<Arc<Mutex<Registry>>>,
    proxy: Option<Arc<Mutex<StoreProxy>>>,
    clock: Arc<dyn Clock>,
}

impl StoreService {
    pub fn new(
        registry: Option<Arc<Mutex<Registry>>>,
        proxy: Option<Arc<Mutex<StoreProxy>>>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self { registry, proxy, clock }
    }

    fn registry(&self) -> Result<std::sync::MutexGuard<'_, Registry>, (String, String)> {
        self.registry.as_ref().map(|r| lock(r)).ok_or(("Unavailable".into(), "no registry here".into()))
    }

    fn proxy(&self) -> Result<std::sync::MutexGuard<'_, StoreProxy>, (String, String)> {
        self.proxy.as_ref().map(|p| lock(p)).ok_or(("Unavailable".into(), "no proxy here".into()))
    }

    fn call(&self, call: &CallBody) -> Result<Value, (String, String)> {
        match call.method.as_str() {
            "execute" => {
                let op: RegistryOp = args(call)?;
                let out = self.registry()?.execute(op).map_err(registry_err)?;
                Ok(match out {
                    OpOutput::None => Value::Null,
                    OpOutput::Entitlement(e) => jv(&e),
                    OpOutput::ModuleKey(k) => Value::String(k),
                    OpOutput::Stats(s) => jv(&s),
                })
            }
            "browse" => Ok(jv(&self.registry()?.browse(&args::<RankQuery>(call)?))),
            "rank" => Ok(jv(&self.registry()?.rank_modules(&args::<RankQuery>(call)?))),
            "entry" => {
                let a: KeyArg = args(call)?;
                Ok(jv(&self.registry()?.entry(&a.module_key).cloned()))
            }
            "stats" => {
                let a: KeyArg = args(call)?;
                Ok(jv(&self.registry()?.stats(&a.module_key)))
            }
            "disposal_blocker" => {
                let a: KeyAtArg = args(call)?;
                Ok(jv(&self.registry()?.disposal_blocker(&a.module_key, a.now).map(|b| b.reason())))
            }
            "served_module" => {
                let a: KeyArg = args(call)?;
                Ok(jv(&self.registry()?.served_module(&a.module_key).cloned()))
            }
            "verify" => {
                let ent: Entitlement = args(call)?;
                Ok(Value::Bool(self.registry()?.verify(&ent)))
            }
            "record_sample" => {
                let a: SampleArg = args(call)?;
                Ok(jv(&self.registry()?.record_sample(&a.module_key, a.attained).map_err(registry_err)?))
            }
            "sweep" => {
                let now = self.clock.now();
                let swept = self.proxy()?.sweep_timeouts(now);
                Ok(json!(swept.len()))
            }
            "proxy_counters" => Ok(jv(&self.proxy()?.counters())),
            other => Err(("UnknownMethod".into(), other.to_string())),
        }
    }
}

impl Handler for StoreService {
    fn handle(&mut self, msg: &Message) -> Message {
        let now = self.clock.now();
        match msg.kind {
            MessageKind::Hello => hello(msg, "store"),
            MessageKind::ToRequest => reply_to(
                msg,
                body::<ToRequestBody>(msg).and_then(|b| {
                    self.registry()?.fetch_to(&b.entitlement, &b.module_key, b.cached_version).map_err(registry_err)
                }),
            ),
            MessageKind::OpenSession => reply_to(
                msg,
                body::<OpenSessionBody>(msg).and_then(|b| {
                    self.proxy()?.open_session(&b, now).map_err(|e| (e.code().to_string(), e.to_string()))
                }),
            ),
            MessageKind::Data => reply_to(
                msg,
                body::<DataBody>(msg).and_then(|b| {
                    self.proxy()?.data(b.sso_id, b.op, now).map_err(|e| (e.code().to_string(), e.to_string()))
                }),
            ),
            MessageKind::CloseSession => reply_to(
                msg,
                body::<CloseSessionBody>(msg).and_then(|b| {
                    let outcome = self
                        .proxy()?
                        .close_session(b.sso_id, CloseReason::Explicit, now)
                        .map_err(|e| (e.code().to_string(), e.to_string()))?;
                    Ok(SessionClosedBody { sso_id: b.sso_id, outcome })
                }),
            ),
            MessageKind::Sample => reply_to(
                msg,
                body::<SampleBody>(msg).and_then(|b| {
                    self.proxy()?.record_sample(b.sso_id, b.value, now).map_err(|e| (e.code().to_string(), e.to_string()))
                }),
            ),
            MessageKind::Call => reply_to(
                msg,
                body::<CallBody>(msg).and_then(|c| self.call(&c)).map(|result| ReplyBody { result }),
            ),
            other => Message::error(msg.correlation_id, "ProtocolError", format!("store does not accept {other}")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RouteArgs {
    src: NodeId,
    dst: NodeId,
    #[serde(default)]
    constraints: PathConstraints,
}

#[derive(Serialize, Deserialize)]
struct AllocateArgs {
    owner: String,
    src: NodeId,
    dst: NodeId,
    #[serde(default)]
    constraints: PathConstraints,
}

#[derive(Serialize, Deserialize)]
struct AllocateRouteArgs {
    owner: String,
    route: Route,
}

#[derive(Serialize, Deserialize)]
struct LinkArgs {
    link_id: LinkId,
    change: LinkChange,
}

fn net_err(e: NetError) -> (String, String) {
    (e.code().to_string(), e.to_string())
}

/// Answers with `first`, passing requests it reports `Unavailable` for on to
/// another service. A proxy-only store uses this to reach the registry.
pub struct Forwarding {
    first: SharedHandler,
    then: Box<dyn Transport>,
}

impl Forwarding {
    pub fn new(first: SharedHandler, then: Box<dyn Transport>) -> Self {
        Self { first, then }
    }
}

impl Handler for Forwarding {
    fn handle(&mut self, msg: &Message) -> Message {
        let response = lock(&self.first).handle(msg);
        let unavailable = response.kind == MessageKind::Error
            && response.body_as::<ErrorBody>().is_ok_and(|b| b.code == "Unavailable");
        if !unavailable {
            return response;
        }
        self.then
            .request(msg)
            .unwrap_or_else(|e| Message::error(msg.correlation_id, "Unavailable", e.to_string()))
    }
}

/// Network control over the wire.
pub struct NetService {
    net: Arc<Mutex<NetworkSim>>,
}

impl NetService {
    pub fn new(net: Arc<Mutex<NetworkSim>>) -> Self {
        Self { net }
    }

    fn call(&self, call: &CallBody) -> Result<Value, (String, String)> {
        let mut net = lock(&self.net);
        match call.method.as_str() {
            "resolve_host" => {
                let ip: String = args(call)?;
                Ok(jv(&net.resolve_host(&ip)))
            }
            "find_route" => {
                let a: RouteArgs = args(call)?;
                Ok(jv(&net.find_route(&a.src, &a.dst, &a.constraints).map_err(net_err)?))
            }
            "find_disjoint_pair" => {
                let a: RouteArgs = args(call)?;
                Ok(jv(&net.find_disjoint_pair(&a.src, &a.dst, &a.constraints).map_err(net_err)?))
            }
            "path_metrics" => {
                let p: Path = args(call)?;
                Ok(jv(&net.path_metrics(&p).map_err(net_err)?))
            }
            "path_is_up" => {
                let p: Path = args(call)?;
                Ok(Value::Bool(net.path_is_up(&p)))
            }
            "allocate_path" => {
                let a: AllocateArgs = args(call)?;
                Ok(jv(&net.allocate_path(&a.owner, &a.src, &a.dst, &a.constraints).map_err(net_err)?))
            }
            "allocate_route" => {
                let a: AllocateRouteArgs = args(call)?;
                Ok(jv(&net.allocate_route(&a.owner, &a.route).map_err(net_err)?))
            }
            "release_path" => {
                let id: PathId = args(call)?;
                net.release_path(id).map_err(net_err)?;
                Ok(Value::Null)
            }
            "unsubscribe" => {
                let id: SubscriptionId = args(call)?;
                Ok(Value::Bool(net.unsubscribe(id)))
            }
            "take_events" => {
                let id: SubscriptionId = args(call)?;
                Ok(jv(&net.take_events(id)))
            }
            "set_link_state" => {
                let a: LinkArgs = args(call)?;
                Ok(jv(&net.set_link_state(&a.link_id, a.change).map_err(net_err)?.map(|p| p.event)))
            }
            "allocations" => Ok(jv(&net.allocations().cloned().collect::<Vec<_>>())),
            other => Err(("UnknownMethod".into(), other.to_string())),
        }
    }
}

impl Handler for NetService {
    fn handle(&mut self, msg: &Message) -> Message {
        match msg.kind {
            MessageKind::Hello => hello(msg, "netsim"),
            MessageKind::Subscribe => reply_to(
                msg,
                body::<SubscribeBody>(msg).map(|b| {
                    let links = b.links.map(|l| l.into_iter().collect::<BTreeSet<_>>());
                    SubscribedBody { subscription_id: lock(&self.net).subscribe(&b.subscriber, b.event_types, links) }
                }),
            ),
            MessageKind::Call => reply_to(
                msg,
                body::<CallBody>(msg).and_then(|c| self.call(&c)).map(|result| ReplyBody { result }),
            ),
            other => Message::error(msg.correlation_id, "ProtocolError", format!("netsim does not accept {other}")),
        }
    }
}

/// Network control reached through a [`Client`].
pub struct RemoteNet {
    client: Mutex<Client>,
}

impl RemoteNet {
    pub fn new(client: Client) -> Self {
        Self { client: Mutex::new(client) }
    }

    fn call<T: DeserializeOwned>(&self, method: &str, args: Value) -> Result<T, NetError> {
        lock(&self.client).call(method, args).map_err(|e| NetError::Remote { code: e.code().to_string(), message: e.to_string() })
    }

    fn route_args(src: &str, dst: &str, c: &PathConstraints) -> Value {
        json!(RouteArgs { src: src.into(), dst: dst.into(), constraints: c.clone() })
    }
}

impl NetView for RemoteNet {
    fn find_route(&self, src: &str, dst: &str, c: &PathConstraints) -> Result<Route, NetError> {
        self.call("find_route", Self::route_args(src, dst, c))
    }
    fn find_disjoint_pair(&self, src: &str, dst: &str, c: &PathConstraints) -> Result<(Route, Route), NetError> {
        self.call("find_disjoint_pair", Self::route_args(src, dst, c))
    }
    fn path_metrics(&self, path: &Path) -> Result<PathMetrics, NetError> {
        self.call("path_metrics", json!(path))
    }
    fn path_is_up(&self, path: &Path) -> bool {
        self.call("path_is_up", json!(path)).unwrap_or(false)
    }
}

impl NetworkControl for RemoteNet {
    fn resolve_host(&self, ip: &str) -> Option<NodeId> {
        self.call("resolve_host", json!(ip)).ok().flatten()
    }
    fn allocate_path(&mut self, owner: &str, src: &str, dst: &str, c: &PathConstraints) -> Result<Path, NetError> {
        self.call(
            "allocate_path",
            json!(AllocateArgs { owner: owner.into(), src: src.into(), dst: dst.into(), constraints: c.clone() }),
        )
    }
    fn allocate_route(&mut self, owner: &str, route: &Route) -> Result<Path, NetError> {
        self.call("allocate_route", json!(AllocateRouteArgs { owner: owner.into(), route: route.clone() }))
    }
    fn release_path(&mut self, path_id: PathId) -> Result<(), NetError> {
        self.call::<Value>("release_path", json!(path_id)).map(|_| ())
    }
    fn subscribe(
        &mut self,
        subscriber: &str,
        types: &[EventType],
        links: Option<BTreeSet<LinkId>>,
    ) -> Result<SubscriptionId, NetError> {
        let body = SubscribeBody {
            subscriber: subscriber.into(),
            event_types: types.to_vec(),
            links: links.map(|l| l.into_iter().collect()),
        };
        lock(&self.client)
            .request::<_, SubscribedBody>(MessageKind::Subscribe, &body)
            .map(|s| s.subscription_id)
            .map_err(|e| NetError::Remote { code: e.code().to_string(), message: e.to_string() })
    }
    fn unsubscribe(&mut self, id: SubscriptionId) -> bool {
        self.call("unsubscribe", json!(id)).unwrap_or(false)
    }
    fn take_events(&mut self, id: SubscriptionId) -> Vec<NetworkEvent> {
        self.call("take_events", json!(id)).unwrap_or_default()
    }
}

/// Registry reached through a [`Client`].
pub struct RemoteDirectory {
    client: Mutex<Client>,
}

impl RemoteDirectory {
    pub fn new(client: Client) -> Self {
        Self { client: Mutex::new(client) }
    }
}

impl ModuleDirectory for RemoteDirectory {
    fn verify(&self, ent: &Entitlement) -> bool {
        lock(&self.client).call("verify", json!(ent)).unwrap_or(false)
    }
    fn served_module(&self, module_key: &str) -> Option<ModuleDescriptor> {
        lock(&self.client).call("served_module", json!({ "module_key": module_key })).ok().flatten()
    }
    fn record_sample(&mut self, module_key: &str, attained: bool) -> Result<ObjectiveStats, String> {
        lock(&self.client)
            .call("record_sample", json!({ "module_key": module_key, "attained": attained }))
            .map_err(|e| e.to_string())
    }
}
