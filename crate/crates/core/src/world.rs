//! An in-process deployment: registry, proxy, network control and data plane
//! on one virtual clock, with devices reaching the store through loopback
//! transports that encode real frames.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::behaviors::device::DeviceBehaviors;
use crate::behaviors::manifest::BehaviorManifest;
use crate::dataplane::{lock, EndpointKind, SharedPlane, SimDataPlane};
use crate::domain::{Entitlement, Millis};
use crate::catalog;
use crate::netsim::{parse_topology, LinkChange, NetError, NetworkEvent, NetworkSim, NodeId, Topology};
use crate::proxy::{PoolPolicy, SsoId, StoreProxy};
use crate::registry::{Registry, RegistryConfig};
use crate::sdk::{Connector, DsoConfig, DsoRuntime, SdkError};
use crate::service::{Clock, Handler, Loopback, SharedHandler, StoreService, Transport, TransportError, VirtualClock};
use crate::wire::{CloseOutcome, Message, MessageKind, ToResponse};

pub const STORE_ENDPOINT: &str = "store.local";

/// Hosts of the demo world: a device on A and a server on C.
pub const DEVICE_IP: &str = "10.0.0.1";
pub const RELAY_IP: &str = "10.0.0.2";
pub const SERVER_IP: &str = "10.0.0.3";
pub const ECHO_PORT: u16 = 7;
pub const SINK_PORT: u16 = 9;

const TRIANGLE: &str = include_str!("../scenarios/topologies/triangle.json");

/// Links AB 10 ms, BC 5 ms, AC 20 ms.
pub fn triangle() -> Topology {
    parse_topology(TRIANGLE).expect("bundled topology parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostSpec {
    pub ip: String,
    pub node: NodeId,
    /// Echo/sink endpoints served on this host.
    #[serde(default)]
    pub endpoints: BTreeMap<u16, EndpointKind>,
}

struct Endpoints {
    handlers: BTreeMap<String, SharedHandler>,
    down: BTreeSet<String>,
}

pub struct World {
    pub clock: VirtualClock,
    pub registry: Arc<Mutex<Registry>>,
    pub net: Arc<Mutex<NetworkSim>>,
    pub plane: SharedPlane,
    pub proxy: Arc<Mutex<StoreProxy>>,
    endpoints: Arc<Mutex<Endpoints>>,
    frames: Arc<AtomicU64>,
}

impl World {
    pub fn new(topology: Topology, policy: PoolPolicy, registry: RegistryConfig) -> Self {
        let clock = VirtualClock::new(0);
        let registry = Arc::new(Mutex::new(Registry::new(registry, BehaviorManifest::builtin())));
        let net = Arc::new(Mutex::new(NetworkSim::new(topology)));
        let plane: SharedPlane = Arc::new(Mutex::new(SimDataPlane::new()));
        let proxy = Arc::new(Mutex::new(StoreProxy::new(
            policy,
            Box::new(net.clone()),
            Box::new(registry.clone()),
            Box::new(plane.clone()),
        )));
        let store: SharedHandler =
            Arc::new(Mutex::new(StoreService::new(Some(registry.clone()), Some(proxy.clone()), Arc::new(clock.clone()))));
        let mut handlers = BTreeMap::new();
        handlers.insert(STORE_ENDPOINT.to_string(), store);
        Self {
            clock,
            registry,
            net,
            plane,
            proxy,
            endpoints: Arc::new(Mutex::new(Endpoints { handlers, down: BTreeSet::new() })),
            frames: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Triangle topology, device on A, echo and sink server on C, echo relay
    /// on B, every reference module published.
    pub fn demo() -> Self {
        let w = Self::new(triangle(), PoolPolicy::default(), RegistryConfig::default());
        let echo_sink = BTreeMap::from([(ECHO_PORT, EndpointKind::Echo), (SINK_PORT, EndpointKind::Sink)]);
        let hosts = [
            HostSpec { ip: DEVICE_IP.into(), node: "A".into(), endpoints: BTreeMap::new() },
            HostSpec { ip: RELAY_IP.into(), node: "B".into(), endpoints: BTreeMap::from([(ECHO_PORT, EndpointKind::Echo)]) },
            HostSpec { ip: SERVER_IP.into(), node: "C".into(), endpoints: echo_sink },
        ];
        for h in &hosts {
            w.add_host(h).expect("demo hosts attach");
        }
        catalog::publish_all(&mut lock(&w.registry), 0).expect("reference modules publish");
        w
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn add_host(&self, host: &HostSpec) -> Result<(), String> {
        lock(&self.net).attach_host(host.ip.as_str(), host.node.as_str()).map_err(|e| e.to_string())?;
        let mut plane = lock(&self.plane);
        for (port, kind) in &host.endpoints {
            plane.add_endpoint(&host.ip, *port, *kind).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Takes a store endpoint off the network (or brings it back). Open
    /// transports to it fail while it is down.
    pub fn set_endpoint_down(&self, endpoint: &str, down: bool) {
        let mut eps = lock(&self.endpoints);
        if down {
            eps.down.insert(endpoint.to_string());
        } else {
            eps.down.remove(endpoint);
        }
    }

    /// Replaces the handler behind an endpoint, e.g. with a fault injector.
    pub fn wrap_endpoint(&self, endpoint: &str, wrap: impl FnOnce(SharedHandler) -> SharedHandler) {
        let mut eps = lock(&self.endpoints);
        if let Some(h) = eps.handlers.remove(endpoint) {
            eps.handlers.insert(endpoint.to_string(), wrap(h));
        }
    }

    pub fn connector(&self) -> Box<dyn Connector> {
        Box::new(WorldConnector { endpoints: self.endpoints.clone(), frames: self.frames.clone() })
    }

    /// Frames exchanged with store endpoints so far, both directions.
    pub fn frames(&self) -> u64 {
        self.frames.load(Ordering::SeqCst)
    }

    pub fn purchase(&self, app_id: &str, module_key: &str) -> Result<Entitlement, String> {
        lock(&self.registry).purchase(app_id, module_key, None, self.now()).map_err(|e| e.to_string())
    }

    pub fn device(
        &self,
        app_id: &str,
        ip: &str,
        cache_dir: &Path,
        entitlements: Vec<Entitlement>,
    ) -> Result<DsoRuntime, SdkError> {
        self.device_with(
            DsoConfig {
                app_id: app_id.into(),
                device_ip: ip.into(),
                store_endpoints: vec![STORE_ENDPOINT.into()],
                entitlements,
                cache_dir: cache_dir.to_path_buf(),
                recv_deadline_ms: 50,
            },
            DeviceBehaviors::builtin(),
        )
    }

    pub fn device_with(&self, config: DsoConfig, behaviors: DeviceBehaviors) -> Result<DsoRuntime, SdkError> {
        DsoRuntime::init(config, self.connector(), Box::new(self.plane.clone()), behaviors)
    }

    /// Advances virtual time and runs the proxy's timeout sweep.
    pub fn advance(&self, by: Millis) -> Vec<(SsoId, CloseOutcome)> {
        let now = self.clock.advance(by);
        lock(&self.proxy).sweep_timeouts(now)
    }

    /// Mutates a link and lets the proxy dispatch the resulting event.
    pub fn set_link(&self, link_id: &str, change: LinkChange) -> Result<Vec<(NetworkEvent, Vec<SsoId>)>, NetError> {
        lock(&self.net).set_link_state(link_id, change)?;
        Ok(lock(&self.proxy).pump_events(self.now()))
    }

    pub fn allocations(&self) -> usize {
        lock(&self.net).allocation_count()
    }

    pub fn subscription_count(&self) -> usize {
        lock(&self.net).subscription_count()
    }
}

struct WorldConnector {
    endpoints: Arc<Mutex<Endpoints>>,
    frames: Arc<AtomicU64>,
}

impl Connector for WorldConnector {
    fn connect(&self, endpoint: &str) -> Result<Box<dyn Transport>, TransportError> {
        let eps = lock(&self.endpoints);
        if eps.down.contains(endpoint) || !eps.handlers.contains_key(endpoint) {
            return Err(TransportError::Unreachable(endpoint.to_string()));
        }
        Ok(Box::new(WorldTransport {
            name: endpoint.to_string(),
            endpoints: self.endpoints.clone(),
            frames: self.frames.clone(),
        }))
    }
}

/// Loopback to whatever handler currently serves the endpoint.
struct WorldTransport {
    name: String,
    endpoints: Arc<Mutex<Endpoints>>,
    frames: Arc<AtomicU64>,
}

impl Transport for WorldTransport {
    fn request(&mut self, msg: &Message) -> Result<Message, TransportError> {
        let handler = {
            let eps = lock(&self.endpoints);
            if eps.down.contains(&self.name) {
                return Err(TransportError::Unreachable(self.name.clone()));
            }
            eps.handlers.get(&self.name).cloned().ok_or_else(|| TransportError::Unreachable(self.name.clone()))?
        };
        Loopback::with_counter(handler, self.frames.clone()).request(msg)
    }
}

/// Fault injector: damages the checksum of every TO the store hands out.
pub struct TamperTo(pub SharedHandler);

impl Handler for TamperTo {
    fn handle(&mut self, msg: &Message) -> Message {
        let mut response = lock(&self.0).handle(msg);
        if response.kind == MessageKind::ToResponse {
            if let Ok(ToResponse::NewTo { mut to }) = response.body_as::<ToResponse>() {
                to.checksum = "0".repeat(64);
                response = Message::new(MessageKind::ToResponse, response.correlation_id, &ToResponse::NewTo { to });
            }
        }
        response
    }
}
