//! The store proxy: hosts network-side module instances (SSOs), decides
//! between pooling and destroying released instances by popularity, sweeps
//! idle sessions, dispatches network events to affected instances and feeds
//! performance samples back to the registry.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::behaviors::composed::PARTS_PARAM;
use crate::behaviors::{
    Action, DataInput, DelegateRequest, HookContext, HookError, HookResult, NetView, NetworkBehaviors, SsoLogic,
    COMPOSED, DEFAULT_FORWARD,
};
use crate::dataplane::{lock, DataPlane};
use crate::domain::{
    module_key_of, Entitlement, Lifecycle, Metric, Millis, ModuleDescriptor, ObjectiveStats, ParameterSet,
    PerformanceObjective,
};
use crate::netsim::{
    EventType, LinkId, NetError, NetworkEvent, NetworkSim, NodeId, Path, PathConstraints, PathId, Route,
    SubscriptionId,
};
use crate::registry::Registry;
use crate::wire::{CloseOutcome, DataOp, DataReplyBody, Notification, OpenSessionBody, Peer, SampleReplyBody, SessionOpenedBody};

pub type SsoId = u64;

/// EWMA smoothing factor for per-instance samples.
pub const EWMA_ALPHA: f64 = 0.2;

/// Registry services the proxy depends on.
pub trait ModuleDirectory: Send {
    fn verify(&self, ent: &Entitlement) -> bool;
    /// The descriptor new sessions are served from; `None` when unknown,
    /// never accepted, or disposed.
    fn served_module(&self, module_key: &str) -> Option<ModuleDescriptor>;
    fn record_sample(&mut self, module_key: &str, attained: bool) -> Result<ObjectiveStats, String>;
}

impl ModuleDirectory for Registry {
    fn verify(&self, ent: &Entitlement) -> bool {
        Registry::verify(self, ent)
    }
    fn served_module(&self, module_key: &str) -> Option<ModuleDescriptor> {
        Registry::served_module(self, module_key).cloned()
    }
    fn record_sample(&mut self, module_key: &str, attained: bool) -> Result<ObjectiveStats, String> {
        Registry::record_sample(self, module_key, attained).map_err(|e| e.to_string())
    }
}

impl<T: ModuleDirectory> ModuleDirectory for Arc<Mutex<T>> {
    fn verify(&self, ent: &Entitlement) -> bool {
        lock(self).verify(ent)
    }
    fn served_module(&self, module_key: &str) -> Option<ModuleDescriptor> {
        lock(self).served_module(module_key)
    }
    fn record_sample(&mut self, module_key: &str, attained: bool) -> Result<ObjectiveStats, String> {
        lock(self).record_sample(module_key, attained)
    }
}

/// Network Control services the proxy depends on.
pub trait NetworkControl: NetView + Send {
    fn resolve_host(&self, ip: &str) -> Option<NodeId>;
    fn allocate_path(&mut self, owner: &str, src: &str, dst: &str, c: &PathConstraints) -> Result<Path, NetError>;
    fn allocate_route(&mut self, owner: &str, route: &Route) -> Result<Path, NetError>;
    fn release_path(&mut self, path_id: PathId) -> Result<(), NetError>;
    fn subscribe(
        &mut self,
        subscriber: &str,
        types: &[EventType],
        links: Option<BTreeSet<LinkId>>,
    ) -> Result<SubscriptionId, NetError>;
    fn unsubscribe(&mut self, id: SubscriptionId) -> bool;
    fn take_events(&mut self, id: SubscriptionId) -> Vec<NetworkEvent>;
}

impl NetworkControl for NetworkSim {
    fn resolve_host(&self, ip: &str) -> Option<NodeId> {
        NetworkSim::resolve_host(self, ip)
    }
    fn allocate_path(&mut self, owner: &str, src: &str, dst: &str, c: &PathConstraints) -> Result<Path, NetError> {
        NetworkSim::allocate_path(self, owner, src, dst, c)
    }
    fn allocate_route(&mut self, owner: &str, route: &Route) -> Result<Path, NetError> {
        NetworkSim::allocate_route(self, owner, route)
    }
    fn release_path(&mut self, path_id: PathId) -> Result<(), NetError> {
        NetworkSim::release_path(self, path_id)
    }
    fn subscribe(
        &mut self,
        subscriber: &str,
        types: &[EventType],
        links: Option<BTreeSet<LinkId>>,
    ) -> Result<SubscriptionId, NetError> {
        Ok(NetworkSim::subscribe(self, subscriber, types.iter().copied(), links))
    }
    fn unsubscribe(&mut self, id: SubscriptionId) -> bool {
        NetworkSim::unsubscribe(self, id)
    }
    fn take_events(&mut self, id: SubscriptionId) -> Vec<NetworkEvent> {
        NetworkSim::take_events(self, id)
    }
}

impl<T: NetView + Send> NetView for Arc<Mutex<T>> {
    fn find_route(&self, src: &str, dst: &str, c: &PathConstraints) -> Result<Route, NetError> {
        lock(self).find_route(src, dst, c)
    }
    fn find_disjoint_pair(&self, src: &str, dst: &str, c: &PathConstraints) -> Result<(Route, Route), NetError> {
        lock(self).find_disjoint_pair(src, dst, c)
    }
    fn path_metrics(&self, path: &Path) -> Result<crate::netsim::PathMetrics, NetError> {
        lock(self).path_metrics(path)
    }
    fn path_is_up(&self, path: &Path) -> bool {
        lock(self).path_is_up(path)
    }
}

impl<T: NetworkControl> NetworkControl for Arc<Mutex<T>> {
    fn resolve_host(&self, ip: &str) -> Option<NodeId> {
        lock(self).resolve_host(ip)
    }
    fn allocate_path(&mut self, owner: &str, src: &str, dst: &str, c: &PathConstraints) -> Result<Path, NetError> {
        lock(self).allocate_path(owner, src, dst, c)
    }
    fn allocate_route(&mut self, owner: &str, route: &Route) -> Result<Path, NetError> {
        lock(self).allocate_route(owner, route)
    }
    fn release_path(&mut self, path_id: PathId) -> Result<(), NetError> {
        lock(self).release_path(path_id)
    }
    fn subscribe(
        &mut self,
        subscriber: &str,
        types: &[EventType],
        links: Option<BTreeSet<LinkId>>,
    ) -> Result<SubscriptionId, NetError> {
        lock(self).subscribe(subscriber, types, links)
    }
    fn unsubscribe(&mut self, id: SubscriptionId) -> bool {
        lock(self).unsubscribe(id)
    }
    fn take_events(&mut self, id: SubscriptionId) -> Vec<NetworkEvent> {
        lock(self).take_events(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolPolicy {
    pub window_ms: Millis,
    /// Opens per window at or above which a released instance is pooled.
    pub reuse_threshold: usize,
    pub inactivity_timeout_ms: Millis,
}

impl Default for PoolPolicy {
    fn default() -> Self {
        Self { window_ms: 60_000, reuse_threshold: 3, inactivity_timeout_ms: 30_000 }
    }
}

impl PoolPolicy {
    pub fn is_valid(&self) -> bool {
        self.window_ms > 0 && self.reuse_threshold > 0 && self.inactivity_timeout_ms > 0
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProxyError {
    #[error("entitlement does not verify")]
    Unauthorized,
    #[error("module {0} is not being served")]
    NotServed(String),
    #[error("unknown parameterization {0}")]
    UnknownParameterization(String),
    #[error("unknown host {0}")]
    UnknownHost(String),
    #[error("allocation failed: {0}")]
    AllocationFailed(String),
    #[error("invalid session {0}")]
    InvalidSession(SsoId),
    #[error("delegation refused: {0}")]
    DelegationRefused(String),
    #[error("behavior error: {0}")]
    Behavior(HookError),
    #[error("directory: {0}")]
    Directory(String),
}

impl ProxyError {
    pub fn code(&self) -> &'static str {
        match self {
            ProxyError::Unauthorized => "Unauthorized",
            ProxyError::NotServed(_) => "NotFound",
            ProxyError::UnknownParameterization(_) => "UnknownParameterization",
            ProxyError::UnknownHost(_) => "UnknownHost",
            ProxyError::AllocationFailed(_) => "AllocationFailed",
            ProxyError::InvalidSession(_) => "InvalidSession",
            ProxyError::DelegationRefused(_) => "DelegationRefused",
            ProxyError::Behavior(e) => e.code(),
            ProxyError::Directory(_) => "Directory",
        }
    }
}

impl From<HookError> for ProxyError {
    fn from(e: HookError) -> Self {
        match e {
            HookError::AllocationFailed(m) => ProxyError::AllocationFailed(m),
            other => ProxyError::Behavior(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsoStatus {
    Active,
    Pooled,
    Destroyed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    Explicit,
    Timeout,
    /// Torn down because its composing parent was.
    Parent,
}

/// One store-side module instance.
pub struct SsoInstance {
    pub sso_id: SsoId,
    pub module_key: String,
    pub module_id: String,
    pub behavior_id: String,
    constants: ParameterSet,
    pub objective: PerformanceObjective,
    logic: Option<Box<dyn SsoLogic>>,
    pub src_ip: String,
    pub src_node: NodeId,
    pub dst: Peer,
    pub dst_node: NodeId,
    pub pool: BTreeMap<String, Path>,
    pub subscriptions: Vec<SubscriptionId>,
    pub last_active: Millis,
    pub status: SsoStatus,
    /// Composing parent and this instance's part index.
    pub parent: Option<(SsoId, usize)>,
    pub composed_of: Vec<String>,
    pub children: BTreeMap<usize, SsoId>,
    pub ewma: Option<f64>,
    /// Raw (value, attained) sample log.
    pub samples: Vec<(f64, bool)>,
    inbound: VecDeque<Vec<u8>>,
    notifications: Vec<Notification>,
    deferred: Vec<NetworkEvent>,
}

impl SsoInstance {
    pub fn constants(&self) -> &ParameterSet {
        &self.constants
    }

    pub fn variables(&self) -> Value {
        self.logic.as_ref().map_or(Value::Null, |l| l.variables())
    }

    pub fn links(&self) -> BTreeSet<&str> {
        self.pool.values().flat_map(|p| p.links.iter().map(String::as_str)).collect()
    }

    pub fn deferred(&self) -> &[NetworkEvent] {
        &self.deferred
    }

    fn owner(&self) -> String {
        owner_tag(self.sso_id)
    }
}

/// Owner string under which an instance's paths are registered.
pub fn owner_tag(id: SsoId) -> String {
    format!("sso:{id}")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyCounters {
    pub opens: u64,
    pub constructions: u64,
    pub reactivations: u64,
    pub pooled: u64,
    pub destructions: u64,
    pub handler_runs: u64,
    pub handler_errors: u64,
    pub deferred_events: u64,
    pub forwards: u64,
    pub drops: u64,
    pub delegations: u64,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ProxyEvent {
    Constructed { sso_id: SsoId, module_key: String, module_id: String, parent: Option<SsoId> },
    Reactivated { sso_id: SsoId },
    Pooled { sso_id: SsoId, reason: CloseReason },
    Destroyed { sso_id: SsoId, reason: CloseReason },
    Allocated { sso_id: SsoId, role: String, path_id: PathId, nodes: Vec<NodeId> },
    Released { sso_id: SsoId, role: String, path_id: PathId },
    HandlerRan { sso_id: SsoId, seq: u64 },
    HandlerDeferred { sso_id: SsoId, seq: u64 },
    HandlerReplayed { sso_id: SsoId, seq: u64 },
    HandlerError { sso_id: SsoId, error: String },
    Forwarded { sso_id: SsoId, via: SsoId, path_id: PathId, bytes: usize },
    Dropped { sso_id: SsoId, reason: String, bytes: usize },
    Buffered { sso_id: SsoId, key: String, bytes: usize },
    Delegated { sso_id: SsoId, part: usize, part_module_key: String, child: SsoId, op: String },
    Sample { sso_id: SsoId, value: f64, attained: bool, ewma: f64 },
    Notified { sso_id: SsoId, reason: String },
    Note { sso_id: SsoId, what: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: Millis,
    #[serde(flatten)]
    pub event: ProxyEvent,
}

pub struct StoreProxy {
    policy: PoolPolicy,
    net: Box<dyn NetworkControl>,
    dir: Box<dyn ModuleDirectory>,
    data: Box<dyn DataPlane>,
    behaviors: NetworkBehaviors,
    instances: BTreeMap<SsoId, SsoInstance>,
    next_id: SsoId,
    opens: BTreeMap<(String, String), VecDeque<Millis>>,
    counters: ProxyCounters,
    trace: Vec<TraceRecord>,
    last_seq: u64,
    now: Millis,
    /// Control-verb delegations accepted/declined during the current data op.
    control_tally: (u32, u32),
}

impl StoreProxy {
    pub fn new(
        policy: PoolPolicy,
        net: Box<dyn NetworkControl>,
        dir: Box<dyn ModuleDirectory>,
        data: Box<dyn DataPlane>,
    ) -> Self {
        Self {
            policy,
            net,
            dir,
            data,
            behaviors: NetworkBehaviors::builtin(),
            instances: BTreeMap::new(),
            next_id: 1,
            opens: BTreeMap::new(),
            counters: ProxyCounters::default(),
            trace: Vec::new(),
            last_seq: 0,
            now: 0,
            control_tally: (0, 0),
        }
    }

    pub fn with_behaviors(mut self, behaviors: NetworkBehaviors) -> Self {
        self.behaviors = behaviors;
        self
    }

    pub fn policy(&self) -> &PoolPolicy {
        &self.policy
    }

    pub fn counters(&self) -> ProxyCounters {
        self.counters
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn instance(&self, id: SsoId) -> Option<&SsoInstance> {
        self.instances.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &SsoInstance> {
        self.instances.values()
    }

    /// Device-facing sessions currently open.
    pub fn active_sessions(&self) -> usize {
        self.instances.values().filter(|i| i.parent.is_none() && i.status == SsoStatus::Active).count()
    }

    /// Paths held by instances that are not destroyed.
    pub fn held_paths(&self) -> usize {
        self.instances.values().filter(|i| i.status != SsoStatus::Destroyed).map(|i| i.pool.len()).sum()
    }

    fn record(&mut self, event: ProxyEvent) {
        log::debug!("{event:?}");
        self.trace.push(TraceRecord { at: self.now, event });
    }

    fn tick(&mut self, now: Millis) {
        self.now = self.now.max(now);
    }

    // ---- sessions ----

    pub fn open_session(&mut self, req: &OpenSessionBody, now: Millis) -> Result<SessionOpenedBody, ProxyError> {
        self.tick(now);
        if req.entitlement.module_key != req.module_key || !self.dir.verify(&req.entitlement) {
            return Err(ProxyError::Unauthorized);
        }
        let desc = self.dir.served_module(&req.module_key).ok_or_else(|| ProxyError::NotServed(req.module_key.clone()))?;
        if !matches!(desc.lifecycle, Lifecycle::Published | Lifecycle::Deprecated) {
            return Err(ProxyError::NotServed(req.module_key.clone()));
        }
        if module_key_of(&req.module_id) != Some(req.module_key.as_str())
            || !desc.parameterizations.contains_key(&req.module_id)
        {
            return Err(ProxyError::UnknownParameterization(req.module_id.clone()));
        }
        let src_node = self.net.resolve_host(&req.src_ip).ok_or_else(|| ProxyError::UnknownHost(req.src_ip.clone()))?;
        let dst_node = self.net.resolve_host(&req.dst.ip).ok_or_else(|| ProxyError::UnknownHost(req.dst.ip.clone()))?;

        let key = (req.module_key.clone(), req.module_id.clone());
        self.opens.entry(key).or_default().push_back(now);
        self.counters.opens += 1;

        let pooled = self
            .instances
            .values()
            .find(|i| {
                i.status == SsoStatus::Pooled
                    && i.parent.is_none()
                    && i.module_key == req.module_key
                    && i.module_id == req.module_id
                    && i.src_ip == req.src_ip
                    && i.dst == req.dst
            })
            .map(|i| i.sso_id);
        if let Some(id) = pooled {
            self.reactivate(id, now);
            return Ok(SessionOpenedBody { sso_id: id, reactivated: true });
        }
        let id = self.construct(&desc, &req.module_id, &req.src_ip, src_node, &req.dst, dst_node, None, now)?;
        Ok(SessionOpenedBody { sso_id: id, reactivated: false })
    }

    #[allow(clippy::too_many_arguments)]
    fn construct(
        &mut self,
        desc: &ModuleDescriptor,
        module_id: &str,
        src_ip: &str,
        src_node: NodeId,
        dst: &Peer,
        dst_node: NodeId,
        parent: Option<(SsoId, usize)>,
        now: Millis,
    ) -> Result<SsoId, ProxyError> {
        let mut constants = desc
            .parameterizations
            .get(module_id)
            .cloned()
            .ok_or_else(|| ProxyError::UnknownParameterization(module_id.to_string()))?;
        let behavior_id = desc.network_behavior.as_ref().map_or(DEFAULT_FORWARD, |b| b.behavior_id.as_str()).to_string();
        if behavior_id == COMPOSED && !constants.contains_key(PARTS_PARAM) {
            let mut ids = Vec::new();
            for part in &desc.composed_of {
                let pd = self.dir.served_module(part).ok_or_else(|| ProxyError::NotServed(part.clone()))?;
                let first = pd.parameterizations.keys().next().cloned();
                ids.push(Value::String(first.ok_or_else(|| ProxyError::UnknownParameterization(part.clone()))?));
            }
            constants.insert(PARTS_PARAM.into(), Value::Array(ids));
        }
        let logic = self.behaviors.instantiate(&behavior_id, &constants)?;
        let id = self.next_id;
        self.next_id += 1;
        let types = logic_event_types(&behavior_id);
        let inst = SsoInstance {
            sso_id: id,
            module_key: desc.module_key.clone(),
            module_id: module_id.to_string(),
            behavior_id,
            constants,
            objective: desc.objective.clone(),
            logic: Some(logic),
            src_ip: src_ip.to_string(),
            src_node,
            dst: dst.clone(),
            dst_node,
            pool: BTreeMap::new(),
            subscriptions: Vec::new(),
            last_active: now,
            status: SsoStatus::Active,
            parent,
            composed_of: desc.composed_of.clone(),
            children: BTreeMap::new(),
            ewma: None,
            samples: Vec::new(),
            inbound: VecDeque::new(),
            notifications: Vec::new(),
            deferred: Vec::new(),
        };
        self.instances.insert(id, inst);
        if !types.is_empty() {
            match self.net.subscribe(&owner_tag(id), &types, None) {
                Ok(sub) => self.inst_mut(id).subscriptions.push(sub),
                Err(e) => {
                    self.discard(id);
                    return Err(ProxyError::AllocationFailed(e.to_string()));
                }
            }
        }
        self.record(ProxyEvent::Constructed {
            sso_id: id,
            module_key: desc.module_key.clone(),
            module_id: module_id.to_string(),
            parent: parent.map(|p| p.0),
        });
        let result = self.run_hook(id, |logic, ctx| logic.on_construct(ctx)).map_err(ProxyError::from);
        let result = result.and_then(|acts| self.execute(id, acts));
        if let Err(e) = result {
            self.discard(id);
            return Err(e);
        }
        self.counters.constructions += 1;
        Ok(id)
    }

    /// Tears down a half-built instance without counting a destruction.
    fn discard(&mut self, id: SsoId) {
        self.teardown(id);
        if let Some(inst) = self.instances.remove(&id) {
            log::debug!("discarded instance {} of {}", inst.sso_id, inst.module_key);
        }
    }

    fn reactivate(&mut self, id: SsoId, now: Millis) {
        let mut ids = vec![id];
        ids.extend(self.descendants(id));
        for i in &ids {
            let inst = self.inst_mut(*i);
            inst.status = SsoStatus::Active;
            inst.last_active = now;
        }
        self.counters.reactivations += 1;
        self.record(ProxyEvent::Reactivated { sso_id: id });
        for i in ids {
            let deferred = std::mem::take(&mut self.inst_mut(i).deferred);
            for ev in deferred {
                self.record(ProxyEvent::HandlerReplayed { sso_id: i, seq: ev.seq });
                self.run_handler(i, &ev);
            }
        }
    }

    fn descendants(&self, id: SsoId) -> Vec<SsoId> {
        let mut out = Vec::new();
        if let Some(inst) = self.instances.get(&id) {
            for c in inst.children.values() {
                out.push(*c);
                out.extend(self.descendants(*c));
            }
        }
        out
    }

    /// Opens for the instance's parameterization within the trailing window.
    pub fn popularity(&mut self, module_key: &str, module_id: &str, now: Millis) -> usize {
        let window = self.policy.window_ms;
        let Some(q) = self.opens.get_mut(&(module_key.to_string(), module_id.to_string())) else {
            return 0;
        };
        while q.front().is_some_and(|t| now.saturating_sub(*t) >= window) {
            q.pop_front();
        }
        q.iter().filter(|t| **t <= now).count()
    }

    pub fn close_session(&mut self, id: SsoId, reason: CloseReason, now: Millis) -> Result<CloseOutcome, ProxyError> {
        self.tick(now);
        let inst = self.instances.get(&id).ok_or(ProxyError::InvalidSession(id))?;
        if inst.status != SsoStatus::Active || inst.parent.is_some() {
            return Err(ProxyError::InvalidSession(id));
        }
        let (k, m) = (inst.module_key.clone(), inst.module_id.clone());
        if self.popularity(&k, &m, now) >= self.policy.reuse_threshold {
            for i in std::iter::once(id).chain(self.descendants(id)) {
                let inst = self.inst_mut(i);
                inst.status = SsoStatus::Pooled;
                inst.last_active = now;
            }
            self.counters.pooled += 1;
            self.record(ProxyEvent::Pooled { sso_id: id, reason });
            Ok(CloseOutcome::Pooled)
        } else {
            self.destroy(id, reason);
            Ok(CloseOutcome::Destroyed)
        }
    }

    fn destroy(&mut self, id: SsoId, reason: CloseReason) {
        let children: Vec<SsoId> = self.instances.get(&id).map(|i| i.children.values().copied().collect()).unwrap_or_default();
        for c in children {
            self.destroy(c, CloseReason::Parent);
        }
        if let Ok(acts) = self.run_hook(id, |logic, ctx| logic.on_destruct(ctx)) {
            if let Err(e) = self.execute(id, acts) {
                self.record(ProxyEvent::HandlerError { sso_id: id, error: e.to_string() });
            }
        }
        self.teardown(id);
        let inst = self.inst_mut(id);
        inst.status = SsoStatus::Destroyed;
        inst.inbound.clear();
        inst.deferred.clear();
        self.counters.destructions += 1;
        self.record(ProxyEvent::Destroyed { sso_id: id, reason });
    }

    /// Releases every path and subscription still held.
    fn teardown(&mut self, id: SsoId) {
        let Some(inst) = self.instances.get_mut(&id) else { return };
        let pool = std::mem::take(&mut inst.pool);
        let subs = std::mem::take(&mut inst.subscriptions);
        for (role, path) in pool {
            if let Err(e) = self.net.release_path(path.path_id) {
                log::warn!("release of path {} failed: {e}", path.path_id);
            }
            self.record(ProxyEvent::Released { sso_id: id, role, path_id: path.path_id });
        }
        for s in subs {
            self.net.unsubscribe(s);
        }
    }

    /// Closes idle active sessions and destroys pooled instances idle for
    /// twice the timeout.
    pub fn sweep_timeouts(&mut self, now: Millis) -> Vec<(SsoId, CloseOutcome)> {
        self.tick(now);
        let timeout = self.policy.inactivity_timeout_ms;
        let roots: Vec<(SsoId, SsoStatus, Millis)> = self
            .instances
            .values()
            .filter(|i| i.parent.is_none())
            .map(|i| (i.sso_id, i.status, i.last_active))
            .collect();
        let mut out = Vec::new();
        for (id, status, last) in roots {
            let idle = now.saturating_sub(last);
            match status {
                SsoStatus::Active if idle > timeout => {
                    if let Ok(o) = self.close_session(id, CloseReason::Timeout, now) {
                        out.push((id, o));
                    }
                }
                SsoStatus::Pooled if idle > 2 * timeout => {
                    self.destroy(id, CloseReason::Timeout);
                    out.push((id, CloseOutcome::Destroyed));
                }
                _ => {}
            }
        }
        out
    }

    // ---- data ----

    fn active_root(&self, id: SsoId) -> Result<&SsoInstance, ProxyError> {
        match self.instances.get(&id) {
            Some(i) if i.status == SsoStatus::Active && i.parent.is_none() => Ok(i),
            _ => Err(ProxyError::InvalidSession(id)),
        }
    }

    pub fn data(&mut self, id: SsoId, op: DataOp, now: Millis) -> Result<DataReplyBody, ProxyError> {
        self.tick(now);
        self.active_root(id)?;
        self.inst_mut(id).last_active = now;
        match op {
            DataOp::Send { payload } => {
                let acts = self.run_hook(id, |l, ctx| l.on_data(ctx, DataInput::Payload(payload)))?;
                self.execute(id, acts)?;
            }
            DataOp::Control { verb } => {
                self.control_tally = (0, 0);
                let acts = self.run_hook(id, |l, ctx| l.on_data(ctx, DataInput::Control(verb.clone())))?;
                self.execute(id, acts)?;
                let (accepted, declined) = self.control_tally;
                if accepted == 0 && declined > 0 {
                    return Err(ProxyError::Behavior(HookError::Unsupported(verb)));
                }
            }
            DataOp::Poll => {}
        }
        let inst = self.inst_mut(id);
        Ok(DataReplyBody {
            sso_id: id,
            inbound: inst.inbound.drain(..).collect(),
            notifications: std::mem::take(&mut inst.notifications),
        })
    }

    /// Delegates a request from a composed instance to one of its parts.
    pub fn delegate(&mut self, id: SsoId, part_module_key: &str, request: DelegateRequest) -> Result<(), ProxyError> {
        let inst = self.instances.get(&id).ok_or(ProxyError::InvalidSession(id))?;
        let part = inst
            .composed_of
            .iter()
            .position(|k| k == part_module_key)
            .ok_or_else(|| ProxyError::DelegationRefused(format!("{part_module_key} is not a part of {}", inst.module_key)))?;
        self.execute(id, vec![Action::Delegate { part, request }])
    }

    // ---- samples ----

    pub fn record_sample(&mut self, id: SsoId, value: f64, now: Millis) -> Result<SampleReplyBody, ProxyError> {
        self.tick(now);
        self.active_root(id)?;
        self.inst_mut(id).last_active = now;
        self.sample(id, value)
    }

    fn sample(&mut self, id: SsoId, value: f64) -> Result<SampleReplyBody, ProxyError> {
        let inst = self.instances.get(&id).ok_or(ProxyError::InvalidSession(id))?;
        let attained = inst.objective.is_met(value);
        let key = inst.module_key.clone();
        let stats = self.dir.record_sample(&key, attained).map_err(ProxyError::Directory)?;
        let inst = self.inst_mut(id);
        let ewma = inst.ewma.map_or(value, |e| EWMA_ALPHA * value + (1.0 - EWMA_ALPHA) * e);
        inst.ewma = Some(ewma);
        inst.samples.push((value, attained));
        let violation = !inst.objective.is_met(ewma);
        self.counters.samples += 1;
        self.record(ProxyEvent::Sample { sso_id: id, value, attained, ewma });
        Ok(SampleReplyBody { sso_id: id, stats, ewma, violation })
    }

    // ---- events ----

    /// Drains every instance subscription and dispatches each new event once,
    /// in seq order.
    pub fn pump_events(&mut self, now: Millis) -> Vec<(NetworkEvent, Vec<SsoId>)> {
        self.tick(now);
        let subs: Vec<SubscriptionId> = self.instances.values().flat_map(|i| i.subscriptions.iter().copied()).collect();
        let mut events = BTreeMap::new();
        for s in subs {
            for ev in self.net.take_events(s) {
                if ev.seq > self.last_seq {
                    events.insert(ev.seq, ev);
                }
            }
        }
        let mut out = Vec::new();
        for (seq, ev) in events {
            let ran = self.deliver_event(&ev);
            self.last_seq = self.last_seq.max(seq);
            out.push((ev, ran));
        }
        out
    }

    /// Runs the path handler of every active instance whose pool holds the
    /// event's link; pooled holders get the event deferred.
    pub fn deliver_event(&mut self, event: &NetworkEvent) -> Vec<SsoId> {
        let mut run = Vec::new();
        let mut defer = Vec::new();
        for inst in self.instances.values() {
            let subscribed = !inst.subscriptions.is_empty() && logic_event_types(&inst.behavior_id).contains(&event.event_type);
            if !subscribed || !inst.pool.values().any(|p| p.contains_link(&event.link_id)) {
                continue;
            }
            match inst.status {
                SsoStatus::Active => run.push(inst.sso_id),
                SsoStatus::Pooled => defer.push(inst.sso_id),
                SsoStatus::Destroyed => {}
            }
        }
        for id in defer {
            self.inst_mut(id).deferred.push(event.clone());
            self.counters.deferred_events += 1;
            self.record(ProxyEvent::HandlerDeferred { sso_id: id, seq: event.seq });
        }
        for id in &run {
            self.record(ProxyEvent::HandlerRan { sso_id: *id, seq: event.seq });
            self.run_handler(*id, event);
        }
        run
    }

    fn run_handler(&mut self, id: SsoId, event: &NetworkEvent) {
        self.counters.handler_runs += 1;
        let result = self.run_hook(id, |l, ctx| l.on_path_event(ctx, event)).map_err(ProxyError::from);
        if let Err(e) = result.and_then(|acts| self.execute(id, acts)) {
            self.counters.handler_errors += 1;
            self.record(ProxyEvent::HandlerError { sso_id: id, error: e.to_string() });
        }
    }

    // ---- hook plumbing ----

    fn inst_mut(&mut self, id: SsoId) -> &mut SsoInstance {
        self.instances.get_mut(&id).expect("instance exists")
    }

    /// Calls a hook with the instance's context; panics are contained.
    fn run_hook<F>(&mut self, id: SsoId, f: F) -> HookResult
    where
        F: FnOnce(&mut dyn SsoLogic, &HookContext<'_>) -> HookResult,
    {
        let Some(mut logic) = self.instances.get_mut(&id).and_then(|i| i.logic.take()) else {
            return Err(HookError::Fault(format!("instance {id} has no logic")));
        };
        let inst = &self.instances[&id];
        let ctx = HookContext {
            net: &*self.net,
            src: &inst.src_node,
            dst: &inst.dst_node,
            objective: &inst.objective,
            pool: &inst.pool,
            now: self.now,
        };
        let result = catch_unwind(AssertUnwindSafe(|| f(logic.as_mut(), &ctx)))
            .unwrap_or_else(|p| Err(HookError::Fault(panic_message(&p))));
        self.inst_mut(id).logic = Some(logic);
        result
    }

    fn root_of(&self, mut id: SsoId) -> SsoId {
        while let Some((p, _)) = self.instances.get(&id).and_then(|i| i.parent) {
            id = p;
        }
        id
    }

    fn execute(&mut self, id: SsoId, actions: Vec<Action>) -> Result<(), ProxyError> {
        for action in actions {
            self.execute_one(id, action)?;
        }
        Ok(())
    }

    fn execute_one(&mut self, id: SsoId, action: Action) -> Result<(), ProxyError> {
        match action {
            Action::AllocatePath { role, route, constraints } => {
                let inst = &self.instances[&id];
                let owner = inst.owner();
                let result = match &route {
                    Some(r) => self.net.allocate_route(&owner, r),
                    None => {
                        let (s, d) = (inst.src_node.clone(), inst.dst_node.clone());
                        self.net.allocate_path(&owner, &s, &d, &constraints)
                    }
                };
                let path = result.map_err(|e| ProxyError::AllocationFailed(e.to_string()))?;
                if let Some(old) = self.inst_mut(id).pool.remove(&role) {
                    let _ = self.net.release_path(old.path_id);
                    self.record(ProxyEvent::Released { sso_id: id, role: role.clone(), path_id: old.path_id });
                }
                self.record(ProxyEvent::Allocated {
                    sso_id: id,
                    role: role.clone(),
                    path_id: path.path_id,
                    nodes: path.nodes.clone(),
                });
                self.inst_mut(id).pool.insert(role, path);
            }
            Action::ReleasePath { role } => {
                if let Some(path) = self.inst_mut(id).pool.remove(&role) {
                    self.net.release_path(path.path_id).map_err(|e| ProxyError::AllocationFailed(e.to_string()))?;
                    self.record(ProxyEvent::Released { sso_id: id, role, path_id: path.path_id });
                }
            }
            Action::Forward { role, payload } => match self.instances[&id].parent {
                Some((parent, part)) => {
                    let acts = self.run_hook(parent, |l, ctx| l.on_part_output(ctx, part, &role, payload))?;
                    self.execute(parent, acts)?;
                }
                None => self.transmit(id, id, &role, payload),
            },
            Action::ForwardThrough { part, role, payload } => {
                let child = *self.instances[&id]
                    .children
                    .get(&part)
                    .ok_or_else(|| ProxyError::DelegationRefused(format!("part {part} not open")))?;
                let root = self.root_of(id);
                self.transmit(root, child, &role, payload);
            }
            Action::Buffer { key, bytes } => self.record(ProxyEvent::Buffered { sso_id: id, key, bytes }),
            Action::Drop { reason, bytes } => {
                self.counters.drops += 1;
                self.record(ProxyEvent::Dropped { sso_id: id, reason, bytes });
            }
            Action::Sample { value } => {
                self.sample(self.root_of(id), value)?;
            }
            Action::Delegate { part, request } => self.run_delegate(id, part, request)?,
            Action::NotifyDevice { value, reason } => {
                let root = self.root_of(id);
                self.record(ProxyEvent::Notified { sso_id: root, reason: reason.clone() });
                self.inst_mut(root).notifications.push(Notification::ObjectiveViolation { value, reason });
            }
            Action::Note { what, detail } => self.record(ProxyEvent::Note { sso_id: id, what, detail }),
        }
        Ok(())
    }

    fn run_delegate(&mut self, id: SsoId, part: usize, request: DelegateRequest) -> Result<(), ProxyError> {
        let inst = &self.instances[&id];
        let part_key = inst
            .composed_of
            .get(part)
            .cloned()
            .ok_or_else(|| ProxyError::DelegationRefused(format!("part index {part} of {}", inst.module_key)))?;
        let op = match &request {
            DelegateRequest::Open => "open".to_string(),
            DelegateRequest::Data { .. } => "data".to_string(),
            DelegateRequest::Control { verb } => format!("control:{verb}"),
        };
        self.counters.delegations += 1;
        let child = match (inst.children.get(&part).copied(), &request) {
            (Some(c), _) => c,
            (None, DelegateRequest::Open) => {
                let module_id = inst
                    .constants
                    .get(PARTS_PARAM)
                    .and_then(|v| v.get(part))
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| ProxyError::UnknownParameterization(format!("part {part}")))?;
                let (src_ip, src_node, dst, dst_node) =
                    (inst.src_ip.clone(), inst.src_node.clone(), inst.dst.clone(), inst.dst_node.clone());
                let desc = self.dir.served_module(&part_key).ok_or_else(|| ProxyError::NotServed(part_key.clone()))?;
                let now = self.now;
                let c = self.construct(&desc, &module_id, &src_ip, src_node, &dst, dst_node, Some((id, part)), now)?;
                self.inst_mut(id).children.insert(part, c);
                c
            }
            (None, _) => return Err(ProxyError::DelegationRefused(format!("part {part} not open"))),
        };
        self.record(ProxyEvent::Delegated { sso_id: id, part, part_module_key: part_key, child, op });
        match request {
            DelegateRequest::Open => Ok(()),
            DelegateRequest::Data { payload } => {
                let acts = self.run_hook(child, |l, ctx| l.on_data(ctx, DataInput::Payload(payload)))?;
                self.execute(child, acts)
            }
            DelegateRequest::Control { verb } => {
                match self.run_hook(child, |l, ctx| l.on_data(ctx, DataInput::Control(verb))) {
                    Ok(acts) => {
                        self.control_tally.0 += 1;
                        self.execute(child, acts)
                    }
                    Err(HookError::Unsupported(_)) => {
                        self.control_tally.1 += 1;
                        Ok(())
                    }
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    /// Sends a payload of session `root` over a path held by `holder`.
    fn transmit(&mut self, root: SsoId, holder: SsoId, role: &str, payload: Vec<u8>) {
        let bytes = payload.len();
        let path = self.instances.get(&holder).and_then(|i| i.pool.get(role)).cloned();
        let Some(path) = path.filter(|p| self.net.path_is_up(p)) else {
            self.counters.drops += 1;
            self.record(ProxyEvent::Dropped { sso_id: root, reason: format!("no usable {role} path"), bytes });
            return;
        };
        let (src_ip, dst) = {
            let r = &self.instances[&root];
            (r.src_ip.clone(), r.dst.clone())
        };
        match self.data.deliver(&src_ip, &dst, &payload) {
            Ok(replies) => {
                self.counters.forwards += 1;
                self.record(ProxyEvent::Forwarded { sso_id: root, via: holder, path_id: path.path_id, bytes });
                self.inst_mut(root).inbound.extend(replies);
                if self.instances[&root].objective.metric == Metric::EndToEndLatencyMs {
                    if let Ok(m) = self.net.path_metrics(&path) {
                        if let Err(e) = self.sample(root, m.latency_ms) {
                            log::warn!("sample for {root} not recorded: {e}");
                        }
                    }
                }
            }
            Err(e) => {
                self.counters.drops += 1;
                self.record(ProxyEvent::Dropped { sso_id: root, reason: e.to_string(), bytes });
            }
        }
    }
}

/// Event types a behavior's path handler subscribes to.
fn logic_event_types(behavior_id: &str) -> Vec<EventType> {
    if behavior_id == COMPOSED {
        vec![]
    } else {
        EventType::ALL.to_vec()
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "handler panicked".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behaviors::manifest::BehaviorManifest;
    use crate::behaviors::HookError;
    use crate::catalog::{self, default_id};
    use crate::dataplane::{EndpointKind, SharedPlane, SimDataPlane};
    use crate::netsim::tests::triangle;
    use crate::netsim::LinkChange;
    use crate::registry::RegistryConfig;

    const DEVICE: &str = "10.0.0.1";
    const SERVER_B: &str = "10.0.0.2";
    const SERVER_C: &str = "10.0.0.3";

    struct Fx {
        proxy: StoreProxy,
        net: Arc<Mutex<NetworkSim>>,
        reg: Arc<Mutex<Registry>>,
        plane: SharedPlane,
    }

    fn fx_with(policy: PoolPolicy, behaviors: NetworkBehaviors) -> Fx {
        let mut sim = NetworkSim::new(triangle());
        sim.attach_host(DEVICE, "A").unwrap();
        sim.attach_host(SERVER_B, "B").unwrap();
        sim.attach_host(SERVER_C, "C").unwrap();
        let net = Arc::new(Mutex::new(sim));
        let mut reg = Registry::new(RegistryConfig::default(), BehaviorManifest::builtin());
        catalog::publish_all(&mut reg, 0).unwrap();
        let reg = Arc::new(Mutex::new(reg));
        let plane: SharedPlane = Arc::new(Mutex::new(SimDataPlane::new()));
        lock(&plane).add_endpoint(SERVER_B, 7, EndpointKind::Echo).unwrap();
        lock(&plane).add_endpoint(SERVER_C, 7, EndpointKind::Echo).unwrap();
        let proxy = StoreProxy::new(policy, Box::new(net.clone()), Box::new(reg.clone()), Box::new(plane.clone()))
            .with_behaviors(behaviors);
        Fx { proxy, net, reg, plane }
    }

    fn fx() -> Fx {
        fx_with(PoolPolicy::default(), NetworkBehaviors::builtin())
    }

    impl Fx {
        fn request(&self, key: &str, server: &str) -> OpenSessionBody {
            let ent = lock(&self.reg).purchase("app", key, None, 0).unwrap();
            OpenSessionBody {
                entitlement: ent,
                module_key: key.into(),
                module_id: default_id(key),
                src_ip: DEVICE.into(),
                dst: Peer::new("tcp", server, 7),
            }
        }

        fn open(&mut self, key: &str, now: Millis) -> SessionOpenedBody {
            let req = self.request(key, SERVER_C);
            self.proxy.open_session(&req, now).unwrap()
        }

        fn allocations(&self) -> usize {
            lock(&self.net).allocation_count()
        }

        fn set(&mut self, link: &str, change: LinkChange, now: Millis) -> Vec<(NetworkEvent, Vec<SsoId>)> {
            lock(&self.net).set_link_state(link, change).unwrap();
            self.proxy.pump_events(now)
        }
    }

    #[test]
    fn first_open_constructs_and_allocates_one_path() {
        let mut f = fx();
        let opened = f.open(catalog::FORWARD, 0);
        assert!(!opened.reactivated);
        assert_eq!(f.allocations(), 1);
        let inst = f.proxy.instance(opened.sso_id).unwrap();
        assert_eq!(inst.pool[crate::behaviors::PRIMARY].nodes, vec!["A", "B", "C"]);
        assert_eq!(f.proxy.counters().constructions, 1);
    }

    #[test]
    fn open_errors() {
        let mut f = fx();
        let mut req = f.request(catalog::FORWARD, SERVER_C);
        req.module_id = "nonexistent".into();
        assert!(matches!(f.proxy.open_session(&req, 0), Err(ProxyError::UnknownParameterization(_))));
        let mut req = f.request(catalog::FORWARD, SERVER_C);
        req.entitlement.token = "0".repeat(64);
        assert_eq!(f.proxy.open_session(&req, 0).unwrap_err(), ProxyError::Unauthorized);
        let req = f.request(catalog::FORWARD, "192.0.2.1");
        assert!(matches!(f.proxy.open_session(&req, 0), Err(ProxyError::UnknownHost(_))));
        assert_eq!(f.allocations(), 0);
        assert_eq!(f.proxy.counters().constructions, 0);
    }

    #[test]
    fn construction_failure_releases_partial_state() {
        let mut f = fx();
        // Triangle has a cut-free pair of routes A-C but not once AC is gone.
        lock(&f.net).set_link_state("AC", LinkChange::Down).unwrap();
        let req = f.request(catalog::MULTIPATH, SERVER_C);
        assert!(matches!(f.proxy.open_session(&req, 0), Err(ProxyError::AllocationFailed(_))));
        assert_eq!(f.allocations(), 0);
        assert_eq!(lock(&f.net).subscription_count(), 0);
        assert_eq!(f.proxy.active_sessions(), 0);
    }

    #[test]
    fn popular_parameterization_is_pooled_and_reactivated() {
        let mut f = fx();
        let mut ids = Vec::new();
        for t in 0..5 {
            let s = f.open(catalog::FORWARD, t * 1000);
            ids.push(s.sso_id);
        }
        assert_eq!(f.allocations(), 5);
        let first = ids[0];
        assert_eq!(f.proxy.close_session(first, CloseReason::Explicit, 5000).unwrap(), CloseOutcome::Pooled);
        assert_eq!(f.allocations(), 5);
        let again = f.open(catalog::FORWARD, 6000);
        assert_eq!(again, SessionOpenedBody { sso_id: first, reactivated: true });
        assert_eq!(f.allocations(), 5);
        assert_eq!(f.proxy.instance(first).unwrap().constants(), &ParameterSet::new());
    }

    #[test]
    fn unpopular_close_destroys_and_frees_paths() {
        let mut f = fx();
        let s = f.open(catalog::FORWARD, 0);
        assert_eq!(f.proxy.close_session(s.sso_id, CloseReason::Explicit, 10).unwrap(), CloseOutcome::Destroyed);
        assert_eq!(f.allocations(), 0);
        assert_eq!(lock(&f.net).subscription_count(), 0);
        let inst = f.proxy.instance(s.sso_id).unwrap();
        assert_eq!(inst.status, SsoStatus::Destroyed);
        assert!(inst.pool.is_empty() && inst.subscriptions.is_empty());
        assert_eq!(f.proxy.close_session(s.sso_id, CloseReason::Explicit, 20), Err(ProxyError::InvalidSession(s.sso_id)));
    }

    #[test]
    fn popularity_window_is_trailing() {
        let mut f = fx();
        for t in [0, 10_000, 20_000] {
            let s = f.open(catalog::FORWARD, t);
            f.proxy.close_session(s.sso_id, CloseReason::Explicit, t + 1).unwrap();
        }
        // Opens at 0 and 10 s fall out of the 60 s window by 70 s.
        assert_eq!(f.proxy.popularity(catalog::FORWARD, &default_id(catalog::FORWARD), 69_999), 2);
        assert_eq!(f.proxy.popularity(catalog::FORWARD, &default_id(catalog::FORWARD), 70_000), 1);
    }

    #[test]
    fn sweep_closes_idle_sessions_only() {
        let mut f = fx();
        let idle = f.open(catalog::FORWARD, 0);
        let busy = f.open(catalog::GUARD, 2_000);
        let swept = f.proxy.sweep_timeouts(31_000);
        assert_eq!(swept, vec![(idle.sso_id, CloseOutcome::Destroyed)]);
        assert_eq!(f.proxy.instance(busy.sso_id).unwrap().status, SsoStatus::Active);
        assert!(f.proxy.trace().iter().any(|r| r.event
            == ProxyEvent::Destroyed { sso_id: idle.sso_id, reason: CloseReason::Timeout }));
    }

    #[test]
    fn sweep_boundary_is_strict() {
        let mut f = fx();
        let s = f.open(catalog::FORWARD, 0);
        assert!(f.proxy.sweep_timeouts(29_000).is_empty());
        assert!(f.proxy.sweep_timeouts(30_000).is_empty());
        assert_eq!(f.proxy.sweep_timeouts(30_001).len(), 1);
        assert_eq!(f.proxy.instance(s.sso_id).unwrap().status, SsoStatus::Destroyed);
    }

    #[test]
    fn pooled_instance_idle_twice_the_timeout_is_destroyed() {
        let mut f = fx();
        let ids: Vec<_> = (0..3).map(|_| f.open(catalog::FORWARD, 0).sso_id).collect();
        for id in &ids {
            f.proxy.close_session(*id, CloseReason::Explicit, 0).unwrap();
        }
        // All three opens fall in the window, so every close pools.
        let pooled: Vec<_> = f.proxy.instances().filter(|i| i.status == SsoStatus::Pooled).map(|i| i.sso_id).collect();
        assert_eq!(pooled, ids);
        assert!(f.proxy.sweep_timeouts(59_000).is_empty());
        let swept = f.proxy.sweep_timeouts(61_000);
        assert_eq!(swept, ids.iter().map(|i| (*i, CloseOutcome::Destroyed)).collect::<Vec<_>>());
        assert_eq!(f.allocations(), 0);
    }

    #[test]
    fn handler_runs_only_for_affected_pools() {
        let mut f = fx();
        let to_c = f.open(catalog::FORWARD, 0);
        let req = f.request(catalog::FORWARD, SERVER_B);
        let to_b = f.proxy.open_session(&req, 0).unwrap();
        assert_eq!(f.proxy.instance(to_b.sso_id).unwrap().links(), BTreeSet::from(["AB"]));
        let ran = f.set("BC", LinkChange::LatencyMs(6.0), 1);
        assert_eq!(ran.len(), 1);
        assert_eq!(ran[0].1, vec![to_c.sso_id]);
        let ran = f.set("AB", LinkChange::LatencyMs(11.0), 2);
        assert_eq!(ran[0].1, vec![to_c.sso_id, to_b.sso_id]);
        let ran = f.set("AC", LinkChange::LatencyMs(21.0), 3);
        assert!(ran[0].1.is_empty());
    }

    #[test]
    fn events_for_pooled_instances_are_deferred_and_replayed() {
        let mut f = fx_with(PoolPolicy { reuse_threshold: 1, ..Default::default() }, NetworkBehaviors::builtin());
        let s = f.open(catalog::GUARD, 0);
        assert_eq!(f.proxy.close_session(s.sso_id, CloseReason::Explicit, 1).unwrap(), CloseOutcome::Pooled);
        let ran = f.set("BC", LinkChange::LatencyMs(50.0), 2);
        assert!(ran[0].1.is_empty());
        assert_eq!(f.proxy.instance(s.sso_id).unwrap().deferred().len(), 1);
        // Still on the stale route while pooled.
        assert_eq!(f.proxy.instance(s.sso_id).unwrap().pool["primary"].nodes, vec!["A", "B", "C"]);
        let again = f.open(catalog::GUARD, 3);
        assert!(again.reactivated);
        let inst = f.proxy.instance(s.sso_id).unwrap();
        assert!(inst.deferred().is_empty());
        assert_eq!(inst.pool["primary"].nodes, vec!["A", "C"]);
        let kinds: Vec<_> = f
            .proxy
            .trace()
            .iter()
            .filter_map(|r| match r.event {
                ProxyEvent::HandlerDeferred { seq, .. } => Some(("deferred", seq)),
                ProxyEvent::HandlerReplayed { seq, .. } => Some(("replayed", seq)),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec![("deferred", 1), ("replayed", 1)]);
    }

    struct Faulty;

    impl SsoLogic for Faulty {
        fn behavior_id(&self) -> &str {
            DEFAULT_FORWARD
        }
        fn on_construct(&mut self, ctx: &HookContext<'_>) -> HookResult {
            let _ = ctx;
            Ok(vec![Action::allocate(crate::behaviors::PRIMARY, &PathConstraints::default())])
        }
        fn on_path_event(&mut self, _ctx: &HookContext<'_>, _event: &NetworkEvent) -> HookResult {
            panic!("handler bug")
        }
        fn on_data(&mut self, _ctx: &HookContext<'_>, _input: DataInput) -> HookResult {
            Err(HookError::Fault("refused".into()))
        }
        fn variables(&self) -> Value {
            Value::Null
        }
    }

    #[test]
    fn handler_faults_are_contained_and_counted() {
        let mut b = NetworkBehaviors::builtin();
        b.register(DEFAULT_FORWARD, |_| Ok(Box::new(Faulty)));
        let mut f = fx_with(PoolPolicy::default(), b);
        let s = f.open(catalog::FORWARD, 0);
        let ran = f.set("AB", LinkChange::Down, 1);
        assert_eq!(ran[0].1, vec![s.sso_id]);
        assert_eq!(f.proxy.counters().handler_errors, 1);
        assert_eq!(f.proxy.instance(s.sso_id).unwrap().status, SsoStatus::Active);
        assert!(f.proxy.trace().iter().any(|r| matches!(&r.event,
            ProxyEvent::HandlerError { error, .. } if error.contains("handler bug"))));
        assert_eq!(f.proxy.close_session(s.sso_id, CloseReason::Explicit, 2).unwrap(), CloseOutcome::Destroyed);
        assert_eq!(f.allocations(), 0);
    }

    #[test]
    fn samples_feed_registry_and_ewma() {
        let mut f = fx();
        let s = f.open(catalog::FORWARD, 0);
        let r = f.proxy.record_sample(s.sso_id, 40.0, 1).unwrap();
        assert_eq!((r.stats.samples, r.stats.attained), (1, 1));
        let r = f.proxy.record_sample(s.sso_id, 60.0, 2).unwrap();
        assert_eq!((r.stats.samples, r.stats.attained), (2, 1));
        assert_eq!(lock(&f.reg).stats(catalog::FORWARD).samples, 2);

        let t = f.open(catalog::FORWARD, 3);
        f.proxy.record_sample(t.sso_id, 10.0, 4).unwrap();
        let r = f.proxy.record_sample(t.sso_id, 20.0, 5).unwrap();
        assert!((r.ewma - 12.0).abs() < 1e-12, "{}", r.ewma);
        assert!(!r.violation);
        assert_eq!(f.proxy.record_sample(99, 1.0, 6), Err(ProxyError::InvalidSession(99)));
    }

    #[test]
    fn echo_through_forwarding_session_auto_samples_latency() {
        let mut f = fx();
        let s = f.open(catalog::FORWARD, 0);
        let reply = f.proxy.data(s.sso_id, DataOp::Send { payload: b"abc".to_vec() }, 1).unwrap();
        assert_eq!(reply.inbound, vec![b"abc".to_vec()]);
        let inst = f.proxy.instance(s.sso_id).unwrap();
        assert_eq!(inst.samples, vec![(15.0, true)]);
        assert_eq!(lock(&f.plane).deliveries().len(), 1);
    }

    #[test]
    fn latency_guard_reroutes_through_the_proxy() {
        let mut f = fx();
        let s = f.open(catalog::GUARD, 0);
        f.set("BC", LinkChange::LatencyMs(50.0), 1);
        assert_eq!(f.proxy.instance(s.sso_id).unwrap().pool["primary"].nodes, vec!["A", "C"]);
        assert_eq!(f.allocations(), 1);
        // Guard bound is 30 ms: nothing to report while A-C is 20 ms.
        let reply = f.proxy.data(s.sso_id, DataOp::Poll, 2).unwrap();
        assert!(reply.notifications.is_empty());
        f.set("AC", LinkChange::Down, 3);
        f.set("AB", LinkChange::Down, 4);
        let reply = f.proxy.data(s.sso_id, DataOp::Poll, 5).unwrap();
        let reasons: Vec<_> = reply
            .notifications
            .iter()
            .map(|n| match n {
                Notification::ObjectiveViolation { reason, .. } => reason.as_str(),
            })
            .collect();
        // A-C down leaves only A-B-C at 60 ms; A-B down then leaves nothing.
        assert_eq!(reasons, vec!["latency bound exceeded", "no route"]);
    }

    fn delegations(p: &StoreProxy) -> Vec<(String, String)> {
        p.trace()
            .iter()
            .filter_map(|r| match &r.event {
                ProxyEvent::Delegated { part_module_key, op, .. } => Some((part_module_key.clone(), op.clone())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn composed_session_delegates_in_part_order() {
        let mut f = fx();
        let s = f.open(catalog::GUARDED_DTN, 0);
        assert_eq!(f.proxy.instance(s.sso_id).unwrap().children.len(), 2);
        assert!(f.proxy.instance(s.sso_id).unwrap().pool.is_empty());
        let reply = f.proxy.data(s.sso_id, DataOp::Send { payload: b"x".to_vec() }, 1).unwrap();
        assert_eq!(reply.inbound, vec![b"x".to_vec()]);
        let d = delegations(&f.proxy);
        let data: Vec<_> = d.iter().filter(|(_, op)| op == "data").map(|(k, _)| k.as_str()).collect();
        assert_eq!(data, vec![catalog::DTN, catalog::GUARD]);
        assert_eq!(
            f.proxy.delegate(s.sso_id, catalog::MULTIPATH, DelegateRequest::Open),
            Err(ProxyError::DelegationRefused(format!("{} is not a part of {}", catalog::MULTIPATH, catalog::GUARDED_DTN)))
        );
        assert_eq!(f.allocations(), 2);
        f.proxy.close_session(s.sso_id, CloseReason::Explicit, 2).unwrap();
        assert_eq!(f.allocations(), 0);
        assert_eq!(f.proxy.counters().destructions, 3);
    }

    #[test]
    fn composed_control_verbs_reach_the_part_that_knows_them() {
        let mut f = fx();
        let s = f.open(catalog::GUARDED_DTN, 0);
        f.set("AC", LinkChange::Down, 1);
        f.set("AB", LinkChange::Down, 1);
        f.proxy.data(s.sso_id, DataOp::Send { payload: b"a".to_vec() }, 2).unwrap();
        f.proxy.data(s.sso_id, DataOp::Control { verb: "undo_send".into() }, 3).unwrap();
        let err = f.proxy.data(s.sso_id, DataOp::Control { verb: "undo_send".into() }, 4).unwrap_err();
        assert_eq!(err.code(), "NothingToUndo");
        let err = f.proxy.data(s.sso_id, DataOp::Control { verb: "teleport".into() }, 5).unwrap_err();
        assert_eq!(err.code(), "Unsupported");
    }

    #[test]
    fn quiescence_leaves_no_allocations() {
        let mut f = fx();
        for t in 0..6 {
            let s = f.open(if t % 2 == 0 { catalog::FORWARD } else { catalog::MULTIPATH }, t);
            if t % 3 != 0 {
                f.proxy.close_session(s.sso_id, CloseReason::Explicit, t).unwrap();
            }
        }
        f.proxy.sweep_timeouts(40_000);
        f.proxy.sweep_timeouts(200_000);
        assert_eq!(f.allocations(), 0);
        assert_eq!(f.proxy.held_paths(), 0);
        assert_eq!(lock(&f.net).subscription_count(), 0);
    }
}
