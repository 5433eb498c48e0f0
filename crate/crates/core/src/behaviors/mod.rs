//! Built-in module behaviors and the hook contract they implement.
//!
//! A network-side behavior is an [`SsoLogic`]: its hooks receive an input plus
//! a read-only view of the network and return a list of [`Action`]s, which the
//! store proxy executes in order. Behaviors never touch the simulator directly,
//! so identical (state, input) always yields identical (state', actions).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{ParameterSet, PerformanceObjective};
use crate::netsim::{NetError, NetworkEvent, Path, PathConstraints, PathMetrics, Route};

pub mod composed;
pub mod device;
pub mod dtn;
pub mod forward;
pub mod latency_guard;
pub mod manifest;
pub mod multipath;

pub const DEFAULT_FORWARD: &str = "default_forward";
pub const LATENCY_GUARD: &str = "latency_guard";
pub const MULTIPATH_FAILOVER: &str = "multipath_failover";
pub const DTN_STORE: &str = "dtn_store";
pub const COMPOSED: &str = "composed";

/// Role of the single path most behaviors hold.
pub const PRIMARY: &str = "primary";
pub const BACKUP: &str = "backup";

/// Read-only network services available to hooks.
pub trait NetView {
    fn find_route(&self, src: &str, dst: &str, constraints: &PathConstraints) -> Result<Route, NetError>;
    fn find_disjoint_pair(&self, src: &str, dst: &str, constraints: &PathConstraints)
        -> Result<(Route, Route), NetError>;
    fn path_metrics(&self, path: &Path) -> Result<PathMetrics, NetError>;
    fn path_is_up(&self, path: &Path) -> bool;
}

impl NetView for crate::netsim::NetworkSim {
    fn find_route(&self, src: &str, dst: &str, constraints: &PathConstraints) -> Result<Route, NetError> {
        crate::netsim::NetworkSim::find_route(self, src, dst, constraints)
    }
    fn find_disjoint_pair(
        &self,
        src: &str,
        dst: &str,
        constraints: &PathConstraints,
    ) -> Result<(Route, Route), NetError> {
        crate::netsim::NetworkSim::find_disjoint_pair(self, src, dst, constraints)
    }
    fn path_metrics(&self, path: &Path) -> Result<PathMetrics, NetError> {
        crate::netsim::NetworkSim::path_metrics(self, path)
    }
    fn path_is_up(&self, path: &Path) -> bool {
        crate::netsim::NetworkSim::path_is_up(self, path)
    }
}

/// Everything a hook may look at.
pub struct HookContext<'a> {
    pub net: &'a dyn NetView,
    /// Node of the requesting device.
    pub src: &'a str,
    /// Node of the destination endpoint.
    pub dst: &'a str,
    pub objective: &'a PerformanceObjective,
    pub pool: &'a BTreeMap<String, Path>,
    pub now: u64,
}

impl HookContext<'_> {
    pub fn path(&self, role: &str) -> Option<&Path> {
        self.pool.get(role)
    }

    pub fn path_latency(&self, role: &str) -> Option<f64> {
        self.path(role).and_then(|p| self.net.path_metrics(p).ok()).map(|m| m.latency_ms)
    }

    pub fn path_up(&self, role: &str) -> bool {
        self.path(role).is_some_and(|p| self.net.path_is_up(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelegateRequest {
    /// Opens (or reuses) the nested instance for the part.
    Open,
    Data { payload: Vec<u8> },
    Control { verb: String },
}

/// Platform action set.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Allocates a path for `role`, either the given route or the best route
    /// between the session endpoints under `constraints`.
    AllocatePath { role: String, route: Option<Route>, constraints: PathConstraints },
    ReleasePath { role: String },
    /// Sends a payload toward the destination over the path held under `role`.
    /// A nested (delegated) instance hands its output back to the composing parent instead.
    Forward { role: String, payload: Vec<u8> },
    /// Sends over a path held by one of the composed parts.
    ForwardThrough { part: usize, role: String, payload: Vec<u8> },
    /// Payload parked in the instance's blob store.
    Buffer { key: String, bytes: usize },
    /// Payload dropped by the behavior.
    Drop { reason: String, bytes: usize },
    Sample { value: f64 },
    Delegate { part: usize, request: DelegateRequest },
    NotifyDevice { value: Option<f64>, reason: String },
    /// Free-form trace annotation (e.g. a failover switch).
    Note { what: String, detail: String },
}

impl Action {
    pub fn allocate(role: &str, constraints: &PathConstraints) -> Self {
        Action::AllocatePath { role: role.into(), route: None, constraints: constraints.clone() }
    }

    pub fn allocate_route(role: &str, route: &Route) -> Self {
        Action::AllocatePath { role: role.into(), route: Some(route.clone()), constraints: Default::default() }
    }

    pub fn forward(role: &str, payload: Vec<u8>) -> Self {
        Action::Forward { role: role.into(), payload }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum HookError {
    #[error("allocation failed: {0}")]
    AllocationFailed(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("nothing to redo")]
    NothingToRedo,
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("handler fault: {0}")]
    Fault(String),
}

impl HookError {
    pub fn code(&self) -> &'static str {
        match self {
            HookError::AllocationFailed(_) => "AllocationFailed",
            HookError::Unsupported(_) => "Unsupported",
            HookError::NothingToUndo => "NothingToUndo",
            HookError::NothingToRedo => "NothingToRedo",
            HookError::BadParameter(_) => "BadParameter",
            HookError::Fault(_) => "HandlerFault",
        }
    }
}

pub type HookResult = Result<Vec<Action>, HookError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DataInput {
    Payload(Vec<u8>),
    Control(String),
}

/// Network-side logic of a module instance.
pub trait SsoLogic: Send {
    fn behavior_id(&self) -> &str;
    fn on_construct(&mut self, ctx: &HookContext<'_>) -> HookResult;
    fn on_path_event(&mut self, ctx: &HookContext<'_>, event: &NetworkEvent) -> HookResult;
    fn on_data(&mut self, ctx: &HookContext<'_>, input: DataInput) -> HookResult;
    /// Output produced by composed part `part` on its path `role` (only called
    /// on composing instances).
    fn on_part_output(&mut self, _ctx: &HookContext<'_>, part: usize, _role: &str, _payload: Vec<u8>) -> HookResult {
        Err(HookError::Unsupported(format!("output from part {part}")))
    }
    fn on_destruct(&mut self, ctx: &HookContext<'_>) -> HookResult {
        Ok(ctx.pool.keys().map(|role| Action::ReleasePath { role: role.clone() }).collect())
    }
    /// Snapshot of mutable state for traces.
    fn variables(&self) -> Value;
}

/// Constructor for a network behavior from its bound constants.
pub type NetworkFactory = fn(&ParameterSet) -> Result<Box<dyn SsoLogic>, HookError>;

/// Network behaviors a proxy can instantiate, keyed by behavior id.
#[derive(Clone)]
pub struct NetworkBehaviors {
    factories: BTreeMap<String, NetworkFactory>,
}

impl std::fmt::Debug for NetworkBehaviors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for NetworkBehaviors {
    fn default() -> Self {
        Self::builtin()
    }
}

impl NetworkBehaviors {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut b = Self::empty();
        b.register(DEFAULT_FORWARD, forward::DefaultForward::create);
        b.register(LATENCY_GUARD, latency_guard::LatencyGuard::create);
        b.register(MULTIPATH_FAILOVER, multipath::MultipathFailover::create);
        b.register(DTN_STORE, dtn::DtnStore::create);
        b.register(COMPOSED, composed::Composed::create);
        b
    }

    pub fn register(&mut self, id: &str, factory: NetworkFactory) {
        self.factories.insert(id.to_string(), factory);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn instantiate(&self, id: &str, constants: &ParameterSet) -> Result<Box<dyn SsoLogic>, HookError> {
        let factory = self.factories.get(id).ok_or_else(|| HookError::Unsupported(format!("behavior {id}")))?;
        factory(constants)
    }
}

/// Path constraints shared by every built-in network behavior.
pub(crate) fn constraints_from(params: &ParameterSet) -> Result<PathConstraints, HookError> {
    match params.get("min_bandwidth_mbps") {
        None => Ok(PathConstraints::default()),
        Some(v) => v
            .as_f64()
            .filter(|x| *x >= 0.0)
            .map(PathConstraints::min_bandwidth)
            .ok_or_else(|| HookError::BadParameter("min_bandwidth_mbps".into())),
    }
}

#[cfg(test)]
pub(crate) mod testkit {
    use super::*;
    use crate::domain::Metric;
    use crate::netsim::NetworkSim;

    pub(crate) fn objective(bound: f64) -> PerformanceObjective {
        PerformanceObjective::at_most(Metric::EndToEndLatencyMs, bound)
    }

    /// Allocates the shortest route for `role` and records it in `pool`.
    pub(crate) fn hold(sim: &mut NetworkSim, pool: &mut BTreeMap<String, Path>, role: &str, src: &str, dst: &str) {
        let p = sim.allocate_path("test", src, dst, &PathConstraints::default()).unwrap();
        pool.insert(role.to_string(), p);
    }

    pub(crate) fn ctx<'a>(
        sim: &'a NetworkSim,
        pool: &'a BTreeMap<String, Path>,
        objective: &'a PerformanceObjective,
        src: &'a str,
        dst: &'a str,
    ) -> HookContext<'a> {
        HookContext { net: sim, src, dst, objective, pool, now: 0 }
    }

    pub(crate) fn event(sim: &mut NetworkSim, link: &str, change: crate::netsim::LinkChange) -> NetworkEvent {
        sim.set_link_state(link, change).unwrap().unwrap().event
    }
}
