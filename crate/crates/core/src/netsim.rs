//! Simulated network control: topology, path allocation, link-state mutation
//! and publish-subscribe delivery of link events.
//!
//! Links are bidirectional with symmetric metrics. A path's end-to-end latency
//! is the sum of its link latencies and its bandwidth the bottleneck minimum.
//! Allocation does not consume link capacity.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = String;
pub type LinkId = String;
pub type PathId = u64;
pub type SubscriptionId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub latency_ms: f64,
    pub bandwidth_mbps: f64,
    #[serde(default = "default_up")]
    pub up: bool,
}

fn default_up() -> bool {
    true
}

impl Link {
    pub fn other_end(&self, node: &str) -> Option<&str> {
        if self.a == node {
            Some(&self.b)
        } else if self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }
}

/// On-disk topology document: `{"nodes": [...], "links": [{"id","a","b","latency_ms","bandwidth_mbps"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub nodes: Vec<NodeId>,
    pub links: Vec<Link>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: BTreeSet<NodeId>,
    pub links: BTreeMap<LinkId, Link>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology document does not parse: {0}")]
    Parse(String),
    #[error("duplicate node {0}")]
    DuplicateNode(String),
    #[error("duplicate link {0}")]
    DuplicateLink(String),
    #[error("link endpoint {0} is not a node")]
    DanglingEndpoint(String),
    #[error("link {0} joins a node to itself")]
    SelfLoop(String),
    #[error("link {0} has non-positive latency")]
    NonPositiveLatency(String),
    #[error("link {0} has non-positive bandwidth")]
    NonPositiveBandwidth(String),
}

impl TopologyError {
    /// The node or link id the error names.
    pub fn offender(&self) -> &str {
        match self {
            TopologyError::Parse(s)
            | TopologyError::DuplicateNode(s)
            | TopologyError::DuplicateLink(s)
            | TopologyError::DanglingEndpoint(s)
            | TopologyError::SelfLoop(s)
            | TopologyError::NonPositiveLatency(s)
            | TopologyError::NonPositiveBandwidth(s) => s,
        }
    }
}

pub fn load_topology(doc: &TopologyDoc) -> Result<Topology, TopologyError> {
    let mut topo = Topology::default();
    for n in &doc.nodes {
        if !topo.nodes.insert(n.clone()) {
            return Err(TopologyError::DuplicateNode(n.clone()));
        }
    }
    for l in &doc.links {
        for end in [&l.a, &l.b] {
            if !topo.nodes.contains(end) {
                return Err(TopologyError::DanglingEndpoint(end.clone()));
            }
        }
        if l.a == l.b {
            return Err(TopologyError::SelfLoop(l.id.clone()));
        }
        if !(l.latency_ms > 0.0 && l.latency_ms.is_finite()) {
            return Err(TopologyError::NonPositiveLatency(l.id.clone()));
        }
        if !(l.bandwidth_mbps > 0.0) {
            return Err(TopologyError::NonPositiveBandwidth(l.id.clone()));
        }
        if topo.links.insert(l.id.clone(), l.clone()).is_some() {
            return Err(TopologyError::DuplicateLink(l.id.clone()));
        }
    }
    Ok(topo)
}

pub fn parse_topology(json: &str) -> Result<Topology, TopologyError> {
    let doc: TopologyDoc = serde_json::from_str(json).map_err(|e| TopologyError::Parse(e.to_string()))?;
    load_topology(&doc)
}

impl Topology {
    pub fn to_doc(&self) -> TopologyDoc {
        TopologyDoc { nodes: self.nodes.iter().cloned().collect(), links: self.links.values().cloned().collect() }
    }

    /// Links incident to `node`, in link id order.
    pub fn incident<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Link> + 'a {
        self.links.values().filter(move |l| l.a == node || l.b == node)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathConstraints {
    #[serde(default)]
    pub min_bandwidth_mbps: Option<f64>,
    #[serde(default)]
    pub exclude_links: BTreeSet<LinkId>,
}

impl PathConstraints {
    pub fn min_bandwidth(mbps: f64) -> Self {
        Self { min_bandwidth_mbps: Some(mbps), ..Default::default() }
    }

    fn admits(&self, link: &Link) -> bool {
        link.up
            && self.min_bandwidth_mbps.map_or(true, |min| link.bandwidth_mbps >= min)
            && !self.exclude_links.contains(&link.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub path_id: PathId,
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
    pub owner: String,
}

impl Path {
    pub fn contains_link(&self, link: &str) -> bool {
        self.links.iter().any(|l| l == link)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub latency_ms: f64,
    /// Bottleneck bandwidth; `None` for the empty path (unbounded).
    pub bandwidth_mbps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventType {
    LinkLatencyChanged,
    LinkBandwidthChanged,
    LinkDown,
    LinkUp,
}

impl EventType {
    pub const ALL: [EventType; 4] =
        [EventType::LinkLatencyChanged, EventType::LinkBandwidthChanged, EventType::LinkDown, EventType::LinkUp];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkValue {
    Metric(f64),
    Status(bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEvent {
    pub event_type: EventType,
    pub link_id: LinkId,
    pub old: LinkValue,
    pub new: LinkValue,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkChange {
    LatencyMs(f64),
    BandwidthMbps(f64),
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub id: SubscriptionId,
    pub subscriber: String,
    pub event_types: BTreeSet<EventType>,
    pub links: Option<BTreeSet<LinkId>>,
}

impl Subscription {
    pub fn matches(&self, event: &NetworkEvent) -> bool {
        self.event_types.contains(&event.event_type)
            && self.links.as_ref().map_or(true, |f| f.contains(&event.link_id))
    }
}

/// Result of a state-changing link mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct Publication {
    pub event: NetworkEvent,
    pub delivered_to: Vec<SubscriptionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedAllocation {
    pub id: u64,
    pub owner: String,
    pub tag: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("no route from {src} to {dst}")]
    NoRoute { src: String, dst: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error("path {0} already released")]
    AlreadyReleased(PathId),
    #[error("path refers to removed link {0}")]
    StalePath(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Failure reported by a network-control service over the wire.
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
}

impl NetError {
    pub fn code(&self) -> &'static str {
        match self {
            NetError::UnknownNode(_) => "UnknownNode",
            NetError::NoRoute { .. } => "NoRoute",
            NetError::NotFound(_) => "NotFound",
            NetError::AlreadyReleased(_) => "AlreadyReleased",
            NetError::StalePath(_) => "StalePath",
            NetError::InvalidArgument(_) => "InvalidArgument",
            NetError::Remote { .. } => "Remote",
        }
    }
}

/// Candidate route: total latency, node sequence, link sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub latency_ms: f64,
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
}

impl Route {
    /// Ordering used for tie-breaking: latency, then node sequence, then link sequence.
    pub fn cmp_key(&self, other: &Route) -> Ordering {
        self.latency_ms
            .total_cmp(&other.latency_ms)
            .then_with(|| self.nodes.cmp(&other.nodes))
            .then_with(|| self.links.cmp(&other.links))
    }
}

struct HeapEntry(Route);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap
        other.0.cmp_key(&self.0)
    }
}

/// Minimum-latency simple route over admitted links, ties broken by the
/// lexicographically smallest node sequence.
pub fn shortest_route(topo: &Topology, src: &str, dst: &str, constraints: &PathConstraints) -> Option<Route> {
    if src == dst {
        return Some(Route { latency_ms: 0.0, nodes: vec![src.to_string()], links: vec![] });
    }
    let mut best: BTreeMap<NodeId, Route> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    let start = Route { latency_ms: 0.0, nodes: vec![src.to_string()], links: vec![] };
    best.insert(src.to_string(), start.clone());
    heap.push(HeapEntry(start));
    while let Some(HeapEntry(route)) = heap.pop() {
        let at = route.nodes.last().expect("routes are non-empty").clone();
        if best.get(&at).is_some_and(|b| b.cmp_key(&route) != Ordering::Equal) {
            continue;
        }
        if at == dst {
            return Some(route);
        }
        for link in topo.incident(&at) {
            if !constraints.admits(link) {
                continue;
            }
            let next = link.other_end(&at).expect("incident link").to_string();
            if route.nodes.contains(&next) {
                continue;
            }
            let mut cand = route.clone();
            cand.latency_ms += link.latency_ms;
            cand.nodes.push(next.clone());
            cand.links.push(link.id.clone());
            let better = best.get(&next).map_or(true, |b| cand.cmp_key(b) == Ordering::Less);
            if better {
                best.insert(next, cand.clone());
                heap.push(HeapEntry(cand));
            }
        }
    }
    None
}

/// All simple routes between `src` and `dst` over admitted links, stopping
/// after `limit` routes.
pub fn enumerate_routes(
    topo: &Topology,
    src: &str,
    dst: &str,
    constraints: &PathConstraints,
    limit: usize,
) -> Vec<Route> {
    fn walk(
        topo: &Topology,
        dst: &str,
        constraints: &PathConstraints,
        route: &mut Route,
        out: &mut Vec<Route>,
        limit: usize,
    ) {
        if out.len() >= limit {
            return;
        }
        let at = route.nodes.last().unwrap().clone();
        if at == dst {
            out.push(route.clone());
            return;
        }
        for link in topo.incident(&at) {
            if !constraints.admits(link) {
                continue;
            }
            let next = link.other_end(&at).unwrap().to_string();
            if route.nodes.contains(&next) {
                continue;
            }
            route.latency_ms += link.latency_ms;
            route.nodes.push(next);
            route.links.push(link.id.clone());
            walk(topo, dst, constraints, route, out, limit);
            route.links.pop();
            route.nodes.pop();
            route.latency_ms -= link.latency_ms;
        }
    }
    let mut out = Vec::new();
    let mut route = Route { latency_ms: 0.0, nodes: vec![src.to_string()], links: vec![] };
    walk(topo, dst, constraints, &mut route, &mut out, limit);
    out
}

const DISJOINT_SEARCH_LIMIT: usize = 200_000;

/// A primary route plus a link-disjoint backup. The primary is the best route
/// that admits any disjoint backup; the backup is the best such backup.
pub fn disjoint_pair(
    topo: &Topology,
    src: &str,
    dst: &str,
    constraints: &PathConstraints,
) -> Option<(Route, Route)> {
    let primary = shortest_route(topo, src, dst, constraints)?;
    let mut without = constraints.clone();
    without.exclude_links.extend(primary.links.iter().cloned());
    if let Some(backup) = shortest_route(topo, src, dst, &without) {
        return Some((primary, backup));
    }
    // The greedy choice can block every backup; fall back to a full search.
    let mut routes = enumerate_routes(topo, src, dst, constraints, DISJOINT_SEARCH_LIMIT);
    routes.sort_by(|a, b| a.cmp_key(b));
    for (i, p) in routes.iter().enumerate() {
        let backup = routes
            .iter()
            .enumerate()
            .filter(|(j, q)| *j != i && q.links.iter().all(|l| !p.links.contains(l)))
            .map(|(_, q)| q)
            .next();
        if let Some(q) = backup {
            return Some((p.clone(), q.clone()));
        }
    }
    None
}

/// Single-owner simulator core. Callers needing shared access wrap it in a
/// mutex; every mutation is totally ordered, which makes event `seq` well defined.
#[derive(Debug, Clone, Default)]
pub struct NetworkSim {
    topology: Topology,
    allocations: BTreeMap<PathId, Path>,
    released: BTreeSet<PathId>,
    next_path_id: PathId,
    tagged: BTreeMap<u64, TaggedAllocation>,
    next_tagged_id: u64,
    subscriptions: BTreeMap<SubscriptionId, Subscription>,
    next_subscription: SubscriptionId,
    mailboxes: BTreeMap<SubscriptionId, VecDeque<NetworkEvent>>,
    next_seq: u64,
    log: Vec<NetworkEvent>,
    hosts: BTreeMap<String, NodeId>,
}

impl NetworkSim {
    pub fn new(topology: Topology) -> Self {
        Self { topology, next_path_id: 1, next_tagged_id: 1, next_subscription: 1, next_seq: 1, ..Default::default() }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn link(&self, id: &str) -> Option<&Link> {
        self.topology.links.get(id)
    }

    /// Binds a host address to the node it is attached to.
    pub fn attach_host(&mut self, ip: impl Into<String>, node: impl Into<NodeId>) -> Result<(), NetError> {
        let node = node.into();
        if !self.topology.nodes.contains(&node) {
            return Err(NetError::UnknownNode(node));
        }
        self.hosts.insert(ip.into(), node);
        Ok(())
    }

    pub fn resolve_host(&self, ip: &str) -> Option<NodeId> {
        self.hosts.get(ip).cloned()
    }

    fn check_nodes(&self, src: &str, dst: &str) -> Result<(), NetError> {
        for n in [src, dst] {
            if !self.topology.nodes.contains(n) {
                return Err(NetError::UnknownNode(n.to_string()));
            }
        }
        Ok(())
    }

    /// Computes the route `allocate_path` would take, without registering it.
    pub fn find_route(&self, src: &str, dst: &str, constraints: &PathConstraints) -> Result<Route, NetError> {
        self.check_nodes(src, dst)?;
        shortest_route(&self.topology, src, dst, constraints)
            .ok_or_else(|| NetError::NoRoute { src: src.to_string(), dst: dst.to_string() })
    }

    pub fn find_disjoint_pair(
        &self,
        src: &str,
        dst: &str,
        constraints: &PathConstraints,
    ) -> Result<(Route, Route), NetError> {
        self.check_nodes(src, dst)?;
        disjoint_pair(&self.topology, src, dst, constraints)
            .ok_or_else(|| NetError::NoRoute { src: src.to_string(), dst: dst.to_string() })
    }

    pub fn allocate_path(
        &mut self,
        owner: &str,
        src: &str,
        dst: &str,
        constraints: &PathConstraints,
    ) -> Result<Path, NetError> {
        let route = self.find_route(src, dst, constraints)?;
        Ok(self.register(owner, route))
    }

    /// Registers an explicit route. Every link must exist and be up.
    pub fn allocate_route(&mut self, owner: &str, route: &Route) -> Result<Path, NetError> {
        for (i, id) in route.links.iter().enumerate() {
            let link = self.link(id).ok_or_else(|| NetError::NotFound(format!("link {id}")))?;
            let (a, b) = (&route.nodes[i], &route.nodes[i + 1]);
            if link.other_end(a) != Some(b.as_str()) {
                return Err(NetError::InvalidArgument(format!("link {id} does not join {a} and {b}")));
            }
            if !link.up {
                return Err(NetError::NoRoute { src: a.clone(), dst: b.clone() });
            }
        }
        Ok(self.register(owner, route.clone()))
    }

    fn register(&mut self, owner: &str, route: Route) -> Path {
        let path = Path { path_id: self.next_path_id, nodes: route.nodes, links: route.links, owner: owner.to_string() };
        self.next_path_id += 1;
        self.allocations.insert(path.path_id, path.clone());
        path
    }

    pub fn release_path(&mut self, path_id: PathId) -> Result<(), NetError> {
        if self.allocations.remove(&path_id).is_some() {
            self.released.insert(path_id);
            Ok(())
        } else if self.released.contains(&path_id) {
            Err(NetError::AlreadyReleased(path_id))
        } else {
            Err(NetError::NotFound(format!("path {path_id}")))
        }
    }

    pub fn allocation(&self, path_id: PathId) -> Option<&Path> {
        self.allocations.get(&path_id)
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Path> {
        self.allocations.values()
    }

    pub fn allocation_count(&self) -> usize {
        self.allocations.len()
    }

    /// Opaque non-path resource (VPN, firewall, ...). Allocation has no semantics
    /// beyond bookkeeping.
    pub fn allocate_tagged(&mut self, owner: &str, tag: &str) -> u64 {
        let id = self.next_tagged_id;
        self.next_tagged_id += 1;
        self.tagged.insert(id, TaggedAllocation { id, owner: owner.to_string(), tag: tag.to_string() });
        id
    }

    pub fn release_tagged(&mut self, id: u64) -> Result<(), NetError> {
        self.tagged.remove(&id).map(|_| ()).ok_or_else(|| NetError::NotFound(format!("resource {id}")))
    }

    pub fn tagged_count(&self) -> usize {
        self.tagged.len()
    }

    pub fn path_metrics(&self, path: &Path) -> Result<PathMetrics, NetError> {
        let mut latency = 0.0;
        let mut bandwidth: Option<f64> = None;
        for id in &path.links {
            let link = self.link(id).ok_or_else(|| NetError::StalePath(id.clone()))?;
            latency += link.latency_ms;
            bandwidth = Some(bandwidth.map_or(link.bandwidth_mbps, |b| b.min(link.bandwidth_mbps)));
        }
        Ok(PathMetrics { latency_ms: latency, bandwidth_mbps: bandwidth })
    }

    /// True when every link of the path exists and is up.
    pub fn path_is_up(&self, path: &Path) -> bool {
        path.links.iter().all(|id| self.link(id).is_some_and(|l| l.up))
    }

    pub fn remove_link(&mut self, id: &str) -> Result<Link, NetError> {
        self.topology.links.remove(id).ok_or_else(|| NetError::NotFound(format!("link {id}")))
    }

    pub fn subscribe(
        &mut self,
        subscriber: &str,
        event_types: impl IntoIterator<Item = EventType>,
        links: Option<BTreeSet<LinkId>>,
    ) -> SubscriptionId {
        let id = self.next_subscription;
        self.next_subscription += 1;
        self.subscriptions.insert(
            id,
            Subscription { id, subscriber: subscriber.to_string(), event_types: event_types.into_iter().collect(), links },
        );
        self.mailboxes.insert(id, VecDeque::new());
        id
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) -> bool {
        self.mailboxes.remove(&id);
        self.subscriptions.remove(&id).is_some()
    }

    pub fn subscription(&self, id: SubscriptionId) -> Option<&Subscription> {
        self.subscriptions.get(&id)
    }

    pub fn subscription_count(&self) -> usize {
        self.subscriptions.len()
    }

    /// Drains events delivered to a subscription, in seq order.
    pub fn take_events(&mut self, id: SubscriptionId) -> Vec<NetworkEvent> {
        self.mailboxes.get_mut(&id).map(|q| q.drain(..).collect()).unwrap_or_default()
    }

    /// Full publication log, in seq order.
    pub fn event_log(&self) -> &[NetworkEvent] {
        &self.log
    }

    /// Applies a link change. Returns `None` when the change leaves the link
    /// state unmodified, in which case nothing is published.
    pub fn set_link_state(&mut self, link_id: &str, change: LinkChange) -> Result<Option<Publication>, NetError> {
        let link = self.topology.links.get_mut(link_id).ok_or_else(|| NetError::NotFound(format!("link {link_id}")))?;
        let (event_type, old, new) = match change {
            LinkChange::LatencyMs(v) => {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(NetError::InvalidArgument(format!("latency {v}")));
                }
                if link.latency_ms == v {
                    return Ok(None);
                }
                let old = std::mem::replace(&mut link.latency_ms, v);
                (EventType::LinkLatencyChanged, LinkValue::Metric(old), LinkValue::Metric(v))
            }
            LinkChange::BandwidthMbps(v) => {
                if !(v > 0.0) {
                    return Err(NetError::InvalidArgument(format!("bandwidth {v}")));
                }
                if link.bandwidth_mbps == v {
                    return Ok(None);
                }
                let old = std::mem::replace(&mut link.bandwidth_mbps, v);
                (EventType::LinkBandwidthChanged, LinkValue::Metric(old), LinkValue::Metric(v))
            }
            LinkChange::Down => {
                if !link.up {
                    return Ok(None);
                }
                link.up = false;
                (EventType::LinkDown, LinkValue::Status(true), LinkValue::Status(false))
            }
            LinkChange::Up => {
                if link.up {
                    return Ok(None);
                }
                link.up = true;
                (EventType::LinkUp, LinkValue::Status(false), LinkValue::Status(true))
            }
        };
        let event = NetworkEvent { event_type, link_id: link_id.to_string(), old, new, seq: self.next_seq };
        self.next_seq += 1;
        self.log.push(event.clone());
        let mut delivered_to = Vec::new();
        for (id, sub) in &self.subscriptions {
            if sub.matches(&event) {
                self.mailboxes.entry(*id).or_default().push_back(event.clone());
                delivered_to.push(*id);
            }
        }
        Ok(Some(Publication { event, delivered_to }))
    }
}
