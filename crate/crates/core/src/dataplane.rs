//! Simulated data plane: an endpoint table of echo servers, sinks and
//! listeners, reachable both by store sessions (payloads forwarded over an
//! allocated path) and by plain legacy sockets (direct transport).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::Peer;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DataPlaneError {
    #[error("no endpoint at {0}")]
    Unreachable(String),
    #[error("port {0} already bound")]
    PortInUse(String),
    #[error("stream closed")]
    Closed,
}

/// How a store session hands payloads to their destination.
pub trait DataPlane: Send {
    /// Delivers one payload; returns the payloads the endpoint sends back.
    fn deliver(&mut self, from_ip: &str, dst: &Peer, payload: &[u8]) -> Result<Vec<Vec<u8>>, DataPlaneError>;
}

/// Direct (non-store) transport used by legacy sockets.
pub trait DirectNet: Send {
    fn connect(&mut self, from_ip: &str, dst: &Peer) -> Result<Box<dyn DirectStream>, DataPlaneError>;
    fn listen(&mut self, ip: &str, port: u16) -> Result<Box<dyn DirectListener>, DataPlaneError>;
}

pub trait DirectStream: Send {
    fn send(&mut self, payload: &[u8]) -> Result<(), DataPlaneError>;
    /// Next received payload, if any has arrived.
    fn try_recv(&mut self) -> Result<Option<Vec<u8>>, DataPlaneError>;
    fn close(&mut self);
}

pub trait DirectListener: Send {
    fn accept(&mut self) -> Option<Box<dyn DirectStream>>;
    fn close(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    /// Replies with every payload it receives.
    Echo,
    /// Records payloads, never replies.
    Sink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub from_ip: String,
    pub dst: String,
    pub via: Via,
    #[serde(with = "crate::wire::b64")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Via {
    Store,
    Legacy,
}

#[derive(Debug, Default)]
struct Duplex {
    /// Payloads waiting for the connecting side.
    to_client: VecDeque<Vec<u8>>,
    /// Payloads waiting for the accepting side.
    to_server: VecDeque<Vec<u8>>,
    closed: bool,
}

#[derive(Debug, Default)]
pub struct SimDataPlane {
    endpoints: BTreeMap<(String, u16), EndpointKind>,
    listeners: BTreeMap<(String, u16), VecDeque<u64>>,
    streams: BTreeMap<u64, Duplex>,
    next_stream: u64,
    deliveries: Vec<Delivery>,
    /// Addresses that currently refuse everything (simulated outage).
    down: BTreeSet<String>,
}

fn key(ip: &str, port: u16) -> (String, u16) {
    (ip.to_string(), port)
}

impl SimDataPlane {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_endpoint(&mut self, ip: &str, port: u16, kind: EndpointKind) -> Result<(), DataPlaneError> {
        let k = key(ip, port);
        if self.endpoints.contains_key(&k) || self.listeners.contains_key(&k) {
            return Err(DataPlaneError::PortInUse(format!("{ip}:{port}")));
        }
        self.endpoints.insert(k, kind);
        Ok(())
    }

    pub fn set_host_down(&mut self, ip: &str, down: bool) {
        if down {
            self.down.insert(ip.to_string());
        } else {
            self.down.remove(ip);
        }
    }

    /// Every payload that reached an endpoint, in arrival order.
    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn delivered_to(&self, ip: &str, port: u16) -> Vec<&Delivery> {
        let dst = format!("{ip}:{port}");
        self.deliveries.iter().filter(|d| d.dst == dst).collect()
    }

    fn reach(&mut self, from_ip: &str, dst: &Peer, payload: &[u8], via: Via) -> Result<Vec<Vec<u8>>, DataPlaneError> {
        let addr = format!("{}:{}", dst.ip, dst.port);
        if self.down.contains(&dst.ip) {
            return Err(DataPlaneError::Unreachable(addr));
        }
        let kind = *self.endpoints.get(&key(&dst.ip, dst.port)).ok_or(DataPlaneError::Unreachable(addr.clone()))?;
        self.deliveries.push(Delivery { from_ip: from_ip.to_string(), dst: addr, via, payload: payload.to_vec() });
        Ok(match kind {
            EndpointKind::Echo => vec![payload.to_vec()],
            EndpointKind::Sink => vec![],
        })
    }

    fn bind(&mut self, ip: &str, port: u16) -> Result<(), DataPlaneError> {
        let k = key(ip, port);
        if self.endpoints.contains_key(&k) || self.listeners.contains_key(&k) {
            return Err(DataPlaneError::PortInUse(format!("{ip}:{port}")));
        }
        self.listeners.insert(k, VecDeque::new());
        Ok(())
    }

    fn new_stream(&mut self) -> u64 {
        self.next_stream += 1;
        self.streams.insert(self.next_stream, Duplex::default());
        self.next_stream
    }
}

/// Shared handle used by every party of an in-process world.
pub type SharedPlane = Arc<Mutex<SimDataPlane>>;

pub fn lock<T: ?Sized>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl DataPlane for SharedPlane {
    fn deliver(&mut self, from_ip: &str, dst: &Peer, payload: &[u8]) -> Result<Vec<Vec<u8>>, DataPlaneError> {
        lock(self).reach(from_ip, dst, payload, Via::Store)
    }
}

enum StreamTarget {
    /// Connected to a listener through a duplex stream.
    Pipe { id: u64, client: bool },
    /// Connected to an echo/sink endpoint.
    Endpoint { from_ip: String, dst: Peer, inbox: VecDeque<Vec<u8>> },
}

struct SimStream {
    plane: SharedPlane,
    target: StreamTarget,
    closed: bool,
}

impl DirectStream for SimStream {
    fn send(&mut self, payload: &[u8]) -> Result<(), DataPlaneError> {
        if self.closed {
            return Err(DataPlaneError::Closed);
        }
        let mut plane = lock(&self.plane);
        match &mut self.target {
            StreamTarget::Endpoint { from_ip, dst, inbox } => {
                let replies = plane.reach(from_ip, dst, payload, Via::Legacy)?;
                inbox.extend(replies);
            }
            StreamTarget::Pipe { id, client } => {
                let d = plane.streams.get_mut(id).ok_or(DataPlaneError::Closed)?;
                if d.closed {
                    return Err(DataPlaneError::Closed);
                }
                if *client {
                    d.to_server.push_back(payload.to_vec());
                } else {
                    d.to_client.push_back(payload.to_vec());
                }
            }
        }
        Ok(())
    }

    fn try_recv(&mut self) -> Result<Option<Vec<u8>>, DataPlaneError> {
        if self.closed {
            return Err(DataPlaneError::Closed);
        }
        match &mut self.target {
            StreamTarget::Endpoint { inbox, .. } => Ok(inbox.pop_front()),
            StreamTarget::Pipe { id, client } => {
                let mut plane = lock(&self.plane);
                let d = plane.streams.get_mut(id).ok_or(DataPlaneError::Closed)?;
                let q = if *client { &mut d.to_client } else { &mut d.to_server };
                match q.pop_front() {
                    Some(p) => Ok(Some(p)),
                    None if d.closed => Err(DataPlaneError::Closed),
                    None => Ok(None),
                }
            }
        }
    }

    fn close(&mut self) {
        self.closed = true;
        if let StreamTarget::Pipe { id, .. } = &self.target {
            if let Some(d) = lock(&self.plane).streams.get_mut(id) {
                d.closed = true;
            }
        }
    }
}

struct SimListener {
    plane: SharedPlane,
    addr: (String, u16),
}

impl DirectListener for SimListener {
    fn accept(&mut self) -> Option<Box<dyn DirectStream>> {
        let id = lock(&self.plane).listeners.get_mut(&self.addr)?.pop_front()?;
        Some(Box::new(SimStream { plane: self.plane.clone(), target: StreamTarget::Pipe { id, client: false }, closed: false }))
    }

    fn close(&mut self) {
        lock(&self.plane).listeners.remove(&self.addr);
    }
}

impl DirectNet for SharedPlane {
    fn connect(&mut self, from_ip: &str, dst: &Peer) -> Result<Box<dyn DirectStream>, DataPlaneError> {
        let mut plane = lock(self);
        let addr = format!("{}:{}", dst.ip, dst.port);
        if plane.down.contains(&dst.ip) {
            return Err(DataPlaneError::Unreachable(addr));
        }
        let k = key(&dst.ip, dst.port);
        let target = if plane.listeners.contains_key(&k) {
            let id = plane.new_stream();
            plane.listeners.get_mut(&k).expect("listener").push_back(id);
            StreamTarget::Pipe { id, client: true }
        } else if plane.endpoints.contains_key(&k) {
            StreamTarget::Endpoint { from_ip: from_ip.to_string(), dst: dst.clone(), inbox: VecDeque::new() }
        } else {
            return Err(DataPlaneError::Unreachable(addr));
        };
        drop(plane);
        Ok(Box::new(SimStream { plane: self.clone(), target, closed: false }))
    }

    fn listen(&mut self, ip: &str, port: u16) -> Result<Box<dyn DirectListener>, DataPlaneError> {
        lock(self).bind(ip, port)?;
        Ok(Box::new(SimListener { plane: self.clone(), addr: key(ip, port) }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane() -> SharedPlane {
        let p = SimDataPlane::new();
        let shared = Arc::new(Mutex::new(p));
        lock(&shared).add_endpoint("10.0.0.9", 7, EndpointKind::Echo).unwrap();
        lock(&shared).add_endpoint("10.0.0.9", 9, EndpointKind::Sink).unwrap();
        shared
    }

    #[test]
    fn echo_and_sink_over_direct_streams() {
        let mut p = plane();
        let mut s = p.connect("10.0.0.1", &Peer::new("tcp", "10.0.0.9", 7)).unwrap();
        s.send(b"abc").unwrap();
        assert_eq!(s.try_recv().unwrap(), Some(b"abc".to_vec()));
        let mut sink = p.connect("10.0.0.1", &Peer::new("tcp", "10.0.0.9", 9)).unwrap();
        sink.send(b"x").unwrap();
        assert_eq!(sink.try_recv().unwrap(), None);
        assert_eq!(lock(&p).delivered_to("10.0.0.9", 9).len(), 1);
        s.close();
        assert_eq!(s.send(b"z"), Err(DataPlaneError::Closed));
    }

    #[test]
    fn listener_pairs_streams_and_rejects_double_bind() {
        let mut p = plane();
        let mut l = p.listen("10.0.0.2", 7000).unwrap();
        assert!(matches!(p.listen("10.0.0.2", 7000), Err(DataPlaneError::PortInUse(_))));
        let mut c = p.connect("10.0.0.1", &Peer::new("tcp", "10.0.0.2", 7000)).unwrap();
        let mut srv = l.accept().expect("accepted");
        c.send(b"hi").unwrap();
        assert_eq!(srv.try_recv().unwrap(), Some(b"hi".to_vec()));
        srv.send(b"yo").unwrap();
        assert_eq!(c.try_recv().unwrap(), Some(b"yo".to_vec()));
        srv.close();
        assert_eq!(c.try_recv(), Err(DataPlaneError::Closed));
    }

    #[test]
    fn unknown_or_down_destinations_are_unreachable() {
        let mut p = plane();
        assert!(p.connect("a", &Peer::new("tcp", "10.0.0.3", 1)).is_err());
        lock(&p).set_host_down("10.0.0.9", true);
        assert!(p.deliver("a", &Peer::new("tcp", "10.0.0.9", 7), b"x").is_err());
    }
}
