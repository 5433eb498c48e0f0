//! Delay-tolerant store-and-forward. Sends made while the destination is
//! unreachable are parked in a per-session blob store and flushed in FIFO
//! order once a route is available again. `undo_send`/`redo_send` give a
//! single level of history over the unflushed payloads.

use std::collections::{BTreeMap, VecDeque};

use serde_json::json;

use super::{constraints_from, Action, DataInput, HookContext, HookError, HookResult, SsoLogic, DTN_STORE, PRIMARY};
use crate::domain::ParameterSet;
use crate::netsim::{NetworkEvent, PathConstraints};

pub const DEFAULT_CAPACITY: usize = 16;
pub const UNDO_SEND: &str = "undo_send";
pub const REDO_SEND: &str = "redo_send";

/// Local stand-in for cloud storage, keyed per session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlobStore {
    blobs: BTreeMap<String, Vec<u8>>,
}

impl BlobStore {
    pub fn put(&mut self, key: &str, bytes: Vec<u8>) {
        self.blobs.insert(key.to_string(), bytes);
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.blobs.get(key).map(Vec::as_slice)
    }

    pub fn take(&mut self, key: &str) -> Option<Vec<u8>> {
        self.blobs.remove(key)
    }

    pub fn list(&self) -> Vec<&str> {
        self.blobs.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DtnStore {
    constraints: PathConstraints,
    capacity: usize,
    blobs: BlobStore,
    /// Keys of unflushed payloads, oldest first.
    pending: VecDeque<String>,
    undone: Option<Vec<u8>>,
    next_key: u64,
    lost: u64,
    flushed: u64,
}

impl DtnStore {
    pub fn create(params: &ParameterSet) -> Result<Box<dyn SsoLogic>, HookError> {
        let capacity = match params.get("capacity") {
            None => DEFAULT_CAPACITY,
            Some(v) => v
                .as_u64()
                .filter(|c| *c >= 1)
                .ok_or_else(|| HookError::BadParameter("capacity".into()))? as usize,
        };
        Ok(Box::new(Self {
            constraints: constraints_from(params)?,
            capacity,
            blobs: BlobStore::default(),
            pending: VecDeque::new(),
            undone: None,
            next_key: 0,
            lost: 0,
            flushed: 0,
        }))
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn park(&mut self, payload: Vec<u8>, out: &mut Vec<Action>) {
        let key = format!("{:08}", self.next_key);
        self.next_key += 1;
        out.push(Action::Buffer { key: key.clone(), bytes: payload.len() });
        self.blobs.put(&key, payload);
        self.pending.push_back(key);
        if self.pending.len() > self.capacity {
            let oldest = self.pending.pop_front().expect("non-empty");
            let bytes = self.blobs.take(&oldest).map_or(0, |b| b.len());
            self.lost += 1;
            out.push(Action::Drop { reason: "buffer overflow".into(), bytes });
        }
    }

    fn flush(&mut self, out: &mut Vec<Action>) {
        while let Some(key) = self.pending.pop_front() {
            if let Some(bytes) = self.blobs.take(&key) {
                self.flushed += 1;
                out.push(Action::forward(PRIMARY, bytes));
            }
        }
    }

    /// Makes sure a usable path is held, reallocating a broken one when a
    /// route exists. Returns whether the destination is reachable.
    fn connect(&mut self, ctx: &HookContext<'_>, out: &mut Vec<Action>) -> bool {
        if ctx.path_up(PRIMARY) {
            return true;
        }
        match ctx.net.find_route(ctx.src, ctx.dst, &self.constraints) {
            Ok(route) => {
                if ctx.pool.contains_key(PRIMARY) {
                    out.push(Action::ReleasePath { role: PRIMARY.into() });
                }
                out.push(Action::allocate_route(PRIMARY, &route));
                true
            }
            // The broken path stays held so that its recovery reaches us.
            Err(_) => false,
        }
    }
}

impl SsoLogic for DtnStore {
    fn behavior_id(&self) -> &str {
        DTN_STORE
    }

    fn on_construct(&mut self, _ctx: &HookContext<'_>) -> HookResult {
        Ok(vec![Action::allocate(PRIMARY, &self.constraints)])
    }

    fn on_path_event(&mut self, ctx: &HookContext<'_>, _event: &NetworkEvent) -> HookResult {
        let mut out = Vec::new();
        if self.connect(ctx, &mut out) {
            self.flush(&mut out);
        }
        Ok(out)
    }

    fn on_data(&mut self, ctx: &HookContext<'_>, input: DataInput) -> HookResult {
        let mut out = Vec::new();
        match input {
            DataInput::Payload(p) => {
                self.undone = None;
                if self.connect(ctx, &mut out) {
                    self.flush(&mut out);
                    out.push(Action::forward(PRIMARY, p));
                } else {
                    self.park(p, &mut out);
                }
            }
            DataInput::Control(verb) if verb == UNDO_SEND => {
                let key = self.pending.pop_back().ok_or(HookError::NothingToUndo)?;
                self.undone = self.blobs.take(&key);
                out.push(Action::Note { what: "undo".into(), detail: key });
            }
            DataInput::Control(verb) if verb == REDO_SEND => {
                let payload = self.undone.take().ok_or(HookError::NothingToRedo)?;
                out.push(Action::Note { what: "redo".into(), detail: String::new() });
                self.park(payload, &mut out);
                if self.connect(ctx, &mut out) {
                    self.flush(&mut out);
                }
            }
            DataInput::Control(verb) => return Err(HookError::Unsupported(verb)),
        }
        Ok(out)
    }

    fn variables(&self) -> serde_json::Value {
        json!({
            "pending": self.pending.len(),
            "lost": self.lost,
            "flushed": self.flushed,
            "capacity": self.capacity,
            "blobs": self.blobs.list(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behaviors::testkit::*;
    use crate::netsim::tests::triangle;
    use crate::netsim::{LinkChange, NetworkSim, Path};

    struct Rig {
        sim: NetworkSim,
        pool: BTreeMap<String, Path>,
        logic: Box<dyn SsoLogic>,
        delivered: Vec<Vec<u8>>,
    }

    impl Rig {
        fn new(capacity: u64) -> Self {
            let mut sim = NetworkSim::new(triangle());
            let mut pool = BTreeMap::new();
            hold(&mut sim, &mut pool, PRIMARY, "A", "B");
            let mut params = ParameterSet::new();
            params.insert("capacity".into(), json!(capacity));
            Rig { sim, pool, logic: DtnStore::create(&params).unwrap(), delivered: vec![] }
        }

        /// Executes actions the way the proxy would for path and forward actions.
        fn run(&mut self, acts: Vec<Action>) {
            for a in acts {
                match a {
                    Action::ReleasePath { role } => {
                        let p = self.pool.remove(&role).unwrap();
                        self.sim.release_path(p.path_id).unwrap();
                    }
                    Action::AllocatePath { role, route: Some(r), .. } => {
                        let p = self.sim.allocate_route("t", &r).unwrap();
                        self.pool.insert(role, p);
                    }
                    Action::Forward { role, payload } => {
                        assert!(self.sim.path_is_up(&self.pool[&role]));
                        self.delivered.push(payload);
                    }
                    _ => {}
                }
            }
        }

        fn input(&mut self, input: DataInput) -> Result<(), HookError> {
            let obj = objective(100.0);
            let acts = self.logic.on_data(&ctx(&self.sim, &self.pool, &obj, "A", "B"), input)?;
            self.run(acts);
            Ok(())
        }

        fn send(&mut self, p: &str) {
            self.input(DataInput::Payload(p.as_bytes().to_vec())).unwrap();
        }

        fn control(&mut self, verb: &str) -> Result<(), HookError> {
            self.input(DataInput::Control(verb.into()))
        }

        fn set(&mut self, link: &str, change: LinkChange) {
            let ev = event(&mut self.sim, link, change);
            let obj = objective(100.0);
            let affected = self.pool.values().any(|p| p.contains_link(&ev.link_id));
            if affected {
                let acts = self.logic.on_path_event(&ctx(&self.sim, &self.pool, &obj, "A", "B"), &ev).unwrap();
                self.run(acts);
            }
        }

        /// Cuts the detour first so the held A-B path stays in the pool.
        fn disconnect(&mut self) {
            self.set("AC", LinkChange::Down);
            self.set("BC", LinkChange::Down);
            self.set("AB", LinkChange::Down);
        }

        fn delivered(&self) -> Vec<String> {
            self.delivered.iter().map(|b| String::from_utf8(b.clone()).unwrap()).collect()
        }
    }

    #[test]
    fn connected_sends_go_straight_through() {
        let mut r = Rig::new(4);
        r.send("a");
        assert_eq!(r.delivered(), vec!["a"]);
        assert_eq!(r.control(UNDO_SEND), Err(HookError::NothingToUndo));
    }

    #[test]
    fn undo_then_reconnect_delivers_remaining() {
        let mut r = Rig::new(4);
        r.disconnect();
        r.send("a");
        r.send("b");
        r.control(UNDO_SEND).unwrap();
        assert!(r.delivered().is_empty());
        r.set("AB", LinkChange::Up);
        assert_eq!(r.delivered(), vec!["a"]);
    }

    #[test]
    fn undo_redo_is_an_inverse_pair() {
        let mut r = Rig::new(4);
        r.disconnect();
        r.send("a");
        r.control(UNDO_SEND).unwrap();
        r.control(REDO_SEND).unwrap();
        assert_eq!(r.control(REDO_SEND), Err(HookError::NothingToRedo));
        r.set("AB", LinkChange::Up);
        assert_eq!(r.delivered(), vec!["a"]);
    }

    #[test]
    fn new_send_clears_redo_history() {
        let mut r = Rig::new(4);
        r.disconnect();
        r.send("a");
        r.control(UNDO_SEND).unwrap();
        r.send("b");
        assert_eq!(r.control(REDO_SEND), Err(HookError::NothingToRedo));
    }

    #[test]
    fn overflow_drops_oldest_and_counts_loss() {
        let mut r = Rig::new(2);
        r.disconnect();
        r.send("a");
        r.send("b");
        r.send("c");
        assert_eq!(r.logic.variables()["lost"], 1);
        r.set("AB", LinkChange::Up);
        assert_eq!(r.delivered(), vec!["b", "c"]);
    }

    #[test]
    fn reroutes_instead_of_buffering_when_a_route_exists() {
        let mut r = Rig::new(4);
        r.set("AB", LinkChange::Down);
        r.send("a");
        assert_eq!(r.delivered(), vec!["a"]);
        assert_eq!(r.pool[PRIMARY].nodes, vec!["A", "C", "B"]);
    }

    #[test]
    fn blob_store_put_get_list() {
        let mut b = BlobStore::default();
        b.put("k1", vec![1]);
        b.put("k0", vec![0]);
        assert_eq!(b.list(), vec!["k0", "k1"]);
        assert_eq!(b.get("k1"), Some(&[1u8][..]));
        assert_eq!(b.take("k1"), Some(vec![1]));
        assert_eq!(b.get("k1"), None);
    }
}
