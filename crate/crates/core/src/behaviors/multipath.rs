//! Primary plus link-disjoint backup path; traffic moves to the backup when
//! the primary loses a link.

use serde_json::json;

use super::{
    constraints_from, Action, DataInput, HookContext, HookError, HookResult, SsoLogic, BACKUP, MULTIPATH_FAILOVER,
    PRIMARY,
};
use crate::domain::ParameterSet;
use crate::netsim::{EventType, NetworkEvent, PathConstraints};

#[derive(Debug, Clone)]
pub struct MultipathFailover {
    constraints: PathConstraints,
    active: &'static str,
    switches: u64,
    dropped: u64,
}

impl MultipathFailover {
    pub fn create(params: &ParameterSet) -> Result<Box<dyn SsoLogic>, HookError> {
        Ok(Box::new(Self { constraints: constraints_from(params)?, active: PRIMARY, switches: 0, dropped: 0 }))
    }

    fn other(&self) -> &'static str {
        if self.active == PRIMARY {
            BACKUP
        } else {
            PRIMARY
        }
    }

    fn switch(&mut self) -> Action {
        let from = self.active;
        self.active = self.other();
        self.switches += 1;
        Action::Note { what: "switch".into(), detail: format!("{from}->{}", self.active) }
    }
}

impl SsoLogic for MultipathFailover {
    fn behavior_id(&self) -> &str {
        MULTIPATH_FAILOVER
    }

    fn on_construct(&mut self, ctx: &HookContext<'_>) -> HookResult {
        let (primary, backup) = ctx
            .net
            .find_disjoint_pair(ctx.src, ctx.dst, &self.constraints)
            .map_err(|_| HookError::AllocationFailed("no link-disjoint backup path".into()))?;
        Ok(vec![Action::allocate_route(PRIMARY, &primary), Action::allocate_route(BACKUP, &backup)])
    }

    fn on_path_event(&mut self, ctx: &HookContext<'_>, event: &NetworkEvent) -> HookResult {
        let hits_active = ctx.path(self.active).is_some_and(|p| p.contains_link(&event.link_id));
        if event.event_type != EventType::LinkDown || !hits_active {
            return Ok(vec![]);
        }
        if ctx.path_up(self.other()) {
            Ok(vec![self.switch()])
        } else {
            Ok(vec![Action::NotifyDevice { value: None, reason: "both paths down".into() }])
        }
    }

    fn on_data(&mut self, ctx: &HookContext<'_>, input: DataInput) -> HookResult {
        let payload = match input {
            DataInput::Payload(p) => p,
            DataInput::Control(verb) => return Err(HookError::Unsupported(verb)),
        };
        if ctx.path_up(self.active) {
            return Ok(vec![Action::forward(self.active, payload)]);
        }
        if ctx.path_up(self.other()) {
            let note = self.switch();
            return Ok(vec![note, Action::forward(self.active, payload)]);
        }
        self.dropped += 1;
        Ok(vec![Action::Drop { reason: "both paths down".into(), bytes: payload.len() }])
    }

    fn variables(&self) -> serde_json::Value {
        json!({ "active": self.active, "switches": self.switches, "dropped": self.dropped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behaviors::testkit::*;
    use crate::netsim::tests::link;
    use crate::netsim::{load_topology, LinkChange, NetworkSim, Path, TopologyDoc};
    use std::collections::BTreeMap;

    fn diamond() -> NetworkSim {
        NetworkSim::new(
            load_topology(&TopologyDoc {
                nodes: ["S", "U", "V", "T"].map(String::from).to_vec(),
                links: vec![
                    link("SU", "S", "U", 1.0, 100.0),
                    link("UT", "U", "T", 1.0, 100.0),
                    link("SV", "S", "V", 2.0, 100.0),
                    link("VT", "V", "T", 2.0, 100.0),
                ],
            })
            .unwrap(),
        )
    }

    fn construct(sim: &mut NetworkSim, b: &mut Box<dyn SsoLogic>) -> BTreeMap<String, Path> {
        let pool = BTreeMap::new();
        let obj = objective(10.0);
        let acts = b.on_construct(&ctx(sim, &pool, &obj, "S", "T")).unwrap();
        let mut pool = BTreeMap::new();
        for a in acts {
            if let Action::AllocatePath { role, route: Some(r), .. } = a {
                pool.insert(role, sim.allocate_route("t", &r).unwrap());
            }
        }
        pool
    }

    #[test]
    fn primary_down_switches_to_backup() {
        let mut sim = diamond();
        let mut b = MultipathFailover::create(&ParameterSet::new()).unwrap();
        let pool = construct(&mut sim, &mut b);
        assert_eq!(pool[PRIMARY].nodes, vec!["S", "U", "T"]);
        assert_eq!(pool[BACKUP].nodes, vec!["S", "V", "T"]);
        let obj = objective(10.0);
        let ev = event(&mut sim, "UT", LinkChange::Down);
        let acts = b.on_path_event(&ctx(&sim, &pool, &obj, "S", "T"), &ev).unwrap();
        assert!(matches!(&acts[..], [Action::Note { what, .. }] if what == "switch"));
        let acts = b.on_data(&ctx(&sim, &pool, &obj, "S", "T"), DataInput::Payload(b"p".to_vec())).unwrap();
        assert_eq!(acts, vec![Action::forward(BACKUP, b"p".to_vec())]);
    }

    #[test]
    fn backup_down_is_not_a_switch() {
        let mut sim = diamond();
        let mut b = MultipathFailover::create(&ParameterSet::new()).unwrap();
        let pool = construct(&mut sim, &mut b);
        let obj = objective(10.0);
        let ev = event(&mut sim, "VT", LinkChange::Down);
        assert!(b.on_path_event(&ctx(&sim, &pool, &obj, "S", "T"), &ev).unwrap().is_empty());
    }

    #[test]
    fn cut_vertex_with_bridge_refuses_construction() {
        // S-U-T ring plus bridge T-W: every S..W route shares link TW
        let mut sim = NetworkSim::new(
            load_topology(&TopologyDoc {
                nodes: ["S", "U", "T", "W"].map(String::from).to_vec(),
                links: vec![
                    link("SU", "S", "U", 1.0, 100.0),
                    link("UT", "U", "T", 1.0, 100.0),
                    link("ST", "S", "T", 3.0, 100.0),
                    link("TW", "T", "W", 1.0, 100.0),
                ],
            })
            .unwrap(),
        );
        let pool = BTreeMap::new();
        let obj = objective(10.0);
        let mut b = MultipathFailover::create(&ParameterSet::new()).unwrap();
        let r = b.on_construct(&ctx(&sim, &pool, &obj, "S", "W"));
        assert!(matches!(r, Err(HookError::AllocationFailed(_))));
        // a disjoint pair exists toward T itself
        assert!(!construct_to(&mut sim, "S", "T").is_empty());
    }

    fn construct_to(sim: &mut NetworkSim, src: &str, dst: &str) -> Vec<Action> {
        let pool = BTreeMap::new();
        let obj = objective(10.0);
        let mut b = MultipathFailover::create(&ParameterSet::new()).unwrap();
        b.on_construct(&ctx(sim, &pool, &obj, src, dst)).unwrap()
    }
}
