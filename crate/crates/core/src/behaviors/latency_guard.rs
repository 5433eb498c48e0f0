//! Keeps the session on the minimum-latency route. Whenever an event touches
//! the held path, the route is recomputed; the path is swapped only when it is
//! broken or a strictly faster route exists.

use serde_json::json;

use super::{constraints_from, Action, DataInput, HookContext, HookError, HookResult, SsoLogic, LATENCY_GUARD, PRIMARY};
use crate::domain::{Direction, Metric, ParameterSet};
use crate::netsim::{NetworkEvent, PathConstraints};

#[derive(Debug, Clone)]
pub struct LatencyGuard {
    constraints: PathConstraints,
    reallocations: u64,
    violations: u64,
    dropped: u64,
}

impl LatencyGuard {
    pub fn create(params: &ParameterSet) -> Result<Box<dyn SsoLogic>, HookError> {
        Ok(Box::new(Self { constraints: constraints_from(params)?, reallocations: 0, violations: 0, dropped: 0 }))
    }

    fn bound(ctx: &HookContext<'_>) -> Option<f64> {
        let o = ctx.objective;
        (o.metric == Metric::EndToEndLatencyMs && o.direction == Direction::AtMost).then_some(o.bound)
    }

    fn reevaluate(&mut self, ctx: &HookContext<'_>) -> Vec<Action> {
        let current = if ctx.path_up(PRIMARY) { ctx.path_latency(PRIMARY) } else { None };
        let best = match ctx.net.find_route(ctx.src, ctx.dst, &self.constraints) {
            Ok(r) => r,
            Err(_) => {
                // Keep the broken path: its links are how recovery events reach us.
                self.violations += 1;
                return vec![Action::NotifyDevice { value: None, reason: "no route".into() }];
            }
        };
        let mut out = Vec::new();
        if current.map_or(true, |cur| best.latency_ms < cur) {
            self.reallocations += 1;
            if ctx.pool.contains_key(PRIMARY) {
                out.push(Action::ReleasePath { role: PRIMARY.into() });
            }
            out.push(Action::allocate_route(PRIMARY, &best));
            out.push(Action::Note { what: "reallocate".into(), detail: best.nodes.join(",") });
        }
        if let Some(bound) = Self::bound(ctx) {
            if best.latency_ms > bound {
                self.violations += 1;
                out.push(Action::NotifyDevice { value: Some(best.latency_ms), reason: "latency bound exceeded".into() });
            }
        }
        out
    }
}

impl SsoLogic for LatencyGuard {
    fn behavior_id(&self) -> &str {
        LATENCY_GUARD
    }

    fn on_construct(&mut self, _ctx: &HookContext<'_>) -> HookResult {
        Ok(vec![Action::allocate(PRIMARY, &self.constraints)])
    }

    fn on_path_event(&mut self, ctx: &HookContext<'_>, _event: &NetworkEvent) -> HookResult {
        Ok(self.reevaluate(ctx))
    }

    fn on_data(&mut self, ctx: &HookContext<'_>, input: DataInput) -> HookResult {
        match input {
            DataInput::Payload(p) if ctx.path_up(PRIMARY) => Ok(vec![Action::forward(PRIMARY, p)]),
            DataInput::Payload(p) => {
                self.dropped += 1;
                Ok(vec![Action::Drop { reason: "path down".into(), bytes: p.len() }])
            }
            DataInput::Control(verb) => Err(HookError::Unsupported(verb)),
        }
    }

    fn variables(&self) -> serde_json::Value {
        json!({ "reallocations": self.reallocations, "violations": self.violations, "dropped": self.dropped })
    }
}
