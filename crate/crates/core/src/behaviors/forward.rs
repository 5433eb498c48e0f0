//! Plain forwarding over the best route at construction time. Used for
//! modules without a network-side behavior of their own.

use serde_json::json;

use super::{constraints_from, Action, DataInput, HookContext, HookError, HookResult, SsoLogic, DEFAULT_FORWARD, PRIMARY};
use crate::domain::ParameterSet;
use crate::netsim::{NetworkEvent, PathConstraints};

#[derive(Debug, Clone)]
pub struct DefaultForward {
    constraints: PathConstraints,
    dropped: u64,
}

impl DefaultForward {
    pub fn create(params: &ParameterSet) -> Result<Box<dyn SsoLogic>, HookError> {
        Ok(Box::new(Self { constraints: constraints_from(params)?, dropped: 0 }))
    }
}

impl SsoLogic for DefaultForward {
    fn behavior_id(&self) -> &str {
        DEFAULT_FORWARD
    }

    fn on_construct(&mut self, _ctx: &HookContext<'_>) -> HookResult {
        Ok(vec![Action::allocate(PRIMARY, &self.constraints)])
    }

    fn on_path_event(&mut self, _ctx: &HookContext<'_>, _event: &NetworkEvent) -> HookResult {
        Ok(vec![])
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
        json!({ "dropped": self.dropped })
    }
}
