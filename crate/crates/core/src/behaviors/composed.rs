//! Composition of published modules. The composing instance holds no paths
//! of its own: it opens one nested instance per part and pipes data through
//! them in order; the last part's output leaves over that part's path.

use serde_json::json;

use super::{Action, DataInput, DelegateRequest, HookContext, HookError, HookResult, SsoLogic, COMPOSED};
use crate::domain::ParameterSet;
use crate::netsim::NetworkEvent;

/// Constant holding the module ids of the parts, in delegation order.
pub const PARTS_PARAM: &str = "parts";

#[derive(Debug, Clone)]
pub struct Composed {
    parts: usize,
    delegations: u64,
}

impl Composed {
    pub fn create(params: &ParameterSet) -> Result<Box<dyn SsoLogic>, HookError> {
        let parts = params
            .get(PARTS_PARAM)
            .and_then(|v| v.as_array())
            .map(Vec::len)
            .filter(|n| *n > 0)
            .ok_or_else(|| HookError::BadParameter(PARTS_PARAM.into()))?;
        Ok(Box::new(Self { parts, delegations: 0 }))
    }

    fn delegate(&mut self, part: usize, request: DelegateRequest) -> Action {
        self.delegations += 1;
        Action::Delegate { part, request }
    }
}

impl SsoLogic for Composed {
    fn behavior_id(&self) -> &str {
        COMPOSED
    }

    fn on_construct(&mut self, _ctx: &HookContext<'_>) -> HookResult {
        Ok((0..self.parts).map(|i| Action::Delegate { part: i, request: DelegateRequest::Open }).collect())
    }

    fn on_path_event(&mut self, _ctx: &HookContext<'_>, _event: &NetworkEvent) -> HookResult {
        Ok(vec![])
    }

    fn on_data(&mut self, _ctx: &HookContext<'_>, input: DataInput) -> HookResult {
        Ok(match input {
            DataInput::Payload(payload) => vec![self.delegate(0, DelegateRequest::Data { payload })],
            // Every part sees the verb; parts that do not know it decline.
            DataInput::Control(verb) => {
                (0..self.parts).map(|i| self.delegate(i, DelegateRequest::Control { verb: verb.clone() })).collect()
            }
        })
    }

    fn on_part_output(&mut self, _ctx: &HookContext<'_>, part: usize, role: &str, payload: Vec<u8>) -> HookResult {
        if part + 1 < self.parts {
            Ok(vec![self.delegate(part + 1, DelegateRequest::Data { payload })])
        } else {
            Ok(vec![Action::ForwardThrough { part, role: role.to_string(), payload }])
        }
    }

    fn variables(&self) -> serde_json::Value {
        json!({ "parts": self.parts, "delegations": self.delegations })
    }
}
