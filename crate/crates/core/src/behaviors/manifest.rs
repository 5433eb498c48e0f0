//! Behavior manifest: which behavior ids exist, on which side they run, and
//! the parameters each accepts. The registry validates descriptors against it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::composed::PARTS_PARAM;
use super::{COMPOSED, DEFAULT_FORWARD};
use crate::domain::{ModuleDescriptor, ParameterSet};

const BUILTIN: &str = include_str!("../../data/behaviors.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Device,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    Integer,
    Number,
    String,
    Bool,
    StringList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub required: bool,
}

impl ParamSpec {
    fn accepts(&self, v: &Value) -> bool {
        let typed = match self.ty {
            ParamType::Integer => v.as_i64().is_some() || v.as_u64().is_some(),
            ParamType::Number => v.as_f64().is_some_and(f64::is_finite),
            ParamType::String => v.is_string(),
            ParamType::Bool => v.is_boolean(),
            ParamType::StringList => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
        };
        typed && self.min.map_or(true, |m| v.as_f64().map_or(true, |x| x >= m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub side: Side,
    #[serde(default)]
    pub params: BTreeMap<String, ParamSpec>,
}

impl BehaviorSpec {
    /// Problems with `params` against this schema, each prefixed with `what`.
    pub fn check_params(&self, what: &str, params: &ParameterSet) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in params {
            match self.params.get(k) {
                None => out.push(format!("{what}: unknown parameter {k:?}")),
                Some(spec) if !spec.accepts(v) => out.push(format!("{what}: parameter {k:?} has invalid value {v}")),
                Some(_) => {}
            }
        }
        for (k, spec) in &self.params {
            if spec.required && !params.contains_key(k) {
                out.push(format!("{what}: missing parameter {k:?}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorManifest {
    pub behaviors: BTreeMap<String, BehaviorSpec>,
}

impl BehaviorManifest {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled manifest parses")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn get(&self, id: &str) -> Option<&BehaviorSpec> {
        self.behaviors.get(id)
    }

    fn lookup(&self, id: &str, side: Side, out: &mut Vec<String>) -> Option<&BehaviorSpec> {
        match self.get(id) {
            Some(spec) if spec.side == side => Some(spec),
            Some(_) => {
                out.push(format!("behavior {id:?} is not a {side:?} behavior"));
                None
            }
            None => {
                out.push(format!("unknown behavior {id:?}"));
                None
            }
        }
    }

    /// Behavior-level problems of a descriptor (structure is checked by
    /// `validate_descriptor`).
    pub fn check_descriptor(&self, desc: &ModuleDescriptor) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(to) = &desc.device_behavior {
            if let Some(spec) = self.lookup(&to.behavior_id, Side::Device, &mut out) {
                out.extend(spec.check_params("device_behavior", &to.params));
            }
        }
        let network_id = desc.network_behavior.as_ref().map_or(DEFAULT_FORWARD, |b| b.behavior_id.as_str());
        if let Some(spec) = self.lookup(network_id, Side::Network, &mut out) {
            for (id, params) in &desc.parameterizations {
                out.extend(spec.check_params(&format!("parameterization {id:?}"), params));
            }
        }
        let composed = network_id == COMPOSED;
        if composed && desc.composed_of.is_empty() {
            out.push("composed behavior without parts".into());
        }
        if !composed && !desc.composed_of.is_empty() {
            out.push("parts listed for a non-composed behavior".into());
        }
        for (id, params) in &desc.parameterizations {
            if let Some(parts) = params.get(PARTS_PARAM).and_then(Value::as_array) {
                if parts.len() != desc.composed_of.len() {
                    out.push(format!("parameterization {id:?}: {} part ids for {} parts", parts.len(), desc.composed_of.len()));
                }
            }
        }
        out
    }
}
