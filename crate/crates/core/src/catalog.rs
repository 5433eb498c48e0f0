//! The reference modules: descriptors for the bundled behaviors and a helper
//! that publishes them into a registry.

use std::collections::BTreeMap;

use serde_json::json;

use crate::behaviors::device::{DEFAULT_REDIRECT, DTN_CLIENT, STREAM_CHUNKER};
use crate::behaviors::{DEFAULT_FORWARD, DTN_STORE, LATENCY_GUARD, MULTIPATH_FAILOVER};
use crate::domain::{
    Lifecycle, Metric, Millis, ModuleDescriptor, ParameterSet, PerformanceObjective, SsoBehaviorRef,
    TransferableObject,
};
use crate::registry::{ComposeRequest, Registry, RegistryError, Verdict};

pub const CONTRIBUTOR: &str = "lab";

pub const FORWARD: &str = "fwd";
pub const GUARD: &str = "lg";
pub const MULTIPATH: &str = "mp";
pub const DTN: &str = "dtn";
pub const STREAM: &str = "stream";
/// latency_guard composed over dtn_store; dtn runs first.
pub const GUARDED_DTN: &str = "lg_dtn";

/// Default label of each reference module's single parameterization.
pub fn default_id(module_key: &str) -> String {
    format!("{module_key}:default")
}

fn descriptor(
    key: &str,
    name: &str,
    objective: PerformanceObjective,
    device: Option<(&str, ParameterSet)>,
    network: &str,
    params: ParameterSet,
) -> ModuleDescriptor {
    let mut parameterizations = BTreeMap::new();
    parameterizations.insert(default_id(key), params);
    ModuleDescriptor {
        module_key: key.into(),
        name: name.into(),
        version: 1,
        contributor: CONTRIBUTOR.into(),
        objective,
        device_behavior: device.map(|(id, p)| TransferableObject::new(key, 1, id, p)),
        network_behavior: Some(SsoBehaviorRef::new(network)),
        parameterizations,
        lifecycle: Lifecycle::Submitted,
        ratings: vec![],
        purchase_count: 0,
        composed_of: vec![],
    }
}

pub fn forward(latency_bound_ms: f64) -> ModuleDescriptor {
    descriptor(
        FORWARD,
        "plain forwarding",
        PerformanceObjective::at_most(Metric::EndToEndLatencyMs, latency_bound_ms),
        Some((DEFAULT_REDIRECT, ParameterSet::new())),
        DEFAULT_FORWARD,
        ParameterSet::new(),
    )
}

pub fn latency_guard(latency_bound_ms: f64) -> ModuleDescriptor {
    descriptor(
        GUARD,
        "latency guard",
        PerformanceObjective::at_most(Metric::EndToEndLatencyMs, latency_bound_ms),
        Some((DEFAULT_REDIRECT, ParameterSet::new())),
        LATENCY_GUARD,
        ParameterSet::new(),
    )
}

pub fn multipath(latency_bound_ms: f64) -> ModuleDescriptor {
    descriptor(
        MULTIPATH,
        "multipath failover",
        PerformanceObjective::at_most(Metric::EndToEndLatencyMs, latency_bound_ms),
        Some((DEFAULT_REDIRECT, ParameterSet::new())),
        MULTIPATH_FAILOVER,
        ParameterSet::new(),
    )
}

pub fn dtn(capacity: u64) -> ModuleDescriptor {
    let mut p = ParameterSet::new();
    p.insert("capacity".into(), json!(capacity));
    // Delivery is the point of DTN; the loss objective is sampled by operators.
    descriptor(
        DTN,
        "delay tolerant store",
        PerformanceObjective::at_most(Metric::LossRate, 0.0),
        Some((DTN_CLIENT, ParameterSet::new())),
        DTN_STORE,
        p,
    )
}

pub fn stream(chunk_size: u64) -> ModuleDescriptor {
    let mut p = ParameterSet::new();
    p.insert("chunk_size".into(), json!(chunk_size));
    descriptor(
        STREAM,
        "stream chunker",
        PerformanceObjective::at_least(Metric::ThroughputMbps, 1.0),
        Some((STREAM_CHUNKER, p)),
        DEFAULT_FORWARD,
        ParameterSet::new(),
    )
}

pub fn guarded_dtn_request(latency_bound_ms: f64) -> ComposeRequest {
    ComposeRequest {
        module_key: GUARDED_DTN.into(),
        name: "latency guarded dtn".into(),
        contributor: CONTRIBUTOR.into(),
        objective: PerformanceObjective::at_most(Metric::EndToEndLatencyMs, latency_bound_ms),
        parameterizations: BTreeMap::new(),
    }
}

/// A reference module by key, with the bundled default parameters.
pub fn reference(module_key: &str) -> Option<ModuleDescriptor> {
    Some(match module_key {
        FORWARD => forward(50.0),
        GUARD => latency_guard(30.0),
        MULTIPATH => multipath(50.0),
        DTN => dtn(16),
        STREAM => stream(1024),
        _ => return None,
    })
}

/// Publishes and accepts a descriptor.
pub fn publish(reg: &mut Registry, desc: ModuleDescriptor, now: Millis) -> Result<(), RegistryError> {
    let key = desc.module_key.clone();
    let submitter = desc.contributor.clone();
    reg.publish_module(desc, &submitter, now)?;
    reg.review_module(&key, Verdict::Accept)
}

/// Publishes every reference module plus the guarded-dtn composition.
pub fn publish_all(reg: &mut Registry, now: Millis) -> Result<(), RegistryError> {
    for key in [FORWARD, GUARD, MULTIPATH, DTN, STREAM] {
        publish(reg, reference(key).expect("reference key"), now)?;
    }
    reg.compose_modules(&[DTN.to_string(), GUARD.to_string()], guarded_dtn_request(30.0), now)?;
    reg.review_module(GUARDED_DTN, Verdict::Accept)
}
