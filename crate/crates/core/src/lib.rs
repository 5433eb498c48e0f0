//! Socket Store: a registry of end-client network-logic modules, a store
//! proxy hosting their network-side instances, a simulated network control
//! plane, and a device SDK with legacy-socket fallback.

pub mod behaviors;
pub mod catalog;
pub mod dataplane;
pub mod domain;
pub mod netsim;
pub mod proxy;
pub mod registry;
pub mod scenario;
pub mod sdk;
pub mod service;
pub mod wire;
pub mod world;
