//! Device-side behaviors selected by a transferable object's `behavior_id`.
//! Executing a TO means instantiating the named behavior with its params.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::ParameterSet;
use crate::wire::Peer;

pub const DEFAULT_REDIRECT: &str = "default_redirect";
pub const STREAM_CHUNKER: &str = "stream_chunker";
pub const DTN_CLIENT: &str = "dtn_client";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DeviceBehaviorError {
    #[error("unknown device behavior {0}")]
    Unknown(String),
    #[error("bad parameter {0}")]
    BadParameter(String),
    #[error("behavior failed: {0}")]
    Failed(String),
}

/// What the device sends to its store session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceOp {
    Send(Vec<u8>),
    Control(String),
}

pub trait DeviceBehavior: Send {
    fn behavior_id(&self) -> &str;
    /// Runs when a module connection is being established.
    fn on_connect(&mut self, _peer: &Peer) -> Result<(), DeviceBehaviorError> {
        Ok(())
    }
    /// Turns one application send into session operations.
    fn on_send(&mut self, payload: Vec<u8>) -> Result<Vec<DeviceOp>, DeviceBehaviorError> {
        Ok(vec![DeviceOp::Send(payload)])
    }
    /// Control verbs this behavior exposes as utilities.
    fn verbs(&self) -> &[&'static str] {
        &[]
    }
}

pub type DeviceFactory = fn(&ParameterSet) -> Result<Box<dyn DeviceBehavior>, DeviceBehaviorError>;

#[derive(Clone)]
pub struct DeviceBehaviors {
    factories: BTreeMap<String, DeviceFactory>,
}

impl std::fmt::Debug for DeviceBehaviors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for DeviceBehaviors {
    fn default() -> Self {
        Self::builtin()
    }
}

impl DeviceBehaviors {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut b = Self::empty();
        b.register(DEFAULT_REDIRECT, |_| Ok(Box::new(DefaultRedirect)));
        b.register(STREAM_CHUNKER, StreamChunker::create);
        b.register(DTN_CLIENT, |_| Ok(Box::new(DtnClient)));
        b
    }

    pub fn register(&mut self, id: &str, factory: DeviceFactory) {
        self.factories.insert(id.to_string(), factory);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn instantiate(&self, id: &str, params: &ParameterSet) -> Result<Box<dyn DeviceBehavior>, DeviceBehaviorError> {
        let factory = self.factories.get(id).ok_or_else(|| DeviceBehaviorError::Unknown(id.to_string()))?;
        factory(params)
    }
}

/// Sends every payload unchanged to the session.
#[derive(Debug, Clone, Copy)]
pub struct DefaultRedirect;

impl DeviceBehavior for DefaultRedirect {
    fn behavior_id(&self) -> &str {
        DEFAULT_REDIRECT
    }
}

/// Splits payloads into fixed-size chunks, each sent as its own message.
#[derive(Debug, Clone, Copy)]
pub struct StreamChunker {
    chunk_size: usize,
}

impl StreamChunker {
    pub fn create(params: &ParameterSet) -> Result<Box<dyn DeviceBehavior>, DeviceBehaviorError> {
        let chunk_size = params
            .get("chunk_size")
            .and_then(|v| v.as_u64())
            .filter(|c| *c >= 1)
            .ok_or_else(|| DeviceBehaviorError::BadParameter("chunk_size".into()))?;
        Ok(Box::new(Self { chunk_size: chunk_size as usize }))
    }
}

impl DeviceBehavior for StreamChunker {
    fn behavior_id(&self) -> &str {
        STREAM_CHUNKER
    }

    fn on_send(&mut self, payload: Vec<u8>) -> Result<Vec<DeviceOp>, DeviceBehaviorError> {
        if payload.is_empty() {
            return Ok(vec![DeviceOp::Send(payload)]);
        }
        Ok(payload.chunks(self.chunk_size).map(|c| DeviceOp::Send(c.to_vec())).collect())
    }
}

/// Device half of the DTN module: plain sends plus undo/redo utilities.
#[derive(Debug, Clone, Copy)]
pub struct DtnClient;

impl DeviceBehavior for DtnClient {
    fn behavior_id(&self) -> &str {
        DTN_CLIENT
    }

    fn verbs(&self) -> &[&'static str] {
        &[super::dtn::UNDO_SEND, super::dtn::REDO_SEND]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn chunker_splits_and_preserves_bytes() {
        let mut p = ParameterSet::new();
        p.insert("chunk_size".into(), json!(3));
        let mut c = DeviceBehaviors::builtin().instantiate(STREAM_CHUNKER, &p).unwrap();
        let ops = c.on_send(b"abcdefg".to_vec()).unwrap();
        assert_eq!(
            ops,
            vec![DeviceOp::Send(b"abc".to_vec()), DeviceOp::Send(b"def".to_vec()), DeviceOp::Send(b"g".to_vec())]
        );
    }

    #[test]
    fn unknown_or_misconfigured_behaviors_fail_to_instantiate() {
        let b = DeviceBehaviors::builtin();
        assert!(matches!(b.instantiate("teleport", &ParameterSet::new()), Err(DeviceBehaviorError::Unknown(_))));
        assert!(matches!(b.instantiate(STREAM_CHUNKER, &ParameterSet::new()), Err(DeviceBehaviorError::BadParameter(_))));
    }
}
