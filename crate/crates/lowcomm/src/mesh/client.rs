use std::cell::Cell;
use std::time::Duration;

use lowcomm_core::mesh::{MeshState, Request, Response, WaitPredicate};
use lowcomm_core::wire::{Channel, Frame, FrameKind};

use crate::transport::{deadline, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
    #[error("coordinator unreachable: {0}")]
    Transport(#[from] TransportError),
    #[error("bad coordinator reply: {0}")]
    Decode(String),
    #[error("unexpected coordinator reply {0:?}")]
    Unexpected(Box<Response>),
}

/// Request/response client for one task. Requests on one client are
/// sequential; replies that arrive after their request timed out are
/// discarded by id.
pub struct MeshClient<'a> {
    net: &'a dyn Transport,
    coordinator: String,
    channel: Channel,
    next_id: Cell<u64>,
    /// Upper bound on how long any single request may stay unanswered.
    pub timeout: Duration,
}

impl<'a> MeshClient<'a> {
    pub fn new(net: &'a dyn Transport, coordinator: &str, channel: Channel) -> Self {
        MeshClient {
            net,
            coordinator: coordinator.to_string(),
            channel,
            next_id: Cell::new((channel as u64) << 56),
            timeout: Duration::from_secs(3600),
        }
    }

    pub fn coordinator(&self) -> &str {
        &self.coordinator
    }

    pub fn call(&self, req: &Request) -> Result<Response, MeshError> {
        let id = self.next_id.get() + 1;
        self.next_id.set(id);
        let frame = Frame::new(FrameKind::KvOp, req.encode(id)).map_err(|e| MeshError::Decode(e.to_string()))?;
        self.net.send(&self.coordinator, self.channel, frame)?;
        let until = deadline(self.net.now(), self.timeout);
        loop {
            let left = until.saturating_sub(self.net.now());
            if left.is_zero() {
                return Err(TransportError::Timeout.into());
            }
            let f = self.net.recv(&self.coordinator, self.channel, left)?;
            if f.kind != FrameKind::KvOp {
                continue;
            }
            let (rid, resp) = Response::decode(&f.payload).map_err(|e| MeshError::Decode(e.to_string()))?;
            if rid == id {
                return Ok(resp);
            }
            log::debug!("{}: dropping late reply {rid}", self.net.local_id());
        }
    }

    pub fn kv_set(&self, key: &str, value: Vec<u8>) -> Result<(), MeshError> {
        match self.call(&Request::KvSet { key: key.into(), value })? {
            Response::Ok => Ok(()),
            r => Err(MeshError::Unexpected(Box::new(r))),
        }
    }

    pub fn kv_get(&self, key: &str) -> Result<Option<Vec<u8>>, MeshError> {
        match self.call(&Request::KvGet { key: key.into() })? {
            Response::Value(v) => Ok(v),
            r => Err(MeshError::Unexpected(Box::new(r))),
        }
    }

    /// Value of `key` once `pred` holds, or `None` when `timeout` passes
    /// first.
    pub fn kv_wait(&self, key: &str, pred: WaitPredicate, timeout: Duration) -> Result<Option<Vec<u8>>, MeshError> {
        let timeout_ms = u64::try_from(timeout.as_millis()).unwrap_or(u64::MAX);
        match self.call(&Request::KvWait { key: key.into(), pred, timeout_ms })? {
            Response::Value(v) => Ok(v),
            Response::Timeout => Ok(None),
            r => Err(MeshError::Unexpected(Box::new(r))),
        }
    }

    pub fn get_mesh(&self) -> Result<Option<MeshState>, MeshError> {
        match self.call(&Request::GetMesh)? {
            Response::Mesh(m) => Ok(m),
            r => Err(MeshError::Unexpected(Box::new(r))),
        }
    }

    pub fn heartbeat(&self) -> Result<(), TransportError> {
        self.net.send(&self.coordinator, Channel::Heartbeat, Frame::empty(FrameKind::Heartbeat))
    }

    pub fn deathrattle(&self) -> Result<(), TransportError> {
        self.net.send(&self.coordinator, Channel::Heartbeat, Frame::empty(FrameKind::Deathrattle))
    }
}
