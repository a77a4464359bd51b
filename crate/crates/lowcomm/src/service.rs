//! Background tasks every node runs next to its trainer: heartbeats, the
//! service endpoint that answers bandwidth probes and checkpoint requests,
//! and the periodic bandwidth prober.
//!
//! Service requests travel on [`Channel::Service`], answers on
//! [`Channel::ServiceReply`]. Checkpoint transfers are a header frame
//! `[1, u64 step, u64 len]` followed by pieces `[2, bytes…]`, or `[3]` when
//! no checkpoint at the requested step is available. Probe frames are
//! `[0, u64 nonce, padding…]`, acknowledged with `[1, u64 nonce]`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use lowcomm_core::checkpoint::Checkpoint;
use lowcomm_core::mesh::Request;
use lowcomm_core::wire::{ByteReader, ByteWriter, Channel, Frame, FrameKind};

use crate::mesh::MeshClient;
use crate::transport::{Transport, TransportError};

const PIECE: usize = 1 << 20;
const POLL: Duration = Duration::from_secs(1);

/// State the trainer shares with its background tasks.
#[derive(Default)]
pub struct NodeShared {
    /// Latest published checkpoint in stream form.
    latest: Mutex<Option<(u64, Arc<Vec<u8>>)>>,
    stop: AtomicBool,
    /// Set from outside to ask the trainer to leave gracefully.
    leave: AtomicBool,
}

impl NodeShared {
    pub fn new() -> Arc<Self> {
        Arc::new(NodeShared::default())
    }

    pub fn publish(&self, ck: &Checkpoint) {
        *self.latest.lock().unwrap_or_else(|e| e.into_inner()) = Some((ck.outer_step, Arc::new(ck.to_stream())));
    }

    pub fn latest(&self) -> Option<(u64, Arc<Vec<u8>>)> {
        self.latest.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    pub fn stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    pub fn request_leave(&self) {
        self.leave.store(true, Ordering::Relaxed);
    }

    pub fn leave_requested(&self) -> bool {
        self.leave.load(Ordering::Relaxed)
    }
}

pub fn heartbeat_loop(net: &dyn Transport, coordinator: &str, interval: Duration, shared: &NodeShared) {
    let client = MeshClient::new(net, coordinator, Channel::Heartbeat);
    while !shared.stopped() {
        match client.heartbeat() {
            Err(TransportError::Crashed) => return,
            Err(e) => log::debug!("{}: heartbeat failed: {e}", net.local_id()),
            Ok(()) => {}
        }
        if net.sleep(interval).is_err() {
            return;
        }
    }
}

fn reply(net: &dyn Transport, to: &str, kind: FrameKind, payload: Vec<u8>) -> Result<(), TransportError> {
    let f = Frame::new(kind, payload).expect("service reply fits a frame");
    net.send(to, Channel::ServiceReply, f)
}

fn serve_checkpoint(net: &dyn Transport, to: &str, min_step: u64, shared: &NodeShared) -> Result<(), TransportError> {
    let Some((step, bytes)) = shared.latest().filter(|(s, _)| *s >= min_step) else {
        return reply(net, to, FrameKind::Checkpoint, vec![3]);
    };
    let mut w = ByteWriter::new();
    w.u8(1);
    w.u64(step);
    w.u64(bytes.len() as u64);
    reply(net, to, FrameKind::Checkpoint, w.into_inner())?;
    for piece in bytes.chunks(PIECE) {
        let mut p = Vec::with_capacity(piece.len() + 1);
        p.push(2);
        p.extend_from_slice(piece);
        reply(net, to, FrameKind::Checkpoint, p)?;
    }
    Ok(())
}

/// Answers probes and checkpoint requests until the node stops.
pub fn service_loop(net: &dyn Transport, shared: &NodeShared) {
    while !shared.stopped() {
        let (from, _, f) = match net.recv_any(&[Channel::Service], POLL) {
            Ok(x) => x,
            Err(TransportError::Timeout) => continue,
            Err(_) => return,
        };
        let r = match (f.kind, f.payload.first()) {
            (FrameKind::Probe, Some(0)) if f.payload.len() >= 9 => reply(net, &from, FrameKind::Probe, [&[1u8][..], &f.payload[1..9]].concat()),
            (FrameKind::Checkpoint, Some(0)) if f.payload.len() == 9 => {
                let min_step = u64::from_le_bytes(f.payload[1..9].try_into().expect("8 bytes"));
                serve_checkpoint(net, &from, min_step, shared)
            }
            _ => {
                log::warn!("{}: malformed service request from {from}", net.local_id());
                Ok(())
            }
        };
        match r {
            Err(TransportError::Crashed) => return,
            Err(e) => log::debug!("{}: service reply to {from} failed: {e}", net.local_id()),
            Ok(()) => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FetchError {
    #[error("donor has no checkpoint at step {0} or later")]
    Unavailable(u64),
    #[error("transfer failed: {0}")]
    Transport(#[from] TransportError),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

/// Downloads the donor's latest checkpoint of at least `min_step`, checking
/// its length and content hash.
pub fn fetch_checkpoint(net: &dyn Transport, donor: &str, min_step: u64, timeout: Duration) -> Result<Checkpoint, FetchError> {
    let mut req = vec![0u8];
    req.extend_from_slice(&min_step.to_le_bytes());
    net.send(donor, Channel::Service, Frame::new(FrameKind::Checkpoint, req).expect("small frame"))?;
    let next = || -> Result<Vec<u8>, FetchError> {
        loop {
            let f = net.recv(donor, Channel::ServiceReply, timeout)?;
            if f.kind == FrameKind::Checkpoint {
                return Ok(f.payload);
            }
        }
    };
    let head = next()?;
    let mut r = ByteReader::new(&head);
    match r.u8() {
        Ok(1) => {}
        Ok(3) => return Err(FetchError::Unavailable(min_step)),
        _ => return Err(FetchError::Invalid("bad transfer header".into())),
    }
    let (step, len) = match (r.u64(), r.u64()) {
        (Ok(s), Ok(l)) => (s, l as usize),
        _ => return Err(FetchError::Invalid("bad transfer header".into())),
    };
    let mut body = Vec::with_capacity(len.min(1 << 30));
    while body.len() < len {
        let p = next()?;
        if p.first() != Some(&2) {
            return Err(FetchError::Invalid("bad transfer piece".into()));
        }
        body.extend_from_slice(&p[1..]);
    }
    if body.len() != len {
        return Err(FetchError::Invalid(format!("received {} bytes, expected {len}", body.len())));
    }
    let ck = Checkpoint::from_stream(&body).map_err(|e| FetchError::Invalid(e.to_string()))?;
    if ck.outer_step != step || step < min_step {
        return Err(FetchError::Invalid(format!("checkpoint at step {} announced as {step}", ck.outer_step)));
    }
    Ok(ck)
}

fn probe_rtt(net: &dyn Transport, to: &str, size: usize, nonce: u64, timeout: Duration) -> Result<Duration, TransportError> {
    let mut p = vec![0u8; size.max(9)];
    p[1..9].copy_from_slice(&nonce.to_le_bytes());
    let t0 = net.now();
    net.send(to, Channel::Service, Frame::new(FrameKind::Probe, p).expect("probe fits a frame"))?;
    loop {
        let f = net.recv(to, Channel::ServiceReply, timeout)?;
        if f.kind == FrameKind::Probe && f.payload.len() == 9 && f.payload[1..9] == nonce.to_le_bytes() {
            return Ok(net.now() - t0);
        }
    }
}

/// Link bandwidth to `to` estimated from two probes of different sizes:
/// `8 (S2 − S1) / (Δt2 − Δt1)`, which cancels latency and fixed costs.
pub fn measure_bandwidth(net: &dyn Transport, to: &str, small: usize, large: usize, timeout: Duration) -> Result<f64, TransportError> {
    let nonce = net.now().as_nanos() as u64;
    let t1 = probe_rtt(net, to, small, nonce, timeout)?;
    let t2 = probe_rtt(net, to, large, nonce.wrapping_add(1), timeout)?;
    let dt = t2.saturating_sub(t1).as_secs_f64();
    if dt <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(8.0 * (large - small) as f64 / dt)
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub interval: Duration,
    pub small: usize,
    pub large: usize,
    pub timeout: Duration,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { interval: Duration::from_secs(30), small: 4 << 10, large: 256 << 10, timeout: Duration::from_secs(10) }
    }
}

/// Periodically measures the links to every other member and reports them.
pub fn probe_loop(net: &dyn Transport, coordinator: &str, opts: &ProbeOptions, shared: &NodeShared) {
    let client = MeshClient::new(net, coordinator, Channel::Side);
    let me = net.local_id().to_string();
    while !shared.stopped() {
        if net.sleep(opts.interval).is_err() {
            return;
        }
        let mesh = match client.get_mesh() {
            Ok(Some(m)) => m,
            Ok(None) => continue,
            Err(_) => return,
        };
        for peer in mesh.members.iter().filter(|m| m.id != me) {
            if shared.stopped() {
                return;
            }
            net.register_peer(peer);
            let bps = match measure_bandwidth(net, &peer.id, opts.small, opts.large, opts.timeout) {
                Ok(b) if b.is_finite() => Some(b),
                Ok(_) => None,
                Err(TransportError::Crashed) => return,
                Err(_) => None,
            };
            if client.call(&Request::ReportBandwidth { to: peer.id.clone(), bps }).is_err() {
                return;
            }
        }
    }
}
