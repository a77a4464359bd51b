use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use lowcomm_core::mesh::{decode_u64, Coordinator, Event, Outgoing, Request, KEY_STEP};
use lowcomm_core::wire::{Channel, Frame, FrameKind};

use crate::transport::{Transport, TransportError};

#[derive(Clone, Debug)]
pub struct ServerOptions {
    /// Failure-detection tick period; ticks fall on multiples of it.
    pub tick: Duration,
    /// Finish once `mesh/step` reaches this value.
    pub stop_after_step: Option<u64>,
    /// How long to keep answering after the job finished or halted.
    pub linger: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions { tick: Duration::from_secs(1), stop_after_step: None, linger: Duration::from_secs(2) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerOutcome {
    pub halted: Option<String>,
    pub step: u64,
    pub events: Vec<Event>,
}

fn next_tick(now: Duration, tick: Duration) -> Duration {
    let n = now.as_nanos() / tick.as_nanos().max(1) + 1;
    Duration::from_nanos((n * tick.as_nanos()) as u64)
}

/// Runs the coordinator on `net` until `stop` is raised, the transport goes
/// away, or the job finishes or halts and the linger period has passed.
pub fn serve(net: &dyn Transport, coord: Arc<Mutex<Coordinator>>, opts: &ServerOptions, stop: Arc<AtomicBool>) -> ServerOutcome {
    let lock = || coord.lock().unwrap_or_else(|e| e.into_inner());
    let mut routes: HashMap<(String, u64), Channel> = HashMap::new();
    let mut tick_at = next_tick(net.now(), opts.tick);
    let mut done_at: Option<Duration> = None;
    let channels = [Channel::Control, Channel::Heartbeat, Channel::Side];
    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let now = net.now();
        if done_at.is_some_and(|d| now >= d) {
            break;
        }
        let wake = [Some(tick_at), lock().next_deadline(), done_at].into_iter().flatten().min().unwrap_or(tick_at);
        let out: Vec<Outgoing> = match net.recv_any(&channels, wake.saturating_sub(now)) {
            Ok((from, ch, f)) => {
                let now = net.now();
                match f.kind {
                    FrameKind::Heartbeat => lock().heartbeat(now, &from),
                    FrameKind::Deathrattle => lock().deathrattle(now, &from),
                    FrameKind::KvOp => match Request::decode(&f.payload) {
                        Ok((id, req)) => {
                            if let Request::Join { addr, .. } = &req {
                                net.register_peer(addr);
                            }
                            routes.insert((from.clone(), id), ch);
                            lock().handle(now, &from, id, req)
                        }
                        Err(e) => {
                            log::warn!("coordinator: undecodable request from {from}: {e}");
                            Vec::new()
                        }
                    },
                    k => {
                        log::warn!("coordinator: unexpected {k:?} frame from {from}");
                        Vec::new()
                    }
                }
            }
            Err(TransportError::Timeout) => Vec::new(),
            Err(_) => break,
        };
        let now = net.now();
        let mut out = out;
        if now >= tick_at || lock().next_deadline().is_some_and(|d| d <= now) {
            out.extend(lock().tick(now));
            if now >= tick_at {
                tick_at = next_tick(now, opts.tick);
            }
        }
        for o in out {
            let ch = routes.remove(&(o.to.clone(), o.id)).unwrap_or(Channel::Control);
            let frame = Frame::new(FrameKind::KvOp, o.response.encode(o.id)).expect("response fits a frame");
            if let Err(e) = net.send(&o.to, ch, frame) {
                log::debug!("coordinator: reply to {} lost: {e}", o.to);
            }
        }
        if done_at.is_none() {
            let c = lock();
            let step = c.kv_get(KEY_STEP).and_then(decode_u64).unwrap_or(0);
            if c.halted().is_some() || opts.stop_after_step.is_some_and(|t| step >= t) {
                done_at = Some(now + opts.linger);
            }
        }
    }
    let c = lock();
    ServerOutcome {
        halted: c.halted().map(str::to_string),
        step: c.kv_get(KEY_STEP).and_then(decode_u64).unwrap_or(0),
        events: c.events().to_vec(),
    }
}
