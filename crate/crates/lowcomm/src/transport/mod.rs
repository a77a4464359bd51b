//! Reliable, ordered, framed links between named nodes.
//!
//! A link is identified by `(peer, channel)` and delivers frames in send
//! order. Two implementations exist: [`tcp::TcpNet`] over real sockets and
//! [`sim::SimWorld`], an in-process network on a virtual clock.
//!
//! Every handle belongs to one task of one node. Tasks on the same node are
//! started with [`Transport::spawn`] and get their own handle.

pub mod sim;
pub mod tcp;

use std::time::Duration;

use lowcomm_core::mesh::PeerAddr;
use lowcomm_core::wire::{Channel, Frame};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("link to {0} is down")]
    LinkDown(String),
    #[error("timed out")]
    Timeout,
    /// The local node crashed or the transport is shutting down; the task
    /// should unwind.
    #[error("local node stopped")]
    Crashed,
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// Byte and frame counters of one node, framing included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
}

impl Traffic {
    pub fn since(&self, earlier: &Traffic) -> Traffic {
        Traffic {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            frames_sent: self.frames_sent - earlier.frames_sent,
            frames_received: self.frames_received - earlier.frames_received,
        }
    }
}

/// Handle to a task started with [`Transport::spawn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Task(pub u64);

pub type TaskFn = Box<dyn FnOnce(Box<dyn Transport>) + Send + 'static>;

/// Timeout meaning "wait indefinitely".
pub const FOREVER: Duration = Duration::MAX;

pub trait Transport: Send {
    fn local_id(&self) -> &str;

    /// Queues a frame on the `(to, channel)` link. Returns once the frame
    /// is handed to the link; use [`Transport::flush`] to wait for it to
    /// leave the node.
    fn send(&self, to: &str, channel: Channel, frame: Frame) -> Result<()>;

    /// Next frame from `from` on `channel`.
    fn recv(&self, from: &str, channel: Channel, timeout: Duration) -> Result<Frame>;

    /// Next frame from any peer on any of `channels`.
    fn recv_any(&self, channels: &[Channel], timeout: Duration) -> Result<(String, Channel, Frame)>;

    /// Blocks until everything queued towards `to` has been transmitted.
    fn flush(&self, to: &str, channel: Channel) -> Result<()>;

    /// Makes `addr` reachable by id (TCP needs the endpoint; a no-op on the
    /// simulator).
    fn register_peer(&self, addr: &PeerAddr);

    /// Endpoint other nodes can reach this node at.
    fn endpoint(&self) -> String;

    /// Time since the transport started (virtual on the simulator).
    fn now(&self) -> Duration;

    fn sleep(&self, d: Duration) -> Result<()>;

    /// Accounts `d` of local computation. Advances the virtual clock on the
    /// simulator; real work already takes real time on TCP.
    fn charge(&self, d: Duration) -> Result<()>;

    fn spawn(&self, name: &str, f: TaskFn) -> Task;

    fn join(&self, task: Task) -> Result<()>;

    fn traffic(&self) -> Traffic;
}

/// Deadline arithmetic that saturates instead of overflowing on
/// [`FOREVER`].
pub fn deadline(now: Duration, timeout: Duration) -> Duration {
    now.saturating_add(timeout)
}
