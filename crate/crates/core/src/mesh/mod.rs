//! Membership: committed mesh state, the coordinator protocol and the
//! coordinator state machine.

pub mod coordinator;
pub mod protocol;
pub mod state;

pub use coordinator::{Coordinator, CoordinatorConfig, EvictReason, Event, EventKind, Outgoing, Stage, KEY_STEP};
pub use protocol::{decode_u64, Request, Response, WaitPredicate};
pub use state::{MeshState, PeerAddr};
