//! Talking to the coordinator: the request client used by nodes and the
//! server loop that hosts the membership state machine.

mod client;
mod server;

pub use client::{MeshClient, MeshError};
pub use server::{serve, ServerOptions, ServerOutcome};
