//! Runtime for elastic low-communication data-parallel training: transports
//! (TCP and a deterministic simulator), the coordinator server, the ring
//! all-reduce, the training engine and scenario tooling.

pub mod transport;
pub mod allreduce;
pub mod mesh;
pub mod service;
pub mod engine;
pub mod scenario;
pub mod bench;
pub mod config;
