#![cfg_attr(not(test), no_std)]

//! Allocation-only building blocks for low-communication data-parallel
//! training.
//!
//! Everything in this crate is deterministic and free of IO: the tensor and
//! optimizer kernels, the toy regression model, the 256-bucket codebook
//! quantizer, the ring schedule arithmetic, the max-min ring solver, the
//! canonical byte encodings and the coordinator's membership state machine.
//! Transports, threads and files live in the `lowcomm` crate.

extern crate alloc;

pub mod checkpoint;
pub mod error;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod quant;
pub mod ring;
pub mod rng;
pub mod tensor;
pub mod topology;
pub mod wire;

pub use crate::error::{Error, Result};
pub use crate::tensor::{ModelParams, Tensor};
