//! Counter-addressable deterministic randomness.
//!
//! Draws come from ChaCha8 keyed by the 64-bit seed, with the ChaCha nonce
//! selecting an independent stream (one per data shard) and the block
//! counter addressing a position inside it. Every `(seed, stream, position)`
//! triple therefore names a fixed, platform-independent sequence, which is
//! what lets a resumed node regenerate exactly the batches it would have
//! drawn.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Streams reserved for model plumbing; data shards use small integers.
pub const STREAM_TEACHER: u64 = u64::MAX;
pub const STREAM_EVAL: u64 = u64::MAX - 1;
pub const STREAM_INIT: u64 = u64::MAX - 2;

/// Words reserved for each position within a stream (2^32 words = 16 GiB).
const POSITION_SHIFT: u32 = 32;

/// Serializable address of a draw sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub position: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64, position: u64) -> Self {
        RngState { seed, stream, position }
    }

    pub fn rng(&self) -> DetRng {
        DetRng::at(self.seed, self.stream, self.position)
    }

    /// The state addressing the following position.
    pub fn next(self) -> Self {
        RngState { position: self.position + 1, ..self }
    }
}

pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn at(seed: u64, stream: u64, position: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        inner.set_word_pos((position as u128) << POSITION_SHIFT);
        DetRng { inner }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire's multiply-shift with rejection keeps draws unbiased.
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal via Box–Muller (cosine branch only, so every draw
    /// consumes exactly two u64 words).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn gaussian_f32(&mut self) -> f32 {
        self.gaussian() as f32
    }
}
