//! Ring all-reduce schedule arithmetic, the per-hop fold and the chunk
//! frame header. The std crate drives these over a transport.
//!
//! The flat tensor is cut into `k` near-equal contiguous chunks. During the
//! reduce-scatter pass, at step `s` the node at ring position `p` sends
//! chunk `(p − s) mod k` to its successor and folds the incoming chunk
//! `(p − s − 1) mod k` into its own data. Chunk `c` starts at position `c`
//! and visits `c + 1, c + 2, …`, so after `k − 1` steps position `p` holds
//! the fully reduced chunk `(p + 1) mod k`. The all-gather pass then
//! forwards finished chunks unchanged around the ring.
//!
//! The reduction carried between hops is a running mean: a chunk that has
//! absorbed `j − 1` contributions is combined with the local one as
//! `m + (x − m) / j`. Identical or constant inputs are therefore reduced
//! exactly, and every chunk is reduced in ring order starting at its home
//! position, which is what a reference computation has to replay.
//!
//! Each chunk is further split into `segments` sub-chunks: the unit that is
//! quantized and the unit that is pipelined through the ring.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{bail, Result};
use crate::quant::{self, QuantChunk};
use crate::wire::{f32s_from_le, f32s_to_le, ByteReader, ByteWriter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Mode {
    Fp32 = 0,
    Int8 = 1,
}

impl Mode {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Mode::Fp32),
            1 => Ok(Mode::Int8),
            _ => bail!(Decode, "unknown reduction mode {v}"),
        }
    }

    /// Payload shrink factor used in communication accounting.
    pub fn compression(&self) -> u32 {
        match self {
            Mode::Fp32 => 1,
            Mode::Int8 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Phase {
    ReduceScatter = 0,
    AllGather = 1,
    /// A participant gave up on the attempt; carries no payload.
    Abort = 2,
}

impl Phase {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Phase::ReduceScatter),
            1 => Ok(Phase::AllGather),
            2 => Ok(Phase::Abort),
            _ => bail!(Decode, "unknown all-reduce phase {v}"),
        }
    }
}

/// Header of an all-reduce chunk frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChunkHeader {
    pub job: u64,
    pub epoch: u32,
    /// `ring_chunk × segments + segment`.
    pub chunk: u32,
    pub phase: Phase,
    pub mode: Mode,
}

pub const CHUNK_HEADER_LEN: usize = 8 + 4 + 4 + 1 + 1;

impl ChunkHeader {
    pub fn encode_with(&self, payload: &[u8]) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(CHUNK_HEADER_LEN + payload.len());
        w.u64(self.job);
        w.u32(self.epoch);
        w.u32(self.chunk);
        w.u8(self.phase as u8);
        w.u8(self.mode as u8);
        w.bytes(payload);
        w.into_inner()
    }

    pub fn decode(buf: &[u8]) -> Result<(ChunkHeader, &[u8])> {
        let mut r = ByteReader::new(buf);
        let h = ChunkHeader {
            job: r.u64()?,
            epoch: r.u32()?,
            chunk: r.u32()?,
            phase: Phase::from_u8(r.u8()?)?,
            mode: Mode::from_u8(r.u8()?)?,
        };
        Ok((h, &buf[CHUNK_HEADER_LEN..]))
    }
}

/// `k` near-equal contiguous slices of `0..n`; the first `n mod k` slices
/// are one element longer.
pub fn split_even(range: Range<usize>, k: usize) -> Vec<Range<usize>> {
    assert!(k > 0);
    let n = range.end - range.start;
    let (base, rem) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut at = range.start;
    for i in 0..k {
        let len = base + usize::from(i < rem);
        out.push(at..at + len);
        at += len;
    }
    out
}

pub fn chunk_bounds(n: usize, k: usize) -> Vec<Range<usize>> {
    split_even(0..n, k)
}

fn wrap(x: isize, k: usize) -> usize {
    x.rem_euclid(k as isize) as usize
}

/// Chunk position `p` sends at reduce-scatter step `s`.
pub fn rs_send_chunk(p: usize, s: usize, k: usize) -> usize {
    wrap(p as isize - s as isize, k)
}

/// Chunk position `p` receives (and folds) at reduce-scatter step `s`.
pub fn rs_recv_chunk(p: usize, s: usize, k: usize) -> usize {
    wrap(p as isize - s as isize - 1, k)
}

/// Chunk fully reduced at position `p` after reduce-scatter.
pub fn owned_chunk(p: usize, k: usize) -> usize {
    (p + 1) % k
}

pub fn ag_send_chunk(p: usize, s: usize, k: usize) -> usize {
    wrap(p as isize + 1 - s as isize, k)
}

pub fn ag_recv_chunk(p: usize, s: usize, k: usize) -> usize {
    wrap(p as isize - s as isize, k)
}

/// Number of contributions chunk `c` has absorbed once it reaches position
/// `p` and `p` has folded its own data in.
pub fn contributions_at(c: usize, p: usize, k: usize) -> usize {
    wrap(p as isize - c as isize, k) + 1
}

/// Running-mean fold: `mean` holds the mean of `j − 1` contributions and
/// becomes the mean of `j` after absorbing `own`.
pub fn fold_mean(mean: &mut [f32], own: &[f32], j: usize) {
    debug_assert_eq!(mean.len(), own.len());
    debug_assert!(j >= 2);
    let jf = j as f32;
    for (m, &x) in mean.iter_mut().zip(own) {
        *m += (x - *m) / jf;
    }
}

/// Encodes a segment for transmission. Empty segments have empty payloads.
pub fn encode_segment(mode: Mode, values: &[f32]) -> Result<Vec<u8>> {
    if values.is_empty() {
        return Ok(Vec::new());
    }
    Ok(match mode {
        Mode::Fp32 => f32s_to_le(values),
        Mode::Int8 => quant::quantize(values)?.encode(),
    })
}

/// Decodes a received segment, checking it has the expected length.
pub fn decode_segment(mode: Mode, payload: &[u8], expect: usize) -> Result<Vec<f32>> {
    if expect == 0 {
        if !payload.is_empty() {
            bail!(Decode, "payload for an empty segment");
        }
        return Ok(Vec::new());
    }
    let v = match mode {
        Mode::Fp32 => f32s_from_le(payload)?,
        Mode::Int8 => QuantChunk::decode(payload)?.dequantize(),
    };
    if v.len() != expect {
        bail!(Decode, "segment carries {} values, expected {expect}", v.len());
    }
    if v.iter().any(|x| !x.is_finite()) {
        bail!(NonFinite, "received segment");
    }
    Ok(v)
}

/// Ring order and epoch shared by all participants of one all-reduce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingPlan {
    pub epoch: u64,
    pub order: Vec<String>,
}

impl RingPlan {
    pub fn new(epoch: u64, order: Vec<String>) -> Result<Self> {
        if order.is_empty() {
            bail!(Shape, "ring plan with no participants");
        }
        for (i, n) in order.iter().enumerate() {
            if order[..i].contains(n) {
                bail!(Shape, "node {n} appears twice in the ring");
            }
        }
        Ok(RingPlan { epoch, order })
    }

    pub fn k(&self) -> usize {
        self.order.len()
    }

    pub fn position(&self, node: &str) -> Option<usize> {
        self.order.iter().position(|n| n == node)
    }

    pub fn successor(&self, p: usize) -> &str {
        &self.order[(p + 1) % self.k()]
    }

    pub fn predecessor(&self, p: usize) -> &str {
        &self.order[(p + self.k() - 1) % self.k()]
    }

    pub fn chunk_bounds(&self, n: usize) -> Vec<Range<usize>> {
        chunk_bounds(n, self.k())
    }
}

/// Bytes one node sends in a full all-reduce of `n` values, payload only.
pub fn ring_payload_bytes(n: usize, k: usize, segments: usize, mode: Mode) -> usize {
    if k <= 1 {
        return 0;
    }
    let chunks = chunk_bounds(n, k);
    // Each position sends k − 1 distinct chunks per pass; averaged over
    // positions every chunk is sent (k − 1) times per pass.
    let per_chunk = |r: &Range<usize>| -> usize {
        split_even(r.clone(), segments)
            .iter()
            .map(|s| match (s.is_empty(), mode) {
                (true, _) => 0,
                (false, Mode::Fp32) => 4 * s.len(),
                (false, Mode::Int8) => quant::HEADER_BYTES + s.len(),
            })
            .sum()
    };
    let total: usize = chunks.iter().map(per_chunk).sum();
    2 * (k - 1) * total / k
}
