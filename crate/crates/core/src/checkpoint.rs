//! Outer-boundary training state and its canonical encoding.
//!
//! Stream form used for transfers and files:
//! `u64 LE body length | 32-byte SHA-256 of body | body`.

use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::optim::{AdamWState, NesterovState};
use crate::tensor::ModelParams;
use crate::wire::{ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"LCKP";
const VERSION: u32 = 1;
pub const STREAM_PREFIX: usize = 8 + 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Outer steps completed.
    pub outer_step: u64,
    pub params: ModelParams,
    /// Host-retained copy the next pseudo-gradient is taken against.
    pub retained: ModelParams,
    pub adamw: AdamWState,
    pub nesterov: NesterovState,
    /// `(shard, next batch position)` pairs.
    pub data_positions: Vec<(u64, u64)>,
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        p.check_layout(&self.retained, "retained parameters")?;
        p.check_layout(&self.adamw.m, "AdamW first moment")?;
        p.check_layout(&self.adamw.v, "AdamW second moment")?;
        p.check_layout(&self.nesterov.buffer, "Nesterov buffer")?;
        if self.adamw.v.tensors().flat_map(|t| t.data()).any(|&x| x < 0.0) {
            bail!(Range, "negative AdamW second moment");
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(5 * 4 * self.params.numel() + 256);
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.outer_step);
        w.bytes(&self.config_hash);
        self.params.encode_into(&mut w);
        self.retained.encode_into(&mut w);
        w.u64(self.adamw.step);
        self.adamw.m.encode_into(&mut w);
        self.adamw.v.encode_into(&mut w);
        self.nesterov.buffer.encode_into(&mut w);
        w.u32(self.data_positions.len() as u32);
        for &(s, p) in &self.data_positions {
            w.u64(s);
            w.u64(p);
        }
        w.into_inner()
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.bytes(4)? != MAGIC {
            bail!(Decode, "not a checkpoint");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Decode, "unsupported checkpoint version {version}");
        }
        let outer_step = r.u64()?;
        let config_hash = r.hash()?;
        let params = ModelParams::decode_from(&mut r)?;
        let retained = ModelParams::decode_from(&mut r)?;
        let step = r.u64()?;
        let m = ModelParams::decode_from(&mut r)?;
        let v = ModelParams::decode_from(&mut r)?;
        let buffer = ModelParams::decode_from(&mut r)?;
        let n = r.u32()? as usize;
        if n > r.remaining() / 16 {
            bail!(Decode, "data position count {n} exceeds buffer");
        }
        let mut data_positions = Vec::with_capacity(n);
        for _ in 0..n {
            data_positions.push((r.u64()?, r.u64()?));
        }
        r.finish()?;
        let ck = Checkpoint {
            outer_step,
            params,
            retained,
            adamw: AdamWState { step, m, v },
            nesterov: NesterovState { buffer },
            data_positions,
            config_hash,
        };
        ck.validate().map_err(|e| crate::Error::Decode(alloc::format!("{e}")))?;
        Ok(ck)
    }

    /// Length- and hash-prefixed stream form.
    pub fn to_stream(&self) -> Vec<u8> {
        frame_stream(&self.encode())
    }

    pub fn from_stream(buf: &[u8]) -> Result<Self> {
        Checkpoint::decode(unframe_stream(buf)?)
    }

    /// SHA-256 over the canonical encoding.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }

    /// Hash of the state all members share at an outer boundary: the step,
    /// parameters, retained copy and outer momentum. The inner optimizer
    /// state and data positions are per-worker and excluded.
    pub fn replicated_hash(&self) -> [u8; 32] {
        let mut w = ByteWriter::new();
        w.u64(self.outer_step);
        self.params.encode_into(&mut w);
        self.retained.encode_into(&mut w);
        self.nesterov.buffer.encode_into(&mut w);
        Sha256::digest(w.as_slice()).into()
    }
}

pub fn frame_stream(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(STREAM_PREFIX + body.len());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(body));
    out.extend_from_slice(body);
    out
}

/// Checks the length and content hash of a stream and returns its body.
pub fn unframe_stream(buf: &[u8]) -> Result<&[u8]> {
    let mut r = ByteReader::new(buf);
    let len = r.u64()?;
    let hash = r.hash()?;
    if r.remaining() as u64 != len {
        bail!(Decode, "stream declares {len} body bytes, found {}", r.remaining());
    }
    let body = &buf[STREAM_PREFIX..];
    if Sha256::digest(body)[..] != hash[..] {
        bail!(Decode, "checkpoint content hash mismatch");
    }
    Ok(body)
}
