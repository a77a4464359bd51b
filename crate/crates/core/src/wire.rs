//! Frame layout, the shared frame-kind registry and little-endian byte
//! helpers used by every encoding in the workspace.
//!
//! A frame on the wire is `u32 LE payload length | u8 kind | payload`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};

/// Largest payload a single frame may carry (16 MiB).
pub const MAX_FRAME_PAYLOAD: usize = 16 << 20;

/// Bytes of framing in front of every payload.
pub const FRAME_HEADER_LEN: usize = 5;

/// Registered frame kinds. The numeric values are part of the wire format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Heartbeat = 1,
    Deathrattle = 2,
    KvOp = 3,
    Checkpoint = 4,
    AllreduceChunk = 5,
    Probe = 6,
    Hello = 7,
}

impl FrameKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => FrameKind::Heartbeat,
            2 => FrameKind::Deathrattle,
            3 => FrameKind::KvOp,
            4 => FrameKind::Checkpoint,
            5 => FrameKind::AllreduceChunk,
            6 => FrameKind::Probe,
            7 => FrameKind::Hello,
            other => bail!(Decode, "unregistered frame kind {other}"),
        })
    }
}

/// Logical channel of a link. Each (peer, channel) pair is its own ordered
/// stream; over TCP it is its own connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Channel {
    /// Trainer <-> coordinator requests.
    Control = 0,
    /// Node -> coordinator liveness signals.
    Heartbeat = 1,
    /// Background requests to the coordinator (bandwidth reports).
    Side = 2,
    /// All-reduce chunk traffic.
    Ring = 3,
    /// Requests to a peer's checkpoint/probe service.
    Service = 4,
    /// Replies from a peer's checkpoint/probe service.
    ServiceReply = 5,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Control,
        Channel::Heartbeat,
        Channel::Side,
        Channel::Ring,
        Channel::Service,
        Channel::ServiceReply,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        match Channel::ALL.get(v as usize) {
            Some(c) => Ok(*c),
            None => bail!(Decode, "unknown channel {v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, payload: Vec<u8>) -> Result<Self> {
        if payload.len() > MAX_FRAME_PAYLOAD {
            bail!(Range, "frame payload of {} bytes exceeds {MAX_FRAME_PAYLOAD}", payload.len());
        }
        Ok(Frame { kind, payload })
    }

    pub fn empty(kind: FrameKind) -> Self {
        Frame { kind, payload: Vec::new() }
    }

    /// Size of the frame on the wire, header included.
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn header(&self) -> [u8; FRAME_HEADER_LEN] {
        let len = (self.payload.len() as u32).to_le_bytes();
        [len[0], len[1], len[2], len[3], self.kind as u8]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a frame header into (payload length, kind).
    pub fn parse_header(header: [u8; FRAME_HEADER_LEN]) -> Result<(usize, FrameKind)> {
        let len = u32::from_le_bytes([header[0], header[1], header[2], header[3]]) as usize;
        if len > MAX_FRAME_PAYLOAD {
            bail!(Decode, "frame length {len} exceeds {MAX_FRAME_PAYLOAD}");
        }
        Ok((len, FrameKind::from_u8(header[4])?))
    }

    /// Decodes exactly one frame occupying the whole buffer.
    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < FRAME_HEADER_LEN {
            bail!(Decode, "truncated frame header");
        }
        let (len, kind) = Frame::parse_header([buf[0], buf[1], buf[2], buf[3], buf[4]])?;
        if buf.len() - FRAME_HEADER_LEN != len {
            bail!(Decode, "frame declares {len} payload bytes, found {}", buf.len() - FRAME_HEADER_LEN);
        }
        Ok(Frame { kind, payload: buf[FRAME_HEADER_LEN..].to_vec() })
    }
}

/// Hello payload: `u8 channel | u32 LE id length | id bytes`.
pub fn encode_hello(node: &str, channel: Channel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u8(channel as u8);
    w.str(node);
    w.into_inner()
}

pub fn decode_hello(payload: &[u8]) -> Result<(String, Channel)> {
    let mut r = ByteReader::new(payload);
    let channel = Channel::from_u8(r.u8()?)?;
    let node = r.string()?;
    r.finish()?;
    Ok((node, channel))
}

#[derive(Default, Debug, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        ByteWriter { buf: Vec::with_capacity(cap) }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Length-prefixed (u32 LE) byte string.
    pub fn blob(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.bytes(v);
    }

    pub fn str(&mut self, v: &str) {
        self.blob(v.as_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.f32(*x);
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            bail!(Decode, "truncated: wanted {n} bytes at offset {}, {} left", self.pos, self.remaining());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.bytes(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn hash(&mut self) -> Result<[u8; 32]> {
        self.array()
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.bytes(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let raw = self.blob()?;
        match core::str::from_utf8(raw) {
            Ok(s) => Ok(String::from(s)),
            Err(_) => Err(Error::Decode(String::from("invalid UTF-8 string"))),
        }
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::Decode("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Fails unless every byte has been consumed.
    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            bail!(Decode, "{} trailing bytes", self.remaining());
        }
        Ok(())
    }
}

/// Reinterprets little-endian f32 bytes.
pub fn f32s_from_le(raw: &[u8]) -> Result<Vec<f32>> {
    if raw.len() % 4 != 0 {
        bail!(Decode, "f32 payload of {} bytes is not a multiple of 4", raw.len());
    }
    ByteReader::new(raw).f32s(raw.len() / 4)
}

pub fn f32s_to_le(v: &[f32]) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(v.len() * 4);
    w.f32s(v);
    w.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_and_header() {
        let f = Frame::new(FrameKind::Probe, alloc::vec![1, 2, 3]).unwrap();
        let bytes = f.encode();
        assert_eq!(&bytes[..5], &[3, 0, 0, 0, 6]);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn oversized_and_unknown_frames_rejected() {
        assert!(Frame::new(FrameKind::KvOp, alloc::vec![0; MAX_FRAME_PAYLOAD + 1]).is_err());
        assert!(Frame::decode(&[0, 0, 0, 0, 99]).is_err());
        assert!(Frame::decode(&[2, 0, 0, 0, 1, 7]).is_err());
    }

    #[test]
    fn hello_roundtrip() {
        let p = encode_hello("node-3", Channel::Ring);
        assert_eq!(decode_hello(&p).unwrap(), (String::from("node-3"), Channel::Ring));
    }
}
