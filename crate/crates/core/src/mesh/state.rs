use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::wire::{ByteReader, ByteWriter};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerAddr {
    pub id: String,
    /// `host:port` for TCP; informational on the simulator.
    pub endpoint: String,
}

impl PeerAddr {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        PeerAddr { id: id.into(), endpoint: endpoint.into() }
    }

    pub fn encode_into(&self, w: &mut ByteWriter) {
        w.str(&self.id);
        w.str(&self.endpoint);
    }

    pub fn decode_from(r: &mut ByteReader<'_>) -> Result<Self> {
        Ok(PeerAddr { id: r.string()?, endpoint: r.string()? })
    }
}

/// Committed membership. A member's global rank is its index in `members`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MeshState {
    pub epoch: u64,
    pub members: Vec<PeerAddr>,
    /// Ring order over the member ids.
    pub ring: Vec<String>,
    /// Nodes admitted to the join protocol but not yet members.
    pub joining: Vec<String>,
}

impl MeshState {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.members.iter().position(|m| m.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rank_of(id).is_some()
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.id.clone()).collect()
    }

    pub fn addr(&self, id: &str) -> Option<&PeerAddr> {
        self.members.iter().find(|m| m.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.members.iter().enumerate() {
            if self.members[..i].iter().any(|o| o.id == m.id) {
                bail!(Shape, "duplicate member {}", m.id);
            }
        }
        if self.ring.len() != self.members.len() || self.members.iter().any(|m| !self.ring.contains(&m.id)) {
            bail!(Shape, "ring order is not a permutation of the members");
        }
        Ok(())
    }

    pub fn encode_into(&self, w: &mut ByteWriter) {
        w.u64(self.epoch);
        w.u32(self.members.len() as u32);
        for m in &self.members {
            m.encode_into(w);
        }
        for list in [&self.ring, &self.joining] {
            w.u32(list.len() as u32);
            for id in list {
                w.str(id);
            }
        }
    }

    pub fn decode_from(r: &mut ByteReader<'_>) -> Result<Self> {
        let epoch = r.u64()?;
        let n = bounded(r.u32()?, r)?;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            members.push(PeerAddr::decode_from(r)?);
        }
        let mut lists = [Vec::new(), Vec::new()];
        for list in lists.iter_mut() {
            let n = bounded(r.u32()?, r)?;
            for _ in 0..n {
                list.push(r.string()?);
            }
        }
        let [ring, joining] = lists;
        let m = MeshState { epoch, members, ring, joining };
        m.validate().map_err(|e| crate::Error::Decode(alloc::format!("{e}")))?;
        Ok(m)
    }
}

/// Rejects element counts that cannot possibly fit in the rest of a buffer
/// (every element takes at least 4 bytes).
pub(crate) fn bounded(n: u32, r: &ByteReader<'_>) -> Result<usize> {
    let n = n as usize;
    if n > r.remaining() / 4 {
        bail!(Decode, "count {n} exceeds buffer");
    }
    Ok(n)
}
