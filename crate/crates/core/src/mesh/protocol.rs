//! Coordinator request/response messages. Both travel as kv-op frames whose
//! payload is `u64 LE request id | u8 tag | fields`.

use alloc::string::String;
use alloc::vec::Vec;

use super::state::{bounded, MeshState, PeerAddr};
use crate::error::{bail, Result};
use crate::wire::{ByteReader, ByteWriter};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WaitPredicate {
    Exists,
    Equals(Vec<u8>),
    /// Value is a u64 LE at least this large.
    AtLeast(u64),
}

impl WaitPredicate {
    pub fn holds(&self, value: Option<&[u8]>) -> bool {
        match (self, value) {
            (_, None) => false,
            (WaitPredicate::Exists, Some(_)) => true,
            (WaitPredicate::Equals(want), Some(v)) => v == &want[..],
            (WaitPredicate::AtLeast(n), Some(v)) => decode_u64(v).is_some_and(|x| x >= *n),
        }
    }
}

pub fn decode_u64(v: &[u8]) -> Option<u64> {
    <[u8; 8]>::try_from(v).ok().map(u64::from_le_bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    KvSet { key: String, value: Vec<u8> },
    KvGet { key: String },
    KvWait { key: String, pred: WaitPredicate, timeout_ms: u64 },
    Join { addr: PeerAddr, config_hash: [u8; 32], blocking: bool },
    /// The joiner holds the checkpoint of outer step `step`.
    JoinReady { step: u64 },
    DonorFailed { donor: String },
    /// Inner phase of round `step` finished; waiting for the reduction plan.
    SyncBarrier { step: u64 },
    /// Outcome of the all-reduce attempt under plan `epoch`.
    Commit { step: u64, epoch: u64, ok: bool, suspects: Vec<String> },
    /// Outer step of round `step` applied and its checkpoint published.
    JoinBarrier { step: u64 },
    /// Measured bandwidth to `to`; `None` when the probe failed.
    ReportBandwidth { to: String, bps: Option<f64> },
    GetMesh,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Ok,
    Value(Option<Vec<u8>>),
    Timeout,
    Welcome { mesh: MeshState, shard: u64, step: u64 },
    /// Fetch the donor's latest checkpoint (at least `step`); `shard` is the
    /// data shard assigned to the joiner.
    FetchFrom { donor: PeerAddr, step: u64, shard: u64 },
    Plan { mesh: MeshState },
    Committed,
    Retry { mesh: MeshState },
    Proceed { mesh: MeshState },
    Refused { reason: String },
    Evicted,
    Stale,
    Fatal { reason: String },
    Mesh(Option<MeshState>),
}

fn put_ids(w: &mut ByteWriter, ids: &[String]) {
    w.u32(ids.len() as u32);
    for id in ids {
        w.str(id);
    }
}

fn get_ids(r: &mut ByteReader<'_>) -> Result<Vec<String>> {
    let n = bounded(r.u32()?, r)?;
    (0..n).map(|_| r.string()).collect()
}

fn put_opt_bytes(w: &mut ByteWriter, v: &Option<Vec<u8>>) {
    match v {
        None => w.u8(0),
        Some(b) => {
            w.u8(1);
            w.blob(b);
        }
    }
}

fn get_bool(r: &mut ByteReader<'_>) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => bail!(Decode, "bad boolean {v}"),
    }
}

impl Request {
    pub fn encode(&self, id: u64) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(id);
        match self {
            Request::KvSet { key, value } => {
                w.u8(0);
                w.str(key);
                w.blob(value);
            }
            Request::KvGet { key } => {
                w.u8(1);
                w.str(key);
            }
            Request::KvWait { key, pred, timeout_ms } => {
                w.u8(2);
                w.str(key);
                match pred {
                    WaitPredicate::Exists => w.u8(0),
                    WaitPredicate::Equals(v) => {
                        w.u8(1);
                        w.blob(v);
                    }
                    WaitPredicate::AtLeast(n) => {
                        w.u8(2);
                        w.u64(*n);
                    }
                }
                w.u64(*timeout_ms);
            }
            Request::Join { addr, config_hash, blocking } => {
                w.u8(3);
                addr.encode_into(&mut w);
                w.bytes(config_hash);
                w.u8(*blocking as u8);
            }
            Request::JoinReady { step } => {
                w.u8(4);
                w.u64(*step);
            }
            Request::DonorFailed { donor } => {
                w.u8(5);
                w.str(donor);
            }
            Request::SyncBarrier { step } => {
                w.u8(6);
                w.u64(*step);
            }
            Request::Commit { step, epoch, ok, suspects } => {
                w.u8(7);
                w.u64(*step);
                w.u64(*epoch);
                w.u8(*ok as u8);
                put_ids(&mut w, suspects);
            }
            Request::JoinBarrier { step } => {
                w.u8(8);
                w.u64(*step);
            }
            Request::ReportBandwidth { to, bps } => {
                w.u8(9);
                w.str(to);
                match bps {
                    None => w.u8(0),
                    Some(b) => {
                        w.u8(1);
                        w.f64(*b);
                    }
                }
            }
            Request::GetMesh => w.u8(10),
        }
        w.into_inner()
    }

    pub fn decode(buf: &[u8]) -> Result<(u64, Request)> {
        let mut r = ByteReader::new(buf);
        let id = r.u64()?;
        let req = match r.u8()? {
            0 => Request::KvSet { key: r.string()?, value: r.blob()?.to_vec() },
            1 => Request::KvGet { key: r.string()? },
            2 => {
                let key = r.string()?;
                let pred = match r.u8()? {
                    0 => WaitPredicate::Exists,
                    1 => WaitPredicate::Equals(r.blob()?.to_vec()),
                    2 => WaitPredicate::AtLeast(r.u64()?),
                    v => bail!(Decode, "bad wait predicate {v}"),
                };
                Request::KvWait { key, pred, timeout_ms: r.u64()? }
            }
            3 => Request::Join { addr: PeerAddr::decode_from(&mut r)?, config_hash: r.hash()?, blocking: get_bool(&mut r)? },
            4 => Request::JoinReady { step: r.u64()? },
            5 => Request::DonorFailed { donor: r.string()? },
            6 => Request::SyncBarrier { step: r.u64()? },
            7 => Request::Commit { step: r.u64()?, epoch: r.u64()?, ok: get_bool(&mut r)?, suspects: get_ids(&mut r)? },
            8 => Request::JoinBarrier { step: r.u64()? },
            9 => {
                let to = r.string()?;
                let bps = if get_bool(&mut r)? { Some(r.f64()?) } else { None };
                Request::ReportBandwidth { to, bps }
            }
            10 => Request::GetMesh,
            t => bail!(Decode, "unknown request tag {t}"),
        };
        r.finish()?;
        Ok((id, req))
    }
}

impl Response {
    pub fn encode(&self, id: u64) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(id);
        match self {
            Response::Ok => w.u8(0),
            Response::Value(v) => {
                w.u8(1);
                put_opt_bytes(&mut w, v);
            }
            Response::Timeout => w.u8(2),
            Response::Welcome { mesh, shard, step } => {
                w.u8(3);
                mesh.encode_into(&mut w);
                w.u64(*shard);
                w.u64(*step);
            }
            Response::FetchFrom { donor, step, shard } => {
                w.u8(4);
                donor.encode_into(&mut w);
                w.u64(*step);
                w.u64(*shard);
            }
            Response::Plan { mesh } => {
                w.u8(5);
                mesh.encode_into(&mut w);
            }
            Response::Committed => w.u8(6),
            Response::Retry { mesh } => {
                w.u8(7);
                mesh.encode_into(&mut w);
            }
            Response::Proceed { mesh } => {
                w.u8(8);
                mesh.encode_into(&mut w);
            }
            Response::Refused { reason } => {
                w.u8(9);
                w.str(reason);
            }
            Response::Evicted => w.u8(10),
            Response::Stale => w.u8(11),
            Response::Fatal { reason } => {
                w.u8(12);
                w.str(reason);
            }
            Response::Mesh(m) => {
                w.u8(13);
                match m {
                    None => w.u8(0),
                    Some(m) => {
                        w.u8(1);
                        m.encode_into(&mut w);
                    }
                }
            }
        }
        w.into_inner()
    }

    pub fn decode(buf: &[u8]) -> Result<(u64, Response)> {
        let mut r = ByteReader::new(buf);
        let id = r.u64()?;
        let resp = match r.u8()? {
            0 => Response::Ok,
            1 => Response::Value(if get_bool(&mut r)? { Some(r.blob()?.to_vec()) } else { None }),
            2 => Response::Timeout,
            3 => Response::Welcome { mesh: MeshState::decode_from(&mut r)?, shard: r.u64()?, step: r.u64()? },
            4 => Response::FetchFrom { donor: PeerAddr::decode_from(&mut r)?, step: r.u64()?, shard: r.u64()? },
            5 => Response::Plan { mesh: MeshState::decode_from(&mut r)? },
            6 => Response::Committed,
            7 => Response::Retry { mesh: MeshState::decode_from(&mut r)? },
            8 => Response::Proceed { mesh: MeshState::decode_from(&mut r)? },
            9 => Response::Refused { reason: r.string()? },
            10 => Response::Evicted,
            11 => Response::Stale,
            12 => Response::Fatal { reason: r.string()? },
            13 => Response::Mesh(if get_bool(&mut r)? { Some(MeshState::decode_from(&mut r)?) } else { None }),
            t => bail!(Decode, "unknown response tag {t}"),
        };
        r.finish()?;
        Ok((id, resp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mesh() -> MeshState {
        MeshState {
            epoch: 4,
            members: vec![PeerAddr::new("a", "127.0.0.1:1"), PeerAddr::new("b", "sim")],
            ring: vec!["b".into(), "a".into()],
            joining: vec!["c".into()],
        }
    }

    #[test]
    fn requests_roundtrip() {
        let reqs = vec![
            Request::KvSet { key: "k".into(), value: vec![1, 2] },
            Request::KvGet { key: "k".into() },
            Request::KvWait { key: "k".into(), pred: WaitPredicate::AtLeast(7), timeout_ms: 500 },
            Request::KvWait { key: "k".into(), pred: WaitPredicate::Equals(vec![3]), timeout_ms: 1 },
            Request::Join { addr: PeerAddr::new("x", "h:1"), config_hash: [3; 32], blocking: true },
            Request::JoinReady { step: 5 },
            Request::DonorFailed { donor: "a".into() },
            Request::SyncBarrier { step: 2 },
            Request::Commit { step: 2, epoch: 9, ok: false, suspects: vec!["b".into()] },
            Request::JoinBarrier { step: 2 },
            Request::ReportBandwidth { to: "b".into(), bps: Some(1e8) },
            Request::ReportBandwidth { to: "b".into(), bps: None },
            Request::GetMesh,
        ];
        for (i, q) in reqs.into_iter().enumerate() {
            assert_eq!(Request::decode(&q.encode(i as u64)).unwrap(), (i as u64, q));
        }
    }

    #[test]
    fn responses_roundtrip() {
        let resps = vec![
            Response::Ok,
            Response::Value(None),
            Response::Value(Some(vec![9])),
            Response::Timeout,
            Response::Welcome { mesh: mesh(), shard: 3, step: 8 },
            Response::FetchFrom { donor: PeerAddr::new("a", "e"), step: 1, shard: 4 },
            Response::Plan { mesh: mesh() },
            Response::Committed,
            Response::Retry { mesh: mesh() },
            Response::Proceed { mesh: mesh() },
            Response::Refused { reason: "no".into() },
            Response::Evicted,
            Response::Stale,
            Response::Fatal { reason: "x".into() },
            Response::Mesh(Some(mesh())),
            Response::Mesh(None),
        ];
        for (i, p) in resps.into_iter().enumerate() {
            assert_eq!(Response::decode(&p.encode(i as u64)).unwrap(), (i as u64, p));
        }
    }

    #[test]
    fn predicates() {
        assert!(!WaitPredicate::Exists.holds(None));
        assert!(WaitPredicate::Exists.holds(Some(&[])));
        assert!(WaitPredicate::AtLeast(3).holds(Some(&3u64.to_le_bytes())));
        assert!(!WaitPredicate::AtLeast(4).holds(Some(&3u64.to_le_bytes())));
        assert!(!WaitPredicate::AtLeast(0).holds(Some(&[1, 2])));
        assert!(WaitPredicate::Equals(vec![1]).holds(Some(&[1])));
    }

    #[test]
    fn garbage_rejected() {
        assert!(Request::decode(&[0; 8]).is_err());
        assert!(Response::decode(&[0, 0, 0, 0, 0, 0, 0, 0, 99]).is_err());
        let mut ok = Response::Committed.encode(1);
        ok.push(0);
        assert!(Response::decode(&ok).is_err());
    }
}
