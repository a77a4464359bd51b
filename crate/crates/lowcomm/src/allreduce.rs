//! Ring all-reduce (mean) over a transport, and the commit/retry loop
//! around it.
//!
//! Every attempt is tagged with a job id and the plan epoch. Frames of
//! older attempts still queued on a link are skipped. A participant that
//! gives up sends one abort frame to its successor, so the rest of the ring
//! fails fast instead of waiting for timeouts.

use std::ops::Range;
use std::time::Duration;

use lowcomm_core::mesh::{MeshState, Request, Response};
use lowcomm_core::ring::{
    ag_recv_chunk, ag_send_chunk, contributions_at, decode_segment, encode_segment, fold_mean, owned_chunk, rs_recv_chunk,
    rs_send_chunk, split_even, ChunkHeader, Mode, Phase, RingPlan,
};
use lowcomm_core::wire::{Channel, Frame, FrameKind};

use crate::mesh::{MeshClient, MeshError};
use crate::transport::{Transport, TransportError};

#[derive(Clone, Debug, PartialEq)]
pub struct RingOptions {
    pub mode: Mode,
    /// Segments per ring chunk.
    pub segments: usize,
    /// Forward each segment as soon as it is folded instead of waiting for
    /// the whole chunk.
    pub pipelined: bool,
    /// Silence from the predecessor longer than this fails the attempt.
    pub timeout: Duration,
    /// Simulated cost of quantizing or dequantizing one value.
    pub codec_cost_per_value: Duration,
}

impl Default for RingOptions {
    fn default() -> Self {
        RingOptions {
            mode: Mode::Fp32,
            segments: 1,
            pipelined: true,
            timeout: Duration::from_secs(60),
            codec_cost_per_value: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RingError {
    #[error("all-reduce failed ({reason}); suspects {suspects:?}")]
    Failure { suspects: Vec<String>, reason: String },
    #[error("local node stopped")]
    Crashed,
}

fn fail(suspects: Vec<String>, reason: impl Into<String>) -> RingError {
    RingError::Failure { suspects, reason: reason.into() }
}

/// Job id of attempt `attempt` of round `round`.
pub fn job_id(round: u64, attempt: u32) -> u64 {
    round << 16 | u64::from(attempt & 0xffff)
}

struct Run<'a> {
    net: &'a dyn Transport,
    succ: String,
    pred: String,
    header: ChunkHeader,
    opts: &'a RingOptions,
    nseg: usize,
    segs: Vec<Vec<Range<usize>>>,
    input: &'a [f32],
    work: Vec<f32>,
    p: usize,
    k: usize,
}

impl Run<'_> {
    fn transport_err(&self, e: TransportError, peer: &str) -> RingError {
        match e {
            TransportError::Crashed => RingError::Crashed,
            TransportError::LinkDown(x) => fail(vec![x], "link down"),
            TransportError::Timeout => fail(vec![peer.to_string()], "timed out"),
        }
    }

    fn charge_codec(&self, n: usize) -> Result<(), RingError> {
        if self.header.mode == Mode::Int8 && !self.opts.codec_cost_per_value.is_zero() {
            let succ = self.succ.clone();
            self.net.charge(self.opts.codec_cost_per_value.mul_f64(n as f64)).map_err(|e| self.transport_err(e, &succ))?;
        }
        Ok(())
    }

    fn send(&self, phase: Phase, c: usize, i: usize, payload: &[u8]) -> Result<(), RingError> {
        let h = ChunkHeader { chunk: (c * self.nseg + i) as u32, phase, ..self.header };
        let frame = Frame::new(FrameKind::AllreduceChunk, h.encode_with(payload)).map_err(|e| fail(vec![], e.to_string()))?;
        self.net.send(&self.succ, Channel::Ring, frame).map_err(|e| self.transport_err(e, &self.succ))
    }

    fn flush(&self) -> Result<(), RingError> {
        self.net.flush(&self.succ, Channel::Ring).map_err(|e| self.transport_err(e, &self.succ))
    }

    fn recv(&self, phase: Phase, c: usize, i: usize) -> Result<Vec<u8>, RingError> {
        let want = (c * self.nseg + i) as u32;
        loop {
            let f = self.net.recv(&self.pred, Channel::Ring, self.opts.timeout).map_err(|e| self.transport_err(e, &self.pred))?;
            let (h, payload) = ChunkHeader::decode(&f.payload).map_err(|e| fail(vec![self.pred.clone()], e.to_string()))?;
            if (h.job, h.epoch) < (self.header.job, self.header.epoch) {
                continue;
            }
            if (h.job, h.epoch) != (self.header.job, self.header.epoch) {
                return Err(fail(vec![], format!("predecessor is on job {} epoch {}", h.job, h.epoch)));
            }
            if h.phase == Phase::Abort {
                return Err(fail(vec![], "aborted upstream"));
            }
            if h.phase != phase || h.chunk != want || h.mode != self.header.mode {
                return Err(fail(vec![self.pred.clone()], format!("expected {phase:?} chunk {want}, got {:?} chunk {}", h.phase, h.chunk)));
            }
            return Ok(payload.to_vec());
        }
    }

    fn encode(&self, range: &Range<usize>) -> Result<Vec<u8>, RingError> {
        self.charge_codec(range.len())?;
        encode_segment(self.header.mode, &self.work[range.clone()]).map_err(|e| fail(vec![], e.to_string()))
    }

    fn decode(&self, payload: &[u8], range: &Range<usize>) -> Result<Vec<f32>, RingError> {
        self.charge_codec(range.len())?;
        decode_segment(self.header.mode, payload, range.len()).map_err(|e| fail(vec![self.pred.clone()], e.to_string()))
    }

    fn send_rs(&self, c: usize, i: usize) -> Result<(), RingError> {
        let payload = self.encode(&self.segs[c][i])?;
        self.send(Phase::ReduceScatter, c, i, &payload)
    }

    fn recv_fold(&mut self, c: usize, i: usize) -> Result<(), RingError> {
        let range = self.segs[c][i].clone();
        let payload = self.recv(Phase::ReduceScatter, c, i)?;
        let mut mean = self.decode(&payload, &range)?;
        fold_mean(&mut mean, &self.input[range.clone()], contributions_at(c, self.p, self.k));
        self.work[range].copy_from_slice(&mean);
        Ok(())
    }

    fn recv_gather(&mut self, c: usize, i: usize) -> Result<Vec<u8>, RingError> {
        let range = self.segs[c][i].clone();
        let payload = self.recv(Phase::AllGather, c, i)?;
        let v = self.decode(&payload, &range)?;
        self.work[range].copy_from_slice(&v);
        Ok(payload)
    }

    fn run(&mut self) -> Result<(), RingError> {
        let (p, k, nseg) = (self.p, self.k, self.nseg);
        // Reduce-scatter.
        if self.opts.pipelined {
            for i in 0..nseg {
                self.send_rs(rs_send_chunk(p, 0, k), i)?;
            }
            for s in 0..k - 1 {
                let c = rs_recv_chunk(p, s, k);
                for i in 0..nseg {
                    self.recv_fold(c, i)?;
                    if s + 2 < k {
                        self.send_rs(c, i)?;
                    }
                }
            }
        } else {
            for s in 0..k - 1 {
                let c = rs_send_chunk(p, s, k);
                for i in 0..nseg {
                    self.send_rs(c, i)?;
                }
                self.flush()?;
                let c = rs_recv_chunk(p, s, k);
                for i in 0..nseg {
                    self.recv_fold(c, i)?;
                }
            }
        }
        // The owner adopts exactly what it will broadcast.
        let o = owned_chunk(p, k);
        let mut held = Vec::with_capacity(nseg);
        for i in 0..nseg {
            let range = self.segs[o][i].clone();
            let bytes = self.encode(&range)?;
            let v = self.decode(&bytes, &range)?;
            self.work[range].copy_from_slice(&v);
            held.push(bytes);
        }
        // All-gather: forward bytes unchanged.
        if self.opts.pipelined {
            for (i, b) in held.iter().enumerate() {
                self.send(Phase::AllGather, o, i, b)?;
            }
            for s in 0..k - 1 {
                let c = ag_recv_chunk(p, s, k);
                for i in 0..nseg {
                    let b = self.recv_gather(c, i)?;
                    if s + 2 < k {
                        self.send(Phase::AllGather, c, i, &b)?;
                    }
                }
            }
        } else {
            for s in 0..k - 1 {
                let c = ag_send_chunk(p, s, k);
                for (i, b) in held.iter().enumerate() {
                    self.send(Phase::AllGather, c, i, b)?;
                }
                self.flush()?;
                let c = ag_recv_chunk(p, s, k);
                held.clear();
                for i in 0..nseg {
                    held.push(self.recv_gather(c, i)?);
                }
            }
        }
        Ok(())
    }
}

/// Mean of `input` over the ring `plan`; every participant returns the
/// same values bit for bit.
pub fn allreduce(net: &dyn Transport, plan: &RingPlan, job: u64, input: &[f32], opts: &RingOptions) -> Result<Vec<f32>, RingError> {
    let me = net.local_id().to_string();
    let p = plan.position(&me).ok_or_else(|| fail(vec![], format!("{me} is not in the ring")))?;
    let k = plan.k();
    if k == 1 {
        return Ok(input.to_vec());
    }
    let nseg = opts.segments.max(1);
    let segs = plan.chunk_bounds(input.len()).into_iter().map(|r| split_even(r, nseg)).collect();
    let mut run = Run {
        net,
        succ: plan.successor(p).to_string(),
        pred: plan.predecessor(p).to_string(),
        header: ChunkHeader { job, epoch: plan.epoch as u32, chunk: 0, phase: Phase::ReduceScatter, mode: opts.mode },
        opts,
        nseg,
        segs,
        input,
        work: input.to_vec(),
        p,
        k,
    };
    match run.run() {
        Ok(()) => Ok(run.work),
        Err(RingError::Crashed) => Err(RingError::Crashed),
        Err(e) => {
            let _ = run.send(Phase::Abort, 0, 0, &[]);
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RoundError {
    #[error("evicted from the mesh")]
    Evicted,
    #[error("job halted: {0}")]
    Fatal(String),
    #[error("local node stopped")]
    Crashed,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reduced {
    pub values: Vec<f32>,
    /// Mesh the committed attempt ran under.
    pub mesh: MeshState,
    pub retries: u32,
}

/// Runs attempts under successive plans until the coordinator commits one.
/// `input` is preserved across attempts.
pub fn allreduce_with_retry(
    net: &dyn Transport,
    client: &MeshClient<'_>,
    round: u64,
    mut mesh: MeshState,
    input: &[f32],
    opts: &RingOptions,
) -> Result<Reduced, RoundError> {
    let me = net.local_id().to_string();
    let mut attempt = 0u32;
    loop {
        let plan = RingPlan::new(mesh.epoch, mesh.ring.clone()).map_err(|e| RoundError::Fatal(e.to_string()))?;
        let result = allreduce(net, &plan, job_id(round, attempt), input, opts);
        let (ok, suspects) = match &result {
            Ok(_) => (true, Vec::new()),
            Err(RingError::Crashed) => return Err(RoundError::Crashed),
            Err(RingError::Failure { suspects, reason }) => {
                log::info!("{me}: round {round} attempt {attempt} failed: {reason}");
                (false, suspects.clone())
            }
        };
        let resp = client.call(&Request::Commit { step: round, epoch: mesh.epoch, ok, suspects }).map_err(|e| match e {
            MeshError::Transport(TransportError::Crashed) => RoundError::Crashed,
            e => RoundError::Mesh(e),
        })?;
        match resp {
            Response::Committed => match result {
                Ok(values) => return Ok(Reduced { values, mesh, retries: attempt }),
                Err(_) => return Err(RoundError::Fatal("coordinator committed a failed attempt".into())),
            },
            Response::Retry { mesh: next } => {
                if !next.contains(&me) {
                    return Err(RoundError::Evicted);
                }
                mesh = next;
                attempt += 1;
            }
            Response::Evicted => return Err(RoundError::Evicted),
            Response::Fatal { reason } => return Err(RoundError::Fatal(reason)),
            r => return Err(RoundError::Mesh(MeshError::Unexpected(Box::new(r)))),
        }
    }
}
