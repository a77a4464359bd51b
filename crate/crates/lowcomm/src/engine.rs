//! The per-node training loop: H inner AdamW steps against a host-retained
//! copy of the shared parameters, the averaged pseudo-gradient through the
//! ring, the replicated Nesterov outer step, and one metrics row per round.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lowcomm_core::checkpoint::Checkpoint;
use lowcomm_core::mesh::{MeshState, PeerAddr, Request, Response, WaitPredicate};
use lowcomm_core::model::{forward_backward, loss, MlpSpec, Task};
use lowcomm_core::optim::{
    adamw_step, compute_pseudo_gradient, nesterov_outer_step, wsd_lr_scale, AdamWState, HyperParams, NesterovState,
};
use lowcomm_core::ring::Mode;
use lowcomm_core::wire::Channel;
use lowcomm_core::ModelParams;

use crate::allreduce::{allreduce_with_retry, RingOptions, RoundError};
use crate::mesh::{MeshClient, MeshError};
use crate::service::{fetch_checkpoint, heartbeat_loop, probe_loop, service_loop, FetchError, NodeShared, ProbeOptions};
use crate::transport::{Transport, TransportError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Fp32,
    Int8,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Fp32 => Mode::Fp32,
            ModeName::Int8 => Mode::Int8,
        }
    }
}

/// Optimizer constants as they appear in config files. `total_steps`
/// defaults to the run length `H × T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub inner_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub outer_lr: f32,
    pub outer_momentum: f32,
    pub warmup_steps: u64,
    pub total_steps: Option<u64>,
    pub cooldown_fraction: f32,
}

impl Default for HyperConfig {
    fn default() -> Self {
        let d = HyperParams::default();
        HyperConfig {
            inner_lr: d.inner_lr,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
            outer_lr: d.outer_lr,
            outer_momentum: d.outer_momentum,
            warmup_steps: d.warmup_steps,
            total_steps: None,
            cooldown_fraction: d.cooldown_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl From<ModelConfig> for MlpSpec {
    fn from(m: ModelConfig) -> MlpSpec {
        MlpSpec { input: m.input, hidden: m.hidden, output: m.output }
    }
}

/// Everything that must agree across the nodes of one job; its hash guards
/// joins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Inner steps per round (H).
    pub inner_steps: u64,
    /// Outer rounds (T).
    pub outer_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: ModeName,
    pub hyper: HyperConfig,
    pub model: ModelConfig,
    /// Observation noise of the synthetic targets.
    pub noise: f32,
    /// Every node trains on shard 0 instead of its own shard.
    pub identical_shards: bool,
    /// Segments per ring chunk.
    pub segments: usize,
    pub pipelined: bool,
    pub eval_batch: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            inner_steps: 100,
            outer_steps: 10,
            batch_size: 32,
            seed: 0,
            mode: ModeName::Int8,
            hyper: HyperConfig::default(),
            model: ModelConfig { input: 8, hidden: 16, output: 2 },
            noise: 0.05,
            identical_shards: false,
            segments: 4,
            pipelined: true,
            eval_batch: 512,
        }
    }
}

impl TrainerConfig {
    pub fn hyper_params(&self) -> HyperParams {
        let h = &self.hyper;
        HyperParams {
            inner_lr: h.inner_lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            outer_lr: h.outer_lr,
            outer_momentum: h.outer_momentum,
            warmup_steps: h.warmup_steps,
            total_steps: h.total_steps.unwrap_or(self.inner_steps * self.outer_steps),
            cooldown_fraction: h.cooldown_fraction,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.inner_steps == 0 {
            return Err("inner_steps must be >= 1".into());
        }
        if self.outer_steps == 0 {
            return Err("outer_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.eval_batch == 0 {
            return Err("eval_batch must be >= 1".into());
        }
        if self.segments == 0 {
            return Err("segments must be >= 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err("noise must be a finite value >= 0".into());
        }
        let hp = self.hyper_params();
        hp.validate().map_err(|e| format!("hyper: {e}"))?;
        if hp.total_steps < self.inner_steps * self.outer_steps {
            return Err(format!("hyper.total_steps {} is shorter than the run ({} inner steps)", hp.total_steps, self.inner_steps * self.outer_steps));
        }
        MlpSpec::from(self.model).validate().map_err(|e| format!("model: {e}"))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }

    pub fn task(&self) -> Task {
        Task::new(self.seed, self.model.into(), self.noise).expect("validated model")
    }

    pub fn ring_options(&self) -> RingOptions {
        RingOptions { mode: self.mode.into(), segments: self.segments, pipelined: self.pipelined, ..RingOptions::default() }
    }
}

/// Synchronizations saved relative to per-step fp32 averaging: `H` times
/// the payload shrink of `mode`. Codebook bytes are not counted.
pub fn comm_reduction_factor(inner_steps: u64, mode: Mode) -> f32 {
    inner_steps as f32 * mode.compression() as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub node: String,
    pub outer_step: u64,
    pub k: usize,
    pub epoch: u64,
    /// Ring order the committed all-reduce ran over.
    pub ring: Vec<String>,
    pub inner_steps: u64,
    pub mean_inner_loss: Option<f64>,
    pub eval_loss: f64,
    pub inner_time_s: f64,
    pub allreduce_time_s: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub lr_scale: f32,
    pub retries: u32,
    /// Hash of the replicated state after the outer step.
    pub param_hash: String,
    /// L2 norm of this node's own pseudo-gradient.
    pub delta_l2: f64,
}

/// Σ inner time / Σ (inner + all-reduce) time.
pub fn compute_utilization(metrics: &[RoundMetrics]) -> f64 {
    let inner: f64 = metrics.iter().map(|m| m.inner_time_s).sum();
    let total: f64 = metrics.iter().map(|m| m.inner_time_s + m.allreduce_time_s).sum();
    if total <= 0.0 {
        1.0
    } else {
        inner / total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JoinMode {
    /// Part of the initial world.
    Founder,
    Blocking,
    NonBlocking,
}

#[derive(Clone, Debug)]
pub struct NodeOptions {
    pub coordinator: PeerAddr,
    pub join: JoinMode,
    pub heartbeat_interval: Duration,
    pub request_timeout: Duration,
    pub ring: RingOptions,
    /// Accounted per inner step (virtual time on the simulator).
    pub inner_step_time: Duration,
    pub probe: Option<ProbeOptions>,
    /// Where the last committed checkpoint is written on exit.
    pub checkpoint_dir: Option<PathBuf>,
    /// State to start from instead of the fresh initialization.
    pub resume: Option<Checkpoint>,
}

impl NodeOptions {
    pub fn new(coordinator: PeerAddr, cfg: &TrainerConfig) -> Self {
        NodeOptions {
            coordinator,
            join: JoinMode::Founder,
            heartbeat_interval: Duration::from_secs(2),
            request_timeout: Duration::from_secs(3600),
            ring: cfg.ring_options(),
            inner_step_time: Duration::ZERO,
            probe: None,
            checkpoint_dir: None,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeOutcome {
    Finished,
    Left,
    Evicted,
    Refused(String),
    Fatal(String),
    Crashed,
}

#[derive(Clone, Debug)]
pub struct NodeReport {
    pub node: String,
    pub outcome: NodeOutcome,
    pub metrics: Vec<RoundMetrics>,
    /// Last committed state.
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, thiserror::Error)]
enum Stop {
    #[error("left")]
    Left,
    #[error("evicted")]
    Evicted,
    #[error("refused: {0}")]
    Refused(String),
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("crashed")]
    Crashed,
}

impl From<MeshError> for Stop {
    fn from(e: MeshError) -> Stop {
        match e {
            MeshError::Transport(TransportError::Crashed) => Stop::Crashed,
            MeshError::Transport(TransportError::LinkDown(_)) => Stop::Fatal("coordinator lost".into()),
            e => Stop::Fatal(e.to_string()),
        }
    }
}

impl From<RoundError> for Stop {
    fn from(e: RoundError) -> Stop {
        match e {
            RoundError::Evicted => Stop::Evicted,
            RoundError::Fatal(r) => Stop::Fatal(r),
            RoundError::Crashed => Stop::Crashed,
            RoundError::Mesh(m) => m.into(),
        }
    }
}

fn unexpected(r: Response) -> Stop {
    match r {
        Response::Evicted => Stop::Evicted,
        Response::Fatal { reason } => Stop::Fatal(reason),
        Response::Refused { reason } => Stop::Refused(reason),
        r => Stop::Fatal(format!("unexpected coordinator reply {r:?}")),
    }
}

fn l2(p: &ModelParams) -> f64 {
    p.tensors().flat_map(|t| t.data()).map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Outer-boundary state of one node.
struct Replica {
    /// Shared parameters θ^(t) (also the retained copy between rounds).
    params: ModelParams,
    adamw: AdamWState,
    nesterov: NesterovState,
    step: u64,
    shard: u64,
}

impl Replica {
    fn checkpoint(&self, cfg: &TrainerConfig, hash: [u8; 32]) -> Checkpoint {
        let shard = if cfg.identical_shards { 0 } else { self.shard };
        Checkpoint {
            outer_step: self.step,
            params: self.params.clone(),
            retained: self.params.clone(),
            adamw: self.adamw.clone(),
            nesterov: self.nesterov.clone(),
            data_positions: vec![(shard, self.step * cfg.inner_steps)],
            config_hash: hash,
        }
    }

    fn from_checkpoint(ck: &Checkpoint, shard: u64) -> Replica {
        Replica { params: ck.params.clone(), adamw: ck.adamw.clone(), nesterov: ck.nesterov.clone(), step: ck.outer_step, shard }
    }
}

struct Trainer<'a> {
    net: &'a dyn Transport,
    client: MeshClient<'a>,
    cfg: &'a TrainerConfig,
    opts: &'a NodeOptions,
    shared: &'a NodeShared,
    hp: HyperParams,
    task: Task,
    hash: [u8; 32],
    me: String,
    metrics: Vec<RoundMetrics>,
    last: Option<Checkpoint>,
}

impl Trainer<'_> {
    fn register(&self, mesh: &MeshState) {
        for m in &mesh.members {
            self.net.register_peer(m);
        }
    }

    fn commit(&mut self, r: &Replica) {
        let ck = r.checkpoint(self.cfg, self.hash);
        self.shared.publish(&ck);
        self.last = Some(ck);
    }

    fn fetch(&self, mut donor: PeerAddr, step: u64) -> Result<(Checkpoint, u64), Stop> {
        loop {
            self.net.register_peer(&donor);
            match fetch_checkpoint(self.net, &donor.id, step, self.opts.request_timeout) {
                Ok(ck) if ck.config_hash == self.hash => return Ok((ck, step)),
                Ok(_) => log::warn!("{}: checkpoint from {} has a different config", self.me, donor.id),
                Err(FetchError::Transport(TransportError::Crashed)) => return Err(Stop::Crashed),
                Err(e) => log::warn!("{}: fetch from {} failed: {e}", self.me, donor.id),
            }
            match self.client.call(&Request::DonorFailed { donor: donor.id.clone() })? {
                Response::FetchFrom { donor: d, .. } => donor = d,
                r => return Err(unexpected(r)),
            }
        }
    }

    fn join(&mut self) -> Result<(Replica, Option<(MeshState, bool)>), Stop> {
        let addr = PeerAddr::new(self.me.clone(), self.net.endpoint());
        let blocking = self.opts.join != JoinMode::NonBlocking;
        let resp = self.client.call(&Request::Join { addr, config_hash: self.hash, blocking })?;
        match (self.opts.join, resp) {
            (JoinMode::Founder, Response::Welcome { mesh, shard, step }) => {
                let r = match &self.opts.resume {
                    Some(ck) if ck.outer_step == step => Replica::from_checkpoint(ck, shard),
                    Some(ck) => return Err(Stop::Fatal(format!("resume checkpoint is at step {}, job at {step}", ck.outer_step))),
                    None if step == 0 => {
                        let params = self.task.init_params();
                        Replica { adamw: AdamWState::new(&params), nesterov: NesterovState::new(&params), params, step, shard }
                    }
                    None => return Err(Stop::Fatal(format!("job resumes at step {step} but no checkpoint was given"))),
                };
                self.register(&mesh);
                Ok((r, None))
            }
            (JoinMode::Blocking, Response::FetchFrom { donor, step, shard }) => {
                let (ck, _) = self.fetch(donor, step)?;
                match self.client.call(&Request::JoinReady { step: ck.outer_step })? {
                    Response::Welcome { mesh, shard: s, step } if step == ck.outer_step => {
                        debug_assert_eq!(s, shard);
                        self.register(&mesh);
                        Ok((Replica::from_checkpoint(&ck, s), None))
                    }
                    r => Err(unexpected(r)),
                }
            }
            (JoinMode::NonBlocking, Response::FetchFrom { donor, step, shard }) => {
                let mut min_step = step;
                loop {
                    let (ck, _) = self.fetch(donor.clone(), min_step)?;
                    match self.client.call(&Request::JoinReady { step: ck.outer_step })? {
                        Response::Ok => {}
                        r => return Err(unexpected(r)),
                    }
                    // Skip the inner phase: enter the next round's
                    // all-reduce with a zero pseudo-gradient.
                    match self.client.call(&Request::SyncBarrier { step: ck.outer_step + 1 })? {
                        Response::Plan { mesh } => {
                            self.register(&mesh);
                            return Ok((Replica::from_checkpoint(&ck, shard), Some((mesh, true))));
                        }
                        Response::Stale => {
                            min_step = ck.outer_step + 1;
                            let key = lowcomm_core::mesh::KEY_STEP;
                            self.client.kv_wait(key, WaitPredicate::AtLeast(min_step), self.opts.request_timeout)?;
                        }
                        r => return Err(unexpected(r)),
                    }
                }
            }
            (_, r) => Err(unexpected(r)),
        }
    }

    fn leave(&self) -> Stop {
        let _ = self.client.deathrattle();
        Stop::Left
    }

    fn run(&mut self) -> Result<(), Stop> {
        let (mut rep, mut entered) = self.join()?;
        if entered.is_none() {
            self.commit(&rep);
        }
        let h_steps = self.cfg.inner_steps;
        let eval = self.task.eval_batch(self.cfg.eval_batch);
        while rep.step < self.cfg.outer_steps {
            let round = rep.step + 1;
            if self.shared.leave_requested() {
                return Err(self.leave());
            }
            let t0 = self.net.now();
            let traffic0 = self.net.traffic();
            let shard = if self.cfg.identical_shards { 0 } else { rep.shard };
            let mut local = rep.params.clone();
            let mut losses = Vec::new();
            let mut lr_scale = 0.0;
            let (mesh, delta) = match entered.take() {
                Some((mesh, _)) => (mesh, rep.params.zeros_like()),
                None => {
                    for h in 1..=h_steps {
                        let g = (round - 1) * h_steps + h;
                        lr_scale = wsd_lr_scale(g, &self.hp).map_err(|e| Stop::Fatal(e.to_string()))?;
                        let batch = self.task.synth_batch(shard, g - 1, self.cfg.batch_size);
                        let (l, grads) = forward_backward(&local, &batch).map_err(|e| Stop::Fatal(format!("inner step {g}: {e}")))?;
                        adamw_step(&mut local, &grads, &mut rep.adamw, &self.hp, lr_scale)
                            .map_err(|e| Stop::Fatal(format!("inner step {g}: {e}")))?;
                        losses.push(l as f64);
                        if self.shared.leave_requested() {
                            return Err(self.leave());
                        }
                        self.net.charge(self.opts.inner_step_time).map_err(|_| Stop::Crashed)?;
                    }
                    let delta = compute_pseudo_gradient(&rep.params, &local).map_err(|e| Stop::Fatal(e.to_string()))?;
                    match self.client.call(&Request::SyncBarrier { step: round })? {
                        Response::Plan { mesh } => (mesh, delta),
                        r => return Err(unexpected(r)),
                    }
                }
            };
            let inner_time = self.net.now() - t0;
            self.register(&mesh);
            let t1 = self.net.now();
            let reduced = allreduce_with_retry(self.net, &self.client, round, mesh, &delta.flatten(), &self.opts.ring)?;
            let allreduce_time = self.net.now() - t1;
            let avg = rep.params.unflatten_like(&reduced.values).map_err(|e| Stop::Fatal(e.to_string()))?;
            nesterov_outer_step(&mut rep.params, &avg, &mut rep.nesterov, &self.hp).map_err(|e| Stop::Fatal(e.to_string()))?;
            rep.step = round;
            self.commit(&rep);
            let param_hash = hex::encode(self.last.as_ref().expect("just committed").replicated_hash());
            let eval_loss = loss(&rep.params, &eval).map_err(|e| Stop::Fatal(e.to_string()))? as f64;
            let traffic = self.net.traffic().since(&traffic0);
            match self.client.call(&Request::JoinBarrier { step: round })? {
                Response::Proceed { mesh } => self.register(&mesh),
                r => return Err(unexpected(r)),
            }
            self.metrics.push(RoundMetrics {
                node: self.me.clone(),
                outer_step: round,
                k: reduced.mesh.k(),
                epoch: reduced.mesh.epoch,
                inner_steps: losses.len() as u64,
                mean_inner_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                eval_loss,
                inner_time_s: inner_time.as_secs_f64(),
                allreduce_time_s: allreduce_time.as_secs_f64(),
                bytes_sent: traffic.bytes_sent,
                bytes_received: traffic.bytes_received,
                lr_scale,
                retries: reduced.retries,
                param_hash,
                delta_l2: l2(&delta),
                ring: reduced.mesh.ring.clone(),
            });
            log::info!("{}: round {round} k={} eval_loss={eval_loss:.6}", self.me, reduced.mesh.k());
        }
        Ok(())
    }
}

fn write_checkpoint(dir: &std::path::Path, node: &str, ck: &Checkpoint) {
    let path = dir.join(format!("{node}.ckpt"));
    if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, ck.to_stream())) {
        log::error!("{node}: writing {} failed: {e}", path.display());
    }
}

/// Runs one node (trainer plus background tasks) until the job finishes or
/// the node stops.
pub fn run_node(net: &dyn Transport, cfg: &TrainerConfig, opts: &NodeOptions, shared: Arc<NodeShared>) -> NodeReport {
    let me = net.local_id().to_string();
    net.register_peer(&opts.coordinator);
    let coord = opts.coordinator.id.clone();
    let (s, c, i) = (shared.clone(), coord.clone(), opts.heartbeat_interval);
    let hb = net.spawn("heartbeat", Box::new(move |n| heartbeat_loop(&*n, &c, i, &s)));
    let s = shared.clone();
    let svc = net.spawn("service", Box::new(move |n| service_loop(&*n, &s)));
    let probe = opts.probe.clone().map(|p| {
        let (s, c) = (shared.clone(), coord.clone());
        net.spawn("probe", Box::new(move |n| probe_loop(&*n, &c, &p, &s)))
    });
    let mut client = MeshClient::new(net, &coord, Channel::Control);
    client.timeout = opts.request_timeout;
    let mut t = Trainer {
        net,
        client,
        cfg,
        opts,
        shared: &shared,
        hp: cfg.hyper_params(),
        task: cfg.task(),
        hash: cfg.hash(),
        me: me.clone(),
        metrics: Vec::new(),
        last: None,
    };
    let outcome = match t.run() {
        Ok(()) => NodeOutcome::Finished,
        Err(Stop::Left) => NodeOutcome::Left,
        Err(Stop::Evicted) => NodeOutcome::Evicted,
        Err(Stop::Refused(r)) => NodeOutcome::Refused(r),
        Err(Stop::Fatal(r)) => NodeOutcome::Fatal(r),
        Err(Stop::Crashed) => NodeOutcome::Crashed,
    };
    match &outcome {
        NodeOutcome::Crashed => {}
        o => {
            log::info!("{me}: stopping ({o:?})");
            if let (Some(dir), Some(ck)) = (&opts.checkpoint_dir, &t.last) {
                write_checkpoint(dir, &me, ck);
            }
        }
    }
    shared.stop();
    let (metrics, checkpoint) = (std::mem::take(&mut t.metrics), t.last.take());
    drop(t);
    for task in [Some(hb), Some(svc), probe].into_iter().flatten() {
        let _ = net.join(task);
    }
    NodeReport { node: me, outcome, metrics, checkpoint }
}

/// Per-step synchronous data parallelism over `k` shards without any
/// transport: every step averages the `k` shard gradients and applies one
/// AdamW step. Consumes the same batches as a k-node run of `cfg`. Returns
/// the evaluation loss after every `cfg.inner_steps` steps.
pub fn train_data_parallel(cfg: &TrainerConfig, k: usize) -> Vec<f64> {
    let task = cfg.task();
    let hp = cfg.hyper_params();
    let mut params = task.init_params();
    let mut adamw = AdamWState::new(&params);
    let eval = task.eval_batch(cfg.eval_batch);
    let mut out = Vec::new();
    let total = cfg.inner_steps * cfg.outer_steps;
    for g in 1..=total {
        let mut sum: Option<Vec<f32>> = None;
        for s in 0..k as u64 {
            let shard = if cfg.identical_shards { 0 } else { s };
            let (_, grads) = forward_backward(&params, &task.synth_batch(shard, g - 1, cfg.batch_size)).expect("finite toy gradients");
            let flat = grads.flatten();
            match &mut sum {
                None => sum = Some(flat),
                Some(acc) => acc.iter_mut().zip(&flat).for_each(|(a, x)| *a += x),
            }
        }
        let mean: Vec<f32> = sum.expect("k >= 1").into_iter().map(|x| x / k as f32).collect();
        let grads = params.unflatten_like(&mean).expect("same layout");
        adamw_step(&mut params, &grads, &mut adamw, &hp, wsd_lr_scale(g, &hp).expect("within schedule")).expect("finite update");
        if g % cfg.inner_steps == 0 {
            out.push(loss(&params, &eval).expect("finite loss") as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comm_factors() {
        assert_eq!(comm_reduction_factor(100, Mode::Int8), 400.0);
        assert_eq!(comm_reduction_factor(500, Mode::Int8), 2000.0);
        assert_eq!(comm_reduction_factor(1, Mode::Fp32), 1.0);
    }

    #[test]
    fn utilization_edges() {
        let row = |inner: f64, ar: f64| RoundMetrics {
            node: "a".into(),
            outer_step: 1,
            k: 1,
            epoch: 1,
            inner_steps: 1,
            mean_inner_loss: None,
            eval_loss: 0.0,
            inner_time_s: inner,
            allreduce_time_s: ar,
            bytes_sent: 0,
            bytes_received: 0,
            lr_scale: 1.0,
            retries: 0,
            param_hash: String::new(),
            delta_l2: 0.0,
            ring: Vec::new(),
        };
        assert_eq!(compute_utilization(&[row(3.0, 0.0)]), 1.0);
        assert!((compute_utilization(&[row(38.0, 2.0)]) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainerConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = TrainerConfig { inner_steps: 0, ..TrainerConfig::default() };
        assert!(c.validate().unwrap_err().contains("inner_steps"));
        c.inner_steps = 1;
        c.hyper.beta1 = 1.0;
        assert!(c.validate().unwrap_err().contains("beta1"));
    }
}
