//! The coordinator as a pure state machine: every input carries the current
//! time and every output is a list of responses to send. The server loop in
//! the std crate feeds it frames and calls [`Coordinator::tick`] once per
//! detection interval.
//!
//! A round `r` passes three barriers:
//!
//! 1. **sync** — members finished their inner phase. Departed members are
//!    dropped, ready non-blocking joiners are admitted and every participant
//!    receives the reduction plan.
//! 2. **commit** — participants report the all-reduce outcome. Unanimous
//!    success with no departures commits; anything else yields a new plan over
//!    the survivors and everyone retries from preserved inputs.
//! 3. **join** — the outer step is applied and the checkpoint published.
//!    Pending blocking joiners are told to fetch it; once they hold it the
//!    membership is committed, `mesh/step` is set to `r` and round `r + 1`
//!    starts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::time::Duration;

use super::protocol::{Request, Response, WaitPredicate};
use super::state::{MeshState, PeerAddr};
use crate::topology::RingTracker;

/// Key holding the last finished outer step (u64 LE).
pub const KEY_STEP: &str = "mesh/step";

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinatorConfig {
    /// Founding members expected before round 1 starts.
    pub initial_world: usize,
    pub config_hash: [u8; 32],
    pub heartbeat_timeout: Duration,
    /// Retries of one round's all-reduce before giving up.
    pub max_retries: u32,
    /// Evictions within one round that are fatal when they also reach
    /// `mass_failure_fraction` of the round's starting world size.
    pub mass_failure_min: usize,
    pub mass_failure_fraction: f64,
    /// Outer steps already completed when the job (re)starts.
    pub start_step: u64,
}

impl CoordinatorConfig {
    pub fn new(initial_world: usize, config_hash: [u8; 32]) -> Self {
        CoordinatorConfig {
            initial_world,
            config_hash,
            heartbeat_timeout: Duration::from_secs(6),
            max_retries: 8,
            mass_failure_min: 2,
            mass_failure_fraction: 0.3,
            start_step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub to: String,
    pub id: u64,
    pub response: Response,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvictReason {
    Timeout,
    Reported { by: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    Joined { epoch: u64 },
    Left,
    Evicted(EvictReason),
    /// A membership or ring change was committed.
    Epoch { epoch: u64, k: usize },
    Halted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub at: Duration,
    pub node: String,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Bootstrap,
    /// Waiting on the sync barrier of the current round.
    Inner,
    /// All-reduce attempts in flight; waiting on commit reports.
    Reduce,
    /// Waiting on the join barrier.
    Outer,
    /// Blocking joiners are fetching the round's checkpoint.
    Admitting,
    Halted,
}

struct Waiter {
    node: String,
    id: u64,
    key: String,
    pred: WaitPredicate,
    deadline: Duration,
}

#[derive(Default)]
struct NbJoiner {
    ready: Option<u64>,
    sync: Option<(u64, u64)>,
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    kv: BTreeMap<String, Vec<u8>>,
    waiters: Vec<Waiter>,
    mesh: MeshState,
    stage: Stage,
    halted: Option<String>,
    round: u64,
    round_start_k: usize,
    evicted_in_round: usize,
    last_seen: BTreeMap<String, Duration>,
    addrs: BTreeMap<String, PeerAddr>,
    shards: BTreeMap<String, u64>,
    next_shard: u64,
    departed: BTreeSet<String>,
    gone: BTreeSet<String>,
    events: Vec<Event>,
    tracker: RingTracker,
    founders: Vec<(String, u64)>,
    /// Blocking joiners waiting for a join barrier: Join request id.
    blocking: BTreeMap<String, u64>,
    /// Blocking joiners fetching: JoinReady request id once ready.
    fetching: BTreeMap<String, Option<u64>>,
    donors_tried: BTreeMap<String, BTreeSet<String>>,
    nonblocking: BTreeMap<String, NbJoiner>,
    sync_arrived: BTreeMap<String, u64>,
    participants: Vec<String>,
    reports: BTreeMap<String, (u64, bool)>,
    retries: u32,
    join_arrived: BTreeMap<String, u64>,
    out: Vec<Outgoing>,
}

impl Coordinator {
    pub fn new(cfg: CoordinatorConfig) -> Self {
        Coordinator {
            cfg,
            kv: BTreeMap::new(),
            waiters: Vec::new(),
            mesh: MeshState::default(),
            stage: Stage::Bootstrap,
            halted: None,
            round: 0,
            round_start_k: 0,
            evicted_in_round: 0,
            last_seen: BTreeMap::new(),
            addrs: BTreeMap::new(),
            shards: BTreeMap::new(),
            next_shard: 0,
            departed: BTreeSet::new(),
            gone: BTreeSet::new(),
            events: Vec::new(),
            tracker: RingTracker::new(),
            founders: Vec::new(),
            blocking: BTreeMap::new(),
            fetching: BTreeMap::new(),
            donors_tried: BTreeMap::new(),
            nonblocking: BTreeMap::new(),
            sync_arrived: BTreeMap::new(),
            participants: Vec::new(),
            reports: BTreeMap::new(),
            retries: 0,
            join_arrived: BTreeMap::new(),
            out: Vec::new(),
        }
    }

    pub fn mesh(&self) -> &MeshState {
        &self.mesh
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Round currently in progress (1-based once bootstrapped).
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    pub fn kv_get(&self, key: &str) -> Option<&[u8]> {
        self.kv.get(key).map(Vec::as_slice)
    }

    pub fn tracker(&self) -> &RingTracker {
        &self.tracker
    }

    /// Earliest pending kv-wait deadline, if any.
    pub fn next_deadline(&self) -> Option<Duration> {
        self.waiters.iter().map(|w| w.deadline).min()
    }

    fn reply(&mut self, to: &str, id: u64, response: Response) {
        self.out.push(Outgoing { to: to.to_string(), id, response });
    }

    fn take(&mut self) -> Vec<Outgoing> {
        core::mem::take(&mut self.out)
    }

    fn event(&mut self, at: Duration, node: &str, kind: EventKind) {
        self.events.push(Event { at, node: node.to_string(), kind });
    }

    fn live_members(&self) -> Vec<String> {
        self.mesh.members.iter().filter(|m| !self.departed.contains(&m.id)).map(|m| m.id.clone()).collect()
    }

    fn is_joiner(&self, id: &str) -> bool {
        self.blocking.contains_key(id) || self.fetching.contains_key(id) || self.nonblocking.contains_key(id)
    }

    fn tracked(&self, id: &str) -> bool {
        (self.mesh.contains(id) && !self.departed.contains(id))
            || self.is_joiner(id)
            || self.founders.iter().any(|(f, _)| f == id)
    }

    pub fn heartbeat(&mut self, now: Duration, from: &str) -> Vec<Outgoing> {
        if self.tracked(from) {
            let e = self.last_seen.entry(from.to_string()).or_insert(now);
            *e = (*e).max(now);
        }
        self.take()
    }

    /// Graceful departure; idempotent.
    pub fn deathrattle(&mut self, now: Duration, from: &str) -> Vec<Outgoing> {
        if self.tracked(from) {
            self.depart(now, from, EventKind::Left);
            self.progress(now);
        }
        self.take()
    }

    /// Failure detection and kv-wait expiry.
    pub fn tick(&mut self, now: Duration) -> Vec<Outgoing> {
        let timeout = self.cfg.heartbeat_timeout;
        let silent: Vec<String> = self
            .last_seen
            .iter()
            .filter(|(n, &t)| now.saturating_sub(t) > timeout && self.tracked(n))
            .map(|(n, _)| n.clone())
            .collect();
        for n in &silent {
            self.depart(now, n, EventKind::Evicted(EvictReason::Timeout));
        }
        let (expired, kept): (Vec<Waiter>, Vec<Waiter>) = core::mem::take(&mut self.waiters).into_iter().partition(|w| w.deadline <= now);
        self.waiters = kept;
        for w in expired {
            self.reply(&w.node, w.id, Response::Timeout);
        }
        if !silent.is_empty() {
            self.progress(now);
        }
        self.take()
    }

    /// Marks a node as gone: members are removed at the next barrier,
    /// joiners immediately. Held requests are answered with `Evicted`.
    fn depart(&mut self, now: Duration, node: &str, kind: EventKind) {
        if !self.tracked(node) {
            return;
        }
        if matches!(kind, EventKind::Evicted(_)) && self.mesh.contains(node) {
            self.evicted_in_round += 1;
        }
        self.event(now, node, kind);
        self.last_seen.remove(node);
        if self.mesh.contains(node) {
            self.departed.insert(node.to_string());
        } else {
            self.gone.insert(node.to_string());
        }
        let mut held = Vec::new();
        if let Some(id) = self.blocking.remove(node) {
            held.push(id);
        }
        if let Some(Some(id)) = self.fetching.remove(node) {
            held.push(id);
        }
        if let Some(nb) = self.nonblocking.remove(node) {
            held.extend(nb.sync.map(|(id, _)| id));
        }
        if let Some(i) = self.founders.iter().position(|(f, _)| f == node) {
            held.push(self.founders.remove(i).1);
        }
        held.extend(self.sync_arrived.remove(node));
        held.extend(self.reports.remove(node).map(|(id, _)| id));
        held.extend(self.join_arrived.remove(node));
        for id in held {
            self.reply(node, id, Response::Evicted);
        }
        self.mesh.joining.retain(|j| j != node);
    }

    fn halt(&mut self, now: Duration, reason: String) {
        if self.halted.is_some() {
            return;
        }
        self.event(now, "coordinator", EventKind::Halted { reason: reason.clone() });
        self.halted = Some(reason.clone());
        self.stage = Stage::Halted;
        let mut held: Vec<(String, u64)> = Vec::new();
        held.extend(self.sync_arrived.iter().map(|(n, &id)| (n.clone(), id)));
        held.extend(self.reports.iter().map(|(n, &(id, _))| (n.clone(), id)));
        held.extend(self.join_arrived.iter().map(|(n, &id)| (n.clone(), id)));
        held.extend(self.blocking.iter().map(|(n, &id)| (n.clone(), id)));
        held.extend(self.fetching.iter().filter_map(|(n, id)| id.map(|id| (n.clone(), id))));
        held.extend(self.nonblocking.iter().filter_map(|(n, nb)| nb.sync.map(|(id, _)| (n.clone(), id))));
        held.extend(self.founders.iter().cloned());
        self.sync_arrived.clear();
        self.reports.clear();
        self.join_arrived.clear();
        self.blocking.clear();
        self.fetching.clear();
        self.nonblocking.clear();
        self.founders.clear();
        for (n, id) in held {
            self.reply(&n, id, Response::Fatal { reason: reason.clone() });
        }
    }

    fn check_mass_failure(&mut self, now: Duration) -> bool {
        let lost = self.evicted_in_round;
        let k = self.round_start_k.max(1);
        if lost >= self.cfg.mass_failure_min && lost as f64 >= self.cfg.mass_failure_fraction * k as f64 {
            self.halt(now, format!("mass failure: {lost} of {k} nodes lost in round {}", self.round));
            return true;
        }
        false
    }

    /// Commits a new member list (rank order), re-planning the ring.
    fn commit_members(&mut self, now: Duration, members: Vec<String>) {
        let old_ids = self.mesh.member_ids();
        for id in &old_ids {
            if !members.contains(id) {
                self.departed.remove(id);
                self.gone.insert(id.clone());
            }
        }
        let ring = self.tracker.propose(&members, &self.mesh.ring);
        if members != old_ids || ring != self.mesh.ring {
            self.mesh.epoch += 1;
            self.mesh.members = members.iter().map(|id| self.addrs[id].clone()).collect();
            self.mesh.ring = ring;
            let epoch = self.mesh.epoch;
            for id in members.iter().filter(|id| !old_ids.contains(id)) {
                self.mesh.joining.retain(|j| j != id);
                self.event(now, id, EventKind::Joined { epoch });
            }
            self.event(now, "coordinator", EventKind::Epoch { epoch, k: members.len() });
            self.tracker.retain(&members);
        }
    }

    fn pick_donor(&self, joiner: &str) -> Option<PeerAddr> {
        let tried = self.donors_tried.get(joiner);
        let live = self.live_members();
        let ring: Vec<&String> = self.mesh.ring.iter().filter(|id| live.contains(id)).collect();
        ring.into_iter().find(|id| tried.is_none_or(|t| !t.contains(*id))).map(|id| self.addrs[id].clone())
    }

    fn assign_shard(&mut self, id: &str) -> u64 {
        if let Some(&s) = self.shards.get(id) {
            return s;
        }
        let s = self.next_shard;
        self.next_shard += 1;
        self.shards.insert(id.to_string(), s);
        s
    }

    pub fn handle(&mut self, now: Duration, from: &str, id: u64, req: Request) -> Vec<Outgoing> {
        self.dispatch(now, from, id, req);
        self.take()
    }

    fn dispatch(&mut self, now: Duration, from: &str, id: u64, req: Request) {
        match req {
            Request::KvSet { key, value } => {
                self.kv_set(key, value);
                self.reply(from, id, Response::Ok);
            }
            Request::KvGet { key } => {
                let v = self.kv.get(&key).cloned();
                self.reply(from, id, Response::Value(v));
            }
            Request::KvWait { key, pred, timeout_ms } => {
                if pred.holds(self.kv_get(&key)) {
                    let v = self.kv.get(&key).cloned();
                    self.reply(from, id, Response::Value(v));
                } else {
                    let deadline = now.saturating_add(Duration::from_millis(timeout_ms));
                    self.waiters.push(Waiter { node: from.to_string(), id, key, pred, deadline });
                }
            }
            Request::GetMesh => {
                let m = (self.stage != Stage::Bootstrap).then(|| self.mesh.clone());
                self.reply(from, id, Response::Mesh(m));
            }
            Request::ReportBandwidth { to, bps } => {
                match bps {
                    Some(b) => self.tracker.observe(from, &to, b),
                    None => self.tracker.mark_failed(from, &to),
                }
                self.reply(from, id, Response::Ok);
            }
            _ if self.halted.is_some() => {
                let reason = self.halted.clone().unwrap_or_default();
                self.reply(from, id, Response::Fatal { reason });
            }
            Request::Join { addr, config_hash, blocking } => self.on_join(now, from, id, addr, config_hash, blocking),
            _ if self.gone.contains(from) || self.departed.contains(from) => self.reply(from, id, Response::Evicted),
            Request::JoinReady { step } => self.on_join_ready(now, from, id, step),
            Request::DonorFailed { donor } => self.on_donor_failed(from, id, donor),
            Request::SyncBarrier { step } => self.on_sync(now, from, id, step),
            Request::Commit { step, epoch, ok, suspects } => self.on_commit(now, from, id, step, epoch, ok, suspects),
            Request::JoinBarrier { step } => self.on_join_barrier(now, from, id, step),
        }
    }

    fn kv_set(&mut self, key: String, value: Vec<u8>) {
        self.kv.insert(key.clone(), value);
        let v = self.kv[&key].clone();
        let (ready, kept): (Vec<Waiter>, Vec<Waiter>) =
            core::mem::take(&mut self.waiters).into_iter().partition(|w| w.key == key && w.pred.holds(Some(&v)));
        self.waiters = kept;
        for w in ready {
            self.reply(&w.node, w.id, Response::Value(Some(v.clone())));
        }
    }

    fn refuse(&mut self, to: &str, id: u64, reason: String) {
        self.reply(to, id, Response::Refused { reason });
    }

    fn on_join(&mut self, now: Duration, from: &str, id: u64, addr: PeerAddr, hash: [u8; 32], blocking: bool) {
        if hash != self.cfg.config_hash {
            return self.refuse(from, id, "configuration hash differs from the running job".into());
        }
        if addr.id != from {
            return self.refuse(from, id, format!("join for {} sent by {from}", addr.id));
        }
        if self.mesh.contains(from) || self.tracked(from) {
            return self.refuse(from, id, format!("{from} is already a member or joining"));
        }
        self.gone.remove(from);
        self.last_seen.insert(from.to_string(), now);
        self.addrs.insert(from.to_string(), addr);
        if self.stage == Stage::Bootstrap {
            self.founders.push((from.to_string(), id));
            if self.founders.len() >= self.cfg.initial_world {
                self.bootstrap(now);
            }
            return;
        }
        self.mesh.joining.push(from.to_string());
        if blocking {
            self.blocking.insert(from.to_string(), id);
        } else {
            let shard = self.assign_shard(from);
            match self.pick_donor(from) {
                Some(donor) => {
                    self.nonblocking.insert(from.to_string(), NbJoiner::default());
                    let step = self.round.saturating_sub(1);
                    self.reply(from, id, Response::FetchFrom { donor, step, shard });
                }
                None => {
                    self.mesh.joining.retain(|j| j != from);
                    self.refuse(from, id, "no donor available".into());
                }
            }
        }
    }

    fn bootstrap(&mut self, now: Duration) {
        let founders = core::mem::take(&mut self.founders);
        let ids: Vec<String> = founders.iter().map(|(f, _)| f.clone()).collect();
        for f in &ids {
            self.assign_shard(f);
        }
        self.mesh = MeshState {
            epoch: 1,
            members: ids.iter().map(|f| self.addrs[f].clone()).collect(),
            ring: ids.clone(),
            joining: Vec::new(),
        };
        for f in &ids {
            self.event(now, f, EventKind::Joined { epoch: 1 });
        }
        self.event(now, "coordinator", EventKind::Epoch { epoch: 1, k: ids.len() });
        let start = self.cfg.start_step;
        self.round = start + 1;
        self.round_start_k = ids.len();
        self.stage = Stage::Inner;
        self.kv_set(KEY_STEP.into(), start.to_le_bytes().to_vec());
        for (f, id) in founders {
            let shard = self.shards[&f];
            let mesh = self.mesh.clone();
            self.reply(&f, id, Response::Welcome { mesh, shard, step: start });
        }
    }

    fn on_join_ready(&mut self, now: Duration, from: &str, id: u64, step: u64) {
        if self.fetching.contains_key(from) {
            if self.stage != Stage::Admitting || step != self.round {
                return self.reply(from, id, Response::Stale);
            }
            self.fetching.insert(from.to_string(), Some(id));
            self.progress(now);
        } else if let Some(nb) = self.nonblocking.get_mut(from) {
            nb.ready = Some(step);
            self.reply(from, id, Response::Ok);
        } else {
            self.refuse(from, id, format!("{from} is not joining"));
        }
    }

    fn on_donor_failed(&mut self, from: &str, id: u64, donor: String) {
        if !self.fetching.contains_key(from) && !self.nonblocking.contains_key(from) {
            return self.refuse(from, id, format!("{from} is not joining"));
        }
        self.donors_tried.entry(from.to_string()).or_default().insert(donor);
        let shard = self.assign_shard(from);
        let step = if self.fetching.contains_key(from) { self.round } else { self.round.saturating_sub(1) };
        match self.pick_donor(from) {
            Some(donor) => self.reply(from, id, Response::FetchFrom { donor, step, shard }),
            None => self.refuse(from, id, "no donor left to fetch from".into()),
        }
    }

    fn on_sync(&mut self, now: Duration, from: &str, id: u64, step: u64) {
        if self.mesh.contains(from) {
            if self.stage != Stage::Inner || step != self.round {
                return self.refuse(from, id, format!("sync for round {step} during {:?} of round {}", self.stage, self.round));
            }
            self.sync_arrived.insert(from.to_string(), id);
        } else if let Some(nb) = self.nonblocking.get_mut(from) {
            let Some(ready) = nb.ready else {
                return self.refuse(from, id, "sync before holding a checkpoint".into());
            };
            if step != ready + 1 || step < self.round || (step == self.round && self.stage != Stage::Inner) {
                nb.ready = None;
                return self.reply(from, id, Response::Stale);
            }
            nb.sync = Some((id, step));
        } else {
            return self.refuse(from, id, format!("{from} is not a member"));
        }
        self.progress(now);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_commit(&mut self, now: Duration, from: &str, id: u64, step: u64, epoch: u64, ok: bool, suspects: Vec<String>) {
        if self.stage != Stage::Reduce || step != self.round || !self.participants.iter().any(|p| p == from) {
            return self.refuse(from, id, format!("commit for round {step} during {:?} of round {}", self.stage, self.round));
        }
        if epoch != self.mesh.epoch {
            return self.reply(from, id, Response::Stale);
        }
        for s in suspects {
            if s != from && self.participants.contains(&s) {
                self.depart(now, &s, EventKind::Evicted(EvictReason::Reported { by: from.to_string() }));
            }
        }
        self.reports.insert(from.to_string(), (id, ok));
        self.progress(now);
    }

    fn on_join_barrier(&mut self, now: Duration, from: &str, id: u64, step: u64) {
        if !self.mesh.contains(from) || self.stage != Stage::Outer || step != self.round {
            return self.refuse(from, id, format!("join barrier for round {step} during {:?} of round {}", self.stage, self.round));
        }
        self.join_arrived.insert(from.to_string(), id);
        self.progress(now);
    }

    /// Advances whichever barrier is active as far as the current state allows.
    fn progress(&mut self, now: Duration) {
        loop {
            let before = (self.stage, self.round);
            match self.stage {
                Stage::Inner => self.try_sync(now),
                Stage::Reduce => self.try_commit(now),
                Stage::Outer => self.try_join(now),
                Stage::Admitting => self.try_admit(now),
                Stage::Bootstrap | Stage::Halted => {}
            }
            if (self.stage, self.round) == before {
                break;
            }
        }
    }

    fn try_sync(&mut self, now: Duration) {
        let live = self.live_members();
        if live.is_empty() {
            return self.halt(now, "all members lost".into());
        }
        if !live.iter().all(|m| self.sync_arrived.contains_key(m)) {
            return;
        }
        if self.check_mass_failure(now) {
            return;
        }
        let round = self.round;
        let mut admitted = Vec::new();
        let mut stale = Vec::new();
        for (n, nb) in &self.nonblocking {
            match nb.sync {
                Some((id, s)) if s == round => admitted.push((n.clone(), id)),
                Some((id, s)) if s < round => stale.push((n.clone(), id)),
                _ => {}
            }
        }
        for (n, id) in stale {
            if let Some(nb) = self.nonblocking.get_mut(&n) {
                nb.sync = None;
                nb.ready = None;
            }
            self.reply(&n, id, Response::Stale);
        }
        let mut members = live;
        for (n, _) in &admitted {
            self.nonblocking.remove(n);
            members.push(n.clone());
        }
        self.commit_members(now, members);
        self.participants = self.mesh.member_ids();
        self.reports.clear();
        self.retries = 0;
        self.stage = Stage::Reduce;
        let mesh = self.mesh.clone();
        let arrived = core::mem::take(&mut self.sync_arrived);
        for (n, id) in arrived.into_iter().chain(admitted) {
            self.reply(&n, id, Response::Plan { mesh: mesh.clone() });
        }
    }

    fn try_commit(&mut self, now: Duration) {
        let live: Vec<String> = self.participants.iter().filter(|p| !self.departed.contains(*p)).cloned().collect();
        if live.is_empty() {
            return self.halt(now, "all members lost during the all-reduce".into());
        }
        if !live.iter().all(|p| self.reports.contains_key(p)) {
            return;
        }
        let unanimous = live.len() == self.participants.len() && self.reports.values().all(|&(_, ok)| ok);
        if unanimous {
            self.stage = Stage::Outer;
            for (n, (id, _)) in core::mem::take(&mut self.reports) {
                self.reply(&n, id, Response::Committed);
            }
            return;
        }
        self.retries += 1;
        if self.retries > self.cfg.max_retries {
            let reason = format!("all-reduce of round {} failed {} times", self.round, self.retries);
            return self.halt(now, reason);
        }
        if self.check_mass_failure(now) {
            return;
        }
        let reports = core::mem::take(&mut self.reports);
        // Departed members are all participants here; drop them now.
        let members = self.live_members();
        self.commit_members(now, members);
        self.participants = self.mesh.member_ids();
        let mesh = self.mesh.clone();
        for (n, (id, _)) in reports {
            self.reply(&n, id, Response::Retry { mesh: mesh.clone() });
        }
    }

    fn try_join(&mut self, now: Duration) {
        let live = self.live_members();
        if live.is_empty() {
            return self.halt(now, "all members lost".into());
        }
        if !live.iter().all(|m| self.join_arrived.contains_key(m)) {
            return;
        }
        let pending = core::mem::take(&mut self.blocking);
        for (n, id) in pending {
            let shard = self.assign_shard(&n);
            match self.pick_donor(&n) {
                Some(donor) => {
                    self.fetching.insert(n.clone(), None);
                    let step = self.round;
                    self.reply(&n, id, Response::FetchFrom { donor, step, shard });
                }
                None => self.refuse(&n, id, "no donor available".into()),
            }
        }
        self.stage = Stage::Admitting;
        self.try_admit(now);
    }

    fn try_admit(&mut self, now: Duration) {
        if !self.fetching.values().all(Option::is_some) {
            return;
        }
        let live = self.live_members();
        if live.is_empty() {
            return self.halt(now, "all members lost".into());
        }
        if self.check_mass_failure(now) {
            return;
        }
        let joiners: Vec<(String, u64)> =
            core::mem::take(&mut self.fetching).into_iter().map(|(n, id)| (n, id.unwrap_or_default())).collect();
        let mut members = live;
        members.extend(joiners.iter().map(|(n, _)| n.clone()));
        self.commit_members(now, members);
        for (n, _) in &joiners {
            self.donors_tried.remove(n);
        }
        let round = self.round;
        self.kv_set(KEY_STEP.into(), round.to_le_bytes().to_vec());
        let mesh = self.mesh.clone();
        let arrived = core::mem::take(&mut self.join_arrived);
        for (n, id) in arrived {
            self.reply(&n, id, Response::Proceed { mesh: mesh.clone() });
        }
        for (n, id) in joiners {
            let shard = self.shards[&n];
            self.reply(&n, id, Response::Welcome { mesh: mesh.clone(), shard, step: round });
        }
        self.round += 1;
        self.round_start_k = self.mesh.k();
        self.evicted_in_round = 0;
        self.stage = Stage::Inner;
    }
}
