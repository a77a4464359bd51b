//! Deterministic in-process network on a virtual clock.
//!
//! Every task is an OS thread, but only one of them runs at a time: the
//! running task holds the baton until it blocks in a transport call, at
//! which point the scheduler hands the baton to the next ready task in FIFO
//! order. When no task is ready the clock jumps to the earliest pending
//! event (a frame arrival, a timer, a scheduled fault). Identical programs
//! therefore produce identical event orders and timestamps on every run.
//!
//! Each directed node pair owns one transmitter: frames leave in send order
//! at the pair's bandwidth, `(payload + 5) · 8 / bandwidth` seconds each,
//! and arrive one latency later. All channels between the pair share that
//! transmitter. A crashed node's connections reset: peers blocked on it see
//! [`TransportError::LinkDown`] and frames to or from it still in flight
//! are dropped.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use lowcomm_core::mesh::PeerAddr;
use lowcomm_core::wire::{Channel, Frame};

use super::{deadline, Result, Task, TaskFn, Traffic, Transport, TransportError, FOREVER};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultAction {
    /// The connection between the pair resets and stays down.
    Drop,
    /// Bandwidth of the pair changes to this many bits per second.
    Degrade(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub at: Duration,
    pub action: FaultAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub bandwidth_bps: f64,
    pub latency: Duration,
    pub faults: Vec<Fault>,
}

impl LinkSpec {
    pub fn new(bandwidth_bps: f64, latency: Duration) -> Self {
        LinkSpec { bandwidth_bps, latency, faults: Vec::new() }
    }

    pub fn with_fault(mut self, at: Duration, action: FaultAction) -> Self {
        self.faults.push(Fault { at, action });
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = |b: f64| b.is_finite() && b > 0.0;
        if !positive(self.bandwidth_bps) {
            return Err(format!("bandwidth must be positive, got {}", self.bandwidth_bps));
        }
        for f in &self.faults {
            if let FaultAction::Degrade(b) = f.action {
                if !positive(b) {
                    return Err(format!("degraded bandwidth must be positive, got {b}"));
                }
            }
        }
        Ok(())
    }
}

impl Default for LinkSpec {
    /// 1 Gb/s, 1 ms.
    fn default() -> Self {
        LinkSpec::new(1e9, Duration::from_millis(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("deadlock at t={at:?}: {blocked}")]
    Deadlock { at: Duration, blocked: String },
    #[error("virtual time limit {0:?} exceeded")]
    TimeLimit(Duration),
    #[error("task panicked: {0}")]
    Panicked(String),
}

#[derive(Debug)]
enum Wait {
    Recv { from: Option<String>, channels: Vec<Channel> },
    Sleep,
    Join(usize),
}

#[derive(Debug)]
enum Status {
    Ready,
    Running,
    Blocked(Wait),
    Done,
}

struct Actor {
    name: String,
    node: String,
    cv: Arc<Condvar>,
    status: Status,
    token: u64,
}

#[derive(Default)]
struct NodeState {
    crashed: bool,
    inbox: BTreeMap<Channel, VecDeque<(u64, String, Frame)>>,
    traffic: Traffic,
    actors: Vec<usize>,
}

#[derive(Clone)]
struct LinkState {
    bandwidth: f64,
    latency: Duration,
    down: bool,
}

enum Event {
    Deliver { src: String, dst: String, channel: Channel, frame: Frame },
    Timer { actor: usize, token: u64 },
    Fault { a: String, b: String, action: FaultAction },
}

struct Scheduled {
    at: Duration,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

struct State {
    now: Duration,
    seq: u64,
    running: Option<usize>,
    actors: Vec<Actor>,
    ready: VecDeque<usize>,
    events: BinaryHeap<Reverse<Scheduled>>,
    nodes: BTreeMap<String, NodeState>,
    default_link: LinkState,
    links: BTreeMap<(String, String), LinkState>,
    busy: BTreeMap<(String, String), Duration>,
    /// Frames sent on a directed pair and not yet delivered or lost.
    in_flight: BTreeMap<(String, String), usize>,
    failure: Option<SimError>,
    panics: Vec<String>,
    shutdown: bool,
    time_limit: Duration,
    finished: bool,
    threads: Vec<JoinHandle<()>>,
}

impl State {
    fn push(&mut self, at: Duration, event: Event) {
        self.seq += 1;
        let seq = self.seq;
        self.events.push(Reverse(Scheduled { at, seq, event }));
    }

    fn link(&self, a: &str, b: &str) -> &LinkState {
        self.links.get(&pair(a, b)).unwrap_or(&self.default_link)
    }

    fn link_mut(&mut self, a: &str, b: &str) -> &mut LinkState {
        let d = self.default_link.clone();
        self.links.entry(pair(a, b)).or_insert(d)
    }

    /// Crashed, or every task on it has finished.
    fn closed(&self, node: &str) -> bool {
        self.nodes.get(node).is_some_and(|n| n.crashed || n.actors.iter().all(|&a| matches!(self.actors[a].status, Status::Done)))
    }

    fn unreachable(&self, from: &str, to: &str) -> bool {
        from != to && (self.closed(to) || self.link(from, to).down)
    }

    /// Whether a receiver on `me` waiting for `from` can never get another
    /// frame: the link is reset, or `from` finished and nothing it sent is
    /// still on the wire.
    fn exhausted(&self, me: &str, from: &str) -> bool {
        if from == me {
            return false;
        }
        let crashed = self.nodes.get(from).is_some_and(|n| n.crashed);
        let drained = self.in_flight.get(&(from.to_string(), me.to_string())).is_none_or(|&n| n == 0);
        crashed || self.link(from, me).down || (self.closed(from) && drained)
    }

    fn wake(&mut self, id: usize) {
        if matches!(self.actors[id].status, Status::Blocked(_)) {
            self.actors[id].status = Status::Ready;
            self.ready.push_back(id);
        }
    }

    /// Wakes tasks on `node` blocked on a frame from `src` on `channel`, or
    /// any task blocked on `src` when `channel` is `None`.
    fn wake_receivers(&mut self, node: &str, src: &str, channel: Option<Channel>) {
        let ids: Vec<usize> = self.nodes.get(node).map(|n| n.actors.clone()).unwrap_or_default();
        for id in ids {
            let hit = match &self.actors[id].status {
                Status::Blocked(Wait::Recv { from, channels }) => {
                    from.as_deref().is_none_or(|f| f == src) && channel.is_none_or(|c| channels.contains(&c))
                }
                _ => false,
            };
            if hit {
                self.wake(id);
            }
        }
    }

    /// Wakes every task blocked on a frame from `node`.
    fn wake_waiting_on(&mut self, node: &str) {
        for id in 0..self.actors.len() {
            if matches!(&self.actors[id].status, Status::Blocked(Wait::Recv { from: Some(f), .. }) if f == node) {
                self.wake(id);
            }
        }
    }

    fn apply_fault(&mut self, a: &str, b: &str, action: FaultAction) {
        match action {
            FaultAction::Degrade(bw) => self.link_mut(a, b).bandwidth = bw,
            FaultAction::Drop => {
                self.link_mut(a, b).down = true;
                self.wake_receivers(a, b, None);
                self.wake_receivers(b, a, None);
            }
        }
    }

    fn process(&mut self, event: Event) {
        match event {
            Event::Deliver { src, dst, channel, frame } => {
                if let Some(n) = self.in_flight.get_mut(&(src.clone(), dst.clone())) {
                    *n -= 1;
                }
                self.seq += 1;
                let seq = self.seq;
                let lost = self.nodes.get(&src).is_none_or(|n| n.crashed) || self.unreachable(&src, &dst);
                if lost {
                    return;
                }
                let len = frame.wire_len() as u64;
                let n = self.nodes.get_mut(&dst).expect("destination exists");
                n.traffic.bytes_received += len;
                n.traffic.frames_received += 1;
                n.inbox.entry(channel).or_default().push_back((seq, src.clone(), frame));
                self.wake_receivers(&dst, &src, Some(channel));
            }
            Event::Timer { actor, token } => {
                if self.actors[actor].token == token {
                    self.wake(actor);
                }
            }
            Event::Fault { a, b, action } => self.apply_fault(&a, &b, action),
        }
    }

    fn describe_blocked(&self) -> String {
        let mut out = Vec::new();
        for a in &self.actors {
            if let Status::Blocked(w) = &a.status {
                out.push(format!("{}/{} {:?}", a.node, a.name, w));
            }
        }
        out.join("; ")
    }
}

struct Shared {
    state: Mutex<State>,
    main_cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Hands the baton to the next ready task, advancing time as needed.
    fn schedule(&self, st: &mut State) {
        loop {
            if let Some(next) = st.ready.pop_front() {
                st.actors[next].status = Status::Running;
                st.running = Some(next);
                st.actors[next].cv.notify_one();
                return;
            }
            st.running = None;
            if st.actors.iter().all(|a| matches!(a.status, Status::Done)) {
                st.finished = true;
                self.main_cv.notify_all();
                return;
            }
            if st.shutdown {
                for id in 0..st.actors.len() {
                    st.wake(id);
                }
                continue;
            }
            match st.events.pop() {
                Some(Reverse(s)) if s.at > st.time_limit => {
                    st.failure.get_or_insert(SimError::TimeLimit(st.time_limit));
                    st.shutdown = true;
                }
                Some(Reverse(s)) => {
                    st.now = st.now.max(s.at);
                    st.process(s.event);
                }
                None => {
                    let err = SimError::Deadlock { at: st.now, blocked: st.describe_blocked() };
                    log::error!("{err}");
                    st.failure.get_or_insert(err);
                    st.shutdown = true;
                }
            }
        }
    }

    /// Blocks the running task `me` until it is woken and scheduled again.
    fn block<'a>(&'a self, mut st: MutexGuard<'a, State>, me: usize, wait: Wait, timeout: Duration) -> MutexGuard<'a, State> {
        st.actors[me].token += 1;
        st.actors[me].status = Status::Blocked(wait);
        if timeout != FOREVER {
            let at = deadline(st.now, timeout);
            let token = st.actors[me].token;
            st.push(at, Event::Timer { actor: me, token });
        }
        self.schedule(&mut st);
        let cv = st.actors[me].cv.clone();
        while st.running != Some(me) {
            st = cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st
    }

    fn spawn_actor(self: &Arc<Self>, st: &mut State, node: &str, name: &str, f: TaskFn) -> usize {
        let id = st.actors.len();
        let cv = Arc::new(Condvar::new());
        st.actors.push(Actor { name: name.to_string(), node: node.to_string(), cv: cv.clone(), status: Status::Ready, token: 0 });
        st.nodes.entry(node.to_string()).or_default().actors.push(id);
        st.ready.push_back(id);
        let shared = Arc::clone(self);
        let node = node.to_string();
        let handle = std::thread::Builder::new()
            .name(format!("{node}/{name}"))
            .spawn(move || {
                {
                    let mut st = shared.lock();
                    while st.running != Some(id) {
                        st = cv.wait(st).unwrap_or_else(|e| e.into_inner());
                    }
                }
                let net = SimNet { shared: Arc::clone(&shared), node: node.clone(), actor: id };
                let result = catch_unwind(AssertUnwindSafe(move || f(Box::new(net))));
                let mut st = shared.lock();
                if let Err(p) = result {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "non-string panic".into());
                    let m = format!("{}/{}: {msg}", st.actors[id].node, st.actors[id].name);
                    st.panics.push(m);
                }
                st.actors[id].status = Status::Done;
                for j in 0..st.actors.len() {
                    if matches!(st.actors[j].status, Status::Blocked(Wait::Join(t)) if t == id) {
                        st.wake(j);
                    }
                }
                if st.closed(&node) {
                    st.wake_waiting_on(&node);
                }
                shared.schedule(&mut st);
            })
            .expect("spawn simulator thread");
        st.threads.push(handle);
        id
    }
}

/// A simulated network. Configure links, then call [`SimWorld::run`] once.
/// Clones share the same world; fault-injection methods must be called
/// from inside a running task.
#[derive(Clone)]
pub struct SimWorld {
    shared: Arc<Shared>,
}

impl SimWorld {
    pub fn new(default_link: LinkSpec) -> Self {
        let state = State {
            now: Duration::ZERO,
            seq: 0,
            running: None,
            actors: Vec::new(),
            ready: VecDeque::new(),
            events: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            default_link: LinkState { bandwidth: default_link.bandwidth_bps, latency: default_link.latency, down: false },
            links: BTreeMap::new(),
            busy: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            failure: None,
            panics: Vec::new(),
            shutdown: false,
            time_limit: Duration::from_secs(10_000_000),
            finished: false,
            threads: Vec::new(),
        };
        SimWorld { shared: Arc::new(Shared { state: Mutex::new(state), main_cv: Condvar::new() }) }
    }

    /// Overrides the link between `a` and `b` (both directions) and
    /// schedules its faults.
    pub fn set_link(&self, a: &str, b: &str, spec: &LinkSpec) {
        let mut st = self.shared.lock();
        st.links.insert(pair(a, b), LinkState { bandwidth: spec.bandwidth_bps, latency: spec.latency, down: false });
        for f in &spec.faults {
            st.push(f.at, Event::Fault { a: a.to_string(), b: b.to_string(), action: f.action });
        }
    }

    pub fn set_time_limit(&self, limit: Duration) {
        self.shared.lock().time_limit = limit;
    }

    /// Runs `f` as the first task on `node` until every task has finished.
    pub fn run(&self, node: &str, name: &str, f: impl FnOnce(Box<dyn Transport>) + Send + 'static) -> std::result::Result<Duration, SimError> {
        let mut st = self.shared.lock();
        assert!(st.actors.is_empty(), "a simulated world runs once");
        self.shared.spawn_actor(&mut st, node, name, Box::new(f));
        self.shared.schedule(&mut st);
        while !st.finished {
            st = self.shared.main_cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        let threads = std::mem::take(&mut st.threads);
        let (now, failure, panics) = (st.now, st.failure.clone(), st.panics.clone());
        drop(st);
        for t in threads {
            let _ = t.join();
        }
        if let Some(p) = panics.into_iter().next() {
            return Err(SimError::Panicked(p));
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(now),
        }
    }

    pub fn now(&self) -> Duration {
        self.shared.lock().now
    }

    /// Starts a task on `node`, creating the node if needed. Must be called
    /// from a running task; the new task is queued behind the caller.
    pub fn spawn(&self, node: &str, name: &str, f: impl FnOnce(Box<dyn Transport>) + Send + 'static) -> Task {
        let mut st = self.shared.lock();
        Task(self.shared.spawn_actor(&mut st, node, name, Box::new(f)) as u64)
    }

    /// Kills every task of `node` and resets its connections.
    pub fn crash(&self, node: &str) {
        let mut st = self.shared.lock();
        let Some(n) = st.nodes.get_mut(node) else { return };
        if n.crashed {
            return;
        }
        n.crashed = true;
        n.inbox.clear();
        for id in n.actors.clone() {
            st.wake(id);
        }
        st.wake_waiting_on(node);
    }

    pub fn degrade(&self, a: &str, b: &str, bandwidth_bps: f64) {
        self.shared.lock().apply_fault(a, b, FaultAction::Degrade(bandwidth_bps));
    }

    pub fn drop_link(&self, a: &str, b: &str) {
        self.shared.lock().apply_fault(a, b, FaultAction::Drop);
    }

    pub fn is_crashed(&self, node: &str) -> bool {
        self.shared.lock().nodes.get(node).is_some_and(|n| n.crashed)
    }

    pub fn traffic(&self, node: &str) -> Traffic {
        self.shared.lock().nodes.get(node).map(|n| n.traffic).unwrap_or_default()
    }

    pub fn bandwidth(&self, a: &str, b: &str) -> f64 {
        self.shared.lock().link(a, b).bandwidth
    }
}

/// A task's handle into the simulated network.
pub struct SimNet {
    shared: Arc<Shared>,
    node: String,
    actor: usize,
}

impl SimNet {
    fn lock(&self) -> MutexGuard<'_, State> {
        let st = self.shared.lock();
        debug_assert_eq!(st.running, Some(self.actor), "simulator call from a task not holding the baton");
        st
    }

    fn alive(&self, st: &State) -> Result<()> {
        if st.shutdown || st.nodes.get(&self.node).is_none_or(|n| n.crashed) {
            return Err(TransportError::Crashed);
        }
        Ok(())
    }

    fn take(&self, st: &mut State, channels: &[Channel], from: Option<&str>) -> Option<(String, Channel, Frame)> {
        let node = st.nodes.get_mut(&self.node)?;
        // Oldest arrival across the channels.
        let mut best: Option<(u64, Channel, usize)> = None;
        for &c in channels {
            if let Some(q) = node.inbox.get(&c) {
                if let Some(i) = q.iter().position(|(_, src, _)| from.is_none_or(|f| f == src)) {
                    if best.is_none_or(|(s, _, _)| q[i].0 < s) {
                        best = Some((q[i].0, c, i));
                    }
                }
            }
        }
        let (_, c, i) = best?;
        let (_, src, frame) = node.inbox.get_mut(&c)?.remove(i)?;
        Some((src, c, frame))
    }

    fn wait_until(&self, until: Duration) -> Result<()> {
        let mut st = self.lock();
        loop {
            self.alive(&st)?;
            if st.now >= until {
                return Ok(());
            }
            let left = until - st.now;
            st = self.shared.block(st, self.actor, Wait::Sleep, left);
        }
    }
}

impl Transport for SimNet {
    fn local_id(&self) -> &str {
        &self.node
    }

    fn send(&self, to: &str, channel: Channel, frame: Frame) -> Result<()> {
        let mut st = self.lock();
        self.alive(&st)?;
        if !st.nodes.contains_key(to) || st.unreachable(&self.node, to) {
            return Err(TransportError::LinkDown(to.to_string()));
        }
        let len = frame.wire_len() as u64;
        let arrive = if to == self.node {
            st.now
        } else {
            let link = st.link(&self.node, to).clone();
            let key = (self.node.clone(), to.to_string());
            let start = st.busy.get(&key).copied().unwrap_or_default().max(st.now);
            let end = start + Duration::from_secs_f64(len as f64 * 8.0 / link.bandwidth);
            st.busy.insert(key.clone(), end);
            *st.in_flight.entry(key).or_default() += 1;
            end + link.latency
        };
        let t = &mut st.nodes.get_mut(&self.node).expect("own node").traffic;
        t.bytes_sent += len;
        t.frames_sent += 1;
        st.push(arrive, Event::Deliver { src: self.node.clone(), dst: to.to_string(), channel, frame });
        Ok(())
    }

    fn recv(&self, from: &str, channel: Channel, timeout: Duration) -> Result<Frame> {
        let mut st = self.lock();
        let until = deadline(st.now, timeout);
        loop {
            self.alive(&st)?;
            if let Some((_, _, f)) = self.take(&mut st, &[channel], Some(from)) {
                return Ok(f);
            }
            if st.nodes.contains_key(from) && st.exhausted(&self.node, from) {
                return Err(TransportError::LinkDown(from.to_string()));
            }
            if st.now >= until {
                return Err(TransportError::Timeout);
            }
            let left = if timeout == FOREVER { FOREVER } else { until - st.now };
            let wait = Wait::Recv { from: Some(from.to_string()), channels: vec![channel] };
            st = self.shared.block(st, self.actor, wait, left);
        }
    }

    fn recv_any(&self, channels: &[Channel], timeout: Duration) -> Result<(String, Channel, Frame)> {
        let mut st = self.lock();
        let until = deadline(st.now, timeout);
        loop {
            self.alive(&st)?;
            if let Some(hit) = self.take(&mut st, channels, None) {
                return Ok(hit);
            }
            if st.now >= until {
                return Err(TransportError::Timeout);
            }
            let left = if timeout == FOREVER { FOREVER } else { until - st.now };
            let wait = Wait::Recv { from: None, channels: channels.to_vec() };
            st = self.shared.block(st, self.actor, wait, left);
        }
    }

    fn flush(&self, to: &str, _channel: Channel) -> Result<()> {
        let until = {
            let st = self.lock();
            self.alive(&st)?;
            st.busy.get(&(self.node.clone(), to.to_string())).copied().unwrap_or_default()
        };
        self.wait_until(until)
    }

    fn register_peer(&self, _addr: &PeerAddr) {}

    fn endpoint(&self) -> String {
        format!("sim:{}", self.node)
    }

    fn now(&self) -> Duration {
        self.shared.lock().now
    }

    fn sleep(&self, d: Duration) -> Result<()> {
        let until = deadline(self.lock().now, d);
        self.wait_until(until)
    }

    fn charge(&self, d: Duration) -> Result<()> {
        self.sleep(d)
    }

    fn spawn(&self, name: &str, f: TaskFn) -> Task {
        let mut st = self.lock();
        let id = self.shared.spawn_actor(&mut st, &self.node, name, f);
        Task(id as u64)
    }

    fn join(&self, task: Task) -> Result<()> {
        let id = task.0 as usize;
        let mut st = self.lock();
        loop {
            if matches!(st.actors.get(id).map(|a| &a.status), Some(Status::Done) | None) {
                return Ok(());
            }
            self.alive(&st)?;
            st = self.shared.block(st, self.actor, Wait::Join(id), FOREVER);
        }
    }

    fn traffic(&self) -> Traffic {
        self.shared.lock().nodes.get(&self.node).map(|n| n.traffic).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lowcomm_core::wire::FrameKind;
    use std::sync::Mutex as StdMutex;

    fn frame(n: usize) -> Frame {
        Frame::new(FrameKind::Probe, vec![7; n]).unwrap()
    }

    fn secs(x: f64) -> Duration {
        Duration::from_secs_f64(x)
    }

    /// Runs `fa` on node "a" and `fb` on node "b" of `w`; returns `fb`'s
    /// result.
    fn two_nodes<T: Send + 'static>(
        w: &SimWorld,
        fa: impl FnOnce(&dyn Transport, &SimWorld) + Send + 'static,
        fb: impl FnOnce(&dyn Transport) -> T + Send + 'static,
    ) -> T {
        let out = Arc::new(StdMutex::new(None));
        let o = out.clone();
        let w2 = w.clone();
        w.run("root", "main", move |net| {
            let tb = w2.spawn("b", "main", move |n| *o.lock().unwrap() = Some(fb(&*n)));
            let w3 = w2.clone();
            let ta = w2.spawn("a", "main", move |n| fa(&*n, &w3));
            net.join(ta).unwrap();
            net.join(tb).unwrap();
        })
        .unwrap();
        let v = out.lock().unwrap().take().unwrap();
        v
    }

    #[test]
    fn loopback_one_byte() {
        let w = SimWorld::new(LinkSpec::new(1e6, Duration::ZERO));
        let got = Arc::new(StdMutex::new(None));
        let g = got.clone();
        w.run("a", "main", move |net| {
            net.send("a", Channel::Service, frame(1)).unwrap();
            *g.lock().unwrap() = Some((net.recv("a", Channel::Service, FOREVER).unwrap(), net.now()));
        })
        .unwrap();
        let (f, at) = got.lock().unwrap().take().unwrap();
        assert_eq!(f, frame(1));
        assert_eq!(at, Duration::ZERO);
    }

    #[test]
    fn bandwidth_arithmetic_and_fifo() {
        let w = SimWorld::new(LinkSpec::new(8e6, Duration::ZERO));
        let r = two_nodes(
            &w,
            |a, _| {
                a.send("b", Channel::Ring, frame(1_000_000)).unwrap();
                a.send("b", Channel::Ring, frame(10)).unwrap();
            },
            |b| {
                let f1 = b.recv("a", Channel::Ring, FOREVER).unwrap();
                let t1 = b.now();
                let f2 = b.recv("a", Channel::Ring, FOREVER).unwrap();
                ((f1.payload.len(), t1), (f2.payload.len(), b.now()))
            },
        );
        let ((n1, t1), (n2, t2)) = r;
        assert_eq!((n1, n2), (1_000_000, 10));
        // 1 MB at 8 Mb/s plus the 5-byte header.
        assert!(t1 >= secs(1.0));
        assert!((t1.as_secs_f64() - 1.000005).abs() < 1e-9);
        assert!((t2.as_secs_f64() - t1.as_secs_f64() - 15.0 * 8.0 / 8e6).abs() < 1e-9);
    }

    #[test]
    fn drop_fault_breaks_link() {
        let spec = LinkSpec::new(1e9, Duration::ZERO);
        let w = SimWorld::new(spec.clone());
        w.set_link("a", "b", &spec.with_fault(secs(5.0), FaultAction::Drop));
        let r = two_nodes(
            &w,
            |a, _| {
                a.send("b", Channel::Ring, frame(1)).unwrap();
                a.sleep(secs(6.0)).unwrap();
                assert_eq!(a.send("b", Channel::Ring, frame(1)), Err(TransportError::LinkDown("b".into())));
            },
            |b| {
                let first = b.recv("a", Channel::Ring, FOREVER);
                let second = b.recv("a", Channel::Ring, FOREVER);
                (first.is_ok(), second, b.now())
            },
        );
        assert!(r.0);
        assert_eq!(r.1, Err(TransportError::LinkDown("a".into())));
        assert_eq!(r.2, secs(5.0));
    }

    #[test]
    fn crash_resets_peers_and_timeouts_are_distinct() {
        let w = SimWorld::new(LinkSpec::new(1e9, Duration::from_millis(1)));
        let r = two_nodes(
            &w,
            |a, w| {
                a.sleep(secs(1.0)).unwrap();
                // An in-flight frame from a node that crashes is lost.
                a.send("b", Channel::Ring, frame(1)).unwrap();
                w.crash("a");
                assert_eq!(a.sleep(secs(1.0)), Err(TransportError::Crashed));
            },
            |b| {
                let t = b.recv("a", Channel::Ring, secs(0.5));
                let d = b.recv("a", Channel::Ring, FOREVER);
                (t, d, b.now())
            },
        );
        assert_eq!(r.0, Err(TransportError::Timeout));
        assert_eq!(r.1, Err(TransportError::LinkDown("a".into())));
        assert_eq!(r.2, secs(1.0));
    }

    #[test]
    fn finished_node_reads_as_closed() {
        let w = SimWorld::new(LinkSpec::new(1e9, Duration::ZERO));
        let r = two_nodes(&w, |a, _| a.sleep(secs(1.5)).unwrap(), |b| (b.recv("a", Channel::Ring, FOREVER), b.now()));
        assert_eq!(r, (Err(TransportError::LinkDown("a".into())), secs(1.5)));
    }

    #[test]
    fn deadlock_is_reported() {
        let w = SimWorld::new(LinkSpec::default());
        let r = w.run("a", "main", |net| {
            let _ = net.recv_any(&[Channel::Control], FOREVER);
        });
        assert!(matches!(r, Err(SimError::Deadlock { .. })));
    }

    #[test]
    fn time_limit_stops_runaway_timers() {
        let w = SimWorld::new(LinkSpec::default());
        w.set_time_limit(secs(10.0));
        let r = w.run("a", "main", |net| while net.sleep(secs(1.0)).is_ok() {});
        assert_eq!(r, Err(SimError::TimeLimit(secs(10.0))));
    }

    #[test]
    fn degrade_applies_to_later_frames() {
        let w = SimWorld::new(LinkSpec::new(8e6, Duration::ZERO));
        let r = two_nodes(
            &w,
            |a, w| {
                w.degrade("a", "b", 4e6);
                a.send("b", Channel::Ring, frame(999_995)).unwrap();
            },
            |b| {
                b.recv("a", Channel::Ring, FOREVER).unwrap();
                b.now()
            },
        );
        assert!((r.as_secs_f64() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn identical_programs_identical_timelines() {
        let run = || {
            let log = Arc::new(StdMutex::new(Vec::new()));
            let l = log.clone();
            let w = SimWorld::new(LinkSpec::new(1e7, Duration::from_millis(3)));
            let w2 = w.clone();
            w.run("root", "main", move |net| {
                let mut tasks = Vec::new();
                for i in 0..4usize {
                    let l = l.clone();
                    tasks.push(w2.spawn(&format!("n{i}"), "main", move |n| {
                        for r in 0..5 {
                            let to = format!("n{}", (i + 1) % 4);
                            n.send(&to, Channel::Ring, frame(1000 * (i + 1) + r)).unwrap();
                            let from = format!("n{}", (i + 3) % 4);
                            let f = n.recv(&from, Channel::Ring, FOREVER).unwrap();
                            l.lock().unwrap().push((i, f.payload.len(), n.now()));
                        }
                    }));
                }
                for t in tasks {
                    net.join(t).unwrap();
                }
            })
            .unwrap();
            let v = log.lock().unwrap().clone();
            v
        };
        let a = run();
        assert_eq!(a.len(), 20);
        assert_eq!(a, run());
    }
}
