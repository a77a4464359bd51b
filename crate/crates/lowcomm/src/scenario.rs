//! Churn scripts and the single-process simulation harness: coordinator,
//! founders, scripted joiners and a director that injects the script's
//! faults, all on one simulated network.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use lowcomm_core::checkpoint::Checkpoint;
use lowcomm_core::mesh::{decode_u64, Coordinator, CoordinatorConfig, PeerAddr, WaitPredicate, KEY_STEP};
use lowcomm_core::wire::Channel;

use crate::engine::{run_node, JoinMode, NodeOptions, NodeReport, TrainerConfig};
use crate::mesh::{serve, MeshClient, ServerOptions, ServerOutcome};
use crate::service::{NodeShared, ProbeOptions};
use crate::transport::sim::{LinkSpec, SimError, SimWorld};
use crate::transport::{Task, Transport};

pub const COORDINATOR: &str = "coordinator";
const DIRECTOR: &str = "director";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    JoinBlocking,
    JoinNonblocking,
    Leave,
    Crash,
    DegradeLink,
}

/// One scripted event. `round = r` fires so that round `r` is the first
/// whose committed world reflects it; `at_s` fires at a simulated time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnEvent {
    #[serde(default)]
    pub round: Option<u64>,
    #[serde(default)]
    pub at_s: Option<f64>,
    pub node: String,
    pub action: Action,
    /// Other end of the link for `degrade-link`.
    #[serde(default)]
    pub peer: Option<String>,
    #[serde(default)]
    pub bandwidth_bps: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnScript {
    #[serde(default, rename = "event")]
    pub events: Vec<ChurnEvent>,
}

impl ChurnScript {
    pub fn parse(text: &str) -> Result<ChurnScript, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Checks ordering and that every node id is known when its event fires.
    pub fn validate(&self, founders: &[String]) -> Result<(), String> {
        let mut known: Vec<String> = founders.to_vec();
        let mut last_round = 0u64;
        let mut last_time = 0f64;
        for (i, e) in self.events.iter().enumerate() {
            let at = format!("event[{i}]");
            match (e.round, e.at_s) {
                (Some(r), None) => {
                    if r < last_round {
                        return Err(format!("{at}.round {r} goes back from {last_round}"));
                    }
                    last_round = r;
                }
                (None, Some(t)) => {
                    if !(t.is_finite() && t >= last_time) {
                        return Err(format!("{at}.at_s {t} goes back from {last_time}"));
                    }
                    last_time = t;
                }
                _ => return Err(format!("{at}: exactly one of round and at_s must be set")),
            }
            if e.node == COORDINATOR || e.node == DIRECTOR || e.node.is_empty() {
                return Err(format!("{at}.node: {:?} is reserved", e.node));
            }
            match e.action {
                Action::JoinBlocking | Action::JoinNonblocking => {
                    if known.contains(&e.node) {
                        return Err(format!("{at}.node: {} already exists", e.node));
                    }
                    if e.round.is_some_and(|r| r < 2) {
                        return Err(format!("{at}.round: joins can take effect from round 2"));
                    }
                    known.push(e.node.clone());
                }
                Action::Leave | Action::Crash => {
                    if !known.contains(&e.node) {
                        return Err(format!("{at}.node: unknown node {}", e.node));
                    }
                }
                Action::DegradeLink => {
                    let peer = e.peer.as_ref().ok_or(format!("{at}.peer is required for degrade-link"))?;
                    if !known.contains(&e.node) || !known.contains(peer) {
                        return Err(format!("{at}: unknown link {}-{peer}", e.node));
                    }
                    if !e.bandwidth_bps.is_some_and(|b| b > 0.0 && b.is_finite()) {
                        return Err(format!("{at}.bandwidth_bps must be > 0 for degrade-link"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimSetup {
    pub trainer: TrainerConfig,
    /// Founders are named `n0 … n{world−1}`.
    pub world: usize,
    pub heartbeat_interval: Duration,
    pub heartbeat_timeout: Duration,
    pub max_retries: u32,
    pub inner_step_time: Duration,
    pub ring_timeout: Duration,
    pub codec_cost_per_value: Duration,
    pub default_link: LinkSpec,
    pub links: Vec<(String, String, LinkSpec)>,
    pub churn: ChurnScript,
    pub probe: Option<ProbeOptions>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Per-node checkpoints to resume from; the job restarts at their step.
    pub resume: BTreeMap<String, Checkpoint>,
    pub time_limit: Duration,
}

impl SimSetup {
    pub fn new(trainer: TrainerConfig, world: usize) -> Self {
        SimSetup {
            trainer,
            world,
            heartbeat_interval: Duration::from_secs(2),
            heartbeat_timeout: Duration::from_secs(6),
            max_retries: 8,
            inner_step_time: Duration::from_millis(100),
            ring_timeout: Duration::from_secs(60),
            codec_cost_per_value: Duration::ZERO,
            default_link: LinkSpec::new(1e9, Duration::from_millis(1)),
            links: Vec::new(),
            churn: ChurnScript::default(),
            probe: None,
            checkpoint_dir: None,
            resume: BTreeMap::new(),
            time_limit: Duration::from_secs(10_000_000),
        }
    }

    pub fn founders(&self) -> Vec<String> {
        (0..self.world).map(|i| format!("n{i}")).collect()
    }

    pub fn start_step(&self) -> u64 {
        self.resume.values().map(|c| c.outer_step).next().unwrap_or(0)
    }
}

#[derive(Debug)]
pub struct SimReport {
    /// Sorted by node id.
    pub nodes: Vec<NodeReport>,
    pub coordinator: ServerOutcome,
    pub end_time: Duration,
    pub error: Option<SimError>,
    /// Churn events in the order they fired, with the simulated time.
    pub fired: Vec<(Duration, ChurnEvent)>,
}

impl SimReport {
    pub fn node(&self, id: &str) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.node == id)
    }

    /// Every node's metrics rows ordered by (outer step, node).
    pub fn metrics(&self) -> Vec<crate::engine::RoundMetrics> {
        let mut rows: Vec<_> = self.nodes.iter().flat_map(|n| n.metrics.iter().cloned()).collect();
        rows.sort_by(|a, b| (a.outer_step, &a.node).cmp(&(b.outer_step, &b.node)));
        rows
    }
}

#[derive(Clone)]
struct Harness {
    world: SimWorld,
    setup: Arc<SimSetup>,
    coord: Arc<Mutex<Coordinator>>,
    reports: Arc<Mutex<Vec<NodeReport>>>,
    trainers: Arc<Mutex<Vec<Task>>>,
    shared: Arc<Mutex<BTreeMap<String, Arc<NodeShared>>>>,
    fired: Arc<Mutex<Vec<(Duration, ChurnEvent)>>>,
}

impl Harness {
    fn spawn_node(&self, node: &str, join: JoinMode) {
        let s = &self.setup;
        let coordinator = PeerAddr::new(COORDINATOR, format!("sim:{COORDINATOR}"));
        let mut opts = NodeOptions::new(coordinator, &s.trainer);
        opts.join = join;
        opts.heartbeat_interval = s.heartbeat_interval;
        opts.inner_step_time = s.inner_step_time;
        opts.ring.timeout = s.ring_timeout;
        opts.ring.codec_cost_per_value = s.codec_cost_per_value;
        opts.probe = s.probe.clone();
        opts.checkpoint_dir = s.checkpoint_dir.clone();
        opts.resume = s.resume.get(node).cloned();
        let shared = NodeShared::new();
        self.shared.lock().unwrap().insert(node.to_string(), shared.clone());
        let (cfg, reports) = (s.trainer.clone(), self.reports.clone());
        let task = self.world.spawn(node, "trainer", move |net| {
            let r = run_node(&*net, &cfg, &opts, shared);
            reports.lock().unwrap().push(r);
        });
        self.trainers.lock().unwrap().push(task);
    }

    fn job_over(&self) -> bool {
        let c = self.coord.lock().unwrap();
        let step = c.kv_get(KEY_STEP).and_then(decode_u64).unwrap_or(0);
        c.halted().is_some() || step >= self.setup.trainer.outer_steps
    }

    /// Blocks until `mesh/step ≥ step`; false when the job ended first.
    fn wait_step(&self, client: &MeshClient<'_>, step: u64) -> bool {
        loop {
            if self.job_over() {
                return false;
            }
            match client.kv_wait(KEY_STEP, WaitPredicate::AtLeast(step), Duration::from_secs(10)) {
                Ok(Some(_)) => return true,
                Ok(None) => {}
                Err(e) => {
                    log::warn!("director: {e}");
                    return false;
                }
            }
        }
    }

    fn direct(&self, net: &dyn Transport) {
        let client = MeshClient::new(net, COORDINATOR, Channel::Side);
        for e in &self.setup.churn.events {
            let ready = match (e.round, e.at_s) {
                (Some(r), _) => {
                    let lead = if e.action == crate::scenario::Action::JoinBlocking { 2 } else { 1 };
                    self.wait_step(&client, r.saturating_sub(lead))
                }
                (None, Some(t)) => {
                    let at = Duration::from_secs_f64(t);
                    net.sleep(at.saturating_sub(net.now())).is_ok() && !self.job_over()
                }
                _ => false,
            };
            if !ready {
                log::info!("director: job over, dropping remaining events");
                return;
            }
            log::info!("director: t={:?} {:?} {}", net.now(), e.action, e.node);
            self.fired.lock().unwrap().push((net.now(), e.clone()));
            match e.action {
                Action::JoinBlocking => self.spawn_node(&e.node, JoinMode::Blocking),
                Action::JoinNonblocking => self.spawn_node(&e.node, JoinMode::NonBlocking),
                Action::Leave => {
                    if let Some(s) = self.shared.lock().unwrap().get(&e.node) {
                        s.request_leave();
                    }
                }
                Action::Crash => self.world.crash(&e.node),
                Action::DegradeLink => {
                    self.world.degrade(&e.node, e.peer.as_deref().unwrap_or_default(), e.bandwidth_bps.unwrap_or(1.0))
                }
            }
        }
    }
}

/// Runs a whole job on the simulator and collects every node's report.
pub fn simulate(setup: &SimSetup) -> SimReport {
    let world = SimWorld::new(setup.default_link.clone());
    for (a, b, spec) in &setup.links {
        world.set_link(a, b, spec);
    }
    world.set_time_limit(setup.time_limit);
    let mut ccfg = CoordinatorConfig::new(setup.world, setup.trainer.hash());
    ccfg.heartbeat_timeout = setup.heartbeat_timeout;
    ccfg.max_retries = setup.max_retries;
    ccfg.start_step = setup.start_step();
    let h = Harness {
        world: world.clone(),
        setup: Arc::new(setup.clone()),
        coord: Arc::new(Mutex::new(Coordinator::new(ccfg))),
        reports: Arc::new(Mutex::new(Vec::new())),
        trainers: Arc::new(Mutex::new(Vec::new())),
        shared: Arc::new(Mutex::new(BTreeMap::new())),
        fired: Arc::new(Mutex::new(Vec::new())),
    };
    let outcome = Arc::new(Mutex::new(None));
    let stop = Arc::new(AtomicBool::new(false));
    let server_opts = ServerOptions { tick: setup.heartbeat_interval, stop_after_step: None, linger: Duration::ZERO };
    let hh = h.clone();
    let (o, st) = (outcome.clone(), stop.clone());
    let result = world.run("harness", "main", move |net| {
        let (c, so) = (hh.coord.clone(), server_opts);
        let ct = hh.world.spawn(COORDINATOR, "server", move |n| *o.lock().unwrap() = Some(serve(&*n, c, &so, st)));
        for f in hh.setup.founders() {
            hh.spawn_node(&f, JoinMode::Founder);
        }
        let d = hh.clone();
        let dt = hh.world.spawn(DIRECTOR, "main", move |n| d.direct(&*n));
        let _ = net.join(dt);
        loop {
            let next = hh.trainers.lock().unwrap().pop();
            match next {
                Some(t) => {
                    let _ = net.join(t);
                }
                None => break,
            }
        }
        stop.store(true, Ordering::Relaxed);
        let _ = net.join(ct);
    });
    let (end_time, error) = match result {
        Ok(t) => (t, None),
        Err(e) => (world.now(), Some(e)),
    };
    let mut nodes = std::mem::take(&mut *h.reports.lock().unwrap());
    nodes.sort_by(|a, b| a.node.cmp(&b.node));
    let coordinator = outcome.lock().unwrap().take().unwrap_or_else(|| {
        let c = h.coord.lock().unwrap();
        ServerOutcome { halted: c.halted().map(str::to_string), step: c.kv_get(KEY_STEP).and_then(decode_u64).unwrap_or(0), events: c.events().to_vec() }
    });
    let fired = std::mem::take(&mut *h.fired.lock().unwrap());
    SimReport { nodes, coordinator, end_time, error, fired }
}
