//! Run configuration: one TOML file per run; command-line flags override it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use lowcomm_core::checkpoint::Checkpoint;

use crate::engine::TrainerConfig;
use crate::scenario::{ChurnScript, SimSetup};
use crate::service::ProbeOptions;
use crate::transport::sim::{FaultAction, LinkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Coordinator,
    Worker,
    Simulate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Tcp,
    Sim,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JoinName {
    #[default]
    Founder,
    Blocking,
    Nonblocking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub at_s: f64,
    /// `drop` or `degrade`.
    pub action: String,
    #[serde(default)]
    pub bandwidth_bps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairLinkConfig {
    pub a: String,
    pub b: String,
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default)]
    pub faults: Vec<FaultConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "ProbeConfig::default_interval")]
    pub interval_s: f64,
    #[serde(default = "ProbeConfig::default_small")]
    pub small_bytes: usize,
    #[serde(default = "ProbeConfig::default_large")]
    pub large_bytes: usize,
}

impl ProbeConfig {
    fn default_interval() -> f64 {
        30.0
    }
    fn default_small() -> usize {
        4096
    }
    fn default_large() -> usize {
        256 * 1024
    }

    pub fn options(&self) -> ProbeOptions {
        ProbeOptions {
            interval: Duration::from_secs_f64(self.interval_s),
            small: self.small_bytes,
            large: self.large_bytes,
            ..ProbeOptions::default()
        }
    }
}

/// Settings that only exist on the simulated transport.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Accounted compute per inner step.
    #[serde(default = "SimConfig::default_step_time")]
    pub inner_step_time_s: f64,
    #[serde(default)]
    pub codec_ns_per_value: f64,
    /// Churn script, relative to the config file.
    #[serde(default)]
    pub churn: Option<PathBuf>,
    #[serde(default = "SimConfig::default_link")]
    pub default_link: LinkConfig,
    #[serde(default, rename = "link")]
    pub links: Vec<PairLinkConfig>,
    #[serde(default = "SimConfig::default_time_limit")]
    pub time_limit_s: f64,
}

impl SimConfig {
    fn default_step_time() -> f64 {
        0.1
    }
    fn default_link() -> LinkConfig {
        LinkConfig { bandwidth_bps: 1e9, latency_ms: 1.0 }
    }
    fn default_time_limit() -> f64 {
        1e7
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            inner_step_time_s: Self::default_step_time(),
            codec_ns_per_value: 0.0,
            churn: None,
            default_link: Self::default_link(),
            links: Vec::new(),
            time_limit_s: Self::default_time_limit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Checked against the subcommand when present.
    #[serde(default)]
    pub role: Option<Role>,
    #[serde(default)]
    pub transport: TransportKind,
    /// Coordinator address: bound by the coordinator, dialled by workers.
    #[serde(default = "RunConfig::default_coordinator")]
    pub coordinator: String,
    #[serde(default)]
    pub node_id: Option<String>,
    /// Worker listen address.
    #[serde(default = "RunConfig::default_listen")]
    pub listen: String,
    #[serde(default)]
    pub join: JoinName,
    /// Founding world size.
    #[serde(default = "RunConfig::default_world")]
    pub world: usize,
    #[serde(default = "RunConfig::default_heartbeat")]
    pub heartbeat_interval_s: f64,
    #[serde(default = "RunConfig::default_timeout")]
    pub heartbeat_timeout_s: f64,
    #[serde(default = "RunConfig::default_retries")]
    pub max_retries: u32,
    #[serde(default = "RunConfig::default_ring_timeout")]
    pub ring_timeout_s: f64,
    /// First outer step of a resumed job (coordinator).
    #[serde(default)]
    pub start_step: u64,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Directory of `<node>.ckpt` files to resume from.
    #[serde(default)]
    pub resume_dir: Option<PathBuf>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    fn default_coordinator() -> String {
        "127.0.0.1:7100".into()
    }
    fn default_listen() -> String {
        "127.0.0.1:0".into()
    }
    fn default_world() -> usize {
        1
    }
    fn default_heartbeat() -> f64 {
        2.0
    }
    fn default_timeout() -> f64 {
        6.0
    }
    fn default_retries() -> u32 {
        8
    }
    fn default_ring_timeout() -> f64 {
        60.0
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig, String> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("config: {}: {e}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks the config for running as `role`; the message names the field.
    pub fn validate(&self, role: Role) -> Result<(), String> {
        if let Some(r) = self.role {
            if r != role {
                return Err(format!("role: config is for {r:?}, not {role:?}"));
            }
        }
        self.trainer.validate().map_err(|e| format!("trainer.{e}"))?;
        if self.world == 0 {
            return Err("world must be ≥ 1".into());
        }
        let secs = [
            ("heartbeat_interval_s", self.heartbeat_interval_s),
            ("heartbeat_timeout_s", self.heartbeat_timeout_s),
            ("ring_timeout_s", self.ring_timeout_s),
        ];
        for (name, v) in secs {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be > 0"));
            }
        }
        if let Some(p) = &self.probe {
            if !(p.interval_s.is_finite() && p.interval_s > 0.0) || p.small_bytes == 0 || p.large_bytes <= p.small_bytes {
                return Err("probe: need interval_s > 0 and large_bytes > small_bytes > 0".into());
            }
        }
        if let Some(d) = &self.resume_dir {
            if !self.resolve(d).is_dir() {
                return Err(format!("resume_dir: {} does not exist", d.display()));
            }
        }
        match (role, self.transport) {
            (Role::Simulate, TransportKind::Tcp) => return Err("transport: simulate needs transport = \"sim\"".into()),
            (Role::Coordinator | Role::Worker, TransportKind::Sim) => {
                return Err("transport: coordinator and worker run over tcp".into())
            }
            _ => {}
        }
        if self.transport == TransportKind::Tcp && self.sim.is_some() {
            return Err("sim: only valid with transport = \"sim\"".into());
        }
        if role == Role::Worker && self.node_id.as_deref().is_none_or(|n| n.is_empty() || n == crate::scenario::COORDINATOR) {
            return Err("node_id: a worker needs a node id other than \"coordinator\"".into());
        }
        if let Some(sim) = &self.sim {
            if !(sim.inner_step_time_s.is_finite() && sim.inner_step_time_s >= 0.0) {
                return Err("sim.inner_step_time_s must be ≥ 0".into());
            }
            if !(sim.codec_ns_per_value.is_finite() && sim.codec_ns_per_value >= 0.0) {
                return Err("sim.codec_ns_per_value must be ≥ 0".into());
            }
            if let Some(c) = &sim.churn {
                if !self.resolve(c).is_file() {
                    return Err(format!("sim.churn: {} does not exist", c.display()));
                }
            }
            self.default_link_spec()?;
            self.link_specs()?;
        }
        Ok(())
    }

    pub fn sim_or_default(&self) -> SimConfig {
        self.sim.clone().unwrap_or_default()
    }

    fn default_link_spec(&self) -> Result<LinkSpec, String> {
        let l = self.sim_or_default().default_link;
        let spec = LinkSpec::new(l.bandwidth_bps, Duration::from_secs_f64(l.latency_ms.max(0.0) / 1e3));
        spec.validate().map_err(|e| format!("sim.default_link: {e}"))?;
        Ok(spec)
    }

    fn link_specs(&self) -> Result<Vec<(String, String, LinkSpec)>, String> {
        let mut out = Vec::new();
        for (i, l) in self.sim_or_default().links.iter().enumerate() {
            let at = format!("sim.link[{i}]");
            if !(l.latency_ms.is_finite() && l.latency_ms >= 0.0) {
                return Err(format!("{at}.latency_ms must be ≥ 0"));
            }
            let mut spec = LinkSpec::new(l.bandwidth_bps, Duration::from_secs_f64(l.latency_ms / 1e3));
            for (j, f) in l.faults.iter().enumerate() {
                if !(f.at_s.is_finite() && f.at_s >= 0.0) {
                    return Err(format!("{at}.faults[{j}].at_s must be ≥ 0"));
                }
                let action = match (f.action.as_str(), f.bandwidth_bps) {
                    ("drop", _) => FaultAction::Drop,
                    ("degrade", Some(b)) => FaultAction::Degrade(b),
                    ("degrade", None) => return Err(format!("{at}.faults[{j}].bandwidth_bps is required for degrade")),
                    (other, _) => return Err(format!("{at}.faults[{j}].action: unknown {other:?}")),
                };
                spec = spec.with_fault(Duration::from_secs_f64(f.at_s), action);
            }
            spec.validate().map_err(|e| format!("{at}: {e}"))?;
            out.push((l.a.clone(), l.b.clone(), spec));
        }
        Ok(out)
    }

    pub fn churn(&self) -> Result<ChurnScript, String> {
        match self.sim.as_ref().and_then(|s| s.churn.as_ref()) {
            None => Ok(ChurnScript::default()),
            Some(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| format!("sim.churn: {}: {e}", path.display()))?;
                ChurnScript::parse(&text).map_err(|e| format!("sim.churn: {e}"))
            }
        }
    }

    /// Reads every `<node>.ckpt` under `resume_dir`.
    pub fn resume_checkpoints(&self) -> Result<BTreeMap<String, Checkpoint>, String> {
        let mut out = BTreeMap::new();
        let Some(dir) = &self.resume_dir else { return Ok(out) };
        let dir = self.resolve(dir);
        let entries = std::fs::read_dir(&dir).map_err(|e| format!("resume_dir: {e}"))?;
        for e in entries {
            let path = e.map_err(|e| format!("resume_dir: {e}"))?.path();
            if path.extension().is_some_and(|x| x == "ckpt") {
                let node = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                out.insert(node, read_checkpoint(&path).map_err(|e| format!("resume_dir: {e}"))?);
            }
        }
        let steps: Vec<u64> = out.values().map(|c| c.outer_step).collect();
        if steps.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("resume_dir: checkpoints disagree on the step: {steps:?}"));
        }
        Ok(out)
    }

    pub fn sim_setup(&self) -> Result<SimSetup, String> {
        let sim = self.sim_or_default();
        let mut s = SimSetup::new(self.trainer.clone(), self.world);
        s.heartbeat_interval = Duration::from_secs_f64(self.heartbeat_interval_s);
        s.heartbeat_timeout = Duration::from_secs_f64(self.heartbeat_timeout_s);
        s.max_retries = self.max_retries;
        s.ring_timeout = Duration::from_secs_f64(self.ring_timeout_s);
        s.inner_step_time = Duration::from_secs_f64(sim.inner_step_time_s);
        s.codec_cost_per_value = Duration::from_secs_f64(sim.codec_ns_per_value / 1e9);
        s.default_link = self.default_link_spec()?;
        s.links = self.link_specs()?;
        s.churn = self.churn()?;
        s.probe = self.probe.as_ref().map(ProbeConfig::options);
        s.checkpoint_dir = self.checkpoint_dir.as_ref().map(|d| self.resolve(d));
        s.resume = self.resume_checkpoints()?;
        s.time_limit = Duration::from_secs_f64(sim.time_limit_s);
        s.churn.validate(&s.founders()).map_err(|e| format!("sim.churn: {e}"))?;
        if let Some(n) = s.resume.keys().find(|n| !s.founders().contains(n)) {
            return Err(format!("resume_dir: {n}.ckpt is not a founder (n0 … n{})", self.world - 1));
        }
        Ok(s)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Checkpoint::from_stream(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}
