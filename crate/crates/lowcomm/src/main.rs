use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lowcomm::allreduce::RingOptions;
use lowcomm::bench::bench_one;
use lowcomm::config::{read_checkpoint, JoinName, Role, RunConfig};
use lowcomm::engine::{compute_utilization, run_node, JoinMode, NodeOptions, NodeOutcome, RoundMetrics};
use lowcomm::mesh::{serve, ServerOptions};
use lowcomm::scenario::{simulate, COORDINATOR};
use lowcomm::service::NodeShared;
use lowcomm::transport::sim::LinkSpec;
use lowcomm::transport::tcp::TcpNet;
use lowcomm_core::mesh::{Coordinator, CoordinatorConfig, PeerAddr};
use lowcomm_core::ring::Mode;
use lowcomm_core::topology::{parse_matrix, solve_ring};

const USAGE: u8 = 2;
const FATAL: u8 = 3;

#[derive(Parser)]
#[command(name = "lowcomm", version, about = "Elastic low-communication data-parallel training")]
struct Cli {
    /// More logging (repeat for debug); RUST_LOG also works.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the membership and key-value service.
    Coordinator(RunArgs),
    /// Join a coordinator and train.
    Worker(RunArgs),
    /// Run a whole job with scripted churn on the simulated network.
    Simulate(SimArgs),
    /// Time ring all-reduce on a simulated ring.
    BenchAllreduce(BenchArgs),
    /// Best ring order for a bandwidth matrix file.
    SolveRing {
        matrix: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, env = "LOWCOMM_COORDINATOR")]
    coordinator: Option<String>,
    #[arg(long)]
    node_id: Option<String>,
    #[arg(long)]
    listen: Option<String>,
    /// founder, blocking or nonblocking.
    #[arg(long, value_parser = parse_join)]
    join: Option<JoinName>,
    #[arg(long, env = "LOWCOMM_METRICS")]
    metrics: Option<PathBuf>,
    #[arg(long, env = "LOWCOMM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    resume_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// One summary row per outer step (JSON lines); stdout if unset.
    #[arg(long, env = "LOWCOMM_METRICS")]
    metrics: Option<PathBuf>,
    /// Every node's rows (JSON lines).
    #[arg(long)]
    node_metrics: Option<PathBuf>,
    #[arg(long, env = "LOWCOMM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    resume_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,65536,1048576")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "fp32,int8", value_parser = parse_mode)]
    modes: Vec<Mode>,
    #[arg(short, long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 1e9)]
    bandwidth_bps: f64,
    #[arg(long, default_value_t = 1.0)]
    latency_ms: f64,
    #[arg(long, default_value_t = 4)]
    segments: usize,
    /// Disable pipelining.
    #[arg(long)]
    serial: bool,
    /// Simulated codec cost per value.
    #[arg(long, default_value_t = 0.0)]
    codec_ns: f64,
    #[arg(long, env = "LOWCOMM_SEED", default_value_t = 0)]
    seed: u64,
}

fn parse_join(s: &str) -> Result<JoinName, String> {
    match s {
        "founder" => Ok(JoinName::Founder),
        "blocking" => Ok(JoinName::Blocking),
        "nonblocking" | "non-blocking" => Ok(JoinName::Nonblocking),
        _ => Err(format!("unknown join mode {s:?}")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "fp32" => Ok(Mode::Fp32),
        "int8" => Ok(Mode::Int8),
        _ => Err(format!("unknown mode {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Fatal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Fatal(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let r = match cli.cmd {
        Cmd::Coordinator(a) => cmd_coordinator(a),
        Cmd::Worker(a) => cmd_worker(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::BenchAllreduce(a) => cmd_bench(a),
        Cmd::SolveRing { matrix } => cmd_solve_ring(&matrix),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("lowcomm: {msg}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Fatal(e)) => {
            eprintln!("lowcomm: {e:#}");
            ExitCode::from(FATAL)
        }
    }
}

fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage),
        None => RunConfig::parse("", Path::new(".")).map_err(Failure::Usage),
    }
}

fn overlay_run(a: &RunArgs, role: Role) -> Result<RunConfig, Failure> {
    let mut c = load(a.config.as_deref())?;
    if let Some(v) = &a.coordinator {
        c.coordinator = v.clone();
    }
    if let Some(v) = &a.node_id {
        c.node_id = Some(v.clone());
    }
    if let Some(v) = &a.listen {
        c.listen = v.clone();
    }
    if let Some(v) = a.join {
        c.join = v;
    }
    if let Some(v) = &a.metrics {
        c.metrics = Some(v.clone());
    }
    if let Some(v) = a.seed {
        c.trainer.seed = v;
    }
    if let Some(v) = &a.checkpoint_dir {
        c.checkpoint_dir = Some(v.clone());
    }
    if let Some(v) = &a.resume_dir {
        c.resume_dir = Some(v.clone());
    }
    c.validate(role).map_err(Failure::Usage)?;
    Ok(c)
}

/// JSON lines to `path`, or stdout.
fn write_rows<T: Serialize>(path: Option<&Path>, rows: &[T]) -> anyhow::Result<()> {
    let mut out: Box<dyn Write> = match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(std::io::stdout().lock()),
    };
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_coordinator(a: RunArgs) -> Outcome {
    let c = overlay_run(&a, Role::Coordinator)?;
    let net = TcpNet::bind(COORDINATOR, &c.coordinator).with_context(|| format!("binding {}", c.coordinator))?;
    log::info!("coordinator listening on {}", net.local_addr());
    let mut cfg = CoordinatorConfig::new(c.world, c.trainer.hash());
    cfg.heartbeat_timeout = Duration::from_secs_f64(c.heartbeat_timeout_s);
    cfg.max_retries = c.max_retries;
    cfg.start_step = c.start_step;
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, std::sync::atomic::Ordering::Relaxed)).context("installing signal handler")?;
    let opts = ServerOptions {
        tick: Duration::from_secs_f64(c.heartbeat_interval_s),
        stop_after_step: Some(c.trainer.outer_steps),
        ..ServerOptions::default()
    };
    let out = serve(&net, Arc::new(Mutex::new(Coordinator::new(cfg))), &opts, stop);
    net.shutdown();
    for e in &out.events {
        log::info!("{:?}", e);
    }
    match out.halted {
        Some(msg) => Err(anyhow::anyhow!("job halted at step {}: {msg}", out.step).into()),
        None => {
            println!("{}", serde_json::json!({ "step": out.step }));
            Ok(())
        }
    }
}

fn cmd_worker(a: RunArgs) -> Outcome {
    let c = overlay_run(&a, Role::Worker)?;
    let node = c.node_id.clone().unwrap_or_default();
    let net = TcpNet::bind(&node, &c.listen).with_context(|| format!("binding {}", c.listen))?;
    log::info!("{node} listening on {}", net.local_addr());
    let mut opts = NodeOptions::new(PeerAddr::new(COORDINATOR, c.coordinator.clone()), &c.trainer);
    opts.join = match c.join {
        JoinName::Founder => JoinMode::Founder,
        JoinName::Blocking => JoinMode::Blocking,
        JoinName::Nonblocking => JoinMode::NonBlocking,
    };
    opts.heartbeat_interval = Duration::from_secs_f64(c.heartbeat_interval_s);
    opts.ring.timeout = Duration::from_secs_f64(c.ring_timeout_s);
    opts.probe = c.probe.as_ref().map(|p| p.options());
    opts.checkpoint_dir = c.checkpoint_dir.as_ref().map(|d| c.resolve(d));
    if let Some(dir) = &c.resume_dir {
        let path = c.resolve(dir).join(format!("{node}.ckpt"));
        opts.resume = Some(read_checkpoint(&path).map_err(Failure::Usage)?);
    }
    let report = run_node(&net, &c.trainer, &opts, NodeShared::new());
    net.shutdown();
    write_rows(c.metrics.as_deref(), &report.metrics)?;
    match report.outcome {
        NodeOutcome::Finished | NodeOutcome::Left => Ok(()),
        other => Err(anyhow::anyhow!("{node}: {other:?}").into()),
    }
}

/// Cluster-level view of one outer step.
#[derive(Serialize)]
struct RoundSummary {
    outer_step: u64,
    k: usize,
    epoch: u64,
    nodes: Vec<String>,
    eval_loss: f64,
    param_hash: String,
    hashes_agree: bool,
    inner_time_s: f64,
    allreduce_time_s: f64,
    bytes_sent: u64,
    retries: u32,
    lr_scale: f32,
    utilization: f64,
}

fn summarize(rows: &[RoundMetrics]) -> Vec<RoundSummary> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let s = rows[i].outer_step;
        let j = i + rows[i..].iter().take_while(|r| r.outer_step == s).count();
        let g = &rows[i..j];
        out.push(RoundSummary {
            outer_step: s,
            k: g[0].k,
            epoch: g[0].epoch,
            nodes: g.iter().map(|r| r.node.clone()).collect(),
            eval_loss: g[0].eval_loss,
            param_hash: g[0].param_hash.clone(),
            hashes_agree: g.iter().all(|r| r.param_hash == g[0].param_hash),
            inner_time_s: g.iter().map(|r| r.inner_time_s).fold(0.0, f64::max),
            allreduce_time_s: g.iter().map(|r| r.allreduce_time_s).fold(0.0, f64::max),
            bytes_sent: g.iter().map(|r| r.bytes_sent).sum(),
            retries: g.iter().map(|r| r.retries).max().unwrap_or(0),
            lr_scale: g[0].lr_scale,
            utilization: compute_utilization(g),
        });
        i = j;
    }
    out
}

fn cmd_simulate(a: SimArgs) -> Outcome {
    let mut c = load(a.config.as_deref())?;
    if let Some(v) = &a.metrics {
        c.metrics = Some(v.clone());
    }
    if let Some(v) = a.seed {
        c.trainer.seed = v;
    }
    if let Some(v) = &a.checkpoint_dir {
        c.checkpoint_dir = Some(v.clone());
    }
    if let Some(v) = &a.resume_dir {
        c.resume_dir = Some(v.clone());
    }
    c.validate(Role::Simulate).map_err(Failure::Usage)?;
    let setup = c.sim_setup().map_err(Failure::Usage)?;
    if let Some(dir) = &setup.checkpoint_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let report = simulate(&setup);
    let rows = report.metrics();
    let metrics = c.metrics.as_ref().map(|p| c.resolve(p));
    write_rows(metrics.as_deref(), &summarize(&rows))?;
    if let Some(p) = &a.node_metrics {
        write_rows(Some(p), &rows)?;
    }
    for n in &report.nodes {
        log::info!("{}: {:?} after {} rounds", n.node, n.outcome, n.metrics.len());
    }
    if let Some(e) = report.error {
        return Err(anyhow::anyhow!("simulation failed: {e}").into());
    }
    if let Some(msg) = report.coordinator.halted {
        return Err(anyhow::anyhow!("job halted at step {}: {msg}", report.coordinator.step).into());
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Outcome {
    if a.k == 0 || a.segments == 0 || !(a.bandwidth_bps > 0.0) || !(a.latency_ms >= 0.0) || !(a.codec_ns >= 0.0) {
        return Err(Failure::Usage("bench-allreduce: k and segments must be ≥ 1, bandwidth > 0, latency and codec cost ≥ 0".into()));
    }
    let link = LinkSpec::new(a.bandwidth_bps, Duration::from_secs_f64(a.latency_ms / 1e3));
    let mut rows = Vec::new();
    for &mode in &a.modes {
        for &size in &a.sizes {
            let opts = RingOptions {
                mode,
                segments: a.segments,
                pipelined: !a.serial,
                codec_cost_per_value: Duration::from_secs_f64(a.codec_ns / 1e9),
                ..RingOptions::default()
            };
            rows.push(bench_one(&link, size, a.k, &opts, a.seed).map_err(anyhow::Error::msg)?);
        }
    }
    write_rows(None, &rows)?;
    Ok(())
}

fn cmd_solve_ring(path: &Path) -> Outcome {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let (ids, m) = parse_matrix(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let ring = solve_ring(&m).map_err(|e| anyhow::anyhow!("{e}"))?;
    let order: Vec<&str> = ring.order.iter().map(|&i| ids[i].as_str()).collect();
    println!("{}", serde_json::json!({ "order": order, "objective": ring.objective }));
    Ok(())
}
