//! Acceptance suite: one PASS/FAIL line per criterion. Oracles are written
//! here from the definitions, independently of the library code paths they
//! check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lowcomm::allreduce::RingOptions;
use lowcomm::bench::{exact_mean, normal_inputs, run_ring};
use lowcomm::config::{Role, RunConfig};
use lowcomm::engine::{comm_reduction_factor, compute_utilization, train_data_parallel, ModeName, NodeOutcome, TrainerConfig};
use lowcomm::scenario::{simulate, Action, ChurnEvent, ChurnScript, SimReport, SimSetup};
use lowcomm::transport::sim::LinkSpec;
use lowcomm_core::mesh::{EventKind, EvictReason};
use lowcomm_core::model::forward_backward;
use lowcomm_core::optim::{adamw_step, wsd_lr_scale, AdamWState};
use lowcomm_core::quant::quantize;
use lowcomm_core::ring::{split_even, Mode};
use lowcomm_core::rng::DetRng;
use lowcomm_core::topology::{solve_ring, BandwidthMatrix};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("1", c1_comm_factor),
        ("2", c2_fp32_exact),
        ("3", c3_int8_fidelity),
        ("4", c4_codec),
        ("5a", c5a_k1_identity),
        ("5b", c5b_identical_shards),
        ("6", c6_convergence),
        ("7", c7_faults),
        ("8", c8_topology),
        ("9", c9_replicated_state),
        ("10", c10_utilization),
    ];
    let mut failed = Vec::new();
    for (id, f) in criteria.iter() {
        let t = Instant::now();
        let v = f();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} {id:>3}  {}  ({:.1}s)", v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(*id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- helpers

fn toy(h: u64, t: u64) -> TrainerConfig {
    let mut c = TrainerConfig::default();
    c.inner_steps = h;
    c.outer_steps = t;
    c.batch_size = 32;
    c.mode = ModeName::Fp32;
    c.hyper.inner_lr = 2e-2;
    c.hyper.warmup_steps = 10;
    c.hyper.weight_decay = 0.0;
    c
}

fn setup(cfg: TrainerConfig, world: usize, step_time: f64) -> SimSetup {
    let mut s = SimSetup::new(cfg, world);
    s.inner_step_time = Duration::from_secs_f64(step_time);
    s
}

fn event(round: Option<u64>, at_s: Option<f64>, node: &str, action: Action) -> ChurnEvent {
    ChurnEvent { round, at_s, node: node.into(), action, peer: None, bandwidth_bps: None }
}

fn hashes(r: &SimReport, node: &str) -> Vec<(u64, String)> {
    r.node(node).map(|n| n.metrics.iter().map(|m| (m.outer_step, m.param_hash.clone())).collect()).unwrap_or_default()
}

/// Rounds at which nodes reporting that round disagree on the hash.
fn hash_disagreements(r: &SimReport) -> Vec<u64> {
    let rows = r.metrics();
    let mut bad = Vec::new();
    for w in rows.chunk_by(|a, b| a.outer_step == b.outer_step) {
        if w.iter().any(|m| m.param_hash != w[0].param_hash) {
            bad.push(w[0].outer_step);
        }
    }
    bad
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

/// Running mean in ring order for chunk `c`, which starts at position `c`.
fn ring_order_mean(inputs: &[Vec<f32>], c: usize, range: std::ops::Range<usize>) -> Vec<f32> {
    let k = inputs.len();
    let mut m: Vec<f32> = inputs[c][range.clone()].to_vec();
    for j in 2..=k {
        let x = &inputs[(c + j - 1) % k][range.clone()];
        for (mi, xi) in m.iter_mut().zip(x) {
            *mi += (*xi - *mi) / j as f32;
        }
    }
    m
}

fn chunks(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let (base, rem) = (n / k, n % k);
    let mut at = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < rem);
            at += len;
            at - len..at
        })
        .collect()
}

// ------------------------------------------------------------- criterion 1

fn c1_comm_factor() -> Verdict {
    let a = comm_reduction_factor(100, Mode::Int8);
    let b = comm_reduction_factor(500, Mode::Int8);
    verdict(a == 400.0 && b == 2000.0, format!("comm reduction H=100 int8 → {a}×, H=500 int8 → {b}× (want 400, 2000)"))
}

// ------------------------------------------------------------- criterion 2

fn c2_fp32_exact() -> Verdict {
    let link = LinkSpec::new(1e9, Duration::from_micros(50));
    let opts = RingOptions { mode: Mode::Fp32, segments: 3, ..RingOptions::default() };
    let (mut runs, mut mismatched) = (0, Vec::new());
    for k in [2usize, 3, 4, 8] {
        for n in [1usize, 17, 4096, 100_003] {
            for trial in 0..50u64 {
                let inputs = normal_inputs(trial * 1000 + (k * 7 + n) as u64, k, n);
                let mut want = vec![0f32; n];
                for (c, r) in chunks(n, k).into_iter().enumerate() {
                    let m = ring_order_mean(&inputs, c, r.clone());
                    want[r].copy_from_slice(&m);
                }
                let out = match run_ring(&link, inputs, &opts) {
                    Ok(o) => o.outputs,
                    Err(e) => return verdict(false, format!("k={k} n={n} trial {trial}: {e}")),
                };
                runs += 1;
                if out.iter().any(|o| o.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits())) {
                    mismatched.push((k, n, trial));
                }
            }
        }
    }
    verdict(
        mismatched.is_empty(),
        format!("fp32 ring = ring-order running-mean oracle bit-exactly in {}/{runs} runs (k∈{{2,3,4,8}}, n∈{{1,17,4096,100003}}, 50 trials){}",
            runs - mismatched.len(),
            if mismatched.is_empty() { String::new() } else { format!("; first mismatch {:?}", mismatched[0]) }),
    )
}

// ------------------------------------------------------------- criterion 3

/// Codebook quantizer from its definition: f64 mean and population σ,
/// clip to μ ± 6σ, 256 equal buckets (edges go up, the top edge folds
/// into the last), each bucket decoded as the mean of its members.
fn reference_quant(x: &[f32]) -> Vec<f32> {
    let n = x.len() as f64;
    let mu = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (x.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![mu as f32; x.len()];
    }
    let (lo, hi) = (mu - 6.0 * sd, mu + 6.0 * sd);
    let w = 12.0 * sd / 256.0;
    let mut sum = [0f64; 256];
    let mut cnt = [0u32; 256];
    let idx: Vec<usize> = x
        .iter()
        .map(|&v| {
            let c = (v as f64).clamp(lo, hi);
            let b = (((c - lo) / w).floor() as i64).clamp(0, 255) as usize;
            sum[b] += c;
            cnt[b] += 1;
            b
        })
        .collect();
    idx.iter().map(|&b| (sum[b] / cnt[b] as f64) as f32).collect()
}

/// Hop-by-hop scalar pipeline: every transmitted segment is quantized and
/// decoded, folded in fp32, and the owner's broadcast is what all adopt.
fn reference_int8_ring(inputs: &[Vec<f32>], segments: usize) -> Vec<f32> {
    let k = inputs.len();
    let n = inputs[0].len();
    let mut out = vec![0f32; n];
    for (c, chunk) in chunks(n, k).into_iter().enumerate() {
        for seg in split_even(chunk, segments) {
            if seg.is_empty() {
                continue;
            }
            let mut m = reference_quant(&inputs[c][seg.clone()]);
            for j in 2..=k {
                let x = &inputs[(c + j - 1) % k][seg.clone()];
                for (mi, xi) in m.iter_mut().zip(x) {
                    *mi += (*xi - *mi) / j as f32;
                }
                if j < k {
                    m = reference_quant(&m);
                }
            }
            out[seg].copy_from_slice(&reference_quant(&m));
        }
    }
    out
}

fn rmse(a: &[f32], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn c3_int8_fidelity() -> Verdict {
    let link = LinkSpec::new(1e9, Duration::from_micros(50));
    let segments = 4;
    let opts = RingOptions { mode: Mode::Int8, segments, ..RingOptions::default() };
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let mut pass = true;
    for k in [2usize, 4, 8] {
        for trial in 0..5u64 {
            let n = 20_000 + trial as usize * 17;
            let inputs = normal_inputs(900 + trial, k, n);
            let mean = exact_mean(&inputs);
            let threshold = rmse(&reference_int8_ring(&inputs, segments), &mean);
            let out = match run_ring(&link, inputs, &opts) {
                Ok(r) => r.outputs,
                Err(e) => return verdict(false, format!("k={k}: {e}")),
            };
            let got = rmse(&out[0], &mean);
            worst = worst.max(got / threshold);
            if got > threshold {
                pass = false;
                notes.push(format!("k={k} trial {trial}: {got:.3e} > {threshold:.3e}"));
            }
        }
    }
    // Constant inputs: identical constants come back exactly; per-node
    // constants reduce like fp32.
    let same = vec![vec![1.375f32; 999]; 4];
    let same_out = run_ring(&link, same, &opts).map(|r| r.outputs).unwrap_or_default();
    let same_ok = same_out.len() == 4 && same_out.iter().all(|o| o.iter().all(|&x| x == 1.375));
    let per_node: Vec<Vec<f32>> = (0..4).map(|p| vec![0.25 + p as f32 * 1.5; 999]).collect();
    let mut want = vec![0f32; 999];
    for (c, r) in chunks(999, 4).into_iter().enumerate() {
        let m = ring_order_mean(&per_node, c, r.clone());
        want[r].copy_from_slice(&m);
    }
    let per_out = run_ring(&link, per_node, &opts).map(|r| r.outputs).unwrap_or_default();
    let per_ok = per_out.len() == 4 && per_out.iter().all(|o| o == &want);
    pass &= same_ok && per_ok;
    verdict(
        pass,
        format!(
            "int8 RMSE ≤ scalar hop-by-hop reference RMSE for k∈{{2,4,8}} (worst ratio {worst:.4}); constants exact: {same_ok}, per-node constants = fp32 {per_ok}{}",
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }
        ),
    )
}

// ------------------------------------------------------------- criterion 4

fn c4_codec() -> Verdict {
    let mut worst_rmse: f64 = 0.0;
    let mut bounds_ok = true;
    for (trial, &(mu, sd)) in [(0.0f64, 1.0f64), (3.0, 2.0), (-1e3, 1e-2), (0.5, 10.0)].iter().enumerate() {
        for seed in 0..5u64 {
            let mut rng = DetRng::at(40 + seed, trial as u64, 0);
            let x: Vec<f32> = (0..10_000).map(|_| (mu + sd * rng.gaussian()) as f32).collect();
            let q = match quantize(&x) {
                Ok(q) => q.dequantize(),
                Err(e) => return verdict(false, e.to_string()),
            };
            let n = x.len() as f64;
            let m = x.iter().map(|&v| v as f64).sum::<f64>() / n;
            let s = (x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
            let e = (x.iter().zip(&q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / n).sqrt() / s;
            worst_rmse = worst_rmse.max(e);
            let (lo, hi) = ((m - 6.0 * s) as f32, (m + 6.0 * s) as f32);
            bounds_ok &= q.iter().all(|&v| v >= lo && v <= hi);
        }
    }
    let flat = vec![-2.5f32; 10_000];
    let flat_ok = quantize(&flat).map(|q| q.dequantize() == flat).unwrap_or(false);
    verdict(
        worst_rmse <= 0.02 && bounds_ok && flat_ok,
        format!("codec: worst RMSE/σ {worst_rmse:.5} ≤ 0.02 over 20 normal tensors of 10k; within μ±6σ: {bounds_ok}; σ=0 exact: {flat_ok}"),
    )
}

// ------------------------------------------------------------ criterion 5

fn c5a_k1_identity() -> Verdict {
    let mut cfg = toy(1, 100);
    cfg.hyper.outer_momentum = 0.0;
    cfg.hyper.outer_lr = 1.0;
    let r = simulate(&setup(cfg.clone(), 1, 0.0));
    let Some(ck) = r.node("n0").and_then(|n| n.checkpoint.clone()) else {
        return verdict(false, format!("k=1 run produced no checkpoint: {:?}", r.error));
    };
    // Plain AdamW on the same batches.
    let task = cfg.task();
    let hp = cfg.hyper_params();
    let mut p = task.init_params();
    let mut st = AdamWState::new(&p);
    for g in 1..=100u64 {
        let (_, grads) = forward_backward(&p, &task.synth_batch(0, g - 1, cfg.batch_size)).unwrap();
        adamw_step(&mut p, &grads, &mut st, &hp, wsd_lr_scale(g, &hp).unwrap()).unwrap();
    }
    let (a, b) = (ck.params.flatten(), p.flatten());
    let differ = a.iter().zip(&b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    let max_rel = a.iter().zip(&b).map(|(x, y)| ((x - y).abs() / y.abs().max(f32::MIN_POSITIVE)) as f64).fold(0.0, f64::max);
    verdict(
        differ == 0,
        format!("k=1, H=1, μ=0, outer lr=1 vs plain AdamW over 100 steps: {differ}/{} parameters differ in bits (max rel. diff {max_rel:.2e})", a.len()),
    )
}

fn c5b_identical_shards() -> Verdict {
    let mut cfg = toy(10, 8);
    cfg.identical_shards = true;
    let one = simulate(&setup(cfg.clone(), 1, 0.01));
    let four = simulate(&setup(cfg, 4, 0.01));
    let h1 = hashes(&one, "n0");
    let all_equal = ["n0", "n1", "n2", "n3"].iter().all(|n| hashes(&four, n) == h1);
    verdict(
        all_equal && h1.len() == 8,
        format!("k=4 identical shards = k=1 trajectory: per-round hashes equal on all 4 nodes for {} rounds: {all_equal}", h1.len()),
    )
}

// ------------------------------------------------------------- criterion 6

fn c6_convergence() -> Verdict {
    let seeds: Vec<u64> = (1..=8).collect();
    let (mut dp, mut fp, mut q8) = (0f64, 0f64, 0f64);
    for &seed in &seeds {
        let mut cfg = toy(50, 20);
        cfg.seed = seed;
        cfg.batch_size = 128;
        cfg.hyper.warmup_steps = 50;
        dp += *train_data_parallel(&cfg, 4).last().unwrap();
        for (mode, acc) in [(ModeName::Fp32, &mut fp), (ModeName::Int8, &mut q8)] {
            cfg.mode = mode;
            let r = simulate(&setup(cfg.clone(), 4, 0.0));
            match r.node("n0").and_then(|n| n.metrics.last()) {
                Some(m) if r.error.is_none() && m.outer_step == 20 => *acc += m.eval_loss,
                _ => return verdict(false, format!("seed {seed} {mode:?}: run did not finish: {:?}", r.error)),
            }
        }
    }
    let n = seeds.len() as f64;
    let (dp, fp, q8) = (dp / n, fp / n, q8 / n);
    let ratio = fp / dp;
    let rel = (q8 - fp).abs() / fp;
    verdict(
        ratio <= 1.1 && rel <= 0.1,
        format!("k=4 H=50 T=20, mean final eval loss over {} paired seeds: DP {dp:.5}, fp32 {fp:.5} (×{ratio:.3} ≤ 1.1), int8 {q8:.5} ({:.1}% of fp32 ≤ 10%)", seeds.len(), rel * 100.0),
    )
}

// ------------------------------------------------------------- criterion 7

fn c7_faults() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, s: String| {
        pass &= ok;
        parts.push(format!("{}{s}", if ok { "" } else { "✗ " }));
    };

    // Silent crash: evicted by the heartbeat timeout within one tick.
    let mut s = setup(toy(20, 12), 3, 0.1);
    s.churn = ChurnScript { events: vec![event(None, Some(10.5), "n2", Action::Crash)] };
    let r = simulate(&s);
    let evicted = r.coordinator.events.iter().find(|e| e.node == "n2" && matches!(e.kind, EventKind::Evicted(_)));
    match evicted {
        Some(e) => {
            let dt = e.at.as_secs_f64() - 10.5;
            let timeout_kind = e.kind == EventKind::Evicted(EvictReason::Timeout);
            check(timeout_kind && dt > 6.0 - 2.0 && dt <= 6.0 + 2.0, format!("crash@10.5s evicted at {:.2}s (+{dt:.2}s ≤ 6s+2s)", e.at.as_secs_f64()));
        }
        None => check(false, "crashed node never evicted".into()),
    }
    check(r.error.is_none() && hash_disagreements(&r).is_empty(), "survivors agree".into());

    // Deathrattle: removal as soon as the leave is signalled.
    let mut s = setup(toy(20, 6), 3, 0.1);
    s.churn = ChurnScript { events: vec![event(Some(3), None, "n2", Action::Leave)] };
    let r = simulate(&s);
    let fired = r.fired.first().map(|f| f.0.as_secs_f64());
    let left = r.coordinator.events.iter().find(|e| e.node == "n2" && e.kind == EventKind::Left).map(|e| e.at.as_secs_f64());
    match (fired, left) {
        (Some(f), Some(l)) => check(l - f <= 0.15, format!("deathrattle removed after {:.3}s", l - f)),
        _ => check(false, "leave not observed".into()),
    }

    // Crash in the middle of the first collective.
    let slow = LinkSpec::new(1e4, Duration::from_millis(5));
    let mut s = setup(toy(10, 3), 4, 0.1);
    s.default_link = slow.clone();
    s.churn = ChurnScript { events: vec![event(None, Some(1.3), "n3", Action::Crash)] };
    let faulty = simulate(&s);
    let mut s3 = setup(toy(10, 3), 3, 0.1);
    s3.default_link = slow;
    let clean = simulate(&s3);
    let r1: Vec<_> = faulty.metrics().into_iter().filter(|m| m.outer_step == 1).collect();
    let survivors_same = r1.len() == 3 && r1.iter().all(|m| m.param_hash == r1[0].param_hash && m.k == 3 && m.retries >= 1);
    let divisor_ok = hashes(&clean, "n0").first().map(|h| &h.1) == r1.first().map(|m| &m.param_hash);
    check(survivors_same && divisor_ok, format!("mid-collective crash: round 1 retried={}, k=3, survivors identical={survivors_same}, = 3-node oracle {divisor_ok}", r1.first().map_or(0, |m| m.retries)));

    // Blocking join: the joiner's state is the donor's, bit for bit.
    let mut s = setup(toy(20, 6), 3, 0.1);
    s.churn = ChurnScript { events: vec![event(Some(3), None, "j", Action::JoinBlocking)] };
    let r = simulate(&s);
    let joiner = hashes(&r, "j");
    let n0: Vec<_> = hashes(&r, "n0").into_iter().filter(|h| h.0 >= 3).collect();
    let ck = |n: &str| r.node(n).and_then(|x| x.checkpoint.as_ref()).map(|c| c.replicated_hash());
    let final_eq = ck("j").is_some() && ck("j") == ck("n0");
    check(!joiner.is_empty() && joiner == n0 && final_eq, format!("blocking join from round {}: hashes match donor {}/{} rounds", joiner.first().map_or(0, |h| h.0), joiner.iter().zip(&n0).filter(|(a, b)| a == b).count(), n0.len()));

    // Non-blocking join: zero pseudo-gradient in the first round.
    let mut s = setup(toy(20, 6), 3, 0.1);
    s.churn = ChurnScript { events: vec![event(Some(3), None, "j", Action::JoinNonblocking)] };
    let r = simulate(&s);
    let first = r.node("j").and_then(|n| n.metrics.first().cloned());
    let ok = first.as_ref().is_some_and(|m| m.delta_l2 == 0.0 && m.k == 4) && hash_disagreements(&r).is_empty();
    check(ok, format!("non-blocking joiner Δ at round {}: {}", first.as_ref().map_or(0, |m| m.outer_step), first.as_ref().map_or(f64::NAN, |m| m.delta_l2)));
    let all_done = r.nodes.iter().all(|n| n.outcome == NodeOutcome::Finished);
    check(all_done, "all finished".into());

    verdict(pass, parts.join("; "))
}

// ------------------------------------------------------------- criterion 8

fn brute_force(m: &BandwidthMatrix) -> f64 {
    fn rec(m: &BandwidthMatrix, path: &mut Vec<usize>, used: &mut [bool], cur: f64, best: &mut f64) {
        let n = m.n();
        if path.len() == n {
            let v = cur.min(m.get(path[n - 1], path[0]));
            if v > *best {
                *best = v;
            }
            return;
        }
        for j in 1..n {
            if !used[j] {
                used[j] = true;
                let last = *path.last().unwrap();
                path.push(j);
                rec(m, path, used, cur.min(m.get(last, j)), best);
                path.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut used = vec![false; m.n()];
    used[0] = true;
    rec(m, &mut vec![0], &mut used, f64::INFINITY, &mut best);
    best
}

fn c8_topology() -> Verdict {
    let mut mismatches = 0;
    for n in 4..=8usize {
        for trial in 0..100u64 {
            let mut rng = DetRng::at(0x70b0, n as u64, trial);
            let mut w = vec![0f64; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    // Few distinct levels so ties are common.
                    let v = if trial % 2 == 0 { (1 + rng.below(6)) as f64 } else { rng.uniform() * 1e9 };
                    w[i * n + j] = v;
                    w[j * n + i] = v;
                }
            }
            let m = BandwidthMatrix::from_fn(n, |i, j| w[i * n + j]).unwrap();
            let got = solve_ring(&m).unwrap();
            let mut seen = got.order.clone();
            seen.sort_unstable();
            let valid = seen == (0..n).collect::<Vec<_>>();
            let objective_ok = got.objective == brute_force(&m);
            let consistent = (0..n).map(|i| m.get(got.order[i], got.order[(i + 1) % n])).fold(f64::INFINITY, f64::min) == got.objective;
            if !(valid && objective_ok && consistent) {
                mismatches += 1;
            }
        }
    }
    let hand = BandwidthMatrix::from_fn(4, |i, j| if (i + 4 - j) % 4 == 2 { 1.0 } else { 10.0 }).unwrap();
    let h = solve_ring(&hand).unwrap();
    verdict(
        mismatches == 0 && h.objective == 10.0,
        format!("solve_ring = exhaustive oracle on {}/500 random matrices (n=4..8); n=4 hand case objective {}", 500 - mismatches, h.objective),
    )
}

// ------------------------------------------------------------- criterion 9

fn run_scenario(name: &str, out: &Path, resume: Option<PathBuf>) -> Result<SimReport, String> {
    let mut c = RunConfig::load(&scenarios_dir().join(format!("{name}.toml")))?;
    c.checkpoint_dir = Some(out.join(name));
    c.resume_dir = resume;
    c.validate(Role::Simulate)?;
    let s = c.sim_setup()?;
    std::fs::create_dir_all(out.join(name)).map_err(|e| e.to_string())?;
    Ok(simulate(&s))
}

fn c9_replicated_state() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut parts = Vec::new();
    let mut pass = true;
    let mut note = |name: &str, r: &Result<SimReport, String>| {
        let (ok, msg) = match r {
            Ok(r) => {
                let rounds = r.metrics().iter().map(|m| m.outer_step).max().unwrap_or(0);
                let bad = hash_disagreements(r);
                (bad.is_empty() && r.error.is_none() && rounds > 0, format!("{name}: {rounds} rounds, disagreements {bad:?}"))
            }
            Err(e) => (false, format!("{name}: {e}")),
        };
        pass &= ok;
        parts.push(format!("{}{msg}", if ok { "" } else { "✗ " }));
    };
    for name in ["no-churn", "gradual-scale-up", "churn"] {
        note(name, &run_scenario(name, tmp.path(), None));
    }
    let failed = run_scenario("mass-failure", tmp.path(), None);
    note("mass-failure", &failed);
    let halted = failed.as_ref().is_ok_and(|r| r.coordinator.halted.is_some());
    let resumed = run_scenario("mass-failure-resume", tmp.path(), Some(tmp.path().join("mass-failure")));
    note("mass-failure-resume", &resumed);
    let finished = resumed.as_ref().is_ok_and(|r| r.nodes.len() == 4 && r.nodes.iter().all(|n| n.outcome == NodeOutcome::Finished));
    verdict(
        pass && halted && finished,
        format!("per-round hashes agree across live nodes: {}; mass failure halted: {halted}, resume finished: {finished}", parts.join(", ")),
    )
}

// ------------------------------------------------------------ criterion 10

fn c10_utilization() -> Verdict {
    let mut us = Vec::new();
    for h in [10u64, 50, 100] {
        let mut s = setup(toy(h, 3), 4, 0.01);
        s.default_link = LinkSpec::new(1e6, Duration::from_millis(20));
        let r = simulate(&s);
        us.push(compute_utilization(&r.metrics()));
    }
    let monotone = us.windows(2).all(|w| w[0] <= w[1]);
    verdict(monotone, format!("utilization over H=10,50,100: {:.3}, {:.3}, {:.3}", us[0], us[1], us[2]))
}
