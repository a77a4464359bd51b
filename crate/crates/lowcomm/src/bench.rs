//! Ring all-reduce on a fresh simulated network: makespan, traffic and
//! error against the exact mean.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;

use lowcomm_core::ring::{Mode, RingPlan};
use lowcomm_core::rng::DetRng;

use crate::allreduce::{allreduce, RingOptions};
use crate::transport::sim::{LinkSpec, SimWorld};

#[derive(Debug)]
pub struct RingRun {
    /// Result at each ring position.
    pub outputs: Vec<Vec<f32>>,
    pub makespan: Duration,
    pub bytes_sent: Vec<u64>,
}

/// Reduces `inputs[p]` from ring position `p` over nodes `r0 … r{k−1}`
/// all starting at time zero.
pub fn run_ring(link: &LinkSpec, inputs: Vec<Vec<f32>>, opts: &RingOptions) -> Result<RingRun, String> {
    let k = inputs.len();
    let names: Vec<String> = (0..k).map(|i| format!("r{i}")).collect();
    let plan = RingPlan::new(1, names.clone()).map_err(|e| e.to_string())?;
    let world = SimWorld::new(link.clone());
    let outputs: Arc<Mutex<Vec<Option<Result<Vec<f32>, String>>>>> = Arc::new(Mutex::new(vec![None; k]));
    let w = world.clone();
    let (out, opts) = (outputs.clone(), opts.clone());
    let makespan = world
        .run("bench", "main", move |net| {
            let tasks: Vec<_> = inputs
                .into_iter()
                .enumerate()
                .map(|(p, input)| {
                    let (plan, opts, out) = (plan.clone(), opts.clone(), out.clone());
                    w.spawn(&plan.order[p].clone(), "ring", move |n| {
                        let r = allreduce(&*n, &plan, 1, &input, &opts).map_err(|e| e.to_string());
                        out.lock().unwrap()[p] = Some(r);
                    })
                })
                .collect();
            for t in tasks {
                let _ = net.join(t);
            }
        })
        .map_err(|e| e.to_string())?;
    let outputs = std::mem::take(&mut *outputs.lock().unwrap())
        .into_iter()
        .map(|o| o.unwrap_or_else(|| Err("no result".into())))
        .collect::<Result<Vec<_>, _>>()?;
    let bytes_sent = names.iter().map(|n| world.traffic(n).bytes_sent).collect();
    Ok(RingRun { outputs, makespan, bytes_sent })
}

/// `k` standard-normal vectors of length `n`.
pub fn normal_inputs(seed: u64, k: usize, n: usize) -> Vec<Vec<f32>> {
    (0..k)
        .map(|p| {
            let mut rng = DetRng::at(seed, 0xbe4c, p as u64);
            (0..n).map(|_| rng.gaussian_f32()).collect()
        })
        .collect()
}

pub fn exact_mean(inputs: &[Vec<f32>]) -> Vec<f64> {
    let n = inputs.first().map_or(0, Vec::len);
    (0..n).map(|i| inputs.iter().map(|v| v[i] as f64).sum::<f64>() / inputs.len() as f64).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub mode: String,
    pub k: usize,
    pub segments: usize,
    pub pipelined: bool,
    pub makespan_s: f64,
    /// Largest per-node byte count, framing included.
    pub bytes_sent_max: u64,
    pub rmse: f64,
    pub max_abs_err: f64,
}

pub fn bench_one(link: &LinkSpec, size: usize, k: usize, opts: &RingOptions, seed: u64) -> Result<BenchRow, String> {
    let inputs = normal_inputs(seed, k, size);
    let mean = exact_mean(&inputs);
    let run = run_ring(link, inputs, opts)?;
    let out = &run.outputs[0];
    let (mut sq, mut max) = (0f64, 0f64);
    for (a, b) in out.iter().zip(&mean) {
        let e = (*a as f64 - b).abs();
        sq += e * e;
        max = max.max(e);
    }
    Ok(BenchRow {
        size,
        mode: match opts.mode {
            Mode::Fp32 => "fp32".into(),
            Mode::Int8 => "int8".into(),
        },
        k,
        segments: opts.segments,
        pipelined: opts.pipelined,
        makespan_s: run.makespan.as_secs_f64(),
        bytes_sent_max: run.bytes_sent.iter().copied().max().unwrap_or(0),
        rmse: if size == 0 { 0.0 } else { (sq / size as f64).sqrt() },
        max_abs_err: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link() -> LinkSpec {
        LinkSpec::new(1e8, Duration::from_millis(1))
    }

    #[test]
    fn pipelining_changes_time_not_values() {
        let inputs = normal_inputs(3, 4, 20_000);
        let mut opts = RingOptions { mode: Mode::Int8, segments: 8, codec_cost_per_value: Duration::from_nanos(20), ..RingOptions::default() };
        let piped = run_ring(&link(), inputs.clone(), &opts).unwrap();
        opts.pipelined = false;
        let serial = run_ring(&link(), inputs, &opts).unwrap();
        assert_eq!(piped.outputs, serial.outputs);
        let (p, s) = (piped.makespan.as_secs_f64(), serial.makespan.as_secs_f64());
        assert!(p < s, "pipelined {p} vs serial {s}");
    }

    #[test]
    fn one_segment_pipeline_is_serial() {
        let inputs = normal_inputs(4, 3, 5000);
        let mut opts = RingOptions { mode: Mode::Int8, segments: 1, codec_cost_per_value: Duration::from_nanos(20), ..RingOptions::default() };
        let piped = run_ring(&link(), inputs.clone(), &opts).unwrap();
        opts.pipelined = false;
        let serial = run_ring(&link(), inputs, &opts).unwrap();
        assert_eq!(piped.outputs, serial.outputs);
        assert_eq!(piped.makespan, serial.makespan);
    }

    #[test]
    fn every_position_agrees() {
        for mode in [Mode::Fp32, Mode::Int8] {
            let opts = RingOptions { mode, segments: 3, ..RingOptions::default() };
            let run = run_ring(&link(), normal_inputs(9, 5, 1001), &opts).unwrap();
            assert!(run.outputs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn traffic_near_two_payloads() {
        let (n, k) = (40_000, 4);
        let run = run_ring(&link(), normal_inputs(1, k, n), &RingOptions::default()).unwrap();
        let ideal = 2.0 * (k - 1) as f64 / k as f64 * (4 * n) as f64;
        for b in run.bytes_sent {
            let r = b as f64 / ideal;
            assert!((1.0..1.01).contains(&r), "{r}");
        }
    }
}
