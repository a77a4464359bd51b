use proptest::prelude::*;

use lowcomm_core::checkpoint::Checkpoint;
use lowcomm_core::optim::{
    adamw_step, compute_pseudo_gradient, nesterov_outer_step, wsd_lr_scale, AdamWState, HyperParams, NesterovState,
};
use lowcomm_core::quant::{self, QuantChunk, Stats};
use lowcomm_core::ring::{chunk_bounds, split_even};
use lowcomm_core::topology::{cycle_objective, solve_ring, BandwidthMatrix};
use lowcomm_core::wire::Frame;
use lowcomm_core::{ModelParams, Tensor};

fn params(v: Vec<f32>) -> ModelParams {
    ModelParams::new(vec![("p".into(), Tensor::from_vec(v).unwrap())]).unwrap()
}

fn finite_vec(max: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e4f32..1e4, 1..max)
}

proptest! {
    #[test]
    fn quant_bounds_and_bucket_error(v in finite_vec(600)) {
        let q = quant::quantize(&v).unwrap();
        let st = Stats::of(&v);
        let (lo, hi, w) = (st.lo() as f32, st.hi() as f32, st.bucket_width());
        let d = q.dequantize();
        prop_assert_eq!(d.len(), v.len());
        for (x, y) in v.iter().zip(&d) {
            prop_assert!(*y >= lo && *y <= hi, "{} outside [{}, {}]", y, lo, hi);
            let c = (*x as f64).clamp(st.lo(), st.hi());
            // In-range error is below one bucket width (plus f32 storage rounding).
            prop_assert!((c - *y as f64).abs() <= w * (1.0 + 1e-6) + (c.abs() * 1e-7), "x={} y={} w={}", x, y, w);
        }
        prop_assert!(q.codebook().windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn quant_is_monotone(v in finite_vec(400)) {
        let q = quant::quantize(&v).unwrap();
        let d = q.dequantize();
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] <= v[j] {
                    prop_assert!(d[i] <= d[j]);
                }
            }
        }
    }

    #[test]
    fn occupied_slots_are_member_means(v in finite_vec(300)) {
        let q = quant::quantize(&v).unwrap();
        let st = Stats::of(&v);
        if st.std > 0.0 {
            for b in 0..256usize {
                let members: Vec<f64> = v.iter().zip(q.indices())
                    .filter(|(_, &i)| i as usize == b)
                    .map(|(x, _)| (*x as f64).clamp(st.lo(), st.hi()))
                    .collect();
                if !members.is_empty() {
                    let mean = members.iter().sum::<f64>() / members.len() as f64;
                    prop_assert_eq!(q.codebook()[b], mean as f32);
                }
            }
        }
    }

    #[test]
    fn quant_chunk_bytes_roundtrip(v in finite_vec(300)) {
        let b = quant::quantize(&v).unwrap().encode();
        let q = QuantChunk::decode(&b).unwrap();
        prop_assert_eq!(q.encode(), b);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..2048)) {
        let _ = QuantChunk::decode(&bytes);
        let _ = Frame::decode(&bytes);
        let _ = ModelParams::decode(&bytes);
        let _ = Checkpoint::decode(&bytes);
        let _ = Checkpoint::from_stream(&bytes);
        let _ = lowcomm_core::mesh::Request::decode(&bytes);
        let _ = lowcomm_core::mesh::Response::decode(&bytes);
        let _ = lowcomm_core::ring::ChunkHeader::decode(&bytes);
    }

    #[test]
    fn quant_decode_of_mutated_valid_buffer(v in finite_vec(64), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut b = quant::quantize(&v).unwrap().encode();
        let i = pos.index(b.len());
        b[i] = byte;
        if let Ok(q) = QuantChunk::decode(&b) {
            prop_assert_eq!(q.encode(), b);
        }
    }

    // Inner steps move parameters by small relative amounts, so the two
    // operands of the pseudo-gradient stay within a factor of two of each
    // other and the subtraction (and its inverse) is exact.
    #[test]
    fn pseudo_gradient_roundtrip_for_nearby_pairs(
        pairs in prop::collection::vec((0.01f32..1e3, -0.4f32..0.4, any::<bool>()), 1..200)
    ) {
        let prev: Vec<f32> = pairs.iter().map(|(a, _, neg)| if *neg { -a } else { *a }).collect();
        let local: Vec<f32> = prev.iter().zip(&pairs).map(|(p, (_, r, _))| p * (1.0 + r)).collect();
        let (pp, lp) = (params(prev.clone()), params(local.clone()));
        let d = compute_pseudo_gradient(&pp, &lp).unwrap();
        for ((dx, l), p) in d.flatten().iter().zip(&local).zip(&prev) {
            prop_assert_eq!(dx + l, *p);
        }
    }

    #[test]
    fn optimizers_are_pure(v in finite_vec(50), g in -10f32..10.0, lr_scale in 0f32..=1.0) {
        let hp = HyperParams::default();
        let p = params(v.clone());
        let grads = params(v.iter().map(|x| x * 0.01 + g).collect());
        let run = || {
            let mut q = p.clone();
            let mut st = AdamWState::new(&q);
            adamw_step(&mut q, &grads, &mut st, &hp, lr_scale).unwrap();
            let mut nst = NesterovState::new(&q);
            nesterov_outer_step(&mut q, &grads, &mut nst, &hp).unwrap();
            (q, st, nst)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn wsd_piecewise_monotone(warm in 0u64..300, total in 1u64..3000, frac in 0f32..0.99) {
        let hp = HyperParams { warmup_steps: warm, total_steps: total, cooldown_fraction: frac, ..Default::default() };
        let vals: Vec<f32> = (0..=total).map(|s| wsd_lr_scale(s, &hp).unwrap()).collect();
        let peak = vals.iter().cloned().fold(0.0f32, f32::max);
        let top = vals.iter().position(|&v| v == peak).unwrap();
        for s in 0..top {
            prop_assert!(vals[s] <= vals[s + 1]);
        }
        for s in top..total as usize {
            prop_assert!(vals[s] >= vals[s + 1]);
        }
        prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(wsd_lr_scale(total + 1, &hp).is_err());
    }

    #[test]
    fn chunks_partition(n in 0usize..5000, k in 1usize..17, seg in 1usize..9) {
        let b = chunk_bounds(n, k);
        prop_assert_eq!(b.len(), k);
        let mut at = 0;
        for r in &b {
            prop_assert_eq!(r.start, at);
            prop_assert!(r.len() <= n / k + 1 && r.len() >= n / k);
            at = r.end;
            let s = split_even(r.clone(), seg);
            prop_assert_eq!(s.first().unwrap().start, r.start);
            prop_assert_eq!(s.last().unwrap().end, r.end);
        }
        prop_assert_eq!(at, n);
    }

    #[test]
    fn params_encoding_roundtrip(v in finite_vec(100), w in finite_vec(20)) {
        let p = ModelParams::new(vec![
            ("a".into(), Tensor::from_vec(v).unwrap()),
            ("b".into(), Tensor::from_vec(w).unwrap()),
        ]).unwrap();
        prop_assert_eq!(ModelParams::decode(&p.encode()).unwrap(), p);
    }
}

fn matrix_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (4usize..=8).prop_flat_map(|n| (Just(n), prop::collection::vec(1u32..64, n * n)))
        .prop_map(|(n, w)| (n, w.into_iter().map(|x| x as f64).collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solver_objective_is_self_consistent((n, raw) in matrix_strategy()) {
        let m = BandwidthMatrix::from_directed(n, &raw).unwrap();
        let r = solve_ring(&m).unwrap();
        prop_assert_eq!(r.objective, cycle_objective(&m, &r.order));
        let mut s = r.order.clone();
        s.sort();
        prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn solver_invariant_under_relabelling((n, raw) in matrix_strategy(), seed in any::<u64>()) {
        let m = BandwidthMatrix::from_directed(n, &raw).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = lowcomm_core::rng::DetRng::at(seed, 0, 0);
        for i in (1..n).rev() {
            perm.swap(i, r.below(i as u64 + 1) as usize);
        }
        let a = solve_ring(&m).unwrap().objective;
        let b = solve_ring(&m.permuted(&perm)).unwrap().objective;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn raising_non_cycle_edge_never_hurts((n, raw) in matrix_strategy(), pick in any::<prop::sample::Index>(), bump in 1f64..100.0) {
        let m = BandwidthMatrix::from_directed(n, &raw).unwrap();
        let r = solve_ring(&m).unwrap();
        let on_cycle = |i: usize, j: usize| (0..n).any(|p| {
            let (a, b) = (r.order[p], r.order[(p + 1) % n]);
            (a, b) == (i, j) || (a, b) == (j, i)
        });
        let off: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !on_cycle(i, j)).collect();
        if !off.is_empty() {
            let (i, j) = off[pick.index(off.len())];
            let m2 = BandwidthMatrix::from_fn(n, |a, b| {
                if (a, b) == (i, j) || (a, b) == (j, i) { m.get(a, b) + bump } else { m.get(a, b) }
            }).unwrap();
            prop_assert!(solve_ring(&m2).unwrap().objective >= r.objective);
        }
    }
}
