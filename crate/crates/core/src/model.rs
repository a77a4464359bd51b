//! Toy regression workload: a two-layer tanh MLP trained with mean-squared
//! error against a larger random teacher network plus observation noise.
//!
//! All arithmetic inside a forward/backward pass accumulates in f64 in a
//! fixed sequential order, so results are exact functions of the inputs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::rng::{DetRng, STREAM_EVAL, STREAM_INIT, STREAM_TEACHER};
use crate::tensor::{ModelParams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.output == 0 {
            bail!(Config, "MLP dimensions must be positive, got {self:?}");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(&self, rng: &mut DetRng) -> ModelParams {
        let w = |rng: &mut DetRng, rows: usize, cols: usize| {
            let s = 1.0 / libm::sqrt(cols as f64);
            let data = (0..rows * cols).map(|_| (rng.gaussian() * s) as f32).collect();
            Tensor::new(vec![rows, cols], data).expect("finite init")
        };
        let w1 = w(rng, self.hidden, self.input);
        let w2 = w(rng, self.output, self.hidden);
        ModelParams::new(vec![
            (String::from("w1"), w1),
            (String::from("b1"), Tensor::zeros(vec![self.hidden])),
            (String::from("w2"), w2),
            (String::from("b2"), Tensor::zeros(vec![self.output])),
        ])
        .expect("distinct names")
    }

    /// Reads the dimensions back out of a parameter set, checking its layout.
    pub fn of(params: &ModelParams) -> Result<MlpSpec> {
        let e = params.entries();
        let names = ["w1", "b1", "w2", "b2"];
        if e.len() != 4 || e.iter().zip(names).any(|((n, _), want)| n != want) {
            bail!(Shape, "expected parameters w1, b1, w2, b2");
        }
        let (w1, b1, w2, b2) = (e[0].1.shape(), e[1].1.shape(), e[2].1.shape(), e[3].1.shape());
        if w1.len() != 2 || w2.len() != 2 || b1 != [w1[0]] || b2 != [w2[0]] || w2[1] != w1[0] {
            bail!(Shape, "inconsistent MLP shapes w1 {w1:?} b1 {b1:?} w2 {w2:?} b2 {b2:?}");
        }
        Ok(MlpSpec { input: w1[1], hidden: w1[0], output: w2[0] })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, input]`
    pub x: Tensor,
    /// `[batch, output]`
    pub y: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

struct Layers<'a> {
    w1: &'a [f32],
    b1: &'a [f32],
    w2: &'a [f32],
    b2: &'a [f32],
}

fn layers(params: &ModelParams) -> Layers<'_> {
    let e = params.entries();
    Layers { w1: e[0].1.data(), b1: e[1].1.data(), w2: e[2].1.data(), b2: e[3].1.data() }
}

fn check_batch(spec: &MlpSpec, batch: &Batch) -> Result<usize> {
    let (xs, ys) = (batch.x.shape(), batch.y.shape());
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] || xs[1] != spec.input || ys[1] != spec.output {
        bail!(Shape, "batch x {xs:?} / y {ys:?} does not fit MLP {spec:?}");
    }
    Ok(xs[0])
}

fn hidden_act(spec: &MlpSpec, l: &Layers<'_>, x: &[f32], h: &mut [f64]) {
    for j in 0..spec.hidden {
        let mut a = l.b1[j] as f64;
        for i in 0..spec.input {
            a += l.w1[j * spec.input + i] as f64 * x[i] as f64;
        }
        h[j] = libm::tanh(a);
    }
}

fn output(spec: &MlpSpec, l: &Layers<'_>, h: &[f64], o: usize) -> f64 {
    let mut s = l.b2[o] as f64;
    for j in 0..spec.hidden {
        s += l.w2[o * spec.hidden + j] as f64 * h[j];
    }
    s
}

/// Mean-squared-error loss only.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f32> {
    let spec = MlpSpec::of(params)?;
    let n = check_batch(&spec, batch)?;
    let l = layers(params);
    let (x, y) = (batch.x.data(), batch.y.data());
    let mut h = vec![0.0f64; spec.hidden];
    let mut total = 0.0f64;
    for b in 0..n {
        hidden_act(&spec, &l, &x[b * spec.input..(b + 1) * spec.input], &mut h);
        for o in 0..spec.output {
            let d = output(&spec, &l, &h, o) - y[b * spec.output + o] as f64;
            total += d * d;
        }
    }
    finite_loss(total / (n * spec.output) as f64)
}

fn finite_loss(v: f64) -> Result<f32> {
    let l = v as f32;
    if !l.is_finite() {
        bail!(NonFinite, "loss");
    }
    Ok(l)
}

/// Loss and exact gradients with respect to every parameter.
pub fn forward_backward(params: &ModelParams, batch: &Batch) -> Result<(f32, ModelParams)> {
    let spec = MlpSpec::of(params)?;
    let n = check_batch(&spec, batch)?;
    let l = layers(params);
    let (x, y) = (batch.x.data(), batch.y.data());
    let (ni, nh, no) = (spec.input, spec.hidden, spec.output);
    let mut gw1 = vec![0.0f64; nh * ni];
    let mut gb1 = vec![0.0f64; nh];
    let mut gw2 = vec![0.0f64; no * nh];
    let mut gb2 = vec![0.0f64; no];
    let mut h = vec![0.0f64; nh];
    let mut dp = vec![0.0f64; no];
    let scale = 2.0 / (n * no) as f64;
    let mut total = 0.0f64;
    for b in 0..n {
        let xb = &x[b * ni..(b + 1) * ni];
        hidden_act(&spec, &l, xb, &mut h);
        if h.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "hidden activation");
        }
        for o in 0..no {
            let d = output(&spec, &l, &h, o) - y[b * no + o] as f64;
            total += d * d;
            dp[o] = scale * d;
            gb2[o] += dp[o];
            for j in 0..nh {
                gw2[o * nh + j] += dp[o] * h[j];
            }
        }
        for j in 0..nh {
            let mut dh = 0.0f64;
            for o in 0..no {
                dh += dp[o] * l.w2[o * nh + j] as f64;
            }
            let da = dh * (1.0 - h[j] * h[j]);
            gb1[j] += da;
            for i in 0..ni {
                gw1[j * ni + i] += da * xb[i] as f64;
            }
        }
    }
    let loss = finite_loss(total / (n * no) as f64)?;
    let grads: Vec<f32> = gw1.iter().chain(&gb1).chain(&gw2).chain(&gb2).map(|&g| g as f32).collect();
    let grads = params.unflatten_like(&grads)?;
    Ok((loss, grads))
}

/// Synthetic regression task fully determined by its seed.
#[derive(Clone, Debug)]
pub struct Task {
    pub seed: u64,
    pub spec: MlpSpec,
    pub noise: f32,
    teacher: ModelParams,
}

impl Task {
    pub fn new(seed: u64, spec: MlpSpec, noise: f32) -> Result<Self> {
        spec.validate()?;
        let tspec = MlpSpec { hidden: spec.hidden * 2, ..spec };
        let mut rng = DetRng::at(seed, STREAM_TEACHER, 0);
        let mut teacher = tspec.init(&mut rng);
        // Non-zero teacher biases so the targets are not centred.
        for (_, t) in teacher.entries_mut().filter(|(n, _)| n.starts_with('b')) {
            for v in t.data_mut() {
                *v = (rng.gaussian() * 0.5) as f32;
            }
        }
        Ok(Task { seed, spec, noise, teacher })
    }

    /// Shared initial student parameters.
    pub fn init_params(&self) -> ModelParams {
        self.spec.init(&mut DetRng::at(self.seed, STREAM_INIT, 0))
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    /// Batch number `position` of data shard `shard`.
    pub fn synth_batch(&self, shard: u64, position: u64, batch_size: usize) -> Batch {
        self.draw(&mut DetRng::at(self.seed, shard, position), batch_size)
    }

    /// Held-out batch from a stream no shard ever uses.
    pub fn eval_batch(&self, batch_size: usize) -> Batch {
        self.draw(&mut DetRng::at(self.seed, STREAM_EVAL, 0), batch_size)
    }

    fn draw(&self, rng: &mut DetRng, batch_size: usize) -> Batch {
        assert!(batch_size > 0, "batch size must be positive");
        let (ni, no) = (self.spec.input, self.spec.output);
        let tspec = MlpSpec { hidden: self.spec.hidden * 2, ..self.spec };
        let l = layers(&self.teacher);
        let mut x = Vec::with_capacity(batch_size * ni);
        let mut y = Vec::with_capacity(batch_size * no);
        let mut h = vec![0.0f64; tspec.hidden];
        for _ in 0..batch_size {
            let start = x.len();
            for _ in 0..ni {
                x.push(rng.gaussian_f32());
            }
            hidden_act(&tspec, &l, &x[start..], &mut h);
            for o in 0..no {
                y.push((output(&tspec, &l, &h, o) + self.noise as f64 * rng.gaussian()) as f32);
            }
        }
        Batch {
            x: Tensor::new(vec![batch_size, ni], x).expect("finite inputs"),
            y: Tensor::new(vec![batch_size, no], y).expect("finite targets"),
        }
    }
}
