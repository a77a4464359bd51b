//! Inner AdamW, outer Nesterov momentum, pseudo-gradients and the
//! warmup–stable–decay learning-rate schedule.

use crate::error::{bail, Result};
use crate::tensor::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub inner_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub outer_lr: f32,
    pub outer_momentum: f32,
    pub warmup_steps: u64,
    /// Total inner steps of the run (H × T); the schedule's horizon.
    pub total_steps: u64,
    pub cooldown_fraction: f32,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            inner_lr: 7.5e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            outer_lr: 0.7,
            outer_momentum: 0.9,
            warmup_steps: 1000,
            total_steps: 100_000,
            cooldown_fraction: 0.2,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f32| (0.0..1.0).contains(&v);
        if !unit(self.beta1) {
            bail!(Config, "beta1 must lie in [0, 1), got {}", self.beta1);
        }
        if !unit(self.beta2) {
            bail!(Config, "beta2 must lie in [0, 1), got {}", self.beta2);
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            bail!(Config, "inner_lr must be > 0, got {}", self.inner_lr);
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            bail!(Config, "outer_lr must be > 0, got {}", self.outer_lr);
        }
        if !unit(self.outer_momentum) {
            bail!(Config, "outer_momentum must lie in [0, 1), got {}", self.outer_momentum);
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            bail!(Config, "eps must be > 0, got {}", self.eps);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "weight_decay must be >= 0, got {}", self.weight_decay);
        }
        if !unit(self.cooldown_fraction) {
            bail!(Config, "cooldown_fraction must lie in [0, 1), got {}", self.cooldown_fraction);
        }
        if self.total_steps == 0 {
            bail!(Config, "total_steps must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> Self {
        AdamWState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NesterovState {
    pub buffer: ModelParams,
}

impl NesterovState {
    pub fn new(params: &ModelParams) -> Self {
        NesterovState { buffer: params.zeros_like() }
    }
}

/// One AdamW step with bias correction and decoupled weight decay at
/// learning rate `inner_lr × lr_scale`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamWState,
    hp: &HyperParams,
    lr_scale: f32,
) -> Result<()> {
    params.check_layout(grads, "gradient")?;
    params.check_layout(&state.m, "AdamW first moment")?;
    params.check_layout(&state.v, "AdamW second moment")?;
    if !(0.0..=1.0).contains(&lr_scale) {
        bail!(Range, "lr_scale {lr_scale} outside [0, 1]");
    }
    for (name, g) in grads.entries() {
        if !g.is_finite() {
            bail!(NonFinite, "gradient of {name}");
        }
    }

    state.step += 1;
    let t = state.step as f32;
    let lr = hp.inner_lr * lr_scale;
    let (b1, b2) = (hp.beta1, hp.beta2);
    let bc1 = 1.0 - libm::powf(b1, t);
    let bc2_sqrt = libm::sqrtf(1.0 - libm::powf(b2, t));
    let step_size = lr / bc1;
    let decay = 1.0 - lr * hp.weight_decay;

    let moments = state.m.entries_mut().zip(state.v.entries_mut());
    for (((name, p), (_, g)), ((_, m), (_, v))) in params.entries_mut().zip(grads.entries()).zip(moments) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * (g[i] * g[i]);
            let denom = libm::sqrtf(v[i]) / bc2_sqrt + hp.eps;
            p[i] = p[i] * decay - step_size * m[i] / denom;
        }
        if p.iter().chain(m.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
            bail!(NonFinite, "AdamW update of {name}");
        }
    }
    Ok(())
}

/// Per-worker pseudo-gradient `theta_prev − theta_local`.
pub fn compute_pseudo_gradient(theta_prev: &ModelParams, theta_local: &ModelParams) -> Result<ModelParams> {
    theta_prev.check_layout(theta_local, "local parameters")?;
    let mut out = theta_prev.clone();
    for ((name, d), (_, l)) in out.entries_mut().zip(theta_local.entries()) {
        for (x, y) in d.data_mut().iter_mut().zip(l.data()) {
            *x -= *y;
        }
        if !d.is_finite() {
            bail!(NonFinite, "pseudo-gradient of {name}");
        }
    }
    Ok(out)
}

/// Nesterov outer step: `b ← μb + Δ; θ ← θ − lr(Δ + μb)`.
pub fn nesterov_outer_step(
    params: &mut ModelParams,
    avg_delta: &ModelParams,
    state: &mut NesterovState,
    hp: &HyperParams,
) -> Result<()> {
    params.check_layout(avg_delta, "averaged pseudo-gradient")?;
    params.check_layout(&state.buffer, "Nesterov buffer")?;
    let (mu, lr) = (hp.outer_momentum, hp.outer_lr);
    for (((name, p), (_, d)), (_, b)) in params.entries_mut().zip(avg_delta.entries()).zip(state.buffer.entries_mut()) {
        let (p, d, b) = (p.data_mut(), d.data(), b.data_mut());
        for i in 0..p.len() {
            b[i] = mu * b[i] + d[i];
            p[i] -= lr * (d[i] + mu * b[i]);
        }
        if p.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            bail!(NonFinite, "outer update of {name}");
        }
    }
    Ok(())
}

/// Warmup–stable–decay multiplier: linear ramp over `warmup_steps`, 1.0 in
/// the stable phase, linear decay to 0 over the final `cooldown_fraction`.
pub fn wsd_lr_scale(step: u64, hp: &HyperParams) -> Result<f32> {
    let total = hp.total_steps;
    if step > total {
        bail!(Range, "step {step} beyond total_steps {total}");
    }
    let warm = if hp.warmup_steps == 0 { 1.0 } else { (step as f64 / hp.warmup_steps as f64).min(1.0) };
    let cooldown_len = libm::round(hp.cooldown_fraction as f64 * total as f64) as u64;
    let cool = if cooldown_len == 0 { 1.0 } else { ((total - step) as f64 / cooldown_len as f64).min(1.0) };
    Ok(warm.min(cool) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn scalar(name: &str, v: f32) -> ModelParams {
        ModelParams::new(vec![(name.into(), Tensor::scalar(v).unwrap())]).unwrap()
    }

    fn val(p: &ModelParams) -> f32 {
        p.entries()[0].1.data()[0]
    }

    // Independent f64 transcription of the AdamW recurrences.
    fn adamw_ref(theta: f64, g: f64, lr: f64, wd: f64, b1: f64, b2: f64, eps: f64) -> (f64, f64, f64) {
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        (theta * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps), m, v)
    }

    #[test]
    fn adamw_scalar_example() {
        let hp = HyperParams { inner_lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut p = scalar("t", 0.0);
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &scalar("t", 1.0), &mut st, &hp, 1.0).unwrap();
        let (theta, m, v) = adamw_ref(0.0, 1.0, 0.1, 0.0, 0.9, 0.95, 1e-8);
        assert!((val(&st.m) as f64 - m).abs() < 1e-7 && (m - 0.1).abs() < 1e-12);
        assert!((val(&st.v) as f64 - v).abs() < 1e-7 && (v - 0.05).abs() < 1e-12);
        assert!((val(&p) as f64 - theta).abs() < 1e-6);
        assert!((val(&p) + 0.1).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_zero_grad_is_pure_decay() {
        let hp = HyperParams { inner_lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut p = scalar("t", 1.0);
        let mut st = AdamWState::new(&p);
        for _ in 0..3 {
            let before = val(&p);
            adamw_step(&mut p, &scalar("t", 0.0), &mut st, &hp, 1.0).unwrap();
            assert_eq!(val(&p), before * (1.0 - 0.01 * 0.1));
        }
    }

    #[test]
    fn adamw_errors() {
        let hp = HyperParams::default();
        let mut p = scalar("w", 1.0);
        let mut st = AdamWState::new(&p);
        let bad = ModelParams::new(vec![("w".into(), Tensor::zeros(vec![2]))]).unwrap();
        assert!(matches!(adamw_step(&mut p, &bad, &mut st, &hp, 1.0), Err(crate::Error::Shape(_))));
        let mut g = scalar("w", 0.0);
        g.entries_mut().next().unwrap().1.data_mut()[0] = f32::NAN;
        match adamw_step(&mut p, &g, &mut st, &hp, 1.0) {
            Err(crate::Error::NonFinite(msg)) => assert!(msg.contains('w')),
            other => panic!("{other:?}"),
        }
        assert!(adamw_step(&mut p, &scalar("w", 0.0), &mut st, &hp, 1.5).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn pseudo_gradient_examples() {
        let a = ModelParams::new(vec![("x".into(), Tensor::from_vec(vec![1.0, 1.0]).unwrap())]).unwrap();
        let b = ModelParams::new(vec![("x".into(), Tensor::from_vec(vec![0.0, 2.0]).unwrap())]).unwrap();
        assert_eq!(compute_pseudo_gradient(&a, &b).unwrap().flatten(), vec![1.0, -1.0]);
        assert_eq!(compute_pseudo_gradient(&a, &a).unwrap().flatten(), vec![0.0, 0.0]);
        assert!(compute_pseudo_gradient(&a, &scalar("x", 0.0)).is_err());
    }

    #[test]
    fn nesterov_examples() {
        let hp = HyperParams::default();
        let mut p = scalar("t", 10.0);
        let mut st = NesterovState::new(&p);
        nesterov_outer_step(&mut p, &scalar("t", 1.0), &mut st, &hp).unwrap();
        assert_eq!(val(&st.buffer), 1.0);
        assert!((val(&p) as f64 - (10.0 - 0.7 * 1.9)).abs() < 1e-5);
        assert!((val(&p) - 8.67).abs() < 1e-5);

        let mut q = scalar("t", 3.25);
        let mut st = NesterovState::new(&q);
        nesterov_outer_step(&mut q, &scalar("t", 0.0), &mut st, &hp).unwrap();
        assert_eq!(val(&q), 3.25);

        let plain = HyperParams { outer_momentum: 0.0, outer_lr: 1.0, ..hp };
        let mut q = scalar("t", 3.0);
        let mut st = NesterovState::new(&q);
        nesterov_outer_step(&mut q, &scalar("t", 0.5), &mut st, &plain).unwrap();
        assert_eq!(val(&q), 2.5);
    }

    #[test]
    fn wsd_examples() {
        let hp = HyperParams { warmup_steps: 100, total_steps: 1000, cooldown_fraction: 0.2, ..Default::default() };
        assert_eq!(wsd_lr_scale(0, &hp).unwrap(), 0.0);
        assert_eq!(wsd_lr_scale(100, &hp).unwrap(), 1.0);
        assert_eq!(wsd_lr_scale(900, &hp).unwrap(), 0.5);
        assert_eq!(wsd_lr_scale(1000, &hp).unwrap(), 0.0);
        for s in 101..800 {
            assert_eq!(wsd_lr_scale(s, &hp).unwrap(), 1.0);
        }
        assert!(matches!(wsd_lr_scale(1001, &hp), Err(crate::Error::Range(_))));
    }

    #[test]
    fn defaults_validate() {
        HyperParams::default().validate().unwrap();
        assert!(HyperParams { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(HyperParams { outer_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(HyperParams { cooldown_fraction: 1.0, ..Default::default() }.validate().is_err());
    }
}
