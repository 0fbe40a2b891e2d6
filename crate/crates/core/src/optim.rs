//! Adam over named trainable tensors and a warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Global-norm gradient clip; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// First and second moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update of `param` given `grad`, where `t` is the (already incremented)
/// step count, `t >= 1`.
pub fn adam_update(
    cfg: &AdamConfig,
    moments: &mut Moments,
    t: u64,
    param: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    if grad.len() != param.len() || moments.m.len() != param.len() {
        return Err(Error::LengthMismatch {
            what: "adam gradient",
            expected: param.len(),
            actual: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        if cfg.weight_decay != 0.0 {
            param[i] -= lr * cfg.weight_decay * param[i];
        }
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam state for a set of named tensors sharing one step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Restores state saved in a checkpoint.
    pub fn restore(cfg: AdamConfig, step: u64, moments: BTreeMap<String, Moments>) -> Self {
        Self { cfg, step, moments }
    }

    /// Starts a new optimizer step; every [`Adam::update`] until the next call
    /// uses the new bias correction.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::InvalidArgument("Adam::update before begin_step".into()));
        }
        let moments = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments::zeros(param.len()));
        adam_update(&self.cfg, moments, self.step, param, grad, lr)
    }

    /// Scale factor that brings the global gradient norm under `clip_norm`.
    pub fn clip_factor<'a>(&self, grads: impl IntoIterator<Item = &'a [f64]>) -> f64 {
        match self.cfg.clip_norm {
            None => 1.0,
            Some(max) => {
                let norm = grads
                    .into_iter()
                    .flat_map(|g| g.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max && norm > 0.0 {
                    max / norm
                } else {
                    1.0
                }
            }
        }
    }
}

/// Linear warmup from 0 to `peak`, cosine decay to `floor_frac * peak` at
/// `total`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub floor_frac: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64, total: u64, floor_frac: f64) -> Result<Self> {
        if warmup > total {
            return Err(Error::InvalidArgument(format!("warmup {warmup} exceeds total {total}")));
        }
        if !(0.0..=1.0).contains(&floor_frac) {
            return Err(Error::InvalidArgument(format!("floor fraction {floor_frac} outside [0, 1]")));
        }
        if !(peak >= 0.0 && peak.is_finite()) {
            return Err(Error::InvalidArgument(format!("peak lr {peak} must be finite and >= 0")));
        }
        Ok(Self {
            peak,
            warmup,
            total,
            floor_frac,
        })
    }

    /// 10% warmup, cosine down to 10% of peak.
    pub fn default_for(peak: f64, total: u64) -> Self {
        Self {
            peak,
            warmup: total / 10,
            total,
            floor_frac: 0.1,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let floor = self.floor_frac * self.peak;
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return floor;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_tensor() {
        let cfg = AdamConfig::default();
        let mut mo = Moments::zeros(3);
        let mut p = vec![1.0, -2.0, 3.0];
        adam_update(&cfg, &mut mo, 1, &mut p, &[0.0; 3], 0.003).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut mo = Moments::zeros(1);
        let mut p = vec![0.0];
        adam_update(&cfg, &mut mo, 1, &mut p, &[1.0], 0.003).unwrap();
        assert!((p[0] + 0.003 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.003f64);
        let mut x = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 1.0f64), (2, -2.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = vec![0.5];
        for g in [1.0, -2.0] {
            opt.begin_step();
            opt.update("w", &mut p, &[g], lr).unwrap();
        }
        assert!((p[0] - x).abs() <= 1e-15);
    }

    #[test]
    fn errors() {
        let cfg = AdamConfig::default();
        let mut mo = Moments::zeros(2);
        let mut p = vec![0.0, 0.0];
        assert!(adam_update(&cfg, &mut mo, 1, &mut p, &[1.0], 0.1).is_err());
        assert!(adam_update(&cfg, &mut mo, 1, &mut p, &[1.0, f64::NAN], 0.1).is_err());
        assert!(adam_update(&cfg, &mut mo, 1, &mut p, &[1.0, 1.0], -0.1).is_err());
        let mut opt = Adam::new(cfg);
        assert!(opt.update("w", &mut p, &[1.0, 1.0], 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(0.003, 100, 1000, 0.1).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(100), 0.003);
        let mid = s.lr_at(550);
        // Halfway through the cosine segment: floor + (peak - floor) / 2.
        let expect = 0.0003 + (0.003 - 0.0003) * 0.5;
        assert!((mid - expect).abs() < 1e-15);
        assert!((s.lr_at(1000) - 0.0003).abs() < 1e-18);
        assert!((s.lr_at(5000) - 0.0003).abs() < 1e-18);
        assert!((s.lr_at(50) - 0.0015).abs() < 1e-18);
        assert!(LrSchedule::new(0.1, 10, 5, 0.1).is_err());
        assert!(LrSchedule::new(0.1, 1, 5, 1.5).is_err());
    }

    #[test]
    fn gradient_scaling_barely_moves_updates() {
        let mut rng = SeededRng::new(4);
        let stream: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let run = |scale: f64| {
            let mut opt = Adam::new(AdamConfig::default());
            let mut p = vec![0.0; 8];
            for g in &stream {
                let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                opt.begin_step();
                opt.update("w", &mut p, &g, 0.01).unwrap();
            }
            p
        };
        let (a, b) = (run(1.0), run(2.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-12), "{x} vs {y}");
        }
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut rng = SeededRng::new(8);
            let mut opt = Adam::new(AdamConfig::default());
            let mut p = vec![0.1; 5];
            for _ in 0..100 {
                let g: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
                opt.begin_step();
                opt.update("w", &mut p, &g, 0.003).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let opt = Adam::new(AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        });
        let g1 = [3.0, 0.0];
        let g2 = [4.0];
        let f = opt.clip_factor([&g1[..], &g2[..]]);
        assert!((f - 0.2).abs() < 1e-15);
        assert_eq!(Adam::new(AdamConfig::default()).clip_factor([&g1[..]]), 1.0);
    }

    proptest! {
        #[test]
        fn second_moment_stays_nonnegative(grads in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let mut opt = Adam::new(AdamConfig::default());
            let mut p = vec![0.0];
            for g in grads {
                opt.begin_step();
                opt.update("w", &mut p, &[g], 0.01).unwrap();
                prop_assert!(opt.moments()["w"].v[0] >= 0.0);
            }
        }
    }
}
