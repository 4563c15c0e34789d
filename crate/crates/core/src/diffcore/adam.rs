use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a set of parameter ranges.
///
/// The ranges are fixed at construction; `step` only touches those
/// coordinates of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    ranges: Vec<Range<usize>>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(ranges: Vec<Range<usize>>) -> Self {
        let n = ranges.iter().map(|r| r.len()).sum();
        Self { ranges, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// One bias-corrected Adam update. `grad` is indexed like the full
    /// parameter vector. Rejects the step (leaving everything untouched) if
    /// any owned gradient coordinate is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grad: &[f64], cfg: &AdamConfig) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), got: grad.len() });
        }
        for r in &self.ranges {
            if let Some(i) = r.clone().find(|&i| !grad[i].is_finite()) {
                return Err(Error::NonFiniteGradient { index: i });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        let data = params.as_mut_slice();
        let mut k = 0;
        for r in &self.ranges {
            for i in r.clone() {
                let g = grad[i];
                let m = flush(cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g);
                let v = flush(cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g);
                self.m[k] = m;
                self.v[k] = v;
                data[i] -= cfg.lr * (m / bc1) / (math::sqrt(v / bc2) + cfg.eps);
                k += 1;
            }
        }
        Ok(())
    }

    /// Flat dump of `t`, `m` and `v` for checkpoints.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + 2 * self.m.len());
        out.push(self.t as f64);
        out.extend_from_slice(&self.m);
        out.extend_from_slice(&self.v);
        out
    }

    pub fn load_vec(&mut self, data: &[f64]) -> Result<()> {
        let n = self.m.len();
        if data.len() != 1 + 2 * n {
            return Err(Error::Checkpoint(alloc::format!("optimizer state: expected {} values, got {}", 1 + 2 * n, data.len())));
        }
        self.t = data[0] as u64;
        self.m.copy_from_slice(&data[1..1 + n]);
        self.v.copy_from_slice(&data[1 + n..]);
        Ok(())
    }
}

/// Moments of coordinates that stop receiving gradient decay geometrically
/// into the subnormal range, where arithmetic is very slow; cut them to zero
/// well before that.
#[inline]
fn flush(x: f64) -> f64 {
    if x.abs() < 1e-150 {
        0.0
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamSet, AdamState) {
        let mut p = ParamSet::new();
        let r = p.add_slice("w", 4);
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v = i as f64;
        }
        (p, AdamState::new(vec![r]))
    }

    #[test]
    fn zero_grad_leaves_params() {
        let (mut p, mut s) = setup();
        let before = p.as_slice().to_vec();
        s.step(&mut p, &[0.0; 4], &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(p.as_slice(), &before[..]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (mut p, mut s) = setup();
        let g = [0.3, -2.0, 1e-3, -7.0];
        s.step(&mut p, &g, &AdamConfig::with_lr(0.01)).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let delta = p.get(i) - i as f64;
            assert!((delta + 0.01 * gi.signum()).abs() < 1e-7, "{delta}");
        }
    }

    #[test]
    fn deterministic_steps() {
        let (mut p1, mut s1) = setup();
        let (mut p2, mut s2) = setup();
        let cfg = AdamConfig::with_lr(0.05);
        for g in [[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 2.0]] {
            s1.step(&mut p1, &g, &cfg).unwrap();
            s2.step(&mut p2, &g, &cfg).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn non_finite_rejected_without_update() {
        let (mut p, mut s) = setup();
        let before = p.as_slice().to_vec();
        let err = s.step(&mut p, &[0.0, f64::NAN, 0.0, 0.0], &AdamConfig::with_lr(0.1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }));
        assert_eq!(p.as_slice(), &before[..]);
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn only_owned_ranges_move() {
        let mut p = ParamSet::new();
        let a = p.add_slice("a", 2);
        p.add_slice("b", 2);
        let mut s = AdamState::new(vec![a]);
        s.step(&mut p, &[1.0; 4], &AdamConfig::with_lr(0.1)).unwrap();
        assert!(p.get(0) < 0.0 && p.get(1) < 0.0);
        assert_eq!((p.get(2), p.get(3)), (0.0, 0.0));
    }
}
