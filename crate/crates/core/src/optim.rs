//! Adam, learning-rate decay and the occupancy-loss weight ramp.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math without std
use num_traits::Float;

use crate::math::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-15 }
    }
}

/// First and second moments of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Steps actually taken (skipped steps do not count).
    pub step: u64,
    /// Steps skipped because of a non-finite gradient.
    pub skipped: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0, skipped: 0 }
    }

    /// One bias-corrected Adam update. Returns `false` (and leaves params and
    /// moments untouched) when any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, hp: &AdamParams) -> Result<bool> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch { expected: self.m.len(), actual: grads.len() });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
        let c1 = T::lit(1.0 - hp.beta1.powi(t));
        let c2 = T::lit(1.0 - hp.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(hp.eps));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(true)
    }
}

/// `start * (end / start)^(iteration / total)`.
pub fn exp_decay_lr(start: f64, end: f64, iteration: u64, total: u64) -> f64 {
    if total == 0 {
        return start;
    }
    let f = (iteration.min(total) as f64) / total as f64;
    start * (end / start).powf(f)
}

/// Shape of the occupancy-loss weight ramp at the reference length of 80k
/// iterations.
pub const LAMBDA7_REF_TOTAL: u64 = 80_000;
pub const LAMBDA7_REF_START: u64 = 10_000;
pub const LAMBDA7_REF_CADENCE: u64 = 2_000;
pub const LAMBDA7_INITIAL: f64 = 1e-4;
pub const LAMBDA7_FACTOR: f64 = 1.5;
pub const LAMBDA7_CAP: f64 = 0.2;

/// Occupancy-loss weight at `iteration` of a run of `total` iterations.
///
/// Zero until 12.5% of the run, then `1e-4` growing by 1.5x at every further
/// 2.5% of the run, capped at 0.2. With `total = 80_000` the breakpoints fall
/// at 10k, 12k, 14k, ...
pub fn lambda7_schedule(iteration: i64, total: u64) -> Result<f64> {
    if iteration < 0 {
        return Err(Error::InvalidArgument("iteration must be non-negative"));
    }
    if total == 0 {
        return Ok(0.0);
    }
    // Work in units of 1/80000 of the run to keep breakpoints exact.
    let scaled = iteration as u128 * LAMBDA7_REF_TOTAL as u128;
    let start = LAMBDA7_REF_START as u128 * total as u128;
    if scaled < start {
        return Ok(0.0);
    }
    let steps = (scaled - start) / (LAMBDA7_REF_CADENCE as u128 * total as u128);
    let steps = steps.min(64) as i32;
    Ok((LAMBDA7_INITIAL * LAMBDA7_FACTOR.powi(steps)).min(LAMBDA7_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = AdamState::<f64>::new(2);
        s.m = vec![0.5, -0.5];
        s.v = vec![1.0, 1.0];
        let mut p = vec![1.0, 2.0];
        s.step(&mut p, &[0.0, 0.0], 0.1, &AdamParams::default()).unwrap();
        // Moments decay; params still move by the remaining momentum.
        assert!((s.m[0] - 0.45).abs() < 1e-15);
        assert!((s.v[0] - 0.99).abs() < 1e-15);

        let mut fresh = AdamState::<f64>::new(2);
        let mut q = vec![1.0, 2.0];
        fresh.step(&mut q, &[0.0, 0.0], 0.1, &AdamParams::default()).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
    }

    #[test]
    fn single_step_by_hand() {
        let hp = AdamParams::default();
        let mut s = AdamState::<f64>::new(1);
        let mut p = vec![0.0];
        let g = 0.02;
        s.step(&mut p, &[g], 1e-2, &hp).unwrap();
        // m_hat = g, v_hat = g^2.
        let expect = -1e-2 * g / (g.abs() + 1e-15);
        assert!((p[0] - expect).abs() < 1e-16);
    }

    #[test]
    fn steady_state_is_lr_sign() {
        let hp = AdamParams::default();
        let mut s = AdamState::<f64>::new(1);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            s.step(&mut p, &[-3.0], 1e-3, &hp).unwrap();
            last = p[0] - before;
        }
        assert!((last - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut s = AdamState::<f32>::new(2);
        let mut p = vec![1.0, 1.0];
        assert!(!s.step(&mut p, &[f32::NAN, 0.0], 0.1, &AdamParams::default()).unwrap());
        assert_eq!((s.skipped, s.step), (1, 0));
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(exp_decay_lr(1e-2, 1e-3, 0, 100), 1e-2);
        assert!((exp_decay_lr(1e-2, 1e-3, 100, 100) - 1e-3).abs() < 1e-18);
        assert!((exp_decay_lr(1e-2, 1e-3, 50, 100) - (1e-5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ramp_reference_points() {
        let t = LAMBDA7_REF_TOTAL;
        assert_eq!(lambda7_schedule(0, t).unwrap(), 0.0);
        assert_eq!(lambda7_schedule(9_999, t).unwrap(), 0.0);
        assert_eq!(lambda7_schedule(10_000, t).unwrap(), 1e-4);
        assert_eq!(lambda7_schedule(11_999, t).unwrap(), 1e-4);
        assert!((lambda7_schedule(12_000, t).unwrap() - 1.5e-4).abs() < 1e-18);
        assert_eq!(lambda7_schedule(80_000, t).unwrap(), 0.2);
        assert!(lambda7_schedule(-1, t).is_err());
    }

    #[test]
    fn ramp_rescales_with_total() {
        for i in 0..=8_000i64 {
            let a = lambda7_schedule(i, 8_000).unwrap();
            let b = lambda7_schedule(i * 10, 80_000).unwrap();
            assert_eq!(a, b);
        }
    }
}
