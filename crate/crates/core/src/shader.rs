//! Deferred view-dependent shading network.
//!
//! A three-layer perceptron `34 -> 16 -> 16 -> 3` with ReLU between layers and
//! a sigmoid output. Its input is the ray's accumulated diffuse color (3),
//! accumulated specular feature (4) and the encoded view direction (27).

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math without std
use num_traits::Float;
use rand::Rng;

use crate::math::{sigmoid, Real, Vec3};
use crate::{Error, Result};

/// Frequencies used by [`encode_direction`].
pub const DIR_FREQS: usize = 4;
pub const DIR_ENC: usize = 3 + 2 * 3 * DIR_FREQS;
/// Accumulated diffuse + specular feature.
pub const FEAT_IN: usize = 7;
pub const INPUT: usize = FEAT_IN + DIR_ENC;
pub const HIDDEN: usize = 16;
pub const OUTPUT: usize = 3;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * INPUT;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + OUTPUT * HIDDEN;

/// Total number of shader parameters.
pub const PARAMS: usize = B3 + OUTPUT;

/// Initial output bias; `sigmoid(-3) ~= 0.047` of specular at start.
pub const OUTPUT_BIAS_INIT: f64 = -3.0;

/// Raw direction followed by `sin(2^k pi d)` and `cos(2^k pi d)` for
/// `k = 0..4`, per `k` ordered `[sin x, sin y, sin z, cos x, cos y, cos z]`.
pub fn encode_direction<T: Real>(d: Vec3<T>) -> Result<[T; DIR_ENC]> {
    let n = d.norm();
    if !((n - T::one()).abs() <= T::lit(1e-4)) {
        return Err(Error::InvalidArgument("view direction must be a unit vector"));
    }
    let mut out = [T::zero(); DIR_ENC];
    out[..3].copy_from_slice(&d.to_array());
    let pi = T::lit(core::f64::consts::PI);
    for k in 0..DIR_FREQS {
        let f = pi * T::lit((1u32 << k) as f64);
        let base = 3 + 6 * k;
        for j in 0..3 {
            let (s, c) = (f * d[j]).sin_cos();
            out[base + j] = s;
            out[base + 3 + j] = c;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeferredShader<T> {
    pub params: Vec<T>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ShaderCache<T> {
    pub input: [T; INPUT],
    pub h1_pre: [T; HIDDEN],
    pub h2_pre: [T; HIDDEN],
    pub out: [T; OUTPUT],
}

impl<T: Real> ShaderCache<T> {
    /// Smallest magnitude hidden pre-activation (distance to a ReLU kink).
    pub fn min_kink_distance(&self) -> T {
        self.h1_pre.iter().chain(&self.h2_pre).fold(T::infinity(), |m, v| m.min(v.abs()))
    }
}

impl<T: Real> DeferredShader<T> {
    pub fn zeros() -> Self {
        Self { params: vec![T::zero(); PARAMS] }
    }

    /// Glorot-uniform weights, zero hidden biases, output bias at
    /// [`OUTPUT_BIAS_INIT`].
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut s = Self::zeros();
        let mut fill = |range: core::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut s.params[range] {
                *v = T::lit(rng.random_range(-a..=a));
            }
        };
        fill(W1..B1, INPUT, HIDDEN);
        fill(W2..B2, HIDDEN, HIDDEN);
        fill(W3..B3, HIDDEN, OUTPUT);
        s.set_output_bias([T::lit(OUTPUT_BIAS_INIT); OUTPUT]);
        s
    }

    pub fn from_params(params: Vec<T>) -> Result<Self> {
        if params.len() != PARAMS {
            return Err(Error::ShapeMismatch { expected: PARAMS, actual: params.len() });
        }
        Ok(Self { params })
    }

    pub fn set_output_bias(&mut self, b: [T; OUTPUT]) {
        self.params[B3..B3 + OUTPUT].copy_from_slice(&b);
    }

    /// First-layer weights that read the encoded direction.
    pub fn direction_weight_indices() -> impl Iterator<Item = usize> {
        (0..HIDDEN).flat_map(|h| (FEAT_IN..INPUT).map(move |i| W1 + h * INPUT + i))
    }

    pub fn assemble_input(feat: &[T; FEAT_IN], dir_enc: &[T; DIR_ENC]) -> [T; INPUT] {
        let mut x = [T::zero(); INPUT];
        x[..FEAT_IN].copy_from_slice(feat);
        x[FEAT_IN..].copy_from_slice(dir_enc);
        x
    }

    pub fn forward(&self, input: &[T; INPUT]) -> ShaderCache<T> {
        let p = &self.params;
        let mut h1_pre = [T::zero(); HIDDEN];
        for (h, out) in h1_pre.iter_mut().enumerate() {
            let row = &p[W1 + h * INPUT..W1 + (h + 1) * INPUT];
            *out = p[B1 + h] + row.iter().zip(input).fold(T::zero(), |a, (w, x)| a + *w * *x);
        }
        let h1 = h1_pre.map(|v| v.max(T::zero()));
        let mut h2_pre = [T::zero(); HIDDEN];
        for (h, out) in h2_pre.iter_mut().enumerate() {
            let row = &p[W2 + h * HIDDEN..W2 + (h + 1) * HIDDEN];
            *out = p[B2 + h] + row.iter().zip(&h1).fold(T::zero(), |a, (w, x)| a + *w * *x);
        }
        let h2 = h2_pre.map(|v| v.max(T::zero()));
        let mut out = [T::zero(); OUTPUT];
        for (o, val) in out.iter_mut().enumerate() {
            let row = &p[W3 + o * HIDDEN..W3 + (o + 1) * HIDDEN];
            *val = sigmoid(p[B3 + o] + row.iter().zip(&h2).fold(T::zero(), |a, (w, x)| a + *w * *x));
        }
        ShaderCache { input: *input, h1_pre, h2_pre, out }
    }

    /// Shades accumulated features for a unit view direction.
    pub fn eval(&self, feat: &[T; FEAT_IN], dir: Vec3<T>) -> Result<ShaderCache<T>> {
        let enc = encode_direction(dir)?;
        Ok(self.forward(&Self::assemble_input(feat, &enc)))
    }

    /// Accumulates `d/d params` of `g_out . output` into `g_params` and
    /// returns the gradient with respect to the input vector.
    pub fn backward(&self, cache: &ShaderCache<T>, g_out: &[T; OUTPUT], g_params: &mut [T]) -> [T; INPUT] {
        let p = &self.params;
        let h1 = cache.h1_pre.map(|v| v.max(T::zero()));
        let h2 = cache.h2_pre.map(|v| v.max(T::zero()));

        let mut g_h2 = [T::zero(); HIDDEN];
        for o in 0..OUTPUT {
            let s = cache.out[o];
            let g_pre = g_out[o] * s * (T::one() - s);
            g_params[B3 + o] += g_pre;
            for h in 0..HIDDEN {
                g_params[W3 + o * HIDDEN + h] += g_pre * h2[h];
                g_h2[h] += g_pre * p[W3 + o * HIDDEN + h];
            }
        }
        let mut g_h1 = [T::zero(); HIDDEN];
        for h in 0..HIDDEN {
            if cache.h2_pre[h] <= T::zero() {
                continue;
            }
            let g_pre = g_h2[h];
            g_params[B2 + h] += g_pre;
            for i in 0..HIDDEN {
                g_params[W2 + h * HIDDEN + i] += g_pre * h1[i];
                g_h1[i] += g_pre * p[W2 + h * HIDDEN + i];
            }
        }
        let mut g_in = [T::zero(); INPUT];
        for h in 0..HIDDEN {
            if cache.h1_pre[h] <= T::zero() {
                continue;
            }
            let g_pre = g_h1[h];
            g_params[B1 + h] += g_pre;
            for i in 0..INPUT {
                g_params[W1 + h * INPUT + i] += g_pre * cache.input[i];
                g_in[i] += g_pre * p[W1 + h * INPUT + i];
            }
        }
        g_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn architecture_parameter_count() {
        assert_eq!(INPUT, 34);
        assert_eq!(PARAMS, 34 * 16 + 16 + 16 * 16 + 16 + 16 * 3 + 3);
        let s = DeferredShader::<f32>::init(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.params.len(), PARAMS);
    }

    #[test]
    fn encoding_of_up_vector() {
        let e = encode_direction(Vec3::new(0.0f64, 0.0, 1.0)).unwrap();
        assert_eq!(e.len(), 27);
        assert_eq!(&e[..3], &[0.0, 0.0, 1.0]);
        for k in 0..DIR_FREQS {
            let b = 3 + 6 * k;
            assert_eq!(e[b], 0.0);
            assert_eq!(e[b + 1], 0.0);
            assert_eq!(e[b + 3], 1.0);
            assert_eq!(e[b + 4], 1.0);
        }
    }

    #[test]
    fn encoding_first_frequency_of_x_axis() {
        let e = encode_direction(Vec3::new(1.0f64, 0.0, 0.0)).unwrap();
        assert!(e[3].abs() < 1e-15);
        assert!((e[6] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn encoding_rejects_non_unit() {
        assert!(encode_direction(Vec3::new(0.0f64, 0.0, 2.0)).is_err());
        assert!(encode_direction(Vec3::<f64>::zero()).is_err());
    }

    #[test]
    fn zero_weights_output_sigmoid_of_bias() {
        let mut s = DeferredShader::<f64>::zeros();
        s.set_output_bias([0.0, 1.0, -3.0]);
        let out = s.eval(&[0.3; FEAT_IN], Vec3::new(0.0, 1.0, 0.0)).unwrap().out;
        assert_eq!(out[0], 0.5);
        assert!((out[1] - sigmoid(1.0)).abs() < 1e-15);
        assert!((out[2] - sigmoid(-3.0)).abs() < 1e-15);
    }
}
