//! Training objectives and their gradients.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::math::{Real, Vec3};
use crate::occupancy::OccupancyPlane;
use crate::render::{sample_ray, ModelGrad, Ray};
use crate::scene::{activate, activate_backward, ActivatedPoint, FeatureVector, SceneGrad, SceneRepr};
use crate::shader::{DeferredShader, FEAT_IN, OUTPUT};
use crate::{Error, Result};

/// Charbonnier constant.
pub const CHARBONNIER_EPS: f64 = 1e-6;
/// Standard deviation of the direction perturbation.
pub const SMOOTH_SIGMA: f64 = 0.3;
/// Rays with total `M * alpha` below this are dropped from the entropy mean.
pub const ENTROPY_MIN_MASS: f64 = 1e-8;

/// A loss value plus whether it was computed from an empty population
/// (closed plane, every ray skipped).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerm<T> {
    pub value: T,
    pub degenerate: bool,
}

/// Weights `lambda[0..8]` for rgb, s3im, distortion, interval, sparsity,
/// entropy, occupancy and smoothness, in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 8],
    pub charbonnier_eps: f64,
    pub smooth_sigma: f64,
    pub smooth_rays: usize,
    pub entropy_rays: usize,
    pub sparsity_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: [1.0, 0.0, 0.0, 0.0, 0.05, 0.001, 0.0, 0.1],
            charbonnier_eps: CHARBONNIER_EPS,
            smooth_sigma: SMOOTH_SIGMA,
            smooth_rays: 100,
            entropy_rays: 1 << 10,
            sparsity_samples: 1 << 14,
        }
    }
}

impl LossWeights {
    pub fn rgb(&self) -> f64 {
        self.lambda[0]
    }
    pub fn sparsity(&self) -> f64 {
        self.lambda[4]
    }
    pub fn entropy(&self) -> f64 {
        self.lambda[5]
    }
    pub fn occupancy(&self) -> f64 {
        self.lambda[6]
    }
    pub fn smooth(&self) -> f64 {
        self.lambda[7]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative"));
        }
        if self.lambda[1..4].iter().any(|l| *l != 0.0) {
            return Err(Error::InvalidArgument("s3im, distortion and interval weights must be zero"));
        }
        if !(self.charbonnier_eps > 0.0) || !(self.smooth_sigma > 0.0) {
            return Err(Error::InvalidArgument("charbonnier epsilon and perturbation sigma must be positive"));
        }
        Ok(())
    }
}

/// Unweighted loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub rgb: T,
    pub occ: T,
    pub smooth: T,
    pub sparsity: T,
    pub entropy: T,
}

/// Weighted sum of the in-scope terms; `w.lambda[6]` is the current
/// (scheduled) occupancy weight.
pub fn total_loss<T: Real>(parts: &LossParts<T>, w: &LossWeights) -> Result<T> {
    w.validate()?;
    Ok(T::lit(w.rgb()) * parts.rgb
        + T::lit(w.occupancy()) * parts.occ
        + T::lit(w.smooth()) * parts.smooth
        + T::lit(w.sparsity()) * parts.sparsity
        + T::lit(w.entropy()) * parts.entropy)
}

/// Sum over rays of `sqrt(|C - C_gt|^2 + eps)`.
pub fn rgb_loss<T: Real>(pred: &[[T; 3]], truth: &[[T; 3]], eps: T) -> Result<T> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch { expected: truth.len(), actual: pred.len() });
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| charbonnier(p, t, eps).0).sum())
}

/// Per-ray Charbonnier value and its gradient with respect to the prediction.
pub fn charbonnier<T: Real>(pred: &[T; 3], truth: &[T; 3], eps: T) -> (T, [T; 3]) {
    let e = [pred[0] - truth[0], pred[1] - truth[1], pred[2] - truth[2]];
    let v = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2] + eps).sqrt();
    (v, e.map(|x| x / v))
}

/// Gaussian perturbation of a unit direction, renormalized.
pub fn perturb_direction<T: Real, R: Rng + ?Sized>(d: Vec3<T>, sigma: T, rng: &mut R) -> Vec3<T> {
    let mut n = || T::lit(StandardNormal.sample(rng));
    let delta = Vec3::new(n(), n(), n()) * sigma;
    (d + delta).normalized().unwrap_or(d)
}

/// `S(d, s) * |G(F, s) - G(F, d)|^2` for one ray with `F` held fixed.
/// Shader parameter gradients are added into `g_shader` when given.
pub fn smooth_term<T: Real>(
    shader: &DeferredShader<T>,
    feat: &[T; FEAT_IN],
    d: Vec3<T>,
    s: Vec3<T>,
    g_shader: Option<&mut [T]>,
) -> Result<T> {
    let cos = d.dot(s).max(T::zero());
    let cd = shader.eval(feat, d)?;
    let cs = shader.eval(feat, s)?;
    let diff: [T; OUTPUT] = core::array::from_fn(|c| cs.out[c] - cd.out[c]);
    let value = cos * diff.iter().map(|x| *x * *x).sum::<T>();
    if let Some(g) = g_shader {
        if cos > T::zero() {
            let two = T::lit(2.0) * cos;
            shader.backward(&cs, &diff.map(|x| two * x), g);
            shader.backward(&cd, &diff.map(|x| -two * x), g);
        }
    }
    Ok(value)
}

/// Sum of [`smooth_term`] over rays with one fresh perturbation each.
pub fn smooth_loss<T: Real, R: Rng + ?Sized>(
    shader: &DeferredShader<T>,
    features: &[[T; FEAT_IN]],
    dirs: &[Vec3<T>],
    sigma: T,
    rng: &mut R,
    mut g_shader: Option<&mut [T]>,
) -> Result<T> {
    if features.len() != dirs.len() {
        return Err(Error::ShapeMismatch { expected: features.len(), actual: dirs.len() });
    }
    let mut total = T::zero();
    for (f, d) in features.iter().zip(dirs) {
        let s = perturb_direction(*d, sigma, rng);
        total += smooth_term(shader, f, *d, s, g_shader.as_deref_mut())?;
    }
    Ok(total)
}

/// Uniform point in the occupied region: columns are chosen with probability
/// proportional to their interval length, then the point is uniform inside the
/// column box. `None` for a fully closed plane.
pub struct OccupiedSampler<T> {
    cdf: Vec<T>,
}

impl<T: Real> OccupiedSampler<T> {
    pub fn new(plane: &OccupancyPlane<T>) -> Option<Self> {
        let mut acc = T::zero();
        let cdf: Vec<T> = (0..plane.res * plane.res)
            .map(|c| {
                let (lo, hi) = plane.interval(c);
                acc += (hi - lo).max(T::zero());
                acc
            })
            .collect();
        (acc > T::zero()).then_some(Self { cdf })
    }

    pub fn sample<R: Rng + ?Sized>(&self, plane: &OccupancyPlane<T>, rng: &mut R) -> Vec3<T> {
        let total = *self.cdf.last().unwrap();
        let u = T::lit(rng.random::<f64>()) * total;
        let cell = self.cdf.partition_point(|c| *c <= u).min(self.cdf.len() - 1);
        let (ix, iy) = (cell % plane.res, cell / plane.res);
        let (cw, ch) = plane.cell_size();
        let (lo, hi) = plane.interval(cell);
        let mut r = || T::lit(rng.random::<f64>());
        let x = plane.aabb.lo.x + (T::lit(ix as f64) + r()) * cw;
        let y = plane.aabb.lo.y + (T::lit(iy as f64) + r()) * ch;
        let z = lo + r() * (hi - lo);
        plane.aabb.clamp(Vec3::new(x, y, z))
    }
}

/// Reference spacing for the sparsity opacity.
pub fn sparsity_delta<T: Real>(scene: &SceneRepr<T>) -> T {
    scene.aabb.diagonal() / T::lit(256.0)
}

/// Mean opacity `1 - exp(-tau * delta_ref)` at the given points. Density
/// gradients are added into `grad` when given.
pub fn sparsity_at<T: Real>(
    scene: &SceneRepr<T>,
    points: &[Vec3<T>],
    delta_ref: T,
    mut grad: Option<&mut SceneGrad<T>>,
) -> T {
    if points.is_empty() {
        return T::zero();
    }
    let inv_k = T::one() / T::lit(points.len() as f64);
    let mut sum = T::zero();
    for p in points {
        let st = scene.stencil(scene.aabb.clamp(*p));
        let act = activate(&FeatureVector::from_array(scene.gather(&st)));
        let keep = (-act.density * delta_ref).exp();
        sum += T::one() - keep;
        if let Some(g) = grad.as_deref_mut() {
            let g_act =
                ActivatedPoint { density: inv_k * delta_ref * keep, diffuse: [T::zero(); 3], specular: [T::zero(); 4] };
            let gl = activate_backward(&act, &g_act);
            g.scatter_density(&st, gl.density_logit);
        }
    }
    sum * inv_k
}

/// Sparsity over `k` points drawn uniformly from the occupied region.
pub fn sparsity_loss<T: Real, R: Rng + ?Sized>(
    scene: &SceneRepr<T>,
    plane: &OccupancyPlane<T>,
    k: usize,
    rng: &mut R,
    grad: Option<&mut SceneGrad<T>>,
) -> LossTerm<T> {
    let Some(sampler) = OccupiedSampler::new(plane) else {
        return LossTerm { value: T::zero(), degenerate: true };
    };
    let points: Vec<Vec3<T>> = (0..k).map(|_| sampler.sample(plane, rng)).collect();
    LossTerm { value: sparsity_at(scene, &points, sparsity_delta(scene), grad), degenerate: false }
}

/// Entropy of the distribution proportional to `masses`, and its gradient
/// with respect to each mass. `None` when the total is below
/// [`ENTROPY_MIN_MASS`].
pub fn entropy_of<T: Real>(masses: &[T]) -> Option<(T, Vec<T>)> {
    let total: T = masses.iter().copied().sum();
    if !(total >= T::lit(ENTROPY_MIN_MASS)) {
        return None;
    }
    let mut h = T::zero();
    for m in masses {
        let p = *m / total;
        if p > T::zero() {
            h -= p * p.ln();
        }
    }
    let grad = masses
        .iter()
        .map(|m| {
            let p = *m / total;
            if p > T::zero() {
                (-p.ln() - h) / total
            } else {
                T::zero()
            }
        })
        .collect();
    Some((h, grad))
}

/// Mean entropy of `M * alpha` along `rays` vertical downward rays at random
/// footprint positions, each with `n_samples` stratified samples.
pub fn entropy_loss<T: Real, R: Rng + ?Sized>(
    scene: &SceneRepr<T>,
    plane: &OccupancyPlane<T>,
    rays: usize,
    n_samples: usize,
    rng: &mut R,
    mut grad: Option<&mut ModelGrad<T>>,
) -> Result<LossTerm<T>> {
    let b = scene.aabb;
    let down = Vec3::new(T::zero(), T::zero(), -T::one());
    let mut per_ray: Vec<(T, Vec<T>, Vec<(crate::render::Sample<T>, ActivatedPoint<T>, crate::scene::Stencil<T>)>)> =
        Vec::new();
    for _ in 0..rays {
        let x = b.lo.x + T::lit(rng.random::<f64>()) * (b.hi.x - b.lo.x);
        let y = b.lo.y + T::lit(rng.random::<f64>()) * (b.hi.y - b.lo.y);
        let origin = Vec3::new(x, y, b.hi.z + T::one());
        let Some(ray) = Ray::through(&b, origin, down)? else {
            continue;
        };
        let samples = sample_ray(&ray, n_samples, plane, rng);
        let mut masses = Vec::with_capacity(samples.len());
        let mut tape = Vec::with_capacity(samples.len());
        for s in samples {
            let st = scene.stencil(s.pos);
            let act = activate(&FeatureVector::from_array(scene.gather(&st)));
            let alpha = T::one() - (-act.density * s.delta).exp();
            masses.push(s.occupancy() * alpha);
            tape.push((s, act, st));
        }
        if let Some((h, g)) = entropy_of(&masses) {
            per_ray.push((h, g, tape));
        }
    }
    if per_ray.is_empty() {
        return Ok(LossTerm { value: T::zero(), degenerate: true });
    }
    let inv = T::one() / T::lit(per_ray.len() as f64);
    let value = per_ray.iter().map(|r| r.0).sum::<T>() * inv;
    if let Some(g) = grad.as_deref_mut() {
        for (_, dh, tape) in &per_ray {
            for (ge, (s, act, st)) in dh.iter().zip(tape) {
                let ge = *ge * inv;
                let keep = (-act.density * s.delta).exp();
                let alpha = T::one() - keep;
                let g_act = ActivatedPoint {
                    density: ge * s.occupancy() * s.delta * keep,
                    diffuse: [T::zero(); 3],
                    specular: [T::zero(); 4],
                };
                g.scene.scatter_density(st, activate_backward(act, &g_act).density_logit);
                g.add_occupancy(s, ge * alpha);
            }
        }
    }
    Ok(LossTerm { value, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Aabb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn charbonnier_values() {
        let z = [[0.3, 0.3, 0.3]];
        assert!((rgb_loss(&z, &z, 1e-6f64).unwrap() - 1e-3).abs() < 1e-15);
        let v = rgb_loss(&[[1.0, 0.0, 0.0]], &[[0.0; 3]], 1e-6).unwrap();
        assert!((v - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        let two = rgb_loss(&[[1.0, 0.0, 0.0], [0.3; 3]], &[[0.0; 3], [0.3; 3]], 1e-6).unwrap();
        assert!((two - v - 1e-3).abs() < 1e-15);
        assert!(rgb_loss(&[[0.0f64; 3]], &[], 1e-6).is_err());
    }

    #[test]
    fn total_loss_mixing() {
        let parts = LossParts { rgb: 2.0, occ: 3.0, ..Default::default() };
        let mut w = LossWeights { lambda: [0.0; 8], ..Default::default() };
        assert_eq!(total_loss(&parts, &w).unwrap(), 0.0);
        w.lambda[0] = 1.0;
        assert_eq!(total_loss(&parts, &w).unwrap(), 2.0);
        w.lambda[6] = 0.1;
        assert!((total_loss::<f64>(&parts, &w).unwrap() - 2.3).abs() < 1e-15);
        w.lambda[4] = -1.0;
        assert!(total_loss(&parts, &w).is_err());
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(entropy_of(&[0.7f64]).unwrap().0, 0.0);
        assert!((entropy_of(&[0.2f64, 0.2]).unwrap().0 - 2f64.ln()).abs() < 1e-15);
        assert!((entropy_of(&[0.1f64; 7]).unwrap().0 - 7f64.ln()).abs() < 1e-14);
        assert!(entropy_of(&[1e-10f64, 1e-10]).is_none());
    }

    #[test]
    fn smooth_is_zero_without_direction_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sh = DeferredShader::<f64>::init(&mut rng);
        for i in DeferredShader::<f64>::direction_weight_indices() {
            sh.params[i] = 0.0;
        }
        let f = [[0.3; FEAT_IN]; 4];
        let d = [Vec3::new(0.0, 0.6, -0.8); 4];
        assert!(smooth_loss(&sh, &f, &d, 0.3, &mut rng, None).unwrap().abs() < 1e-15);
        let sh = DeferredShader::<f64>::init(&mut rng);
        assert_eq!(smooth_term(&sh, &f[0], d[0], d[0], None).unwrap(), 0.0);
    }

    #[test]
    fn sparsity_closed_forms() {
        let b = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut s = SceneRepr::<f64>::zeros(b, 4, 4).unwrap();
        let delta = sparsity_delta(&s);
        // Planes are zero, so the grid logit alone sets the density.
        let logit = (2f64.ln() / delta).ln();
        for c in s.grid.chunks_mut(8) {
            c[0] = logit;
        }
        let pts = [Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.5, 0.9, 0.7)];
        assert!((sparsity_at(&s, &pts, delta, None) - 0.5).abs() < 1e-12);
        for c in s.grid.chunks_mut(8) {
            c[0] = -1e3;
        }
        assert!(sparsity_at(&s, &pts, delta, None).abs() < 1e-15);
        let closed = OccupancyPlane::closed(b, 4, 0.1).unwrap();
        let t = sparsity_loss(&s, &closed, 16, &mut ChaCha8Rng::seed_from_u64(0), None);
        assert!(t.degenerate && t.value == 0.0);
    }

    #[test]
    fn occupied_sampler_stays_in_intervals() {
        let b = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut plane = OccupancyPlane::closed(b, 4, 0.1).unwrap();
        plane.heights[2 * 5] = 0.2;
        plane.heights[2 * 5 + 1] = 0.6;
        let s = OccupiedSampler::new(&plane).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = s.sample(&plane, &mut rng);
            assert_eq!(plane.cell_clamped(p.x, p.y), 5);
            assert!(p.z >= 0.2 && p.z <= 0.6);
        }
    }
}
