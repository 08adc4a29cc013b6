//! The weighted training objective over one batch of pixel rays.
//!
//! The photometric part is per ray and independent, so a trainer may run
//! [`photometric`] in parallel and reduce the gradients in ray order; the
//! remaining terms come from [`regularizers`]. [`objective`] is the serial
//! composition of both and is what the gradient checker differentiates.
//!
//! Every term draws from its own ChaCha stream of the step seed, so the
//! random choices of one term never depend on how another one consumed
//! randomness.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    charbonnier, entropy_loss, smooth_loss, sparsity_at, sparsity_delta, LossParts, LossWeights, OccupiedSampler,
};
use crate::math::{Real, Vec3};
use crate::render::{render_pixel, Model, ModelGrad, Ray, RenderConfig};
use crate::scene::SceneGrad;
use crate::shader::FEAT_IN;
use crate::Result;

/// Stream ids of the batch-level regularizers (rays use `0..batch`).
pub const SMOOTH_STREAM: u64 = u64::MAX;
pub const SPARSITY_STREAM: u64 = u64::MAX - 1;
pub const ENTROPY_STREAM: u64 = u64::MAX - 2;

/// Independent random stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One supervised pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRay<T> {
    pub origin: Vec3<T>,
    pub dir: Vec3<T>,
    pub target: [T; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig<T> {
    pub render: RenderConfig<T>,
    pub weights: LossWeights,
    /// Current occupancy-loss weight (replaces the static slot in `weights`).
    pub lambda7: f64,
    /// Stratified samples per vertical entropy ray.
    pub entropy_samples: usize,
}

impl<T: Real> ObjectiveConfig<T> {
    fn weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        w.lambda[6] = self.lambda7;
        w
    }
}

/// Result of the photometric pass of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayOutcome<T> {
    /// Unweighted Charbonnier value.
    pub loss: T,
    pub rgb: [T; 3],
    /// Accumulated features seen by the shader; `None` when the ray missed
    /// the bounds.
    pub features: Option<[T; FEAT_IN]>,
}

/// Renders one ray and adds the gradient of `lambda_1 * charbonnier` to `grad`.
pub fn photometric<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    cfg: &ObjectiveConfig<T>,
    ray: &TrainRay<T>,
    rng: &mut R,
    grad: Option<&mut ModelGrad<T>>,
) -> Result<RayOutcome<T>> {
    let clipped = Ray::through(&model.scene.aabb, ray.origin, ray.dir)?;
    let tape = render_pixel(model, &cfg.render, clipped, rng)?;
    let (loss, g) = charbonnier(&tape.rgb, &ray.target, T::lit(cfg.weights.charbonnier_eps));
    if let Some(grad) = grad {
        let l1 = T::lit(cfg.weights.rgb());
        tape.backward(model, &cfg.render, &g.map(|v| v * l1), grad);
    }
    let features = tape.shade.as_ref().map(|_| tape.trace.features());
    Ok(RayOutcome { loss, rgb: tape.rgb, features })
}

/// Inputs the objective treats as constants: no gradient flows through the
/// shaded features seen by the smooth term or through the placement of the
/// sparsity points.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached<T> {
    /// Accumulated features and direction of each ray that hit the bounds.
    pub smooth_inputs: Vec<([T; FEAT_IN], Vec3<T>)>,
    /// `None` when the plane is fully closed.
    pub sparsity_points: Option<Vec<Vec3<T>>>,
}

/// `k` points uniform in the occupied region, from the sparsity stream.
pub fn sparsity_points<T: Real>(model: &Model<T>, k: usize, seed: u64) -> Option<Vec<Vec3<T>>> {
    let sampler = OccupiedSampler::new(&model.plane)?;
    let mut rng = stream_rng(seed, SPARSITY_STREAM);
    Some((0..k).map(|_| sampler.sample(&model.plane, &mut rng)).collect())
}

/// Occupancy, smooth, sparsity and entropy terms (unweighted values) with
/// weighted gradients added to `grad`. Sparsity and entropy are only
/// evaluated when their weight is positive.
pub fn regularizers<T: Real>(
    model: &Model<T>,
    cfg: &ObjectiveConfig<T>,
    detached: &Detached<T>,
    seed: u64,
    mut grad: Option<&mut ModelGrad<T>>,
) -> Result<LossParts<T>> {
    let w = cfg.weights();
    let mut parts = LossParts { occ: model.plane.occ_loss(), ..Default::default() };
    if let Some(g) = grad.as_deref_mut() {
        if w.occupancy() > 0.0 {
            model.plane.occ_loss_backward(T::lit(w.occupancy()), &mut g.plane);
        }
    }

    let inputs = &detached.smooth_inputs[..detached.smooth_inputs.len().min(w.smooth_rays)];
    let feats: Vec<[T; FEAT_IN]> = inputs.iter().map(|s| s.0).collect();
    let dirs: Vec<Vec3<T>> = inputs.iter().map(|s| s.1).collect();
    let sigma = T::lit(w.smooth_sigma);
    let mut rng = stream_rng(seed, SMOOTH_STREAM);
    match grad.as_deref_mut() {
        Some(g) if w.smooth() > 0.0 => {
            let mut tmp = alloc::vec![T::zero(); g.shader.len()];
            parts.smooth = smooth_loss(&model.shader, &feats, &dirs, sigma, &mut rng, Some(&mut tmp))?;
            let s = T::lit(w.smooth());
            for (a, b) in g.shader.iter_mut().zip(&tmp) {
                *a += s * *b;
            }
        }
        _ => parts.smooth = smooth_loss(&model.shader, &feats, &dirs, sigma, &mut rng, None)?,
    }

    if w.sparsity() > 0.0 {
        if let Some(points) = &detached.sparsity_points {
            let delta = sparsity_delta(&model.scene);
            match grad.as_deref_mut() {
                Some(g) => {
                    let mut tmp = SceneGrad::zeros_like(&model.scene);
                    parts.sparsity = sparsity_at(&model.scene, points, delta, Some(&mut tmp));
                    g.scene.add_scaled(&tmp, T::lit(w.sparsity()));
                }
                None => parts.sparsity = sparsity_at(&model.scene, points, delta, None),
            }
        }
    }

    if w.entropy() > 0.0 {
        let mut tmp = grad.as_ref().map(|_| ModelGrad::zeros_like(model));
        let mut rng = stream_rng(seed, ENTROPY_STREAM);
        let term =
            entropy_loss(&model.scene, &model.plane, w.entropy_rays, cfg.entropy_samples, &mut rng, tmp.as_mut())?;
        parts.entropy = term.value;
        if let (Some(g), Some(t)) = (grad.as_deref_mut(), tmp) {
            g.add_scaled(&t, T::lit(w.entropy()));
        }
    }
    Ok(parts)
}

/// Serial evaluation of the full weighted objective. Ray `i` samples from
/// stream `i` of `seed`. With `detached` given, those inputs are used instead
/// of being derived from `model`.
pub fn objective<T: Real>(
    model: &Model<T>,
    cfg: &ObjectiveConfig<T>,
    rays: &[TrainRay<T>],
    seed: u64,
    detached: Option<&Detached<T>>,
    mut grad: Option<&mut ModelGrad<T>>,
) -> Result<(T, LossParts<T>)> {
    let mut rgb = T::zero();
    let mut smooth_inputs = Vec::new();
    for (i, ray) in rays.iter().enumerate() {
        let out = photometric(model, cfg, ray, &mut stream_rng(seed, i as u64), grad.as_deref_mut())?;
        rgb += out.loss;
        if let Some(f) = out.features {
            smooth_inputs.push((f, ray.dir.normalized().unwrap_or(ray.dir)));
        }
    }
    let own;
    let detached = match detached {
        Some(d) => d,
        None => {
            own =
                Detached { smooth_inputs, sparsity_points: sparsity_points(model, cfg.weights.sparsity_samples, seed) };
            &own
        }
    };
    let mut parts = regularizers(model, cfg, detached, seed, grad)?;
    parts.rgb = rgb;
    let total = crate::losses::total_loss(&parts, &cfg.weights())?;
    Ok((total, parts))
}
