//! Differentiable training-time rendering.
//!
//! Rays are sampled on `[t_near, t_far]`; samples whose occupancy is exactly
//! zero are culled before any feature fetch. The occupancy value `M` scales
//! each sample's contribution and (by default) its share of the transmittance,
//! so a sample with `M = 0` neither contributes nor occludes. Accumulated
//! diffuse color and specular features go through the deferred shader once
//! per ray.

use alloc::vec::Vec;

use rand::Rng;

use crate::math::{Aabb, Real, Vec3};
use crate::occupancy::{OccupancyPlane, Ramp};
use crate::scene::{activate, activate_backward, ActivatedPoint, SceneGrad, SceneRepr, Stencil, FEATURES};
use crate::shader::{DeferredShader, ShaderCache, FEAT_IN, OUTPUT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit direction.
    pub dir: Vec3<T>,
    pub t_near: T,
    pub t_far: T,
}

impl<T: Real> Ray<T> {
    /// Clips `origin + t dir` against the bounds. `Ok(None)` when it misses;
    /// a zero direction is an error.
    pub fn through(aabb: &Aabb<T>, origin: Vec3<T>, dir: Vec3<T>) -> Result<Option<Self>> {
        let dir = dir.normalized().ok_or(Error::InvalidArgument("ray direction must be non-zero"))?;
        Ok(aabb.intersect(origin, dir).filter(|(t0, t1)| t1 > t0).map(|(t_near, t_far)| Self {
            origin,
            dir,
            t_near,
            t_far,
        }))
    }

    #[inline]
    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.dir * t
    }
}

/// One retained sample along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<T> {
    pub t: T,
    pub delta: T,
    pub pos: Vec3<T>,
    /// Flat index of the occupancy column the sample reads.
    pub cell: usize,
    pub ramp: Ramp<T>,
}

impl<T: Real> Sample<T> {
    #[inline]
    pub fn occupancy(&self) -> T {
        self.ramp.value
    }
}

fn retain_occupied<T: Real>(
    ray: &Ray<T>,
    plane: &OccupancyPlane<T>,
    ts: impl Iterator<Item = (T, T)>,
) -> Vec<Sample<T>> {
    ts.filter_map(|(t, delta)| {
        let pos = plane.aabb.clamp(ray.at(t));
        let cell = plane.cell_clamped(pos.x, pos.y);
        let ramp = plane.ramp_at_cell(cell, pos.z);
        (ramp.value > T::zero()).then_some(Sample { t, delta, pos, cell, ramp })
    })
    .collect()
}

fn spaced<T: Real>(ray: &Ray<T>, ts: Vec<T>) -> impl Iterator<Item = (T, T)> + '_ {
    let n = ts.len();
    (0..n).map(move |i| {
        let next = if i + 1 < n { ts[i + 1] } else { ray.t_far };
        (ts[i], next - ts[i])
    })
}

/// Stratified sampling: one uniform draw in each of `n` equal strata.
/// Spacing runs to the next stratified sample (last one to `t_far`) and is
/// fixed before culling.
pub fn sample_ray<T: Real, R: Rng + ?Sized>(
    ray: &Ray<T>,
    n: usize,
    plane: &OccupancyPlane<T>,
    rng: &mut R,
) -> Vec<Sample<T>> {
    if n == 0 {
        return Vec::new();
    }
    let width = (ray.t_far - ray.t_near) / T::lit(n as f64);
    let ts: Vec<T> = (0..n).map(|i| ray.t_near + (T::lit(i as f64) + T::lit(rng.random::<f64>())) * width).collect();
    retain_occupied(ray, plane, spaced(ray, ts))
}

/// Deterministic stratum-midpoint sampling.
pub fn sample_ray_midpoints<T: Real>(ray: &Ray<T>, n: usize, plane: &OccupancyPlane<T>) -> Vec<Sample<T>> {
    if n == 0 {
        return Vec::new();
    }
    let width = (ray.t_far - ray.t_near) / T::lit(n as f64);
    let ts: Vec<T> = (0..n).map(|i| ray.t_near + (T::lit(i as f64) + T::lit(0.5)) * width).collect();
    retain_occupied(ray, plane, spaced(ray, ts))
}

/// Fixed-step lattice `t_near + j * step` with spacing `step`, the same lattice
/// the baked marcher walks.
pub fn sample_ray_fixed_step<T: Real>(ray: &Ray<T>, step: T, plane: &OccupancyPlane<T>) -> Vec<Sample<T>> {
    let count = ((ray.t_far - ray.t_near) / step).ceil().to_usize().unwrap_or(0);
    let ts = (0..count).map(|j| (ray.t_near + T::lit(j as f64) * step, step)).filter(|(t, _)| *t < ray.t_far);
    retain_occupied(ray, plane, ts)
}

/// Per-sample input to [`composite`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompositeSample<T> {
    pub density: T,
    pub delta: T,
    pub occupancy: T,
    pub diffuse: [T; 3],
    pub specular: [T; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTrace<T> {
    pub alpha: Vec<T>,
    /// `n + 1` entries; the last is the transmittance left after the ray.
    pub transmittance: Vec<T>,
    /// `T_i * alpha_i`.
    pub weight: Vec<T>,
    pub occupancy: Vec<T>,
    pub diffuse: [T; 3],
    pub specular: [T; 4],
    /// `sum_i M_i * w_i`.
    pub total_weight: T,
    pub occupancy_in_transmittance: bool,
}

impl<T: Real> CompositeTrace<T> {
    /// `[diffuse, specular]`, the shader's feature input.
    pub fn features(&self) -> [T; FEAT_IN] {
        let (d, s) = (self.diffuse, self.specular);
        [d[0], d[1], d[2], s[0], s[1], s[2], s[3]]
    }

    pub fn contribution(&self, i: usize) -> T {
        self.occupancy[i] * self.weight[i]
    }

    pub fn final_transmittance(&self) -> T {
        *self.transmittance.last().unwrap()
    }
}

/// Alpha compositing with occupancy multipliers.
pub fn composite<T: Real>(samples: &[CompositeSample<T>], occupancy_in_transmittance: bool) -> CompositeTrace<T> {
    let n = samples.len();
    let mut tr = CompositeTrace {
        alpha: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n + 1),
        weight: Vec::with_capacity(n),
        occupancy: Vec::with_capacity(n),
        diffuse: [T::zero(); 3],
        specular: [T::zero(); 4],
        total_weight: T::zero(),
        occupancy_in_transmittance,
    };
    let mut t = T::one();
    for s in samples {
        let alpha = T::one() - (-s.density * s.delta).exp();
        let w = t * alpha;
        let contrib = s.occupancy * w;
        for c in 0..3 {
            tr.diffuse[c] += contrib * s.diffuse[c];
        }
        for c in 0..4 {
            tr.specular[c] += contrib * s.specular[c];
        }
        tr.total_weight += contrib;
        tr.alpha.push(alpha);
        tr.transmittance.push(t);
        tr.weight.push(w);
        tr.occupancy.push(s.occupancy);
        let absorbed = if occupancy_in_transmittance { s.occupancy * alpha } else { alpha };
        t = t * (T::one() - absorbed);
    }
    tr.transmittance.push(t);
    tr
}

/// Gradient of a scalar loss with respect to one [`CompositeSample`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompositeGrad<T> {
    pub density: T,
    pub occupancy: T,
    pub diffuse: [T; 3],
    pub specular: [T; 4],
}

/// Adjoint of [`composite`] given gradients on the accumulated diffuse,
/// specular feature and total weight.
pub fn composite_backward<T: Real>(
    samples: &[CompositeSample<T>],
    trace: &CompositeTrace<T>,
    g_diffuse: &[T; 3],
    g_specular: &[T; 4],
    g_weight: T,
) -> Vec<CompositeGrad<T>> {
    let n = samples.len();
    let score = |s: &CompositeSample<T>| -> T {
        let mut v = g_weight;
        for c in 0..3 {
            v += g_diffuse[c] * s.diffuse[c];
        }
        for c in 0..4 {
            v += g_specular[c] * s.specular[c];
        }
        v
    };
    let mut out = alloc::vec![CompositeGrad::default(); n];
    // q = sum over later samples of their (transmittance-relative) contribution.
    let mut q = T::zero();
    for i in (0..n).rev() {
        let s = &samples[i];
        let (alpha, t, m) = (trace.alpha[i], trace.transmittance[i], s.occupancy);
        let si = score(s);
        let w = trace.weight[i] * m;
        let (d_alpha, d_m) = if trace.occupancy_in_transmittance {
            (m * t * (si - q), alpha * t * (si - q))
        } else {
            (m * t * si - t * q, alpha * t * si)
        };
        let g = &mut out[i];
        g.density = d_alpha * s.delta * (T::one() - alpha);
        g.occupancy = d_m;
        for c in 0..3 {
            g.diffuse[c] = w * g_diffuse[c];
        }
        for c in 0..4 {
            g.specular[c] = w * g_specular[c];
        }
        let absorbed = if trace.occupancy_in_transmittance { m * alpha } else { alpha };
        q = m * alpha * si + (T::one() - absorbed) * q;
    }
    out
}

#[derive(Debug, Clone)]
pub struct ShadeResult<T> {
    pub rgb: [T; 3],
    /// Color before the final `[0, 1]` clamp.
    pub raw: [T; 3],
    pub cache: ShaderCache<T>,
}

/// Deferred shading of a composited ray.
///
/// Without a background this is `clamp(diffuse + G(F, d), 0, 1)`. With one,
/// the specular term is weighted by the ray's total weight `W` and the
/// background fills the rest: `clamp(diffuse + W G + (1 - W) bg, 0, 1)`, so a
/// ray that hits nothing returns exactly the background.
pub fn deferred_shade<T: Real>(
    trace: &CompositeTrace<T>,
    dir: Vec3<T>,
    shader: &DeferredShader<T>,
    background: Option<[T; 3]>,
) -> Result<ShadeResult<T>> {
    let cache = shader.eval(&trace.features(), dir)?;
    let w = trace.total_weight;
    let mut raw = [T::zero(); 3];
    for c in 0..3 {
        raw[c] = match background {
            None => trace.diffuse[c] + cache.out[c],
            Some(bg) => trace.diffuse[c] + w * cache.out[c] + (T::one() - w) * bg[c],
        };
    }
    let rgb = raw.map(|v| v.max(T::zero()).min(T::one()));
    Ok(ShadeResult { rgb, raw, cache })
}

/// Gradients flowing out of [`deferred_shade`] into the composite trace.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceGrad<T> {
    pub diffuse: [T; 3],
    pub specular: [T; 4],
    pub total_weight: T,
}

/// Adjoint of [`deferred_shade`]. Shader parameter gradients are added into
/// `g_shader`.
pub fn deferred_shade_backward<T: Real>(
    trace: &CompositeTrace<T>,
    shade: &ShadeResult<T>,
    shader: &DeferredShader<T>,
    background: Option<[T; 3]>,
    g_rgb: &[T; 3],
    g_shader: &mut [T],
) -> TraceGrad<T> {
    let mut g_raw = [T::zero(); 3];
    for c in 0..3 {
        if shade.raw[c] >= T::zero() && shade.raw[c] <= T::one() {
            g_raw[c] = g_rgb[c];
        }
    }
    let mut out = TraceGrad { diffuse: g_raw, ..Default::default() };
    let g_spec_out: [T; OUTPUT] = match background {
        None => g_raw,
        Some(bg) => {
            let w = trace.total_weight;
            for c in 0..3 {
                out.total_weight += g_raw[c] * (shade.cache.out[c] - bg[c]);
            }
            g_raw.map(|g| g * w)
        }
    };
    let g_in = shader.backward(&shade.cache, &g_spec_out, g_shader);
    for c in 0..3 {
        out.diffuse[c] += g_in[c];
    }
    out.specular.copy_from_slice(&g_in[3..FEAT_IN]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig<T> {
    pub n_samples: usize,
    pub background: [T; 3],
    pub occupancy_in_transmittance: bool,
}

impl<T: Real> Default for RenderConfig<T> {
    fn default() -> Self {
        Self { n_samples: 256, background: [T::lit(0.5); 3], occupancy_in_transmittance: true }
    }
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub scene: SceneRepr<T>,
    pub plane: OccupancyPlane<T>,
    pub shader: DeferredShader<T>,
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        Model {
            scene: SceneRepr {
                aabb: self.scene.aabb.cast(),
                grid_res: self.scene.grid_res,
                plane_res: self.scene.plane_res,
                grid: c(&self.scene.grid),
                planes: [c(&self.scene.planes[0]), c(&self.scene.planes[1]), c(&self.scene.planes[2])],
            },
            plane: self.plane.cast(),
            shader: DeferredShader { params: c(&self.shader.params) },
        }
    }
}

/// Gradient buffers for every parameter group of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad<T> {
    pub scene: SceneGrad<T>,
    pub plane: Vec<T>,
    pub shader: Vec<T>,
}

impl<T: Real> ModelGrad<T> {
    pub fn zeros_like(m: &Model<T>) -> Self {
        Self {
            scene: SceneGrad::zeros_like(&m.scene),
            plane: alloc::vec![T::zero(); m.plane.heights.len()],
            shader: alloc::vec![T::zero(); m.shader.params.len()],
        }
    }

    pub fn clear(&mut self) {
        self.scene.clear();
        self.plane.iter_mut().for_each(|v| *v = T::zero());
        self.shader.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn add_assign(&mut self, o: &Self) {
        self.scene.add_assign(&o.scene);
        for (a, b) in self.plane.iter_mut().zip(&o.plane) {
            *a += *b;
        }
        for (a, b) in self.shader.iter_mut().zip(&o.shader) {
            *a += *b;
        }
    }

    /// `self += s * o`.
    pub fn add_scaled(&mut self, o: &Self, s: T) {
        self.scene.add_scaled(&o.scene, s);
        for (a, b) in self.plane.iter_mut().zip(&o.plane) {
            *a += s * *b;
        }
        for (a, b) in self.shader.iter_mut().zip(&o.shader) {
            *a += s * *b;
        }
    }

    /// Adds the occupancy-ramp part of a sample's gradient.
    #[inline]
    pub fn add_occupancy(&mut self, sample: &Sample<T>, g_occupancy: T) {
        self.plane[2 * sample.cell] += g_occupancy * sample.ramp.d_zmin;
        self.plane[2 * sample.cell + 1] += g_occupancy * sample.ramp.d_zmax;
    }
}

/// Everything a rendered pixel needs for its backward pass.
#[derive(Debug, Clone)]
pub struct PixelTape<T> {
    pub ray: Option<Ray<T>>,
    pub samples: Vec<Sample<T>>,
    pub stencils: Vec<Stencil<T>>,
    pub activated: Vec<ActivatedPoint<T>>,
    pub points: Vec<CompositeSample<T>>,
    pub trace: CompositeTrace<T>,
    pub shade: Option<ShadeResult<T>>,
    pub rgb: [T; 3],
}

/// Renders one pixel with stratified sampling.
pub fn render_pixel<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    cfg: &RenderConfig<T>,
    ray: Option<Ray<T>>,
    rng: &mut R,
) -> Result<PixelTape<T>> {
    let samples = match &ray {
        Some(r) => sample_ray(r, cfg.n_samples, &model.plane, rng),
        None => Vec::new(),
    };
    render_samples(model, cfg, ray, samples)
}

/// Renders one pixel from already placed samples.
pub fn render_samples<T: Real>(
    model: &Model<T>,
    cfg: &RenderConfig<T>,
    ray: Option<Ray<T>>,
    samples: Vec<Sample<T>>,
) -> Result<PixelTape<T>> {
    let mut stencils = Vec::with_capacity(samples.len());
    let mut activated = Vec::with_capacity(samples.len());
    let mut points = Vec::with_capacity(samples.len());
    for s in &samples {
        let st = model.scene.stencil(s.pos);
        let fv = crate::scene::FeatureVector::from_array(model.scene.gather(&st));
        let act = activate(&fv);
        points.push(CompositeSample {
            density: act.density,
            delta: s.delta,
            occupancy: s.occupancy(),
            diffuse: act.diffuse,
            specular: act.specular,
        });
        stencils.push(st);
        activated.push(act);
    }
    let trace = composite(&points, cfg.occupancy_in_transmittance);
    let (shade, rgb) = match &ray {
        Some(r) => {
            let sh = deferred_shade(&trace, r.dir, &model.shader, Some(cfg.background))?;
            let rgb = sh.rgb;
            (Some(sh), rgb)
        }
        None => (None, cfg.background),
    };
    Ok(PixelTape { ray, samples, stencils, activated, points, trace, shade, rgb })
}

impl<T: Real> PixelTape<T> {
    /// Accumulates `d (g_rgb . rgb) / d params` into `grad`.
    pub fn backward(&self, model: &Model<T>, cfg: &RenderConfig<T>, g_rgb: &[T; 3], grad: &mut ModelGrad<T>) {
        let Some(shade) = &self.shade else { return };
        let tg =
            deferred_shade_backward(&self.trace, shade, &model.shader, Some(cfg.background), g_rgb, &mut grad.shader);
        self.backward_from_trace(&tg, grad);
    }

    /// Backward pass starting from gradients on the composite trace.
    pub fn backward_from_trace(&self, tg: &TraceGrad<T>, grad: &mut ModelGrad<T>) {
        let per_sample = composite_backward(&self.points, &self.trace, &tg.diffuse, &tg.specular, tg.total_weight);
        for (i, g) in per_sample.iter().enumerate() {
            let g_act = ActivatedPoint { density: g.density, diffuse: g.diffuse, specular: g.specular };
            let g_logits = activate_backward(&self.activated[i], &g_act).to_array();
            grad.scene.scatter(&self.stencils[i], &g_logits);
            grad.add_occupancy(&self.samples[i], g.occupancy);
        }
    }
}

/// Feature-array view used by the gradient checker.
pub fn feature_logits<T: Real>(scene: &SceneRepr<T>, p: Vec3<T>) -> [T; FEATURES] {
    scene.gather(&scene.stencil(p))
}
