//! Central finite-difference checks of the hand-written adjoints.
//!
//! Each [`Component`] builds small random instances in `f64`, evaluates a
//! scalar through the forward code, and compares every checked analytic
//! partial against `(f(x + h) - f(x - h)) / 2h` with `h = 1e-4`.
//!
//! The functions are only piecewise smooth (ReLU, clamps, ramp ends, nearest
//! cell lookups). An entry whose analytic and numeric values disagree is
//! re-differenced with `h / 2`; if the two numeric estimates disagree the
//! instance straddles a kink and is rejected as a whole. A wrong adjoint
//! still fails, since there the numeric estimates agree with each other.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

#[allow(unused_imports)] // f64 math without std
use num_traits::Float;

use crate::losses::{
    charbonnier, entropy_loss, perturb_direction, smooth_term, sparsity_at, sparsity_delta, LossWeights,
};
use crate::math::{Aabb, Vec3};
use crate::objective::{objective, sparsity_points, stream_rng, Detached, ObjectiveConfig, TrainRay};
use crate::occupancy::{ramp, OccupancyPlane};
use crate::render::{
    composite, composite_backward, deferred_shade, deferred_shade_backward, CompositeSample, CompositeTrace, Model,
    ModelGrad, RenderConfig,
};
use crate::scene::{activate, activate_backward, ActivatedPoint, FeatureVector, SceneGrad, SceneRepr, FEATURES};
use crate::shader::{DeferredShader, FEAT_IN, OUTPUT};
use crate::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely.
pub const FLOOR: f64 = 1e-6;
/// Disagreement between the `h` and `h / 2` estimates that marks a kink.
const KINK: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    /// Grid and plane interpolation, with respect to parameters and point.
    QueryFeatures,
    Activate,
    /// Ramp value with respect to the interval ends.
    Occupancy,
    Composite,
    DeferredShade,
    Charbonnier,
    Smooth,
    Sparsity,
    Entropy,
    OccLoss,
    /// The full weighted objective on a tiny model (L = 4, R = 8, M = 4,
    /// two rays of eight samples), with the detached inputs held fixed.
    Pipeline,
}

impl Component {
    pub const ALL: [Component; 11] = [
        Component::QueryFeatures,
        Component::Activate,
        Component::Occupancy,
        Component::Composite,
        Component::DeferredShade,
        Component::Charbonnier,
        Component::Smooth,
        Component::Sparsity,
        Component::Entropy,
        Component::OccLoss,
        Component::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::QueryFeatures => "query_features",
            Component::Activate => "activate",
            Component::Occupancy => "occupancy",
            Component::Composite => "composite",
            Component::DeferredShade => "deferred_shade",
            Component::Charbonnier => "rgb_loss",
            Component::Smooth => "smooth_loss",
            Component::Sparsity => "sparsity_loss",
            Component::Entropy => "entropy_loss",
            Component::OccLoss => "occ_loss",
            Component::Pipeline => "pipeline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub component: Component,
    /// Accepted instances.
    pub configs: usize,
    /// Instances rejected for straddling a kink.
    pub rejected: usize,
    /// Partial derivatives compared.
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, wanted: usize) -> bool {
        self.configs >= wanted && self.max_rel_error <= TOLERANCE
    }
}

/// Checks `component` on `configs` accepted random instances derived from
/// `seed`. At most `4 * configs` instances are drawn.
pub fn grad_check(component: Component, seed: u64, configs: usize) -> Result<GradCheckReport> {
    let mut rep = GradCheckReport { component, configs: 0, rejected: 0, entries: 0, max_rel_error: 0.0 };
    let mut attempt = 0u64;
    while rep.configs < configs && attempt < 4 * configs as u64 {
        let mut rng = stream_rng(seed, attempt);
        attempt += 1;
        let mut acc = Acc::default();
        let ok = match component {
            Component::QueryFeatures => query_features(&mut rng, &mut acc)?,
            Component::Activate => activation(&mut rng, &mut acc)?,
            Component::Occupancy => occupancy(&mut rng, &mut acc)?,
            Component::Composite => compositing(&mut rng, &mut acc)?,
            Component::DeferredShade => shading(&mut rng, &mut acc)?,
            Component::Charbonnier => rgb(&mut rng, &mut acc)?,
            Component::Smooth => smooth(&mut rng, &mut acc)?,
            Component::Sparsity => sparsity(&mut rng, &mut acc)?,
            Component::Entropy => entropy(&mut rng, &mut acc)?,
            Component::OccLoss => occ(&mut rng, &mut acc)?,
            Component::Pipeline => pipeline(&mut rng, &mut acc)?,
        };
        if ok {
            rep.configs += 1;
            rep.entries += acc.entries;
            rep.max_rel_error = rep.max_rel_error.max(acc.max_rel);
        } else {
            rep.rejected += 1;
        }
    }
    Ok(rep)
}

#[derive(Default)]
struct Acc {
    max_rel: f64,
    entries: usize,
}

fn central<S>(
    state: &mut S,
    access: fn(&mut S, usize) -> &mut f64,
    i: usize,
    h: f64,
    f: &dyn Fn(&S) -> Result<f64>,
) -> Result<f64> {
    let x0 = *access(state, i);
    let (xp, xm) = (x0 + h, x0 - h);
    *access(state, i) = xp;
    let fp = f(state)?;
    *access(state, i) = xm;
    let fm = f(state)?;
    *access(state, i) = x0;
    Ok((fp - fm) / (xp - xm))
}

/// Compares the analytic partials at `slots`; `false` means a kink was hit.
fn compare<S>(
    acc: &mut Acc,
    state: &mut S,
    access: fn(&mut S, usize) -> &mut f64,
    slots: &[usize],
    analytic: &[f64],
    f: &dyn Fn(&S) -> Result<f64>,
) -> Result<bool> {
    for &i in slots {
        let n = central(state, access, i, STEP, f)?;
        let mut e = rel_error(analytic[i], n);
        if e > TOLERANCE {
            let n2 = central(state, access, i, STEP / 2.0, f)?;
            if rel_error(n, n2) > KINK {
                return Ok(false);
            }
            e = e.min(rel_error(analytic[i], n2));
        }
        acc.max_rel = acc.max_rel.max(e);
        acc.entries += 1;
    }
    Ok(true)
}

fn vec_slot(v: &mut Vec<f64>, i: usize) -> &mut f64 {
    &mut v[i]
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3<f64> {
    loop {
        let v = Vec3::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn bounds() -> Aabb<f64> {
    Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).expect("valid bounds")
}

fn random_shader<R: Rng + ?Sized>(rng: &mut R) -> DeferredShader<f64> {
    let mut sh = DeferredShader::init(rng);
    let b: [f64; OUTPUT] = core::array::from_fn(|_| uniform(rng, -1.0, 1.0));
    sh.set_output_bias(b);
    sh
}

fn random_model<R: Rng + ?Sized>(rng: &mut R) -> Result<Model<f64>> {
    let aabb = bounds();
    let mut scene = SceneRepr::zeros(aabb, 4, 8)?;
    for v in scene.grid.iter_mut().chain(scene.planes.iter_mut().flatten()) {
        *v = uniform(rng, -0.5, 0.5);
    }
    for c in scene.grid.chunks_exact_mut(FEATURES) {
        c[0] += 0.5;
    }
    let mut plane = OccupancyPlane::open(aabb, 4, 0.1)?;
    for h in plane.heights.chunks_exact_mut(2) {
        h[0] = uniform(rng, 0.0, 0.45);
        h[1] = uniform(rng, 0.55, 1.0);
    }
    Ok(Model { scene, plane, shader: random_shader(rng) })
}

/// Flat parameter order: grid, planes x/y/z, heights, shader.
fn model_slot(m: &mut Model<f64>, mut i: usize) -> &mut f64 {
    if i < m.scene.grid.len() {
        return &mut m.scene.grid[i];
    }
    i -= m.scene.grid.len();
    for k in 0..3 {
        if i < m.scene.planes[k].len() {
            return &mut m.scene.planes[k][i];
        }
        i -= m.scene.planes[k].len();
    }
    if i < m.plane.heights.len() {
        return &mut m.plane.heights[i];
    }
    i -= m.plane.heights.len();
    &mut m.shader.params[i]
}

fn flat(g: &ModelGrad<f64>) -> Vec<f64> {
    let mut v = g.scene.grid.clone();
    for p in &g.scene.planes {
        v.extend_from_slice(p);
    }
    v.extend_from_slice(&g.plane);
    v.extend_from_slice(&g.shader);
    v
}

/// Per parameter group: up to 64 entries with a non-zero analytic partial
/// plus 16 arbitrary ones (to catch missing gradient), or the whole group
/// when it is small.
fn pick<R: Rng + ?Sized>(rng: &mut R, m: &Model<f64>, analytic: &[f64]) -> Vec<usize> {
    let sizes = [
        m.scene.grid.len(),
        m.scene.planes[0].len(),
        m.scene.planes[1].len(),
        m.scene.planes[2].len(),
        m.plane.heights.len(),
        m.shader.params.len(),
    ];
    let mut out = Vec::new();
    let mut start = 0;
    for n in sizes {
        if n <= 96 {
            out.extend(start..start + n);
        } else {
            let mut nz: Vec<usize> = (start..start + n).filter(|&i| analytic[i] != 0.0).collect();
            while nz.len() > 64 {
                let k = rng.random_range(0..nz.len());
                nz.swap_remove(k);
            }
            out.extend(nz);
            out.extend((0..16).map(|_| start + rng.random_range(0..n)));
        }
        start += n;
    }
    out
}

fn near_node(p: f64, lo: f64, ext: f64, res: usize) -> bool {
    let u = (p - lo) / ext * (res - 1) as f64;
    (u - u.round()).abs() < 1e-3
}

fn query_features<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let mut m = random_model(rng)?;
    let b = m.scene.aabb;
    let p = Vec3::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, 0.0, 1.0));
    let g: [f64; FEATURES] = core::array::from_fn(|_| uniform(rng, -1.0, 1.0));
    for res in [m.scene.grid_res, m.scene.plane_res] {
        if (0..3).any(|a| near_node(p[a], b.lo[a], b.extent()[a], res)) {
            return Ok(false);
        }
    }
    let dot = |f: FeatureVector<f64>| f.to_array().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();

    let mut grad = ModelGrad::zeros_like(&m);
    grad.scene.scatter(&m.scene.stencil(p), &g);
    let analytic = flat(&grad);
    let slots = pick(rng, &m, &analytic);
    let f = |m: &Model<f64>| Ok(dot(m.scene.query_features(p)?));
    if !compare(acc, &mut m, model_slot, &slots, &analytic, &f)? {
        return Ok(false);
    }

    let gp = m.scene.query_point_grad(p, &g)?;
    let mut x = vec![p.x, p.y, p.z];
    let f = |x: &Vec<f64>| Ok(dot(m.scene.query_features(Vec3::new(x[0], x[1], x[2]))?));
    compare(acc, &mut x, vec_slot, &all(3), &gp.to_array(), &f)
}

fn activated_array(a: &ActivatedPoint<f64>) -> [f64; FEATURES] {
    let (d, s) = (a.diffuse, a.specular);
    [a.density, d[0], d[1], d[2], s[0], s[1], s[2], s[3]]
}

fn activation<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let mut x: Vec<f64> = (0..FEATURES).map(|_| uniform(rng, -3.0, 3.0)).collect();
    let g: [f64; FEATURES] = core::array::from_fn(|_| uniform(rng, -1.0, 1.0));
    let fv = |x: &Vec<f64>| FeatureVector::from_array(core::array::from_fn(|i| x[i]));
    let act = activate(&fv(&x));
    let g_act = ActivatedPoint { density: g[0], diffuse: [g[1], g[2], g[3]], specular: [g[4], g[5], g[6], g[7]] };
    let analytic = activate_backward(&act, &g_act).to_array();
    let f = |x: &Vec<f64>| Ok(activated_array(&activate(&fv(x))).iter().zip(&g).map(|(a, b)| a * b).sum());
    compare(acc, &mut x, vec_slot, &all(FEATURES), &analytic, &f)
}

fn occupancy<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let eps = uniform(rng, 0.05, 0.3);
    let q = if rng.random_bool(0.5) { 2.0 } else { uniform(rng, 1.5, 3.0) };
    let zmin = uniform(rng, 0.0, 0.5);
    let zmax = zmin + uniform(rng, 0.0, 4.0 * eps);
    let z = uniform(rng, zmin - 0.1 * eps, zmax + 0.1 * eps);
    let r = ramp(z, zmin, zmax, eps, q);
    let mut x = vec![zmin, zmax];
    let f = |x: &Vec<f64>| Ok(ramp(z, x[0], x[1], eps, q).value);
    compare(acc, &mut x, vec_slot, &all(2), &[r.d_zmin, r.d_zmax], &f)
}

const PER_SAMPLE: usize = 9;

fn to_samples(x: &[f64], deltas: &[f64]) -> Vec<CompositeSample<f64>> {
    x.chunks_exact(PER_SAMPLE)
        .zip(deltas)
        .map(|(c, &delta)| CompositeSample {
            density: c[0],
            delta,
            occupancy: c[1],
            diffuse: [c[2], c[3], c[4]],
            specular: [c[5], c[6], c[7], c[8]],
        })
        .collect()
}

fn compositing<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let n = rng.random_range(1..=8);
    let flag = rng.random_bool(0.75);
    let deltas: Vec<f64> = (0..n).map(|_| uniform(rng, 0.01, 0.3)).collect();
    let mut x = Vec::with_capacity(n * PER_SAMPLE);
    for _ in 0..n {
        x.push(uniform(rng, 0.0, 5.0));
        x.push(uniform(rng, 0.0, 1.0));
        x.extend((0..7).map(|_| uniform(rng, 0.0, 1.0)));
    }
    let gd: [f64; 3] = core::array::from_fn(|_| uniform(rng, -1.0, 1.0));
    let gs: [f64; 4] = core::array::from_fn(|_| uniform(rng, -1.0, 1.0));
    let gw = uniform(rng, -1.0, 1.0);
    let score = |t: &CompositeTrace<f64>| {
        (0..3).map(|c| gd[c] * t.diffuse[c]).sum::<f64>()
            + (0..4).map(|c| gs[c] * t.specular[c]).sum::<f64>()
            + gw * t.total_weight
    };
    let samples = to_samples(&x, &deltas);
    let trace = composite(&samples, flag);
    let mut analytic = Vec::with_capacity(x.len());
    for g in composite_backward(&samples, &trace, &gd, &gs, gw) {
        analytic.push(g.density);
        analytic.push(g.occupancy);
        analytic.extend_from_slice(&g.diffuse);
        analytic.extend_from_slice(&g.specular);
    }
    let f = |x: &Vec<f64>| Ok(score(&composite(&to_samples(x, &deltas), flag)));
    let slots = all(x.len());
    compare(acc, &mut x, vec_slot, &slots, &analytic, &f)
}

/// Shading state: accumulated diffuse (3), specular (4), total weight, then
/// shader parameters.
fn shading_trace(x: &[f64]) -> CompositeTrace<f64> {
    CompositeTrace {
        alpha: Vec::new(),
        transmittance: vec![1.0 - x[7]],
        weight: Vec::new(),
        occupancy: Vec::new(),
        diffuse: [x[0], x[1], x[2]],
        specular: [x[3], x[4], x[5], x[6]],
        total_weight: x[7],
        occupancy_in_transmittance: true,
    }
}

fn shading<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let sh = random_shader(rng);
    let mut x: Vec<f64> = (0..3).map(|_| uniform(rng, 0.0, 0.6)).collect();
    x.extend((0..4).map(|_| uniform(rng, 0.0, 1.0)));
    x.push(uniform(rng, 0.0, 1.0));
    x.extend_from_slice(&sh.params);
    let dir = unit(rng);
    let bg = rng.random_bool(0.5).then(|| core::array::from_fn::<f64, 3, _>(|_| uniform(rng, 0.0, 1.0)));
    let g: [f64; 3] = core::array::from_fn(|_| uniform(rng, -1.0, 1.0));

    let trace = shading_trace(&x);
    let shade = deferred_shade(&trace, dir, &sh, bg)?;
    let mut g_shader = vec![0.0; sh.params.len()];
    let tg = deferred_shade_backward(&trace, &shade, &sh, bg, &g, &mut g_shader);
    let mut analytic = tg.diffuse.to_vec();
    analytic.extend_from_slice(&tg.specular);
    analytic.push(tg.total_weight);
    analytic.extend_from_slice(&g_shader);

    let f = |x: &Vec<f64>| {
        let sh = DeferredShader { params: x[FEAT_IN + 1..].to_vec() };
        let rgb = deferred_shade(&shading_trace(x), dir, &sh, bg)?.rgb;
        Ok((0..3).map(|c| g[c] * rgb[c]).sum())
    };
    let slots = all(x.len());
    compare(acc, &mut x, vec_slot, &slots, &analytic, &f)
}

fn rgb<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let truth: Vec<[f64; 3]> = (0..2).map(|_| core::array::from_fn(|_| uniform(rng, 0.0, 1.0))).collect();
    let mut x: Vec<f64> = (0..6).map(|_| uniform(rng, 0.0, 1.0)).collect();
    let eps = LossWeights::default().charbonnier_eps;
    let pred = |x: &Vec<f64>| -> Vec<[f64; 3]> { x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let analytic: Vec<f64> = pred(&x).iter().zip(&truth).flat_map(|(p, t)| charbonnier(p, t, eps).1).collect();
    let f = |x: &Vec<f64>| crate::losses::rgb_loss(&pred(x), &truth, eps);
    compare(acc, &mut x, vec_slot, &all(6), &analytic, &f)
}

fn smooth<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let sh = random_shader(rng);
    let feat: [f64; FEAT_IN] = core::array::from_fn(|_| uniform(rng, 0.0, 1.0));
    let d = unit(rng);
    let s = perturb_direction(d, crate::losses::SMOOTH_SIGMA, rng);
    let mut analytic = vec![0.0; sh.params.len()];
    smooth_term(&sh, &feat, d, s, Some(&mut analytic))?;
    let mut x = sh.params.clone();
    let f = |x: &Vec<f64>| smooth_term(&DeferredShader { params: x.clone() }, &feat, d, s, None);
    let slots = all(x.len());
    compare(acc, &mut x, vec_slot, &slots, &analytic, &f)
}

fn sparsity<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let mut m = random_model(rng)?;
    let pts: Vec<Vec3<f64>> =
        (0..8).map(|_| Vec3::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, 0.0, 1.0))).collect();
    let delta = sparsity_delta(&m.scene);
    let mut grad = ModelGrad::zeros_like(&m);
    sparsity_at(&m.scene, &pts, delta, Some(&mut grad.scene));
    let analytic = flat(&grad);
    let slots = pick(rng, &m, &analytic);
    let f = |m: &Model<f64>| Ok(sparsity_at(&m.scene, &pts, delta, None));
    compare(acc, &mut m, model_slot, &slots, &analytic, &f)
}

fn entropy<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let mut m = random_model(rng)?;
    let seed: u64 = rng.random();
    let mut grad = ModelGrad::zeros_like(&m);
    let t = entropy_loss(&m.scene, &m.plane, 2, 8, &mut stream_rng(seed, 0), Some(&mut grad))?;
    if t.degenerate {
        return Ok(false);
    }
    let analytic = flat(&grad);
    let slots = pick(rng, &m, &analytic);
    let f = |m: &Model<f64>| Ok(entropy_loss(&m.scene, &m.plane, 2, 8, &mut stream_rng(seed, 0), None)?.value);
    compare(acc, &mut m, model_slot, &slots, &analytic, &f)
}

fn occ<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let m = random_model(rng)?;
    let mut x = m.plane.heights.clone();
    let mut analytic = vec![0.0; x.len()];
    m.plane.occ_loss_backward(1.0, &mut analytic);
    let plane = m.plane.clone();
    let f = |x: &Vec<f64>| {
        let mut p = plane.clone();
        p.heights.copy_from_slice(x);
        Ok(p.occ_loss())
    };
    let slots = all(x.len());
    compare(acc, &mut x, vec_slot, &slots, &analytic, &f)
}

/// Objective configuration used by the pipeline check: every in-scope term
/// active with order-one weights, tiny sample counts.
pub fn pipeline_config() -> ObjectiveConfig<f64> {
    let weights = LossWeights {
        lambda: [1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.5],
        smooth_rays: 2,
        entropy_rays: 2,
        sparsity_samples: 8,
        ..Default::default()
    };
    ObjectiveConfig {
        render: RenderConfig { n_samples: 8, ..Default::default() },
        weights,
        lambda7: 0.5,
        entropy_samples: 8,
    }
}

fn pipeline<R: Rng + ?Sized>(rng: &mut R, acc: &mut Acc) -> Result<bool> {
    let mut m = random_model(rng)?;
    let mut cfg = pipeline_config();
    cfg.render.occupancy_in_transmittance = rng.random_bool(0.75);
    let rays: Vec<TrainRay<f64>> = (0..2)
        .map(|_| {
            let target = Vec3::new(uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8), uniform(rng, 0.0, 0.5));
            let origin = target + Vec3::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), 2.0);
            let dir = (target - origin).normalized().expect("non-zero");
            TrainRay { origin, dir, target: core::array::from_fn(|_| uniform(rng, 0.0, 1.0)) }
        })
        .collect();
    let seed: u64 = rng.random();
    let mut smooth_inputs = Vec::new();
    for (i, r) in rays.iter().enumerate() {
        if let Some(f) = crate::objective::photometric(&m, &cfg, r, &mut stream_rng(seed, i as u64), None)?.features {
            smooth_inputs.push((f, r.dir));
        }
    }
    let det = Detached { smooth_inputs, sparsity_points: sparsity_points(&m, cfg.weights.sparsity_samples, seed) };
    let mut grad = ModelGrad::zeros_like(&m);
    objective(&m, &cfg, &rays, seed, Some(&det), Some(&mut grad))?;
    let analytic = flat(&grad);
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite analytic gradient"));
    }
    let slots = pick(rng, &m, &analytic);
    let f = |m: &Model<f64>| Ok(objective(m, &cfg, &rays, seed, Some(&det), None)?.0);
    compare(acc, &mut m, model_slot, &slots, &analytic, &f)
}

/// Scene gradient of `g . features(p)`; a convenience for tests.
pub fn scatter_query(scene: &SceneRepr<f64>, p: Vec3<f64>, g: &[f64; FEATURES]) -> SceneGrad<f64> {
    let mut out = SceneGrad::zeros_like(scene);
    out.scatter(&scene.stencil(p), g);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn every_component_passes_a_few_configs() {
        for c in Component::ALL {
            let r = grad_check(c, 11, 5).unwrap();
            assert!(r.passed(5), "{r:?}");
            assert!(r.entries > 0);
        }
    }

    #[test]
    fn a_wrong_adjoint_is_caught() {
        let mut acc = Acc::default();
        let mut x = vec![0.3, 0.7];
        let f = |x: &Vec<f64>| Ok(x[0] * x[1]);
        assert!(compare(&mut acc, &mut x, vec_slot, &[0, 1], &[0.7, 0.31], &f).unwrap());
        assert!(acc.max_rel > TOLERANCE);
    }

    #[test]
    fn names_round_trip() {
        for c in Component::ALL {
            assert_eq!(Component::parse(c.name()), Some(c));
        }
    }
}
