//! Explicit radiance-field parameters: a dense low-resolution feature grid
//! plus three high-resolution axis-aligned feature planes.
//!
//! A point's 8-channel feature is the trilinear interpolation of the grid plus
//! the bilinear interpolation of each plane. Sample positions map affinely from
//! the scene bounds onto `[0, res - 1]` along each axis, so grid nodes sit on
//! the bounds' faces.
//!
//! Channel layout: `[density, diffuse r, g, b, specular 0..4]`, all logits.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{sigmoid, Aabb, Real, Vec3};
use crate::{Error, Result};

/// Feature channels per sample point.
pub const FEATURES: usize = 8;

/// Upper clamp on activated density (per world unit).
pub const DENSITY_CEILING: f64 = 1.0e4;

/// `(u axis, v axis)` spanned by the planes orthogonal to x, y and z.
pub const PLANE_AXES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector<T> {
    pub density_logit: T,
    pub diffuse_logits: [T; 3],
    pub specular_logits: [T; 4],
}

impl<T: Real> FeatureVector<T> {
    pub fn from_array(a: [T; FEATURES]) -> Self {
        Self { density_logit: a[0], diffuse_logits: [a[1], a[2], a[3]], specular_logits: [a[4], a[5], a[6], a[7]] }
    }

    pub fn to_array(&self) -> [T; FEATURES] {
        let (d, s) = (self.diffuse_logits, self.specular_logits);
        [self.density_logit, d[0], d[1], d[2], s[0], s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActivatedPoint<T> {
    /// Volume density per world unit.
    pub density: T,
    pub diffuse: [T; 3],
    pub specular: [T; 4],
}

/// Exponential density (clamped at [`DENSITY_CEILING`]) and sigmoid colors.
pub fn activate<T: Real>(fv: &FeatureVector<T>) -> ActivatedPoint<T> {
    let density = fv.density_logit.exp().min(T::lit(DENSITY_CEILING));
    ActivatedPoint { density, diffuse: fv.diffuse_logits.map(sigmoid), specular: fv.specular_logits.map(sigmoid) }
}

/// Adjoint of [`activate`]: maps a gradient on the activated values back to
/// the logits. The density clamp passes no gradient.
pub fn activate_backward<T: Real>(act: &ActivatedPoint<T>, g: &ActivatedPoint<T>) -> FeatureVector<T> {
    let ceiling = T::lit(DENSITY_CEILING);
    let d_density = if act.density >= ceiling { T::zero() } else { g.density * act.density };
    let mut out = FeatureVector { density_logit: d_density, ..Default::default() };
    for c in 0..3 {
        let s = act.diffuse[c];
        out.diffuse_logits[c] = g.diffuse[c] * s * (T::one() - s);
    }
    for c in 0..4 {
        let s = act.specular[c];
        out.specular_logits[c] = g.specular[c] * s * (T::one() - s);
    }
    out
}

/// Interpolation footprint of one point: flat base offsets (already scaled by
/// [`FEATURES`]) and weights for the 8 grid corners and 4 texels per plane.
#[derive(Debug, Clone, Copy)]
pub struct Stencil<T> {
    pub grid: [(usize, T); 8],
    pub planes: [[(usize, T); 4]; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRepr<T> {
    pub aabb: Aabb<T>,
    /// Grid resolution `L` (nodes per axis).
    pub grid_res: usize,
    /// Plane resolution `R` (texels per axis).
    pub plane_res: usize,
    /// `L^3 * 8`, index `((z * L + y) * L + x) * 8 + c`.
    pub grid: Vec<T>,
    /// `R^2 * 8` each, index `(v * R + u) * 8 + c` with axes from [`PLANE_AXES`].
    pub planes: [Vec<T>; 3],
}

/// Lower node index and fractional offset along one axis.
#[inline]
pub fn axis_coord<T: Real>(p: T, lo: T, extent: T, res: usize) -> (usize, T) {
    let top = res - 1;
    let u = (p - lo) / extent * T::lit(top as f64);
    let u = u.max(T::zero()).min(T::lit(top as f64));
    let i = u.floor().to_usize().unwrap_or(0).min(top - 1);
    (i, u - T::lit(i as f64))
}

impl<T: Real> SceneRepr<T> {
    /// All-zero parameters.
    pub fn zeros(aabb: Aabb<T>, grid_res: usize, plane_res: usize) -> Result<Self> {
        if grid_res < 2 || plane_res < 2 {
            return Err(Error::InvalidArgument("grid and plane resolution must be at least 2"));
        }
        if plane_res < grid_res {
            return Err(Error::InvalidArgument("plane resolution must be at least grid resolution"));
        }
        let g = grid_res * grid_res * grid_res * FEATURES;
        let p = plane_res * plane_res * FEATURES;
        Ok(Self {
            aabb,
            grid_res,
            plane_res,
            grid: vec![T::zero(); g],
            planes: [vec![T::zero(); p], vec![T::zero(); p], vec![T::zero(); p]],
        })
    }

    /// Logits uniform in `[-1e-4, 1e-4]`; the grid's density channel starts at
    /// `-1` so the summed density logit of a fresh scene is close to `-1`.
    pub fn init<R: Rng + ?Sized>(aabb: Aabb<T>, grid_res: usize, plane_res: usize, rng: &mut R) -> Result<Self> {
        let mut s = Self::zeros(aabb, grid_res, plane_res)?;
        let mut draw = |v: &mut T| *v = T::lit(rng.random_range(-1.0e-4..=1.0e-4));
        s.grid.iter_mut().for_each(&mut draw);
        for plane in s.planes.iter_mut() {
            plane.iter_mut().for_each(&mut draw);
        }
        for cell in s.grid.chunks_exact_mut(FEATURES) {
            cell[0] = T::lit(-1.0);
        }
        Ok(s)
    }

    pub fn param_count(&self) -> usize {
        self.grid.len() + self.planes.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.grid.iter().chain(self.planes.iter().flatten()).all(|v| v.is_finite())
    }

    /// Interpolation stencil for a point, clamping it into the bounds.
    pub fn stencil(&self, p: Vec3<T>) -> Stencil<T> {
        let ext = self.aabb.extent();
        let lo = self.aabb.lo;
        let l = self.grid_res;
        let (ix, fx) = axis_coord(p.x, lo.x, ext.x, l);
        let (iy, fy) = axis_coord(p.y, lo.y, ext.y, l);
        let (iz, fz) = axis_coord(p.z, lo.z, ext.z, l);
        let one = T::one();
        let mut grid = [(0usize, T::zero()); 8];
        for (k, slot) in grid.iter_mut().enumerate() {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let wx = if dx == 1 { fx } else { one - fx };
            let wy = if dy == 1 { fy } else { one - fy };
            let wz = if dz == 1 { fz } else { one - fz };
            let idx = ((iz + dz) * l + (iy + dy)) * l + (ix + dx);
            *slot = (idx * FEATURES, wx * wy * wz);
        }

        let r = self.plane_res;
        let coords =
            [axis_coord(p.x, lo.x, ext.x, r), axis_coord(p.y, lo.y, ext.y, r), axis_coord(p.z, lo.z, ext.z, r)];
        let mut planes = [[(0usize, T::zero()); 4]; 3];
        for (k, &(ua, va)) in PLANE_AXES.iter().enumerate() {
            let (iu, fu) = coords[ua];
            let (iv, fv) = coords[va];
            for (j, slot) in planes[k].iter_mut().enumerate() {
                let (du, dv) = (j & 1, j >> 1);
                let wu = if du == 1 { fu } else { one - fu };
                let wv = if dv == 1 { fv } else { one - fv };
                *slot = (((iv + dv) * r + (iu + du)) * FEATURES, wu * wv);
            }
        }
        Stencil { grid, planes }
    }

    /// Sum of the interpolated grid and plane features for a stencil.
    pub fn gather(&self, st: &Stencil<T>) -> [T; FEATURES] {
        let mut out = [T::zero(); FEATURES];
        for &(base, w) in &st.grid {
            let cell = &self.grid[base..base + FEATURES];
            for c in 0..FEATURES {
                out[c] += w * cell[c];
            }
        }
        for (k, taps) in st.planes.iter().enumerate() {
            for &(base, w) in taps {
                let texel = &self.planes[k][base..base + FEATURES];
                for c in 0..FEATURES {
                    out[c] += w * texel[c];
                }
            }
        }
        out
    }

    /// Feature at a world-space point. Points outside the bounds are an error.
    pub fn query_features(&self, p: Vec3<T>) -> Result<FeatureVector<T>> {
        if !self.aabb.contains(p) {
            return Err(out_of_bounds(p));
        }
        Ok(FeatureVector::from_array(self.gather(&self.stencil(p))))
    }

    /// Gradient of `g . features(p)` with respect to `p`.
    pub fn query_point_grad(&self, p: Vec3<T>, g: &[T; FEATURES]) -> Result<Vec3<T>> {
        if !self.aabb.contains(p) {
            return Err(out_of_bounds(p));
        }
        let ext = self.aabb.extent();
        let lo = self.aabb.lo;
        let dot = |slice: &[T]| -> T { (0..FEATURES).fold(T::zero(), |a, c| a + slice[c] * g[c]) };
        let mut grad = [T::zero(); 3];

        let l = self.grid_res;
        let c = [axis_coord(p.x, lo.x, ext.x, l), axis_coord(p.y, lo.y, ext.y, l), axis_coord(p.z, lo.z, ext.z, l)];
        let scale = [0, 1, 2].map(|a| T::lit((l - 1) as f64) / ext[a]);
        for k in 0..8 {
            let d = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
            let idx = ((c[2].0 + d[2]) * l + (c[1].0 + d[1])) * l + (c[0].0 + d[0]);
            let v = dot(&self.grid[idx * FEATURES..(idx + 1) * FEATURES]);
            let w = |a: usize| if d[a] == 1 { c[a].1 } else { T::one() - c[a].1 };
            let dw = |a: usize| if d[a] == 1 { scale[a] } else { -scale[a] };
            grad[0] += v * dw(0) * w(1) * w(2);
            grad[1] += v * w(0) * dw(1) * w(2);
            grad[2] += v * w(0) * w(1) * dw(2);
        }

        let r = self.plane_res;
        let pc = [axis_coord(p.x, lo.x, ext.x, r), axis_coord(p.y, lo.y, ext.y, r), axis_coord(p.z, lo.z, ext.z, r)];
        let pscale = [0, 1, 2].map(|a| T::lit((r - 1) as f64) / ext[a]);
        for (k, &(ua, va)) in PLANE_AXES.iter().enumerate() {
            for j in 0..4 {
                let (du, dv) = (j & 1, j >> 1);
                let idx = (pc[va].0 + dv) * r + (pc[ua].0 + du);
                let v = dot(&self.planes[k][idx * FEATURES..(idx + 1) * FEATURES]);
                let wu = if du == 1 { pc[ua].1 } else { T::one() - pc[ua].1 };
                let wv = if dv == 1 { pc[va].1 } else { T::one() - pc[va].1 };
                let dwu = if du == 1 { pscale[ua] } else { -pscale[ua] };
                let dwv = if dv == 1 { pscale[va] } else { -pscale[va] };
                grad[ua] += v * dwu * wv;
                grad[va] += v * wu * dwv;
            }
        }
        Ok(Vec3::from_array(grad))
    }
}

fn out_of_bounds<T: Real>(p: Vec3<T>) -> Error {
    Error::OutOfBounds { x: p.x.as_f64(), y: p.y.as_f64(), z: p.z.as_f64() }
}

/// Gradient buffers shaped like a [`SceneRepr`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad<T> {
    pub grid: Vec<T>,
    pub planes: [Vec<T>; 3],
}

impl<T: Real> SceneGrad<T> {
    pub fn zeros_like(s: &SceneRepr<T>) -> Self {
        let p = s.planes[0].len();
        Self {
            grid: vec![T::zero(); s.grid.len()],
            planes: [vec![T::zero(); p], vec![T::zero(); p], vec![T::zero(); p]],
        }
    }

    pub fn clear(&mut self) {
        self.grid.iter_mut().for_each(|v| *v = T::zero());
        for p in self.planes.iter_mut() {
            p.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adjoint of [`SceneRepr::gather`]: distributes `g` over the stencil.
    pub fn scatter(&mut self, st: &Stencil<T>, g: &[T; FEATURES]) {
        for &(base, w) in &st.grid {
            let cell = &mut self.grid[base..base + FEATURES];
            for c in 0..FEATURES {
                cell[c] += w * g[c];
            }
        }
        for (k, taps) in st.planes.iter().enumerate() {
            for &(base, w) in taps {
                let texel = &mut self.planes[k][base..base + FEATURES];
                for c in 0..FEATURES {
                    texel[c] += w * g[c];
                }
            }
        }
    }

    /// Density-only variant of [`SceneGrad::scatter`].
    pub fn scatter_density(&mut self, st: &Stencil<T>, g: T) {
        for &(base, w) in &st.grid {
            self.grid[base] += w * g;
        }
        for (k, taps) in st.planes.iter().enumerate() {
            for &(base, w) in taps {
                self.planes[k][base] += w * g;
            }
        }
    }

    pub fn add_assign(&mut self, o: &Self) {
        for (a, b) in self.grid.iter_mut().zip(&o.grid) {
            *a += *b;
        }
        for (pa, pb) in self.planes.iter_mut().zip(&o.planes) {
            for (a, b) in pa.iter_mut().zip(pb) {
                *a += *b;
            }
        }
    }

    /// `self += s * o`.
    pub fn add_scaled(&mut self, o: &Self, s: T) {
        for (a, b) in self.grid.iter_mut().zip(&o.grid) {
            *a += s * *b;
        }
        for (pa, pb) in self.planes.iter_mut().zip(&o.planes) {
            for (a, b) in pa.iter_mut().zip(pb) {
                *a += s * *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb<f64> {
        Aabb::new(Vec3::splat(0.0), Vec3::splat(1.0)).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let s = SceneRepr::zeros(unit_box(), 4, 8).unwrap();
        let f = s.query_features(Vec3::new(0.3, 0.7, 0.1)).unwrap();
        assert_eq!(f.to_array(), [0.0; 8]);
    }

    #[test]
    fn rejects_bad_resolutions() {
        assert!(SceneRepr::<f64>::zeros(unit_box(), 1, 8).is_err());
        assert!(SceneRepr::<f64>::zeros(unit_box(), 8, 4).is_err());
    }

    #[test]
    fn corner_query_sums_grid_and_plane_values() {
        // L = 3 nodes at 0, .5, 1; R = 5 texels at 0, .25, ..., 1.
        let mut s = SceneRepr::zeros(unit_box(), 3, 5).unwrap();
        let p = Vec3::new(0.5, 0.5, 1.0);
        let (l, r) = (3, 5);
        let node = (2 * l + 1) * l + 1;
        s.grid[node * FEATURES + 2] = 1.5;
        // P_x spans (y, z): u = 2, v = 4.
        s.planes[0][(4 * r + 2) * FEATURES + 2] = 0.25;
        // P_y spans (x, z).
        s.planes[1][(4 * r + 2) * FEATURES + 2] = -0.5;
        // P_z spans (x, y).
        s.planes[2][(2 * r + 2) * FEATURES + 2] = 2.0;
        let f = s.query_features(p).unwrap().to_array();
        assert!((f[2] - (1.5 + 0.25 - 0.5 + 2.0)).abs() < 1e-12);
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn edge_midpoint_averages_two_corners() {
        let mut s = SceneRepr::zeros(unit_box(), 2, 2).unwrap();
        // Corners (0,0,0) and (1,0,0) along the x edge.
        let (u, v) = (0.8, -0.2);
        s.grid[..FEATURES].iter_mut().for_each(|x| *x = u);
        s.grid[FEATURES..2 * FEATURES].iter_mut().for_each(|x| *x = v);
        let f = s.query_features(Vec3::new(0.5, 0.0, 0.0)).unwrap().to_array();
        // Hand evaluation of the trilinear polynomial: weights (1/2, 1/2).
        for c in f {
            assert!((c - (u + v) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let s = SceneRepr::zeros(unit_box(), 2, 2).unwrap();
        assert!(matches!(s.query_features(Vec3::new(1.01, 0.5, 0.5)), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn activation_table() {
        let a = activate(&FeatureVector::<f64>::default());
        assert_eq!(a.density, 1.0);
        assert_eq!(a.diffuse, [0.5; 3]);
        assert_eq!(a.specular, [0.5; 4]);
        let two = activate(&FeatureVector { density_logit: 2f64.ln(), ..Default::default() });
        assert!((two.density - 2.0).abs() < 1e-12);
        let dark = activate(&FeatureVector::<f64> { diffuse_logits: [-20.0; 3], ..Default::default() });
        assert!(dark.diffuse.iter().all(|&c| c < 1e-8));
        let hot = activate(&FeatureVector::<f64> { density_logit: 50.0, ..Default::default() });
        assert_eq!(hot.density, DENSITY_CEILING);
    }

    #[test]
    fn activation_adjoint_at_zero() {
        let fv = FeatureVector::<f64>::default();
        let act = activate(&fv);
        let g = ActivatedPoint { density: 1.0, ..Default::default() };
        assert_eq!(activate_backward(&act, &g).density_logit, 1.0);
        let clamped = activate(&FeatureVector::<f64> { density_logit: 40.0, ..Default::default() });
        assert_eq!(activate_backward(&clamped, &g).density_logit, 0.0);
    }

    #[test]
    fn corner_query_scatters_to_single_entry() {
        let s = SceneRepr::zeros(unit_box(), 3, 3).unwrap();
        let st = s.stencil(Vec3::new(0.5, 0.5, 0.5));
        let mut g = SceneGrad::zeros_like(&s);
        g.scatter(&st, &[1.0; FEATURES]);
        let touched: Vec<usize> = (0..g.grid.len()).filter(|&i| g.grid[i] != 0.0).map(|i| i / FEATURES).collect();
        assert!(touched.iter().all(|&n| n == (3 + 1) * 3 + 1));
        assert_eq!(touched.len(), FEATURES);
        assert_eq!(g.grid[13 * FEATURES], 1.0);
    }

    #[test]
    fn init_is_small_with_negative_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = SceneRepr::<f32>::init(unit_box().cast(), 4, 8, &mut rng).unwrap();
        assert!(s.grid.chunks(FEATURES).all(|c| c[0] == -1.0));
        assert!(s.grid.chunks(FEATURES).flat_map(|c| &c[1..]).all(|v| v.abs() <= 1e-4));
        assert!(s.planes.iter().flatten().all(|v| v.abs() <= 1e-4));
    }
}
