//! The 2D occupancy plane.
//!
//! Each of the `M x M` columns over the scene footprint stores one height
//! interval `[z_min, z_max]`; everything outside it is empty. A power ramp of
//! width `epsilon` at both ends makes occupancy differentiable in the heights.
//! Column lookup is nearest-cell: the column samples sit at cell centers, so
//! the nearest sample of a point is the cell whose footprint contains it.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{Aabb, Real, Vec3};
use crate::{Error, Result};

pub const DEFAULT_Q: f64 = 2.0;

/// Ramp value and its partial derivatives with respect to the interval ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ramp<T> {
    pub value: T,
    pub d_zmin: T,
    pub d_zmax: T,
}

#[inline]
fn pow_q<T: Real>(x: T, q: T) -> T {
    if q == T::lit(2.0) {
        x * x
    } else {
        x.powf(q)
    }
}

/// Occupancy of height `z` in a column with interval `[zmin, zmax]`.
///
/// Zero outside the interval, one on the plateau `[zmin + eps, zmax - eps]`,
/// and `((z - zmin) / eps)^q` / `((zmax - z) / eps)^q` on the buffers. When the
/// buffers overlap the smaller of the two ramps is used.
#[inline]
pub fn ramp<T: Real>(z: T, zmin: T, zmax: T, eps: T, q: T) -> Ramp<T> {
    let zero = T::zero();
    let mut out = Ramp { value: zero, d_zmin: zero, d_zmax: zero };
    if !(z >= zmin && z <= zmax) {
        return out;
    }
    let lo_t = (z - zmin) / eps;
    let hi_t = (zmax - z) / eps;
    let lo = if lo_t < T::one() { pow_q(lo_t, q) } else { T::one() };
    let hi = if hi_t < T::one() { pow_q(hi_t, q) } else { T::one() };
    if lo <= hi {
        out.value = lo;
        if lo_t < T::one() {
            out.d_zmin = -q * pow_q(lo_t, q - T::one()) / eps;
        }
    } else {
        out.value = hi;
        if hi_t < T::one() {
            out.d_zmax = q * pow_q(hi_t, q - T::one()) / eps;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyPlane<T> {
    pub aabb: Aabb<T>,
    /// Plane resolution `M`.
    pub res: usize,
    /// `M * M * 2`, index `(iy * M + ix) * 2 + {0: z_min, 1: z_max}`.
    pub heights: Vec<T>,
    /// Buffer width in world units.
    pub epsilon: T,
    /// Ramp exponent.
    pub q: T,
}

/// `2 * (z extent / grid_res)`: two voxel heights of ramp support.
pub fn default_epsilon<T: Real>(aabb: &Aabb<T>, grid_res: usize) -> T {
    T::lit(2.0) * aabb.extent().z / T::lit(grid_res as f64)
}

impl<T: Real> OccupancyPlane<T> {
    /// Fully open plane: every interval spans the whole z-range.
    pub fn open(aabb: Aabb<T>, res: usize, epsilon: T) -> Result<Self> {
        let mut heights = vec![T::zero(); res * res * 2];
        for cell in heights.chunks_exact_mut(2) {
            cell[0] = aabb.lo.z;
            cell[1] = aabb.hi.z;
        }
        let plane = Self { aabb, res, heights, epsilon, q: T::lit(DEFAULT_Q) };
        plane.validate()?;
        Ok(plane)
    }

    /// Fully closed plane: every interval is empty at the bottom of the bounds.
    pub fn closed(aabb: Aabb<T>, res: usize, epsilon: T) -> Result<Self> {
        let mut p = Self::open(aabb, res, epsilon)?;
        let z = aabb.lo.z;
        p.heights.iter_mut().for_each(|h| *h = z);
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.res == 0 || self.heights.len() != self.res * self.res * 2 {
            return Err(Error::ShapeMismatch { expected: self.res * self.res * 2, actual: self.heights.len() });
        }
        let half = self.aabb.extent().z * T::lit(0.5);
        if !(self.epsilon > T::zero() && self.epsilon <= half) {
            return Err(Error::InvalidArgument("epsilon must lie in (0, z extent / 2]"));
        }
        if !(self.q > T::zero()) {
            return Err(Error::InvalidArgument("ramp exponent must be positive"));
        }
        let (lo, hi) = (self.aabb.lo.z, self.aabb.hi.z);
        for c in self.heights.chunks_exact(2) {
            if !(c[0].is_finite() && c[1].is_finite() && lo <= c[0] && c[0] <= c[1] && c[1] <= hi) {
                return Err(Error::InvalidArgument("heights must satisfy z_lo <= z_min <= z_max <= z_hi"));
            }
        }
        Ok(())
    }

    pub fn cell_size(&self) -> (T, T) {
        let ext = self.aabb.extent();
        let m = T::lit(self.res as f64);
        (ext.x / m, ext.y / m)
    }

    #[inline]
    fn axis_cell(&self, v: T, lo: T, extent: T) -> usize {
        let u = (v - lo) / extent * T::lit(self.res as f64);
        u.floor().max(T::zero()).to_usize().unwrap_or(0).min(self.res - 1)
    }

    /// Flat index of the column nearest to `(x, y)`, clamping to the footprint.
    #[inline]
    pub fn cell_clamped(&self, x: T, y: T) -> usize {
        let ext = self.aabb.extent();
        let ix = self.axis_cell(x, self.aabb.lo.x, ext.x);
        let iy = self.axis_cell(y, self.aabb.lo.y, ext.y);
        iy * self.res + ix
    }

    /// Column `(ix, iy)` nearest to `(x, y)`.
    pub fn cell_index(&self, x: T, y: T) -> Result<(usize, usize)> {
        let b = &self.aabb;
        if !(x >= b.lo.x && x <= b.hi.x && y >= b.lo.y && y <= b.hi.y) {
            return Err(Error::OutOfBounds { x: x.as_f64(), y: y.as_f64(), z: 0.0 });
        }
        let c = self.cell_clamped(x, y);
        Ok((c % self.res, c / self.res))
    }

    #[inline]
    pub fn interval(&self, cell: usize) -> (T, T) {
        (self.heights[2 * cell], self.heights[2 * cell + 1])
    }

    #[inline]
    pub fn ramp_at_cell(&self, cell: usize, z: T) -> Ramp<T> {
        let (zmin, zmax) = self.interval(cell);
        ramp(z, zmin, zmax, self.epsilon, self.q)
    }

    pub fn occupancy_value(&self, p: Vec3<T>) -> Result<T> {
        let (ix, iy) = self.cell_index(p.x, p.y)?;
        Ok(self.ramp_at_cell(iy * self.res + ix, p.z).value)
    }

    /// Flat cell index and `(d value / d z_min, d value / d z_max)` for that
    /// cell. No other cell receives gradient.
    pub fn occupancy_grad(&self, p: Vec3<T>) -> Result<(usize, T, T)> {
        let (ix, iy) = self.cell_index(p.x, p.y)?;
        let cell = iy * self.res + ix;
        let r = self.ramp_at_cell(cell, p.z);
        Ok((cell, r.d_zmin, r.d_zmax))
    }

    /// Sum over cells of the squared interval span.
    pub fn occ_loss(&self) -> T {
        self.heights.chunks_exact(2).map(|c| (c[1] - c[0]) * (c[1] - c[0])).sum()
    }

    /// Adds `scale * d occ_loss / d heights` into `grad`.
    pub fn occ_loss_backward(&self, scale: T, grad: &mut [T]) {
        for (c, g) in self.heights.chunks_exact(2).zip(grad.chunks_exact_mut(2)) {
            let d = T::lit(2.0) * (c[1] - c[0]) * scale;
            g[0] -= d;
            g[1] += d;
        }
    }

    /// Clamps heights into the z-range and collapses inverted intervals to
    /// their midpoint.
    pub fn project_constraints(&mut self) {
        let (lo, hi) = (self.aabb.lo.z, self.aabb.hi.z);
        for c in self.heights.chunks_exact_mut(2) {
            let a = c[0].max(lo).min(hi);
            let b = c[1].max(lo).min(hi);
            if a > b {
                let mid = (a + b) * T::lit(0.5);
                c[0] = mid;
                c[1] = mid;
            } else {
                c[0] = a;
                c[1] = b;
            }
        }
    }

    /// `true` for columns whose interval has positive span.
    pub fn is_open(&self, cell: usize) -> bool {
        let (a, b) = self.interval(cell);
        b > a
    }

    /// Min/max pooled pyramid with `n_levels` levels (level 0 is this plane).
    pub fn build_pyramid(&self, n_levels: usize) -> Result<OccupancyPyramid<T>> {
        if n_levels == 0 || n_levels > usize::BITS as usize || (1usize << (n_levels - 1)) > self.res {
            return Err(Error::InvalidArgument("pyramid needs 1 <= n_levels and 2^(n_levels-1) <= M"));
        }
        let (wx, wy) = self.cell_size();
        let mut levels = vec![PyramidLevel { res: self.res, cell_size: (wx, wy), heights: self.heights.clone() }];
        let pad = self.aabb.lo.z;
        for k in 1..n_levels {
            let prev = &levels[k - 1];
            let res = prev.res.div_ceil(2);
            let mut heights = vec![T::zero(); res * res * 2];
            for iy in 0..res {
                for ix in 0..res {
                    let mut zmin = T::infinity();
                    let mut zmax = T::neg_infinity();
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let (cx, cy) = (2 * ix + dx, 2 * iy + dy);
                        let (a, b) = if cx < prev.res && cy < prev.res {
                            let c = cy * prev.res + cx;
                            (prev.heights[2 * c], prev.heights[2 * c + 1])
                        } else {
                            (pad, pad)
                        };
                        zmin = zmin.min(a);
                        zmax = zmax.max(b);
                    }
                    let c = iy * res + ix;
                    heights[2 * c] = zmin;
                    heights[2 * c + 1] = zmax;
                }
            }
            let scale = T::lit((1u64 << k) as f64);
            levels.push(PyramidLevel { res, cell_size: (wx * scale, wy * scale), heights });
        }
        Ok(OccupancyPyramid { aabb: self.aabb, levels })
    }

    /// Voxels of a `grid_res^3` lattice over the bounds whose z-range overlaps
    /// the interval of the column nearest to the voxel's column center.
    pub fn occupied_voxels(&self, grid_res: usize) -> VoxelMask {
        let ext = self.aabb.extent();
        let lo = self.aabb.lo;
        let n = T::lit(grid_res as f64);
        let mut bits = vec![false; grid_res * grid_res * grid_res];
        for j in 0..grid_res {
            let y = lo.y + ext.y * (T::lit(j as f64) + T::lit(0.5)) / n;
            for i in 0..grid_res {
                let x = lo.x + ext.x * (T::lit(i as f64) + T::lit(0.5)) / n;
                let (zmin, zmax) = self.interval(self.cell_clamped(x, y));
                if !(zmax > zmin) {
                    continue;
                }
                for k in 0..grid_res {
                    let z0 = lo.z + ext.z * T::lit(k as f64) / n;
                    let z1 = lo.z + ext.z * T::lit((k + 1) as f64) / n;
                    if z0 < zmax && z1 > zmin {
                        bits[(k * grid_res + j) * grid_res + i] = true;
                    }
                }
            }
        }
        VoxelMask { res: grid_res, bits }
    }

    /// Fraction of a `grid_res^3` voxel lattice flagged occupied.
    pub fn occupancy_ratio(&self, grid_res: usize) -> f64 {
        self.occupied_voxels(grid_res).fraction()
    }

    pub fn cast<U: Real>(&self) -> OccupancyPlane<U> {
        OccupancyPlane {
            aabb: self.aabb.cast(),
            res: self.res,
            heights: self.heights.iter().map(|v| U::lit(v.as_f64())).collect(),
            epsilon: U::lit(self.epsilon.as_f64()),
            q: U::lit(self.q.as_f64()),
        }
    }
}

/// Dense occupancy bitmask over a cubic voxel lattice, index
/// `(k * res + j) * res + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    pub res: usize,
    pub bits: Vec<bool>,
}

impl VoxelMask {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[(k * self.res + j) * self.res + i]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel<T> {
    pub res: usize,
    /// Footprint of one cell in world units.
    pub cell_size: (T, T),
    /// `res * res * 2` heights, same layout as [`OccupancyPlane::heights`].
    pub heights: Vec<T>,
}

/// Conservative multi-resolution occupancy: each coarse interval contains the
/// intervals of its (up to four) children.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyPyramid<T> {
    pub aabb: Aabb<T>,
    pub levels: Vec<PyramidLevel<T>>,
}

impl<T: Real> OccupancyPyramid<T> {
    /// Stored interval of a column, or `None` when it is empty (`z_max <= z_min`).
    pub fn column_interval(&self, ix: usize, iy: usize, level: usize) -> Result<Option<(T, T)>> {
        let lvl = self.levels.get(level).ok_or(Error::InvalidArgument("pyramid level out of range"))?;
        if ix >= lvl.res || iy >= lvl.res {
            return Err(Error::InvalidArgument("column index out of range"));
        }
        let c = iy * lvl.res + ix;
        let (a, b) = (lvl.heights[2 * c], lvl.heights[2 * c + 1]);
        Ok(if b > a { Some((a, b)) } else { None })
    }

    /// Level-0 plane view with the given ramp parameters.
    pub fn finest(&self) -> &PyramidLevel<T> {
        &self.levels[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> Aabb<f64> {
        Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn single(zmin: f64, zmax: f64, eps: f64) -> OccupancyPlane<f64> {
        let mut p = OccupancyPlane::open(bounds(), 1, eps).unwrap();
        p.heights = vec![zmin, zmax];
        p
    }

    #[test]
    fn ramp_table() {
        let eps = 0.05;
        let p = single(0.2, 0.7, eps);
        let at = |z: f64| p.occupancy_value(Vec3::new(0.5, 0.5, z)).unwrap();
        assert_eq!(at(0.45), 1.0);
        assert_eq!(at(0.2), 0.0);
        assert_eq!(at(0.7), 0.0);
        assert!((at(0.2 + eps / 2.0) - 0.25).abs() < 1e-12);
        assert_eq!(at(0.1), 0.0);
        assert_eq!(at(0.9), 0.0);
    }

    #[test]
    fn ramp_gradient_table() {
        let eps = 0.1f64;
        let r = ramp(0.2 + eps / 2.0, 0.2, 0.9, eps, 2.0);
        assert!((r.d_zmin + 1.0 / eps).abs() < 1e-9);
        assert_eq!(r.d_zmax, 0.0);
        let plateau = ramp(0.5, 0.2, 0.9, eps, 2.0);
        assert_eq!((plateau.d_zmin, plateau.d_zmax), (0.0, 0.0));
        let outside = ramp(0.95, 0.2, 0.9, eps, 2.0);
        assert_eq!((outside.value, outside.d_zmin, outside.d_zmax), (0.0, 0.0, 0.0));
    }

    #[test]
    fn thin_interval_is_a_tent() {
        let r = ramp(0.5f64, 0.45, 0.55, 0.1, 2.0);
        assert!((r.value - 0.25).abs() < 1e-12);
        assert!(ramp(0.47, 0.45, 0.55, 0.1, 2.0).value < r.value);
    }

    #[test]
    fn occ_loss_values() {
        let mut p = OccupancyPlane::closed(bounds(), 4, 0.1).unwrap();
        assert_eq!(p.occ_loss(), 0.0);
        p.heights[1] = 0.5;
        assert!((p.occ_loss() - 0.25).abs() < 1e-15);
        let open = OccupancyPlane::open(bounds(), 4, 0.1).unwrap();
        assert!((open.occ_loss() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn projection_cases() {
        let mut p =
            OccupancyPlane::open(Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 5.0)).unwrap(), 2, 0.1)
                .unwrap();
        p.heights = vec![3.0, 1.0, 0.5, 4.0, 1.0, 7.0, -1.0, 2.0];
        p.project_constraints();
        assert_eq!(p.heights, vec![2.0, 2.0, 0.5, 4.0, 1.0, 5.0, 0.0, 2.0]);
    }

    #[test]
    fn pyramid_max_pools() {
        let mut p = OccupancyPlane::open(bounds(), 2, 0.1).unwrap();
        p.heights = vec![0.0, 0.1, 0.0, 0.2, 0.0, 0.3, 0.0, 0.4];
        let pyr = p.build_pyramid(2).unwrap();
        assert_eq!(pyr.levels[1].res, 1);
        assert_eq!(pyr.column_interval(0, 0, 1).unwrap(), Some((0.0, 0.4)));
        assert!(p.build_pyramid(3).is_err());
        assert!(p.build_pyramid(0).is_err());
    }

    #[test]
    fn odd_resolution_pads_with_empty_cells() {
        let mut p = OccupancyPlane::open(bounds(), 3, 0.1).unwrap();
        for c in p.heights.chunks_exact_mut(2) {
            c[0] = 0.4;
            c[1] = 0.6;
        }
        let pyr = p.build_pyramid(2).unwrap();
        assert_eq!(pyr.levels[1].res, 2);
        // Interior coarse cell sees only real children.
        assert_eq!(pyr.column_interval(0, 0, 1).unwrap(), Some((0.4, 0.6)));
        // Edge cells pool in padding at the bottom of the bounds.
        assert_eq!(pyr.column_interval(1, 1, 1).unwrap(), Some((0.0, 0.6)));
    }

    #[test]
    fn column_interval_cases() {
        let mut p =
            OccupancyPlane::closed(Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 5.0)).unwrap(), 2, 0.1)
                .unwrap();
        p.heights[0] = 0.0;
        p.heights[1] = 5.0;
        p.heights[2] = 2.0;
        p.heights[3] = 2.0;
        let pyr = p.build_pyramid(1).unwrap();
        assert_eq!(pyr.column_interval(0, 0, 0).unwrap(), Some((0.0, 5.0)));
        assert_eq!(pyr.column_interval(1, 0, 0).unwrap(), None);
        // Untouched cells keep the closed plane's bottom-of-bounds padding value.
        assert_eq!(pyr.column_interval(1, 1, 0).unwrap(), None);
        assert!(pyr.column_interval(2, 0, 0).is_err());
        assert!(pyr.column_interval(0, 0, 1).is_err());
    }

    #[test]
    fn occupancy_ratio_cases() {
        let open = OccupancyPlane::open(bounds(), 8, 0.1).unwrap();
        assert_eq!(open.occupancy_ratio(16), 1.0);
        let closed = OccupancyPlane::closed(bounds(), 8, 0.1).unwrap();
        assert_eq!(closed.occupancy_ratio(16), 0.0);
        let mut tenth = open.clone();
        for c in tenth.heights.chunks_exact_mut(2) {
            c[0] = 0.3;
            c[1] = 0.4;
        }
        assert!((tenth.occupancy_ratio(20) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn occupied_layers_match_interval() {
        let mut p = OccupancyPlane::open(bounds(), 1, 0.1).unwrap();
        p.heights = vec![3.0 / 8.0, 6.0 / 8.0];
        let mask = p.occupied_voxels(8);
        let layers: Vec<bool> = (0..8).map(|k| mask.get(0, 0, k)).collect();
        assert_eq!(layers, [false, false, false, true, true, true, false, false]);
    }

    #[test]
    fn validation() {
        let mut p = OccupancyPlane::open(bounds(), 2, 0.1).unwrap();
        assert!(p.validate().is_ok());
        p.heights[0] = 0.9;
        p.heights[1] = 0.1;
        assert!(p.validate().is_err());
        assert!(OccupancyPlane::open(bounds(), 2, 0.6).is_err());
        assert!(OccupancyPlane::open(bounds(), 2, 0.0).is_err());
        let p = OccupancyPlane::open(bounds(), 2, 0.1).unwrap();
        assert!(p.occupancy_value(Vec3::new(1.5, 0.5, 0.5)).is_err());
    }
}
