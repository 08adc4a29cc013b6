//! Baking a trained model into quantized sparse assets, and the baked-scene
//! ray marcher.
//!
//! The grid is stored as sparse blocks of `B^3` cells. Each block carries its
//! `(B + 1)^3` corner nodes so trilinear lookups never leave the block. Only
//! cells whose box can see a non-zero occupancy are kept. The x- and
//! y-orthogonal planes are cropped in z to the occupied height range. Grid and
//! plane values stay logits (density logits are log densities), summed and
//! activated at lookup time exactly like the trained model.
//!
//! The marcher walks a global lattice `t_near + j * step`. With skipping it
//! descends the occupancy pyramid with a 2D DDA per level and only visits
//! lattice points inside finest-level column boxes; the dense variant visits
//! every lattice point. Both evaluate a lattice point with the same code, so
//! they agree exactly whenever skipping is sound.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{Aabb, Real, Vec3};
use crate::occupancy::{OccupancyPlane, OccupancyPyramid, PyramidLevel, VoxelMask};
use crate::render::{deferred_shade, CompositeTrace, Model, Ray};
use crate::scene::{activate, axis_coord, FeatureVector, FEATURES, PLANE_AXES};
use crate::shader::DeferredShader;
use crate::{Error, Result};

/// Channel groups sharing one quantization range.
pub const GROUPS: [core::ops::Range<usize>; 3] = [0..1, 1..4, 4..8];
/// Transmittance below which the marcher stops.
pub const EARLY_TERMINATION: f32 = 1e-3;
/// Height codes are always 16-bit.
pub const HEIGHT_BITS: u32 = 16;

/// Voxels whose z-range meets the interval of the column nearest to their
/// center.
pub fn extract_occupied_voxels<T: Real>(plane: &OccupancyPlane<T>, grid_res: usize) -> VoxelMask {
    plane.occupied_voxels(grid_res)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BakeOptions {
    /// Cells per block edge.
    pub block_size: usize,
    /// 8 or 16.
    pub bits: u32,
    pub pyramid_levels: usize,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self { block_size: 8, bits: 8, pyramid_levels: 4 }
    }
}

/// Affine range of one channel group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRange {
    pub lo: f64,
    pub hi: f64,
}

impl QuantRange {
    /// Range of `values`, widened when it would be empty or degenerate.
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-6 {
            return Self { lo: lo - 1e-3, hi: hi + 1e-3 };
        }
        Self { lo, hi }
    }

    /// Width of one code bucket.
    pub fn step(&self, bits: u32) -> f64 {
        (self.hi - self.lo) / (1u64 << bits) as f64
    }

    /// Bucket index of `v`; decoding returns the bucket midpoint, so the error
    /// is at most half a step for any `v` in range.
    pub fn encode(&self, v: f64, bits: u32) -> u16 {
        let n = (1u64 << bits) as f64;
        let u = ((v - self.lo) / (self.hi - self.lo) * n).floor();
        u.max(0.0).min(n - 1.0) as u16
    }

    pub fn decode(&self, code: u16, bits: u32) -> f64 {
        self.lo + (code as f64 + 0.5) * self.step(bits)
    }
}

/// 16-bit height codes over `[z_lo, z_hi]`, with the code lattice on the
/// range endpoints. Lower ends round down and upper ends round up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightCodec {
    pub z_lo: f64,
    pub z_hi: f64,
}

impl HeightCodec {
    const MAX: f64 = ((1u32 << HEIGHT_BITS) - 1) as f64;

    fn scaled(&self, z: f64) -> f64 {
        ((z - self.z_lo) / (self.z_hi - self.z_lo) * Self::MAX).clamp(0.0, Self::MAX)
    }

    pub fn encode_floor(&self, z: f64) -> u16 {
        self.scaled(z).floor() as u16
    }

    pub fn encode_ceil(&self, z: f64) -> u16 {
        self.scaled(z).ceil() as u16
    }

    pub fn decode(&self, code: u16) -> f64 {
        self.z_lo + code as f64 / Self::MAX * (self.z_hi - self.z_lo)
    }
}

/// Quantized assets; the in-memory form of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BakedAssets {
    pub aabb: Aabb<f64>,
    pub grid_res: usize,
    pub plane_res: usize,
    pub block_size: usize,
    pub bits: u32,
    /// Per channel group: density, diffuse, specular.
    pub grid_ranges: [QuantRange; 3],
    pub plane_ranges: [QuantRange; 3],
    /// Block coordinates (in blocks) in storage order.
    pub blocks: Vec<[u32; 3]>,
    /// `blocks.len() * (B + 1)^3 * 8` codes, node index
    /// `((z * (B + 1) + y) * (B + 1) + x) * 8 + c` within a block.
    pub block_codes: Vec<u16>,
    /// First stored row and row count of each plane (rows run along the
    /// plane's v axis).
    pub plane_rows: [(usize, usize); 3],
    /// `R * rows * 8` codes per plane.
    pub plane_codes: [Vec<u16>; 3],
    pub heights: HeightCodec,
    /// Per level: resolution and `res^2 * 2` height codes.
    pub occupancy: Vec<(usize, Vec<u16>)>,
    pub epsilon: f64,
    pub q: f64,
    pub shader: Vec<f32>,
    pub background: [f32; 3],
}

impl BakedAssets {
    pub fn nodes_per_block(&self) -> usize {
        (self.block_size + 1).pow(3)
    }

    pub fn blocks_per_axis(&self) -> usize {
        (self.grid_res - 1).div_ceil(self.block_size)
    }

    /// Bytes of all decoded textures at their stored bit depth plus the
    /// shader weights as 32-bit floats.
    pub fn payload_bytes(&self) -> usize {
        let b = (self.bits as usize).div_ceil(8);
        let blocks = self.block_codes.len() * b;
        let planes: usize = self.plane_codes.iter().map(|p| p.len() * b).sum();
        let occ: usize = self.occupancy.iter().map(|(_, c)| c.len() * 2).sum();
        blocks + planes + occ + self.shader.len() * 4
    }
}

fn grid_node<T: Real>(lo: T, ext: T, res: usize, i: usize) -> f64 {
    lo.as_f64() + ext.as_f64() * i as f64 / (res - 1) as f64
}

/// Cells (of the `(L-1)^3` grid cells) that can hold a sample with non-zero
/// occupancy under `plane`, tested conservatively against every column their
/// footprint overlaps.
fn covered_cells(aabb: &Aabb<f64>, grid_res: usize, plane: &OccupancyPlane<f64>) -> Vec<bool> {
    let n = grid_res - 1;
    let ext = aabb.extent();
    let (cw, ch) = plane.cell_size();
    let m = plane.res;
    let tol_xy = 1e-6 * ext.x.max(ext.y);
    let tol_z = 1e-4 * ext.z;
    let col_range = |a: f64, b: f64, lo: f64, w: f64| -> (usize, usize) {
        let i0 = ((a - tol_xy - lo) / w).floor().max(0.0) as usize;
        let i1 = ((b + tol_xy - lo) / w).floor().max(0.0) as usize;
        (i0.min(m - 1), i1.min(m - 1))
    };
    // Union of intervals over each grid column's footprint.
    let mut spans = vec![(f64::INFINITY, f64::NEG_INFINITY); n * n];
    for j in 0..n {
        let (y0, y1) = (grid_node(aabb.lo.y, ext.y, grid_res, j), grid_node(aabb.lo.y, ext.y, grid_res, j + 1));
        let (cy0, cy1) = col_range(y0, y1, aabb.lo.y, ch);
        for i in 0..n {
            let (x0, x1) = (grid_node(aabb.lo.x, ext.x, grid_res, i), grid_node(aabb.lo.x, ext.x, grid_res, i + 1));
            let (cx0, cx1) = col_range(x0, x1, aabb.lo.x, cw);
            let span = &mut spans[j * n + i];
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    let (a, b) = plane.interval(cy * m + cx);
                    if b > a {
                        span.0 = span.0.min(a);
                        span.1 = span.1.max(b);
                    }
                }
            }
        }
    }
    let mut cells = vec![false; n * n * n];
    for k in 0..n {
        let z0 = grid_node(aabb.lo.z, ext.z, grid_res, k);
        let z1 = grid_node(aabb.lo.z, ext.z, grid_res, k + 1);
        for c in 0..n * n {
            let (a, b) = spans[c];
            if a <= z1 + tol_z && b >= z0 - tol_z {
                cells[k * n * n + c] = true;
            }
        }
    }
    cells
}

/// Quantizes the model. `model.plane` is taken at full precision; the
/// occupancy actually used downstream is the decoded 16-bit one.
pub fn bake<T: Real>(model: &Model<T>, background: [f32; 3], opts: &BakeOptions) -> Result<BakedAssets> {
    let scene = &model.scene;
    let l = scene.grid_res;
    let r = scene.plane_res;
    let b = opts.block_size;
    if b == 0 || l % b != 0 {
        return Err(Error::InvalidArgument("block size must divide the grid resolution"));
    }
    if opts.bits != 8 && opts.bits != 16 {
        return Err(Error::InvalidArgument("quantization must be 8 or 16 bits"));
    }
    let aabb: Aabb<f64> = scene.aabb.cast();
    let plane64: OccupancyPlane<f64> = model.plane.cast();
    plane64.validate()?;
    let m = plane64.res;
    let levels = opts.pyramid_levels.max(1).min(usize::BITS as usize - m.leading_zeros() as usize);

    // Height codes and their pyramid.
    let heights = HeightCodec { z_lo: aabb.lo.z, z_hi: aabb.hi.z };
    let mut level0 = vec![0u16; m * m * 2];
    for c in 0..m * m {
        let (a, bb) = plane64.interval(c);
        level0[2 * c] = heights.encode_floor(a);
        level0[2 * c + 1] = heights.encode_ceil(bb);
        if bb <= a {
            // Keep empty columns empty after rounding.
            level0[2 * c + 1] = level0[2 * c];
        }
    }
    let mut occupancy = vec![(m, level0)];
    for _ in 1..levels {
        let (pres, prev) = occupancy.last().unwrap();
        let res = pres.div_ceil(2);
        let mut codes = vec![0u16; res * res * 2];
        for iy in 0..res {
            for ix in 0..res {
                let (mut lo, mut hi) = (u16::MAX, 0u16);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (cx, cy) = (2 * ix + dx, 2 * iy + dy);
                    let (a, bb) = if cx < *pres && cy < *pres {
                        let c = cy * pres + cx;
                        (prev[2 * c], prev[2 * c + 1])
                    } else {
                        (0, 0)
                    };
                    lo = lo.min(a);
                    hi = hi.max(bb);
                }
                codes[2 * (iy * res + ix)] = lo;
                codes[2 * (iy * res + ix) + 1] = hi;
            }
        }
        occupancy.push((res, codes));
    }
    let mut decoded = plane64.clone();
    for (h, c) in decoded.heights.iter_mut().zip(&occupancy[0].1) {
        *h = heights.decode(*c);
    }

    // Sparse blocks over covered cells.
    let cells = covered_cells(&aabb, l, &decoded);
    let n = l - 1;
    let nb = n.div_ceil(b);
    let mut keep = vec![false; nb * nb * nb];
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                if cells[(k * n + j) * n + i] {
                    keep[((k / b) * nb + j / b) * nb + i / b] = true;
                }
            }
        }
    }
    let blocks: Vec<[u32; 3]> = (0..nb * nb * nb)
        .filter(|&i| keep[i])
        .map(|i| [(i % nb) as u32, ((i / nb) % nb) as u32, (i / (nb * nb)) as u32])
        .collect();
    if blocks.is_empty() {
        return Err(Error::Degenerate("no occupied voxels to bake"));
    }
    let bn = b + 1;
    let node_value = |bc: &[u32; 3], x: usize, y: usize, z: usize, c: usize| -> f64 {
        let gx = (bc[0] as usize * b + x).min(l - 1);
        let gy = (bc[1] as usize * b + y).min(l - 1);
        let gz = (bc[2] as usize * b + z).min(l - 1);
        scene.grid[((gz * l + gy) * l + gx) * FEATURES + c].as_f64()
    };
    let block_nodes = |bc: &[u32; 3]| {
        let bc = *bc;
        (0..bn).flat_map(move |z| (0..bn).flat_map(move |y| (0..bn).map(move |x| (bc, x, y, z))))
    };
    let grid_ranges: [QuantRange; 3] = core::array::from_fn(|g| {
        QuantRange::of(blocks.iter().flat_map(|bc| {
            block_nodes(bc).flat_map(|(bc, x, y, z)| GROUPS[g].clone().map(move |c| node_value(&bc, x, y, z, c)))
        }))
    });
    let group_of = |c: usize| GROUPS.iter().position(|g| g.contains(&c)).unwrap();
    let mut block_codes = Vec::with_capacity(blocks.len() * bn * bn * bn * FEATURES);
    for bc in &blocks {
        for (bc, x, y, z) in block_nodes(bc) {
            for c in 0..FEATURES {
                block_codes.push(grid_ranges[group_of(c)].encode(node_value(&bc, x, y, z, c), opts.bits));
            }
        }
    }

    // Planes; the two with a z axis keep only rows around the occupied z-range.
    let (zmin, zmax) = decoded
        .heights
        .chunks_exact(2)
        .filter(|c| c[1] > c[0])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, bb), c| (a.min(c[0]), bb.max(c[1])));
    let to_row = |z: f64| (z - aabb.lo.z) / aabb.extent().z * (r - 1) as f64;
    let row0 = (to_row(zmin).floor() as i64 - 1).clamp(0, r as i64 - 2) as usize;
    let row1 = ((to_row(zmax).ceil() as i64) + 2).clamp(1, r as i64 - 1) as usize;
    let mut plane_rows = [(0, r); 3];
    for (k, &(_, va)) in PLANE_AXES.iter().enumerate() {
        if va == 2 {
            plane_rows[k] = (row0, row1 + 1 - row0);
        }
    }
    let plane_value = |k: usize, u: usize, v: usize, c: usize| scene.planes[k][(v * r + u) * FEATURES + c].as_f64();
    let plane_ranges: [QuantRange; 3] = core::array::from_fn(|g| {
        QuantRange::of((0..3).flat_map(|k| {
            let (v0, rows) = plane_rows[k];
            (v0..v0 + rows)
                .flat_map(move |v| (0..r).flat_map(move |u| GROUPS[g].clone().map(move |c| plane_value(k, u, v, c))))
        }))
    });
    let plane_codes: [Vec<u16>; 3] = core::array::from_fn(|k| {
        let (v0, rows) = plane_rows[k];
        let mut out = Vec::with_capacity(r * rows * FEATURES);
        for v in v0..v0 + rows {
            for u in 0..r {
                for c in 0..FEATURES {
                    out.push(plane_ranges[group_of(c)].encode(plane_value(k, u, v, c), opts.bits));
                }
            }
        }
        out
    });

    Ok(BakedAssets {
        aabb,
        grid_res: l,
        plane_res: r,
        block_size: b,
        bits: opts.bits,
        grid_ranges,
        plane_ranges,
        blocks,
        block_codes,
        plane_rows,
        plane_codes,
        heights,
        occupancy,
        epsilon: plane64.epsilon,
        q: plane64.q,
        shader: model.shader.params.iter().map(|v| v.as_f64() as f32).collect(),
        background,
    })
}

/// Decoded, render-ready baked scene.
#[derive(Debug, Clone)]
pub struct BakedScene {
    pub aabb: Aabb<f32>,
    pub grid_res: usize,
    pub plane_res: usize,
    pub block_size: usize,
    pub blocks_per_axis: usize,
    /// Dense block table; `u32::MAX` marks an absent block.
    pub block_index: Vec<u32>,
    pub block_values: Vec<f32>,
    pub plane_rows: [(usize, usize); 3],
    pub plane_values: [Vec<f32>; 3],
    /// Finest-level occupancy (decoded heights) for the sample multiplier.
    pub plane: OccupancyPlane<f32>,
    pub pyramid: OccupancyPyramid<f32>,
    pub shader: DeferredShader<f32>,
    pub background: [f32; 3],
}

impl BakedAssets {
    pub fn decode(&self) -> Result<BakedScene> {
        let group_of = |c: usize| GROUPS.iter().position(|g| g.contains(&c)).unwrap();
        let nb = self.blocks_per_axis();
        let nodes = self.nodes_per_block() * FEATURES;
        if self.block_codes.len() != self.blocks.len() * nodes {
            return Err(Error::ShapeMismatch { expected: self.blocks.len() * nodes, actual: self.block_codes.len() });
        }
        let mut block_index = vec![u32::MAX; nb * nb * nb];
        for (i, bc) in self.blocks.iter().enumerate() {
            let [x, y, z] = bc.map(|v| v as usize);
            if x >= nb || y >= nb || z >= nb {
                return Err(Error::InvalidArgument("block coordinate out of range"));
            }
            block_index[(z * nb + y) * nb + x] = i as u32;
        }
        let block_values = self
            .block_codes
            .iter()
            .enumerate()
            .map(|(i, c)| self.grid_ranges[group_of(i % FEATURES)].decode(*c, self.bits) as f32)
            .collect();
        let plane_values: [Vec<f32>; 3] = core::array::from_fn(|k| {
            self.plane_codes[k]
                .iter()
                .enumerate()
                .map(|(i, c)| self.plane_ranges[group_of(i % FEATURES)].decode(*c, self.bits) as f32)
                .collect()
        });
        for k in 0..3 {
            let (v0, rows) = self.plane_rows[k];
            if v0 + rows > self.plane_res || plane_values[k].len() != self.plane_res * rows * FEATURES {
                return Err(Error::ShapeMismatch {
                    expected: self.plane_res * rows * FEATURES,
                    actual: plane_values[k].len(),
                });
            }
        }
        let aabb: Aabb<f32> = self.aabb.cast();
        let (m, codes0) = &self.occupancy[0];
        let mut plane = OccupancyPlane::open(aabb, *m, self.epsilon as f32)?;
        plane.q = self.q as f32;
        for (h, c) in plane.heights.iter_mut().zip(codes0) {
            *h = self.heights.decode(*c) as f32;
        }
        let (wx, wy) = plane.cell_size();
        let levels = self
            .occupancy
            .iter()
            .enumerate()
            .map(|(k, (res, codes))| {
                let s = (1u64 << k) as f32;
                PyramidLevel {
                    res: *res,
                    cell_size: (wx * s, wy * s),
                    heights: codes.iter().map(|c| self.heights.decode(*c) as f32).collect(),
                }
            })
            .collect();
        Ok(BakedScene {
            aabb,
            grid_res: self.grid_res,
            plane_res: self.plane_res,
            block_size: self.block_size,
            blocks_per_axis: nb,
            block_index,
            block_values,
            plane_rows: self.plane_rows,
            plane_values,
            plane,
            pyramid: OccupancyPyramid { aabb, levels },
            shader: DeferredShader::from_params(self.shader.clone())?,
            background: self.background,
        })
    }
}

/// Per-ray marcher counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RayStats {
    /// Lattice points visited.
    pub samples: u32,
    /// Lattice points with non-zero occupancy (features fetched).
    pub fetched: u32,
    /// Pyramid cells rejected by the box test.
    pub skipped_cells: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarchOptions {
    pub step: f32,
    pub skip: bool,
    pub early_termination: bool,
}

/// Default lattice spacing: bounds diagonal / 1024.
pub fn default_step<T: Real>(aabb: &Aabb<T>) -> T {
    aabb.diagonal() / T::lit(1024.0)
}

impl BakedScene {
    /// Summed grid and plane logits at `p`. Grid nodes of absent blocks read
    /// as zero.
    pub fn features(&self, p: Vec3<f32>) -> [f32; FEATURES] {
        let ext = self.aabb.extent();
        let lo = self.aabb.lo;
        let l = self.grid_res;
        let b = self.block_size;
        let bn = b + 1;
        let (ix, fx) = axis_coord(p.x, lo.x, ext.x, l);
        let (iy, fy) = axis_coord(p.y, lo.y, ext.y, l);
        let (iz, fz) = axis_coord(p.z, lo.z, ext.z, l);
        let nb = self.blocks_per_axis;
        let mut out = [0.0f32; FEATURES];
        let blk = self.block_index[((iz / b) * nb + iy / b) * nb + ix / b];
        if blk != u32::MAX {
            let base = blk as usize * bn * bn * bn;
            let (lx, ly, lz) = (ix % b, iy % b, iz % b);
            for k in 0..8 {
                let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
                let w = (if dx == 1 { fx } else { 1.0 - fx })
                    * (if dy == 1 { fy } else { 1.0 - fy })
                    * (if dz == 1 { fz } else { 1.0 - fz });
                let node = base + ((lz + dz) * bn + (ly + dy)) * bn + (lx + dx);
                let v = &self.block_values[node * FEATURES..(node + 1) * FEATURES];
                for c in 0..FEATURES {
                    out[c] += w * v[c];
                }
            }
        }
        let r = self.plane_res;
        let coords =
            [axis_coord(p.x, lo.x, ext.x, r), axis_coord(p.y, lo.y, ext.y, r), axis_coord(p.z, lo.z, ext.z, r)];
        for (k, &(ua, va)) in PLANE_AXES.iter().enumerate() {
            let (iu, fu) = coords[ua];
            let (iv, fv) = coords[va];
            let (v0, rows) = self.plane_rows[k];
            for j in 0..4 {
                let (du, dv) = (j & 1, j >> 1);
                let row = (iv + dv).clamp(v0, v0 + rows - 1) - v0;
                let w = (if du == 1 { fu } else { 1.0 - fu }) * (if dv == 1 { fv } else { 1.0 - fv });
                let t = (row * r + iu + du) * FEATURES;
                let v = &self.plane_values[k][t..t + FEATURES];
                for c in 0..FEATURES {
                    out[c] += w * v[c];
                }
            }
        }
        out
    }

    pub fn ray(&self, origin: Vec3<f32>, dir: Vec3<f32>) -> Result<Option<Ray<f32>>> {
        Ray::through(&self.aabb, origin, dir)
    }

    /// Marches one ray and returns its color and counters.
    pub fn march(&self, origin: Vec3<f32>, dir: Vec3<f32>, opts: &MarchOptions) -> Result<([f32; 3], RayStats)> {
        if !(opts.step > 0.0) {
            return Err(Error::InvalidArgument("step must be positive"));
        }
        let mut stats = RayStats::default();
        let Some(ray) = self.ray(origin, dir)? else {
            return Ok((self.background, stats));
        };
        let mut acc = Accum::new();
        self.walk(&ray, opts.step, opts.skip, &mut stats, |t, stats| self.visit(&ray, t, opts, &mut acc, stats));
        Ok((acc.shade(&ray, &self.shader, self.background)?, stats))
    }

    /// Visits lattice points `t_near + j * step` in order, all of them or only
    /// those inside finest-level column boxes, until `visit` returns `true`.
    fn walk(
        &self,
        ray: &Ray<f32>,
        step: f32,
        skip: bool,
        stats: &mut RayStats,
        mut visit: impl FnMut(f32, &mut RayStats) -> bool,
    ) {
        if !skip {
            let mut j = 0u32;
            loop {
                let t = ray.t_near + j as f32 * step;
                if t >= ray.t_far || visit(t, stats) {
                    return;
                }
                j += 1;
            }
        }
        let tol = step * 1e-3;
        let mut next_j = 0u32;
        for (_, a, b) in self.segments(ray, stats) {
            let first = ((a - tol - ray.t_near) / step).ceil().max(0.0) as u32;
            let mut j = first.max(next_j);
            loop {
                let t = ray.t_near + j as f32 * step;
                if t > b + tol || t >= ray.t_far {
                    break;
                }
                next_j = j + 1;
                if visit(t, stats) {
                    return;
                }
                j += 1;
            }
        }
    }

    /// Lattice parameters the marcher would visit along `ray` (ignoring early
    /// termination).
    pub fn lattice(&self, ray: &Ray<f32>, step: f32, skip: bool) -> Vec<f32> {
        let mut out = Vec::new();
        self.walk(ray, step, skip, &mut RayStats::default(), |t, _| {
            out.push(t);
            false
        });
        out
    }

    /// Evaluates one lattice point; returns `true` once the ray terminates.
    #[inline]
    fn visit(&self, ray: &Ray<f32>, t: f32, opts: &MarchOptions, acc: &mut Accum, stats: &mut RayStats) -> bool {
        stats.samples += 1;
        let p = self.aabb.clamp(ray.at(t));
        let cell = self.plane.cell_clamped(p.x, p.y);
        let m = self.plane.ramp_at_cell(cell, p.z).value;
        if !(m > 0.0) {
            return false;
        }
        stats.fetched += 1;
        let act = activate(&FeatureVector::from_array(self.features(p)));
        acc.add(act.density, opts.step, m, &act.diffuse, &act.specular);
        opts.early_termination && acc.transmittance < EARLY_TERMINATION
    }

    /// Finest-level column segments `(cell, t0, t1)` the skipping walk visits,
    /// in ray order.
    pub fn segments(&self, ray: &Ray<f32>, stats: &mut RayStats) -> Vec<(usize, f32, f32)> {
        let mut out = Vec::new();
        let top = self.pyramid.levels.len() - 1;
        self.descend(ray, top, ray.t_near, ray.t_far, stats, &mut out);
        out
    }

    fn descend(
        &self,
        ray: &Ray<f32>,
        level: usize,
        ta: f32,
        tb: f32,
        stats: &mut RayStats,
        out: &mut Vec<(usize, f32, f32)>,
    ) {
        let lvl = &self.pyramid.levels[level];
        for (cell, t0, t1) in dda(&self.aabb, lvl, ray, ta, tb) {
            let (zmin, zmax) = (lvl.heights[2 * cell], lvl.heights[2 * cell + 1]);
            let Some((s0, s1)) = clip_z(ray, zmin, zmax, t0, t1) else {
                stats.skipped_cells += 1;
                continue;
            };
            if level == 0 {
                out.push((cell, s0, s1));
            } else {
                self.descend(ray, level - 1, s0, s1, stats, out);
            }
        }
    }
}

/// Range of `[t0, t1]` where the ray's height lies in `[zmin, zmax]`.
fn clip_z(ray: &Ray<f32>, zmin: f32, zmax: f32, t0: f32, t1: f32) -> Option<(f32, f32)> {
    if !(zmax > zmin) {
        return None;
    }
    let (oz, dz) = (ray.origin.z, ray.dir.z);
    let (a, b) = if dz == 0.0 {
        if oz < zmin || oz > zmax {
            return None;
        }
        (t0, t1)
    } else {
        let (ta, tb) = ((zmin - oz) / dz, (zmax - oz) / dz);
        (ta.min(tb).max(t0), ta.max(tb).min(t1))
    };
    (a <= b).then_some((a, b))
}

/// Cells of one pyramid level crossed by the ray on `[ta, tb]`, in order,
/// with the parametric range spent in each.
fn dda(aabb: &Aabb<f32>, lvl: &PyramidLevel<f32>, ray: &Ray<f32>, ta: f32, tb: f32) -> Vec<(usize, f32, f32)> {
    let mut out = Vec::new();
    if !(tb >= ta) {
        return out;
    }
    let res = lvl.res as i64;
    let (wx, wy) = lvl.cell_size;
    let (o, d) = (ray.origin, ray.dir);
    let p = ray.at(ta);
    let cell_of = |v: f32, lo: f32, w: f32| (((v - lo) / w).floor() as i64).clamp(0, res - 1);
    let (mut ix, mut iy) = (cell_of(p.x, aabb.lo.x, wx), cell_of(p.y, aabb.lo.y, wy));
    let axis = |i: i64, lo: f32, w: f32, o: f32, d: f32| -> (i64, f32, f32) {
        if d > 0.0 {
            (1, (lo + (i + 1) as f32 * w - o) / d, w / d)
        } else if d < 0.0 {
            (-1, (lo + i as f32 * w - o) / d, -w / d)
        } else {
            (0, f32::INFINITY, f32::INFINITY)
        }
    };
    let (sx, mut tx, dtx) = axis(ix, aabb.lo.x, wx, o.x, d.x);
    let (sy, mut ty, dty) = axis(iy, aabb.lo.y, wy, o.y, d.y);
    let mut t = ta;
    loop {
        let exit = tx.min(ty).min(tb);
        out.push(((iy * res + ix) as usize, t, exit.max(t)));
        if exit >= tb {
            break;
        }
        if tx <= ty {
            ix += sx;
            tx += dtx;
        } else {
            iy += sy;
            ty += dty;
        }
        if ix < 0 || iy < 0 || ix >= res || iy >= res {
            break;
        }
        t = exit;
    }
    out
}

/// Front-to-back accumulator shared by the dense and skipping walks.
struct Accum {
    transmittance: f32,
    weight: f32,
    diffuse: [f32; 3],
    specular: [f32; 4],
}

impl Accum {
    fn new() -> Self {
        Self { transmittance: 1.0, weight: 0.0, diffuse: [0.0; 3], specular: [0.0; 4] }
    }

    #[inline]
    fn add(&mut self, density: f32, delta: f32, m: f32, diffuse: &[f32; 3], specular: &[f32; 4]) {
        let alpha = 1.0 - (-density * delta).exp();
        let w = self.transmittance * alpha;
        let contrib = m * w;
        for c in 0..3 {
            self.diffuse[c] += contrib * diffuse[c];
        }
        for c in 0..4 {
            self.specular[c] += contrib * specular[c];
        }
        self.weight += contrib;
        self.transmittance *= 1.0 - m * alpha;
    }

    fn shade(&self, ray: &Ray<f32>, shader: &DeferredShader<f32>, bg: [f32; 3]) -> Result<[f32; 3]> {
        let trace = CompositeTrace {
            alpha: Vec::new(),
            transmittance: vec![self.transmittance],
            weight: Vec::new(),
            occupancy: Vec::new(),
            diffuse: self.diffuse,
            specular: self.specular,
            total_weight: self.weight,
            occupancy_in_transmittance: true,
        };
        Ok(deferred_shade(&trace, ray.dir, shader, Some(bg))?.rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneRepr;

    fn bounds() -> Aabb<f32> {
        Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn model(l: usize, r: usize, m: usize) -> Model<f32> {
        let b = bounds();
        let mut scene = SceneRepr::zeros(b, l, r).unwrap();
        for (i, v) in scene.grid.iter_mut().enumerate() {
            *v = ((i * 7919) % 97) as f32 / 97.0 - 0.5;
        }
        for p in scene.planes.iter_mut() {
            for (i, v) in p.iter_mut().enumerate() {
                *v = ((i * 104_729) % 89) as f32 / 89.0 - 0.5;
            }
        }
        Model { scene, plane: OccupancyPlane::closed(b, m, 0.05).unwrap(), shader: DeferredShader::zeros() }
    }

    #[test]
    fn quantization_half_step() {
        let r = QuantRange { lo: 0.0, hi: 1.0 };
        let v = 0.3;
        assert!((r.decode(r.encode(v, 16), 16) - v).abs() <= 2f64.powi(-17));
        for i in 0..=1000 {
            let v = i as f64 / 1000.0;
            assert!((r.decode(r.encode(v, 8), 8) - v).abs() <= r.step(8) * 0.5 + 1e-15);
        }
    }

    #[test]
    fn height_codes_are_conservative() {
        let h = HeightCodec { z_lo: 0.0, z_hi: 1.0 };
        for i in 0..1000 {
            let z = i as f64 * 0.000_997_3;
            assert!(h.decode(h.encode_floor(z)) <= z);
            assert!(h.decode(h.encode_ceil(z)) >= z);
        }
    }

    #[test]
    fn closed_plane_fails_and_one_column_gives_one_block() {
        let mut m = model(16, 32, 16);
        assert!(bake(&m, [0.5; 3], &BakeOptions::default()).is_err());
        // Column well inside block (1, 1), layers within block z = 0.
        let cell = 5 * 16 + 5;
        m.plane.heights[2 * cell] = 0.12;
        m.plane.heights[2 * cell + 1] = 0.3;
        let a = bake(&m, [0.5; 3], &BakeOptions { block_size: 8, bits: 16, pyramid_levels: 3 }).unwrap();
        assert_eq!(a.blocks, vec![[0, 0, 0]]);
        assert_eq!(a.occupancy.len(), 3);
    }

    #[test]
    fn empty_pyramid_marches_to_background() {
        let mut m = model(16, 32, 16);
        m.plane.heights[0] = 0.0;
        m.plane.heights[1] = 0.01;
        let s = bake(&m, [0.25, 0.5, 0.75], &BakeOptions::default()).unwrap().decode().unwrap();
        let opts = MarchOptions { step: default_step(&s.aabb), skip: true, early_termination: true };
        let (rgb, st) = s.march(Vec3::new(0.5, 0.5, 3.0), Vec3::new(0.0, 0.0, -1.0), &opts).unwrap();
        assert_eq!(rgb, [0.25, 0.5, 0.75]);
        assert_eq!(st.samples, 0);
        assert!(s.march(Vec3::new(0.5, 0.5, 3.0), Vec3::zero(), &opts).is_err());
    }
}
