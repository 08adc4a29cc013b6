//! Binary checkpoint container.
//!
//! All integers and floats are little-endian; floats are 32-bit.
//!
//! ```text
//! magic         4 bytes  "OBLQ"
//! version       u32      1
//! config_hash   u64
//! seed          u64      base training seed (all step randomness derives from it)
//! iteration     u64      completed iterations
//! aabb          6 x f32  lo.xyz, hi.xyz
//! grid_res      u32      L
//! plane_res     u32      R
//! occ_res       u32      M
//! epsilon, q    2 x f32
//! grid          L^3 * 8 f32, index ((z * L + y) * L + x) * 8 + c
//! planes        3 x R^2 * 8 f32 (yz, xz, xy planes), index (v * R + u) * 8 + c
//! heights       M^2 * 2 f32, (z_min, z_max) per column, row-major in y
//! shader        u32 count, then count x f32
//! moments       6 groups (grid, plane_yz, plane_xz, plane_xy, shader, heights), each:
//!               u64 step, u64 skipped, u32 n, n x f32 m, n x f32 v
//! ```

use std::io::{Read, Write};
use std::path::Path;

use oblique_core::math::{Aabb, Vec3};
use oblique_core::occupancy::OccupancyPlane;
use oblique_core::optim::AdamState;
use oblique_core::render::Model;
use oblique_core::scene::{SceneRepr, FEATURES};
use oblique_core::shader::DeferredShader;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OBLQ";
pub const VERSION: u32 = 1;

/// Adam moments, one state per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub grid: AdamState<f32>,
    pub planes: [AdamState<f32>; 3],
    pub shader: AdamState<f32>,
    pub heights: AdamState<f32>,
}

impl Moments {
    pub fn new(model: &Model<f32>) -> Self {
        Self {
            grid: AdamState::new(model.scene.grid.len()),
            planes: core::array::from_fn(|k| AdamState::new(model.scene.planes[k].len())),
            shader: AdamState::new(model.shader.params.len()),
            heights: AdamState::new(model.plane.heights.len()),
        }
    }

    fn all(&self) -> [&AdamState<f32>; 6] {
        [&self.grid, &self.planes[0], &self.planes[1], &self.planes[2], &self.shader, &self.heights]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub seed: u64,
    pub iteration: u64,
    pub model: Model<f32>,
    pub moments: Moments,
}

struct W<'a>(&'a mut Vec<u8>);

impl W<'_> {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct R<'a> {
    buf: &'a [u8],
    at: usize,
}

impl R<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let b = self.take(n.checked_mul(4)?)?;
        Some(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let mut w = W(&mut buf);
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.config_hash);
        w.u64(self.seed);
        w.u64(self.iteration);
        let s = &self.model.scene;
        w.f32s(&[s.aabb.lo.x, s.aabb.lo.y, s.aabb.lo.z, s.aabb.hi.x, s.aabb.hi.y, s.aabb.hi.z]);
        w.u32(s.grid_res as u32);
        w.u32(s.plane_res as u32);
        w.u32(self.model.plane.res as u32);
        w.f32s(&[self.model.plane.epsilon, self.model.plane.q]);
        w.f32s(&s.grid);
        for p in &s.planes {
            w.f32s(p);
        }
        w.f32s(&self.model.plane.heights);
        w.u32(self.model.shader.params.len() as u32);
        w.f32s(&self.model.shader.params);
        for st in self.moments.all() {
            w.u64(st.step);
            w.u64(st.skipped);
            w.u32(st.m.len() as u32);
            w.f32s(&st.m);
            w.f32s(&st.v);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        let mut r = R { buf: bytes, at: 0 };
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(Error::Version { path: path.into(), found: version, expected: VERSION });
        }
        let trunc = || bad("truncated checkpoint");
        let config_hash = r.u64().ok_or_else(trunc)?;
        let seed = r.u64().ok_or_else(trunc)?;
        let iteration = r.u64().ok_or_else(trunc)?;
        let b = r.f32s(6).ok_or_else(trunc)?;
        let aabb = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))?;
        let l = r.u32().ok_or_else(trunc)? as usize;
        let res = r.u32().ok_or_else(trunc)? as usize;
        let m = r.u32().ok_or_else(trunc)? as usize;
        if l > 4096 || res > 16384 || m > 16384 {
            return Err(bad("implausible resolution"));
        }
        let eq = r.f32s(2).ok_or_else(trunc)?;
        let mut scene = SceneRepr::zeros(aabb, l, res)?;
        scene.grid = r.f32s(l * l * l * FEATURES).ok_or_else(trunc)?;
        for p in scene.planes.iter_mut() {
            *p = r.f32s(res * res * FEATURES).ok_or_else(trunc)?;
        }
        let mut plane = OccupancyPlane::open(aabb, m, eq[0])?;
        plane.q = eq[1];
        plane.heights = r.f32s(m * m * 2).ok_or_else(trunc)?;
        plane.validate()?;
        let n = r.u32().ok_or_else(trunc)? as usize;
        let shader = DeferredShader::from_params(r.f32s(n).ok_or_else(trunc)?)?;
        let model = Model { scene, plane, shader };
        let mut moments = Moments::new(&model);
        let expected =
            [model.scene.grid.len(), res * res * FEATURES, res * res * FEATURES, res * res * FEATURES, n, m * m * 2];
        let slots: [&mut AdamState<f32>; 6] = {
            let [p0, p1, p2] = &mut moments.planes;
            [&mut moments.grid, p0, p1, p2, &mut moments.shader, &mut moments.heights]
        };
        for (st, want) in slots.into_iter().zip(expected) {
            st.step = r.u64().ok_or_else(trunc)?;
            st.skipped = r.u64().ok_or_else(trunc)?;
            let n = r.u32().ok_or_else(trunc)? as usize;
            if n != want {
                return Err(bad("moment size does not match its tensor"));
            }
            st.m = r.f32s(n).ok_or_else(trunc)?;
            st.v = r.f32s(n).ok_or_else(trunc)?;
        }
        if r.at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config_hash, seed, iteration, model, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(&self.to_bytes()).map_err(Error::io(&tmp))?;
        f.sync_all().map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let aabb = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let model = Model {
            scene: SceneRepr::init(aabb, 4, 8, &mut rng).unwrap(),
            plane: OccupancyPlane::open(aabb, 4, 0.1).unwrap(),
            shader: DeferredShader::init(&mut rng),
        };
        let mut moments = Moments::new(&model);
        moments.grid.m[3] = 0.25;
        moments.heights.step = 7;
        Checkpoint { config_hash: 0xfeed, seed: 5, iteration: 12, model, moments }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let p = Path::new("x.ckpt");
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes(), p).unwrap(), c);
    }

    #[test]
    fn rejects_damage() {
        let c = sample();
        let p = Path::new("x.ckpt");
        let mut b = c.to_bytes();
        b.pop();
        assert!(matches!(Checkpoint::from_bytes(&b, p), Err(Error::Format { .. })));
        let mut b = c.to_bytes();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b, p), Err(Error::Version { found: 9, .. })));
        let mut b = c.to_bytes();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b, p).is_err());
    }
}
