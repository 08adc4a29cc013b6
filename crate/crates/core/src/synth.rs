//! Procedural ground truth: analytic city-block scenes, a dense reference
//! renderer and capture trajectories.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[allow(unused_imports)] // f64 math without std
use num_traits::Float;

use crate::math::{Aabb, Vec3};
use crate::metrics::Image;
use crate::{Error, Result};

/// Density inside solids, per world unit.
pub const SOLID_DENSITY: f64 = 500.0;
/// Specular exponent of the sheen term.
pub const SHEEN_EXPONENT: i32 = 8;
/// Steps of the dense reference march.
pub const REFERENCE_STEPS: usize = 4096;
/// Transmittance below which the reference march stops.
pub const REFERENCE_CUTOFF: f64 = 1e-6;

pub fn sun_direction() -> Vec3<f64> {
    Vec3::new(0.4, 0.3, 0.85).normalized().unwrap()
}

/// Gaussian bump of the ground height field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

/// Box resting on the bottom of the bounds, rising to `top`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub top: f64,
    pub albedo: [f64; 3],
}

impl Building {
    fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.lo[0] && x <= self.hi[0] && y >= self.lo[1] && y <= self.hi[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.lo[0] + self.hi[0]) * 0.5, (self.lo[1] + self.hi[1]) * 0.5]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_buildings: usize,
    /// Half-width of the square footprint.
    pub footprint: f64,
    pub glossiness: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { seed: 7, n_buildings: 6, footprint: 1.0, glossiness: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub aabb: Aabb<f64>,
    pub ground_base: f64,
    pub bumps: Vec<Bump>,
    pub buildings: Vec<Building>,
    pub glossiness: f64,
    pub background: [f64; 3],
}

/// Where a point sits inside the solid set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Material {
    Empty,
    Ground,
    Building(usize),
}

/// Builds a deterministic scene from `spec`. Buildings do not overlap and
/// rise from the bottom of the bounds, so every column holds one solid
/// interval starting at the floor.
pub fn make_scene(spec: &SceneSpec) -> Result<AnalyticScene> {
    if !(spec.footprint > 0.0) || !(spec.glossiness >= 0.0) {
        return Err(Error::InvalidArgument("footprint must be positive and glossiness non-negative"));
    }
    let f = spec.footprint;
    let aabb = Aabb::new(Vec3::new(-f, -f, 0.0), Vec3::new(f, f, 1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bumps = (0..4)
        .map(|_| Bump {
            center: [rng.random_range(-f..f), rng.random_range(-f..f)],
            sigma: rng.random_range(0.25..0.5) * f,
            amplitude: rng.random_range(0.01..0.04),
        })
        .collect();
    let mut buildings: Vec<Building> = Vec::new();
    let mut attempts = 0;
    while buildings.len() < spec.n_buildings {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Degenerate("could not place non-overlapping buildings"));
        }
        let w = rng.random_range(0.15..0.35) * f;
        let d = rng.random_range(0.15..0.35) * f;
        let cx = rng.random_range((-0.85 * f + w * 0.5)..(0.85 * f - w * 0.5));
        let cy = rng.random_range((-0.85 * f + d * 0.5)..(0.85 * f - d * 0.5));
        let top = rng.random_range(0.18..0.55);
        let albedo = [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)];
        let b = Building { lo: [cx - w * 0.5, cy - d * 0.5], hi: [cx + w * 0.5, cy + d * 0.5], top, albedo };
        let gap = 0.04 * f;
        let clear = buildings.iter().all(|o| {
            b.lo[0] > o.hi[0] + gap || o.lo[0] > b.hi[0] + gap || b.lo[1] > o.hi[1] + gap || o.lo[1] > b.hi[1] + gap
        });
        if clear {
            buildings.push(b);
        }
    }
    Ok(AnalyticScene { aabb, ground_base: 0.06, bumps, buildings, glossiness: spec.glossiness, background: [0.5; 3] })
}

impl AnalyticScene {
    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.ground_base
            + self
                .bumps
                .iter()
                .map(|b| {
                    let (dx, dy) = (x - b.center[0], y - b.center[1]);
                    b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp()
                })
                .sum::<f64>()
    }

    fn ground_normal(&self, x: f64, y: f64) -> Vec3<f64> {
        let (mut gx, mut gy) = (0.0, 0.0);
        for b in &self.bumps {
            let (dx, dy) = (x - b.center[0], y - b.center[1]);
            let e = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
            let s2 = b.sigma * b.sigma;
            gx -= e * dx / s2;
            gy -= e * dy / s2;
        }
        Vec3::new(-gx, -gy, 1.0).normalized().unwrap()
    }

    fn ground_albedo(x: f64, y: f64) -> [f64; 3] {
        [0.35 + 0.1 * (3.0 * x).sin(), 0.45 + 0.1 * (2.0 * y).cos(), 0.3 + 0.05 * (2.5 * (x + y)).sin()]
    }

    /// Top of the solid interval of the column at `(x, y)`; the interval runs
    /// from the floor of the bounds up to this height.
    pub fn column_top(&self, x: f64, y: f64) -> f64 {
        let g = self.ground_height(x, y);
        self.buildings.iter().filter(|b| b.contains_xy(x, y)).fold(g, |m, b| m.max(b.top))
    }

    pub fn material(&self, p: Vec3<f64>) -> Material {
        if !self.aabb.contains(p) {
            return Material::Empty;
        }
        for (i, b) in self.buildings.iter().enumerate() {
            if b.contains_xy(p.x, p.y) && p.z <= b.top && b.top > self.ground_height(p.x, p.y) {
                return Material::Building(i);
            }
        }
        if p.z <= self.ground_height(p.x, p.y) {
            Material::Ground
        } else {
            Material::Empty
        }
    }

    pub fn density(&self, p: Vec3<f64>) -> f64 {
        match self.material(p) {
            Material::Empty => 0.0,
            _ => SOLID_DENSITY,
        }
    }

    /// Normal of the closest face of a building for a point inside it.
    fn building_normal(b: &Building, p: Vec3<f64>) -> Vec3<f64> {
        let faces = [
            (b.top - p.z, Vec3::new(0.0, 0.0, 1.0)),
            (p.x - b.lo[0], Vec3::new(-1.0, 0.0, 0.0)),
            (b.hi[0] - p.x, Vec3::new(1.0, 0.0, 0.0)),
            (p.y - b.lo[1], Vec3::new(0.0, -1.0, 0.0)),
            (b.hi[1] - p.y, Vec3::new(0.0, 1.0, 0.0)),
        ];
        faces.iter().fold(faces[0], |m, f| if f.0 < m.0 { *f } else { m }).1
    }

    /// Emitted color of a solid point seen along unit direction `d`.
    pub fn shade(&self, p: Vec3<f64>, d: Vec3<f64>) -> [f64; 3] {
        let (albedo, n) = match self.material(p) {
            Material::Empty => return [0.0; 3],
            Material::Ground => (Self::ground_albedo(p.x, p.y), self.ground_normal(p.x, p.y)),
            Material::Building(i) => {
                let b = &self.buildings[i];
                (b.albedo, Self::building_normal(b, p))
            }
        };
        let l = sun_direction();
        let ndl = n.dot(l);
        let lambert = 0.7 + 0.3 * ndl.max(0.0);
        // Mirror direction of the sunlight; the sheen peaks when looking back along it.
        let r = n * (2.0 * ndl) - l;
        let sheen = self.glossiness * (-d.dot(r)).max(0.0).powi(SHEEN_EXPONENT);
        albedo.map(|a| (a * lambert + sheen).clamp(0.0, 1.0))
    }

    /// Dense fixed-step march of one ray.
    pub fn trace(&self, origin: Vec3<f64>, dir: Vec3<f64>, steps: usize) -> [f64; 3] {
        let Some(d) = dir.normalized() else {
            return self.background;
        };
        let Some((t0, t1)) = self.aabb.intersect(origin, d) else {
            return self.background;
        };
        let dt = (t1 - t0) / steps as f64;
        let alpha = 1.0 - (-SOLID_DENSITY * dt).exp();
        let mut t_rem = 1.0;
        let mut c = [0.0; 3];
        // Samples above every solid are empty; start just before the first
        // one that can be below.
        let top = self
            .buildings
            .iter()
            .fold(self.ground_base + self.bumps.iter().map(|b| b.amplitude.max(0.0)).sum::<f64>(), |m, b| m.max(b.top));
        let first = if d.z < 0.0 && origin.z + d.z * t0 > top {
            (((top - origin.z) / d.z - t0) / dt - 1.0).floor().max(0.0) as usize
        } else {
            0
        };
        for i in first.min(steps)..steps {
            let p = origin + d * (t0 + (i as f64 + 0.5) * dt);
            if self.material(p) == Material::Empty {
                continue;
            }
            let col = self.shade(p, d);
            for k in 0..3 {
                c[k] += t_rem * alpha * col[k];
            }
            t_rem *= 1.0 - alpha;
            if t_rem < REFERENCE_CUTOFF {
                break;
            }
        }
        core::array::from_fn(|k| c[k] + t_rem * self.background[k])
    }
}

/// Pinhole camera. Camera space looks down `-z` with `+x` right and `+y` up;
/// `c2w` holds the camera-to-world rotation columns and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub c2w: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Train,
    Test,
    Extrapolation,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Train => "train",
            Tag::Test => "test",
            Tag::Extrapolation => "extrapolation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Tag::Train),
            "test" => Some(Tag::Test),
            "extrapolation" => Some(Tag::Extrapolation),
            _ => None,
        }
    }
}

impl Camera {
    /// Camera at `eye` looking at `target` with world `+z` up.
    pub fn look_at(eye: Vec3<f64>, target: Vec3<f64>, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let fwd = (target - eye).normalized().ok_or(Error::InvalidArgument("eye and target coincide"))?;
        let right = fwd
            .cross(Vec3::new(0.0, 0.0, 1.0))
            .normalized()
            .ok_or(Error::InvalidArgument("view direction is vertical"))?;
        let up = right.cross(fwd);
        let back = -fwd;
        let c2w = [
            [right.x, up.x, back.x, eye.x],
            [right.y, up.y, back.y, eye.y],
            [right.z, up.z, back.z, eye.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Ok(Self { c2w, fx: f, fy: f, cx: width as f64 * 0.5, cy: height as f64 * 0.5, width, height })
    }

    pub fn origin(&self) -> Vec3<f64> {
        Vec3::new(self.c2w[0][3], self.c2w[1][3], self.c2w[2][3])
    }

    pub fn forward(&self) -> Vec3<f64> {
        Vec3::new(-self.c2w[0][2], -self.c2w[1][2], -self.c2w[2][2])
    }

    /// Angle of the optical axis below the horizon, in degrees.
    pub fn pitch_deg(&self) -> f64 {
        (-self.forward().z).clamp(-1.0, 1.0).asin().to_degrees()
    }

    pub fn azimuth_deg(&self) -> f64 {
        let f = self.forward();
        f.y.atan2(f.x).to_degrees()
    }

    /// Unit world ray through image position `(u, v)` in pixels (pixel centers
    /// sit at half-integers).
    pub fn ray_at(&self, u: f64, v: f64) -> (Vec3<f64>, Vec3<f64>) {
        let dc = Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0);
        let m = &self.c2w;
        let d = Vec3::new(
            m[0][0] * dc.x + m[0][1] * dc.y + m[0][2] * dc.z,
            m[1][0] * dc.x + m[1][1] * dc.y + m[1][2] * dc.z,
            m[2][0] * dc.x + m[2][1] * dc.y + m[2][2] * dc.z,
        );
        (self.origin(), d.normalized().unwrap())
    }

    pub fn pixel_ray(&self, px: usize, py: usize) -> (Vec3<f64>, Vec3<f64>) {
        self.ray_at(px as f64 + 0.5, py as f64 + 0.5)
    }
}

/// Ground-truth image with `spp` samples per pixel on a regular sub-pixel
/// grid (`ceil(sqrt(spp))^2` samples).
pub fn reference_render(scene: &AnalyticScene, cam: &Camera, spp: usize) -> Image {
    reference_render_steps(scene, cam, spp, REFERENCE_STEPS)
}

pub fn reference_render_steps(scene: &AnalyticScene, cam: &Camera, spp: usize, steps: usize) -> Image {
    let k = (spp.max(1) as f64).sqrt().ceil() as usize;
    let mut im = Image::new(cam.width, cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut acc = [0.0; 3];
            for sy in 0..k {
                for sx in 0..k {
                    let u = px as f64 + (sx as f64 + 0.5) / k as f64;
                    let v = py as f64 + (sy as f64 + 0.5) / k as f64;
                    let (o, d) = cam.ray_at(u, v);
                    let c = scene.trace(o, d, steps);
                    for i in 0..3 {
                        acc[i] += c[i];
                    }
                }
            }
            let n = (k * k) as f64;
            im.set(px, py, acc.map(|v| (v / n) as f32));
        }
    }
    im
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryStyle {
    /// Ring around the scene center.
    Surround { radius: f64 },
    /// Serpentine lattice of poses, `spacing` apart, at `altitude`.
    Grid { spacing: f64, altitude: f64 },
    /// Low ring around a chosen point.
    Extrapolation { radius: f64, target: [f64; 3] },
}

/// `n` cameras of the given style, all pitched `tilt_deg` below the horizon.
pub fn gen_trajectory(
    aabb: &Aabb<f64>,
    style: TrajectoryStyle,
    tilt_deg: f64,
    n: usize,
    fov_y_deg: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    if !(tilt_deg > 0.0 && tilt_deg < 90.0) {
        return Err(Error::InvalidArgument("tilt must lie strictly between 0 and 90 degrees"));
    }
    let tilt = tilt_deg.to_radians();
    let c = aabb.center();
    let ring = |target: Vec3<f64>, radius: f64| -> Result<Vec<Camera>> {
        (0..n)
            .map(|i| {
                let phi = core::f64::consts::TAU * i as f64 / n as f64;
                let off = Vec3::new(phi.cos() * tilt.cos(), phi.sin() * tilt.cos(), tilt.sin()) * radius;
                Camera::look_at(target + off, target, fov_y_deg, width, height)
            })
            .collect()
    };
    match style {
        TrajectoryStyle::Surround { radius } => ring(Vec3::new(c.x, c.y, aabb.lo.z + 0.1), radius),
        TrajectoryStyle::Extrapolation { radius, target } => ring(Vec3::from_array(target), radius),
        TrajectoryStyle::Grid { spacing, altitude } => {
            let k = (n as f64).sqrt().ceil().max(1.0) as usize;
            let half = (k as f64 - 1.0) * 0.5 * spacing;
            let mut cams = Vec::with_capacity(n);
            'rows: for row in 0..k {
                for col in 0..k {
                    if cams.len() == n {
                        break 'rows;
                    }
                    let col = if row % 2 == 0 { col } else { k - 1 - col };
                    let heading = if row % 2 == 0 { 1.0 } else { -1.0 };
                    let x = c.x - half + col as f64 * spacing;
                    let y = c.y - half + row as f64 * spacing;
                    // Look at the ground point `altitude / tan(tilt)` ahead of the pose.
                    let reach = altitude / tilt.tan();
                    let eye = Vec3::new(x, y - heading * reach * 0.5, altitude);
                    let target = Vec3::new(x, y + heading * reach * 0.5, 0.0);
                    cams.push(Camera::look_at(eye, target, fov_y_deg, width, height)?);
                }
            }
            Ok(cams)
        }
    }
}
