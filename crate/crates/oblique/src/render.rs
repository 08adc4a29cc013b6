//! Image rendering: training-mode renders of a model and marched renders of
//! a baked scene, plus the camera syntax used on the command line.

use std::time::Instant;

use oblique_core::bake::{default_step, BakedScene, MarchOptions};
use oblique_core::math::{Aabb, Vec3};
use oblique_core::metrics::Image;
use oblique_core::render::{render_samples, sample_ray_fixed_step, sample_ray_midpoints, Model, Ray, RenderConfig};
use oblique_core::synth::Camera;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic sample placement for training-mode renders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Midpoints of `n` equal strata.
    Midpoints(usize),
    /// The marcher's lattice `t_near + j * step`.
    FixedStep(f32),
}

fn ray32(cam: &Camera, px: usize, py: usize) -> (Vec3<f32>, Vec3<f32>) {
    let (o, d) = cam.pixel_ray(px, py);
    (o.cast(), d.cast())
}

fn par_image(width: usize, height: usize, pixel: impl Fn(usize, usize) -> Result<[f32; 3]> + Sync) -> Result<Image> {
    let rows: Vec<Vec<[f32; 3]>> = (0..height)
        .into_par_iter()
        .map(|y| (0..width).map(|x| pixel(x, y)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut im = Image::new(width, height);
    for (y, row) in rows.iter().enumerate() {
        for (x, c) in row.iter().enumerate() {
            im.set(x, y, *c);
        }
    }
    Ok(im)
}

/// Training-mode render (same code path as training, no randomness).
pub fn render_model(model: &Model<f32>, cfg: &RenderConfig<f32>, cam: &Camera, sampling: Sampling) -> Result<Image> {
    par_image(cam.width, cam.height, |x, y| {
        let (o, d) = ray32(cam, x, y);
        let ray = Ray::through(&model.scene.aabb, o, d)?;
        let samples = match (&ray, sampling) {
            (None, _) => Vec::new(),
            (Some(r), Sampling::Midpoints(n)) => sample_ray_midpoints(r, n, &model.plane),
            (Some(r), Sampling::FixedStep(s)) => sample_ray_fixed_step(r, s, &model.plane),
        };
        Ok(render_samples(model, cfg, ray, samples)?.rgb)
    })
}

/// Per-frame marcher counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarchStats {
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub samples: Vec<u32>,
    #[serde(skip)]
    pub skipped_cells: Vec<u32>,
    pub total_samples: u64,
    pub total_fetched: u64,
    pub total_skipped_cells: u64,
    pub mean_samples: f64,
    pub max_samples: u32,
    pub ms_per_frame: f64,
}

pub fn march_options(scene: &BakedScene, step: Option<f64>, skip: bool, early_termination: bool) -> MarchOptions {
    MarchOptions { step: step.map(|s| s as f32).unwrap_or_else(|| default_step(&scene.aabb)), skip, early_termination }
}

/// Marches one ray per pixel center.
pub fn render_baked(scene: &BakedScene, cam: &Camera, opts: &MarchOptions) -> Result<(Image, MarchStats)> {
    let start = Instant::now();
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<([f32; 3], oblique_core::bake::RayStats)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (o, d) = ray32(cam, x, y);
                    Ok(scene.march(o, d, opts)?)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let mut im = Image::new(w, h);
    let mut samples = Vec::with_capacity(w * h);
    let mut skipped = Vec::with_capacity(w * h);
    let mut fetched = 0u64;
    for (y, row) in rows.iter().enumerate() {
        for (x, (c, st)) in row.iter().enumerate() {
            im.set(x, y, *c);
            samples.push(st.samples);
            skipped.push(st.skipped_cells);
            fetched += st.fetched as u64;
        }
    }
    let total: u64 = samples.iter().map(|&s| s as u64).sum();
    let stats = MarchStats {
        width: w,
        height: h,
        total_samples: total,
        total_fetched: fetched,
        total_skipped_cells: skipped.iter().map(|&s| s as u64).sum(),
        mean_samples: total as f64 / (w * h).max(1) as f64,
        max_samples: samples.iter().copied().max().unwrap_or(0),
        samples,
        skipped_cells: skipped,
        ms_per_frame: ms,
    };
    Ok((im, stats))
}

/// Sample-count heatmap: black (0) through red and yellow to white (frame
/// maximum).
pub fn heatmap(stats: &MarchStats) -> Image {
    let max = stats.max_samples.max(1) as f32;
    let data = stats
        .samples
        .iter()
        .flat_map(|&s| {
            let t = s as f32 / max;
            [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
        })
        .collect();
    Image::from_data(stats.width, stats.height, data).expect("heatmap size")
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(path: &std::path::Path, im: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(im.width as u32, im.height as u32, im.to_rgb8()).expect("image buffer size");
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

/// Camera given as `orbit:az=<deg>,tilt=<deg>,r=<dist>`: on a circle around
/// the footprint center, pitched `tilt` below the horizon, looking at a point
/// just above the floor (the training rings use the same target).
pub fn parse_camera(spec: &str, aabb: &Aabb<f64>, fov_deg: f64, width: usize, height: usize) -> Result<Camera> {
    let bad = |m: String| Error::Config(format!("camera {spec:?}: {m}"));
    let (kind, args) = spec.split_once(':').ok_or_else(|| bad("expected <kind>:<args>".into()))?;
    if kind != "orbit" {
        return Err(bad(format!("unknown camera kind {kind:?}")));
    }
    let (mut az, mut tilt, mut r) = (None, None, None);
    for kv in args.split(',') {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
        let v: f64 = v.trim().parse().map_err(|_| bad(format!("{k} is not a number")))?;
        match k.trim() {
            "az" => az = Some(v),
            "tilt" => tilt = Some(v),
            "r" => r = Some(v),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let (az, tilt, r) = (az.unwrap_or(0.0), tilt.unwrap_or(60.0), r.ok_or_else(|| bad("missing r".into()))?);
    if !(tilt > 0.0 && tilt < 90.0) || !(r > 0.0) {
        return Err(bad("need 0 < tilt < 90 and r > 0".into()));
    }
    let c = aabb.center();
    let target = Vec3::new(c.x, c.y, aabb.lo.z + 0.1);
    let (a, t) = (az.to_radians(), tilt.to_radians());
    let eye = target + Vec3::new(a.cos() * t.cos(), a.sin() * t.cos(), t.sin()) * r;
    Ok(Camera::look_at(eye, target, fov_deg, width, height)?)
}
