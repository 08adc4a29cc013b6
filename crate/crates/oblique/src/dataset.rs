//! Synthetic capture datasets and their on-disk form.
//!
//! A dataset directory holds `transforms.json` and `images/*.png` (8-bit RGB):
//!
//! ```json
//! {
//!   "version": 1,
//!   "aabb": {"lo": [x, y, z], "hi": [x, y, z]},
//!   "background": [r, g, b],
//!   "frames": [{
//!     "file_path": "images/000.png",
//!     "tag": "train" | "test" | "extrapolation",
//!     "transform_matrix": [[...4], [...4], [...4], [...4]],
//!     "fl_x": f, "fl_y": f, "cx": f, "cy": f, "w": n, "h": n
//!   }]
//! }
//! ```
//!
//! `transform_matrix` is camera-to-world with the camera looking down `-z`.
//! Numbers use the shortest decimal form that parses back to the same
//! double, so poses round-trip bit-exactly.

use std::path::Path;

use oblique_core::math::{Aabb, Vec3};
use oblique_core::metrics::Image;
use oblique_core::synth::{
    gen_trajectory, make_scene, reference_render, AnalyticScene, Camera, SceneSpec, Tag, TrajectoryStyle,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, SceneConfig};
use crate::error::{Error, Result};

pub const TRANSFORMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    pub tag: Tag,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub aabb: Aabb<f64>,
    pub background: [f32; 3],
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AabbJson {
    lo: [f64; 3],
    hi: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameJson {
    file_path: String,
    tag: String,
    transform_matrix: [[f64; 4]; 4],
    fl_x: f64,
    fl_y: f64,
    cx: f64,
    cy: f64,
    w: usize,
    h: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformsJson {
    version: u32,
    aabb: AabbJson,
    background: [f32; 3],
    frames: Vec<FrameJson>,
}

pub fn scene_from(cfg: &SceneConfig) -> Result<AnalyticScene> {
    Ok(make_scene(&SceneSpec {
        seed: cfg.seed,
        n_buildings: cfg.n_buildings,
        footprint: cfg.footprint,
        glossiness: cfg.glossiness,
    })?)
}

/// Camera poses of every tag: a training ring, held-out views on the same
/// ring halfway between training azimuths, and a low extrapolation ring.
pub fn cameras(aabb: &Aabb<f64>, cfg: &DatasetConfig) -> Result<Vec<(Camera, Tag)>> {
    let (w, h, fov) = (cfg.width, cfg.height, cfg.fov_deg);
    let ring = TrajectoryStyle::Surround { radius: cfg.radius };
    let train = gen_trajectory(aabb, ring, cfg.train_tilt_deg, cfg.train_views, fov, w, h)?;
    let mut out: Vec<(Camera, Tag)> = train.iter().map(|c| (*c, Tag::Train)).collect();
    // Test view k sits halfway between two neighbouring training views.
    let half_gap = std::f64::consts::PI / cfg.train_views as f64;
    for k in 0..cfg.test_views {
        let j = k * cfg.train_views / cfg.test_views;
        out.push((rotate_z(&train[j], aabb.center(), half_gap, fov)?, Tag::Test));
    }
    if cfg.extrapolation_views > 0 {
        let target = Vec3::new(aabb.center().x, aabb.center().y, aabb.lo.z + 0.1);
        let style = TrajectoryStyle::Extrapolation { radius: cfg.extrapolation_radius, target: target.to_array() };
        for c in gen_trajectory(aabb, style, cfg.extrapolation_tilt_deg, cfg.extrapolation_views, fov, w, h)? {
            out.push((c, Tag::Extrapolation));
        }
    }
    Ok(out)
}

/// `cam` orbited by `angle` about the vertical axis through `center`.
fn rotate_z(cam: &Camera, center: Vec3<f64>, angle: f64, fov: f64) -> Result<Camera> {
    let (s, c) = angle.sin_cos();
    let rot = |v: Vec3<f64>| Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
    let eye = cam.origin() - Vec3::new(center.x, center.y, 0.0);
    let eye = rot(eye) + Vec3::new(center.x, center.y, 0.0);
    // Same pitch: look along the rotated forward vector.
    let target = eye + rot(cam.forward());
    Ok(Camera::look_at(eye, target, fov, cam.width, cam.height)?)
}

/// Rounds to the 8-bit values a PNG round trip would give.
fn quantize8(im: &mut Image) {
    for v in im.data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Renders ground truth for every camera (8-bit quantized, as stored).
pub fn generate(scene: &AnalyticScene, cfg: &DatasetConfig) -> Result<Dataset> {
    let cams = cameras(&scene.aabb, cfg)?;
    let frames = cams
        .par_iter()
        .map(|(camera, tag)| {
            let mut image = reference_render(scene, camera, cfg.spp);
            quantize8(&mut image);
            Frame { camera: *camera, tag: *tag, image }
        })
        .collect();
    Ok(Dataset { aabb: scene.aabb, background: scene.background.map(|v| v as f32), frames })
}

impl Dataset {
    pub fn tagged(&self, tag: Tag) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.tag == tag)
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.tagged(tag).count()
    }

    pub fn export(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(Error::io(&images))?;
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            let rel = format!("images/{i:03}.png");
            let path = dir.join(&rel);
            crate::render::save_png(&path, &f.image)?;
            let c = &f.camera;
            frames.push(FrameJson {
                file_path: rel,
                tag: f.tag.as_str().into(),
                transform_matrix: c.c2w,
                fl_x: c.fx,
                fl_y: c.fy,
                cx: c.cx,
                cy: c.cy,
                w: c.width,
                h: c.height,
            });
        }
        let doc = TransformsJson {
            version: TRANSFORMS_VERSION,
            aabb: AabbJson { lo: self.aabb.lo.to_array(), hi: self.aabb.hi.to_array() },
            background: self.background,
            frames,
        };
        let path = dir.join("transforms.json");
        let text = serde_json::to_string_pretty(&doc).expect("transforms serialize");
        std::fs::write(&path, text).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("transforms.json");
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let doc: TransformsJson =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
        if doc.version != TRANSFORMS_VERSION {
            return Err(Error::Version { path, found: doc.version, expected: TRANSFORMS_VERSION });
        }
        let aabb = Aabb::new(Vec3::from_array(doc.aabb.lo), Vec3::from_array(doc.aabb.hi))
            .map_err(|_| Error::format(&path, "degenerate aabb"))?;
        let mut frames = Vec::with_capacity(doc.frames.len());
        for f in doc.frames {
            let tag = Tag::parse(&f.tag).ok_or_else(|| Error::format(&path, format!("unknown tag {:?}", f.tag)))?;
            let ip = dir.join(&f.file_path);
            if !ip.is_file() {
                return Err(Error::MissingFile(ip));
            }
            let rgb = image::open(&ip).map_err(|source| Error::Image { path: ip.clone(), source })?.to_rgb8();
            if (rgb.width() as usize, rgb.height() as usize) != (f.w, f.h) {
                return Err(Error::format(&ip, "image size does not match its frame"));
            }
            let data = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
            let camera =
                Camera { c2w: f.transform_matrix, fx: f.fl_x, fy: f.fl_y, cx: f.cx, cy: f.cy, width: f.w, height: f.h };
            frames.push(Frame { camera, tag, image: Image::from_data(f.w, f.h, data)? });
        }
        Ok(Self { aabb, background: doc.background, frames })
    }
}
