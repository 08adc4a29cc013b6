//! Experiment harness: evaluates a trained model through its baked bundle
//! and runs the two ablation twins.
//!
//! `report.json` is the serde form of [`ExperimentReport`]. `report.csv` is
//! a long table with header `section,key,tag,metric,value`:
//!
//! ```text
//! meta,name,,,<text>            one row per scalar field (key = field name)
//! view,<index>,<tag>,psnr,<dB>  per-view rows, also with metric ssim
//! mean,,<tag>,views,<count>     per-tag means, also psnr and ssim
//! or,<grid_res>,,ratio,<frac>   occupancy ratio per grid resolution
//! ```
//!
//! Floats are written in their shortest round-trip form, so the CSV parses
//! back to exactly the JSON values.

use std::path::Path;

use base64::Engine;
use oblique_core::bake::{bake, BakeOptions, BakedAssets, MarchOptions};
use oblique_core::losses::smooth_loss;
use oblique_core::metrics::{psnr, ssim};
use oblique_core::objective::{photometric, stream_rng, ObjectiveConfig, TrainRay};
use oblique_core::render::Model;
use oblique_core::synth::Tag;
use serde::{Deserialize, Serialize};

use crate::bundle::{self, Manifest};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::render::{heatmap, march_options, render_baked, save_png};
use crate::trainer::{StepLog, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    /// Frame index in the dataset.
    pub index: usize,
    pub tag: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMean {
    pub tag: String,
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrRow {
    pub grid_res: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub iterations: u64,
    pub views: Vec<ViewRow>,
    pub means: Vec<TagMean>,
    pub occupancy: Vec<OrRow>,
    pub bundle_bytes: u64,
    pub vram_bytes: u64,
    pub samples_per_ray_dense: f64,
    pub samples_per_ray_skip: f64,
    /// Mean unweighted smooth term per ray over a fixed set of training rays.
    pub smooth_loss: f64,
}

impl ExperimentReport {
    pub fn mean(&self, tag: Tag) -> Option<&TagMean> {
        self.means.iter().find(|m| m.tag == tag.as_str())
    }

    pub fn occupancy_ratio(&self, grid_res: usize) -> Option<f64> {
        self.occupancy.iter().find(|o| o.grid_res == grid_res).map(|o| o.ratio)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |s: &str, k: &str, t: &str, m: &str, v: String| {
            w.write_record([s, k, t, m, v.as_str()]).expect("csv to memory");
        };
        row("section", "key", "tag", "metric", "value".into());
        row("meta", "name", "", "", self.name.clone());
        row("meta", "config_hash", "", "", self.config_hash.clone());
        row("meta", "iterations", "", "", self.iterations.to_string());
        row("meta", "bundle_bytes", "", "", self.bundle_bytes.to_string());
        row("meta", "vram_bytes", "", "", self.vram_bytes.to_string());
        row("meta", "samples_per_ray_dense", "", "", self.samples_per_ray_dense.to_string());
        row("meta", "samples_per_ray_skip", "", "", self.samples_per_ray_skip.to_string());
        row("meta", "smooth_loss", "", "", self.smooth_loss.to_string());
        for v in &self.views {
            let i = v.index.to_string();
            row("view", &i, &v.tag, "psnr", v.psnr.to_string());
            row("view", &i, &v.tag, "ssim", v.ssim.to_string());
        }
        for m in &self.means {
            row("mean", "", &m.tag, "views", m.views.to_string());
            row("mean", "", &m.tag, "psnr", m.psnr.to_string());
            row("mean", "", &m.tag, "ssim", m.ssim.to_string());
        }
        for o in &self.occupancy {
            row("or", &o.grid_res.to_string(), "", "ratio", o.ratio.to_string());
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let mut r = Self {
            name: String::new(),
            config_hash: String::new(),
            iterations: 0,
            views: Vec::new(),
            means: Vec::new(),
            occupancy: Vec::new(),
            bundle_bytes: 0,
            vram_bytes: 0,
            samples_per_ray_dense: 0.0,
            samples_per_ray_skip: 0.0,
            smooth_loss: 0.0,
        };
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        for rec in rd.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let [s, k, t, m, v] = [0, 1, 2, 3, 4].map(|i| rec.get(i).unwrap_or(""));
            let f = || v.parse::<f64>().map_err(|_| bad(format!("{v:?} is not a number")));
            let n = || v.parse::<u64>().map_err(|_| bad(format!("{v:?} is not an integer")));
            match (s, k) {
                ("meta", "name") => r.name = v.into(),
                ("meta", "config_hash") => r.config_hash = v.into(),
                ("meta", "iterations") => r.iterations = n()?,
                ("meta", "bundle_bytes") => r.bundle_bytes = n()?,
                ("meta", "vram_bytes") => r.vram_bytes = n()?,
                ("meta", "samples_per_ray_dense") => r.samples_per_ray_dense = f()?,
                ("meta", "samples_per_ray_skip") => r.samples_per_ray_skip = f()?,
                ("meta", "smooth_loss") => r.smooth_loss = f()?,
                ("view", _) => {
                    let index = k.parse().map_err(|_| bad(format!("bad view index {k:?}")))?;
                    if r.views.last().map(|x| x.index) != Some(index) {
                        r.views.push(ViewRow { index, tag: t.into(), psnr: f64::NAN, ssim: f64::NAN });
                    }
                    let last = r.views.last_mut().unwrap();
                    match m {
                        "psnr" => last.psnr = f()?,
                        "ssim" => last.ssim = f()?,
                        _ => return Err(bad(format!("unknown view metric {m:?}"))),
                    }
                }
                ("mean", _) => {
                    if r.means.last().map(|x| x.tag.as_str()) != Some(t) {
                        r.means.push(TagMean { tag: t.into(), views: 0, psnr: f64::NAN, ssim: f64::NAN });
                    }
                    let last = r.means.last_mut().unwrap();
                    match m {
                        "views" => last.views = n()? as usize,
                        "psnr" => last.psnr = f()?,
                        "ssim" => last.ssim = f()?,
                        _ => return Err(bad(format!("unknown mean metric {m:?}"))),
                    }
                }
                ("or", _) => {
                    let grid_res = k.parse().map_err(|_| bad(format!("bad grid resolution {k:?}")))?;
                    r.occupancy.push(OrRow { grid_res, ratio: f()? });
                }
                _ => return Err(bad(format!("unknown row {s},{k}"))),
            }
        }
        Ok(r)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let j = dir.join("report.json");
        std::fs::write(&j, self.to_json()).map_err(Error::io(&j))?;
        let c = dir.join("report.csv");
        std::fs::write(&c, self.to_csv()).map_err(Error::io(&c))
    }
}

/// Decoded texture bytes of a bundle: atlas pages, plane textures and
/// pyramid levels at their stored depth, plus f32 shader weights.
pub fn estimate_vram(m: &Manifest) -> u64 {
    let depth = (m.bits / 8) as u64;
    let a = &m.atlas;
    let tiles_rows = m.block_count.div_ceil(a.tiles_per_row.max(1)) as u64;
    let atlas = tiles_rows * (a.tiles_per_row * a.tile_width * a.tile_height) as u64 * 8 * depth;
    let planes: u64 = m.plane_rows.iter().map(|[_, rows]| (m.plane_res * rows) as u64 * 8 * depth).sum();
    let pyramid: u64 = m.occupancy_res.iter().map(|r| (r * r) as u64 * 2 * 2).sum();
    let shader = base64::engine::general_purpose::STANDARD.decode(&m.shader).map_or(0, |b| b.len() as u64);
    atlas + planes + pyramid + shader
}

pub fn bake_options(cfg: &RunConfig) -> BakeOptions {
    BakeOptions { block_size: cfg.bake.block_size, bits: cfg.bake.bits, pyramid_levels: cfg.bake.pyramid_levels }
}

pub fn bake_model(model: &Model<f32>, cfg: &RunConfig) -> Result<BakedAssets> {
    Ok(bake(model, cfg.model.background, &bake_options(cfg))?)
}

/// Trains `cfg` from scratch, returning the trainer and its log.
pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<(Trainer, Vec<StepLog>)> {
    let mut t = Trainer::new(cfg.clone(), dataset)?;
    let mut log = Vec::new();
    t.run(dataset, |_, row| {
        log.push(row.clone());
        Ok(())
    })?;
    Ok((t, log))
}

/// Rays used by [`measure_smooth`]: an even stride over training pixels.
const SMOOTH_PROBE_RAYS: usize = 2048;
const SMOOTH_PROBE_SEED: u64 = 0x5eed_5e0e;

/// Mean unweighted smooth term of `model` per ray, over a fixed probe set.
pub fn measure_smooth(model: &Model<f32>, cfg: &RunConfig, dataset: &Dataset) -> Result<f64> {
    let rays: Vec<TrainRay<f32>> = dataset
        .tagged(Tag::Train)
        .flat_map(|f| {
            (0..f.camera.height).flat_map(move |y| {
                (0..f.camera.width).map(move |x| {
                    let (o, d) = f.camera.pixel_ray(x, y);
                    TrainRay { origin: o.cast(), dir: d.cast(), target: f.image.get(x, y) }
                })
            })
        })
        .collect();
    let stride = (rays.len() / SMOOTH_PROBE_RAYS).max(1);
    let ocfg = ObjectiveConfig {
        render: oblique_core::render::RenderConfig {
            n_samples: cfg.train.samples,
            background: cfg.model.background,
            occupancy_in_transmittance: cfg.train.occupancy_in_transmittance,
        },
        weights: cfg.loss_weights(0.0),
        lambda7: 0.0,
        entropy_samples: cfg.train.entropy_samples,
    };
    let (mut feats, mut dirs) = (Vec::new(), Vec::new());
    for (i, ray) in rays.iter().step_by(stride).enumerate() {
        let out = photometric(model, &ocfg, ray, &mut stream_rng(SMOOTH_PROBE_SEED, i as u64), None)?;
        if let Some(f) = out.features {
            feats.push(f);
            dirs.push(ray.dir.normalized().unwrap_or(ray.dir));
        }
    }
    if feats.is_empty() {
        return Ok(0.0);
    }
    let mut rng = stream_rng(SMOOTH_PROBE_SEED, u64::MAX);
    let sigma = cfg.train.smooth_sigma as f32;
    let total = smooth_loss(&model.shader, &feats, &dirs, sigma, &mut rng, None)?;
    Ok(total as f64 / feats.len() as f64)
}

/// Bakes `model` into `out/bundle`, renders every dataset view through the
/// skipping marcher and writes heatmaps plus `report.{json,csv}` into `out`.
pub fn evaluate(
    name: &str,
    cfg: &RunConfig,
    dataset: &Dataset,
    model: &Model<f32>,
    iterations: u64,
    out: &Path,
) -> Result<ExperimentReport> {
    let bdir = out.join("bundle");
    let manifest = bundle::write(&bake_model(model, cfg)?, &bdir)?;
    let scene = bundle::read(&bdir)?.decode()?;
    let hdir = out.join("heatmaps");
    std::fs::create_dir_all(&hdir).map_err(Error::io(&hdir))?;

    let (mut views, mut dense, mut skip, mut rays) = (Vec::new(), 0u64, 0u64, 0u64);
    for (index, f) in dataset.frames.iter().enumerate() {
        let opts = march_options(&scene, cfg.render.step, true, cfg.render.early_termination);
        let (im, st) = render_baked(&scene, &f.camera, &opts)?;
        let (_, dst) = render_baked(&scene, &f.camera, &MarchOptions { skip: false, ..opts })?;
        save_png(&hdir.join(format!("{index:03}.png")), &heatmap(&st))?;
        skip += st.total_samples;
        dense += dst.total_samples;
        rays += (st.width * st.height) as u64;
        views.push(ViewRow {
            index,
            tag: f.tag.as_str().into(),
            psnr: psnr(&im, &f.image)?,
            ssim: ssim(&im, &f.image)?,
        });
    }
    let means = [Tag::Train, Tag::Test, Tag::Extrapolation]
        .into_iter()
        .filter_map(|tag| {
            let rows: Vec<&ViewRow> = views.iter().filter(|v| v.tag == tag.as_str()).collect();
            (!rows.is_empty()).then(|| TagMean {
                tag: tag.as_str().into(),
                views: rows.len(),
                psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64,
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64,
            })
        })
        .collect();
    let report = ExperimentReport {
        name: name.into(),
        config_hash: format!("{:016x}", cfg.hash()),
        iterations,
        views,
        means,
        occupancy: cfg
            .bench
            .or_grid_res
            .iter()
            .map(|&g| OrRow { grid_res: g, ratio: model.plane.occupancy_ratio(g) })
            .collect(),
        bundle_bytes: manifest.disk_bytes(),
        vram_bytes: estimate_vram(&manifest),
        samples_per_ray_dense: dense as f64 / rays.max(1) as f64,
        samples_per_ray_skip: skip as f64 / rays.max(1) as f64,
        smooth_loss: measure_smooth(model, cfg, dataset)?,
    };
    report.write(out)?;
    Ok(report)
}

/// Twin configs differing only in the occupancy-weight ramp: (on, off).
pub fn occ_twins(cfg: &RunConfig) -> (RunConfig, RunConfig) {
    let mut on = cfg.clone();
    on.train.lambda7_ramp = true;
    let mut off = cfg.clone();
    off.train.lambda7_ramp = false;
    (on, off)
}

/// Twin configs differing only in the smoothness weight: (0.1, 0).
pub fn smooth_twins(cfg: &RunConfig) -> (RunConfig, RunConfig) {
    let mut on = cfg.clone();
    on.train.lambda[7] = 0.1;
    let mut off = cfg.clone();
    off.train.lambda[7] = 0.0;
    (on, off)
}

fn run_twins(
    pair: (RunConfig, RunConfig),
    names: [&str; 2],
    dataset: &Dataset,
    out: &Path,
) -> Result<(ExperimentReport, ExperimentReport)> {
    let mut reports = Vec::with_capacity(2);
    for (cfg, name) in [pair.0, pair.1].iter().zip(names) {
        log::info!("twin {name}: config hash {:016x}", cfg.hash());
        let (t, log) = train(cfg, dataset)?;
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        crate::trainer::write_log(&dir.join("train_log.csv"), &log)?;
        reports.push(evaluate(name, cfg, dataset, &t.model, t.iteration, &dir)?);
    }
    let off = reports.pop().unwrap();
    Ok((reports.pop().unwrap(), off))
}

/// Occupancy-ramp ablation: returns (ramp on, ramp off).
pub fn run_ablation_occ(
    cfg: &RunConfig,
    dataset: &Dataset,
    out: &Path,
) -> Result<(ExperimentReport, ExperimentReport)> {
    run_twins(occ_twins(cfg), ["occ_on", "occ_off"], dataset, out)
}

/// Smoothness ablation: returns (lambda 0.1, lambda 0).
pub fn run_ablation_smooth(
    cfg: &RunConfig,
    dataset: &Dataset,
    out: &Path,
) -> Result<(ExperimentReport, ExperimentReport)> {
    run_twins(smooth_twins(cfg), ["smooth_on", "smooth_off"], dataset, out)
}
