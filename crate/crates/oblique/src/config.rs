//! Run configuration: one TOML file with a block per command.
//!
//! A preset supplies every value; the file (and then command-line flags)
//! override individual keys. Unknown keys anywhere are rejected.

use std::path::Path;

use oblique_core::losses::{CHARBONNIER_EPS, SMOOTH_SIGMA};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// L=32, R=64, M=32, 64x64 images, 1k iterations.
    Smoke,
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed; the scene has its own.
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bake: BakeConfig,
    pub render: RenderConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_buildings: usize,
    pub footprint: f64,
    pub glossiness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Supersampling of the reference renderer.
    pub spp: usize,
    pub train_views: usize,
    pub train_tilt_deg: f64,
    pub radius: f64,
    /// Held-out views on the training ring, between training azimuths.
    pub test_views: usize,
    pub extrapolation_views: usize,
    pub extrapolation_tilt_deg: f64,
    pub extrapolation_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_res: usize,
    pub plane_res: usize,
    pub occupancy_res: usize,
    /// Ramp width; two grid voxels when absent.
    pub epsilon: Option<f64>,
    pub background: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_rays: usize,
    /// Stratified samples per training ray.
    pub samples: usize,
    /// Rays per gradient buffer; fixes the reduction order.
    pub chunk_rays: usize,
    /// `[start, end]` of the exponential decay.
    pub lr_features: [f64; 2],
    pub lr_plane: [f64; 2],
    /// The plane rate is multiplied by `plane_lr_reference / iterations`
    /// (at least 1) so the heights can travel as far in a short run as in a
    /// run of the reference length.
    pub plane_lr_reference: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// rgb, s3im, distortion, interval, sparsity, entropy, occupancy (unused,
    /// see `lambda7_ramp`), smoothness.
    pub lambda: [f64; 8],
    pub lambda7_ramp: bool,
    pub charbonnier_eps: f64,
    pub smooth_sigma: f64,
    pub smooth_rays: usize,
    pub entropy_rays: usize,
    pub entropy_samples: usize,
    pub sparsity_samples: usize,
    pub occupancy_in_transmittance: bool,
    /// Evaluation cadence in iterations (0 disables intermediate evals).
    pub eval_every: u64,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BakeConfig {
    pub block_size: usize,
    pub bits: u32,
    pub pyramid_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// `orbit:az=<deg>,tilt=<deg>,r=<dist>`.
    pub camera: String,
    /// Lattice spacing; bounds diagonal / 1024 when absent.
    pub step: Option<f64>,
    pub skip: bool,
    pub early_termination: bool,
    pub heatmap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Grid resolutions for the occupancy ratio.
    pub or_grid_res: Vec<usize>,
    pub ablation_occ: bool,
    pub ablation_smooth: bool,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let smoke = Self {
            seed: 1,
            scene: SceneConfig { seed: 7, n_buildings: 6, footprint: 1.0, glossiness: 0.35 },
            dataset: DatasetConfig {
                width: 64,
                height: 64,
                fov_deg: 45.0,
                spp: 4,
                train_views: 24,
                train_tilt_deg: 60.0,
                radius: 3.2,
                test_views: 4,
                extrapolation_views: 8,
                extrapolation_tilt_deg: 25.0,
                extrapolation_radius: 3.2,
            },
            model: ModelConfig { grid_res: 32, plane_res: 64, occupancy_res: 32, epsilon: None, background: [0.5; 3] },
            train: TrainConfig {
                iterations: 1000,
                batch_rays: 512,
                samples: 128,
                chunk_rays: 64,
                lr_features: [1e-2, 1e-3],
                lr_plane: [5e-5, 1e-5],
                plane_lr_reference: 80_000,
                beta1: 0.9,
                beta2: 0.99,
                adam_eps: 1e-15,
                lambda: [1.0, 0.0, 0.0, 0.0, 0.05, 0.001, 0.0, 0.1],
                lambda7_ramp: true,
                charbonnier_eps: CHARBONNIER_EPS,
                smooth_sigma: SMOOTH_SIGMA,
                smooth_rays: 100,
                entropy_rays: 64,
                entropy_samples: 64,
                sparsity_samples: 1024,
                occupancy_in_transmittance: true,
                eval_every: 0,
                eval_samples: 256,
            },
            bake: BakeConfig { block_size: 8, bits: 8, pyramid_levels: 4 },
            render: RenderConfig {
                width: 64,
                height: 64,
                fov_deg: 45.0,
                camera: "orbit:az=0,tilt=60,r=3.2".into(),
                step: None,
                skip: true,
                early_termination: true,
                heatmap: true,
            },
            bench: BenchConfig { or_grid_res: vec![64], ablation_occ: true, ablation_smooth: true },
        };
        match p {
            Preset::Smoke => smoke,
            Preset::Desk => {
                let mut c = smoke;
                c.dataset.width = 128;
                c.dataset.height = 128;
                c.dataset.train_views = 48;
                c.model.grid_res = 64;
                c.model.plane_res = 128;
                c.model.occupancy_res = 64;
                c.train.iterations = 5000;
                c.train.batch_rays = 1024;
                c.train.samples = 256;
                c.train.entropy_rays = 256;
                c.train.sparsity_samples = 4096;
                c.train.eval_every = 500;
                c.render.width = 256;
                c.render.height = 256;
                c
            }
            Preset::Full => {
                let mut c = Self::preset(Preset::Desk);
                c.dataset.width = 256;
                c.dataset.height = 256;
                c.dataset.train_views = 96;
                c.model.grid_res = 128;
                c.model.plane_res = 512;
                c.model.occupancy_res = 256;
                c.train.iterations = 80_000;
                c.train.batch_rays = 4096;
                c.train.entropy_rays = 1 << 10;
                c.train.sparsity_samples = 1 << 14;
                c.train.eval_every = 5000;
                c.render.width = 800;
                c.render.height = 600;
                c
            }
        }
    }

    /// `preset` overridden by the TOML document `text`.
    pub fn from_toml(preset: Preset, text: &str) -> Result<Self> {
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, over);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(preset: Preset, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(preset, &text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let t = &self.train;
        let m = &self.model;
        if m.grid_res < 2 || m.plane_res < m.grid_res || m.occupancy_res < 1 {
            return bad("model: need grid_res >= 2 and plane_res >= grid_res");
        }
        if t.batch_rays == 0 || t.chunk_rays == 0 || t.samples == 0 {
            return bad("train: batch_rays, chunk_rays and samples must be positive");
        }
        for (name, [a, b]) in [("lr_features", t.lr_features), ("lr_plane", t.lr_plane)] {
            if !(a >= b && b > 0.0) {
                return Err(Error::Config(format!("train.{name}: need start >= end > 0")));
            }
        }
        if self.loss_weights(0.0).validate().is_err() {
            return bad("train.lambda: weights must be non-negative with the s3im, distortion and interval slots at 0");
        }
        if t.lambda[6] != 0.0 {
            return bad("train.lambda[6]: the occupancy weight comes from the ramp; set lambda7_ramp instead");
        }
        if self.bake.block_size == 0 || m.grid_res % self.bake.block_size != 0 {
            return bad("bake.block_size must divide model.grid_res");
        }
        if self.bake.bits != 8 && self.bake.bits != 16 {
            return bad("bake.bits must be 8 or 16");
        }
        let d = &self.dataset;
        if d.width == 0 || d.height == 0 || d.train_views < 2 {
            return bad("dataset: need a non-empty image size and at least 2 training views");
        }
        Ok(())
    }

    pub fn loss_weights(&self, lambda7: f64) -> oblique_core::losses::LossWeights {
        let t = &self.train;
        let mut lambda = t.lambda;
        lambda[6] = lambda7;
        oblique_core::losses::LossWeights {
            lambda,
            charbonnier_eps: t.charbonnier_eps,
            smooth_sigma: t.smooth_sigma,
            smooth_rays: t.smooth_rays,
            entropy_rays: t.entropy_rays,
            sparsity_samples: t.sparsity_samples,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Smoke)
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
