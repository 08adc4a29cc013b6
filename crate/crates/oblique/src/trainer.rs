//! The optimization loop.
//!
//! Every iteration draws its randomness from a seed derived from the base
//! seed and the iteration number, so a run resumed from a checkpoint takes
//! exactly the steps the uninterrupted run would have taken. Rays are split
//! into fixed-size chunks whose gradients are reduced in chunk order; the
//! result does not depend on the number of worker threads.

use oblique_core::math::Vec3;
use oblique_core::metrics::psnr;
use oblique_core::objective::{
    photometric, regularizers, sparsity_points, stream_rng, Detached, ObjectiveConfig, TrainRay,
};
use oblique_core::occupancy::{default_epsilon, OccupancyPlane};
use oblique_core::optim::{exp_decay_lr, lambda7_schedule, AdamParams, AdamState};
use oblique_core::render::{Model, ModelGrad, RenderConfig};
use oblique_core::scene::SceneRepr;
use oblique_core::shader::{DeferredShader, FEAT_IN};
use oblique_core::synth::Tag;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Moments};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::render::{render_model, Sampling};

/// Stream ids of the trainer's own draws (objective terms use others).
const INIT_STREAM: u64 = u64::MAX - 16;
const PICK_STREAM: u64 = u64::MAX - 17;

/// One CSV row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub total: f64,
    pub rgb: f64,
    pub occ: f64,
    pub smooth: f64,
    pub sparsity: f64,
    pub entropy: f64,
    pub lambda7: f64,
    pub lr_features: f64,
    pub lr_plane: f64,
    pub skipped_steps: u64,
    pub eval_psnr: Option<f64>,
    pub occupancy_ratio: Option<f64>,
}

/// Initial parameters: near-zero logits, thin fog, fully open plane.
pub fn init_model(cfg: &RunConfig, dataset: &Dataset) -> Result<Model<f32>> {
    let m = &cfg.model;
    let aabb = dataset.aabb.cast::<f32>();
    let mut rng = stream_rng(cfg.seed, INIT_STREAM);
    let scene = SceneRepr::init(aabb, m.grid_res, m.plane_res, &mut rng)?;
    let eps = m.epsilon.map(|e| e as f32).unwrap_or_else(|| default_epsilon(&aabb, m.grid_res));
    let plane = OccupancyPlane::open(aabb, m.occupancy_res, eps)?;
    let shader = DeferredShader::init(&mut rng);
    Ok(Model { scene, plane, shader })
}

pub fn step_seed(seed: u64, iteration: u64) -> u64 {
    // splitmix64 of the pair.
    let mut z = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub moments: Moments,
    /// Completed iterations.
    pub iteration: u64,
    rays: Vec<TrainRay<f32>>,
    grads: Vec<ModelGrad<f32>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let model = init_model(&cfg, dataset)?;
        let moments = Moments::new(&model);
        Self::assemble(cfg, dataset, model, moments, 0)
    }

    /// Continues a run; the checkpoint must come from the same config.
    pub fn resume(cfg: RunConfig, dataset: &Dataset, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {:016x} differs from the current config {:016x}",
                ckpt.config_hash,
                cfg.hash()
            )));
        }
        Self::assemble(cfg, dataset, ckpt.model, ckpt.moments, ckpt.iteration)
    }

    fn assemble(
        cfg: RunConfig,
        dataset: &Dataset,
        model: Model<f32>,
        moments: Moments,
        iteration: u64,
    ) -> Result<Self> {
        let want = crate::dataset::scene_from(&cfg.scene)?.aabb;
        if dataset.aabb != want || model.scene.aabb != want.cast() {
            return Err(Error::Config("dataset bounds do not match the configured scene".into()));
        }
        if dataset.count(Tag::Train) < 2 {
            return Err(Error::Config("dataset needs at least 2 training views".into()));
        }
        let rays = dataset
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
        Ok(Self { cfg, model, moments, iteration, rays, grads: Vec::new() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            iteration: self.iteration,
            model: self.model.clone(),
            moments: self.moments.clone(),
        }
    }

    pub fn render_config(&self) -> RenderConfig<f32> {
        RenderConfig {
            n_samples: self.cfg.train.samples,
            background: self.cfg.model.background,
            occupancy_in_transmittance: self.cfg.train.occupancy_in_transmittance,
        }
    }

    pub fn lambda7(&self, iteration: u64) -> f64 {
        if self.cfg.train.lambda7_ramp {
            lambda7_schedule(iteration as i64, self.cfg.train.iterations).unwrap_or(0.0)
        } else {
            0.0
        }
    }

    pub fn learning_rates(&self, iteration: u64) -> (f64, f64) {
        let t = &self.cfg.train;
        let total = t.iterations;
        let scale = (t.plane_lr_reference as f64 / total.max(1) as f64).max(1.0);
        (
            exp_decay_lr(t.lr_features[0], t.lr_features[1], iteration, total),
            scale * exp_decay_lr(t.lr_plane[0], t.lr_plane[1], iteration, total),
        )
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        let it = self.iteration;
        let t = &self.cfg.train;
        let seed = step_seed(self.cfg.seed, it);
        let lambda7 = self.lambda7(it);
        let ocfg = ObjectiveConfig {
            render: self.render_config(),
            weights: self.cfg.loss_weights(0.0),
            lambda7,
            entropy_samples: t.entropy_samples,
        };
        let mut pick = stream_rng(seed, PICK_STREAM);
        let batch: Vec<TrainRay<f32>> =
            (0..t.batch_rays).map(|_| self.rays[pick.random_range(0..self.rays.len())]).collect();

        let chunk = t.chunk_rays;
        let n_chunks = batch.len().div_ceil(chunk);
        while self.grads.len() < n_chunks {
            self.grads.push(ModelGrad::zeros_like(&self.model));
        }
        let model = &self.model;
        type ChunkOut = (f64, Vec<([f32; FEAT_IN], Vec3<f32>)>);
        let outs: Vec<ChunkOut> = self.grads[..n_chunks]
            .par_iter_mut()
            .zip(batch.par_chunks(chunk))
            .enumerate()
            .map(|(ci, (g, rays))| {
                g.clear();
                let mut loss = 0.0f64;
                let mut feats = Vec::with_capacity(rays.len());
                for (j, ray) in rays.iter().enumerate() {
                    let mut rng = stream_rng(seed, (ci * chunk + j) as u64);
                    let out = photometric(model, &ocfg, ray, &mut rng, Some(g))?;
                    loss += out.loss as f64;
                    if let Some(f) = out.features {
                        feats.push((f, ray.dir.normalized().unwrap_or(ray.dir)));
                    }
                }
                Ok((loss, feats))
            })
            .collect::<Result<_>>()?;
        let (head, tail) = self.grads.split_at_mut(1);
        let grad = &mut head[0];
        for g in &tail[..n_chunks - 1] {
            grad.add_assign(g);
        }
        let rgb: f64 = outs.iter().map(|o| o.0).sum();
        let smooth_inputs = outs.into_iter().flat_map(|o| o.1).collect();
        let detached = Detached {
            smooth_inputs,
            sparsity_points: if ocfg.weights.sparsity() > 0.0 {
                sparsity_points(model, t.sparsity_samples, seed)
            } else {
                None
            },
        };
        let mut parts = regularizers(model, &ocfg, &detached, seed, Some(grad))?;
        parts.rgb = rgb as f32;
        let total = oblique_core::losses::total_loss(&parts, &self.cfg.loss_weights(lambda7))?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("loss is {total} at iteration {it}")));
        }

        let (lr_f, lr_p) = self.learning_rates(it);
        let hp = AdamParams { beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps };
        let grad = &self.grads[0];
        let m = &mut self.model;
        let mo = &mut self.moments;
        // Each group skips its own update on a non-finite gradient.
        mo.grid.step(&mut m.scene.grid, &grad.scene.grid, lr_f, &hp)?;
        for k in 0..3 {
            mo.planes[k].step(&mut m.scene.planes[k], &grad.scene.planes[k], lr_f, &hp)?;
        }
        mo.shader.step(&mut m.shader.params, &grad.shader, lr_f, &hp)?;
        mo.heights.step(&mut m.plane.heights, &grad.plane, lr_p, &hp)?;
        m.plane.project_constraints();
        self.iteration += 1;

        Ok(StepLog {
            iteration: self.iteration,
            total: total as f64,
            rgb,
            occ: parts.occ as f64,
            smooth: parts.smooth as f64,
            sparsity: parts.sparsity as f64,
            entropy: parts.entropy as f64,
            lambda7,
            lr_features: lr_f,
            lr_plane: lr_p,
            skipped_steps: self.skipped(),
            eval_psnr: None,
            occupancy_ratio: None,
        })
    }

    fn skipped(&self) -> u64 {
        let m = &self.moments;
        let all: [&AdamState<f32>; 6] = [&m.grid, &m.planes[0], &m.planes[1], &m.planes[2], &m.shader, &m.heights];
        all.iter().map(|s| s.skipped).max().unwrap_or(0)
    }

    /// Runs to the configured iteration count. `on_step` sees every row;
    /// rows at the eval cadence (and the last one) carry eval metrics.
    pub fn run(&mut self, dataset: &Dataset, mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>) -> Result<()> {
        let total = self.cfg.train.iterations;
        while self.iteration < total {
            let mut row = self.step()?;
            let every = self.cfg.train.eval_every;
            if (every > 0 && self.iteration % every == 0) || self.iteration == total {
                row.eval_psnr = Some(self.eval_psnr(dataset, Tag::Test)?);
                row.occupancy_ratio = Some(self.model.plane.occupancy_ratio(64));
            }
            on_step(self, &row)?;
        }
        Ok(())
    }

    /// Mean PSNR of deterministic training-mode renders over views of `tag`.
    pub fn eval_psnr(&self, dataset: &Dataset, tag: Tag) -> Result<f64> {
        eval_psnr(&self.model, &self.render_config(), self.cfg.train.eval_samples, dataset, tag)
    }
}

pub fn eval_psnr(
    model: &Model<f32>,
    rc: &RenderConfig<f32>,
    samples: usize,
    dataset: &Dataset,
    tag: Tag,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for f in dataset.tagged(tag) {
        let im = render_model(model, rc, &f.camera, Sampling::Midpoints(samples))?;
        sum += psnr(&im, &f.image)?;
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

pub fn write_log(path: &std::path::Path, rows: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(Error::io(path))
}
