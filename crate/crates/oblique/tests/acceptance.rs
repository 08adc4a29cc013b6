//! Acceptance suite. Runs every primary criterion at its stated tolerance and
//! prints one `PASS` or `FAIL` line per criterion. Exits non-zero when any
//! criterion fails.
//!
//! The trained twins share one smoke dataset; the whole run takes a few
//! minutes on a single core.

use std::path::Path;
use std::time::{Duration, Instant};

use oblique::bench::{self, ExperimentReport};
use oblique::bundle;
use oblique::config::{Preset, RunConfig};
use oblique::dataset::{self, Dataset};
use oblique::render::{march_options, render_baked, render_model, Sampling};
use oblique::trainer::Trainer;
use oblique_core::bake::{
    bake, default_step, extract_occupied_voxels, BakeOptions, BakedScene, MarchOptions, QuantRange, GROUPS,
};
use oblique_core::gradcheck::{grad_check, Component};
use oblique_core::math::{Aabb, Vec3};
use oblique_core::metrics::psnr;
use oblique_core::occupancy::{ramp, OccupancyPlane};
use oblique_core::render::{
    composite, render_samples, sample_ray_midpoints, CompositeSample, Model, Ray, RenderConfig,
};
use oblique_core::scene::{SceneRepr, FEATURES};
use oblique_core::shader::DeferredShader;
use oblique_core::synth::Tag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(name: &'static str, pass: bool, detail: String) -> Line {
    Line { name, pass, detail }
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed())
}

fn gradient_suite() -> Line {
    let (reports, took) = timed(|| Component::ALL.map(|c| grad_check(c, 0x0b1e, 100).expect("gradient check")));
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(100)).map(|r| r.component.name()).collect();
    let pass = failed.is_empty() && took < Duration::from_secs(120);
    let detail = format!(
        "{} components x 100 configs, max rel error {worst:.2e}, {:.1} s{}",
        reports.len(),
        took.as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    line("gradient suite", pass, detail)
}

fn occupancy_table() -> Line {
    let (zmin, zmax, eps, q): (f64, f64, f64, f64) = (0.2, 0.7, 0.1, 2.0);
    let table = [(zmin, 0.0), (zmax, 0.0), (0.45, 1.0), (zmin + eps, 1.0), (zmax - eps, 1.0), (zmin + eps / 2.0, 0.25)];
    let table_err = table.iter().map(|&(z, want)| (ramp(z, zmin, zmax, eps, q).value - want).abs()).fold(0.0, f64::max);

    // Fine sweeps across both buffers, including an interval thinner than 2 eps.
    let mut jump: f64 = 0.0;
    for (a, b) in [(zmin, zmax), (0.4, 0.55)] {
        let n = 200_000;
        let (lo, hi) = (a - 0.05, b + 0.05);
        let mut prev = ramp(lo, a, b, eps, q).value;
        for i in 1..=n {
            let v = ramp(lo + (hi - lo) * i as f64 / n as f64, a, b, eps, q).value;
            jump = jump.max((v - prev).abs());
            prev = v;
        }
    }
    let pass = table_err <= 1e-12 && jump <= 1e-3;
    line("occupancy table", pass, format!("max table error {table_err:.1e}, max sweep jump {jump:.2e}"))
}

fn slab_model(sigma: f64, z: (f64, f64)) -> Model<f64> {
    let b = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
    let mut scene = SceneRepr::zeros(b, 4, 8).unwrap();
    for cell in scene.grid.chunks_exact_mut(FEATURES) {
        cell[0] = sigma.ln();
    }
    let mut plane = OccupancyPlane::closed(b, 4, 1e-6).unwrap();
    for c in 0..16 {
        plane.heights[2 * c] = z.0;
        plane.heights[2 * c + 1] = z.1;
    }
    Model { scene, plane, shader: DeferredShader::zeros() }
}

fn compositing() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let mut identity: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let samples: Vec<CompositeSample<f64>> = (0..n)
            .map(|_| CompositeSample {
                density: rng.random_range(0.0..50.0),
                delta: rng.random_range(0.0..0.05),
                occupancy: rng.random_range(0.0..=1.0),
                ..Default::default()
            })
            .collect();
        let tr = composite(&samples, true);
        identity = identity.max((tr.total_weight + tr.final_transmittance() - 1.0).abs());
    }

    // Oblique rays through a constant-density slab, 256 midpoint samples.
    let (sigma, slab) = (8.0, (0.3, 0.7));
    let model = slab_model(sigma, slab);
    let cfg = RenderConfig { n_samples: 256, background: [0.0; 3], occupancy_in_transmittance: true };
    let mut slab_err: f64 = 0.0;
    for tilt in [90.0f64, 70.0, 50.0, 35.0] {
        let t = tilt.to_radians();
        let dir = Vec3::new(t.cos() * 0.6, t.cos() * 0.8, -t.sin());
        let origin = Vec3::new(0.0, 0.0, 0.5) - dir * 2.0;
        let ray = Ray::through(&model.scene.aabb, origin, dir).unwrap().unwrap();
        let samples = sample_ray_midpoints(&ray, 256, &model.plane);
        let w = render_samples(&model, &cfg, Some(ray), samples).unwrap().trace.total_weight;
        let path = (slab.1 - slab.0) / t.sin();
        let exact = 1.0 - (-sigma * path).exp();
        slab_err = slab_err.max((w - exact).abs() / exact);
    }
    let pass = identity <= 1e-6 && slab_err <= 0.01;
    line("compositing", pass, format!("identity error {identity:.1e}, slab weight error {:.3}%", slab_err * 100.0))
}

/// Parametric range of a ray inside an axis-aligned box.
fn box_range(ray: &Ray<f32>, lo: Vec3<f32>, hi: Vec3<f32>) -> Option<(f32, f32)> {
    let (mut a, mut b) = (ray.t_near, ray.t_far);
    for k in 0..3 {
        let (o, d) = (ray.origin[k], ray.dir[k]);
        if d == 0.0 {
            if o < lo[k] || o > hi[k] {
                return None;
            }
        } else {
            let (t0, t1) = ((lo[k] - o) / d, (hi[k] - o) / d);
            a = a.max(t0.min(t1));
            b = b.min(t0.max(t1));
        }
    }
    (a < b).then_some((a, b))
}

fn random_plane_scene(seed: u64) -> BakedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
    let mut scene = SceneRepr::zeros(b, 16, 32).unwrap();
    scene.grid.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut plane = OccupancyPlane::closed(b, 16, 0.05).unwrap();
    for c in 0..256 {
        if rng.random_bool(0.5) {
            let lo: f32 = rng.random_range(0.0..0.4);
            plane.heights[2 * c] = lo;
            plane.heights[2 * c + 1] = (lo + rng.random_range(0.03..0.5)).min(1.0);
        }
    }
    let model = Model { scene, plane, shader: DeferredShader::init(&mut rng) };
    bake(&model, [0.5; 3], &BakeOptions { block_size: 8, bits: 16, pyramid_levels: 4 }).unwrap().decode().unwrap()
}

/// Column intervals crossed by each ray, enumerated by brute force, that the
/// skipping marcher's segments fail to cover.
fn missed_intervals() -> (usize, usize) {
    let (mut missed, mut checked) = (0, 0);
    for seed in 0..4 {
        let s = random_plane_scene(seed);
        let m = s.plane.res;
        let (wx, wy) = s.plane.cell_size();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        for _ in 0..250 {
            let o = Vec3::new(rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5), rng.random_range(0.2..3.0));
            let target =
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.5));
            let Some(ray) = s.ray(o, target - o).unwrap() else { continue };
            let segs = s.segments(&ray, &mut Default::default());
            for cell in 0..m * m {
                let (z0, z1) = s.plane.interval(cell);
                if z1 <= z0 {
                    continue;
                }
                let lo = Vec3::new(s.aabb.lo.x + (cell % m) as f32 * wx, s.aabb.lo.y + (cell / m) as f32 * wy, z0);
                let hi = Vec3::new(lo.x + wx, lo.y + wy, z1);
                if let Some((a, b)) = box_range(&ray, lo, hi).filter(|(a, b)| b - a > 1e-4) {
                    checked += 1;
                    if !segs.iter().any(|&(c, s0, s1)| c == cell && s0 <= a + 1e-4 && s1 >= b - 1e-4) {
                        missed += 1;
                    }
                }
            }
        }
    }
    (missed, checked)
}

fn held_out(ds: &Dataset) -> Vec<&dataset::Frame> {
    ds.tagged(Tag::Test).take(4).collect()
}

/// Skipping and dense marches of one 16-bit bake over `cams`: the largest
/// per-channel difference and the total samples of each.
fn march_both<'a>(
    model: &Model<f32>,
    cfg: &RunConfig,
    cams: impl Iterator<Item = &'a dataset::Frame>,
) -> (f32, u64, u64) {
    let scene = bake(model, cfg.model.background, &BakeOptions { bits: 16, ..bench::bake_options(cfg) })
        .expect("bake")
        .decode()
        .expect("decode");
    let (mut diff, mut skip, mut dense) = (0.0f32, 0, 0);
    for f in cams {
        let opts = march_options(&scene, cfg.render.step, true, cfg.render.early_termination);
        let (a, sa) = render_baked(&scene, &f.camera, &opts).unwrap();
        let (b, sb) = render_baked(&scene, &f.camera, &MarchOptions { skip: false, ..opts }).unwrap();
        diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(diff, f32::max);
        skip += sa.total_samples;
        dense += sb.total_samples;
    }
    (diff, skip, dense)
}

fn skipping(cfg: &RunConfig, ds: &Dataset, trained: &Model<f32>) -> Line {
    let (d_trained, ..) = march_both(trained, cfg, held_out(ds).into_iter());
    // The toy scene with its true column intervals.
    let toy = toy_model(64);
    let (d_toy, skip, dense) = march_both(&toy, cfg, ds.frames.iter());
    let diff = d_trained.max(d_toy);
    let reduction = dense as f64 / skip as f64;
    let (missed, checked) = missed_intervals();
    let pass = diff <= 1e-5 && reduction >= 5.0 && missed == 0;
    let detail = format!(
        "max pixel diff {diff:.1e}; toy scene (OR {:.3}) samples/ray reduced {reduction:.2}x; missed {missed} of {checked} intervals",
        toy.plane.occupancy_ratio(64),
    );
    line("empty-space skipping", pass, detail)
}

fn bake_fidelity(cfg: &RunConfig, ds: &Dataset, trainer: &Trainer, dir: &Path) -> Line {
    let model = &trainer.model;
    let assets = bake(model, cfg.model.background, &BakeOptions { bits: 16, ..bench::bake_options(cfg) }).unwrap();
    let bdir = dir.join("bundle16");
    bundle::write(&assets, &bdir).unwrap();
    let back = bundle::read(&bdir).unwrap();
    let scene = back.decode().unwrap();

    let step = default_step(&scene.aabb);
    let rc = trainer.render_config();
    let mut worst = f64::INFINITY;
    for f in held_out(ds) {
        let train_mode = render_model(model, &rc, &f.camera, Sampling::FixedStep(step)).unwrap();
        let opts = march_options(&scene, None, true, false);
        let (baked, _) = render_baked(&scene, &f.camera, &opts).unwrap();
        worst = worst.min(psnr(&baked, &train_mode).unwrap());
    }

    // Every node of every stored block, and every stored plane texel, decodes
    // to within half a quantization step of the trained logit. Decoded values
    // are held as f32, which adds up to half an ulp on top.
    let f32_rounding = |v: f64| v.abs() * f32::EPSILON as f64 * 0.5;
    let l = model.scene.grid_res;
    let b = scene.block_size;
    let half = |range: &QuantRange| range.step(16) * 0.5;
    let group = |c: usize| GROUPS.iter().position(|g| g.contains(&c)).unwrap();
    let mut excess: f64 = 0.0;
    let mut nodes = 0usize;
    let nb = b + 1;
    for (i, bc) in back.blocks.iter().enumerate() {
        for (n, vals) in scene.block_values[i * nb * nb * nb * FEATURES..][..nb * nb * nb * FEATURES]
            .chunks_exact(FEATURES)
            .enumerate()
        {
            let (x, y, z) =
                (bc[0] as usize * b + n % nb, bc[1] as usize * b + n / nb % nb, bc[2] as usize * b + n / (nb * nb));
            if x >= l || y >= l || z >= l {
                continue;
            }
            nodes += 1;
            let base = ((z * l + y) * l + x) * FEATURES;
            for c in 0..FEATURES {
                let e = (vals[c] as f64 - model.scene.grid[base + c] as f64).abs();
                excess = excess.max(e - half(&back.grid_ranges[group(c)]) - f32_rounding(vals[c] as f64));
            }
        }
    }
    let r = model.scene.plane_res;
    for k in 0..3 {
        let (v0, rows) = back.plane_rows[k];
        for v in 0..rows {
            for u in 0..r {
                for c in 0..FEATURES {
                    let got = scene.plane_values[k][(v * r + u) * FEATURES + c] as f64;
                    let want = model.scene.planes[k][((v0 + v) * r + u) * FEATURES + c] as f64;
                    let e = (got - want).abs();
                    excess = excess.max(e - half(&back.plane_ranges[group(c)]) - f32_rounding(got));
                }
            }
        }
    }
    let pass = worst >= 40.0 && excess <= 0.0 && nodes > 0;
    let detail = format!(
        "min PSNR {worst:.2} dB over 4 held-out views, {nodes} grid nodes within half a step: {}",
        excess <= 0.0
    );
    line("bake fidelity", pass, detail)
}

fn occupancy_twins(on: &ExperimentReport, off: &ExperimentReport) -> Line {
    let (a, b) = (on.occupancy_ratio(64).unwrap(), off.occupancy_ratio(64).unwrap());
    let (pa, pb) = (on.mean(Tag::Test).unwrap().psnr, off.mean(Tag::Test).unwrap().psnr);
    let pass = a <= 0.7 * b && (pa - pb).abs() <= 0.5;
    let detail = format!("OR@64 {a:.3} vs {b:.3} (x{:.2}), held-out PSNR {pa:.2} vs {pb:.2} dB", a / b);
    line("occupancy-weight twins", pass, detail)
}

fn smooth_twins(on: &ExperimentReport, off: &ExperimentReport) -> Line {
    let (ea, eb) = (on.mean(Tag::Extrapolation).unwrap().psnr, off.mean(Tag::Extrapolation).unwrap().psnr);
    let (ta, tb) = (on.mean(Tag::Train).unwrap().psnr, off.mean(Tag::Train).unwrap().psnr);
    let ratio = on.smooth_loss / off.smooth_loss;
    let pass = ea >= eb && (ta - tb).abs() <= 0.3 && ratio < 0.5;
    let detail = format!(
        "extrapolation {ea:.2} vs {eb:.2} dB, training {ta:.2} vs {tb:.2} dB, smooth loss {:.4} vs {:.4} ({:.0}%)",
        on.smooth_loss,
        off.smooth_loss,
        ratio * 100.0
    );
    line("smoothness twins", pass, detail)
}

/// Model over the analytic scene's true column intervals.
fn toy_model(grid_res: usize) -> Model<f32> {
    let scene = dataset::scene_from(&RunConfig::preset(Preset::Smoke).scene).unwrap();
    let aabb = scene.aabb.cast::<f32>();
    let m = grid_res;
    let mut plane = OccupancyPlane::closed(aabb, m, 1.0 / grid_res as f32).unwrap();
    let (wx, wy) = plane.cell_size();
    for c in 0..m * m {
        let x = aabb.lo.x + ((c % m) as f32 + 0.5) * wx;
        let y = aabb.lo.y + ((c / m) as f32 + 0.5) * wy;
        let top = scene.column_top(x as f64, y as f64) as f32;
        plane.heights[2 * c] = (scene.ground_height(x as f64, y as f64) as f32 - 0.03).max(aabb.lo.z);
        plane.heights[2 * c + 1] = (top + 0.02).min(aabb.hi.z);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scene = SceneRepr::init(aabb, grid_res, grid_res, &mut rng).unwrap();
    Model { scene, plane, shader: DeferredShader::init(&mut rng) }
}

fn baking_speed() -> Line {
    let model = toy_model(128);
    let opts = BakeOptions::default();
    let ((mask, assets), took) =
        timed(|| (extract_occupied_voxels(&model.plane, 128), bake(&model, [0.5; 3], &opts).unwrap()));
    let extract = |g: usize| {
        (0..3).map(|_| timed(|| extract_occupied_voxels(&model.plane, g).count()).1).min().unwrap().as_secs_f64()
    };
    let (t128, t256) = (extract(128), extract(256));
    let scale = t256 / t128;
    let pass = took < Duration::from_secs(60) && scale <= 9.0;
    let detail = format!(
        "extract + bake at 128: {:.2} s ({} blocks, OR {:.3}); extraction 128 -> 256 scales {scale:.2}x",
        took.as_secs_f64(),
        assets.blocks.len(),
        mask.fraction()
    );
    line("baking speed", pass, detail)
}

fn determinism(cfg: &RunConfig, ds: &Dataset) -> Line {
    let mut cfg = cfg.clone();
    cfg.train.iterations = 100;
    let run = || {
        let (t, _) = bench::train(&cfg, ds).unwrap();
        let scene = bench::bake_model(&t.model, &cfg).unwrap().decode().unwrap();
        let f = ds.tagged(Tag::Test).next().unwrap();
        let (im, _) = render_baked(&scene, &f.camera, &march_options(&scene, None, true, true)).unwrap();
        let bits: Vec<u32> = im.data.iter().map(|v| v.to_bits()).collect();
        (t.checkpoint().to_bytes(), bits)
    };
    let (a, b) = (run(), run());
    let pass = a.0 == b.0 && a.1 == b.1;
    line("determinism", pass, format!("checkpoints equal: {}, renders equal: {}", a.0 == b.0, a.1 == b.1))
}

/// Configuration of the trained twins: the smoke preset with a batch large
/// enough that every occupancy column sees photometric signal each step.
fn twin_config() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Smoke);
    cfg.train.batch_rays = 8192;
    cfg.train.smooth_rays = 8192;
    cfg.train.chunk_rays = 128;
    cfg
}

/// Trains `cfg` and evaluates it through its baked bundle under `dir/name`.
fn twin(name: &str, cfg: &RunConfig, ds: &Dataset, dir: &Path) -> (Trainer, ExperimentReport) {
    let (t, _) = bench::train(cfg, ds).expect("train");
    let report = bench::evaluate(name, cfg, ds, &t.model, t.iteration, &dir.join(name)).expect("evaluate");
    (t, report)
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let mut lines = Vec::new();
    let mut record = |l: Line| {
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
        lines.push(l.pass);
    };
    record(gradient_suite());
    record(occupancy_table());
    record(compositing());
    record(baking_speed());

    let cfg = twin_config();
    let ds = dataset::generate(&dataset::scene_from(&cfg.scene).unwrap(), &cfg.dataset).expect("dataset");
    let (on_cfg, occ_off_cfg) = bench::occ_twins(&cfg);
    let (_, smooth_off_cfg) = bench::smooth_twins(&cfg);
    let (base, on) = twin("on", &on_cfg, &ds, dir);
    record(skipping(&cfg, &ds, &base.model));
    record(bake_fidelity(&cfg, &ds, &base, dir));
    record(determinism(&RunConfig::preset(Preset::Smoke), &ds));
    let (_, occ_off) = twin("occ_off", &occ_off_cfg, &ds, dir);
    record(occupancy_twins(&on, &occ_off));
    let (_, smooth_off) = twin("smooth_off", &smooth_off_cfg, &ds, dir);
    record(smooth_twins(&on, &smooth_off));

    let failed = lines.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
