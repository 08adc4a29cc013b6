use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use oblique::bench;
use oblique::bundle;
use oblique::checkpoint::Checkpoint;
use oblique::config::{Preset, RunConfig};
use oblique::dataset::{self, Dataset};
use oblique::render::{heatmap, march_options, parse_camera, render_baked, save_png};
use oblique::trainer::{write_log, Trainer};
use oblique::{Error, ErrorClass};
use oblique_core::gradcheck::{grad_check, Component};
use oblique_core::synth::Tag;

#[derive(Parser)]
#[command(
    name = "oblique",
    version,
    about = "Occupancy-plane radiance fields: dataset, train, bake, render, bench, serve"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "smoke")]
    preset: Preset,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the iteration count.
    #[arg(long, global = true)]
    iterations: Option<u64>,
    /// Output file or directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    None,
    Occ,
    Smooth,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic scene from every camera into a dataset directory.
    Dataset,
    /// Train a model; writes checkpoint.oblq, train_log.csv and config.toml.
    Train {
        /// Dataset directory (generated from the config when absent).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Quantize a checkpoint into a bundle directory.
    Bake {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// March a bundle from one camera into a PNG.
    Render {
        #[arg(long)]
        bundle: PathBuf,
        /// `orbit:az=<deg>,tilt=<deg>,r=<dist>`; defaults to the config's camera.
        #[arg(long)]
        camera: Option<String>,
        /// March every lattice point instead of skipping empty columns.
        #[arg(long)]
        dense: bool,
        /// Also write a samples-per-ray heatmap here.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Also write per-frame stats as JSON here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train, bake and evaluate; optionally run the ablation twins.
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        ablation: Ablation,
    },
    /// Serve a bundle directory over HTTP.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        /// Component name, or `all`.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 100)]
        configs: usize,
    },
}

fn resolve(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(c.preset, p)?,
        None => RunConfig::preset(c.preset),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    log::info!("resolved config (hash {:016x}):\n{}", cfg.hash(), cfg.to_toml());
    Ok(cfg)
}

fn out_or(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_or_generate(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<Dataset> {
    Ok(match data {
        Some(d) => Dataset::load(d)?,
        None => {
            log::info!("no --data given; generating the dataset from the config");
            dataset::generate(&dataset::scene_from(&cfg.scene)?, &cfg.dataset)?
        }
    })
}

fn mkdir(p: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(p).map_err(|source| Error::Io { path: p.into(), source })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Dataset => {
            let cfg = resolve(c)?;
            let out = out_or(c, "dataset");
            let ds = dataset::generate(&dataset::scene_from(&cfg.scene)?, &cfg.dataset)?;
            ds.export(&out)?;
            println!(
                "wrote {} frames ({} train, {} test, {} extrapolation) to {}",
                ds.frames.len(),
                ds.count(Tag::Train),
                ds.count(Tag::Test),
                ds.count(Tag::Extrapolation),
                out.display()
            );
        }
        Cmd::Train { data, resume } => {
            let cfg = resolve(c)?;
            let out = out_or(c, "run");
            mkdir(&out)?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let mut t = match resume {
                Some(p) => Trainer::resume(cfg.clone(), &ds, Checkpoint::load(&p)?)?,
                None => Trainer::new(cfg.clone(), &ds)?,
            };
            let cfg_path = out.join("config.toml");
            std::fs::write(&cfg_path, cfg.to_toml()).with_context(|| cfg_path.display().to_string())?;
            let mut rows = Vec::new();
            let every = (cfg.train.iterations / 20).max(1);
            t.run(&ds, |t, row| {
                if t.iteration % every == 0 || row.eval_psnr.is_some() {
                    println!(
                        "iter {:>6}  loss {:.5}  occ {:.4}  lambda7 {:.2e}{}",
                        row.iteration,
                        row.total,
                        row.occ,
                        row.lambda7,
                        row.eval_psnr.map(|p| format!("  test psnr {p:.2}")).unwrap_or_default()
                    );
                }
                rows.push(row.clone());
                Ok(())
            })?;
            write_log(&out.join("train_log.csv"), &rows)?;
            t.checkpoint().save(&out.join("checkpoint.oblq"))?;
            println!("checkpoint at iteration {} in {}", t.iteration, out.display());
        }
        Cmd::Bake { checkpoint } => {
            let cfg = resolve(c)?;
            let out = out_or(c, "bundle");
            let ck = Checkpoint::load(&checkpoint)?;
            if ck.config_hash != cfg.hash() {
                log::warn!(
                    "checkpoint was trained with config {:016x}; baking with {:016x}",
                    ck.config_hash,
                    cfg.hash()
                );
            }
            let start = std::time::Instant::now();
            let assets = bench::bake_model(&ck.model, &cfg)?;
            let m = bundle::write(&assets, &out)?;
            println!(
                "baked {} blocks in {:.2}s: {} bytes on disk, {} bytes decoded, into {}",
                m.block_count,
                start.elapsed().as_secs_f64(),
                m.disk_bytes(),
                bench::estimate_vram(&m),
                out.display()
            );
        }
        Cmd::Render { bundle: dir, camera, dense, heatmap: hm, stats } => {
            let cfg = resolve(c)?;
            let out = out_or(c, "render.png");
            let scene = bundle::read(&dir)?.decode()?;
            let r = &cfg.render;
            let spec = camera.unwrap_or_else(|| r.camera.clone());
            let cam = parse_camera(&spec, &scene.aabb.cast(), r.fov_deg, r.width, r.height)?;
            let opts = march_options(&scene, r.step, !dense && r.skip, r.early_termination);
            let (im, st) = render_baked(&scene, &cam, &opts)?;
            save_png(&out, &im)?;
            if let Some(p) = hm.or_else(|| r.heatmap.then(|| out.with_extension("heatmap.png"))) {
                save_png(&p, &heatmap(&st))?;
            }
            if let Some(p) = stats {
                std::fs::write(&p, serde_json::to_string_pretty(&st)?).with_context(|| p.display().to_string())?;
            }
            println!(
                "{}: {:.1} samples/ray (max {}), {:.1} ms",
                out.display(),
                st.mean_samples,
                st.max_samples,
                st.ms_per_frame
            );
        }
        Cmd::Bench { data, ablation } => {
            let cfg = resolve(c)?;
            let out = out_or(c, "bench");
            mkdir(&out)?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let show = |r: &bench::ExperimentReport| {
                for m in &r.means {
                    println!(
                        "  {:<14} {:<13} psnr {:.2}  ssim {:.4}  ({} views)",
                        r.name, m.tag, m.psnr, m.ssim, m.views
                    );
                }
                for o in &r.occupancy {
                    println!("  {:<14} OR@{} {:.4}", r.name, o.grid_res, o.ratio);
                }
                println!(
                    "  {:<14} samples/ray {:.1} dense, {:.1} skipping; {} bytes on disk, {} decoded",
                    r.name, r.samples_per_ray_dense, r.samples_per_ray_skip, r.bundle_bytes, r.vram_bytes
                );
            };
            let (t, log) = bench::train(&cfg, &ds)?;
            write_log(&out.join("train_log.csv"), &log)?;
            show(&bench::evaluate("base", &cfg, &ds, &t.model, t.iteration, &out)?);
            let (occ, smooth) = match ablation {
                Ablation::None => (false, false),
                Ablation::Occ => (true, false),
                Ablation::Smooth => (false, true),
                Ablation::Both => (true, true),
            };
            if occ || cfg.bench.ablation_occ {
                let (on, off) = bench::run_ablation_occ(&cfg, &ds, &out.join("ablation_occ"))?;
                show(&on);
                show(&off);
            }
            if smooth || cfg.bench.ablation_smooth {
                let (on, off) = bench::run_ablation_smooth(&cfg, &ds, &out.join("ablation_smooth"))?;
                show(&on);
                show(&off);
            }
        }
        Cmd::Serve { bundle: dir, addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(oblique::serve::serve(dir, addr))?;
        }
        Cmd::Gradcheck { component, configs } => {
            let seed = c.seed.unwrap_or(0);
            let comps: Vec<Component> = if component == "all" {
                Component::ALL.to_vec()
            } else {
                vec![Component::parse(&component)
                    .ok_or_else(|| Error::Config(format!("unknown component {component:?}")))?]
            };
            let mut failed = Vec::new();
            for comp in comps {
                let r = grad_check(comp, seed, configs)?;
                let ok = r.passed(configs);
                println!(
                    "{} {:<15} configs {:>4} rejected {:>3} entries {:>6} max rel err {:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    comp.name(),
                    r.configs,
                    r.rejected,
                    r.entries,
                    r.max_rel_error
                );
                if !ok {
                    failed.push(comp.name());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .init();
    if let Ok(n) = std::env::var("OBLQ_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => log::warn!("ignoring OBLQ_THREADS={n:?}; expected a positive integer"),
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.downcast_ref::<Error>().map_or(ErrorClass::Other, Error::class);
            let line = serde_json::json!({
                "error": { "class": class.as_str(), "code": class.exit_code(), "message": format!("{e:#}") }
            });
            let _ = writeln!(std::io::stderr(), "{line}");
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
