//! End-to-end runs of the `oblique` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use oblique::checkpoint::{Checkpoint, Moments};
use oblique::config::{Preset, RunConfig};
use oblique::dataset::Dataset;
use oblique::trainer::init_model;

const TINY: &str = r#"
[dataset]
width = 16
height = 16
spp = 1
train_views = 3
test_views = 1
extrapolation_views = 0

[model]
grid_res = 8
plane_res = 16
occupancy_res = 8

[train]
iterations = 5
batch_rays = 32
chunk_rays = 16
samples = 16
entropy_rays = 4
entropy_samples = 8
sparsity_samples = 16
eval_samples = 16

[bake]
block_size = 4
bits = 16

[render]
width = 24
height = 20
camera = "orbit:az=30,tilt=55,r=3"
"#;

fn oblique(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oblique"))
        .current_dir(dir)
        .env("OBLQ_THREADS", "2")
        .args(args)
        .output()
        .expect("spawn oblique")
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("an error line");
    serde_json::from_str(line).expect("machine-readable error line")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(oblique(dir.path(), &["--config", "tiny.toml", "dataset", "--out", "ds"]));
    dir
}

#[test]
fn zero_iterations_write_the_initial_model() {
    let dir = setup();
    let d = dir.path();
    ok(oblique(d, &["--config", "tiny.toml", "--iterations", "0", "train", "--data", "ds", "--out", "run"]));
    let ck = Checkpoint::load(&d.join("run/checkpoint.oblq")).unwrap();
    let mut cfg = RunConfig::load(Preset::Smoke, &d.join("tiny.toml")).unwrap();
    cfg.train.iterations = 0;
    let ds = Dataset::load(&d.join("ds")).unwrap();
    let model = init_model(&cfg, &ds).unwrap();
    assert_eq!(ck.iteration, 0);
    assert_eq!(ck.config_hash, cfg.hash());
    assert_eq!(ck.moments, Moments::new(&model));
    assert_eq!(ck.model, model);
}

#[test]
fn pipeline_is_deterministic_and_skipping_matches_dense_render() {
    let dir = setup();
    let d = dir.path();
    let tiny = ["--config", "tiny.toml"];
    for run in ["a", "b"] {
        ok(oblique(d, &[&tiny[..], &["train", "--data", "ds", "--out", run]].concat()));
    }
    let a = std::fs::read(d.join("a/checkpoint.oblq")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/checkpoint.oblq")).unwrap());

    ok(oblique(d, &[&tiny[..], &["bake", "--checkpoint", "a/checkpoint.oblq", "--out", "bundle"]].concat()));
    let render = |out: &str, extra: &[&str]| {
        ok(oblique(d, &[&tiny[..], &["render", "--bundle", "bundle", "--out", out], extra].concat()));
        std::fs::read(d.join(out)).unwrap()
    };
    // The dense march is the oracle for the skipping one.
    let golden = render("dense.png", &["--dense"]);
    assert_eq!(render("skip.png", &["--stats", "stats.json"]), golden);
    assert_eq!(render("again.png", &[]), golden);
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["width"], 24);
    assert!(d.join("skip.heatmap.png").is_file());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 1\n").unwrap();
    let o = oblique(d, &["--config", "bad.toml", "dataset"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"]["class"], "config");

    std::fs::write(d.join("zero.toml"), "[bake]\nbits = 12\n").unwrap();
    let o = oblique(d, &["--config", "zero.toml", "dataset"]);
    assert_eq!(o.status.code(), Some(2));

    let o = oblique(d, &["render", "--bundle", "nowhere"]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["error"]["class"], "io");
    assert_eq!(e["error"]["code"], 3);

    std::fs::write(d.join("x.oblq"), b"not a checkpoint").unwrap();
    let o = oblique(d, &["bake", "--checkpoint", "x.oblq"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_command_reports_each_component() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(oblique(dir.path(), &["gradcheck", "--component", "composite", "--configs", "5"]));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("PASS composite")), "{out}");
    let o = oblique(dir.path(), &["gradcheck", "--component", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
