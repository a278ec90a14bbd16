use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nlf::checkpoint::Checkpoint;
use nlf::imageio::{read_float_map, read_png};
use nlf::manifest::load_scene;

const SPEC: &str = r#"
count = 5
width = 16
height = 12
focal = 16.0
test_views = [2]
parametrization = "slab"
near = 1.0
far = 4.0

[rig]
kind = "line"
baseline = 0.6

[[primitives]]
kind = "plane"
depth = 3.0
texture = { kind = "checker", period = 0.5, albedo = [[0.9, 0.8, 0.7], [0.1, 0.2, 0.3]] }

[[primitives]]
kind = "lambertian_sphere"
center = [0.0, 0.0, 2.0]
radius = 0.3
albedo = [0.7, 0.2, 0.2]
"#;

const CONFIG: &str = r#"
log_every = 2

[model]
model_dim = 8
num_blocks = 1
embedding_dim = 4

[sampler]
references = 3
candidates = 3
points = 4

[train]
batch_size = 16
total_steps = 6
warmup_steps = 1
base_lr = 1e-3
"#;

fn nlf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlf")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nlf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_from_spec_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SPEC).unwrap();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    let scene_dir = d.join("scene");
    ok(&["synth", p(&d.join("spec.toml")), p(&scene_dir), "--seed", "3"]);
    let manifest = scene_dir.join("scene.toml");
    let scene = load_scene(&manifest).unwrap();
    assert_eq!((scene.num_train, scene.views.len()), (4, 5));

    let ckpt = d.join("model.ckpt");
    let log = d.join("log.csv");
    ok(&["train", p(&manifest), p(&d.join("run.toml")), p(&ckpt), "--log", p(&log), "--seed", "1"]);
    let rows: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "step,loss,lr,wall_clock_s");
    let steps: Vec<usize> = rows[1..].iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, [2, 4, 6]);
    let ck = Checkpoint::load(&ckpt).unwrap();
    assert_eq!((ck.step, ck.params.config.num_views), (6, 4));

    // same seed, same weights
    let again = d.join("again.ckpt");
    ok(&["train", p(&manifest), p(&d.join("run.toml")), p(&again), "--seed", "1"]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let png = d.join("view.png");
    ok(&["render", p(&ckpt), p(&manifest), "--camera", "view002", "--out", p(&png)]);
    assert_eq!(read_png(&png).unwrap().width, 16);

    let pose = d.join("pose.toml");
    fs::write(
        &pose,
        "width = 8\nheight = 6\nfx = 8.0\nfy = 8.0\ncx = 3.5\ncy = 2.5\nrotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]\ntranslation = [-0.05, 0.0, 0.0]\n",
    )
    .unwrap();
    ok(&["render", p(&ckpt), p(&manifest), "--camera", p(&pose), "--out", p(&png), "--block-size", "7"]);
    assert_eq!(read_png(&png).unwrap().height, 6);

    let report = d.join("report.txt");
    let lpips = d.join("lpips.txt");
    fs::write(&lpips, "view002 0.25\n").unwrap();
    let table = ok(&["eval", p(&ckpt), p(&manifest), "--split", "test", "--report", p(&report), "--lpips", p(&lpips), "--deterministic"]);
    assert_eq!(fs::read_to_string(&report).unwrap(), table);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("view002"));
    assert!(table.contains("0.2500"));

    let disp = d.join("disp");
    ok(&["disparity", p(&ckpt), p(&manifest), "--camera", "1", "--out", p(&disp)]);
    let map = read_float_map(&d.join("disp.f32")).unwrap();
    assert_eq!((map.width, map.height, map.channels), (16, 12, 1));
    assert!(d.join("disp.png").is_file());

    let beta = d.join("beta.png");
    let printed = ok(&["attention", p(&ckpt), p(&manifest), "--camera", "1", "--out", p(&beta), "--pixel", "8,6"]);
    assert_eq!(printed.lines().count(), 3);
    let out = nlf(&["attention", p(&ckpt), p(&manifest), "--camera", "1", "--out", p(&beta), "--references", "2"]);
    assert!(!out.status.success());

    let epi = d.join("epi.png");
    ok(&["epi", p(&ckpt), p(&manifest), "--fixed", "t=0,v=0", "--rows", "s=-0.2:0.2:5", "--cols", "u=-1:1:9", "--out", p(&epi)]);
    let img = read_png(&epi).unwrap();
    assert_eq!((img.width, img.height), (9, 5));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, "[model]\nmodel_dim = 8\nnum_blocks = 1\n\n[sampler]\nreferences = 2\ncandidates = 2\npoints = 4\n").unwrap();
    let printed = ok(&["gradcheck", p(&config), "--rays", "3"]);
    assert!(printed.contains("max relative error"));
    let out = nlf(&["gradcheck", p(&config), "--rays", "3", "--corrupt", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let out = nlf(&["eval", "missing.ckpt", "missing.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: ") && err.contains("missing.ckpt"), "{err}");
}
