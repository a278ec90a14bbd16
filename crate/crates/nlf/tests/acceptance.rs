//! End-to-end acceptance checks. Run with
//! `cargo test -p nlf --test acceptance [-- 1 4 ...]`; with no numbers every
//! check runs. Prints one line per check and exits non-zero on a failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nlf::checkpoint::Checkpoint;
use nlf::color::{quantize, stored};
use nlf::manifest::load_scene;
use nlf::run::{evaluate, train, RunConfig};
use nlf_core::geometry::*;
use nlf_core::metrics::{avg_metric, psnr};
use nlf_core::model::{predict, ModelConfig, ModelParams, ModelVariant, RayBatch, RenderTrace};
use nlf_core::render::{correspondence_map, disparity_map, epi_slice, render_image, render_pixels, EpiRequest, RenderRequest};
use nlf_core::sampler::{sample_epipolar_points, DepthSpacing, SamplerConfig, PATCH_DIM};
use nlf_core::scene::Scene;
use nlf_core::synthetic::*;
use nlf_core::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let checks: [(u32, &str, u64, Check); 7] = [
        (1, "average metric", 60, average_metric),
        (2, "geometry", 60, geometry),
        (3, "gradient check", 300, gradient_check),
        (4, "overfit one image", 600, overfit),
        (5, "held-out views", 3600, held_out),
        (6, "interpretability", 900, interpretability),
        (7, "invariants", 300, invariants),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {id} {name}: {} ({:.1}s / limit {limit}s{})",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            if in_time { "" } else { ", too slow" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

// ---------------------------------------------------------------- 1

fn average_metric() -> Outcome {
    let rows = [((28.26, 0.920, 0.062), 0.0297), ((27.26, 0.904, 0.178), 0.0473)];
    let mut worst = 0.0f64;
    let mut got = Vec::new();
    for ((p, s, l), want) in rows {
        let a = avg_metric(p, s, Some(l));
        worst = worst.max((a - want).abs());
        got.push(format!("{a:.4}"));
    }
    outcome(worst < 5e-4, format!("{} vs 0.0297, 0.0473, max |diff| {worst:.1e}", got.join(", ")))
}

// ---------------------------------------------------------------- 2

fn random_camera(rng: &mut impl Rng, view_id: usize) -> CameraModel {
    let eye = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..0.0));
    let target = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(3.0..5.0));
    let up = Vec3::new(rng.random_range(-0.3..0.3), -1.0, rng.random_range(-0.3..0.3));
    let (w, h) = (rng.random_range(16..96), rng.random_range(16..96));
    let mut cam = CameraModel::look_at(eye, target, up, rng.random_range(20.0..120.0), w, h, view_id).unwrap();
    cam.intrinsics[(1, 1)] *= rng.random_range(0.8..1.2);
    cam.intrinsics[(0, 2)] += rng.random_range(-3.0..3.0);
    cam
}

fn random_pixel(rng: &mut impl Rng, cam: &CameraModel) -> Vec2 {
    Vec2::new(rng.random_range(0.0..cam.width as f64 - 1.0), rng.random_range(0.0..cam.height as f64 - 1.0))
}

/// `K_b^-T [t]x R K_a^-1` from the relative pose, unit Frobenius norm.
fn fundamental(a: &CameraModel, b: &CameraModel) -> Mat3 {
    let r = b.rotation * a.rotation.transpose();
    let t = b.translation - r * a.translation;
    let tx = Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let f = b.intrinsics.try_inverse().unwrap().transpose() * tx * r * a.intrinsics.try_inverse().unwrap();
    f / f.norm()
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let frame = SceneFrame { z_st: 1.0, z_uv: 5.0, sphere_center: [0.0, 0.0, 2.0], sphere_radius: 6.0, near: 1.0, far: 5.0, coord_scale: 1.0 };
    let sampler = SamplerConfig { references: 1, candidates: 1, points: 8, depth_spacing: DepthSpacing::UniformInverseDepth, training: false };
    let (mut reproj, mut epipolar, mut coords) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let a = random_camera(&mut rng, 0);
        let b = random_camera(&mut rng, 1);
        let x = random_pixel(&mut rng, &a);
        let ray = ray_from_pixel(&a, x);

        let delta = rng.random_range(1.0..5.0);
        let (px, depth) = project(&a, &point_at(&ray, delta)).unwrap();
        reproj = reproj.max((px - x).norm()).max((depth - delta).abs());

        let f = fundamental(&a, &b);
        let grid = sample_epipolar_points(&ray, &frame, Parametrization::Slab, &[&b], &sampler);
        let x1 = Vec3::new(x.x, x.y, 1.0);
        for (p, _) in grid.pixels.iter().zip(&grid.valid).filter(|(_, v)| **v) {
            epipolar = epipolar.max(Vec3::new(p.x, p.y, 1.0).dot(&(f * x1)).abs());
        }

        // the same line seen from a camera centered on it
        let eye = point_at(&ray, rng.random_range(-0.5..0.5));
        let far = point_at(&ray, 4.0);
        let look = far + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
        let c = CameraModel::look_at(eye, look, Vec3::new(rng.random_range(-0.5..0.5), -1.0, 0.0), 60.0, 64, 64, 2).unwrap();
        let ray_c = ray_from_pixel(&c, project(&c, &far).unwrap().0);
        for p in [Parametrization::Slab, Parametrization::TwoSphere, Parametrization::Plucker] {
            let u = frame.coords(&ray, p).unwrap().to_vec();
            let v = frame.coords(&ray_c, p).unwrap().to_vec();
            coords = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(coords, f64::max);
        }
    }
    outcome(
        reproj < 1e-9 && epipolar < 1e-6 && coords < 1e-9,
        format!("10^4 pairs: reprojection {reproj:.1e} px, x'Fx {epipolar:.1e}, coordinates {coords:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_check() -> Outcome {
    let config = RunConfig::read(&repo("configs/tiny.toml")).unwrap();
    let spec = SyntheticSceneSpec {
        primitives: vec![Primitive::Plane { depth: 2.0, texture: Texture::Noise { waves: 12, min_wavelength: 0.08, max_wavelength: 0.5 }, extent: None }],
        rig: Rig::Line { baseline: 0.3 },
        count: 3,
        width: 16,
        height: 16,
        focal: 16.0,
        ..Default::default()
    };
    let scene = generate_synthetic(&spec).unwrap();
    let mut model = config.model.clone();
    model.num_views = scene.num_train;
    assert_eq!((model.num_blocks, model.model_dim, config.sampler.points, config.sampler.references), (2, 32, 4, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::<f64>::init(&model, &mut rng).unwrap();
    let b = sample_training_batch(&scene, &config.sampler, &model, 6, &mut rng).unwrap();
    let clean = grad_check(&params, &b.batch, &b.gt, config.train.aux_weight, &GradCheckOptions::default()).unwrap();
    let options = GradCheckOptions { corrupt: Some(1.5), ..GradCheckOptions::default() };
    let corrupted = grad_check(&params, &b.batch, &b.gt, config.train.aux_weight, &options).unwrap();
    let n: usize = clean.groups.iter().map(|g| g.1).sum();
    outcome(
        clean.max_rel_error < 1e-6 && corrupted.max_rel_error > 1e-3,
        format!("{n} coordinates, max relative error {:.1e}; corrupted gradient {:.1e}", clean.max_rel_error, corrupted.max_rel_error),
    )
}

// ---------------------------------------------------------------- 4, 6

const PLANE_DEPTH: f64 = 2.0;

/// Three cameras 0.5 apart facing a noise-textured plane, images stored
/// as 8-bit sRGB.
fn plane_scene() -> Scene {
    let spec = SyntheticSceneSpec {
        primitives: vec![Primitive::Plane {
            depth: PLANE_DEPTH,
            texture: Texture::Noise { waves: 12, min_wavelength: 0.15, max_wavelength: 0.6 },
            extent: None,
        }],
        rig: Rig::Line { baseline: 1.0 },
        count: 3,
        width: 32,
        height: 32,
        focal: 32.0,
        ..Default::default()
    };
    let mut scene = generate_synthetic(&spec).unwrap();
    for v in &mut scene.views {
        v.image = quantize(&v.image);
    }
    scene
}

fn plane_model(views: usize) -> (ModelParams<f32>, SamplerConfig, TrainConfig) {
    let config = ModelConfig { model_dim: 32, num_blocks: 2, embedding_dim: 32, num_views: views, ..ModelConfig::default() };
    let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let sampler = SamplerConfig { references: 2, candidates: 2, points: 16, ..SamplerConfig::default() };
    let train = TrainConfig { batch_size: 256, total_steps: 2000, warmup_steps: 100, base_lr: 3e-3, ..TrainConfig::default() };
    (params, sampler, train)
}

/// Fits the middle view of `scene` from the outer two. Calls `probe` every
/// 250 steps; training stops when it returns true.
fn fit_middle_view(scene: &Scene, steps: usize, mut probe: impl FnMut(usize, &ModelParams<f32>) -> bool) -> ModelParams<f32> {
    let (mut params, sampler, mut tc) = plane_model(scene.num_train);
    tc.total_steps = steps;
    let target = &scene.views[1];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let refs = scene.references(&target.camera, &sampler, &mut rng).unwrap();
    let mut state = OptState::new(&params);
    let (w, h) = (target.camera.width, target.camera.height);
    for step in 1..=steps {
        let pixels: Vec<Vec2> =
            (0..tc.batch_size).map(|_| Vec2::new(rng.random_range(0..w) as f64, rng.random_range(0..h) as f64)).collect();
        let (batch, kept) = scene.prepare(&target.camera, &pixels, &refs, &sampler, &params.config).unwrap();
        let gt: Vec<f64> = kept
            .iter()
            .flat_map(|&i| target.image.pixel(pixels[i].x as usize, pixels[i].y as usize).iter().map(|&c| c as f64).collect::<Vec<_>>())
            .collect();
        train_step(&mut params, &mut state, &batch.unwrap(), &gt, &tc).unwrap();
        if step % 250 == 0 && probe(step, &params) {
            break;
        }
    }
    params
}

fn overfit() -> Outcome {
    let scene = plane_scene();
    let (_, sampler, _) = plane_model(3);
    let target = &scene.views[1];
    let mut reached = None;
    let mut last = 0.0;
    fit_middle_view(&scene, 2000, |step, params| {
        let out = render_image(params, &scene, &target.camera, &sampler, &RenderRequest::default()).unwrap();
        last = psnr(&stored(&out.color), &stored(&target.image)).unwrap();
        if last >= 40.0 {
            reached = Some(step);
        }
        reached.is_some()
    });
    match reached {
        Some(step) => outcome(true, format!("32x32, K=2: {last:.2} dB after {step} steps")),
        None => outcome(false, format!("32x32, K=2: {last:.2} dB after 2000 steps")),
    }
}

fn interpretability() -> Outcome {
    let scene = plane_scene();
    let (_, sampler, _) = plane_model(3);
    let params = fit_middle_view(&scene, 1000, |_, _| false);
    let target = &scene.views[1];

    let (disp, flagged) = disparity_map(&params, &scene, &target.camera, &sampler).unwrap();
    let mut errors: Vec<f64> = disp
        .data
        .iter()
        .zip(&flagged)
        .filter(|(_, f)| !**f)
        .map(|(&d, _)| (d as f64 * PLANE_DEPTH - 1.0).abs())
        .collect();
    errors.sort_by(f64::total_cmp);
    let median = errors[errors.len() / 2];

    let (w, h) = (target.camera.width, target.camera.height);
    let pixels: Vec<Vec2> = (0..h).flat_map(|y| (0..w).map(move |x| Vec2::new(x as f64, y as f64))).collect();
    let results = render_pixels(&params, &scene, &target.camera, &pixels, &sampler, 1024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let refs = scene.references(&target.camera, &SamplerConfig { training: false, ..sampler.clone() }, &mut rng).unwrap();
    let (mut hits, mut total) = (0, 0);
    for (px, r) in pixels.iter().zip(&results) {
        let Some(trace) = r.as_ref().and_then(|r| r.trace.as_ref()) else { continue };
        let (_, grid) = scene.grid(&target.camera, *px, &refs, &sampler).unwrap();
        let surface = point_at(&ray_from_pixel(&target.camera, *px), PLANE_DEPTH);
        for (j, &view) in refs.iter().enumerate() {
            let cam = &scene.views[view].camera;
            let (truth, _) = project(cam, &surface).unwrap();
            // pairs whose true match falls outside the reference image have nothing to find
            if truth.x < 0.0 || truth.y < 0.0 || truth.x > (cam.width - 1) as f64 || truth.y > (cam.height - 1) as f64 {
                continue;
            }
            let Ok((best, _)) = correspondence_map(trace, j) else { continue };
            total += 1;
            if (grid.pixels[j * sampler.points + best] - truth).norm() <= 2.0 {
                hits += 1;
            }
        }
    }
    let matched = hits as f64 / total.max(1) as f64;

    let (ratio, front, back) = epi_slopes();
    let want = EPI_DEPTHS.1 / EPI_DEPTHS.0;
    let ratio_err = (ratio / want - 1.0).abs();
    outcome(
        median < 0.05 && matched >= 0.9 && ratio_err < 0.1,
        format!(
            "disparity median rel. error {:.2}%, correspondence {:.1}% of {total} within 2 px, EPI slopes {front:.4}/{back:.4} = {ratio:.3} (want {want:.3})",
            median * 100.0,
            matched * 100.0
        ),
    )
}

const EPI_DEPTHS: (f64, f64) = (2.0, 4.0);

/// Trains on two fronto-parallel planes and measures the line slopes in a
/// horizontal EPI. The slab planes are put at the camera plane (`z = 0`)
/// and `z = 1`, so `s` is the camera position and `u - s` the normalized
/// image coordinate; a point at depth `Z` traces `u = u0 + s (1 - 1/Z)`.
/// Returns the ratio of the fitted `1/Z` values and the two values.
fn epi_slopes() -> (f64, f64, f64) {
    let (z1, z2) = EPI_DEPTHS;
    let tex = Texture::Noise { waves: 12, min_wavelength: 0.15, max_wavelength: 0.6 };
    let spec = SyntheticSceneSpec {
        primitives: vec![
            // the front plane covers x <= 0
            Primitive::Plane { depth: z1, texture: tex.clone(), extent: Some([-10.0, 0.0, -10.0, 10.0]) },
            Primitive::Plane { depth: z2, texture: tex, extent: None },
        ],
        rig: Rig::Line { baseline: 1.0 },
        count: 8,
        width: 32,
        height: 32,
        focal: 32.0,
        near: 1.0,
        far: 6.0,
        ..Default::default()
    };
    let mut scene = generate_synthetic(&spec).unwrap();
    for v in &mut scene.views {
        v.image = quantize(&v.image);
    }
    scene.frame.z_st = 0.0;
    scene.frame.z_uv = 1.0;
    let (params, mut sampler, mut tc) = plane_model(scene.num_train);
    sampler.candidates = 3;
    tc.total_steps = 1000;
    let mut trainer = Trainer::new(params, tc, sampler.clone(), ChaCha8Rng::seed_from_u64(1)).unwrap();
    while !trainer.done() {
        trainer.step(&scene).unwrap();
    }

    let (rows, cols) = (33, 256);
    let (u_lo, u_hi) = (-1.0, 1.0);
    let epi = epi_slice(&trainer.params, &scene, &sampler, &EpiRequest::horizontal(0.0, 0.0, (-0.5, 0.5, rows), (u_lo, u_hi, cols))).unwrap();
    let s_at = |r: usize| -0.5 + r as f64 / (rows - 1) as f64;
    let sample = |r: usize, u: f64| -> Option<f64> {
        let x = (u - u_lo) / (u_hi - u_lo) * (cols - 1) as f64;
        let i = (x.floor().max(0.0) as usize).min(cols - 2);
        let f = x - i as f64;
        let (a, b) = (r * cols + i, r * cols + i + 1);
        if epi.flagged[a] || epi.flagged[b] {
            return None;
        }
        let lum = |k: usize| epi.image.data[k * 3..k * 3 + 3].iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        Some(lum(a) * (1.0 - f) + lum(b) * f)
    };
    // Shear search: the slope whose lines through `u0` in `band` have the
    // least color variance.
    let fit = |band: (f64, f64)| -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=360 {
            let m = 0.1 + k as f64 * 0.0025;
            let mut cost = 0.0;
            let mut lines = 0;
            for l in 0..40 {
                let u0 = band.0 + (band.1 - band.0) * l as f64 / 39.0;
                let Some(vals) = (0..rows).map(|r| sample(r, u0 + s_at(r) * (1.0 - m))).collect::<Option<Vec<f64>>>() else { continue };
                let mean = vals.iter().sum::<f64>() / rows as f64;
                cost += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                lines += 1;
            }
            if lines > 0 && cost / (lines as f64) < best.0 {
                best = (cost / lines as f64, m);
            }
        }
        best.1
    };
    // Bands of world x at s = 0 that stay on one plane, unoccluded and in
    // view, for every camera: x in [-0.5, -0.1] on the front plane and
    // [0.6, 1.5] on the back one.
    let front = fit((-0.5 / z1, -0.1 / z1));
    let back = fit((0.6 / z2, 1.5 / z2));
    (front / back, front, back)
}

// ---------------------------------------------------------------- 5

fn held_out() -> Outcome {
    let scene = load_scene(&repo("scenes/checker_sphere/scene.toml")).unwrap();
    let config = RunConfig::read(&repo("configs/checker_sphere.toml")).unwrap();
    let test: Vec<usize> = (scene.num_train..scene.views.len()).collect();
    let score = |config: &RunConfig| -> f64 {
        let ck = train(&scene, config, 0, None, None).unwrap();
        let (report, _) = evaluate(&ck.params, &scene, &test, &config.sampler, 1024, false).unwrap();
        report.mean_psnr()
    };
    let full = score(&config);
    let vanilla = score(&RunConfig { model: ModelConfig { variant: ModelVariant::Vanilla { layers: 8 }, ..config.model.clone() }, ..config.clone() });
    outcome(
        full >= 25.0 && full - vanilla >= 3.0,
        format!(
            "{}/{} views at 64x64, {} steps: {full:.2} dB vs ray-only MLP {vanilla:.2} dB (+{:.2})",
            scene.num_train,
            test.len(),
            config.train.total_steps,
            full - vanilla
        ),
    )
}

// ---------------------------------------------------------------- 7

/// Random inputs with at least one valid point per ray.
fn random_batch(rng: &mut impl Rng, config: &ModelConfig, rays: usize, k: usize, p: usize) -> RayBatch {
    let rows = rays * k * p;
    let enc = config.ray_dim() + config.point_dim();
    let mut uniform = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let target_encoding = uniform(rays * config.ray_dim(), -1.0, 1.0);
    let point_encoding = uniform(rows * enc, -1.0, 1.0);
    let patches = uniform(rows * PATCH_DIM, 0.0, 1.0);
    let colors = uniform(rows * 3, 0.0, 1.0);
    let deltas = (0..rays).flat_map(|_| (0..p).map(|i| 1.0 + 0.25 * i as f64)).collect();
    let mut valid: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
    for r in 0..rays {
        let i = rng.random_range(0..k * p);
        valid[r * k * p + i] = true;
    }
    let view_ids = (0..rays * k).map(|_| rng.random_range(0..config.num_views)).collect();
    RayBatch { rays, references: k, points: p, target_encoding, point_encoding, patches, colors, view_ids, valid, deltas }
}

fn copy_row(out: &mut RayBatch, src: &RayBatch, d: usize, s: usize) {
    let enc = src.point_encoding.len() / src.valid.len();
    out.valid[d] = src.valid[s];
    out.point_encoding[d * enc..(d + 1) * enc].copy_from_slice(&src.point_encoding[s * enc..(s + 1) * enc]);
    out.patches[d * PATCH_DIM..(d + 1) * PATCH_DIM].copy_from_slice(&src.patches[s * PATCH_DIM..(s + 1) * PATCH_DIM]);
    out.colors[d * 3..(d + 1) * 3].copy_from_slice(&src.colors[s * 3..(s + 1) * 3]);
}

fn permute_views(batch: &RayBatch, perm: &[usize]) -> RayBatch {
    let (k, p) = (batch.references, batch.points);
    let mut out = batch.clone();
    for r in 0..batch.rays {
        for (dst, &src) in perm.iter().enumerate() {
            out.view_ids[r * k + dst] = batch.view_ids[r * k + src];
            for i in 0..p {
                copy_row(&mut out, batch, (r * k + dst) * p + i, (r * k + src) * p + i);
            }
        }
    }
    out
}

fn permute_points(batch: &RayBatch, perm: &[usize]) -> RayBatch {
    let p = batch.points;
    let mut out = batch.clone();
    for g in 0..batch.rays * batch.references {
        for (dst, &src) in perm.iter().enumerate() {
            copy_row(&mut out, batch, g * p + dst, g * p + src);
        }
    }
    out
}

fn run(params: &ModelParams<f64>, batch: &RayBatch) -> (Vec<[f64; 3]>, Vec<RenderTrace>) {
    let (rgb, traces) = predict(params, batch).unwrap();
    (rgb, traces.into_iter().map(|t| t.unwrap()).collect())
}

fn invariants() -> Outcome {
    let mut failures = Vec::new();
    let (mut norm_err, mut perm_err) = (0.0f64, 0.0f64);
    let (mut in_range, mut masked_exact) = (true, true);
    let (k, p) = (3, 8);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig { model_dim: 16, num_blocks: 2, embedding_dim: 8, num_views: 5, ..ModelConfig::default() };
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = random_batch(&mut rng, &config, 4, k, p);
        let (rgb, traces) = run(&params, &batch);
        for (c, t) in rgb.iter().zip(&traces) {
            in_range &= c.iter().all(|&x| x > 0.0 && x < 1.0);
            norm_err = norm_err.max((t.beta.iter().sum::<f64>() - 1.0).abs());
            for j in 0..k {
                let valid = &t.valid[j * p..(j + 1) * p];
                let sum: f64 = t.alpha_row(j).iter().sum();
                if valid.iter().any(|&v| v) {
                    norm_err = norm_err.max((sum - 1.0).abs());
                } else {
                    masked_exact &= sum == 0.0 && t.beta[j] == 0.0;
                }
                masked_exact &= t.alpha_row(j).iter().zip(valid).all(|(a, v)| *v || *a == 0.0);
            }
        }

        let view_perm = [2, 0, 1];
        let (rgb_v, traces_v) = run(&params, &permute_views(&batch, &view_perm));
        let (rgb_p, _) = run(&params, &permute_points(&batch, &[5, 2, 7, 0, 3, 6, 1, 4]));
        for r in 0..batch.rays {
            for c in 0..3 {
                perm_err = perm_err.max((rgb[r][c] - rgb_v[r][c]).abs()).max((rgb[r][c] - rgb_p[r][c]).abs());
            }
            for (dst, &src) in view_perm.iter().enumerate() {
                perm_err = perm_err.max((traces[r].beta[src] - traces_v[r].beta[dst]).abs());
            }
        }

        let mut scrambled = batch.clone();
        let enc = batch.point_encoding.len() / batch.valid.len();
        for i in 0..batch.valid.len() {
            if !batch.valid[i] {
                scrambled.colors[i * 3..i * 3 + 3].iter_mut().for_each(|c| *c = rng.random());
                scrambled.patches[i * PATCH_DIM..(i + 1) * PATCH_DIM].iter_mut().for_each(|c| *c = rng.random());
                scrambled.point_encoding[i * enc..(i + 1) * enc].iter_mut().for_each(|c| *c = rng.random());
            }
        }
        masked_exact &= run(&params, &scrambled).0 == rgb;
    }
    if norm_err >= 1e-5 {
        failures.push("normalization");
    }
    if perm_err >= 1e-5 {
        failures.push("permutation");
    }
    if !masked_exact {
        failures.push("masking");
    }
    if !in_range {
        failures.push("color range");
    }

    // checkpoint round trip and block size, on a briefly trained model
    let spec = SyntheticSceneSpec {
        primitives: vec![Primitive::Plane { depth: 3.0, texture: Texture::Noise { waves: 8, min_wavelength: 0.1, max_wavelength: 0.5 }, extent: None }],
        count: 5,
        width: 24,
        height: 20,
        focal: 24.0,
        test_views: vec![2],
        ..Default::default()
    };
    let scene = generate_synthetic(&spec).unwrap();
    let config = RunConfig {
        model: ModelConfig { model_dim: 16, num_blocks: 1, embedding_dim: 8, ..ModelConfig::default() },
        sampler: SamplerConfig { references: 2, candidates: 3, points: 8, ..SamplerConfig::default() },
        train: TrainConfig { batch_size: 32, total_steps: 20, warmup_steps: 2, ..TrainConfig::default() },
        log_every: 0,
    };
    let ck = train(&scene, &config, 3, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bits = |p: &ModelParams<f32>| -> Vec<u32> { p.store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect() };
    let round_trip = bits(&back.params) == bits(&ck.params) && back.to_bytes() == std::fs::read(&path).unwrap() && back.optimizer == ck.optimizer;
    if !round_trip {
        failures.push("checkpoint");
    }

    let cam = &scene.views[2].camera;
    let render = |block_size| {
        let out = render_image(&ck.params, &scene, cam, &config.sampler, &RenderRequest { block_size, disparity: true, ..RenderRequest::default() }).unwrap();
        let mut v: Vec<u32> = out.color.data.iter().map(|x| x.to_bits()).collect();
        v.extend(out.disparity.unwrap().data.iter().map(|x| x.to_bits()));
        v
    };
    let base = render(4096);
    let blocks_equal = [1, 7, 64, 479].into_iter().all(|b| render(b) == base);
    if !blocks_equal {
        failures.push("block size");
    }

    outcome(
        failures.is_empty(),
        format!(
            "50 random models: attention sums off by {norm_err:.1e}, permutations {perm_err:.1e}, masked content {}, colors in (0,1) {}; checkpoint bitwise {}, block sizes bitwise {}{}",
            if masked_exact { "exact" } else { "differs" },
            if in_range { "yes" } else { "no" },
            if round_trip { "yes" } else { "no" },
            if blocks_equal { "yes" } else { "no" },
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}
