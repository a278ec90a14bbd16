use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nlf::checkpoint::Checkpoint;
use nlf::imageio::{write_float_map, write_png, write_preview};
use nlf::manifest::{load_scene, save_scene, PoseRecord};
use nlf::run::{evaluate, train, MetricsLog, RunConfig};
use nlf_core::geometry::{CameraModel, Vec2};
use nlf_core::model::ModelParams;
use nlf_core::render::{
    correspondence_map, disparity_map, epi_slice, log_scale, render_image, render_pixels, view_attention_image,
    EpiRequest, RenderRequest,
};
use nlf_core::sampler::SamplerConfig;
use nlf_core::scene::Scene;
use nlf_core::synthetic::{generate_synthetic, Primitive, Rig, SyntheticSceneSpec, Texture};
use nlf_core::train::{grad_check, sample_training_batch, GradCheckOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "nlf", version, about = "Light-field neural rendering tools")]
struct Cli {
    /// Seed for every random choice; overrides the seed in spec and config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Render and reduce sequentially, in a fixed order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Checkpoint file.
    ckpt: PathBuf,
    /// Scene manifest.
    scene: PathBuf,
    /// Reference views per ray; defaults to the value stored in the checkpoint.
    #[arg(long)]
    references: Option<usize>,
    /// Epipolar points per view; defaults to the value stored in the checkpoint.
    #[arg(long)]
    points: Option<usize>,
    /// Rays per forward pass.
    #[arg(long, default_value_t = 1024)]
    block_size: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene spec (TOML) into a scene directory.
    Synth { spec: PathBuf, out_dir: PathBuf },
    /// Train a model on a scene.
    Train {
        scene: PathBuf,
        config: PathBuf,
        ckpt_out: PathBuf,
        /// CSV log of step, loss, learning rate and wall clock.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one camera to an sRGB PNG.
    Render {
        #[command(flatten)]
        model: ModelArgs,
        /// Scene view index, view name or camera pose file (TOML).
        #[arg(long)]
        camera: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write a preview with unrenderable pixels painted magenta.
        #[arg(long)]
        debug: Option<PathBuf>,
    },
    /// Score renders of a split against its images.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write the report table here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Externally computed LPIPS, one `name value` pair per line.
        #[arg(long)]
        lpips: Option<PathBuf>,
        /// Write the rendered images into this directory.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Render an epipolar-plane image of a slab scene.
    Epi {
        #[command(flatten)]
        model: ModelArgs,
        /// The two fixed slab coordinates, e.g. `t=0,v=0`.
        #[arg(long, default_value = "t=0,v=0")]
        fixed: String,
        /// Row coordinate as `axis=lo:hi:count`, e.g. `s=-0.5:0.5:64`.
        #[arg(long)]
        rows: String,
        /// Column coordinate as `axis=lo:hi:count`.
        #[arg(long)]
        cols: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Disparity map: float map `<out>.f32` and preview `<out>.png`.
    Disparity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        camera: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// View attention image (three reference views) and, for one pixel,
    /// the epipolar attention over putative depths.
    Attention {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        camera: String,
        #[arg(long)]
        out: PathBuf,
        /// Print the per-view epipolar attention of this pixel, `x,y`.
        #[arg(long)]
        pixel: Option<String>,
    },
    /// Compare analytic gradients with finite differences in 64-bit floats.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 6)]
        rays: usize,
        /// Scale analytic gradients by this factor to exercise the check.
        #[arg(long)]
        corrupt: Option<f64>,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

struct Loaded {
    ckpt: Checkpoint,
    scene: Scene,
    sampler: SamplerConfig,
    block_size: usize,
}

impl ModelArgs {
    fn load(&self) -> Result<Loaded> {
        let ckpt = Checkpoint::load(&self.ckpt)?;
        let scene = load_scene(&self.scene)?;
        if ckpt.params.config.num_views != scene.num_train {
            bail!(
                "checkpoint was trained with {} views but the scene has {} training views",
                ckpt.params.config.num_views,
                scene.num_train
            );
        }
        let mut sampler = ckpt.sampler.clone().unwrap_or_default();
        if let Some(k) = self.references {
            sampler.references = k;
            sampler.candidates = sampler.candidates.max(k);
        }
        if let Some(p) = self.points {
            sampler.points = p;
        }
        sampler.training = false;
        Ok(Loaded { ckpt, scene, sampler, block_size: self.block_size })
    }
}

fn camera(scene: &Scene, spec: &str) -> Result<CameraModel> {
    if let Ok(i) = spec.parse::<usize>() {
        return Ok(scene.views.get(i).with_context(|| format!("scene has no view {i}"))?.camera.clone());
    }
    if let Some(v) = scene.views.iter().find(|v| v.name == spec) {
        return Ok(v.camera.clone());
    }
    let text = fs::read_to_string(spec).with_context(|| format!("`{spec}` is neither a view nor a readable pose file"))?;
    let pose: PoseRecord = toml::from_str(&text).with_context(|| format!("cannot parse pose file {spec}"))?;
    Ok(pose.camera(scene.views.len())?)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

fn parse_fixed(text: &str) -> Result<[(usize, f64); 2]> {
    let parts: Vec<(usize, f64)> = text
        .split(',')
        .map(|p| {
            let (axis, value) = p.split_once('=').context("expected axis=value")?;
            Ok((axis_index(axis)?, value.trim().parse()?))
        })
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| anyhow::anyhow!("--fixed needs exactly two coordinates"))
}

fn parse_range(text: &str) -> Result<(usize, f64, f64, usize)> {
    let (axis, range) = text.split_once('=').context("expected axis=lo:hi:count")?;
    let r: Vec<&str> = range.split(':').collect();
    let [lo, hi, n] = r.as_slice() else { bail!("expected axis=lo:hi:count, found `{text}`") };
    Ok((axis_index(axis)?, lo.parse()?, hi.parse()?, n.parse()?))
}

fn axis_index(axis: &str) -> Result<usize> {
    Ok(match axis.trim() {
        "s" => 0,
        "t" => 1,
        "u" => 2,
        "v" => 3,
        other => bail!("unknown slab axis `{other}` (use s, t, u or v)"),
    })
}

/// Small textured-plane scene the gradient check evaluates its batch on.
fn gradcheck_scene(views: usize) -> Result<Scene> {
    let spec = SyntheticSceneSpec {
        primitives: vec![Primitive::Plane {
            depth: 2.0,
            texture: Texture::Noise { waves: 12, min_wavelength: 0.08, max_wavelength: 0.5 },
            extent: None,
        }],
        rig: Rig::Line { baseline: 0.3 },
        count: views,
        width: 16,
        height: 16,
        focal: 16.0,
        ..Default::default()
    };
    Ok(generate_synthetic(&spec)?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { spec, out_dir } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut spec: SyntheticSceneSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let scene = generate_synthetic(&spec)?;
            let path = save_scene(&scene, &out_dir)?;
            println!("{}: {} training and {} test views", path.display(), scene.num_train, scene.test_views().len());
        }
        Command::Train { scene, config, ckpt_out, log, resume } => {
            let scene = load_scene(&scene)?;
            let config = RunConfig::read(&config)?;
            let seed = cli.seed.unwrap_or(config.train.seed);
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let mut log = log.map(|p| MetricsLog::create(&p)).transpose()?;
            let ckpt = train(&scene, &config, seed, resume, log.as_mut())?;
            ckpt.save(&ckpt_out)?;
            println!("{}: {} steps", ckpt_out.display(), ckpt.step);
        }
        Command::Render { model, camera: which, out, debug } => {
            let l = model.load()?;
            let cam = camera(&l.scene, &which)?;
            let request = RenderRequest { block_size: l.block_size, ..RenderRequest::default() };
            let r = render_image(&l.ckpt.params, &l.scene, &cam, &l.sampler, &request)?;
            write_png(&out, &r.color)?;
            if let Some(path) = debug {
                write_png(&path, &r.debug_color())?;
            }
            let flagged = r.flagged.iter().filter(|&&f| f).count();
            if flagged > 0 {
                eprintln!("{flagged} pixels could not be rendered and were left black");
            }
        }
        Command::Eval { model, split, report, lpips, images } => {
            let l = model.load()?;
            let views: Vec<usize> = match split {
                Split::Train => (0..l.scene.num_train).collect(),
                Split::Test => (l.scene.num_train..l.scene.views.len()).collect(),
            };
            if views.is_empty() {
                bail!("the selected split has no views");
            }
            let (mut rep, renders) = evaluate(&l.ckpt.params, &l.scene, &views, &l.sampler, l.block_size, cli.deterministic)?;
            if let Some(path) = lpips {
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let mut values = Vec::new();
                for s in &rep.images {
                    let line = text
                        .lines()
                        .find(|l| l.split_whitespace().next() == Some(s.name.as_str()))
                        .with_context(|| format!("no LPIPS value for {}", s.name))?;
                    values.push(line.split_whitespace().nth(1).context("missing value")?.parse::<f64>()?);
                }
                rep.set_lpips(&values)?;
            }
            if let Some(dir) = images {
                fs::create_dir_all(&dir)?;
                for (s, img) in rep.images.iter().zip(&renders) {
                    write_png(&dir.join(format!("{}.png", s.name)), img)?;
                }
            }
            let table = rep.to_table();
            print!("{table}");
            if let Some(path) = report {
                fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Epi { model, fixed, rows, cols, out } => {
            let l = model.load()?;
            let request =
                EpiRequest { fixed: parse_fixed(&fixed)?, rows: parse_range(&rows)?, cols: parse_range(&cols)?, block_size: l.block_size };
            let epi = epi_slice(&l.ckpt.params, &l.scene, &l.sampler, &request)?;
            let mut img = epi.image.clone();
            for (i, &f) in epi.flagged.iter().enumerate() {
                if f {
                    img.data[i * 3..i * 3 + 3].copy_from_slice(&nlf_core::render::FLAG_COLOR);
                }
            }
            write_png(&out, &img)?;
        }
        Command::Disparity { model, camera: which, out } => {
            let l = model.load()?;
            let cam = camera(&l.scene, &which)?;
            let (disp, flagged) = disparity_map(&l.ckpt.params, &l.scene, &cam, &l.sampler)?;
            write_float_map(&with_extension(&out, "f32"), &disp)?;
            let (lo, hi) = (1.0 / l.scene.frame.far, 1.0 / l.scene.frame.near);
            write_preview(&with_extension(&out, "png"), &disp, lo as f32, hi as f32, Some(&flagged))?;
            println!("preview maps disparity {lo:.4}..{hi:.4} (1/far..1/near) to black..white");
        }
        Command::Attention { model, camera: which, out, pixel } => {
            let l = model.load()?;
            let cam = camera(&l.scene, &which)?;
            let (beta, flagged) = view_attention_image(&l.ckpt.params, &l.scene, &cam, &l.sampler)?;
            write_preview(&out, &beta, 0.0, 1.0, Some(&flagged))?;
            if let Some(px) = pixel {
                let (x, y) = px.split_once(',').context("--pixel expects x,y")?;
                let p = Vec2::new(x.trim().parse()?, y.trim().parse()?);
                let r = render_pixels(&l.ckpt.params, &l.scene, &cam, &[p], &l.sampler, 1)?;
                let trace = r[0].as_ref().and_then(|r| r.trace.clone()).context("that pixel cannot be rendered")?;
                for j in 0..trace.references {
                    let name = &l.scene.views[trace.view_ids[j]].name;
                    match correspondence_map(&trace, j) {
                        Ok((best, dist)) => {
                            let logs: Vec<String> = log_scale(&dist, 1e-6).iter().map(|v| format!("{v:.2}")).collect();
                            println!(
                                "{name}: beta {:.4}, peak at depth {:.4}, log attention [{}]",
                                trace.beta[j],
                                trace.deltas[best],
                                logs.join(" ")
                            );
                        }
                        Err(e) => println!("{name}: {e}"),
                    }
                }
            }
        }
        Command::Gradcheck { config, rays, corrupt, tolerance } => {
            let config = RunConfig::read(&config)?;
            let seed = cli.seed.unwrap_or(config.train.seed);
            let views = config.sampler.candidates.max(config.sampler.references) + 1;
            let scene = gradcheck_scene(views)?;
            let mut model = config.model.clone();
            model.num_views = scene.num_train;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = ModelParams::<f64>::init(&model, &mut rng)?;
            let b = sample_training_batch(&scene, &config.sampler, &model, rays, &mut rng)?;
            let options = GradCheckOptions { corrupt, seed, ..GradCheckOptions::default() };
            let report = grad_check(&params, &b.batch, &b.gt, config.train.aux_weight, &options)?;
            for (group, n, err) in &report.groups {
                println!("{group:<28} {n:>5} {err:.3e}");
            }
            println!("max relative error {:.3e}", report.max_rel_error);
            if let Some(w) = &report.worst {
                println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.name, w.index, w.analytic, w.numeric);
            }
            if !(report.max_rel_error < tolerance) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
