//! Training runs: configuration files, the metrics log and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nlf_core::image::Image;
use nlf_core::metrics::{EvalReport, ImageScore};
use nlf_core::model::{ModelConfig, ModelParams};
use nlf_core::render::{render_image, RenderRequest};
use nlf_core::sampler::SamplerConfig;
use nlf_core::scene::Scene;
use nlf_core::train::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::color::stored;
use crate::error::{io, Error, Result};

/// Contents of a training configuration file. Every section is optional;
/// `model.num_views` is always taken from the scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Steps between metrics log rows; 0 logs every step.
    pub log_every: usize,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// CSV log with one row per logged step.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,loss,lr,wall_clock_s";

    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path).map_err(io(path))?);
        writeln!(out, "{}", Self::HEADER).map_err(io(path))?;
        Ok(Self { out })
    }

    pub fn row(&mut self, step: usize, loss: f64, lr: f64, seconds: f64) -> std::io::Result<()> {
        writeln!(self.out, "{step},{loss:.8e},{lr:.8e},{seconds:.3}")?;
        self.out.flush()
    }
}

/// Trains on `scene` from scratch or from `resume`. `seed` drives both the
/// initialisation and the batch draws.
pub fn train(
    scene: &Scene,
    config: &RunConfig,
    seed: u64,
    resume: Option<Checkpoint>,
    mut log: Option<&mut MetricsLog>,
) -> Result<Checkpoint> {
    let mut model = config.model.clone();
    model.num_views = scene.num_train;
    let mut train = config.train.clone();
    train.seed = seed;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, state) = match resume {
        Some(ck) => (ck.params_for(&model)?, ck.optimizer),
        None => (ModelParams::init(&model, &mut init_rng)?, None),
    };
    // a resumed run draws its batches from a stream keyed by the step it resumes at
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + state.as_ref().map_or(0, |s| s.step as u64));
    let mut trainer = Trainer::new(params, train, config.sampler.clone(), rng)?;
    if let Some(state) = state {
        trainer.state = state;
    }
    let every = config.log_every.max(1);
    let start = Instant::now();
    while !trainer.done() {
        let loss = trainer.step(scene)?;
        let step = trainer.state.step;
        if let Some(log) = log.as_deref_mut() {
            if step % every == 0 || trainer.done() {
                log.row(step, loss, trainer.lr(), start.elapsed().as_secs_f64()).map_err(io("metrics log"))?;
            }
        }
    }
    Ok(Checkpoint {
        step: trainer.state.step as u64,
        params: trainer.params,
        optimizer: Some(trainer.state),
        sampler: Some(config.sampler.clone()),
    })
}

/// Renders each listed view and scores it against its image in the stored
/// 8-bit sRGB domain. Views are rendered in parallel unless
/// `deterministic`; the report is in view order either way.
pub fn evaluate(
    params: &ModelParams<f32>,
    scene: &Scene,
    views: &[usize],
    sampler: &SamplerConfig,
    block_size: usize,
    deterministic: bool,
) -> Result<(EvalReport, Vec<Image>)> {
    let request = RenderRequest { block_size, ..RenderRequest::default() };
    let one = |&i: &usize| -> Result<(ImageScore, Image)> {
        let view = &scene.views[i];
        let out = render_image(params, scene, &view.camera, sampler, &request)?;
        let score = ImageScore::evaluate(view.name.clone(), &stored(&out.color), &stored(&view.image))?;
        Ok((score, out.color))
    };
    let one = &one;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let results: Vec<Result<(ImageScore, Image)>> = if deterministic || threads == 1 {
        views.iter().map(one).collect()
    } else {
        let chunk = views.len().div_ceil(threads).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = views.chunks(chunk).map(|c| s.spawn(move || c.iter().map(one).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("render thread panicked")).collect()
        })
    };
    let mut report = EvalReport::default();
    let mut images = Vec::new();
    for r in results {
        let (score, img) = r?;
        report.images.push(score);
        images.push(img);
    }
    Ok((report, images))
}
