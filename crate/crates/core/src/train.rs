//! Losses, Adam with warmup and linear decay, the training loop and a
//! finite-difference gradient checker.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::model::{forward, Ctx, ModelParams, RayBatch, RenderTrace};
use crate::sampler::SamplerConfig;
use crate::scene::Scene;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct TrainConfig {
    /// Rays per step.
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the auxiliary color loss.
    pub aux_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            total_steps: 20_000,
            warmup_steps: 500,
            base_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            aux_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config("warmup_steps must be below total_steps".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let step = step.min(config.total_steps) as f64;
    let warmup = config.warmup_steps as f64;
    let total = config.total_steps as f64;
    if step < warmup {
        config.base_lr * step / warmup
    } else {
        config.base_lr * (total - step) / (total - warmup)
    }
}

/// `Σ_j β^j Σ_i α_i^j c_i^j` for one ray; `colors` holds `K*P` entries.
pub fn aux_color(trace: &RenderTrace, colors: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for j in 0..trace.references {
        let mut view = [0.0; 3];
        for (i, &a) in trace.alpha_row(j).iter().enumerate() {
            let c = colors[j * trace.points + i];
            for ch in 0..3 {
                view[ch] += a * c[ch];
            }
        }
        for ch in 0..3 {
            out[ch] += trace.beta[j] * view[ch];
        }
    }
    out
}

/// Depth estimate `Σ_j β^j Σ_i α_i^j δ_i`.
pub fn expected_depth(trace: &RenderTrace) -> f64 {
    (0..trace.references)
        .map(|j| trace.beta[j] * trace.alpha_row(j).iter().zip(&trace.deltas).map(|(a, d)| a * d).sum::<f64>())
        .sum()
}

/// Mean over rays and channels of `(pred - gt)^2 + λ (aux - gt)^2`.
pub fn loss(pred: &[[f64; 3]], aux: &[[f64; 3]], gt: &[[f64; 3]], aux_weight: f64) -> f64 {
    let n = (gt.len() * 3).max(1) as f64;
    let mut total = 0.0;
    for ((p, a), g) in pred.iter().zip(aux).zip(gt) {
        for c in 0..3 {
            total += (p[c] - g[c]).powi(2) + aux_weight * (a[c] - g[c]).powi(2);
        }
    }
    total / n
}

/// Records the training loss of `batch` against `gt` (`[B, 3]`). The
/// auxiliary term is only present for models with attention weights.
pub fn loss_node<T: Scalar>(ctx: &mut Ctx<'_, T>, batch: &RayBatch, gt: &[f64], aux_weight: f64) -> Result<Var> {
    let vars = forward(ctx, batch)?;
    let target = Tensor::from_f64(batch.rays, 3, gt);
    let main = ctx.graph.mean_squared_error(vars.rgb, target.clone());
    let Some(s) = vars.stages else { return Ok(main) };
    if aux_weight == 0.0 {
        return Ok(main);
    }
    let rows = batch.valid.len();
    let colors = ctx.input(rows, 3, &batch.colors);
    let per_view = ctx.graph.group_weighted_sum(s.alpha, colors, batch.points);
    let aux = ctx.graph.group_weighted_sum(s.beta, per_view, batch.references);
    let aux = ctx.graph.mean_squared_error(aux, target);
    let aux = ctx.graph.scale(aux, T::lit(aux_weight));
    Ok(ctx.graph.add(main, aux))
}

/// Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One Adam update with bias-corrected moments. Missing gradients count as
/// zero.
pub fn adam_update<T: Scalar>(
    tensors: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptState<T>,
    lr: f64,
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::lit(1.0 - config.beta1.powi(t));
    let c2 = T::lit(1.0 - config.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(config.epsilon));
    for (((p, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Loss value and per-slot gradients of one batch.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &RayBatch,
    gt: &[f64],
    aux_weight: f64,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut ctx = Ctx::new(params);
    let l = loss_node(&mut ctx, batch, gt, aux_weight)?;
    let value = ctx.value(l).get(0, 0).as_f64();
    let grads = ctx.graph.backward(l).params(params.store.len());
    Ok((value, grads))
}

/// One gradient evaluation and Adam update at `lr_schedule(state.step + 1)`.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut OptState<T>,
    batch: &RayBatch,
    gt: &[f64],
    config: &TrainConfig,
) -> Result<f64> {
    let (value, grads) = loss_and_grads(params, batch, gt, config.aux_weight)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step as u64, detail: format!("loss = {value}") });
    }
    for (slot, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.step as u64,
                    detail: format!("gradient of `{}` is not finite", params.store.name(slot)),
                });
            }
        }
    }
    let lr = lr_schedule(state.step + 1, config);
    adam_update(params.store.tensors_mut(), &grads, state, lr, config);
    Ok(value)
}

/// A batch of training rays with ground truth.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub batch: RayBatch,
    /// `[B, 3]`.
    pub gt: Vec<f64>,
    pub target_view: usize,
}

/// Draws a uniformly random training image and `count` random pixel
/// centres from it, with references chosen in training mode.
pub fn sample_training_batch(
    scene: &Scene,
    sampler: &SamplerConfig,
    model: &crate::model::ModelConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    let mut sampler = sampler.clone();
    sampler.training = true;
    for _ in 0..16 {
        let target_view = rng.random_range(0..scene.num_train);
        let view = &scene.views[target_view];
        let refs = scene.references(&view.camera, &sampler, rng)?;
        let pixels: Vec<Vec2> = (0..count)
            .map(|_| {
                Vec2::new(rng.random_range(0..view.camera.width) as f64, rng.random_range(0..view.camera.height) as f64)
            })
            .collect();
        let (batch, kept) = scene.prepare(&view.camera, &pixels, &refs, &sampler, model)?;
        let Some(batch) = batch else { continue };
        let gt = kept
            .iter()
            .flat_map(|&i| {
                let p = pixels[i];
                view.image.pixel(p.x as usize, p.y as usize).iter().map(|&c| c as f64).collect::<Vec<_>>()
            })
            .collect();
        return Ok(TrainingBatch { batch, gt, target_view });
    }
    Err(Error::Config("could not draw a renderable training batch".into()))
}

/// Training loop state.
pub struct Trainer<R> {
    pub params: ModelParams<f32>,
    pub state: OptState<f32>,
    pub config: TrainConfig,
    pub sampler: SamplerConfig,
    pub rng: R,
}

impl<R: Rng> Trainer<R> {
    pub fn new(params: ModelParams<f32>, config: TrainConfig, sampler: SamplerConfig, rng: R) -> Result<Self> {
        config.validate()?;
        sampler.validate()?;
        let state = OptState::new(&params);
        Ok(Self { params, state, config, sampler, rng })
    }

    /// One step on a freshly drawn batch; returns the loss.
    pub fn step(&mut self, scene: &Scene) -> Result<f64> {
        let b = sample_training_batch(scene, &self.sampler, &self.params.config, self.config.batch_size, &mut self.rng)?;
        train_step(&mut self.params, &mut self.state, &b.batch, &b.gt, &self.config)
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.state.step, &self.config)
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.config.total_steps
    }
}

/// Finite-difference formula used by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    ThreePoint,
    /// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`, fourth order.
    FivePoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Coordinates sampled per parameter group (all of them if fewer).
    pub coords_per_group: usize,
    pub step: f64,
    pub stencil: Stencil,
    /// Scales the analytic gradient of one coordinate per group, to
    /// confirm the check notices.
    pub corrupt: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        // With a three-point stencil and h = 1e-5 the loss difference is
        // only a few ulps for gradients near 1e-7, so rounding alone gives
        // relative errors around 1e-5. The fourth-order stencil tolerates
        // a step large enough to keep rounding far below 1e-6.
        Self { coords_per_group: 200, step: 1e-3, stencil: Stencil::FivePoint, corrupt: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(group, coordinates checked, max relative error)`.
    pub groups: Vec<(String, usize, f64)>,
    /// Worst coordinate overall.
    pub worst: Option<WorstCoordinate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the training loss with central
/// differences in 64-bit precision.
pub fn grad_check(
    params: &ModelParams<f64>,
    batch: &RayBatch,
    gt: &[f64],
    aux_weight: f64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(params, batch, gt, aux_weight)?;
    let mut by_group: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for slot in 0..params.store.len() {
        let group = params.group(slot).to_string();
        let entry = by_group.entry(group).or_default();
        entry.extend((0..params.store.tensor(slot).len()).map(|i| (slot, i)));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(options.seed);
    let mut work = params.clone();
    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(p);
        let l = loss_node(&mut ctx, batch, gt, aux_weight)?;
        Ok(ctx.value(l).get(0, 0))
    };
    let analytic = |slot: usize, i: usize| grads[slot].as_ref().map_or(0.0, |g| g.data()[i]);
    let mut report = GradCheckReport { max_rel_error: 0.0, groups: Vec::new(), worst: None };
    for (group, coords) in by_group {
        let chosen: Vec<(usize, usize)> = if coords.len() <= options.coords_per_group {
            coords
        } else {
            sample(&mut rng, coords.len(), options.coords_per_group).into_iter().map(|k| coords[k]).collect()
        };
        let corrupted = options.corrupt.and_then(|_| {
            chosen
                .iter()
                .copied()
                .max_by(|&(s1, i1), &(s2, i2)| analytic(s1, i1).abs().total_cmp(&analytic(s2, i2).abs()))
        });
        let mut worst = 0.0f64;
        for &(slot, i) in &chosen {
            let original = work.store.tensor(slot).data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.store.tensor_mut(slot).data_mut()[i] = original + offset;
                eval(&work)
            };
            let h = options.step;
            let numeric = match options.stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
                    // paired differences vanish exactly when the loss ignores the coordinate
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            work.store.tensor_mut(slot).data_mut()[i] = original;
            let mut a = analytic(slot, i);
            if corrupted == Some((slot, i)) {
                a *= options.corrupt.unwrap_or(1.0);
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(WorstCoordinate { name: params.store.name(slot).into(), index: i, analytic: a, numeric });
            }
            worst = worst.max(err);
        }
        report.groups.push((group, chosen.len(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { warmup_steps: 100, total_steps: 1100, base_lr: 1e-3, ..Default::default() };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(100, &cfg), 1e-3);
        assert!((lr_schedule(600, &cfg) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(1100, &cfg), 0.0);
        assert!((lr_schedule(50, &cfg) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn loss_examples() {
        let gt = [[0.2, 0.4, 0.6]];
        assert_eq!(loss(&gt, &gt, &gt, 1.0), 0.0);
        let pred = [[0.3, 0.4, 0.6]];
        assert!((loss(&pred, &gt, &gt, 1.0) - 0.01 / 3.0).abs() < 1e-15);
        let one = loss(&pred, &pred, &gt, 1.0);
        let two = loss(&pred, &pred, &gt, 2.0);
        assert!((two - one - 0.01 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        let cfg = TrainConfig::default();
        for g in [3.0, -0.02, 1e-3] {
            let mut p = vec![Tensor::<f64>::filled(1, 1, 1.0)];
            let mut state = OptState { m: vec![Tensor::zeros(1, 1)], v: vec![Tensor::zeros(1, 1)], step: 0 };
            adam_update(&mut p, &[Some(Tensor::filled(1, 1, g))], &mut state, 0.01, &cfg);
            let moved = p[0].get(0, 0) - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-6, "{moved}");
        }
    }
}
