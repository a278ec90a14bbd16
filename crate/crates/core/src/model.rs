//! The two-stage attention network and its MLP baselines.
//!
//! A batch of `B` target rays, each with `K` reference views of `P`
//! epipolar points, runs through:
//!
//! 1. token construction: every epipolar point becomes
//!    `[γ_r(r_i^j) ‖ γ_p(p_i) ‖ k_j ‖ v_i^j ‖ c_i^j]`, linearly projected to
//!    `model_dim`; the target ray becomes `γ_r(r)`, projected separately;
//! 2. the epipolar transformer over `[target, y_1^j .. y_P^j]` per view,
//!    followed by attention pooling into one feature `z^j` per view;
//! 3. the view transformer over `[target, z^1 .. z^K]`, attention pooling
//!    into one feature, and a sigmoid color head.
//!
//! All stages are recorded on a [`Graph`] so the same code serves
//! inference, training and gradient checking.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::encoding::{fourier_encode_into, sh_encode, truncated_normal, FourierConfig, SphericalConfig};
use crate::error::{Error, Result};
use crate::geometry::{LightFieldCoords, Parametrization, SceneFrame};
use crate::sampler::{EpipolarSampleGrid, FEATURE_CHANNELS, PATCH_DIM};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of token projection initialisation.
pub const PROJECTION_INIT_STD: f64 = 0.02;

/// Sequence model used by one aggregation stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Backend {
    Transformer,
    /// Token-wise residual MLP blocks without attention.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case")
)]
pub enum ModelVariant {
    /// The two-stage network; with MLP backends this is the 2-MLP ablation.
    Nlf,
    /// ReLU MLP on the encoded target ray alone.
    Vanilla { layers: usize },
    /// One MLP over all epipolar points, reduced over points then views.
    OneMlp { layers: usize, references: usize, points: usize },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct ModelConfig {
    pub model_dim: usize,
    pub num_blocks: usize,
    /// Hidden width of block MLPs as a multiple of `model_dim`.
    pub mlp_ratio: usize,
    pub num_heads: usize,
    pub embedding_dim: usize,
    /// Rows of the camera embedding table, one per training view.
    pub num_views: usize,
    pub parametrization: Parametrization,
    pub ray_encoding: FourierConfig,
    pub point_encoding: FourierConfig,
    pub spherical: SphericalConfig,
    pub epipolar_backend: Backend,
    pub view_backend: Backend,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            num_blocks: 2,
            mlp_ratio: 4,
            num_heads: 1,
            embedding_dim: 256,
            num_views: 1,
            parametrization: Parametrization::Slab,
            ray_encoding: FourierConfig::default(),
            point_encoding: FourierConfig::default(),
            spherical: SphericalConfig::default(),
            epipolar_backend: Backend::Transformer,
            view_backend: Backend::Transformer,
            variant: ModelVariant::Nlf,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads != 1 {
            return Err(Error::Config("only single-head attention is supported".into()));
        }
        if self.model_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("model_dim and mlp_ratio must be positive".into()));
        }
        if self.num_views == 0 {
            return Err(Error::Config("embedding table needs at least one view".into()));
        }
        match self.variant {
            ModelVariant::Vanilla { layers } if layers == 0 => {
                Err(Error::Config("vanilla baseline needs at least one layer".into()))
            }
            ModelVariant::OneMlp { references, points, .. } if references == 0 || points == 0 => {
                Err(Error::Config("1-MLP needs positive reference and point counts".into()))
            }
            _ => Ok(()),
        }
    }

    /// Width of the encoded target ray `γ_r(r)`.
    pub fn ray_dim(&self) -> usize {
        match self.parametrization {
            Parametrization::TwoSphere => self.spherical.output_dim(),
            p => self.ray_encoding.output_dim(p.dim()),
        }
    }

    pub fn point_dim(&self) -> usize {
        self.point_encoding.output_dim(3)
    }

    /// Width of an unprojected epipolar token.
    pub fn raw_token_dim(&self) -> usize {
        self.ray_dim() + self.point_dim() + self.embedding_dim + FEATURE_CHANNELS + 3
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }
}

/// Encoded ray coordinates.
///
/// Slab and Plücker coordinates are scaled by `frame.coord_scale` and
/// Fourier encoded; two-sphere angles go through spherical harmonics.
pub fn encode_ray(coords: &[f64], config: &ModelConfig, frame: &SceneFrame, out: &mut Vec<f64>) {
    match config.parametrization {
        Parametrization::TwoSphere => {
            let angles: [f64; 4] = coords.try_into().expect("two-sphere coordinates have four entries");
            out.extend(sh_encode(&angles, &config.spherical));
        }
        _ => {
            let scaled: Vec<f64> = coords.iter().map(|c| c * frame.coord_scale).collect();
            fourier_encode_into(&scaled, &config.ray_encoding, out);
        }
    }
}

pub fn encode_point(point: &[f64; 3], config: &ModelConfig, frame: &SceneFrame, out: &mut Vec<f64>) {
    let scaled = point.map(|c| c * frame.coord_scale);
    fourier_encode_into(&scaled, &config.point_encoding, out);
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseSlots {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSlots {
    pub scale: usize,
    pub shift: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSlots {
    pub query: DenseSlots,
    /// Key projection without bias: a key bias adds the same amount to
    /// every score of a query and cancels in the softmax.
    pub key: usize,
    pub value: DenseSlots,
    pub output: DenseSlots,
    pub norm: NormSlots,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSlots {
    pub attention: Option<AttentionSlots>,
    pub fc1: DenseSlots,
    pub fc2: DenseSlots,
    pub norm: NormSlots,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlfSlots {
    pub conv: DenseSlots,
    pub embedding: usize,
    pub tokens: DenseSlots,
    pub target: DenseSlots,
    pub epipolar: Vec<BlockSlots>,
    pub epipolar_pool: usize,
    pub view: Vec<BlockSlots>,
    pub view_pool: usize,
    pub head: DenseSlots,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VanillaSlots {
    pub layers: Vec<DenseSlots>,
    pub head: DenseSlots,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneMlpSlots {
    pub conv: DenseSlots,
    pub embedding: usize,
    pub input: DenseSlots,
    pub layers: Vec<DenseSlots>,
    pub point_reduce: usize,
    pub view_reduce: usize,
    pub head: DenseSlots,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Nlf(NlfSlots),
    Vanilla(VanillaSlots),
    OneMlp(OneMlpSlots),
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Projection,
    Lecun,
}

struct Builder<'a, T, R> {
    store: ParamStore<T>,
    rng: Option<&'a mut R>,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let value = match (&mut self.rng, init) {
            (None, _) | (_, Init::Zeros) => Tensor::zeros(rows, cols),
            (_, Init::Ones) => Tensor::filled(rows, cols, T::one()),
            (Some(rng), Init::Projection) => truncated_normal(rows, cols, PROJECTION_INIT_STD, rng),
            (Some(rng), Init::Lecun) => {
                let std = 1.0 / (rows as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| T::lit(normal.sample(rng))).collect())
            }
        };
        self.store.push(name, value)
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> DenseSlots {
        let weight = self.tensor(format!("{name}.weight"), rows, cols, init);
        let bias = self.tensor(format!("{name}.bias"), 1, cols, Init::Zeros);
        DenseSlots { weight, bias }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormSlots {
        let scale = self.tensor(format!("{name}.scale"), 1, dim, Init::Ones);
        let shift = self.tensor(format!("{name}.shift"), 1, dim, Init::Zeros);
        NormSlots { scale, shift }
    }

    fn blocks(&mut self, stage: &str, config: &ModelConfig, backend: Backend) -> Vec<BlockSlots> {
        let d = config.model_dim;
        let h = config.hidden_dim();
        (0..config.num_blocks)
            .map(|i| {
                let p = format!("{stage}.block{i}");
                let attention = (backend == Backend::Transformer).then(|| AttentionSlots {
                    query: self.dense(&format!("{p}.attention.query"), d, d, Init::Lecun),
                    key: self.tensor(format!("{p}.attention.key.weight"), d, d, Init::Lecun),
                    value: self.dense(&format!("{p}.attention.value"), d, d, Init::Lecun),
                    output: self.dense(&format!("{p}.attention.output"), d, d, Init::Lecun),
                    norm: self.norm(&format!("{p}.attention_norm"), d),
                });
                BlockSlots {
                    attention,
                    fc1: self.dense(&format!("{p}.mlp.fc1"), d, h, Init::Lecun),
                    fc2: self.dense(&format!("{p}.mlp.fc2"), h, d, Init::Lecun),
                    norm: self.norm(&format!("{p}.mlp_norm"), d),
                }
            })
            .collect()
    }

    fn build(&mut self, config: &ModelConfig) -> Layout {
        let d = config.model_dim;
        match config.variant {
            ModelVariant::Nlf => {
                let conv = self.dense("conv", PATCH_DIM, FEATURE_CHANNELS, Init::Lecun);
                let embedding =
                    self.tensor("embedding.table".into(), config.num_views, config.embedding_dim, Init::Projection);
                let tokens = self.dense("tokens", config.raw_token_dim(), d, Init::Projection);
                let target = self.dense("target", config.ray_dim(), d, Init::Projection);
                let epipolar = self.blocks("epipolar", config, config.epipolar_backend);
                let epipolar_pool = self.tensor("epipolar.pool.weight".into(), d, 1, Init::Lecun);
                let view = self.blocks("view", config, config.view_backend);
                let view_pool = self.tensor("view.pool.weight".into(), d, 1, Init::Lecun);
                let head = self.dense("head", d, 3, Init::Lecun);
                Layout::Nlf(NlfSlots { conv, embedding, tokens, target, epipolar, epipolar_pool, view, view_pool, head })
            }
            ModelVariant::Vanilla { layers } => {
                let mut dims = config.ray_dim();
                let layers = (0..layers)
                    .map(|i| {
                        let s = self.dense(&format!("vanilla.layer{i}"), dims, d, Init::Lecun);
                        dims = d;
                        s
                    })
                    .collect();
                let head = self.dense("vanilla.head", d, 3, Init::Lecun);
                Layout::Vanilla(VanillaSlots { layers, head })
            }
            ModelVariant::OneMlp { layers, references, points } => {
                let conv = self.dense("conv", PATCH_DIM, FEATURE_CHANNELS, Init::Lecun);
                let embedding =
                    self.tensor("embedding.table".into(), config.num_views, config.embedding_dim, Init::Projection);
                let input = self.dense("one_mlp.input", config.ray_dim() + config.raw_token_dim(), d, Init::Lecun);
                let layers = (0..layers).map(|i| self.dense(&format!("one_mlp.layer{i}"), d, d, Init::Lecun)).collect();
                let point_reduce = self.tensor("one_mlp.point_reduce".into(), points, 1, Init::Lecun);
                let view_reduce = self.tensor("one_mlp.view_reduce".into(), references, 1, Init::Lecun);
                let head = self.dense("one_mlp.head", d, 3, Init::Lecun);
                Layout::OneMlp(OneMlpSlots { conv, embedding, input, layers, point_reduce, view_reduce, head })
            }
        }
    }
}

/// Parameters of a model together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialisation: truncated normal (std 0.02) for token
    /// projections and embeddings, LeCun normal for other weights, zero
    /// biases, unit LayerNorm scales.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { store: ParamStore::new(), rng: Some(rng) };
        let layout = b.build(config);
        Ok(Self { config: config.clone(), store: b.store, layout })
    }

    /// Expected `(name, rows, cols)` of every tensor for `config`.
    pub fn shapes(config: &ModelConfig) -> Result<Vec<(String, usize, usize)>> {
        config.validate()?;
        let mut b: Builder<'_, T, rand_chacha::ChaCha8Rng> =
            Builder { store: ParamStore::new(), rng: None };
        b.build(config);
        Ok(b.store.iter().map(|(n, t)| (n.to_string(), t.rows(), t.cols())).collect())
    }

    /// Rebuilds parameters from named tensors, checking every name and shape.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut b: Builder<'_, T, rand_chacha::ChaCha8Rng> =
            Builder { store: ParamStore::new(), rng: None };
        let layout = b.build(config);
        let mut store = b.store;
        if tensors.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                store.len(),
                tensors.len()
            )));
        }
        for (name, tensor) in tensors {
            let slot = store.slot(&name).ok_or_else(|| Error::ShapeMismatch(format!("unexpected tensor `{name}`")))?;
            let expected = store.tensor(slot).shape();
            if tensor.shape() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    expected
                )));
            }
            *store.tensor_mut(slot) = tensor;
        }
        Ok(Self { config: config.clone(), store, layout })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: ParamStore {
                names: self.store.names.clone(),
                tensors: self.store.tensors.iter().map(Tensor::cast).collect(),
            },
            layout: self.layout.clone(),
        }
    }

    /// Parameter group of a slot, e.g. `conv`, `embedding`, `epipolar`.
    /// Pooling weights form their own groups (`epipolar.pool`, `view.pool`).
    pub fn group(&self, slot: usize) -> &str {
        let name = self.store.name(slot);
        if let Some(end) = name.find(".pool") {
            return &name[..end + ".pool".len()];
        }
        name.split('.').next().unwrap_or(name)
    }
}

/// Network inputs for a batch of rays, flattened in `(ray, view, point)`
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub rays: usize,
    pub references: usize,
    pub points: usize,
    /// `[rays, ray_dim]`.
    pub target_encoding: Vec<f64>,
    /// `[rays*K*P, ray_dim + point_dim]`: `γ_r(r_i^j) ‖ γ_p(p_i)`.
    pub point_encoding: Vec<f64>,
    /// `[rays*K*P, PATCH_DIM]`.
    pub patches: Vec<f64>,
    /// `[rays*K*P, 3]`.
    pub colors: Vec<f64>,
    /// Embedding row per `(ray, view)`.
    pub view_ids: Vec<usize>,
    pub valid: Vec<bool>,
    /// `[rays, P]`.
    pub deltas: Vec<f64>,
}

impl RayBatch {
    /// Batch of target rays only, for the vanilla baseline.
    pub fn targets_only(targets: &[LightFieldCoords], config: &ModelConfig, frame: &SceneFrame) -> Self {
        let mut target_encoding = Vec::with_capacity(targets.len() * config.ray_dim());
        for t in targets {
            encode_ray(&t.to_vec(), config, frame, &mut target_encoding);
        }
        Self {
            rays: targets.len(),
            references: 0,
            points: 0,
            target_encoding,
            point_encoding: Vec::new(),
            patches: Vec::new(),
            colors: Vec::new(),
            view_ids: Vec::new(),
            valid: Vec::new(),
            deltas: Vec::new(),
        }
    }

    /// Encodes gathered grids. All grids must share `K` and `P`.
    pub fn from_grids(
        targets: &[LightFieldCoords],
        grids: &[&EpipolarSampleGrid],
        config: &ModelConfig,
        frame: &SceneFrame,
    ) -> Result<Self> {
        if targets.len() != grids.len() || grids.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} targets for {} grids", targets.len(), grids.len())));
        }
        let (k, p) = (grids[0].references, grids[0].points);
        let mut batch = Self::targets_only(targets, config, frame);
        batch.references = k;
        batch.points = p;
        let rows = grids.len() * k * p;
        batch.point_encoding.reserve(rows * (config.ray_dim() + config.point_dim()));
        batch.patches.reserve(rows * PATCH_DIM);
        batch.colors.reserve(rows * 3);
        for (t, grid) in targets.iter().zip(grids) {
            if grid.references != k || grid.points != p {
                return Err(Error::ShapeMismatch("grids in one batch must share K and P".into()));
            }
            if t.parametrization() != config.parametrization || grid.coord_dim != config.parametrization.dim() {
                return Err(Error::ShapeMismatch("parametrization differs from model configuration".into()));
            }
            if !grid.renderable() {
                return Err(Error::AllViewsMasked);
            }
            for &id in &grid.view_ids {
                if id >= config.num_views {
                    return Err(Error::UnknownView { view_id: id, rows: config.num_views });
                }
            }
            batch.view_ids.extend_from_slice(&grid.view_ids);
            batch.deltas.extend_from_slice(&grid.deltas);
            batch.valid.extend_from_slice(&grid.valid);
            for j in 0..k {
                for i in 0..p {
                    encode_ray(grid.coords(j, i), config, frame, &mut batch.point_encoding);
                    let pt = grid.points3d[i];
                    encode_point(&[pt.x, pt.y, pt.z], config, frame, &mut batch.point_encoding);
                    batch.patches.extend_from_slice(grid.patch(j, i));
                    batch.colors.extend_from_slice(&grid.colors[grid.index(j, i)]);
                }
            }
        }
        Ok(batch)
    }

    /// Validity of every `(ray, view)`: at least one valid point.
    pub fn view_valid(&self) -> Vec<bool> {
        self.valid.chunks(self.points.max(1)).map(|c| c.iter().any(|&v| v)).collect()
    }
}

/// Raw tokens in canonical order `[γ_r ‖ γ_p ‖ k_j ‖ v ‖ c]` for one grid, plus
/// the raw target token `γ_r(r)`.
///
/// `features` are the per-point convolutional features, `[K*P, 32]`.
pub fn build_tokens(
    grid: &EpipolarSampleGrid,
    target: &LightFieldCoords,
    features: &[f64],
    embedding: &Tensor<f64>,
    config: &ModelConfig,
    frame: &SceneFrame,
) -> Result<(Vec<f64>, Tensor<f64>)> {
    let n = grid.references * grid.points;
    if features.len() != n * FEATURE_CHANNELS || embedding.cols() != config.embedding_dim {
        return Err(Error::ShapeMismatch("feature or embedding width does not match the grid".into()));
    }
    let mut tgt = Vec::new();
    encode_ray(&target.to_vec(), config, frame, &mut tgt);
    let mut raw = Vec::with_capacity(n * config.raw_token_dim());
    for j in 0..grid.references {
        let k = crate::encoding::embed_camera(embedding, grid.view_ids[j])?;
        for i in 0..grid.points {
            let idx = grid.index(j, i);
            encode_ray(grid.coords(j, i), config, frame, &mut raw);
            let pt = grid.points3d[i];
            encode_point(&[pt.x, pt.y, pt.z], config, frame, &mut raw);
            raw.extend_from_slice(k);
            raw.extend_from_slice(&features[idx * FEATURE_CHANNELS..(idx + 1) * FEATURE_CHANNELS]);
            raw.extend_from_slice(&grid.colors[idx]);
        }
    }
    Ok((tgt, Tensor::from_vec(n, config.raw_token_dim(), raw)))
}

/// Graph-building context that inserts each parameter at most once.
pub struct Ctx<'a, T: Scalar> {
    pub graph: Graph<T>,
    params: &'a ModelParams<T>,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Self { graph: Graph::new(), params, vars: vec![None; params.store.len()] }
    }

    pub fn param(&mut self, slot: usize) -> Var {
        if let Some(v) = self.vars[slot] {
            return v;
        }
        let v = self.graph.param(slot, self.params.store.tensor(slot));
        self.vars[slot] = Some(v);
        v
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        self.graph.input(Tensor::from_f64(rows, cols, data))
    }

    pub fn dense(&mut self, x: Var, slots: DenseSlots) -> Var {
        let w = self.param(slots.weight);
        let b = self.param(slots.bias);
        self.graph.dense(x, w, b)
    }

    fn norm(&mut self, x: Var, slots: NormSlots) -> Var {
        let s = self.param(slots.scale);
        let b = self.param(slots.shift);
        self.graph.layer_norm(x, s, b)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }
}

/// Post-norm blocks over groups of `group` consecutive rows:
/// `x = LN(x + Attn(x))`, then `x = LN(x + MLP(x))`. Keys with a false
/// mask entry are ignored by attention.
pub fn run_transformer<T: Scalar>(ctx: &mut Ctx<'_, T>, blocks: &[BlockSlots], x: Var, group: usize, mask: &[bool]) -> Var {
    let mut x = x;
    for block in blocks {
        if let Some(att) = &block.attention {
            let q = ctx.dense(x, att.query);
            let wk = ctx.param(att.key);
            let k = ctx.graph.matmul(x, wk);
            let v = ctx.dense(x, att.value);
            let a = ctx.graph.group_attention(q, k, v, group, mask);
            let o = ctx.dense(a, att.output);
            let r = ctx.graph.add(x, o);
            x = ctx.norm(r, att.norm);
        }
        let h = ctx.dense(x, block.fc1);
        let h = ctx.graph.gelu(h);
        let m = ctx.dense(h, block.fc2);
        let r = ctx.graph.add(x, m);
        x = ctx.norm(r, block.norm);
    }
    x
}

/// Attention pooling of `items` (`[G*S, D]`): logits `w · item`, softmax
/// over each group of `S` valid items, weighted sum. Returns
/// `(pooled [G, D], weights [G*S, 1])`.
///
/// A linear score of `[query || item]` splits into a query term that is
/// constant inside each group plus `w · item`; the softmax drops the
/// constant, so only the item half is kept.
pub fn attention_pool<T: Scalar>(ctx: &mut Ctx<'_, T>, pool_slot: usize, items: Var, group: usize, mask: &[bool]) -> (Var, Var) {
    let w = ctx.param(pool_slot);
    let logits = ctx.graph.matmul(items, w);
    let weights = ctx.graph.group_softmax(logits, group, mask);
    let pooled = ctx.graph.group_weighted_sum(weights, items, group);
    (pooled, weights)
}

/// Epipolar-stage pooling: `α_i^j` and `z^j = Σ_i α_i^j ỹ_i^j`.
pub fn epipolar_aggregate<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    pool_slot: usize,
    y_tilde: Var,
    points: usize,
    mask: &[bool],
) -> (Var, Var) {
    attention_pool(ctx, pool_slot, y_tilde, points, mask)
}

/// View-stage pooling: `β^j` and `Σ_j β^j z̃^j`.
pub fn view_aggregate<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    pool_slot: usize,
    z_tilde: Var,
    references: usize,
    mask: &[bool],
) -> (Var, Var) {
    attention_pool(ctx, pool_slot, z_tilde, references, mask)
}

/// `sigmoid(feature · W + b)`.
pub fn predict_color<T: Scalar>(ctx: &mut Ctx<'_, T>, head: DenseSlots, feature: Var) -> Var {
    let logits = ctx.dense(feature, head);
    ctx.graph.sigmoid(logits)
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, 3]`.
    pub rgb: Var,
    pub stages: Option<StageVars>,
}

/// Intermediate nodes of the two-stage network.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    /// `[B*K, D]`, the target token after the epipolar transformer, per view.
    pub r_tilde: Var,
    /// `[B*K*P, D]`.
    pub y_tilde: Var,
    /// `[B*K*P, 1]`.
    pub alpha: Var,
    /// `[B*K, D]`.
    pub z: Var,
    /// `[B, D]`.
    pub r_hat: Var,
    /// `[B*K, D]`.
    pub z_tilde: Var,
    /// `[B*K, 1]`.
    pub beta: Var,
    /// `[B, D]`.
    pub feature: Var,
}

/// Per-ray attention weights and intermediate features.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderTrace {
    pub references: usize,
    pub points: usize,
    pub view_ids: Vec<usize>,
    /// `K*P` weights, row `j` is view `j`.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub deltas: Vec<f64>,
    pub valid: Vec<bool>,
    pub r_tilde: Vec<Vec<f64>>,
    pub r_hat: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub z_tilde: Vec<Vec<f64>>,
}

impl RenderTrace {
    pub fn alpha_row(&self, view: usize) -> &[f64] {
        &self.alpha[view * self.points..(view + 1) * self.points]
    }
}

fn conv_from_patches<T: Scalar>(ctx: &mut Ctx<'_, T>, conv: DenseSlots, batch: &RayBatch) -> Var {
    let rows = batch.valid.len();
    let patches = ctx.input(rows, PATCH_DIM, &batch.patches);
    ctx.dense(patches, conv)
}

/// Non-embedding token inputs `[γ_r ‖ γ_p ‖ v ‖ c]` and the matching rows
/// of the canonically ordered projection, plus the projected embedding gathered per
/// row.
fn project_tokens<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    w: Var,
    embedding: usize,
    features: Var,
    batch: &RayBatch,
    config: &ModelConfig,
) -> Var {
    let rows = batch.valid.len();
    let enc_dim = config.ray_dim() + config.point_dim();
    let e = config.embedding_dim;
    let raw = config.raw_token_dim();
    let enc = ctx.input(rows, enc_dim, &batch.point_encoding);
    let colors = ctx.input(rows, 3, &batch.colors);
    let x = ctx.graph.concat_cols(&[enc, features, colors]);
    let w_rest = ctx.graph.gather_rows(w, (0..enc_dim).chain(enc_dim + e..raw).collect());
    let w_emb = ctx.graph.gather_rows(w, (enc_dim..enc_dim + e).collect());
    let table = ctx.param(embedding);
    let per_view = ctx.graph.matmul(table, w_emb);
    let p = batch.points;
    let emb_rows = ctx.graph.gather_rows(per_view, (0..rows).map(|r| batch.view_ids[r / p]).collect());
    let xt = ctx.graph.matmul(x, w_rest);
    ctx.graph.add(xt, emb_rows)
}

/// Projected target tokens `[B, D]` and epipolar tokens `[B*K*P, D]`.
///
/// Numerically this is the full concatenation times the token projection;
/// the embedding block is applied once per table row and gathered.
pub fn embed_tokens<T: Scalar>(ctx: &mut Ctx<'_, T>, slots: &NlfSlots, config: &ModelConfig, batch: &RayBatch) -> (Var, Var) {
    let target_in = ctx.input(batch.rays, config.ray_dim(), &batch.target_encoding);
    let target = ctx.dense(target_in, slots.target);
    let features = conv_from_patches(ctx, slots.conv, batch);
    let w = ctx.param(slots.tokens.weight);
    let tokens = project_tokens(ctx, w, slots.embedding, features, batch, config);
    let tb = ctx.param(slots.tokens.bias);
    (target, ctx.graph.add_bias(tokens, tb))
}

/// Records the forward pass of `params` on `batch`.
pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, batch: &RayBatch) -> Result<ForwardVars> {
    let params = ctx.params;
    let config = &params.config;
    match &params.layout {
        Layout::Nlf(slots) => nlf_forward(ctx, slots, config, batch),
        Layout::Vanilla(slots) => Ok(ForwardVars { rgb: vanilla_forward(ctx, slots, config, batch), stages: None }),
        Layout::OneMlp(slots) => Ok(ForwardVars { rgb: one_mlp_forward(ctx, slots, config, batch)?, stages: None }),
    }
}

/// Baseline forward: the vanilla or 1-MLP variants. The 2-MLP ablation is
/// the full network with MLP backends and runs through [`forward`].
pub fn mlp_baseline_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, batch: &RayBatch) -> Result<Var> {
    Ok(forward(ctx, batch)?.rgb)
}

fn nlf_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    slots: &NlfSlots,
    config: &ModelConfig,
    batch: &RayBatch,
) -> Result<ForwardVars> {
    let (b, k, p) = (batch.rays, batch.references, batch.points);
    if k == 0 || p == 0 {
        return Err(Error::ShapeMismatch("batch carries no epipolar samples".into()));
    }
    let view_valid = batch.view_valid();
    for ray in 0..b {
        if !view_valid[ray * k..(ray + 1) * k].iter().any(|&v| v) {
            return Err(Error::AllViewsMasked);
        }
    }
    let d = config.model_dim;
    let (target, tokens) = embed_tokens(ctx, slots, config, batch);

    // epipolar stage: [target, y_1 .. y_P] per (ray, view)
    let s1 = p + 1;
    let all = ctx.graph.concat_rows(&[target, tokens]);
    let mut index = Vec::with_capacity(b * k * s1);
    let mut mask = Vec::with_capacity(b * k * s1);
    for g in 0..b * k {
        index.push(g / k);
        mask.push(true);
        for i in 0..p {
            index.push(b + g * p + i);
            mask.push(batch.valid[g * p + i]);
        }
    }
    let seq = ctx.graph.gather_rows(all, index);
    let seq = run_transformer(ctx, &slots.epipolar, seq, s1, &mask);
    let r_tilde = ctx.graph.gather_rows(seq, (0..b * k).map(|g| g * s1).collect());
    let y_tilde = ctx.graph.gather_rows(seq, (0..b * k).flat_map(|g| (1..s1).map(move |i| g * s1 + i)).collect());
    let (z, alpha) = epipolar_aggregate(ctx, slots.epipolar_pool, y_tilde, p, &batch.valid);

    // view stage: [target, z^1 .. z^K] per ray
    let s2 = k + 1;
    let all = ctx.graph.concat_rows(&[target, z]);
    let mut index = Vec::with_capacity(b * s2);
    let mut mask = Vec::with_capacity(b * s2);
    for ray in 0..b {
        index.push(ray);
        mask.push(true);
        for j in 0..k {
            index.push(b + ray * k + j);
            mask.push(view_valid[ray * k + j]);
        }
    }
    let seq = ctx.graph.gather_rows(all, index);
    let seq = run_transformer(ctx, &slots.view, seq, s2, &mask);
    let r_hat = ctx.graph.gather_rows(seq, (0..b).map(|r| r * s2).collect());
    let z_tilde = ctx.graph.gather_rows(seq, (0..b).flat_map(|r| (1..s2).map(move |j| r * s2 + j)).collect());
    let (feature, beta) = view_aggregate(ctx, slots.view_pool, z_tilde, k, &view_valid);
    let rgb = predict_color(ctx, slots.head, feature);
    debug_assert_eq!(ctx.value(feature).cols(), d);
    Ok(ForwardVars { rgb, stages: Some(StageVars { r_tilde, y_tilde, alpha, z, r_hat, z_tilde, beta, feature }) })
}

fn vanilla_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, slots: &VanillaSlots, config: &ModelConfig, batch: &RayBatch) -> Var {
    let mut x = ctx.input(batch.rays, config.ray_dim(), &batch.target_encoding);
    for &layer in &slots.layers {
        let h = ctx.dense(x, layer);
        x = ctx.graph.relu(h);
    }
    predict_color(ctx, slots.head, x)
}

fn one_mlp_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    slots: &OneMlpSlots,
    config: &ModelConfig,
    batch: &RayBatch,
) -> Result<Var> {
    let ModelVariant::OneMlp { references, points, .. } = config.variant else { unreachable!() };
    let (b, k, p) = (batch.rays, batch.references, batch.points);
    if k != references || p != points {
        return Err(Error::ShapeMismatch(format!("1-MLP built for K={references}, P={points}; batch has K={k}, P={p}")));
    }
    let view_valid = batch.view_valid();
    for ray in 0..b {
        if !view_valid[ray * k..(ray + 1) * k].iter().any(|&v| v) {
            return Err(Error::AllViewsMasked);
        }
    }
    let ray_dim = config.ray_dim();
    // input weight rows: [γ_r(r) target | point token]
    let w = ctx.param(slots.input.weight);
    let w_target = ctx.graph.gather_rows(w, (0..ray_dim).collect());
    let w_tokens = ctx.graph.gather_rows(w, (ray_dim..ray_dim + config.raw_token_dim()).collect());
    let features = conv_from_patches(ctx, slots.conv, batch);
    let tokens = project_tokens(ctx, w_tokens, slots.embedding, features, batch, config);
    let target_in = ctx.input(b, ray_dim, &batch.target_encoding);
    let target = ctx.graph.matmul(target_in, w_target);
    let x = ctx.graph.add_group_broadcast(tokens, target, k * p);
    let bias = ctx.param(slots.input.bias);
    let x = ctx.graph.add_bias(x, bias);
    let mut x = ctx.graph.relu(x);
    let mut skip = x;
    for (i, &layer) in slots.layers.iter().enumerate() {
        let h = ctx.dense(x, layer);
        x = ctx.graph.relu(h);
        if (i + 1) % 4 == 0 {
            x = ctx.graph.add(x, skip);
            skip = x;
        }
    }
    // reduce over points: masked points read a zero weight
    let wp = ctx.param(slots.point_reduce);
    let zero = ctx.graph.input(Tensor::zeros(1, 1));
    let wp = ctx.graph.concat_rows(&[wp, zero]);
    let wp = ctx.graph.gather_rows(wp, (0..b * k * p).map(|r| if batch.valid[r] { r % p } else { p }).collect());
    let per_view = ctx.graph.group_weighted_sum(wp, x, p);
    let wk = ctx.param(slots.view_reduce);
    let wk = ctx.graph.concat_rows(&[wk, zero]);
    let wk = ctx.graph.gather_rows(wk, (0..b * k).map(|r| if view_valid[r] { r % k } else { k }).collect());
    let feature = ctx.graph.group_weighted_sum(wk, per_view, k);
    Ok(predict_color(ctx, slots.head, feature))
}

/// Reads the trace of ray `ray` out of a recorded forward pass.
pub fn extract_trace<T: Scalar>(ctx: &Ctx<'_, T>, vars: &ForwardVars, batch: &RayBatch, ray: usize) -> Option<RenderTrace> {
    let s = vars.stages?;
    let (k, p) = (batch.references, batch.points);
    let rows = |v: Var, from: usize, n: usize| -> Vec<Vec<f64>> {
        let t = ctx.value(v);
        (from..from + n).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect()
    };
    let flat = |v: Var, from: usize, n: usize| -> Vec<f64> {
        ctx.value(v).data()[from..from + n].iter().map(|x| x.as_f64()).collect()
    };
    Some(RenderTrace {
        references: k,
        points: p,
        view_ids: batch.view_ids[ray * k..(ray + 1) * k].to_vec(),
        alpha: flat(s.alpha, ray * k * p, k * p),
        beta: flat(s.beta, ray * k, k),
        deltas: batch.deltas[ray * p..(ray + 1) * p].to_vec(),
        valid: batch.valid[ray * k * p..(ray + 1) * k * p].to_vec(),
        r_tilde: rows(s.r_tilde, ray * k, k),
        r_hat: rows(s.r_hat, ray, 1).pop().unwrap_or_default(),
        z: rows(s.z, ray * k, k),
        z_tilde: rows(s.z_tilde, ray * k, k),
    })
}

/// Evaluates the model on `batch` and returns colors plus traces.
pub fn predict<T: Scalar>(params: &ModelParams<T>, batch: &RayBatch) -> Result<(Vec<[f64; 3]>, Vec<Option<RenderTrace>>)> {
    let mut ctx = Ctx::new(params);
    let vars = forward(&mut ctx, batch)?;
    let rgb = ctx.value(vars.rgb);
    let colors = (0..batch.rays).map(|r| [0, 1, 2].map(|c| rgb.get(r, c).as_f64())).collect();
    let traces = (0..batch.rays).map(|r| extract_trace(&ctx, &vars, batch, r)).collect();
    Ok((colors, traces))
}

/// Full-image convolutional feature map, `[H, W, 32]` with zero padding.
pub fn conv_features<T: Scalar>(params: &ModelParams<T>, image: &crate::image::Image) -> Result<crate::image::Image> {
    let conv = match &params.layout {
        Layout::Nlf(s) => s.conv,
        Layout::OneMlp(s) => s.conv,
        Layout::Vanilla(_) => return Err(Error::Config("vanilla model has no convolution".into())),
    };
    if image.channels != 3 {
        return Err(Error::ShapeMismatch("convolution expects an RGB image".into()));
    }
    let w = params.store.tensor(conv.weight);
    let bias = params.store.tensor(conv.bias);
    let mut out = crate::image::Image::new(image.width, image.height, FEATURE_CHANNELS);
    let mut patch = [0.0; PATCH_DIM];
    for y in 0..image.height {
        for x in 0..image.width {
            patch.fill(0.0);
            crate::sampler::add_window(image, x, y, 1.0, &mut patch);
            let o = out.pixel_mut(x, y);
            for (c, o) in o.iter_mut().enumerate() {
                let mut s = bias.get(0, c).as_f64();
                for (r, &pv) in patch.iter().enumerate() {
                    s += pv * w.get(r, c).as_f64();
                }
                *o = s as f32;
            }
        }
    }
    Ok(out)
}
