//! Image rendering and the interpretability views: disparity from
//! attention-weighted putative depths, per-pixel view attention,
//! correspondence lookups and epipolar-plane images.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::geometry::{slab_coords, CameraModel, LightFieldCoords, Parametrization, Ray, Vec2, Vec3};
use crate::image::Image;
use crate::model::{predict, ModelParams, RayBatch, RenderTrace};
use crate::sampler::{gather_colors, sample_epipolar_points, select_reference_views_near, SamplerConfig};
use crate::scene::Scene;
use crate::tensor::Scalar;
use crate::train::expected_depth;

/// Color written to unrenderable pixels in debug previews.
pub const FLAG_COLOR: [f32; 3] = [1.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RenderRequest {
    /// Rays per forward pass.
    pub block_size: usize,
    pub disparity: bool,
    pub beta: bool,
}

impl Default for RenderRequest {
    fn default() -> Self {
        Self { block_size: 1024, disparity: false, beta: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    /// Raw `1 / depth` per pixel, one channel.
    pub disparity: Option<Image>,
    /// `(β¹, β², β³)` per pixel.
    pub beta: Option<Image>,
    /// Pixels that could not be rendered; their data values are zero.
    pub flagged: Vec<bool>,
}

impl RenderOutput {
    /// Color image with flagged pixels painted [`FLAG_COLOR`].
    pub fn debug_color(&self) -> Image {
        let mut img = self.color.clone();
        for (i, &f) in self.flagged.iter().enumerate() {
            if f {
                img.data[i * 3..i * 3 + 3].copy_from_slice(&FLAG_COLOR);
            }
        }
        img
    }
}

/// Per-ray prediction with its trace.
#[derive(Clone, Debug, PartialEq)]
pub struct RayResult {
    pub rgb: [f64; 3],
    pub trace: Option<RenderTrace>,
}

/// Evaluates rays `(pixels)` of `camera` in blocks; `None` marks rays that
/// cannot be rendered.
pub fn render_pixels<T: Scalar>(
    params: &ModelParams<T>,
    scene: &Scene,
    camera: &CameraModel,
    pixels: &[Vec2],
    sampler: &SamplerConfig,
    block_size: usize,
) -> Result<Vec<Option<RayResult>>> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be at least 1".into()));
    }
    let mut sampler = sampler.clone();
    sampler.training = false;
    // inference selection is deterministic; the generator is never drawn from
    let refs = scene.references(camera, &sampler, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut out = vec![None; pixels.len()];
    for (b, block) in pixels.chunks(block_size).enumerate() {
        let (batch, kept) = scene.prepare(camera, block, &refs, &sampler, &params.config)?;
        let Some(batch) = batch else { continue };
        let (rgb, traces) = predict(params, &batch)?;
        for ((k, rgb), trace) in kept.into_iter().zip(rgb).zip(traces) {
            out[b * block_size + k] = Some(RayResult { rgb, trace });
        }
    }
    Ok(out)
}

/// Renders every pixel of `camera`.
pub fn render_image<T: Scalar>(
    params: &ModelParams<T>,
    scene: &Scene,
    camera: &CameraModel,
    sampler: &SamplerConfig,
    request: &RenderRequest,
) -> Result<RenderOutput> {
    if request.beta && sampler.references != 3 {
        return Err(Error::Config("view attention images need exactly three reference views".into()));
    }
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<Vec2> = (0..h).flat_map(|y| (0..w).map(move |x| Vec2::new(x as f64, y as f64))).collect();
    let results = render_pixels(params, scene, camera, &pixels, sampler, request.block_size)?;
    let mut color = Image::new(w, h, 3);
    let mut disparity = request.disparity.then(|| Image::new(w, h, 1));
    let mut beta = request.beta.then(|| Image::new(w, h, 3));
    let mut flagged = vec![false; w * h];
    for (i, r) in results.iter().enumerate() {
        let Some(r) = r else {
            flagged[i] = true;
            continue;
        };
        for c in 0..3 {
            color.data[i * 3 + c] = r.rgb[c] as f32;
        }
        if let Some(d) = disparity.as_mut() {
            match &r.trace {
                Some(t) => d.data[i] = (1.0 / expected_depth(t)) as f32,
                None => flagged[i] = true,
            }
        }
        if let Some(b) = beta.as_mut() {
            match &r.trace {
                Some(t) => {
                    for c in 0..3 {
                        b.data[i * 3 + c] = t.beta[c] as f32;
                    }
                }
                None => flagged[i] = true,
            }
        }
    }
    Ok(RenderOutput { color, disparity, beta, flagged })
}

/// Disparity `1 / Σ_j β^j Σ_i α_i^j δ_i` for every pixel.
pub fn disparity_map<T: Scalar>(
    params: &ModelParams<T>,
    scene: &Scene,
    camera: &CameraModel,
    sampler: &SamplerConfig,
) -> Result<(Image, Vec<bool>)> {
    let request = RenderRequest { disparity: true, ..RenderRequest::default() };
    let out = render_image(params, scene, camera, sampler, &request)?;
    Ok((out.disparity.unwrap_or_else(|| Image::new(camera.width, camera.height, 1)), out.flagged))
}

/// Per-pixel `(β¹, β², β³)`; requires three reference views.
pub fn view_attention_image<T: Scalar>(
    params: &ModelParams<T>,
    scene: &Scene,
    camera: &CameraModel,
    sampler: &SamplerConfig,
) -> Result<(Image, Vec<bool>)> {
    let request = RenderRequest { beta: true, ..RenderRequest::default() };
    let out = render_image(params, scene, camera, sampler, &request)?;
    Ok((out.beta.unwrap_or_else(|| Image::new(camera.width, camera.height, 3)), out.flagged))
}

/// Index of the largest `α_i^j` in view `view` (lowest index on ties) and
/// the full distribution.
pub fn correspondence_map(trace: &RenderTrace, view: usize) -> Result<(usize, Vec<f64>)> {
    let row = trace.alpha_row(view);
    let valid = &trace.valid[view * trace.points..(view + 1) * trace.points];
    if !valid.iter().any(|&v| v) {
        return Err(Error::AllPointsMasked { view });
    }
    let mut best = 0;
    for (i, &a) in row.iter().enumerate() {
        if a > row[best] {
            best = i;
        }
    }
    Ok((best, row.to_vec()))
}

/// Natural log of a distribution normalised to its maximum, floored at
/// `floor`, for log-scale display.
pub fn log_scale(weights: &[f64], floor: f64) -> Vec<f64> {
    let max = weights.iter().copied().fold(0.0, f64::max);
    weights.iter().map(|&w| if max > 0.0 { (w / max).max(floor).ln() } else { floor.ln() }).collect()
}

/// Slab coordinate index: `s = 0, t = 1, u = 2, v = 3`.
pub type SlabAxis = usize;

/// A 2D slice of the 4D slab light field.
#[derive(Clone, Debug, PartialEq)]
pub struct EpiRequest {
    /// The two fixed coordinates and their values.
    pub fixed: [(SlabAxis, f64); 2],
    /// Range and sample count of the row coordinate.
    pub rows: (SlabAxis, f64, f64, usize),
    /// Range and sample count of the column coordinate.
    pub cols: (SlabAxis, f64, f64, usize),
    pub block_size: usize,
}

impl EpiRequest {
    /// Fixed `t` and `v`, rows over `s`, columns over `u`.
    pub fn horizontal(t: f64, v: f64, s: (f64, f64, usize), u: (f64, f64, usize)) -> Self {
        Self { fixed: [(1, t), (3, v)], rows: (0, s.0, s.1, s.2), cols: (2, u.0, u.1, u.2), block_size: 1024 }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = [false; 4];
        for a in [self.fixed[0].0, self.fixed[1].0, self.rows.0, self.cols.0] {
            if a >= 4 || seen[a] {
                return Err(Error::Config("EPI axes must be a permutation of s, t, u, v".into()));
            }
            seen[a] = true;
        }
        if self.rows.3 < 2 || self.cols.3 < 2 {
            return Err(Error::Config("EPI resolution must be at least 2".into()));
        }
        Ok(())
    }

    fn coords(&self, row: usize, col: usize) -> [f64; 4] {
        let lerp = |(_, lo, hi, n): (SlabAxis, f64, f64, usize), i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let mut c = [0.0; 4];
        c[self.fixed[0].0] = self.fixed[0].1;
        c[self.fixed[1].0] = self.fixed[1].1;
        c[self.rows.0] = lerp(self.rows, row);
        c[self.cols.0] = lerp(self.cols, col);
        c
    }
}

/// World ray through `(s, t, z_st)` and `(u, v, z_uv)`, re-anchored on the
/// plane `z = origin_z` with unit z direction so putative depths measure
/// distance from that plane.
pub fn slab_ray(coords: [f64; 4], z_st: f64, z_uv: f64, origin_z: f64) -> Result<Ray> {
    let [s, t, u, v] = coords;
    let dir = Vec3::new(u - s, v - t, z_uv - z_st);
    let n = dir.norm();
    if !n.is_finite() || n == 0.0 || (dir.z / n).abs() <= 1e-9 {
        return Err(Error::ParallelRay);
    }
    let dir = dir / dir.z;
    let origin = Vec3::new(s, t, z_st) - dir * (z_st - origin_z);
    Ok(Ray::new(origin, dir))
}

/// Result of an EPI query.
#[derive(Clone, Debug, PartialEq)]
pub struct EpiOutput {
    pub image: Image,
    pub flagged: Vec<bool>,
    /// Per pixel: the error that made it unrenderable, if any.
    pub errors: Vec<Option<Error>>,
}

/// Evaluates the model on a grid of slab coordinates.
///
/// Each query ray is anchored on the mean camera plane of the training
/// views, and its references are the training cameras nearest to that
/// anchor point.
pub fn epi_slice<T: Scalar>(
    params: &ModelParams<T>,
    scene: &Scene,
    sampler: &SamplerConfig,
    request: &EpiRequest,
) -> Result<EpiOutput> {
    if scene.parametrization != Parametrization::Slab {
        return Err(Error::Config("EPI slices need a slab scene".into()));
    }
    request.validate()?;
    let mut sampler = sampler.clone();
    sampler.training = false;
    let cams = scene.train_cameras();
    let origin_z = cams.iter().map(|c| c.center().z).sum::<f64>() / cams.len() as f64;
    let (rows, cols) = (request.rows.3, request.cols.3);
    let mut image = Image::new(cols, rows, 3);
    let mut flagged = vec![false; rows * cols];
    let mut errors: Vec<Option<Error>> = vec![None; rows * cols];
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut pending: Vec<(usize, LightFieldCoords, crate::sampler::EpipolarSampleGrid)> = Vec::new();
    let flush = |pending: &mut Vec<(usize, LightFieldCoords, crate::sampler::EpipolarSampleGrid)>,
                 image: &mut Image|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let coords: Vec<LightFieldCoords> = pending.iter().map(|p| p.1.clone()).collect();
        let grids: Vec<&crate::sampler::EpipolarSampleGrid> = pending.iter().map(|p| &p.2).collect();
        let batch = RayBatch::from_grids(&coords, &grids, &params.config, &scene.frame)?;
        let (rgb, _) = predict(params, &batch)?;
        for (p, c) in pending.iter().zip(rgb) {
            for ch in 0..3 {
                image.data[p.0 * 3 + ch] = c[ch] as f32;
            }
        }
        pending.clear();
        Ok(())
    };

    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let ray = match slab_ray(request.coords(r, c), scene.frame.z_st, scene.frame.z_uv, origin_z) {
                Ok(ray) => ray,
                Err(e) => {
                    flagged[idx] = true;
                    errors[idx] = Some(e);
                    continue;
                }
            };
            let refs = select_reference_views_near(&ray.origin, None, &cams, &sampler, &mut rng)?;
            let ref_cams: Vec<&CameraModel> = refs.iter().map(|&i| &scene.views[i].camera).collect();
            let mut grid = sample_epipolar_points(&ray, &scene.frame, Parametrization::Slab, &ref_cams, &sampler);
            let images: Vec<&Image> = refs.iter().map(|&i| &scene.views[i].image).collect();
            gather_colors(&mut grid, &images)?;
            let coords = match slab_coords(&ray, &scene.frame) {
                Ok(c) => c,
                Err(e) => {
                    flagged[idx] = true;
                    errors[idx] = Some(e);
                    continue;
                }
            };
            if !grid.renderable() {
                flagged[idx] = true;
                errors[idx] = Some(Error::AllViewsMasked);
                continue;
            }
            pending.push((idx, coords, grid));
            if pending.len() >= request.block_size.max(1) {
                flush(&mut pending, &mut image)?;
            }
        }
    }
    flush(&mut pending, &mut image)?;
    Ok(EpiOutput { image, flagged, errors })
}
