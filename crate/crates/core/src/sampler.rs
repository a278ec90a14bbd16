//! Reference-view selection and epipolar sampling.
//!
//! For a target ray the sampler places `P` points along the ray, projects
//! them into each of the `K` reference views and records, per projected
//! point, its pixel, its light-field coordinates as seen from the reference
//! camera, and (after gathering) the interpolated color, convolutional
//! feature and image patch.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    point_at, project, ray_from_pixel, sphere_intersections, CameraModel, Parametrization, Ray, SceneFrame, Vec2,
    Vec3,
};
use crate::image::Image;

/// Channels of the convolutional feature map.
pub const FEATURE_CHANNELS: usize = 32;
/// Side of the square convolution window.
pub const CONV_KERNEL: usize = 5;
/// Width of a flattened RGB convolution window.
pub const PATCH_DIM: usize = CONV_KERNEL * CONV_KERNEL * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum DepthSpacing {
    UniformDelta,
    UniformInverseDepth,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct SamplerConfig {
    /// Reference views per target ray (`K`).
    pub references: usize,
    /// Nearest views the training subset is drawn from (`N`).
    pub candidates: usize,
    /// Epipolar points per view (`P`).
    pub points: usize,
    pub depth_spacing: DepthSpacing,
    pub training: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { references: 4, candidates: 8, points: 32, depth_spacing: DepthSpacing::UniformInverseDepth, training: false }
    }
}

impl SamplerConfig {
    /// Default spacing for a parametrization: inverse depth for
    /// forward-facing slabs, uniform between sphere hits otherwise.
    pub fn for_parametrization(parametrization: Parametrization, references: usize, points: usize) -> Self {
        let depth_spacing = match parametrization {
            Parametrization::TwoSphere => DepthSpacing::UniformDelta,
            _ => DepthSpacing::UniformInverseDepth,
        };
        Self { references, candidates: 2 * references, points, depth_spacing, training: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.references == 0 || self.points == 0 {
            return Err(Error::Config("need at least one reference view and one epipolar point".into()));
        }
        if self.candidates < self.references {
            return Err(Error::Config("candidate pool smaller than reference count".into()));
        }
        Ok(())
    }
}

/// Picks the reference views for `target` among `all`.
///
/// The target itself (same `view_id`) is never a candidate. Views are
/// ranked by camera-center distance with ties broken by ascending id. In
/// training mode a uniform `K`-subset of the `N` nearest is drawn; otherwise
/// the `K` nearest are returned. The result is ordered by rank.
pub fn select_reference_views(
    target: &CameraModel,
    all: &[CameraModel],
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    select_reference_views_near(&target.center(), Some(target.view_id), all, config, rng)
}

/// Same ranking as [`select_reference_views`] around an arbitrary point.
pub fn select_reference_views_near(
    center: &Vec3,
    exclude: Option<usize>,
    all: &[CameraModel],
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut ranked: Vec<(f64, usize)> = all
        .iter()
        .filter(|c| Some(c.view_id) != exclude)
        .map(|c| ((c.center() - center).norm(), c.view_id))
        .collect();
    if ranked.len() < config.references {
        return Err(Error::InsufficientViews { needed: config.references, available: ranked.len() });
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if !config.training {
        return Ok(ranked.iter().take(config.references).map(|&(_, id)| id).collect());
    }
    let pool = config.candidates.min(ranked.len());
    let mut picked = sample(rng, pool, config.references).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| ranked[i].1).collect())
}

/// Epipolar samples of one target ray in `K` reference views.
///
/// Entry `(j, i)` lives at flat index `j * points + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarSampleGrid {
    pub references: usize,
    pub points: usize,
    pub coord_dim: usize,
    pub view_ids: Vec<usize>,
    /// Points `p_i` on the target ray; shared by every view.
    pub points3d: Vec<Vec3>,
    /// Putative depths `delta_i`, strictly increasing.
    pub deltas: Vec<f64>,
    pub pixels: Vec<Vec2>,
    /// Raw light-field coordinates of the reference ray through each pixel.
    pub ray_coords: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub features: Vec<f64>,
    /// Bilinearly interpolated `5x5x3` windows around each pixel.
    pub patches: Vec<f64>,
    pub valid: Vec<bool>,
}

impl EpipolarSampleGrid {
    pub fn index(&self, view: usize, point: usize) -> usize {
        view * self.points + point
    }

    pub fn coords(&self, view: usize, point: usize) -> &[f64] {
        let i = self.index(view, point) * self.coord_dim;
        &self.ray_coords[i..i + self.coord_dim]
    }

    pub fn feature(&self, view: usize, point: usize) -> &[f64] {
        let i = self.index(view, point) * FEATURE_CHANNELS;
        &self.features[i..i + FEATURE_CHANNELS]
    }

    pub fn patch(&self, view: usize, point: usize) -> &[f64] {
        let i = self.index(view, point) * PATCH_DIM;
        &self.patches[i..i + PATCH_DIM]
    }

    pub fn view_valid(&self, view: usize) -> bool {
        self.valid[view * self.points..(view + 1) * self.points].iter().any(|&v| v)
    }

    /// True when at least one view has a valid point.
    pub fn renderable(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// Zeroes the gathered data of every invalid point.
    fn clear_invalid(&mut self) {
        for idx in 0..self.valid.len() {
            if !self.valid[idx] {
                self.colors[idx] = [0.0; 3];
                self.features[idx * FEATURE_CHANNELS..(idx + 1) * FEATURE_CHANNELS].fill(0.0);
                self.patches[idx * PATCH_DIM..(idx + 1) * PATCH_DIM].fill(0.0);
                self.ray_coords[idx * self.coord_dim..(idx + 1) * self.coord_dim].fill(0.0);
            }
        }
    }
}

/// `count` depths over `[lo, hi]` with the requested spacing.
pub fn putative_depths(lo: f64, hi: f64, count: usize, spacing: DepthSpacing) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let last = (count - 1) as f64;
    (0..count)
        .map(|i| {
            let f = i as f64 / last;
            match spacing {
                DepthSpacing::UniformDelta => {
                    if i + 1 == count {
                        hi
                    } else {
                        lo + (hi - lo) * f
                    }
                }
                DepthSpacing::UniformInverseDepth => {
                    if i + 1 == count {
                        hi
                    } else {
                        1.0 / (1.0 / lo + (1.0 / hi - 1.0 / lo) * f)
                    }
                }
            }
        })
        .collect()
}

/// Depth range sampled along `ray`: the scene near/far for slab and
/// Plücker scenes, the bounding-sphere chord for two-sphere scenes.
pub fn depth_range(ray: &Ray, frame: &SceneFrame, parametrization: Parametrization) -> Option<(f64, f64)> {
    match parametrization {
        Parametrization::TwoSphere => {
            let (entry, exit) = sphere_intersections(ray, &frame.center(), frame.sphere_radius).ok()?;
            let lo = entry.max(frame.near);
            (exit > lo).then_some((lo, exit))
        }
        _ => Some((frame.near, frame.far)),
    }
}

/// Geometry of the epipolar grid: depths, points, pixels, validity and
/// reference-ray coordinates. Colors and features are left at zero.
pub fn sample_epipolar_points(
    ray: &Ray,
    frame: &SceneFrame,
    parametrization: Parametrization,
    references: &[&CameraModel],
    config: &SamplerConfig,
) -> EpipolarSampleGrid {
    let k = references.len();
    let p = config.points;
    let coord_dim = parametrization.dim();
    let range = depth_range(ray, frame, parametrization);
    let (lo, hi) = range.unwrap_or((frame.near, frame.far));
    let deltas = putative_depths(lo, hi, p, config.depth_spacing);
    let points3d: Vec<Vec3> = deltas.iter().map(|&d| point_at(ray, d)).collect();
    let mut grid = EpipolarSampleGrid {
        references: k,
        points: p,
        coord_dim,
        view_ids: references.iter().map(|c| c.view_id).collect(),
        points3d,
        deltas,
        pixels: vec![Vec2::zeros(); k * p],
        ray_coords: vec![0.0; k * p * coord_dim],
        colors: vec![[0.0; 3]; k * p],
        features: vec![0.0; k * p * FEATURE_CHANNELS],
        patches: vec![0.0; k * p * PATCH_DIM],
        valid: vec![false; k * p],
    };
    if range.is_none() {
        return grid;
    }
    for (j, camera) in references.iter().enumerate() {
        for i in 0..p {
            let idx = j * p + i;
            let Ok((pixel, depth)) = project(camera, &grid.points3d[i]) else { continue };
            grid.pixels[idx] = pixel;
            if depth <= 0.0 || !camera.contains_pixel(pixel) {
                continue;
            }
            let reference_ray = ray_from_pixel(camera, pixel);
            let Ok(coords) = frame.coords(&reference_ray, parametrization) else { continue };
            grid.ray_coords[idx * coord_dim..(idx + 1) * coord_dim].copy_from_slice(&coords.to_vec());
            grid.valid[idx] = true;
        }
    }
    grid
}

/// Fills colors and image patches by bilinear interpolation.
pub fn gather_colors(grid: &mut EpipolarSampleGrid, images: &[&Image]) -> Result<()> {
    if images.len() != grid.references {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} images for {} reference views",
            images.len(),
            grid.references
        )));
    }
    for img in images {
        if img.channels != 3 {
            return Err(Error::ShapeMismatch("reference images must be RGB".into()));
        }
    }
    let mut color = [0.0; 3];
    for (j, img) in images.iter().enumerate() {
        for i in 0..grid.points {
            let idx = grid.index(j, i);
            if !grid.valid[idx] {
                continue;
            }
            let px = grid.pixels[idx];
            img.sample(px.x, px.y, &mut color);
            grid.colors[idx] = color;
            let patch = &mut grid.patches[idx * PATCH_DIM..(idx + 1) * PATCH_DIM];
            accumulate_patch(img, px.x, px.y, patch);
        }
    }
    grid.clear_invalid();
    Ok(())
}

/// Fills colors, patches and convolutional features. `feature_maps` must
/// match the images' spatial size.
pub fn gather_colors_and_features(
    grid: &mut EpipolarSampleGrid,
    images: &[&Image],
    feature_maps: &[&Image],
) -> Result<()> {
    if feature_maps.len() != grid.references {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} feature maps for {} reference views",
            feature_maps.len(),
            grid.references
        )));
    }
    for (img, map) in images.iter().zip(feature_maps) {
        if img.width != map.width || img.height != map.height || map.channels != FEATURE_CHANNELS {
            return Err(Error::ShapeMismatch(alloc::format!(
                "feature map {}x{}x{} does not match image {}x{}",
                map.width,
                map.height,
                map.channels,
                img.width,
                img.height
            )));
        }
    }
    gather_colors(grid, images)?;
    let mut feature = [0.0; FEATURE_CHANNELS];
    for (j, map) in feature_maps.iter().enumerate() {
        for i in 0..grid.points {
            let idx = grid.index(j, i);
            if !grid.valid[idx] {
                continue;
            }
            let px = grid.pixels[idx];
            map.sample(px.x, px.y, &mut feature);
            grid.features[idx * FEATURE_CHANNELS..(idx + 1) * FEATURE_CHANNELS].copy_from_slice(&feature);
        }
    }
    Ok(())
}

/// Zero-padded `5x5` window centered on integer pixel `(x, y)`, laid out as
/// `[dy][dx][channel]`, scaled by `weight` and added to `out`.
pub fn add_window(img: &Image, x: usize, y: usize, weight: f64, out: &mut [f64]) {
    let half = (CONV_KERNEL / 2) as isize;
    for dy in 0..CONV_KERNEL {
        for dx in 0..CONV_KERNEL {
            let sx = x as isize + dx as isize - half;
            let sy = y as isize + dy as isize - half;
            let base = (dy * CONV_KERNEL + dx) * 3;
            for c in 0..3 {
                out[base + c] += weight * img.get_padded(sx, sy, c) as f64;
            }
        }
    }
}

/// Bilinear combination of the windows at the four taps around `(x, y)`.
pub fn accumulate_patch(img: &Image, x: f64, y: f64, out: &mut [f64]) {
    out.fill(0.0);
    for (px, py, w) in img.bilinear_taps(x, y) {
        if w != 0.0 {
            add_window(img, px, py, w, out);
        }
    }
}
