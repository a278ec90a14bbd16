//! Posed image collections and per-ray input preparation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{ray_from_pixel, CameraModel, LightFieldCoords, Parametrization, SceneFrame, Vec2};
use crate::image::Image;
use crate::model::{ModelConfig, RayBatch};
use crate::sampler::{gather_colors, sample_epipolar_points, select_reference_views, EpipolarSampleGrid, SamplerConfig};

/// One posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// Identifier from the manifest or generator.
    pub name: String,
    pub camera: CameraModel,
    /// Linear RGB in `[0, 1]`.
    pub image: Image,
    /// Ground-truth camera-frame depth, when known.
    pub depth: Option<Image>,
}

/// Views ordered training first. `views[i].camera.view_id == i`, so the
/// training views occupy embedding rows `0..num_train`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub parametrization: Parametrization,
    pub frame: SceneFrame,
    pub views: Vec<View>,
    pub num_train: usize,
}

impl Scene {
    /// Orders `train` views before `test` views and renumbers cameras.
    pub fn new(
        parametrization: Parametrization,
        frame: SceneFrame,
        train: Vec<View>,
        test: Vec<View>,
    ) -> Result<Self> {
        frame.validate()?;
        if train.is_empty() {
            return Err(Error::Config("scene needs at least one training view".into()));
        }
        let num_train = train.len();
        let mut views: Vec<View> = train.into_iter().chain(test).collect();
        for (i, v) in views.iter_mut().enumerate() {
            v.camera.view_id = i;
            v.camera.validate()?;
            if v.image.width != v.camera.width || v.image.height != v.camera.height || v.image.channels != 3 {
                return Err(Error::InvalidCamera { view_id: i, reason: "image does not match camera size".into() });
            }
        }
        Ok(Self { parametrization, frame, views, num_train })
    }

    pub fn train_views(&self) -> &[View] {
        &self.views[..self.num_train]
    }

    pub fn test_views(&self) -> &[View] {
        &self.views[self.num_train..]
    }

    pub fn train_cameras(&self) -> Vec<CameraModel> {
        self.train_views().iter().map(|v| v.camera.clone()).collect()
    }

    /// Reference views for `target` among the training views.
    pub fn references(&self, target: &CameraModel, sampler: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<usize>> {
        select_reference_views(target, &self.train_cameras(), sampler, rng)
    }

    /// Epipolar grid of the ray through `pixel`, with colors gathered.
    pub fn grid(&self, target: &CameraModel, pixel: Vec2, refs: &[usize], sampler: &SamplerConfig) -> Result<(LightFieldCoords, EpipolarSampleGrid)> {
        let ray = ray_from_pixel(target, pixel);
        let coords = self.frame.coords(&ray, self.parametrization)?;
        let cams: Vec<&CameraModel> = refs.iter().map(|&i| &self.views[i].camera).collect();
        let mut grid = sample_epipolar_points(&ray, &self.frame, self.parametrization, &cams, sampler);
        let images: Vec<&Image> = refs.iter().map(|&i| &self.views[i].image).collect();
        gather_colors(&mut grid, &images)?;
        Ok((coords, grid))
    }

    /// Encodes the rays through `pixels`. Rays that cannot be rendered
    /// (no coordinates, or no valid epipolar point) are skipped; the
    /// returned indices say which pixels made it into the batch.
    pub fn prepare(
        &self,
        target: &CameraModel,
        pixels: &[Vec2],
        refs: &[usize],
        sampler: &SamplerConfig,
        config: &ModelConfig,
    ) -> Result<(Option<RayBatch>, Vec<usize>)> {
        let mut coords = Vec::with_capacity(pixels.len());
        let mut grids = Vec::with_capacity(pixels.len());
        let mut kept = Vec::with_capacity(pixels.len());
        for (i, &px) in pixels.iter().enumerate() {
            let Ok((c, g)) = self.grid(target, px, refs, sampler) else { continue };
            if g.renderable() {
                coords.push(c);
                grids.push(g);
                kept.push(i);
            }
        }
        if kept.is_empty() {
            return Ok((None, kept));
        }
        let refs: Vec<&EpipolarSampleGrid> = grids.iter().collect();
        Ok((Some(RayBatch::from_grids(&coords, &refs, config, &self.frame)?), kept))
    }
}
