//! TOML scene manifests.
//!
//! ```toml
//! parametrization = "slab"          # or "two_sphere"
//!
//! [frame]
//! z_st = 1.0
//! z_uv = 4.0
//! sphere_center = [0.0, 0.0, 2.0]
//! sphere_radius = 3.0
//! near = 1.0
//! far = 4.0
//!
//! [splits]
//! train = [0, 2]
//! test = [1]
//!
//! [[cameras]]
//! name = "left"
//! image = "images/left.png"        # relative to the manifest
//! depth = "depth/left.f32"         # optional float map
//! width = 64
//! height = 48
//! fx = 64.0
//! fy = 64.0
//! cx = 31.5
//! cy = 23.5
//! rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
//! translation = [0.5, 0.0, 0.0]
//! ```
//!
//! Poses are world-to-camera: `x_cam = R x_world + t`. Split entries index
//! `cameras`. Training views come first in the loaded [`Scene`], so view
//! ids are reassigned in split order.

use std::fs;
use std::path::{Path, PathBuf};

use nlf_core::geometry::{CameraModel, Mat3, Parametrization, SceneFrame, Vec3};
use nlf_core::scene::{Scene, View};
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};
use crate::imageio::{read_float_map, read_png, write_float_map, write_png};

/// Largest tolerated `max |R Rᵀ - I|` in a manifest.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub parametrization: Parametrization,
    pub frame: SceneFrame,
    pub splits: Splits,
    pub cameras: Vec<CameraRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    #[serde(default)]
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(flatten)]
    pub pose: PoseRecord,
}

/// Intrinsics and world-to-camera pose of one camera. A file holding just
/// these fields describes a novel camera to render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_camera(camera: &CameraModel) -> Self {
        let r = &camera.rotation;
        Self {
            width: camera.width,
            height: camera.height,
            fx: camera.fx(),
            fy: camera.fy(),
            cx: camera.cx(),
            cy: camera.cy(),
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [camera.translation.x, camera.translation.y, camera.translation.z],
        }
    }

    /// Validated camera; a rotation that is not orthonormal is an
    /// [`Error::InvalidPose`] naming `view_id`.
    pub fn camera(&self, view_id: usize) -> Result<CameraModel> {
        let r = Mat3::from_fn(|i, j| self.rotation[i][j]);
        let err = (r * r.transpose() - Mat3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidPose { view_id, reason: format!("rotation is not orthonormal (max |R R^T - I| = {err:.3e})") });
        }
        if r.determinant() < 0.0 {
            return Err(Error::InvalidPose { view_id, reason: "rotation is a reflection".into() });
        }
        let t = Vec3::from(self.translation);
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, r, t, self.width, self.height, view_id)
            .map_err(|e| Error::InvalidPose { view_id, reason: e.to_string() })
    }
}

impl SceneManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest fields are representable in TOML")
    }

    /// Split ids in range and disjoint, at least one training view.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.cameras.len()];
        if self.splits.train.is_empty() {
            return Err(Error::Manifest("the train split is empty".into()));
        }
        for &id in self.splits.train.iter().chain(&self.splits.test) {
            let slot = seen.get_mut(id).ok_or_else(|| {
                Error::Manifest(format!("split refers to camera {id} but there are {} cameras", self.cameras.len()))
            })?;
            if *slot {
                return Err(Error::Manifest(format!("camera {id} appears twice in the splits")));
            }
            *slot = true;
        }
        self.frame.validate()?;
        if self.parametrization == Parametrization::Plucker {
            return Err(Error::Manifest("scenes use the slab or two_sphere parametrization".into()));
        }
        Ok(())
    }
}

fn load_view(record: &CameraRecord, view_id: usize, base: &Path) -> Result<View> {
    let camera = record.pose.camera(view_id)?;
    let path = base.join(&record.image);
    if !path.is_file() {
        return Err(Error::MissingImage { view_id, path });
    }
    let image = read_png(&path).map_err(|_| Error::MissingImage { view_id, path: path.clone() })?;
    if (image.width, image.height) != (camera.width, camera.height) {
        return Err(Error::Manifest(format!(
            "view {view_id}: {} is {}x{} but the camera is {}x{}",
            path.display(),
            image.width,
            image.height,
            camera.width,
            camera.height
        )));
    }
    let depth = match &record.depth {
        Some(p) => {
            let d = read_float_map(&base.join(p))?;
            if (d.width, d.height, d.channels) != (camera.width, camera.height, 1) {
                return Err(Error::Manifest(format!("view {view_id}: depth map does not match the camera")));
            }
            Some(d)
        }
        None => None,
    };
    Ok(View { name: record.name.clone(), camera, image, depth })
}

/// Loads a manifest and its images. Errors name the offending camera by
/// its index in the manifest.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let manifest = SceneManifest::read(path)?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load = |ids: &[usize]| -> Result<Vec<View>> {
        ids.iter().map(|&id| load_view(&manifest.cameras[id], id, base)).collect()
    };
    let train = load(&manifest.splits.train)?;
    let test = load(&manifest.splits.test)?;
    Ok(Scene::new(manifest.parametrization, manifest.frame.clone(), train, test)?)
}

/// Manifest describing `scene` with images under `images/` and depth maps
/// under `depth/`.
pub fn manifest_for(scene: &Scene) -> SceneManifest {
    let cameras = scene
        .views
        .iter()
        .map(|v| CameraRecord {
            name: v.name.clone(),
            image: PathBuf::from("images").join(format!("{}.png", v.name)),
            depth: v.depth.as_ref().map(|_| PathBuf::from("depth").join(format!("{}.f32", v.name))),
            pose: PoseRecord::from_camera(&v.camera),
        })
        .collect();
    SceneManifest {
        parametrization: scene.parametrization,
        frame: scene.frame.clone(),
        splits: Splits { train: (0..scene.num_train).collect(), test: (scene.num_train..scene.views.len()).collect() },
        cameras,
    }
}

/// Writes `scene.toml`, the images and any depth maps into `dir`, and
/// returns the manifest path. Images are stored as 8-bit sRGB.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<PathBuf> {
    let manifest = manifest_for(scene);
    for sub in ["images", "depth"] {
        fs::create_dir_all(dir.join(sub)).map_err(io(dir.join(sub)))?;
    }
    for (view, record) in scene.views.iter().zip(&manifest.cameras) {
        write_png(&dir.join(&record.image), &view.image)?;
        if let (Some(d), Some(p)) = (&view.depth, &record.depth) {
            write_float_map(&dir.join(p), d)?;
        }
    }
    let path = dir.join("scene.toml");
    fs::write(&path, manifest.to_toml()).map_err(io(&path))?;
    Ok(path)
}
