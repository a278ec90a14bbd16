//! Analytic test scenes rendered by ray casting.
//!
//! Planes are textured and unlit; spheres are shaded by one directional
//! light with an ambient term, optionally with a Phong highlight. Pixels
//! are supersampled on a regular sub-pixel grid, and ground-truth depth is
//! taken at the pixel centre.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ray_from_pixel, CameraModel, Mat3, Parametrization, Ray, SceneFrame, Vec2, Vec3};
use crate::image::Image;
use crate::scene::{Scene, View};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case")
)]
pub enum Texture {
    /// Squares of side `period / 2`, alternating between two albedos.
    Checker { period: f64, albedo: [[f64; 3]; 2] },
    /// Sum of `waves` random plane waves with wavelengths in
    /// `[min_wavelength, max_wavelength]`, centred on 0.5 and clamped to
    /// `[0, 1]`.
    Noise { waves: usize, min_wavelength: f64, max_wavelength: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case")
)]
pub enum Primitive {
    /// Plane `z = depth` facing the cameras, optionally limited to
    /// `[x0, x1] x [y0, y1]`.
    Plane {
        depth: f64,
        texture: Texture,
        #[cfg_attr(feature = "serde", serde(default))]
        extent: Option<[f64; 4]>,
    },
    LambertianSphere { center: [f64; 3], radius: f64, albedo: [f64; 3] },
    SpecularSphere { center: [f64; 3], radius: f64, albedo: [f64; 3], specular: f64, exponent: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case")
)]
pub enum Rig {
    /// Axis-aligned cameras at `z = 0`, evenly spread over
    /// `[-baseline/2, baseline/2]` along x, looking down `+z`.
    Line { baseline: f64 },
    /// Cameras on a horizontal arc of `radius` around `target`, spanning
    /// `angle` radians, looking at `target`.
    Arc { radius: f64, angle: f64, target: [f64; 3] },
    /// Cameras spiralling over the spherical cap of `radius` around
    /// `target` within 60 degrees of the `-z` axis, looking at `target`.
    Hemisphere { radius: f64, target: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSceneSpec {
    pub primitives: Vec<Primitive>,
    pub rig: Rig,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Indices of rig cameras held out for testing.
    #[cfg_attr(feature = "serde", serde(default))]
    pub test_views: Vec<usize>,
    pub parametrization: Parametrization,
    pub near: f64,
    pub far: f64,
    /// Bounding sphere for two-sphere scenes.
    #[cfg_attr(feature = "serde", serde(default))]
    pub sphere_center: [f64; 3],
    #[cfg_attr(feature = "serde", serde(default = "default_radius"))]
    pub sphere_radius: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_coord_scale"))]
    pub coord_scale: f64,
    /// Sub-pixel samples per axis.
    #[cfg_attr(feature = "serde", serde(default = "default_supersampling"))]
    pub supersampling: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_background"))]
    pub background: [f64; 3],
    #[cfg_attr(feature = "serde", serde(default = "default_light"))]
    pub light: [f64; 3],
    #[cfg_attr(feature = "serde", serde(default = "default_ambient"))]
    pub ambient: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
}

#[cfg(feature = "serde")]
fn default_radius() -> f64 {
    1.0
}
#[cfg(feature = "serde")]
fn default_coord_scale() -> f64 {
    1.0
}
#[cfg(feature = "serde")]
fn default_supersampling() -> usize {
    1
}
#[cfg(feature = "serde")]
fn default_background() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}
#[cfg(feature = "serde")]
fn default_light() -> [f64; 3] {
    [-0.4, -0.6, -1.0]
}
#[cfg(feature = "serde")]
fn default_ambient() -> f64 {
    0.25
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            primitives: Vec::new(),
            rig: Rig::Line { baseline: 1.0 },
            count: 4,
            width: 32,
            height: 32,
            focal: 32.0,
            test_views: Vec::new(),
            parametrization: Parametrization::Slab,
            near: 1.0,
            far: 4.0,
            sphere_center: [0.0; 3],
            sphere_radius: 1.0,
            coord_scale: 1.0,
            supersampling: 1,
            background: [0.5, 0.5, 0.5],
            light: [-0.4, -0.6, -1.0],
            ambient: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.primitives.is_empty() {
            return bad("at least one primitive is required".into());
        }
        if self.count == 0 || self.width == 0 || self.height == 0 || self.supersampling == 0 {
            return bad("camera count, image size and supersampling must be positive".into());
        }
        if !(self.focal > 0.0) {
            return bad("focal length must be positive".into());
        }
        if let Some(&i) = self.test_views.iter().find(|&&i| i >= self.count) {
            return bad(format!("test view {i} out of range"));
        }
        if self.test_views.len() >= self.count {
            return bad("every view is held out".into());
        }
        let rig_z = match self.rig {
            Rig::Line { .. } => Some(0.0),
            _ => None,
        };
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = match p {
                Primitive::Plane { depth, .. } => (*depth, *depth),
                Primitive::LambertianSphere { center, radius, .. } | Primitive::SpecularSphere { center, radius, .. } => {
                    if !(*radius > 0.0) {
                        return bad(format!("primitive {i} has a non-positive radius"));
                    }
                    (center[2] - radius, center[2] + radius)
                }
            };
            if let Some(z) = rig_z {
                if lo - z < self.near || hi - z > self.far {
                    return bad(format!("primitive {i} lies outside [near, far]"));
                }
            }
            if let Primitive::Plane { texture: Texture::Checker { period, .. }, .. } = p {
                if !(*period > 0.0) {
                    return bad(format!("primitive {i} has a non-positive checker period"));
                }
            }
        }
        Ok(())
    }
}

struct Wave {
    direction: Vec2,
    frequency: f64,
    phase: [f64; 3],
}

enum Shape {
    Plane { depth: f64, extent: Option<[f64; 4]>, texture: Tex },
    Sphere { center: Vec3, radius: f64, albedo: [f64; 3], specular: f64, exponent: f64 },
}

enum Tex {
    Checker { half: f64, albedo: [[f64; 3]; 2] },
    Noise(Vec<Wave>),
}

impl Tex {
    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        match self {
            Tex::Checker { half, albedo } => {
                let parity = ((x / half).floor() + (y / half).floor()).rem_euclid(2.0);
                albedo[parity as usize]
            }
            Tex::Noise(waves) => {
                let n = waves.len().max(1) as f64;
                let mut c = [0.0; 3];
                for w in waves {
                    let arg = 2.0 * PI * w.frequency * (w.direction.x * x + w.direction.y * y);
                    for (ch, v) in c.iter_mut().enumerate() {
                        *v += (arg + w.phase[ch]).sin();
                    }
                }
                // unit standard deviation per channel, then 2.25 sigma spans [0.05, 0.95]
                let sigma = (n / 2.0).sqrt();
                c.map(|v| (0.5 + 0.2 * v / sigma).clamp(0.0, 1.0))
            }
        }
    }
}

struct Hit {
    t: f64,
    color: [f64; 3],
}

/// Analytic renderer for one spec.
pub struct SyntheticRenderer {
    shapes: Vec<Shape>,
    background: [f64; 3],
    light: Vec3,
    ambient: f64,
}

impl SyntheticRenderer {
    pub fn new(spec: &SyntheticSceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let shapes = spec
            .primitives
            .iter()
            .map(|p| match p {
                Primitive::Plane { depth, texture, extent } => {
                    let texture = match texture {
                        Texture::Checker { period, albedo } => Tex::Checker { half: period / 2.0, albedo: *albedo },
                        Texture::Noise { waves, min_wavelength, max_wavelength } => Tex::Noise(
                            (0..*waves)
                                .map(|_| {
                                    let a = rng.random_range(0.0..2.0 * PI);
                                    let wl = rng.random_range(*min_wavelength..=*max_wavelength);
                                    Wave {
                                        direction: Vec2::new(a.cos(), a.sin()),
                                        frequency: 1.0 / wl,
                                        phase: [0; 3].map(|_| rng.random_range(0.0..2.0 * PI)),
                                    }
                                })
                                .collect(),
                        ),
                    };
                    Shape::Plane { depth: *depth, extent: *extent, texture }
                }
                Primitive::LambertianSphere { center, radius, albedo } => {
                    Shape::Sphere { center: Vec3::from(*center), radius: *radius, albedo: *albedo, specular: 0.0, exponent: 1.0 }
                }
                Primitive::SpecularSphere { center, radius, albedo, specular, exponent } => Shape::Sphere {
                    center: Vec3::from(*center),
                    radius: *radius,
                    albedo: *albedo,
                    specular: *specular,
                    exponent: *exponent,
                },
            })
            .collect();
        let light = Vec3::from(spec.light);
        let light = if light.norm() > 0.0 { -light.normalize() } else { Vec3::new(0.0, 0.0, -1.0) };
        Ok(Self { shapes, background: spec.background, light, ambient: spec.ambient })
    }

    fn hit(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for shape in &self.shapes {
            let candidate = match shape {
                Shape::Plane { depth, extent, texture } => {
                    if ray.direction.z == 0.0 {
                        continue;
                    }
                    let t = (depth - ray.origin.z) / ray.direction.z;
                    if t <= 1e-9 {
                        continue;
                    }
                    let p = ray.origin + ray.direction * t;
                    if let Some([x0, x1, y0, y1]) = extent {
                        if p.x < *x0 || p.x > *x1 || p.y < *y0 || p.y > *y1 {
                            continue;
                        }
                    }
                    Hit { t, color: texture.color(p.x, p.y) }
                }
                Shape::Sphere { center, radius, albedo, specular, exponent } => {
                    let oc = ray.origin - center;
                    let a = ray.direction.norm_squared();
                    let b = oc.dot(&ray.direction);
                    let c = oc.norm_squared() - radius * radius;
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt();
                    let t = if (-b - sq) / a > 1e-9 { (-b - sq) / a } else { (-b + sq) / a };
                    if t <= 1e-9 {
                        continue;
                    }
                    let p = ray.origin + ray.direction * t;
                    let n = (p - center) / *radius;
                    let diffuse = n.dot(&self.light).max(0.0);
                    let shade = self.ambient + (1.0 - self.ambient) * diffuse;
                    let mut color = albedo.map(|a| a * shade);
                    if *specular > 0.0 {
                        let view = -ray.direction.normalize();
                        let reflected = n * (2.0 * n.dot(&self.light)) - self.light;
                        let s = specular * reflected.dot(&view).max(0.0).powf(*exponent);
                        color = color.map(|c| (c + s).min(1.0));
                    }
                    Hit { t, color }
                }
            };
            if best.as_ref().is_none_or(|b| candidate.t < b.t) {
                best = Some(candidate);
            }
        }
        best
    }

    /// Color seen along `ray`.
    pub fn radiance(&self, ray: &Ray) -> [f64; 3] {
        self.hit(ray).map_or(self.background, |h| h.color)
    }

    /// Camera-frame depth of the first hit along the pixel-centre ray, or
    /// infinity.
    pub fn depth(&self, camera: &CameraModel, pixel: Vec2) -> f64 {
        let ray = ray_from_pixel(camera, pixel);
        // ray directions have unit camera-frame z
        self.hit(&ray).map_or(f64::INFINITY, |h| h.t)
    }

    pub fn render(&self, camera: &CameraModel, supersampling: usize) -> (Image, Image) {
        let n = supersampling;
        let mut image = Image::new(camera.width, camera.height, 3);
        let mut depth = Image::new(camera.width, camera.height, 1);
        for y in 0..camera.height {
            for x in 0..camera.width {
                let mut acc = [0.0; 3];
                for sy in 0..n {
                    for sx in 0..n {
                        let ox = (sx as f64 + 0.5) / n as f64 - 0.5;
                        let oy = (sy as f64 + 0.5) / n as f64 - 0.5;
                        let ray = ray_from_pixel(camera, Vec2::new(x as f64 + ox, y as f64 + oy));
                        let c = self.radiance(&ray);
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
                let norm = (n * n) as f64;
                for (ch, v) in image.pixel_mut(x, y).iter_mut().enumerate() {
                    *v = (acc[ch] / norm) as f32;
                }
                depth.pixel_mut(x, y)[0] = self.depth(camera, Vec2::new(x as f64, y as f64)) as f32;
            }
        }
        (image, depth)
    }
}

/// Cameras of a rig, in rig order.
pub fn rig_cameras(spec: &SyntheticSceneSpec) -> Result<Vec<CameraModel>> {
    let (w, h, f) = (spec.width, spec.height, spec.focal);
    let n = spec.count;
    let spread = |i: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 - 0.5 };
    let up = Vec3::new(0.0, -1.0, 0.0);
    (0..n)
        .map(|i| match spec.rig {
            Rig::Line { baseline } => {
                let eye = Vec3::new(baseline * spread(i), 0.0, 0.0);
                CameraModel::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, Mat3::identity(), -eye, w, h, i)
            }
            Rig::Arc { radius, angle, target } => {
                let target = Vec3::from(target);
                let a = angle * spread(i);
                let eye = target + Vec3::new(radius * a.sin(), 0.0, -radius * a.cos());
                CameraModel::look_at(eye, target, up, f, w, h, i)
            }
            Rig::Hemisphere { radius, target } => {
                let target = Vec3::from(target);
                // golden-angle spiral over the cap within 60 degrees of -z
                let golden = PI * (3.0 - 5.0f64.sqrt());
                let cos_t = 1.0 - (i as f64 + 0.5) / n as f64 * 0.5;
                let sin_t = (1.0 - cos_t * cos_t).sqrt();
                let a = golden * i as f64;
                let dir = Vec3::new(sin_t * a.cos(), sin_t * a.sin(), -cos_t);
                CameraModel::look_at(target + dir * radius, target, up, f, w, h, i)
            }
        })
        .collect()
}

/// Renders every rig camera and splits the views.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<Scene> {
    let renderer = SyntheticRenderer::new(spec)?;
    let cameras = rig_cameras(spec)?;
    let frame = SceneFrame {
        z_st: spec.near,
        z_uv: spec.far,
        sphere_center: spec.sphere_center,
        sphere_radius: spec.sphere_radius,
        near: spec.near,
        far: spec.far,
        coord_scale: spec.coord_scale,
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, camera) in cameras.into_iter().enumerate() {
        let (image, depth) = renderer.render(&camera, spec.supersampling);
        let view = View { name: format!("view{i:03}"), camera, image, depth: Some(depth) };
        if spec.test_views.contains(&i) {
            test.push(view);
        } else {
            train.push(view);
        }
    }
    Scene::new(spec.parametrization, frame, train, test)
}
