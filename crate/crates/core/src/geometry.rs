//! Pinhole cameras, world rays and light-field ray coordinates.
//!
//! All geometry is `f64`. A ray keeps the unnormalized direction
//! `R^T C^-1 x`, so the line parameter `delta` equals the depth of the
//! point in the camera that produced the ray.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;
const PROJECTION_EPS: f64 = 1e-12;
const PARALLEL_EPS: f64 = 1e-9;
const TANGENT_EPS: f64 = 1e-12;
const POLE_EPS: f64 = 1e-9;

/// Pinhole camera: zero-skew intrinsics and a world-to-camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub view_id: usize,
}

impl CameraModel {
    /// Builds and validates a camera.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
        view_id: usize,
    ) -> Result<Self> {
        let intrinsics = Mat3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let camera = Self { intrinsics, rotation, translation, width, height, view_id };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `eye` looking at `target`, image `y` axis pointing along
    /// `-up` (image rows grow downward).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
        view_id: usize,
    ) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or(Error::ZeroDirection)?;
        let right = (-up).cross(&forward).try_normalize(1e-12).ok_or_else(|| Error::InvalidCamera {
            view_id,
            reason: "up vector parallel to viewing direction".into(),
        })?;
        let down = forward.cross(&right);
        // rows of R are the camera axes in world coordinates
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
            view_id,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: alloc::string::String| Error::InvalidCamera { view_id: self.view_id, reason };
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(fail("focal lengths must be positive".into()));
        }
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(fail("intrinsics must be upper triangular with zero skew".into()));
        }
        let r = &self.rotation;
        let err = (r * r.transpose() - Mat3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(fail(format!("rotation is not orthonormal (max |R R^T - I| = {err:.3e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(fail(format!("rotation determinant is {det}")));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(fail("translation is not finite".into()));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn contains_pixel(&self, pixel: Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width as f64 - 1.0)
            && pixel.y <= (self.height as f64 - 1.0)
    }
}

/// World line `origin + delta * direction`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub source_view: Option<usize>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self { origin, direction, source_view: None }
    }
}

/// Ray through a pixel: `l(delta) = -R^T t + delta R^T C^-1 x`.
pub fn ray_from_pixel(camera: &CameraModel, pixel: Vec2) -> Ray {
    let local = Vec3::new((pixel.x - camera.cx()) / camera.fx(), (pixel.y - camera.cy()) / camera.fy(), 1.0);
    Ray {
        origin: camera.center(),
        direction: camera.rotation.transpose() * local,
        source_view: Some(camera.view_id),
    }
}

pub fn point_at(ray: &Ray, delta: f64) -> Vec3 {
    ray.origin + ray.direction * delta
}

/// Projects a world point; returns the pixel and the camera-frame depth.
pub fn project(camera: &CameraModel, point: &Vec3) -> Result<(Vec2, f64)> {
    let p = camera.rotation * point + camera.translation;
    let depth = p.z;
    if depth.abs() < PROJECTION_EPS {
        return Err(Error::DegenerateProjection);
    }
    let pixel = Vec2::new(camera.fx() * p.x / depth + camera.cx(), camera.fy() * p.y / depth + camera.cy());
    Ok((pixel, depth))
}

/// Which light-field coordinates a scene uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Parametrization {
    Slab,
    TwoSphere,
    Plucker,
}

impl Parametrization {
    /// Number of raw coordinates.
    pub fn dim(self) -> usize {
        match self {
            Parametrization::Slab | Parametrization::TwoSphere => 4,
            Parametrization::Plucker => 6,
        }
    }
}

/// Light-field coordinates of a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LightFieldCoords {
    /// `(s, t, u, v)`: intersections with the two slab planes.
    Slab([f64; 4]),
    /// `(theta1, phi1, theta2, phi2)` at the entry and exit points.
    TwoSphere([f64; 4]),
    /// Unit direction and moment.
    Plucker { direction: [f64; 3], moment: [f64; 3] },
}

impl LightFieldCoords {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            LightFieldCoords::Slab(c) | LightFieldCoords::TwoSphere(c) => c.to_vec(),
            LightFieldCoords::Plucker { direction, moment } => direction.iter().chain(moment).copied().collect(),
        }
    }

    pub fn parametrization(&self) -> Parametrization {
        match self {
            LightFieldCoords::Slab(_) => Parametrization::Slab,
            LightFieldCoords::TwoSphere(_) => Parametrization::TwoSphere,
            LightFieldCoords::Plucker { .. } => Parametrization::Plucker,
        }
    }
}

/// Scene-level placement of the slab planes, bounding sphere and depth
/// range, in the canonical frame whose forward axis is `+z`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneFrame {
    pub z_st: f64,
    pub z_uv: f64,
    pub sphere_center: [f64; 3],
    pub sphere_radius: f64,
    pub near: f64,
    pub far: f64,
    /// Multiplies raw ray coordinates before encoding.
    #[cfg_attr(feature = "serde", serde(default = "unit_scale"))]
    pub coord_scale: f64,
}

#[cfg(feature = "serde")]
fn unit_scale() -> f64 {
    1.0
}

impl SceneFrame {
    /// Slab planes anchored at the near and far depths.
    pub fn forward_facing(near: f64, far: f64, sphere_center: [f64; 3], sphere_radius: f64) -> Result<Self> {
        let frame = Self { z_st: near, z_uv: far, sphere_center, sphere_radius, near, far, coord_scale: 1.0 };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_st == self.z_uv {
            return Err(Error::Config("slab planes must differ".into()));
        }
        if !(self.sphere_radius > 0.0) {
            return Err(Error::Config("sphere radius must be positive".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::Config("need 0 < near < far".into()));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return Err(Error::Config("coordinate scale must be positive".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.sphere_center)
    }

    /// Coordinates of `ray` in the requested parametrization.
    pub fn coords(&self, ray: &Ray, parametrization: Parametrization) -> Result<LightFieldCoords> {
        match parametrization {
            Parametrization::Slab => slab_coords(ray, self),
            Parametrization::TwoSphere => sphere_coords(ray, self),
            Parametrization::Plucker => plucker_coords(ray),
        }
    }
}

pub fn slab_coords(ray: &Ray, frame: &SceneFrame) -> Result<LightFieldCoords> {
    let norm = ray.direction.norm();
    if norm == 0.0 {
        return Err(Error::ZeroDirection);
    }
    if (ray.direction.z / norm).abs() <= PARALLEL_EPS {
        return Err(Error::ParallelRay);
    }
    let at = |z: f64| {
        let delta = (z - ray.origin.z) / ray.direction.z;
        point_at(ray, delta)
    };
    let st = at(frame.z_st);
    let uv = at(frame.z_uv);
    Ok(LightFieldCoords::Slab([st.x, st.y, uv.x, uv.y]))
}

/// Line parameters of the two sphere intersections, entry first.
pub fn sphere_intersections(ray: &Ray, center: &Vec3, radius: f64) -> Result<(f64, f64)> {
    let norm = ray.direction.norm();
    if norm == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let unit = ray.direction / norm;
    let oc = ray.origin - center;
    let half_b = unit.dot(&oc);
    let c = oc.norm_squared() - radius * radius;
    // reduced discriminant of |oc + s*unit|^2 = r^2, scale-free in the direction
    let disc = half_b * half_b - c;
    if disc.abs() <= TANGENT_EPS {
        return Err(Error::TangentRay);
    }
    if disc < 0.0 {
        return Err(Error::NoIntersection);
    }
    let root = disc.sqrt();
    // stable pair of roots
    let q = if half_b >= 0.0 { -(half_b + root) } else { -half_b + root };
    let (mut s1, mut s2) = (q, if q != 0.0 { c / q } else { -q });
    if s1 > s2 {
        core::mem::swap(&mut s1, &mut s2);
    }
    Ok((s1 / norm, s2 / norm))
}

/// Colatitude from `+z` and longitude of a point relative to `center`.
pub fn spherical_angles(point: &Vec3, center: &Vec3) -> (f64, f64) {
    let d = point - center;
    let r = d.norm();
    let theta = (d.z / r).clamp(-1.0, 1.0).acos();
    let phi = if theta.sin() < POLE_EPS { 0.0 } else { d.y.atan2(d.x) };
    // atan2 returns -pi for (-x, -0.0); keep longitudes in (-pi, pi]
    let phi = if phi <= -PI { PI } else { phi };
    (theta, phi)
}

pub fn sphere_coords(ray: &Ray, frame: &SceneFrame) -> Result<LightFieldCoords> {
    let center = frame.center();
    let (d1, d2) = sphere_intersections(ray, &center, frame.sphere_radius)?;
    let (t1, p1) = spherical_angles(&point_at(ray, d1), &center);
    let (t2, p2) = spherical_angles(&point_at(ray, d2), &center);
    Ok(LightFieldCoords::TwoSphere([t1, p1, t2, p2]))
}

pub fn plucker_coords(ray: &Ray) -> Result<LightFieldCoords> {
    let norm = ray.direction.norm();
    if norm == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let d = ray.direction / norm;
    let m = ray.origin.cross(&d);
    Ok(LightFieldCoords::Plucker { direction: [d.x, d.y, d.z], moment: [m.x, m.y, m.z] })
}
