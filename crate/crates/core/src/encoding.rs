//! Positional encodings for ray coordinates and 3D points, and the camera
//! embedding table.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal features `sin(2^k w), cos(2^k w)` for `k < num_frequencies`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FourierConfig {
    pub num_frequencies: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub include_input: bool,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self { num_frequencies: 5, include_input: false }
    }
}

impl FourierConfig {
    /// Output width for `inputs` scalars.
    pub fn output_dim(&self, inputs: usize) -> usize {
        inputs * (2 * self.num_frequencies + usize::from(self.include_input))
    }
}

/// Encodes every value as `[w?, sin(2^0 w)..sin(2^(L-1) w), cos(2^0 w)..cos(2^(L-1) w)]`
/// and concatenates the blocks in input order.
pub fn fourier_encode(values: &[f64], config: &FourierConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.output_dim(values.len()));
    fourier_encode_into(values, config, &mut out);
    out
}

pub fn fourier_encode_into(values: &[f64], config: &FourierConfig, out: &mut Vec<f64>) {
    let l = config.num_frequencies;
    for &w in values {
        if config.include_input {
            out.push(w);
        }
        let start = out.len();
        out.extend((0..l).map(|k| (w * (1u64 << k) as f64).sin()));
        out.extend((0..l).map(|k| (w * (1u64 << k) as f64).cos()));
        debug_assert_eq!(out.len() - start, 2 * l);
    }
}

/// Real spherical harmonics at both sphere intersections of a ray.
///
/// Orthonormal, without the Condon-Shortley phase. Per point the encoding
/// holds the zonal terms `Y_l^0` for `l = 0..=max_degree` followed by the
/// cosine sectoral terms `Y_l^l` for `l = 1..=max_degree`; with
/// `sine_sectoral` the matching `sin(l phi)` sectoral terms follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SphericalConfig {
    pub max_degree: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub sine_sectoral: bool,
}

impl Default for SphericalConfig {
    fn default() -> Self {
        Self { max_degree: 4, sine_sectoral: false }
    }
}

impl SphericalConfig {
    pub fn per_point_dim(&self) -> usize {
        let sectoral = self.max_degree * if self.sine_sectoral { 2 } else { 1 };
        self.max_degree + 1 + sectoral
    }

    pub fn output_dim(&self) -> usize {
        2 * self.per_point_dim()
    }
}

/// `(2l - 1)!!`, with `(-1)!! = 1`.
fn double_factorial_odd(l: usize) -> f64 {
    (1..=l).map(|k| (2 * k - 1) as f64).product()
}

/// `(2l)!`.
fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Harmonics at one point, appended to `out`.
pub fn sh_point(theta: f64, phi: f64, config: &SphericalConfig, out: &mut Vec<f64>) {
    let x = theta.cos();
    let s = theta.sin();
    let lmax = config.max_degree;
    // Legendre polynomials by Bonnet's recurrence
    let (mut p_prev, mut p) = (1.0, x);
    for l in 0..=lmax {
        let pl = match l {
            0 => 1.0,
            1 => x,
            _ => {
                let next = ((2 * l - 1) as f64 * x * p - (l - 1) as f64 * p_prev) / l as f64;
                p_prev = p;
                p = next;
                next
            }
        };
        out.push(((2 * l + 1) as f64 / (4.0 * PI)).sqrt() * pl);
    }
    let sectoral_norm = |l: usize| {
        // sqrt(2 (2l+1)/(4 pi) / (2l)!) * (2l-1)!!
        (2.0 * (2 * l + 1) as f64 / (4.0 * PI) / factorial(2 * l)).sqrt() * double_factorial_odd(l)
    };
    for l in 1..=lmax {
        out.push(sectoral_norm(l) * s.powi(l as i32) * (l as f64 * phi).cos());
    }
    if config.sine_sectoral {
        for l in 1..=lmax {
            out.push(sectoral_norm(l) * s.powi(l as i32) * (l as f64 * phi).sin());
        }
    }
}

/// `[Y(theta1, phi1) || Y(theta2, phi2)]`.
pub fn sh_encode(coords: &[f64; 4], config: &SphericalConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.output_dim());
    sh_point(coords[0], coords[1], config, &mut out);
    sh_point(coords[2], coords[3], config, &mut out);
    out
}

/// Standard deviation of the camera embedding initialisation.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// One learnable vector per training view.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraEmbeddingTable<T> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> CameraEmbeddingTable<T> {
    /// Rows drawn from a normal with standard deviation 0.02, truncated at
    /// two standard deviations.
    pub fn init(views: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self { weights: truncated_normal(views, dim, EMBEDDING_INIT_STD, rng) }
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn embed(&self, view_id: usize) -> Result<&[T]> {
        embed_camera(&self.weights, view_id)
    }
}

/// Row `view_id` of an embedding table.
pub fn embed_camera<T: Scalar>(table: &Tensor<T>, view_id: usize) -> Result<&[T]> {
    if view_id >= table.rows() {
        return Err(Error::UnknownView { view_id, rows: table.rows() });
    }
    Ok(table.row(view_id))
}

/// Normal samples resampled until they fall within two standard deviations.
pub fn truncated_normal<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid standard deviation");
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::lit(x);
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}
