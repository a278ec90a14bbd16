//! Image quality metrics and the evaluation report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for a peak value of one, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the positions where the whole window
/// fits inside the image.
fn filter_valid(src: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * src[y * width + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// data range one, averaged over channels. Only windows lying entirely
/// inside the image contribute.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: a.width, height: a.height, window: SSIM_WINDOW });
    }
    let w = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = a.width * a.height;
    let mut total = 0.0;
    for c in 0..a.channels {
        let x: Vec<f64> = (0..n).map(|i| a.data[i * a.channels + c] as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| b.data[i * b.channels + c] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, mxx, myy, mxy] =
            [&x, &y, &xx, &yy, &xy].map(|s| filter_valid(s, a.width, a.height, &w));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / a.channels as f64)
}

/// Geometric mean of `10^(-psnr/10)`, `sqrt(1 - ssim)` and, when given,
/// LPIPS.
pub fn avg_metric(psnr_db: f64, ssim: f64, lpips: Option<f64>) -> f64 {
    let e = 10f64.powf(-psnr_db / 10.0);
    let s = (1.0 - ssim).max(0.0).sqrt();
    match lpips {
        Some(l) => (e * s * l).cbrt(),
        None => (e * s).sqrt(),
    }
}

/// Scores of one rendered image.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

impl ImageScore {
    pub fn evaluate(name: impl Into<String>, rendered: &Image, truth: &Image) -> Result<Self> {
        Ok(Self { name: name.into(), psnr: psnr(rendered, truth)?, ssim: ssim(rendered, truth)?, lpips: None })
    }

    pub fn avg(&self) -> f64 {
        avg_metric(self.psnr, self.ssim, self.lpips)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|s| s.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|s| s.ssim))
    }

    /// Mean LPIPS, present only when every image has one.
    pub fn mean_lpips(&self) -> Option<f64> {
        let all: Option<Vec<f64>> = self.images.iter().map(|s| s.lpips).collect();
        all.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
    }

    /// Summary average computed from the mean scores.
    pub fn avg(&self) -> f64 {
        avg_metric(self.mean_psnr(), self.mean_ssim(), self.mean_lpips())
    }

    /// Attaches externally computed LPIPS values in image order.
    pub fn set_lpips(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.images.len() {
            return Err(Error::ShapeMismatch(format!("{} LPIPS values for {} images", values.len(), self.images.len())));
        }
        for (s, &v) in self.images.iter_mut().zip(values) {
            s.lpips = Some(v);
        }
        Ok(())
    }

    /// Plain-text table, one row per image and a final mean row. The
    /// `avg` column is marked `*` when LPIPS is missing and the average
    /// only combines PSNR and SSIM.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>8} {:>9}", "image", "psnr", "ssim", "lpips", "avg");
        let lp = |l: Option<f64>| l.map_or_else(|| String::from("-"), |v| format!("{v:.4}"));
        let mark = |l: Option<f64>| if l.is_some() { " " } else { "*" };
        for s in &self.images {
            let _ = writeln!(
                out,
                "{:<24} {:>8.3} {:>8.4} {:>8} {:>8.5}{}",
                s.name, s.psnr, s.ssim, lp(s.lpips), s.avg(), mark(s.lpips)
            );
        }
        let l = self.mean_lpips();
        let _ = writeln!(
            out,
            "{:<24} {:>8.3} {:>8.4} {:>8} {:>8.5}{}",
            "mean", self.mean_psnr(), self.mean_ssim(), lp(l), self.avg(), mark(l)
        );
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}
