//! Multi-channel float images.
//!
//! Pixel `(x, y)` sits at integer coordinates; a sample at sub-pixel
//! position interpolates the four surrounding pixel centers.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

/// Row-major, channel-interleaved image of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Value at integer coordinates, zero outside the image.
    pub fn get_padded(&self, x: isize, y: isize, c: usize) -> f32 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0.0
        } else {
            self.data[(y as usize * self.width + x as usize) * self.channels + c]
        }
    }

    /// The four pixels around `(x, y)` with their bilinear weights.
    ///
    /// Coordinates are clamped to the image; a point exactly on a pixel
    /// center gets weight one on that pixel.
    pub fn bilinear_taps(&self, x: f64, y: f64) -> [(usize, usize, f64); 4] {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ]
    }

    /// Bilinear sample of every channel.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (px, py, w) in self.bilinear_taps(x, y) {
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.pixel(px, py)) {
                *o += w * v as f64;
            }
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}
