//! PNG and raw float image files.
//!
//! Color PNGs hold 8-bit sRGB and load as linear floats. Float maps are a
//! small binary format: the magic `NLFMAP01`, then width, height and
//! channel count as little-endian `u32`, then the samples as little-endian
//! `f32`, row-major and channel-interleaved.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use nlf_core::image::Image;
use nlf_core::render::FLAG_COLOR;

use crate::color::{linear_to_srgb8, srgb8_to_linear};
use crate::error::{io, Error, Result};

const MAP_MAGIC: &[u8; 8] = b"NLFMAP01";

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

/// Reads an 8-bit PNG (grey, grey-alpha, RGB or RGBA) as linear RGB.
pub fn read_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| image_error(path, e))?;
    if decoded.color().bytes_per_pixel() / decoded.color().channel_count() != 1 {
        return Err(image_error(path, "only 8-bit images are supported"));
    }
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| srgb8_to_linear(b)).collect();
    Ok(Image { width: w as usize, height: h as usize, channels: 3, data })
}

/// Writes a linear RGB image as 8-bit sRGB.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(image_error(path, format!("expected 3 channels, found {}", img.channels)));
    }
    let bytes = img.data.iter().map(|&v| linear_to_srgb8(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches image size");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Writes `values` (one or three channels) mapped from `[lo, hi]` to
/// `[0, 255]` with no transfer curve. Flagged pixels are painted
/// [`FLAG_COLOR`].
pub fn write_preview(path: &Path, img: &Image, lo: f32, hi: f32, flagged: Option<&[bool]>) -> Result<()> {
    let scale = |v: f32| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
    let n = img.width * img.height;
    let mut bytes = Vec::with_capacity(n * 3);
    for i in 0..n {
        if flagged.is_some_and(|f| f[i]) {
            bytes.extend(FLAG_COLOR.map(|c| (c * 255.0) as u8));
        } else if img.channels == 1 {
            bytes.extend([scale(img.data[i]); 3]);
        } else if img.channels == 3 {
            bytes.extend((0..3).map(|c| scale(img.data[i * 3 + c])));
        } else {
            return Err(image_error(path, format!("cannot preview {} channels", img.channels)));
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches image size");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Writes a single-channel image as an 8-bit grey PNG with no transfer curve.
pub fn write_grey(path: &Path, img: &Image, lo: f32, hi: f32) -> Result<()> {
    let bytes = img.data.iter().map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches image size");
    buf.save(path).map_err(|e| image_error(path, e))
}

pub fn write_float_map(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + img.data.len() * 4);
    bytes.extend_from_slice(MAP_MAGIC);
    for v in [img.width, img.height, img.channels] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io(path))
}

pub fn read_float_map(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io(path))?;
    let bad = |m: &str| image_error(path, m);
    if bytes.len() < 20 || &bytes[..8] != MAP_MAGIC {
        return Err(bad("not a float map"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (width, height, channels) = (word(0), word(1), word(2));
    let body = &bytes[20..];
    if body.len() != width * height * channels * 4 {
        return Err(bad("size does not match header"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image { width, height, channels, data })
}
