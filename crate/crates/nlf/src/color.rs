//! sRGB transfer function and the stored 8-bit domain.

use std::sync::OnceLock;

use nlf_core::image::Image;

/// Linear value of an 8-bit sRGB code.
pub fn srgb8_to_linear(code: u8) -> f32 {
    static LUT: OnceLock<[f32; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [0.0; 256];
        for (i, v) in lut.iter_mut().enumerate() {
            *v = decode(i as f64 / 255.0) as f32;
        }
        lut
    })[code as usize]
}

/// Nearest 8-bit sRGB code of a linear value; inputs are clamped to `[0, 1]`.
pub fn linear_to_srgb8(value: f32) -> u8 {
    let v = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) as f64 };
    (encode(v) * 255.0).round() as u8
}

pub fn encode(linear: f64) -> f64 {
    if linear <= 0.003_130_8 {
        12.92 * linear
    } else {
        1.055 * linear.powf(1.0 / 2.4) - 0.055
    }
}

pub fn decode(srgb: f64) -> f64 {
    if srgb <= 0.040_45 {
        srgb / 12.92
    } else {
        ((srgb + 0.055) / 1.055).powf(2.4)
    }
}

/// 8-bit sRGB codes scaled to `[0, 1]`: the values a PNG stores. Metrics
/// are computed on this representation.
pub fn stored(img: &Image) -> Image {
    Image { data: img.data.iter().map(|&v| linear_to_srgb8(v) as f32 / 255.0).collect(), ..img.clone() }
}

/// Linear image after a round trip through 8-bit sRGB, i.e. what loading
/// the saved PNG gives back.
pub fn quantize(img: &Image) -> Image {
    Image { data: img.data.iter().map(|&v| srgb8_to_linear(linear_to_srgb8(v))).collect(), ..img.clone() }
}
