use std::io::Cursor;

use image::{GrayImage, ImageFormat, RgbImage};

/// Overlay colors by class id: IRF red, SRF green, PED blue.
pub const CLASS_COLORS: [(u8, [u8; 3]); 3] = [(1, [255, 0, 0]), (2, [0, 255, 0]), (3, [0, 0, 255])];

pub fn class_color(class_id: u8) -> Option<[u8; 3]> {
    CLASS_COLORS.iter().find(|(c, _)| *c == class_id).map(|(_, rgb)| *rgb)
}

/// Intensities in `[0, 1]` to 8-bit gray.
pub fn gray_u8(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn gray_image(pixels: &[u8], width: usize, height: usize) -> image::ImageResult<GrayImage> {
    GrayImage::from_raw(width as u32, height as u32, pixels.to_vec()).ok_or_else(|| {
        image::ImageError::Parameter(image::error::ParameterError::from_kind(
            image::error::ParameterErrorKind::DimensionMismatch,
        ))
    })
}

pub fn encode_png(pixels: &[u8], width: usize, height: usize) -> image::ImageResult<Vec<u8>> {
    let img = gray_image(pixels, width, height)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Gray slice with labelled pixels blended towards their class color.
pub fn overlay(gray: &[u8], labels: &[u8], width: usize, height: usize, alpha: f32) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        let g = gray[i] as f32;
        match class_color(labels[i]) {
            Some(rgb) => image::Rgb(rgb.map(|c| (g * (1.0 - alpha) + c as f32 * alpha).round() as u8)),
            None => image::Rgb([gray[i]; 3]),
        }
    })
}
