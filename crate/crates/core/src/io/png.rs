//! 8-bit RGB PNG export and import for display-ready images.

use std::path::Path;

use crate::{Error, Result};

/// Writes `width * height * 3` values in [0, 1] as an 8-bit RGB PNG.
/// Values are clamped and rounded to the nearest code.
pub fn save_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {width}x{height}x3",
            rgb.len()
        )));
    }
    let bytes: Vec<u8> = rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Format(format!("{}: png encode: {e}", path.display())))
}

/// Loads a PNG as RGB values scaled to [0, 1].
pub fn load_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: png decode: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok((w as usize, h as usize, data))
}
