//! PFM images: 32-bit float, 1 or 3 channels, scanlines stored bottom-up
//! with the scale field's sign encoding byte order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major top-down, `width * height * channels` values.
    pub data: Vec<f64>,
}

impl PfmImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<PfmImage> {
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("pfm supports 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(PfmImage { width, height, channels, data })
    }
}

pub fn save_pfm(image: &PfmImage, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let magic = if image.channels == 3 { "PF" } else { "Pf" };
    write!(w, "{magic}\n{} {}\n-1.0\n", image.width, image.height)?;
    let row_len = image.width * image.channels;
    for row in (0..image.height).rev() {
        for v in &image.data[row * row_len..(row + 1) * row_len] {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads one whitespace-terminated header token.
fn token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse(format!("{}: truncated pfm header", path.display())));
    }
    let t = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
    // Consume the single whitespace byte that terminates the token.
    if *pos < bytes.len() {
        *pos += 1;
    }
    Ok(t)
}

pub fn load_pfm(path: &Path) -> Result<PfmImage> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = token(&bytes, &mut pos, path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Parse(format!("{}: bad pfm magic {other:?}", path.display()))),
    };
    let parse = |t: &str, what: &str| -> Result<f64> {
        t.parse::<f64>()
            .map_err(|_| Error::Parse(format!("{}: bad pfm {what} {t:?}", path.display())))
    };
    let width = parse(&token(&bytes, &mut pos, path)?, "width")? as usize;
    let height = parse(&token(&bytes, &mut pos, path)?, "height")? as usize;
    let scale = parse(&token(&bytes, &mut pos, path)?, "scale")?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(Error::Parse(format!("{}: degenerate pfm dimensions or scale", path.display())));
    }
    let little_endian = scale < 0.0;
    let gain = scale.abs();

    let need = width * height * channels * 4;
    let body = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Parse(format!(
            "{}: payload truncated: need {need} bytes, have {}",
            path.display(),
            bytes.len().saturating_sub(pos)
        ))
    })?;
    let row_len = width * channels;
    let mut data = vec![0.0f64; width * height * channels];
    for (file_row, chunk) in body.chunks_exact(row_len * 4).enumerate() {
        let row = height - 1 - file_row;
        for (c, raw) in chunk.chunks_exact(4).enumerate() {
            let arr: [u8; 4] = raw.try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(arr)
            } else {
                f32::from_be_bytes(arr)
            };
            data[row * row_len + c] = v as f64 * gain;
        }
    }
    PfmImage::new(width, height, channels, data)
}
