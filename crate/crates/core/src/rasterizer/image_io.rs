//! PNG and raw float image files.
//!
//! The raw dump is `"R3IM"`, `u32 width`, `u32 height`, then row-major RGB as
//! little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"R3IM";

/// Row-major RGB image with values nominally in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Format(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        Ok(Self { width, height, data })
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let o = (y as usize * width + x as usize) * 3;
        Rgb([to_u8(rgb[o]), to_u8(rgb[o + 1]), to_u8(rgb[o + 2])])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<RgbBuffer> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    RgbBuffer::new(w, h, data)
}

/// 8-bit quantization as stored by [`save_png`].
pub fn quantize(rgb: &[f64]) -> Vec<f64> {
    rgb.iter().map(|&v| to_u8(v) as f64 / 255.0).collect()
}

pub fn write_raw<W: Write>(mut w: W, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    w.write_all(RAW_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    for v in rgb {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw<R: Read>(mut r: R) -> Result<RgbBuffer> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RAW_MAGIC {
        return Err(Error::Format("not a raw float image".into()));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    let width = u32::from_le_bytes(u) as usize;
    r.read_exact(&mut u)?;
    let height = u32::from_le_bytes(u) as usize;
    let mut data = Vec::with_capacity(width * height * 3);
    for _ in 0..width * height * 3 {
        r.read_exact(&mut u)?;
        data.push(f32::from_le_bytes(u) as f64);
    }
    RgbBuffer::new(width, height, data)
}

pub fn save_raw(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_raw(f, width, height, rgb)
}

pub fn load_raw(path: &Path) -> Result<RgbBuffer> {
    read_raw(std::io::BufReader::new(std::fs::File::open(path)?))
}
