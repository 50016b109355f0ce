//! RGB float images, 8-bit PNG export and a raw float dump.
//!
//! Float dump layout (little-endian): magic `SPFD`, then `u32` height, width
//! and channel count, then `H·W·C` `f32` values in row-major, channel-last
//! order.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::rasterizer::RenderOutput;
use crate::real::Real;

pub const FLOAT_DUMP_MAGIC: &[u8; 4] = b"SPFD";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("buffer holds {got} values, expected {want}")]
    Length { got: usize, want: usize },
    #[error("float dump: {0}")]
    Dump(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Three-channel linear image in `[0,1]`, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let want = width * height * 3;
        if data.len() != want {
            return Err(ImageError::Length { got: data.len(), want });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height * 3],
        }
    }

    pub fn from_render<T: Real>(r: &RenderOutput<T>) -> Self {
        Self {
            width: r.width,
            height: r.height,
            data: r.rgb.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = 3 * (y * self.width + x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Per-pixel channel mean.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks(3)
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
            .collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        Self { data, ..*self }
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::Shape(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn write_float_dump(&self, path: &Path) -> Result<()> {
        write_float_dump(path, self.height, self.width, 3, &self.data)
    }

    pub fn read_float_dump(path: &Path) -> Result<Self> {
        let (h, w, c, data) = read_float_dump(path)?;
        if c != 3 {
            return Err(ImageError::Dump(format!("expected 3 channels, found {c}")));
        }
        Self::new(w, h, data)
    }
}

pub fn encode_float_dump(h: usize, w: usize, c: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != h * w * c {
        return Err(ImageError::Length {
            got: data.len(),
            want: h * w * c,
        });
    }
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(FLOAT_DUMP_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_float_dump(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..4] != FLOAT_DUMP_MAGIC {
        return Err(ImageError::Dump("missing magic".into()));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(4), dim(8), dim(12));
    let n = h * w * c;
    if bytes.len() != 16 + 4 * n {
        return Err(ImageError::Dump(format!("{}x{}x{} needs {} payload bytes, found {}", h, w, c, 4 * n, bytes.len() - 16)));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((h, w, c, data))
}

pub fn write_float_dump(path: &Path, h: usize, w: usize, c: usize, data: &[f32]) -> Result<()> {
    fs::write(path, encode_float_dump(h, w, c, data)?)?;
    Ok(())
}

pub fn read_float_dump(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    decode_float_dump(&fs::read(path)?)
}
