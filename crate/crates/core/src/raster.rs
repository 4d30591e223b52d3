//! Floating-point RGB images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image, three interleaved channels per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape("Image::new", 3 * width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Averages `factor × factor` blocks; trailing rows/columns that do not
    /// fill a block are dropped.
    pub fn downscale(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("downscale factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "downscale factor {factor} too large for {}x{} image",
                self.width, self.height
            )));
        }
        let norm = 1.0 / (factor * factor) as f64;
        Ok(Self::from_fn(w, h, |x, y| {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.get(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            acc.map(|v| v * norm)
        }))
    }

    /// Decodes a PNG, compositing any alpha channel onto `background`.
    pub fn load_png(path: &Path, background: [f64; 3]) -> Result<Self> {
        let img = image::open(path)?.into_rgba8();
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity(3 * (w * h) as usize);
        for px in img.pixels() {
            let a = px[3] as f64 / 255.0;
            for c in 0..3 {
                data.push(px[c] as f64 / 255.0 * a + background[c] * (1.0 - a));
            }
        }
        Self::new(w as usize, h as usize, data)
    }

    /// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.to_rgb8();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        Ok(())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}
