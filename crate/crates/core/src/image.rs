use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image, values in `[0, 1]`, stored row-major with channels last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim("image", format!("{height}x{width}x3 needs {} values", height * width * 3)));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let o = (v * self.width + u) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let o = (v * self.width + u) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Box-filter downsampling by an integer `factor`, channels last.
    pub fn avg_pool(&self, factor: usize) -> Vec<f64> {
        avg_pool(&self.data, self.height, self.width, 3, factor)
    }
}

pub fn avg_pool(data: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; oh * ow * c];
    let inv = 1.0 / (f * f) as f64;
    for y in 0..h {
        for x in 0..w {
            let o = ((y / f) * ow + x / f) * c;
            for j in 0..c {
                out[o + j] += data[(y * w + x) * c + j] * inv;
            }
        }
    }
    out
}
