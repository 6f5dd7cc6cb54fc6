use std::path::Path;

use crate::error::{Error, Result};
use crate::io::tensor::{read_tensor, write_tensor};

/// Dense `height × width × channels` activation grid, row-major `[h][w][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::dim(format!(
                "{height}x{width}x{channels} map needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[self.offset(y, x, c)]
    }

    /// The `channels` activations at one grid cell.
    pub fn column(&self, y: usize, x: usize) -> &[f64] {
        let start = self.offset(y, x, 0);
        &self.values[start..start + self.channels]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let tensor = read_tensor(path)?;
        match tensor.shape.as_slice() {
            &[h, w, c] => Self::new(
                h,
                w,
                c,
                tensor.values.iter().map(|&v| f64::from(v)).collect(),
            ),
            other => Err(Error::dim(format!(
                "feature map must have rank 3, found shape {other:?}"
            ))),
        }
    }

    /// Writes the map as a float32 tensor file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let values: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        write_tensor(path, &[self.height, self.width, self.channels], &values)
    }
}
