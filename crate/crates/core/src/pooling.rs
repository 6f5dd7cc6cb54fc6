//! Stride-1 max pooling at 2×2 and 3×3 and extraction of column features.
//!
//! A column feature is the vector of all channel activations at one cell of a
//! pooled map. Column sets from the selected kernels are concatenated, the
//! 2×2 block first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum PoolingMode {
    #[serde(rename = "2x2")]
    Two,
    #[serde(rename = "3x3")]
    Three,
    #[default]
    #[serde(rename = "both")]
    Both,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 3] = [PoolingMode::Two, PoolingMode::Three, PoolingMode::Both];

    pub fn kernels(self) -> &'static [usize] {
        match self {
            PoolingMode::Two => &[2],
            PoolingMode::Three => &[3],
            PoolingMode::Both => &[2, 3],
        }
    }

    pub fn min_side(self) -> usize {
        *self.kernels().iter().max().unwrap()
    }

    /// Number of column features produced for an `height × width` map.
    pub fn column_count(self, height: usize, width: usize) -> usize {
        self.kernels()
            .iter()
            .map(|&k| (height + 1).saturating_sub(k) * (width + 1).saturating_sub(k))
            .sum()
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Two => "2x2",
            PoolingMode::Three => "3x3",
            PoolingMode::Both => "both",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2x2" => Ok(PoolingMode::Two),
            "3x3" => Ok(PoolingMode::Three),
            "both" => Ok(PoolingMode::Both),
            other => Err(Error::Config(format!(
                "unknown pooling mode {other:?} (expected 2x2, 3x3 or both)"
            ))),
        }
    }
}

/// Where a column came from: pooling kernel and cell of the pooled grid.
/// Kernel 1 marks a column read directly from an unpooled map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSource {
    pub kernel: usize,
    pub y: usize,
    pub x: usize,
}

/// `count × dim` matrix of column features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnFeatureSet {
    count: usize,
    dim: usize,
    values: Vec<f64>,
    /// Per-row origin; empty for sets not built from a feature map.
    provenance: Vec<ColumnSource>,
}

impl ColumnFeatureSet {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::dim(format!(
                "{} values do not form a non-empty matrix with {dim} columns",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            count: values.len() / dim,
            dim,
            values,
            provenance: Vec::new(),
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::dim("rows have different lengths"));
        }
        Self::new(
            dim,
            rows.iter()
                .flat_map(|r| r.as_ref().iter().copied())
                .collect(),
        )
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn provenance(&self) -> &[ColumnSource] {
        &self.provenance
    }

    /// Appends the rows of `other`. Provenance is kept only when both sides
    /// carry it.
    pub fn concat(mut self, other: ColumnFeatureSet) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::dim(format!(
                "cannot concatenate column sets of dim {} and {}",
                self.dim, other.dim
            )));
        }
        let keep = !self.provenance.is_empty() && !other.provenance.is_empty();
        self.count += other.count;
        self.values.extend(other.values);
        if keep {
            self.provenance.extend(other.provenance);
        } else {
            self.provenance.clear();
        }
        Ok(self)
    }
}

fn check_kernel(map: &FeatureMap, kernel: usize) -> Result<()> {
    if kernel == 0 {
        return Err(Error::dim("pooling kernel must be positive"));
    }
    if map.height() < kernel || map.width() < kernel {
        return Err(Error::dim(format!(
            "{}x{} map is smaller than the {kernel}x{kernel} pooling window",
            map.height(),
            map.width()
        )));
    }
    Ok(())
}

/// Max pooling with stride 1. Also returns, for every output value, the flat
/// offset of its source cell in `map`; ties go to the first cell in row-major
/// window order.
pub fn max_pool_with_argmax(map: &FeatureMap, kernel: usize) -> Result<(FeatureMap, Vec<usize>)> {
    check_kernel(map, kernel)?;
    let out_h = map.height() - kernel + 1;
    let out_w = map.width() - kernel + 1;
    let channels = map.channels();
    let src = map.values();
    let mut values = Vec::with_capacity(out_h * out_w * channels);
    let mut argmax = Vec::with_capacity(out_h * out_w * channels);
    for y in 0..out_h {
        for x in 0..out_w {
            for c in 0..channels {
                let mut best_at = map.offset(y, x, c);
                let mut best = src[best_at];
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let at = map.offset(y + dy, x + dx, c);
                        if src[at] > best {
                            best = src[at];
                            best_at = at;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_at);
            }
        }
    }
    Ok((FeatureMap::new(out_h, out_w, channels, values)?, argmax))
}

pub fn max_pool(map: &FeatureMap, kernel: usize) -> Result<FeatureMap> {
    max_pool_with_argmax(map, kernel).map(|(pooled, _)| pooled)
}

fn columns_with_kernel(pooled: &FeatureMap, kernel: usize) -> ColumnFeatureSet {
    let provenance = (0..pooled.height())
        .flat_map(|y| (0..pooled.width()).map(move |x| ColumnSource { kernel, y, x }))
        .collect();
    ColumnFeatureSet {
        count: pooled.height() * pooled.width(),
        dim: pooled.channels(),
        values: pooled.values().to_vec(),
        provenance,
    }
}

/// One column per cell of `pooled`, in row-major scan order.
pub fn extract_columns(pooled: &FeatureMap) -> ColumnFeatureSet {
    columns_with_kernel(pooled, 1)
}

fn check_mode(map: &FeatureMap, mode: PoolingMode) -> Result<()> {
    let side = mode.min_side();
    if map.height() < side || map.width() < side {
        return Err(Error::dim(format!(
            "pooling mode {mode} needs a map of at least {side}x{side}, got {}x{}",
            map.height(),
            map.width()
        )));
    }
    Ok(())
}

pub fn multiscale_columns(map: &FeatureMap, mode: PoolingMode) -> Result<ColumnFeatureSet> {
    check_mode(map, mode)?;
    let mut blocks = mode
        .kernels()
        .iter()
        .map(|&k| max_pool(map, k).map(|pooled| columns_with_kernel(&pooled, k)));
    let first = blocks.next().expect("at least one kernel")?;
    blocks.try_fold(first, |acc, block| acc.concat(block?))
}

/// Routes `grad_columns` (shaped like the output of
/// [`multiscale_columns`]`(map, mode)`) back onto the cells of `map`.
pub fn multiscale_backward(
    map: &FeatureMap,
    mode: PoolingMode,
    grad_columns: &[f64],
) -> Result<FeatureMap> {
    check_mode(map, mode)?;
    let count = mode.column_count(map.height(), map.width());
    let channels = map.channels();
    if grad_columns.len() != count * channels {
        return Err(Error::dim(format!(
            "gradient has {} values, forward produced {count}x{channels}",
            grad_columns.len()
        )));
    }
    let mut grad = vec![0.0; map.values().len()];
    let mut offset = 0;
    for &kernel in mode.kernels() {
        let (_, argmax) = max_pool_with_argmax(map, kernel)?;
        let block = &grad_columns[offset..offset + argmax.len()];
        for (&src, &g) in argmax.iter().zip(block) {
            grad[src] += g;
        }
        offset += argmax.len();
    }
    FeatureMap::new(map.height(), map.width(), channels, grad)
}
