//! Cell grids shared by scenes, masks and decoder outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-cell channel vectors, stored row-major and cell-contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        FeatureGrid {
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Mean channel vector over all cells.
    pub fn channel_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.channels];
        for c in 0..self.cells() {
            for (m, v) in mean.iter_mut().zip(self.cell(c)) {
                *m += v;
            }
        }
        let n = self.cells() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.channels == 0 {
            return Err(Error::InvalidData("feature grid has an empty dimension".into()));
        }
        if self.data.len() != self.rows * self.cols * self.channels {
            return Err(Error::ShapeMismatch {
                context: "feature grid",
                expected: format!("{} values", self.rows * self.cols * self.channels),
                got: format!("{} values", self.data.len()),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("feature grid"));
        }
        Ok(())
    }
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        BinaryMask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        BinaryMask { rows, cols, bits }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Compact `0`/`1` string, one character per cell.
    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(rows: usize, cols: usize, s: &str) -> Result<Self> {
        if s.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "mask bitmap",
                expected: format!("{} cells", rows * cols),
                got: format!("{} cells", s.len()),
            });
        }
        let bits = s
            .chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidData(format!("mask bitmap contains `{other}`"))),
            })
            .collect::<Result<_>>()?;
        Ok(BinaryMask { rows, cols, bits })
    }
}
