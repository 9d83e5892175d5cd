//! Dense row-major grids used throughout the pipeline.
//!
//! `Grid2` is a scalar field over (h, w); `Grid3` carries a channel vector
//! per cell, laid out as `(i * w + j) * c + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnarmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid2 {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(SnarmError::shape(
                format!("{}x{}={} values", h, w, h * w),
                format!("{} values", data.len()),
            ));
        }
        Ok(Grid2 { h, w, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.w + j]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid3 {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(SnarmError::shape(
                format!("{}x{}x{}={} values", h, w, c, h * w * c),
                format!("{} values", data.len()),
            ));
        }
        Ok(Grid3 { h, w, c, data })
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.w + j) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let base = (i * self.w + j) * self.c;
        &mut self.data[base..base + self.c]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.w + j) * self.c + k]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        &mut self.data[(i * self.w + j) * self.c + k]
    }

    /// Number of cells (h * w).
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-wise concatenation of two grids with equal spatial dims.
    pub fn concat_channels(a: &Grid3, b: &Grid3) -> Result<Grid3> {
        if a.h != b.h || a.w != b.w {
            return Err(SnarmError::shape(
                format!("{}x{}", a.h, a.w),
                format!("{}x{}", b.h, b.w),
            ));
        }
        let mut out = Grid3::zeros(a.h, a.w, a.c + b.c);
        for i in 0..a.h {
            for j in 0..a.w {
                let dst = out.cell_mut(i, j);
                dst[..a.c].copy_from_slice(a.cell(i, j));
                dst[a.c..].copy_from_slice(b.cell(i, j));
            }
        }
        Ok(out)
    }

    /// First `c_left` channels and the rest, as two new grids.
    pub fn split_channels(&self, c_left: usize) -> Result<(Grid3, Grid3)> {
        if c_left > self.c {
            return Err(SnarmError::shape(
                format!("split at <= {}", self.c),
                format!("{}", c_left),
            ));
        }
        let mut left = Grid3::zeros(self.h, self.w, c_left);
        let mut right = Grid3::zeros(self.h, self.w, self.c - c_left);
        for i in 0..self.h {
            for j in 0..self.w {
                let src = self.cell(i, j);
                left.cell_mut(i, j).copy_from_slice(&src[..c_left]);
                right.cell_mut(i, j).copy_from_slice(&src[c_left..]);
            }
        }
        Ok((left, right))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_roundtrips() {
        let a = Grid3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Grid3::from_vec(1, 2, 1, vec![9.0, 8.0]).unwrap();
        let cat = Grid3::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.c, 3);
        assert_eq!(cat.cell(0, 0), &[1.0, 2.0, 9.0]);
        let (l, r) = cat.split_channels(2).unwrap();
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn from_vec_rejects_bad_len() {
        assert!(Grid2::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Grid3::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
    }
}
