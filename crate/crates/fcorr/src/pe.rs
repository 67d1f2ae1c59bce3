//! 2-D sinusoidal positional encodings.
//!
//! Half the channels encode x, half encode y; within each half the usual
//! geometric frequency schedule applies: pe[2k] = sin(p / T^(2k/D')),
//! pe[2k+1] = cos(p / T^(2k/D')) with D' = dim/2 and T = 10000.
//! Coordinates are in cell units of whatever grid the tokens live on, so
//! query encodings and feature-token encodings share one scale.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEMPERATURE: f64 = 10000.0;

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Invalid(format!(
            "positional encoding dim must be a positive multiple of 4, got {}",
            dim
        )));
    }
    Ok(())
}

/// Encoding of a single continuous (x, y) position into `dim` values.
pub fn encode_xy(x: f64, y: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for (offset, p) in [(0, x), (half, y)] {
        let mut k = 0;
        while 2 * k < half {
            let freq = TEMPERATURE.powf(-((2 * k) as f64) / half as f64);
            out[offset + 2 * k] = (p * freq).sin();
            out[offset + 2 * k + 1] = (p * freq).cos();
            k += 1;
        }
    }
}

/// Encodings for a list of positions; shape (n, dim).
pub fn encode_points(points: &[(f64, f64)], dim: usize) -> Result<Tensor> {
    check_dim(dim)?;
    let mut data = vec![0.0; points.len() * dim];
    for (i, &(x, y)) in points.iter().enumerate() {
        encode_xy(x, y, dim, &mut data[i * dim..(i + 1) * dim]);
    }
    Tensor::from_vec(&[points.len(), dim], data)
}

/// Encodings for every cell center of an (h, w) grid, row-major;
/// shape (h*w, dim). Cell (r, c) sits at (c + 0.5, r + 0.5).
pub fn encode_grid(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    check_dim(dim)?;
    let mut data = vec![0.0; h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            encode_xy(c as f64 + 0.5, r as f64 + 0.5, dim, &mut data[i * dim..(i + 1) * dim]);
        }
    }
    Tensor::from_vec(&[h * w, dim], data)
}
