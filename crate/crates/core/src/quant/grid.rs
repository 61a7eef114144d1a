//! Asymmetric min-max uniform grids (round-to-nearest) and bit packing.
//!
//! Groups run along the input dimension of a weight matrix: row `r`'s
//! columns `[g*G, (g+1)*G)` share one `(scale, min)` pair. When the group
//! size does not divide the width, the final ragged group carries its own
//! parameters.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Matrix;

use super::{GridKind, QuantError, QuantizedLinear};

/// Number of codes per packed 32-bit word: 10 for 3-bit (2 pad bits),
/// 8 for 4-bit.
pub fn codes_per_word(bits: u8) -> usize {
    32 / bits as usize
}

/// Pack codes little-end first within each word, one row at a time, padding
/// each row to a whole word boundary.
pub fn pack_codes(codes: &[u8], bits: u8, cols: usize) -> Vec<u32> {
    assert_eq!(codes.len() % cols, 0);
    let cpw = codes_per_word(bits);
    let words_per_row = cols.div_ceil(cpw);
    let rows = codes.len() / cols;
    let mut out = vec![0u32; rows * words_per_row];
    for r in 0..rows {
        for c in 0..cols {
            let code = codes[r * cols + c] as u32;
            debug_assert!(code < (1 << bits));
            let word = r * words_per_row + c / cpw;
            let shift = (c % cpw) * bits as usize;
            out[word] |= code << shift;
        }
    }
    out
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(packed: &[u32], bits: u8, rows: usize, cols: usize) -> Vec<u8> {
    let cpw = codes_per_word(bits);
    let words_per_row = cols.div_ceil(cpw);
    assert_eq!(packed.len(), rows * words_per_row);
    let mask = (1u32 << bits) - 1;
    let mut out = vec![0u8; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let word = packed[r * words_per_row + c / cpw];
            let shift = (c % cpw) * bits as usize;
            out[r * cols + c] = ((word >> shift) & mask) as u8;
        }
    }
    out
}

/// Grid parameters for one group of values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub scale: f32,
    pub min: f32,
}

impl UniformGrid {
    /// Fit the asymmetric min-max grid with `levels` code points.
    pub fn fit(group: &[f32], levels: u32) -> Self {
        let mut mn = f32::INFINITY;
        let mut mx = f32::NEG_INFINITY;
        for &w in group {
            mn = mn.min(w);
            mx = mx.max(w);
        }
        let scale = if mx > mn {
            (mx - mn) / (levels - 1) as f32
        } else {
            // All-equal group: degenerate grid reconstructs the constant.
            0.0
        };
        Self { scale, min: mn }
    }

    /// Round one value to the grid. The ratio is formed in f64 so the
    /// rounding decision is exact; only storage stays f32.
    #[inline]
    pub fn encode(&self, w: f32, levels: u32) -> u8 {
        if self.scale == 0.0 {
            return 0;
        }
        let code = math::round((w as f64 - self.min as f64) / self.scale as f64);
        code.clamp(0.0, (levels - 1) as f64) as u8
    }

    #[inline]
    pub fn decode(&self, code: u8) -> f32 {
        code as f32 * self.scale + self.min
    }
}

pub(super) fn check_bits(bits: u8) -> Result<u32, QuantError> {
    // 2-bit is permitted for tests; the model-level spec validates {3, 4}.
    if !(2..=8).contains(&bits) {
        return Err(QuantError::UnsupportedBits(bits));
    }
    Ok(1u32 << bits)
}

/// Round-to-nearest quantization of a full matrix.
pub fn rtn_quantize(w: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedLinear, QuantError> {
    let levels = check_bits(bits)?;
    if group_size == 0 {
        return Err(QuantError::BadGroupSize(group_size));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let n_groups = cols.div_ceil(group_size);
    let mut scales = Vec::with_capacity(rows * n_groups);
    let mut mins = Vec::with_capacity(rows * n_groups);
    let mut codes = vec![0u8; rows * cols];
    for r in 0..rows {
        let row = w.row(r);
        for g in 0..n_groups {
            let lo = g * group_size;
            let hi = (lo + group_size).min(cols);
            let grid = UniformGrid::fit(&row[lo..hi], levels);
            for c in lo..hi {
                codes[r * cols + c] = grid.encode(row[c], levels);
            }
            scales.push(grid.scale);
            mins.push(grid.min);
        }
    }
    Ok(QuantizedLinear {
        bits,
        group_size,
        rows,
        cols,
        grid: GridKind::Uniform { scales, mins },
        packed: pack_codes(&codes, bits, cols),
        awq_scales: None,
    })
}
