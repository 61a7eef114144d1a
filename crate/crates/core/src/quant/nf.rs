//! NormalFloat quantization: a non-uniform codebook built from Gaussian
//! quantiles, with an exact zero and ±1 endpoints.
//!
//! The construction follows the QLoRA recipe: quantiles of the positive and
//! negative halves are computed separately (2^(b-1) positive levels,
//! 2^(b-1) - 1 negative levels, plus zero), then the whole set is divided
//! by its maximum so the endpoints land exactly on ±1. Groups store only a
//! per-group absmax.

use alloc::vec::Vec;

use crate::math::inverse_normal_cdf;
use crate::tensor::Matrix;

use super::grid::{check_bits, pack_codes};
use super::{GridKind, QuantError, QuantizedLinear};

/// Quantile offset from the QLoRA construction.
const QUANTILE_OFFSET: f64 = 0.9677083;

/// Sorted codebook of `2^bits` levels in `[-1, 1]`.
pub fn codebook(bits: u8) -> Result<Vec<f32>, QuantError> {
    check_bits(bits)?;
    let half = 1usize << (bits - 1);

    // `count` evenly spaced quantiles from the offset down toward 0.5,
    // excluding 0.5 itself.
    let quantiles = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|i| {
                let t = i as f64 / count as f64;
                QUANTILE_OFFSET + t * (0.5 - QUANTILE_OFFSET)
            })
            .collect()
    };

    let mut levels: Vec<f64> = Vec::with_capacity(1 << bits);
    for q in quantiles(half) {
        levels.push(inverse_normal_cdf(q));
    }
    levels.push(0.0);
    for q in quantiles(half - 1) {
        levels.push(-inverse_normal_cdf(q));
    }
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let max = levels.last().copied().unwrap();
    Ok(levels.into_iter().map(|v| (v / max) as f32).collect())
}

/// Index of the nearest codebook level, ties resolved to the lower index.
#[inline]
pub fn nearest_level(levels: &[f32], w: f32) -> u8 {
    // Levels are sorted; find the insertion point, then compare neighbors.
    let idx = levels.partition_point(|&l| l < w);
    if idx == 0 {
        return 0;
    }
    if idx == levels.len() {
        return (levels.len() - 1) as u8;
    }
    let lo = levels[idx - 1];
    let hi = levels[idx];
    // Strict inequality keeps the lower index on ties.
    if (w - lo) <= (hi - w) {
        (idx - 1) as u8
    } else {
        idx as u8
    }
}

/// Codebook quantization of a matrix with per-group absmax normalization.
pub fn nf_quantize(w: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedLinear, QuantError> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(QuantError::BadGroupSize(group_size));
    }
    let levels = codebook(bits)?;
    let zero_code = levels
        .iter()
        .position(|&l| l == 0.0)
        .expect("codebook contains zero") as u8;

    let (rows, cols) = (w.rows(), w.cols());
    let n_groups = cols.div_ceil(group_size);
    let mut absmax = Vec::with_capacity(rows * n_groups);
    let mut codes = alloc::vec![0u8; rows * cols];
    for r in 0..rows {
        let row = w.row(r);
        for g in 0..n_groups {
            let lo = g * group_size;
            let hi = (lo + group_size).min(cols);
            let mut amax = 0.0f32;
            for &v in &row[lo..hi] {
                amax = amax.max(v.abs());
            }
            if amax == 0.0 {
                for c in lo..hi {
                    codes[r * cols + c] = zero_code;
                }
            } else {
                for c in lo..hi {
                    codes[r * cols + c] = nearest_level(&levels, row[c] / amax);
                }
            }
            absmax.push(amax);
        }
    }
    Ok(QuantizedLinear {
        bits,
        group_size,
        rows,
        cols,
        grid: GridKind::Codebook { absmax, levels },
        packed: pack_codes(&codes, bits, cols),
        awq_scales: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn codebook_shape_and_endpoints() {
        for bits in [3u8, 4] {
            let cb = codebook(bits).unwrap();
            assert_eq!(cb.len(), 1 << bits);
            assert_eq!(cb[0], -1.0);
            assert_eq!(*cb.last().unwrap(), 1.0);
            assert_eq!(cb.iter().filter(|&&v| v == 0.0).count(), 1);
            for pair in cb.windows(2) {
                assert!(pair[0] < pair[1], "not strictly increasing: {cb:?}");
            }
        }
    }

    #[test]
    fn four_bit_codebook_matches_published_nf4_levels() {
        // Reference levels from the bitsandbytes NF4 data type.
        let reference: [f32; 16] = [
            -1.0,
            -0.696_192_8,
            -0.525_073_05,
            -0.394_917_5,
            -0.284_441_38,
            -0.184_773_43,
            -0.091_050_036,
            0.0,
            0.079_580_3,
            0.160_930_2,
            0.246_112_3,
            0.337_915_24,
            0.440_709_83,
            0.562_617,
            0.722_956_84,
            1.0,
        ];
        let cb = codebook(4).unwrap();
        for (a, b) in cb.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 2e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_weight_dequantizes_to_zero() {
        let w = Matrix::from_vec(1, 4, vec![0.5, 0.0, -0.7, 0.3]);
        let q = nf_quantize(&w, 4, 4).unwrap();
        assert_eq!(q.dequantize().get(0, 1), 0.0);
    }

    #[test]
    fn absmax_element_is_exact() {
        let w = Matrix::from_vec(1, 4, vec![0.5, 0.1, -0.7, 0.3]);
        let q = nf_quantize(&w, 4, 4).unwrap();
        assert_eq!(q.dequantize().get(0, 2), -0.7);

        let w = Matrix::from_vec(1, 3, vec![0.5, 0.9, -0.7]);
        let q = nf_quantize(&w, 3, 3).unwrap();
        assert_eq!(q.dequantize().get(0, 1), 0.9);
    }

    #[test]
    fn zero_group_reconstructs_exactly() {
        let w = Matrix::zeros(2, 8);
        let q = nf_quantize(&w, 4, 4).unwrap();
        assert_eq!(q.dequantize().data(), w.data());
        match &q.grid {
            GridKind::Codebook { absmax, .. } => assert!(absmax.iter().all(|&a| a == 0.0)),
            _ => panic!("wrong grid kind"),
        }
    }

    #[test]
    fn nearest_matches_exhaustive_search() {
        let levels = codebook(4).unwrap();
        let mut rng = crate::rng::SeededRng::new(5);
        for _ in 0..2000 {
            let w = (rng.uniform() * 2.2 - 1.1) as f32;
            let got = nearest_level(&levels, w);
            // Brute force with ties to the lower index.
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for (i, &l) in levels.iter().enumerate() {
                let d = (w - l).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(got as usize, best, "w={w}");
        }
    }

    #[test]
    fn tie_breaks_to_lower_index() {
        // Synthetic levels with an exact midpoint tie.
        let levels = [-1.0f32, 0.0, 1.0];
        assert_eq!(nearest_level(&levels, 0.5), 1);
        assert_eq!(nearest_level(&levels, -0.5), 0);
    }
}
