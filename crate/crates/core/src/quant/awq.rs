//! AWQ: activation-aware per-channel scaling ahead of grid quantization.
//!
//! For a weight group sharing one input, the search picks an exponent
//! `alpha` on the mean absolute activation per channel, scales weight
//! columns by `s_j = m_j^alpha`, RTN-quantizes the scaled weights, and
//! divides the inputs by `s` at run time (realized by folding `1/s` into
//! the producer of the input: an RMSNorm gamma or an upstream projection).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Matrix;

use super::grid::rtn_quantize;
use super::QuantError;

/// Floor applied to channel statistics before exponentiation.
const STAT_FLOOR: f64 = 1e-8;

/// Cap on calibration rows used inside the grid search; rows are strided,
/// not truncated, so the sample spans the whole calibration set.
const SEARCH_ROWS: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct AwqOptions {
    pub bits: u8,
    pub group_size: usize,
    /// Grid resolution g; candidates are alpha = k/g for k in 0..=g.
    pub grid_steps: usize,
}

/// Mean absolute activation per input channel.
pub fn channel_stats(calib: &Matrix) -> Vec<f64> {
    let n = calib.cols();
    let mut m = vec![0.0f64; n];
    for r in 0..calib.rows() {
        for (j, &v) in calib.row(r).iter().enumerate() {
            m[j] += v.abs() as f64;
        }
    }
    let rows = calib.rows().max(1) as f64;
    for v in &mut m {
        *v = (*v / rows).max(STAT_FLOOR);
    }
    m
}

fn strided_rows(calib: &Matrix) -> Vec<usize> {
    let n = calib.rows();
    let step = n.div_ceil(SEARCH_ROWS).max(1);
    (0..n).step_by(step).collect()
}

/// Reconstruction loss of quantizing `w * diag(s)` and feeding it `x / s`,
/// against the full-precision output, over the strided calibration rows.
fn scaled_loss(
    weights: &[&Matrix],
    calib: &Matrix,
    rows: &[usize],
    s: &[f32],
    opts: &AwqOptions,
) -> Result<f64, QuantError> {
    let mut loss = 0.0f64;
    for w in weights {
        let mut scaled = (*w).clone();
        for (j, &sj) in s.iter().enumerate() {
            scaled.scale_col(j, sj);
        }
        let deq = rtn_quantize(&scaled, opts.bits, opts.group_size)?.dequantize();

        let mut x_scaled = vec![0.0f32; w.cols()];
        let mut out_fp = vec![0.0f32; w.rows()];
        let mut out_q = vec![0.0f32; w.rows()];
        for &r in rows {
            let x = calib.row(r);
            for (xs, (&xv, &sj)) in x_scaled.iter_mut().zip(x.iter().zip(s.iter())) {
                *xs = xv / sj;
            }
            w.matvec(x, &mut out_fp);
            deq.matvec(&x_scaled, &mut out_q);
            for (a, b) in out_fp.iter().zip(out_q.iter()) {
                loss += ((a - b) as f64) * ((a - b) as f64);
            }
        }
    }
    Ok(loss)
}

/// Grid-search the shared scale vector for a group of weight matrices that
/// consume the same input. Returns the winning strictly positive scales.
pub fn search_scales(
    weights: &[&Matrix],
    calib: &Matrix,
    opts: &AwqOptions,
) -> Result<Vec<f32>, QuantError> {
    let n = weights
        .first()
        .map(|w| w.cols())
        .ok_or(QuantError::EmptyWeightGroup)?;
    for w in weights {
        if w.cols() != n {
            return Err(QuantError::WidthMismatch {
                expected: n,
                got: w.cols(),
            });
        }
    }
    if calib.rows() == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    if calib.cols() != n {
        return Err(QuantError::WidthMismatch {
            expected: n,
            got: calib.cols(),
        });
    }

    let stats = channel_stats(calib);
    let rows = strided_rows(calib);

    let mut best_s: Option<Vec<f32>> = None;
    let mut best_loss = f64::INFINITY;
    for k in 0..=opts.grid_steps {
        let alpha = k as f64 / opts.grid_steps as f64;
        let s: Vec<f32> = stats.iter().map(|&m| math::pow(m, alpha) as f32).collect();
        let loss = scaled_loss(weights, calib, &rows, &s, opts)?;
        // Strict improvement keeps the smallest alpha on ties, so alpha = 0
        // (plain RTN) wins when scaling buys nothing.
        if loss < best_loss {
            best_loss = loss;
            best_s = Some(s);
        }
    }
    Ok(best_s.expect("grid search produced no candidate"))
}
