//! GPTQ: second-order weight quantization with error compensation.
//!
//! Quantizes one column at a time (in blocks of 32 with lazy updates, which
//! is numerically equivalent to column-at-a-time), compensating remaining
//! columns through the Cholesky factor of the inverse calibration Hessian.
//! Each storage group gets the min-max grid RTN would fit at the moment the
//! group is first reached in processing order, so the stored form is
//! identical to `rtn_quantize`'s: per-group scale and offset along the
//! input dimension.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Matrix;

use super::grid::{check_bits, pack_codes, UniformGrid};
use super::{GridKind, QuantError, QuantizedLinear};

/// Lazy-update block width.
const BLOCK: usize = 32;

#[derive(Debug, Clone, Copy)]
pub struct GptqOptions {
    pub bits: u8,
    pub group_size: usize,
    /// Damping coefficient relative to the mean Hessian diagonal.
    pub damp: f64,
    /// Process columns in order of descending Hessian diagonal.
    pub act_sort: bool,
}

/// Cholesky factorization A = L L^T in place; `a` is row-major `n x n`.
/// Returns false when a pivot is not strictly positive.
fn cholesky_lower(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = crate::math::sqrt(d);
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    // Zero the strict upper triangle for cleanliness.
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// Invert an SPD matrix given its lower Cholesky factor `l`.
fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // Solve L y = e_i, then L^T x = y, one column at a time.
    let mut inv = vec![0.0f64; n * n];
    let mut y = vec![0.0f64; n];
    for col in 0..n {
        for i in 0..n {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                v -= l[i * n + k] * y[k];
            }
            y[i] = v / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= l[k * n + i] * inv[k * n + col];
            }
            inv[i * n + col] = v / l[i * n + i];
        }
    }
    inv
}

/// GPTQ-quantize `w` against calibration rows (each row one input vector).
pub fn gptq_quantize(
    w: &Matrix,
    calib: &Matrix,
    opts: &GptqOptions,
) -> Result<QuantizedLinear, QuantError> {
    let levels = check_bits(opts.bits)?;
    if opts.group_size == 0 {
        return Err(QuantError::BadGroupSize(opts.group_size));
    }
    if calib.rows() == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    if calib.cols() != w.cols() {
        return Err(QuantError::WidthMismatch {
            expected: w.cols(),
            got: calib.cols(),
        });
    }
    if !(opts.damp > 0.0) {
        return Err(QuantError::BadDamping(opts.damp));
    }

    let (rows, n) = (w.rows(), w.cols());
    let n_groups = n.div_ceil(opts.group_size);

    // H = 2 X^T X over calibration rows.
    let mut h = vec![0.0f64; n * n];
    for r in 0..calib.rows() {
        let x = calib.row(r);
        for i in 0..n {
            let xi = x[i] as f64;
            if xi == 0.0 {
                continue;
            }
            for j in i..n {
                h[i * n + j] += 2.0 * xi * x[j] as f64;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            h[i * n + j] = h[j * n + i];
        }
    }

    // Dead inputs never fire in calibration; give them a unit diagonal so
    // the factorization stays defined.
    for i in 0..n {
        if h[i * n + i] == 0.0 {
            h[i * n + i] = 1.0;
        }
    }
    let mean_diag = (0..n).map(|i| h[i * n + i]).sum::<f64>() / n as f64;
    for i in 0..n {
        h[i * n + i] += opts.damp * mean_diag;
    }

    // Column order: descending Hessian diagonal when activation sorting is
    // on, ties broken by index.
    let mut perm: Vec<usize> = (0..n).collect();
    if opts.act_sort {
        perm.sort_by(|&a, &b| {
            h[b * n + b]
                .partial_cmp(&h[a * n + a])
                .unwrap()
                .then(a.cmp(&b))
        });
    }

    // Permute H.
    let mut hp = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            hp[i * n + j] = h[perm[i] * n + perm[j]];
        }
    }

    if !cholesky_lower(&mut hp, n) {
        return Err(QuantError::SingularHessian { damp: opts.damp });
    }
    let hinv = cholesky_inverse(&hp, n);
    let mut hinv_chol = hinv;
    if !cholesky_lower(&mut hinv_chol, n) {
        return Err(QuantError::SingularHessian { damp: opts.damp });
    }
    // Upper factor U with H^-1 = U^T U; the recurrence walks its rows.
    let mut u = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            u[j * n + i] = hinv_chol[i * n + j];
        }
    }

    // Working weights in permuted column order.
    let mut work = vec![0.0f64; rows * n];
    for r in 0..rows {
        for p in 0..n {
            work[r * n + p] = w.get(r, perm[p]) as f64;
        }
    }
    // Position of each original column in processing order.
    let mut pos_of = vec![0usize; n];
    for (p, &orig) in perm.iter().enumerate() {
        pos_of[orig] = p;
    }

    // Grids are fitted per storage group when its first column comes up in
    // processing order, from the current (already compensated) values of
    // the whole group, like RTN would fit them at that moment.
    let mut grids: Vec<Option<UniformGrid>> = vec![None; rows * n_groups];
    let mut fitted = vec![false; n_groups];
    let fit_group = |grids: &mut Vec<Option<UniformGrid>>, work: &[f64], g: usize| {
        let lo = g * opts.group_size;
        let hi = (lo + opts.group_size).min(n);
        for r in 0..rows {
            let current: Vec<f32> = (lo..hi)
                .map(|c| work[r * n + pos_of[c]] as f32)
                .collect();
            grids[r * n_groups + g] = Some(UniformGrid::fit(&current, levels));
        }
    };

    let mut codes = vec![0u8; rows * n];
    let mut block_err = vec![0.0f64; rows * BLOCK];
    let mut b0 = 0;
    while b0 < n {
        let b1 = (b0 + BLOCK).min(n);
        let bw = b1 - b0;
        for p in b0..b1 {
            let orig = perm[p];
            let group = orig / opts.group_size;
            if !fitted[group] {
                fit_group(&mut grids, &work, group);
                fitted[group] = true;
            }
            let dinv = u[p * n + p];
            for r in 0..rows {
                let grid = grids[r * n_groups + group].as_ref().unwrap();
                let wv = work[r * n + p];
                let code = if grid.scale == 0.0 {
                    0u8
                } else {
                    let c = crate::math::floor((wv - grid.min as f64) / grid.scale as f64 + 0.5);
                    c.clamp(0.0, (levels - 1) as f64) as u8
                };
                codes[r * n + orig] = code;
                let deq = grid.decode(code) as f64;
                let e = (wv - deq) / dinv;
                block_err[r * BLOCK + (p - b0)] = e;
                for j in (p + 1)..b1 {
                    work[r * n + j] -= e * u[p * n + j];
                }
            }
        }
        // Lazy update of everything past the block.
        for r in 0..rows {
            for j in b1..n {
                let mut acc = 0.0f64;
                for p in 0..bw {
                    acc += block_err[r * BLOCK + p] * u[(b0 + p) * n + j];
                }
                work[r * n + j] -= acc;
            }
        }
        b0 = b1;
    }

    let (scales, mins): (Vec<f32>, Vec<f32>) = grids
        .iter()
        .map(|g| {
            let g = g.as_ref().expect("every group is fitted once reached");
            (g.scale, g.min)
        })
        .unzip();
    Ok(QuantizedLinear {
        bits: opts.bits,
        group_size: opts.group_size,
        rows,
        cols: n,
        grid: GridKind::Uniform { scales, mins },
        packed: pack_codes(&codes, opts.bits, n),
        awq_scales: None,
    })
}
