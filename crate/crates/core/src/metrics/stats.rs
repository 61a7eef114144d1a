//! Scalar statistics: Pearson correlation and Pearson's kurtosis.
//!
//! Undefined results (zero variance, too few samples) are hard errors,
//! never silent zeros — a silent zero would quietly corrupt a correlation
//! table.

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("inputs have different lengths: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("statistic undefined: input has zero variance")]
    ZeroVariance,
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(cov / math::sqrt(var_a * var_b))
}

/// Pearson's (non-excess) kurtosis with population moments:
/// `E[((v - mu) / sigma)^4]`. Gaussian data sits near 3.
pub fn kurtosis(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let m4 = values
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d * d * d
        })
        .sum::<f64>()
        / n;
    Ok(m4 / (var * var))
}

/// Kurtosis over an `f32` buffer without materializing an `f64` copy.
pub fn kurtosis_f32(values: &[f32]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut var = 0.0f64;
    let mut m4 = 0.0f64;
    for &v in values {
        let d = v as f64 - mean;
        let d2 = d * d;
        var += d2;
        m4 += d2 * d2;
    }
    var /= n;
    m4 /= n;
    if var == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(m4 / (var * var))
}

/// Median of absolute values; even counts average the two middle entries.
pub fn median_abs(values: &[f32]) -> f64 {
    assert!(!values.is_empty());
    let mut v: alloc::vec::Vec<f64> = values.iter().map(|&x| x.abs() as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
