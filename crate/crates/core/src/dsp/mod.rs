//! Numerical kernels shared by the pseudo-label generators.

mod dtw;
mod filter;

pub use dtw::{dtw_distance, dtw_with_path, DtwResult};
pub use filter::{design_butterworth, filtfilt, FilterKind, IirFilter};

use crate::error::{PimError, Result};

/// Order of every Butterworth filter in the pseudo-label pipeline.
pub const BUTTERWORTH_ORDER: usize = 4;
/// Cutoff separating gravity (and slow motion) from the rest.
pub const GRAVITY_CUTOFF_HZ: f64 = 2.0;

/// The 4th-order 2 Hz lowpass used throughout pseudo-labelling.
pub fn gravity_lowpass(sample_rate_hz: f64) -> Result<IirFilter> {
    design_butterworth(
        BUTTERWORTH_ORDER,
        GRAVITY_CUTOFF_HZ,
        sample_rate_hz,
        FilterKind::Lowpass,
    )
}

/// Rectangle-rule running sum: `y[0] = initial`, `y[k+1] = y[k] + x[k+1] * dt`.
pub fn cumulative_integrate(x: &[f64], dt: f64, initial: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    if x.is_empty() {
        return y;
    }
    let mut acc = initial;
    y.push(acc);
    for &xi in &x[1..] {
        acc += xi * dt;
        y.push(acc);
    }
    y
}

/// Full linear cross-correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation {
    /// `-(len2 - 1) ..= len1 - 1`
    pub lags: Vec<isize>,
    /// `values[i] = sum_k x1[k + lags[i]] * x2[k]` over the valid overlap.
    pub values: Vec<f64>,
}

impl CrossCorrelation {
    /// Lag of the largest value; ties resolve to the most negative lag.
    pub fn argmax_lag(&self) -> isize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        self.lags[best]
    }
}

pub fn cross_correlate_full(x1: &[f64], x2: &[f64]) -> Result<CrossCorrelation> {
    if x1.is_empty() || x2.is_empty() {
        return Err(PimError::EmptyInput("cross-correlation input"));
    }
    let (n1, n2) = (x1.len() as isize, x2.len() as isize);
    let lags: Vec<isize> = (-(n2 - 1)..n1).collect();
    let values = lags
        .iter()
        .map(|&lag| {
            let k_lo = (-lag).max(0);
            let k_hi = (n1 - lag).min(n2);
            (k_lo..k_hi)
                .map(|k| x1[(k + lag) as usize] * x2[k as usize])
                .sum()
        })
        .collect();
    Ok(CrossCorrelation { lags, values })
}

/// Overlapping segments once `x1[k + shift]` is paired with `x2[k]`.
pub fn align_by_shift<'a>(
    x1: &'a [f64],
    x2: &'a [f64],
    shift: isize,
) -> Result<(&'a [f64], &'a [f64])> {
    let limit = x1.len().min(x2.len());
    if shift.unsigned_abs() >= limit {
        return Err(PimError::NoOverlap {
            shift,
            len1: x1.len(),
            len2: x2.len(),
        });
    }
    let (a, b) = if shift >= 0 {
        (&x1[shift as usize..], x2)
    } else {
        (x1, &x2[shift.unsigned_abs()..])
    };
    let len = a.len().min(b.len());
    Ok((&a[..len], &b[..len]))
}
