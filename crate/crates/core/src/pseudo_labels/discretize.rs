//! Uniform binning of continuous features into pseudo-classes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};

/// Number of pseudo-classes per feature.
pub const N_BINS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizerKind {
    FittedUniform,
    FixedAngle,
}

/// Sorted interior edges; bin `k` is the half-open interval
/// `[edges[k-1], edges[k])`, with both ends open to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub kind: DiscretizerKind,
    pub n_bins: usize,
    pub edges: Vec<f64>,
}

/// Equal-width bins spanning the observed range of `values`.
pub fn fit_uniform_discretizer(values: &[f64], n_bins: usize) -> Result<Discretizer> {
    if values.is_empty() {
        return Err(PimError::EmptyInput("no values to fit bins on"));
    }
    if n_bins < 2 {
        return Err(PimError::InvalidParameter(format!(
            "need >= 2 bins, got {n_bins}"
        )));
    }
    let (min, max) = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !min.is_finite() {
        return Err(PimError::EmptyInput("no finite values to fit bins on"));
    }
    if max <= min {
        return Err(PimError::DegenerateRange(min));
    }
    let width = (max - min) / n_bins as f64;
    Ok(Discretizer {
        kind: DiscretizerKind::FittedUniform,
        n_bins,
        edges: (1..n_bins).map(|k| min + k as f64 * width).collect(),
    })
}

/// Ten thresholds `-pi + k * 2pi/10`, `k = 1..=10`.
///
/// With eleven classes this places the top threshold at `+pi`, so the last
/// class only holds the upper endpoint of the angle range.
pub fn fixed_angle_discretizer() -> Discretizer {
    let width = 2.0 * PI / 10.0;
    Discretizer {
        kind: DiscretizerKind::FixedAngle,
        n_bins: N_BINS,
        edges: (1..=10).map(|k| -PI + k as f64 * width).collect(),
    }
}

impl Discretizer {
    /// Bin id of `v`; below the first edge is 0, at or above the last edge is
    /// `n_bins - 1`. NaN maps to 0.
    pub fn discretize(&self, v: f64) -> usize {
        if v.is_nan() {
            return 0;
        }
        self.edges.partition_point(|&e| e <= v)
    }
}

/// Free-function form of [`Discretizer::discretize`].
pub fn discretize(d: &Discretizer, v: f64) -> usize {
    d.discretize(v)
}
