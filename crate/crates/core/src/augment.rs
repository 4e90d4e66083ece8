//! Pre-training augmentations. Augmented windows keep the pseudo-labels of
//! their source; nothing is recomputed.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::par;
use crate::rng::{self, tag};
use crate::timeseries::{ChannelMatrix, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentTag {
    Original,
    Permute,
    TimeWarp,
    Flip,
}

impl AugmentTag {
    pub const AUGMENTATIONS: [AugmentTag; 3] =
        [AugmentTag::Permute, AugmentTag::TimeWarp, AugmentTag::Flip];

    fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_segments: usize,
    pub warp_knots: usize,
    pub warp_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_segments: 4,
            warp_knots: 4,
            warp_sigma: 0.2,
        }
    }
}

/// Splits the window into `n_segments` contiguous chunks (the last absorbs
/// the remainder) and concatenates them in a seeded random order.
pub fn permute_segments(w: &Window, n_segments: usize, seed: u64) -> Result<Window> {
    let n = w.len();
    if n_segments < 2 || n_segments > n {
        return Err(PimError::InvalidSegments { n_segments, n_w: n });
    }
    let seg = n / n_segments;
    let bounds: Vec<(usize, usize)> = (0..n_segments)
        .map(|i| {
            (
                i * seg,
                if i + 1 == n_segments {
                    n
                } else {
                    (i + 1) * seg
                },
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..n_segments).collect();
    order.shuffle(&mut rng::stream(
        seed,
        &[tag::AUGMENT, AugmentTag::Permute.code()],
    ));

    let mut out = ChannelMatrix::zeros(w.n_channels(), n);
    for c in 0..w.n_channels() {
        let src = w.data.row(c);
        let dst = out.row_mut(c);
        let mut t = 0;
        for &s in &order {
            let (a, b) = bounds[s];
            dst[t..t + b - a].copy_from_slice(&src[a..b]);
            t += b - a;
        }
    }
    Ok(w.with_data(out))
}

/// Natural cubic spline through `(xs, ys)` evaluated at `at`.
fn natural_cubic_spline(xs: &[f64], ys: &[f64], at: &[f64]) -> Vec<f64> {
    let n = xs.len();
    if n == 2 {
        let slope = (ys[1] - ys[0]) / (xs[1] - xs[0]);
        return at.iter().map(|&x| ys[0] + slope * (x - xs[0])).collect();
    }
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // second derivatives m[1..n-1] from the tridiagonal system; m[0] = m[n-1] = 0
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut rhs = vec![0.0; inner];
    for i in 0..inner {
        let k = i + 1;
        diag[i] = 2.0 * (h[k - 1] + h[k]);
        rhs[i] = 6.0 * ((ys[k + 1] - ys[k]) / h[k] - (ys[k] - ys[k - 1]) / h[k - 1]);
    }
    for i in 1..inner {
        let f = h[i] / diag[i - 1];
        diag[i] -= f * h[i];
        rhs[i] -= f * rhs[i - 1];
    }
    let mut m = vec![0.0; n];
    for i in (0..inner).rev() {
        let upper = if i + 1 < inner {
            h[i + 1] * m[i + 2]
        } else {
            0.0
        };
        m[i + 1] = (rhs[i] - upper) / diag[i];
    }
    at.iter()
        .map(|&x| {
            let j = xs[1..n - 1].partition_point(|&k| k <= x);
            let (x0, x1, hj) = (xs[j], xs[j + 1], h[j]);
            let (a, b) = ((x1 - x) / hj, (x - x0) / hj);
            a * ys[j]
                + b * ys[j + 1]
                + ((a * a * a - a) * m[j] + (b * b * b - b) * m[j + 1]) * hj * hj / 6.0
        })
        .collect()
}

/// Linear interpolation of `(xp, fp)` at `x`; `xp` must be increasing.
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let last = xp.len() - 1;
    if x <= xp[0] {
        return fp[0];
    }
    if x >= xp[last] {
        return fp[last];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let t = (x - xp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + t * (fp[j + 1] - fp[j])
}

/// Smooth random time re-parameterization. A natural cubic spline through
/// `knots` evenly spaced speeds drawn from `N(1, sigma)` gives the local time
/// speed; its cumulative integral, rescaled to end at the last sample, maps
/// output samples to input times, and the window is resampled there by linear
/// interpolation. `sigma = 0` is the identity.
pub fn time_warp(w: &Window, knots: usize, sigma: f64, seed: u64) -> Result<Window> {
    if knots < 2 {
        return Err(PimError::InvalidParameter(format!(
            "time warp needs >= 2 knots, got {knots}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(PimError::InvalidParameter(format!(
            "time warp sigma must be >= 0, got {sigma}"
        )));
    }
    let n = w.len();
    if n < 2 {
        return Ok(w.clone());
    }
    let last = (n - 1) as f64;
    let normal = Normal::new(1.0, sigma).expect("sigma checked");
    let mut r = rng::stream(seed, &[tag::AUGMENT, AugmentTag::TimeWarp.code()]);
    let kx: Vec<f64> = (0..knots)
        .map(|i| last * i as f64 / (knots - 1) as f64)
        .collect();
    let ky: Vec<f64> = (0..knots).map(|_| normal.sample(&mut r)).collect();
    let grid: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let speed: Vec<f64> = natural_cubic_spline(&kx, &ky, &grid)
        .into_iter()
        .map(|s| s.max(1e-3))
        .collect();
    let mut warped = Vec::with_capacity(n);
    warped.push(0.0);
    for k in 1..n {
        warped.push(warped[k - 1] + 0.5 * (speed[k - 1] + speed[k]));
    }
    let scale = last / warped[n - 1];
    warped.iter_mut().for_each(|t| *t *= scale);
    warped[n - 1] = last;

    let mut out = ChannelMatrix::zeros(w.n_channels(), n);
    for c in 0..w.n_channels() {
        let src = w.data.row(c);
        let dst = out.row_mut(c);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = interp(i as f64, &warped, src);
        }
    }
    Ok(w.with_data(out))
}

/// Reverses the time axis of every channel.
pub fn horizontal_flip(w: &Window) -> Window {
    let mut out = w.data.clone();
    for c in 0..out.n_channels() {
        out.row_mut(c).reverse();
    }
    w.with_data(out)
}

pub fn apply(w: &Window, tag: AugmentTag, cfg: &AugmentConfig, seed: u64) -> Result<Window> {
    match tag {
        AugmentTag::Original => Ok(w.clone()),
        AugmentTag::Permute => permute_segments(w, cfg.n_segments, seed),
        AugmentTag::TimeWarp => time_warp(w, cfg.warp_knots, cfg.warp_sigma, seed),
        AugmentTag::Flip => Ok(horizontal_flip(w)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub source: usize,
    pub tag: AugmentTag,
}

/// Which source window and augmentation each pre-training sample comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedBatchPlan {
    pub entries: Vec<PlanEntry>,
    /// Copies of each original, matching the augmentation count.
    pub oversample_factor: usize,
}

impl AugmentedBatchPlan {
    /// One variant per augmentation plus as many original copies, shuffled.
    pub fn new(n_windows: usize, seed: u64) -> Self {
        let factor = AugmentTag::AUGMENTATIONS.len();
        let mut entries = Vec::with_capacity(2 * factor * n_windows);
        for source in 0..n_windows {
            for tag in AugmentTag::AUGMENTATIONS {
                entries.push(PlanEntry { source, tag });
            }
            for _ in 0..factor {
                entries.push(PlanEntry {
                    source,
                    tag: AugmentTag::Original,
                });
            }
        }
        entries.shuffle(&mut rng::stream(seed, &[tag::AUGMENT, u64::MAX]));
        AugmentedBatchPlan {
            entries,
            oversample_factor: factor,
        }
    }

    pub fn augmented_fraction(&self) -> f64 {
        let aug = self
            .entries
            .iter()
            .filter(|e| e.tag != AugmentTag::Original)
            .count();
        aug as f64 / self.entries.len().max(1) as f64
    }
}

/// Expands `windows` into the pre-training set: three augmented variants and
/// three original copies per window, shuffled. Each window's augmentation
/// seed is derived from `seed` and the window's position in the input.
pub fn build_pretrain_set(
    windows: &[Window],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Vec<Window>> {
    if windows.is_empty() {
        return Err(PimError::EmptyInput("pre-training windows"));
    }
    let plan = AugmentedBatchPlan::new(windows.len(), seed);
    par::try_map(&plan.entries, |e| {
        let s = rng::derive_seed(seed, &[tag::AUGMENT, e.source as u64]);
        apply(&windows[e.source], e.tag, cfg, s)
    })
}
