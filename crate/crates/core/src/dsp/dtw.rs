//! Dynamic time warping with absolute-difference local cost.

use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    pub distance: f64,
    /// Warping path from `(0, 0)` to `(len1 - 1, len2 - 1)` when requested.
    pub path: Option<Vec<(usize, usize)>>,
}

fn check(x1: &[f64], x2: &[f64], band: Option<usize>) -> Result<()> {
    if x1.is_empty() || x2.is_empty() {
        return Err(PimError::EmptyInput("dtw sequence"));
    }
    if let Some(band) = band {
        let diff = x1.len().abs_diff(x2.len());
        if band < diff {
            return Err(PimError::BandTooNarrow { band, diff });
        }
    }
    Ok(())
}

#[inline]
fn in_band(i: usize, j: usize, band: Option<usize>) -> bool {
    band.is_none_or(|b| i.abs_diff(j) <= b)
}

/// Accumulated cost of the cheapest boundary-to-boundary warping path with
/// moves `(i-1, j)`, `(i, j-1)`, `(i-1, j-1)`. `band` restricts cells to a
/// Sakoe-Chiba band `|i - j| <= band`.
pub fn dtw_distance(x1: &[f64], x2: &[f64], band: Option<usize>) -> Result<DtwResult> {
    check(x1, x2, band)?;
    let m = x2.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for (i, &a) in x1.iter().enumerate() {
        for (j, &b) in x2.iter().enumerate() {
            if !in_band(i, j, band) {
                cur[j] = f64::INFINITY;
                continue;
            }
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 {
                    prev[j - 1]
                } else {
                    f64::INFINITY
                };
                up.min(left).min(diag)
            };
            cur[j] = (a - b).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(DtwResult {
        distance: prev[m - 1],
        path: None,
    })
}

/// As [`dtw_distance`] but keeps the full cost matrix and backtracks the path.
pub fn dtw_with_path(x1: &[f64], x2: &[f64], band: Option<usize>) -> Result<DtwResult> {
    check(x1, x2, band)?;
    let (n, m) = (x1.len(), x2.len());
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            if !in_band(i, j, band) {
                continue;
            }
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 {
                    acc[(i - 1) * m + j]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[i * m + j - 1]
                } else {
                    f64::INFINITY
                };
                let diag = if i > 0 && j > 0 {
                    acc[(i - 1) * m + j - 1]
                } else {
                    f64::INFINITY
                };
                up.min(left).min(diag)
            };
            acc[i * m + j] = (x1[i] - x2[j]).abs() + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mut step = None;
        let mut best = f64::INFINITY;
        // diagonal first so ties prefer the shorter path
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            if i >= di && j >= dj {
                let v = acc[(i - di) * m + (j - dj)];
                if v < best {
                    best = v;
                    step = Some((i - di, j - dj));
                }
            }
        }
        let (ni, nj) = step.expect("finite terminal cost implies a predecessor");
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        distance: acc[n * m - 1],
        path: Some(path),
    })
}
