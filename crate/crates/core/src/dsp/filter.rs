//! Butterworth IIR design by bilinear transform and zero-phase application.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Lowpass,
    Highpass,
}

/// Transfer function `b(z^-1) / a(z^-1)` with `a[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub order: usize,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
    pub kind: FilterKind,
}

/// Designs a digital Butterworth filter.
///
/// Analog prototype poles are scaled to the prewarped cutoff, mapped through
/// the bilinear transform, and the numerator gain is set so that the passband
/// edge (DC for lowpass, Nyquist for highpass) has unit gain.
pub fn design_butterworth(
    order: usize,
    cutoff_hz: f64,
    sample_rate_hz: f64,
    kind: FilterKind,
) -> Result<IirFilter> {
    if order == 0 {
        return Err(PimError::InvalidParameter(
            "filter order must be >= 1".into(),
        ));
    }
    if !(sample_rate_hz > 0.0) {
        return Err(PimError::InvalidParameter(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    let nyquist = sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(PimError::InvalidCutoff {
            cutoff_hz,
            nyquist_hz: nyquist,
        });
    }

    let fs2 = 2.0 * sample_rate_hz;
    let warped = fs2 * (PI * cutoff_hz / sample_rate_hz).tan();
    let n = order as f64;
    let poles: Vec<Complex64> = (0..order)
        .map(|k| {
            let proto = Complex64::from_polar(1.0, PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n));
            let analog = match kind {
                FilterKind::Lowpass => proto * warped,
                FilterKind::Highpass => warped / proto,
            };
            (fs2 + analog) / (fs2 - analog)
        })
        .collect();
    let zero = match kind {
        FilterKind::Lowpass => Complex64::new(-1.0, 0.0),
        FilterKind::Highpass => Complex64::new(1.0, 0.0),
    };
    let a = real_poly(&poles);
    let mut b = real_poly(&vec![zero; order]);

    // gain at the passband reference point z = 1 (DC) or z = -1 (Nyquist)
    let z_ref = match kind {
        FilterKind::Lowpass => 1.0,
        FilterKind::Highpass => -1.0,
    };
    let gain = eval_poly_real(&a, z_ref) / eval_poly_real(&b, z_ref);
    for c in &mut b {
        *c *= gain;
    }

    Ok(IirFilter {
        b,
        a,
        order,
        cutoff_hz,
        sample_rate_hz,
        kind,
    })
}

/// Coefficients (descending powers) of `prod (z - r)`, real part only.
fn real_poly(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}

/// Evaluates `sum c[i] * w^-i` for real `w` (`w` is +-1 here, so the sign
/// pattern is all that matters).
fn eval_poly_real(coeffs: &[f64], w: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| c * w.powi(-(i as i32)))
        .sum()
}

impl IirFilter {
    /// Number of stored state values for a direct-form filter.
    fn state_len(&self) -> usize {
        self.a.len().max(self.b.len()) - 1
    }

    /// Edge extension used by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * self.a.len().max(self.b.len())
    }

    /// Runs the filter causally (transposed direct form II) from state `zi`.
    pub fn lfilter(&self, x: &[f64], zi: Option<&[f64]>) -> Vec<f64> {
        let n = self.state_len();
        let b = padded(&self.b, n + 1);
        let a = padded(&self.a, n + 1);
        let mut z = match zi {
            Some(zi) => zi.to_vec(),
            None => vec![0.0; n],
        };
        let mut y = Vec::with_capacity(x.len());
        for &xi in x {
            let yi = b[0] * xi + z.first().copied().unwrap_or(0.0);
            for k in 0..n {
                let carry = if k + 1 < n { z[k + 1] } else { 0.0 };
                z[k] = b[k + 1] * xi + carry - a[k + 1] * yi;
            }
            y.push(yi);
        }
        y
    }

    /// Initial state giving the step-response steady state for a unit input.
    pub fn lfilter_zi(&self) -> Vec<f64> {
        let n = self.state_len();
        if n == 0 {
            return Vec::new();
        }
        let b = padded(&self.b, n + 1);
        let a = padded(&self.a, n + 1);
        // (I - companion(a)^T) zi = b[1..] - a[1..] * b[0]
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 1.0;
            row[0] += a[i + 1];
            if i + 1 < n {
                row[i + 1] -= 1.0;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| b[i + 1] - a[i + 1] * b[0]).collect();
        solve_dense(m, rhs)
    }
}

fn padded(c: &[f64], len: usize) -> Vec<f64> {
    let mut v = c.to_vec();
    v.resize(len, 0.0);
    v
}

/// Gaussian elimination with partial pivoting for the small state systems.
fn solve_dense(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        let p = m[col][col];
        for row in col + 1..n {
            let f = m[row][col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row][row];
    }
    x
}

/// Zero-phase forward-backward filtering with odd-reflection edge padding and
/// steady-state initial conditions.
pub fn filtfilt(f: &IirFilter, x: &[f64]) -> Result<Vec<f64>> {
    let pad = f.pad_len();
    if x.len() <= pad {
        return Err(PimError::SeriesTooShortForFilter {
            len: x.len(),
            min_len: pad,
        });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let zi = f.lfilter_zi();
    let scaled = |s: f64| zi.iter().map(|z| z * s).collect::<Vec<_>>();

    let fwd = f.lfilter(&ext, Some(&scaled(ext[0])));
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    rev = f.lfilter(&rev, Some(&scaled(rev[0])));
    rev.reverse();
    Ok(rev[pad..pad + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// |H(e^{jw})| evaluated straight from the coefficient lists.
    fn magnitude(f: &IirFilter, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / f.sample_rate_hz;
        let eval = |c: &[f64]| -> Complex64 {
            c.iter()
                .enumerate()
                .map(|(k, &ck)| ck * Complex64::from_polar(1.0, -w * k as f64))
                .sum()
        };
        (eval(&f.b) / eval(&f.a)).norm()
    }

    #[test]
    fn fourth_order_2hz_at_50hz_is_half_power_at_cutoff() {
        let f = design_butterworth(4, 2.0, 50.0, FilterKind::Lowpass).unwrap();
        assert_eq!(f.a.len(), 5);
        assert_eq!(f.b.len(), 5);
        assert_eq!(f.a[0], 1.0);
        assert!((magnitude(&f, 2.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
        let dc: f64 = f.b.iter().sum::<f64>() / f.a.iter().sum::<f64>();
        assert!((dc - 1.0).abs() < 1e-9);
    }

    #[test]
    fn highpass_has_unit_nyquist_gain() {
        let f = design_butterworth(3, 5.0, 100.0, FilterKind::Highpass).unwrap();
        assert!((magnitude(&f, 50.0) - 1.0).abs() < 1e-9);
        assert!(magnitude(&f, 0.0) < 1e-9);
        assert!((magnitude(&f, 5.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
    }

    #[test]
    fn matches_known_second_order_coefficients() {
        // fc = fs/4 places the prewarped cutoff at 2 fs; closed form b = [1,2,1]/(2+sqrt2)...
        let f = design_butterworth(2, 25.0, 100.0, FilterKind::Lowpass).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        let k = 1.0 / (2.0 + s2);
        let b = [k, 2.0 * k, k];
        let a = [1.0, 0.0, (2.0 - s2) / (2.0 + s2)];
        for (got, want) in f.b.iter().zip(b).chain(f.a.iter().zip(a)) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn invalid_cutoffs() {
        assert!(matches!(
            design_butterworth(4, 30.0, 50.0, FilterKind::Lowpass),
            Err(PimError::InvalidCutoff { .. })
        ));
        assert!(matches!(
            design_butterworth(4, 25.0, 50.0, FilterKind::Lowpass),
            Err(PimError::InvalidCutoff { .. })
        ));
        assert!(design_butterworth(0, 2.0, 50.0, FilterKind::Lowpass).is_err());
    }

    #[test]
    fn constant_passes_through_filtfilt() {
        let f = design_butterworth(4, 2.0, 50.0, FilterKind::Lowpass).unwrap();
        let y = filtfilt(&f, &[3.7; 64]).unwrap();
        assert_eq!(y.len(), 64);
        assert!(y.iter().all(|v| (v - 3.7).abs() < 1e-9));
    }

    #[test]
    fn short_input_is_rejected() {
        let f = design_butterworth(4, 2.0, 50.0, FilterKind::Lowpass).unwrap();
        assert_eq!(f.pad_len(), 15);
        assert!(matches!(
            filtfilt(&f, &[0.0; 15]),
            Err(PimError::SeriesTooShortForFilter {
                len: 15,
                min_len: 15
            })
        ));
        assert!(filtfilt(&f, &[0.0; 16]).is_ok());
    }

    #[test]
    fn lfilter_zi_is_steady_state() {
        let f = design_butterworth(4, 2.0, 50.0, FilterKind::Lowpass).unwrap();
        let zi = f.lfilter_zi();
        let y = f.lfilter(&[1.0; 20], Some(&zi));
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
