//! Physical quantities computed per window: speed of motion, orientation
//! angles and inter-limb symmetry.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ahrs::Madgwick;
use crate::dsp::{self, cross_correlate_full, dtw_distance, filtfilt};
use crate::error::{PimError, Result};
use crate::timeseries::SensorPosition;

/// Three equally long per-axis rows (x, y, z).
pub type Triaxial = [Vec<f64>; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedFeature {
    pub sensor_position: SensorPosition,
    pub delta_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleFeature {
    pub sensor_position: SensorPosition,
    /// Signed mean absolute roll, pitch and yaw.
    pub delta_r: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimbPair {
    Arms,
    Legs,
}

impl LimbPair {
    pub fn as_str(self) -> &'static str {
        match self {
            LimbPair::Arms => "arms",
            LimbPair::Legs => "legs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "arms" => Some(LimbPair::Arms),
            "legs" => Some(LimbPair::Legs),
            _ => None,
        }
    }
}

impl std::fmt::Display for LimbPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryFeature {
    pub pair: LimbPair,
    pub delta_d_symmetry: f64,
}

fn check_triaxial(a: &Triaxial) -> Result<usize> {
    let n = a[0].len();
    if a[1].len() != n || a[2].len() != n {
        return Err(PimError::ShapeMismatch(format!(
            "axis lengths {}, {}, {}",
            a[0].len(),
            a[1].len(),
            a[2].len()
        )));
    }
    Ok(n)
}

fn lowpass_each(a: &Triaxial, sample_rate_hz: f64) -> Result<Triaxial> {
    check_triaxial(a)?;
    let f = dsp::gravity_lowpass(sample_rate_hz)?;
    Ok([
        filtfilt(&f, &a[0])?,
        filtfilt(&f, &a[1])?,
        filtfilt(&f, &a[2])?,
    ])
}

/// Per-axis zero-phase 2 Hz lowpass of the raw acceleration.
pub fn gravity_estimate(accel: &Triaxial, sample_rate_hz: f64) -> Result<Triaxial> {
    lowpass_each(accel, sample_rate_hz)
}

/// Orientation-independent travelled-distance proxy of one sensor.
///
/// Gravity is removed with the 2 Hz lowpass, the remainder is integrated to
/// velocity (`v[k+1] = v[k] + a[k+1] dt`) and position (`p[k+1] = p[k] + v[k] dt`),
/// the position track is smoothed with the same lowpass, and the result is the
/// square root of the summed squared position increments over all axes.
pub fn speed_of_motion(
    position: &SensorPosition,
    accel: &Triaxial,
    sample_rate_hz: f64,
) -> Result<SpeedFeature> {
    let n = check_triaxial(accel)?;
    let dt = 1.0 / sample_rate_hz;
    let f = dsp::gravity_lowpass(sample_rate_hz)?;
    let mut sum_sq = 0.0;
    for axis in accel {
        let gravity = filtfilt(&f, axis)?;
        let linear: Vec<f64> = axis.iter().zip(&gravity).map(|(a, g)| a - g).collect();
        let velocity = dsp::cumulative_integrate(&linear, dt, 0.0);
        let mut pos = Vec::with_capacity(n);
        let mut p = 0.0;
        pos.push(p);
        for v in &velocity[..n.saturating_sub(1)] {
            p += v * dt;
            pos.push(p);
        }
        let smooth = filtfilt(&f, &pos)?;
        sum_sq += smooth
            .windows(2)
            .map(|w| (w[1] - w[0]).powi(2))
            .sum::<f64>();
    }
    Ok(SpeedFeature {
        sensor_position: position.clone(),
        delta_d: sum_sq.sqrt(),
    })
}

/// `atan2` with the origin mapped to 0 and the result folded into (-pi, pi].
fn angle(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        return 0.0;
    }
    let a = y.atan2(x);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Roll, pitch and yaw from a gravity track:
/// `phi = atan2(g_y, g_z)`, `theta = atan2(g_x, g_z)`, `psi = atan2(g_y, g_x)`.
pub fn angles_from_gravity(gravity: &Triaxial) -> Result<Triaxial> {
    let n = check_triaxial(gravity)?;
    let mut out = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for k in 0..n {
        let (gx, gy, gz) = (gravity[0][k], gravity[1][k], gravity[2][k]);
        if (gx * gx + gy * gy + gz * gz).sqrt() < 1e-6 {
            return Err(PimError::DegenerateGravity(k));
        }
        out[0].push(angle(gy, gz));
        out[1].push(angle(gx, gz));
        out[2].push(angle(gy, gx));
    }
    Ok(out)
}

/// Roll and pitch from the gravity direction of a Madgwick orientation
/// estimate (same conventions as [`angles_from_gravity`]); yaw is the
/// filter's heading.
pub fn angles_from_ahrs(
    accel: &Triaxial,
    gyro: &Triaxial,
    mag: Option<&Triaxial>,
    sample_rate_hz: f64,
    beta: f64,
) -> Result<Triaxial> {
    let n = check_triaxial(accel)?;
    if check_triaxial(gyro)? != n {
        return Err(PimError::ShapeMismatch(format!(
            "accel has {n} samples, gyro {}",
            gyro[0].len()
        )));
    }
    if let Some(m) = mag {
        if check_triaxial(m)? != n {
            return Err(PimError::ShapeMismatch(format!(
                "accel has {n} samples, mag {}",
                m[0].len()
            )));
        }
    }
    if !(beta > 0.0) {
        return Err(PimError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let at = |a: &Triaxial, k: usize| [a[0][k], a[1][k], a[2][k]];
    let mut filter = Madgwick::new(beta, sample_rate_hz);
    let mut out = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for k in 0..n {
        let q = match mag {
            Some(m) => filter.update_marg(at(gyro, k), at(accel, k), at(m, k)),
            None => filter.update_imu(at(gyro, k), at(accel, k)),
        };
        let [gx, gy, gz] = q.gravity_direction();
        out[0].push(angle(gy, gz));
        out[1].push(angle(gx, gz));
        let yaw = q.yaw();
        out[2].push(if yaw <= -PI { PI } else { yaw });
    }
    Ok(out)
}

fn signed_mean_abs(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let sum: f64 = x.iter().sum();
    if sum >= 0.0 {
        mean_abs
    } else {
        -mean_abs
    }
}

/// Mean absolute angle per axis, carrying the sign of the angle sum
/// (a zero sum counts as positive).
pub fn angle_feature(position: &SensorPosition, angles: &Triaxial) -> Result<AngleFeature> {
    let n = check_triaxial(angles)?;
    if n == 0 {
        return Err(PimError::EmptyInput("angle track"));
    }
    Ok(AngleFeature {
        sensor_position: position.clone(),
        delta_r: [
            signed_mean_abs(&angles[0]),
            signed_mean_abs(&angles[1]),
            signed_mean_abs(&angles[2]),
        ],
    })
}

/// Per-timestep Euclidean norm over the three axes.
pub fn magnitude(a: &Triaxial) -> Vec<f64> {
    (0..a[0].len())
        .map(|k| (a[0][k] * a[0][k] + a[1][k] * a[1][k] + a[2][k] * a[2][k]).sqrt())
        .collect()
}

/// DTW distance between the lowpassed acceleration magnitudes of two
/// devices, after aligning them at the cross-correlation peak.
pub fn symmetry_feature(
    pair: LimbPair,
    accel_1: &Triaxial,
    accel_2: &Triaxial,
    sample_rate_hz: f64,
    band: Option<usize>,
) -> Result<SymmetryFeature> {
    let n1 = check_triaxial(accel_1)?;
    let n2 = check_triaxial(accel_2)?;
    if n1 != n2 {
        return Err(PimError::LengthMismatch(n1, n2));
    }
    let x1 = magnitude(&lowpass_each(accel_1, sample_rate_hz)?);
    let x2 = magnitude(&lowpass_each(accel_2, sample_rate_hz)?);
    let shift = cross_correlate_full(&x1, &x2)?.argmax_lag();
    let (a, b) = dsp::align_by_shift(&x1, &x2, shift)?;
    let d = dtw_distance(a, b, band)?;
    Ok(SymmetryFeature {
        pair,
        delta_d_symmetry: d.distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: [f64; 3], n: usize) -> Triaxial {
        [vec![v[0]; n], vec![v[1]; n], vec![v[2]; n]]
    }

    fn pos() -> SensorPosition {
        SensorPosition::new("left_wrist")
    }

    #[test]
    fn stationary_gravity_is_recovered() {
        let g = gravity_estimate(&constant([0.0, 0.0, 9.81], 100), 50.0).unwrap();
        assert!(g[2].iter().all(|v| (v - 9.81).abs() < 1e-6));
        assert!(g[0].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn gravity_rejects_short_window() {
        assert!(matches!(
            gravity_estimate(&constant([0.0, 0.0, 9.81], 10), 50.0),
            Err(PimError::SeriesTooShortForFilter { .. })
        ));
    }

    #[test]
    fn jitter_is_attenuated() {
        let n = 250;
        let mut a = constant([0.0, 0.0, 9.81], n);
        for k in 0..n {
            a[0][k] += (2.0 * PI * 10.0 * k as f64 / 50.0).sin();
        }
        let g = gravity_estimate(&a, 50.0).unwrap();
        // odd padding pins the endpoints to the raw samples, so only the
        // interior is jitter-free
        assert!(g[0][50..n - 50].iter().all(|v| v.abs() < 0.01));
        assert!(g[2].iter().all(|v| (v - 9.81).abs() < 0.05));
    }

    #[test]
    fn no_motion_means_no_speed() {
        let s = speed_of_motion(&pos(), &constant([0.3, -1.0, 9.7], 200), 50.0).unwrap();
        assert!(s.delta_d < 1e-9);
    }

    #[test]
    fn axis_aligned_angles() {
        let a = angles_from_gravity(&constant([0.0, 0.0, 1.0], 3)).unwrap();
        assert_eq!((a[0][0], a[1][0], a[2][0]), (0.0, 0.0, 0.0));
        let a = angles_from_gravity(&constant([0.0, 1.0, 1.0], 1)).unwrap();
        assert!((a[0][0] - PI / 4.0).abs() < 1e-12);
        assert!(matches!(
            angles_from_gravity(&constant([0.0, 0.0, 0.0], 2)),
            Err(PimError::DegenerateGravity(0))
        ));
    }

    #[test]
    fn angle_feature_sign_rule() {
        let c = angle_feature(&pos(), &constant([0.5, 0.0, 0.0], 4)).unwrap();
        assert_eq!(c.delta_r[0], 0.5);

        let alt = [vec![0.5, -0.5, 0.5, -0.5], vec![0.0; 4], vec![0.0; 4]];
        assert_eq!(angle_feature(&pos(), &alt).unwrap().delta_r[0], 0.5);

        let neg = [vec![-0.2, -0.2, 0.1], vec![0.0; 3], vec![0.0; 3]];
        let r = angle_feature(&pos(), &neg).unwrap().delta_r[0];
        assert!((r - (-1.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn ahrs_levels_and_rejects_mismatch() {
        let n = 250;
        let acc = constant([0.0, 0.0, 9.81], n);
        let gyr = constant([0.0, 0.0, 0.0], n);
        let a = angles_from_ahrs(&acc, &gyr, None, 50.0, 0.1).unwrap();
        assert!(a[0][n - 1].abs() < 1e-3 && a[1][n - 1].abs() < 1e-3);

        let short = constant([0.0, 0.0, 0.0], n - 1);
        assert!(matches!(
            angles_from_ahrs(&acc, &short, None, 50.0, 0.1),
            Err(PimError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ahrs_yaw_advances_with_turn_rate() {
        let (fs, n) = (50.0, 101);
        let acc = constant([0.0, 0.0, 9.81], n);
        let gyr = constant([0.0, 0.0, 1.0], n);
        let a = angles_from_ahrs(&acc, &gyr, None, fs, 0.1).unwrap();
        // n updates of dt each; the first update already advances by dt
        let expected = n as f64 / fs;
        assert!(((a[2][n - 1] - expected) / expected).abs() < 0.05);
    }

    #[test]
    fn ahrs_converges_to_tilt() {
        let (fs, n) = (50.0, 500);
        let roll: f64 = 0.3;
        let acc = constant([0.0, 9.81 * roll.sin(), 9.81 * roll.cos()], n);
        let gyr = constant([0.0; 3], n);
        let a = angles_from_ahrs(&acc, &gyr, None, fs, 0.1).unwrap();
        assert!((a[0][n - 1] - roll).abs() < 1e-3);
    }

    #[test]
    fn symmetric_devices_have_zero_distance() {
        let n = 200;
        let a: Triaxial = [
            (0..n).map(|k| (k as f64 * 0.1).sin()).collect(),
            vec![0.2; n],
            (0..n).map(|k| 9.81 + (k as f64 * 0.05).cos()).collect(),
        ];
        let s = symmetry_feature(LimbPair::Arms, &a, &a, 50.0, None).unwrap();
        assert_eq!(s.delta_d_symmetry, 0.0);
        let short = constant([0.0; 3], n - 1);
        assert!(symmetry_feature(LimbPair::Arms, &a, &short, 50.0, None).is_err());
    }
}
