//! Desk-scale stand-in for body-worn IMU recordings: limb accelerometers
//! whose gravity tilt, oscillation and left/right phase depend on the class.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::rng::{self, tag};
use crate::timeseries::{ChannelMatrix, Layout, MultiChannelSeries};

const G: f64 = 9.81;

/// Motion of one synthetic activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMotion {
    pub name: String,
    /// Fundamental oscillation frequency.
    pub freq_hz: f64,
    /// Peak oscillation along the gravity axis, wrists and ankles.
    pub arm_amplitude: f64,
    pub leg_amplitude: f64,
    /// Relative amplitude of the third harmonic.
    pub harmonic: f64,
    /// Sensor tilt away from vertical.
    pub tilt_rad: f64,
    /// Phase of the right limb relative to the left.
    pub phase_offset_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassMotion>,
    pub n_subjects: usize,
    pub sample_rate_hz: f64,
    /// Recording length per subject and class.
    pub duration_s: f64,
    pub noise_sigma: f64,
    /// Relative per-subject spread of amplitude and frequency.
    pub subject_variability: f64,
    /// Per-subject, per-sensor spread of the mounting tilt.
    pub tilt_jitter_rad: f64,
    /// Extra per-recording, per-sensor tilt spread: sensors are re-mounted
    /// for every session.
    pub session_tilt_jitter_rad: f64,
    /// Spread of a per-subject rotation about the gravity axis.
    pub heading_jitter_rad: f64,
    pub positions: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let class = |name: &str, amp: f64, tilt: f64, phase: f64| ClassMotion {
            name: name.into(),
            freq_hz: 1.2,
            arm_amplitude: amp,
            leg_amplitude: amp,
            harmonic: 0.5,
            tilt_rad: tilt,
            phase_offset_rad: phase,
        };
        SyntheticSpec {
            classes: vec![
                class("upright", 0.0, 0.0, 0.0),
                class("reclined", 0.0, 1.0, 0.0),
                class("bounce", 3.0, 0.0, 0.0),
                class("stride", 3.0, 0.0, PI),
            ],
            n_subjects: 6,
            sample_rate_hz: 25.0,
            duration_s: 40.0,
            noise_sigma: 0.3,
            subject_variability: 0.25,
            tilt_jitter_rad: 0.03,
            session_tilt_jitter_rad: 0.0,
            heading_jitter_rad: 0.0,
            positions: ["left_wrist", "right_wrist", "left_ankle", "right_ankle"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl SyntheticSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::accel_only(&self.positions)
    }

    pub fn subject_ids(&self) -> Vec<String> {
        (0..self.n_subjects).map(subject_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.positions.is_empty() || self.n_subjects == 0 {
            return Err(PimError::InvalidParameter(
                "synthetic spec needs classes, positions and subjects".into(),
            ));
        }
        if !(self.sample_rate_hz > 0.0 && self.duration_s > 0.0) || self.noise_sigma < 0.0 {
            return Err(PimError::InvalidParameter(
                "synthetic spec needs positive rate and duration, non-negative noise".into(),
            ));
        }
        self.layout().validate()
    }
}

pub fn subject_id(i: usize) -> String {
    format!("subj{i:02}")
}

fn is_right(position: &str) -> bool {
    position.to_ascii_lowercase().contains("right")
}

fn is_leg(position: &str) -> bool {
    let p = position.to_ascii_lowercase();
    ["ankle", "leg", "thigh", "shin", "knee", "foot", "calf"]
        .iter()
        .any(|w| p.contains(w))
}

/// Per-subject physiology, shared by all of that subject's sessions.
struct SubjectTraits {
    amp_scale: f64,
    freq_scale: f64,
    tilt_offset: Vec<f64>,
    roll_offset: Vec<f64>,
    heading: f64,
}

impl SubjectTraits {
    fn draw<R: Rng>(spec: &SyntheticSpec, r: &mut R) -> Self {
        let var = spec.subject_variability;
        let n = spec.positions.len();
        let tilt = Normal::new(0.0, spec.tilt_jitter_rad.max(0.0)).expect("finite sigma");
        let heading = Normal::new(0.0, spec.heading_jitter_rad.max(0.0)).expect("finite sigma");
        SubjectTraits {
            amp_scale: 1.0 + r.random_range(-var..=var),
            freq_scale: 1.0 + 0.5 * r.random_range(-var..=var),
            tilt_offset: (0..n).map(|_| tilt.sample(r)).collect(),
            roll_offset: (0..n).map(|_| tilt.sample(r)).collect(),
            heading: heading.sample(r),
        }
    }
}

/// One labelled series per subject and class, gravity plus oscillation along
/// the gravity axis plus Gaussian noise. Deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<MultiChannelSeries>> {
    spec.validate()?;
    let layout = spec.layout();
    let n = (spec.duration_s * spec.sample_rate_hz).round() as usize;
    let dt = 1.0 / spec.sample_rate_hz;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("checked sigma");
    let mut out = Vec::with_capacity(spec.n_subjects * spec.classes.len());
    for s in 0..spec.n_subjects {
        let traits = SubjectTraits::draw(spec, &mut rng::stream(seed, &[tag::SYNTHETIC, s as u64]));
        for (c, class) in spec.classes.iter().enumerate() {
            let mut r = rng::stream(seed, &[tag::SYNTHETIC, s as u64, 1 + c as u64]);
            let phase0 = r.random_range(0.0..2.0 * PI);
            let session =
                Normal::new(0.0, spec.session_tilt_jitter_rad.max(0.0)).expect("finite sigma");
            let remount: Vec<[f64; 2]> = (0..spec.positions.len())
                .map(|_| [session.sample(&mut r), session.sample(&mut r)])
                .collect();
            let omega = 2.0 * PI * class.freq_hz * traits.freq_scale;
            let mut rows = Vec::with_capacity(layout.len());
            for (p, pos) in spec.positions.iter().enumerate() {
                let tilt = class.tilt_rad + traits.tilt_offset[p] + remount[p][0];
                let roll = traits.roll_offset[p] + remount[p][1];
                // unit gravity direction in the sensor frame, then a heading
                // rotation about the sensor z axis
                let (ux, uy, uz) = (tilt.sin(), roll.sin() * tilt.cos(), roll.cos() * tilt.cos());
                let (ch, sh) = (traits.heading.cos(), traits.heading.sin());
                let u = [ch * ux - sh * uy, sh * ux + ch * uy, uz];
                let amp = traits.amp_scale
                    * if is_leg(pos) {
                        class.leg_amplitude
                    } else {
                        class.arm_amplitude
                    };
                let phase = phase0
                    + if is_right(pos) {
                        class.phase_offset_rad
                    } else {
                        0.0
                    };
                let mut axes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
                for k in 0..n {
                    let t = k as f64 * dt;
                    let wave = amp
                        * ((omega * t + phase).sin()
                            + class.harmonic * (3.0 * (omega * t + phase)).sin());
                    for (a, axis) in axes.iter_mut().enumerate() {
                        axis[k] = (G + wave) * u[a] + noise.sample(&mut r);
                    }
                }
                rows.extend(axes);
            }
            let data = ChannelMatrix::from_rows(rows)?;
            let series = MultiChannelSeries::new(
                data,
                spec.sample_rate_hz,
                layout.clone(),
                subject_id(s),
                class.name.clone(),
            )?
            .with_labels(vec![Some(c); n])?;
            out.push(series);
        }
    }
    Ok(out)
}
