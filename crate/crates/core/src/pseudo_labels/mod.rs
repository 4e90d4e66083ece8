//! Physics-derived pretext targets: speed of motion, angles and symmetry per
//! window, discretized into eleven pseudo-classes each.
//!
//! Features are computed on raw physical-unit windows (before z-scoring).
//! Activity labels are never read on this path.

mod ahrs;
mod discretize;
mod features;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use ahrs::{Madgwick, Quaternion};
pub use discretize::{
    discretize, fit_uniform_discretizer, fixed_angle_discretizer, Discretizer, DiscretizerKind,
    N_BINS,
};
pub use features::{
    angle_feature, angles_from_ahrs, angles_from_gravity, gravity_estimate, magnitude,
    speed_of_motion, symmetry_feature, AngleFeature, LimbPair, SpeedFeature, SymmetryFeature,
    Triaxial,
};

use crate::error::{PimError, Result};
use crate::par;
use crate::timeseries::{Layout, Modality, SensorPosition, Window};

/// Discretized targets of one window.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub speed_bins: BTreeMap<SensorPosition, usize>,
    pub angle_bins: BTreeMap<SensorPosition, [usize; 3]>,
    pub symmetry_bins: BTreeMap<LimbPair, usize>,
}

/// Continuous features of one window, before binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeatures {
    pub speed: BTreeMap<SensorPosition, f64>,
    pub angle: BTreeMap<SensorPosition, [f64; 3]>,
    pub symmetry: BTreeMap<LimbPair, f64>,
}

/// One left/right pair used for symmetry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub pair: LimbPair,
    pub left: SensorPosition,
    pub right: SensorPosition,
}

/// How to source per-timestep angles for a sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSource {
    /// Orientation filter when a gyroscope triple exists, gravity otherwise.
    #[default]
    Auto,
    GravityOnly,
}

const ARM_WORDS: [&str; 4] = ["wrist", "arm", "hand", "elbow"];
const LEG_WORDS: [&str; 7] = ["ankle", "leg", "thigh", "shin", "knee", "foot", "calf"];

fn limb_of(position: &SensorPosition) -> Option<(LimbPair, bool)> {
    let name = position.as_str().to_ascii_lowercase();
    let left = if name.contains("left") {
        true
    } else if name.contains("right") {
        false
    } else {
        return None;
    };
    if ARM_WORDS.iter().any(|w| name.contains(w)) {
        Some((LimbPair::Arms, left))
    } else if LEG_WORDS.iter().any(|w| name.contains(w)) {
        Some((LimbPair::Legs, left))
    } else {
        None
    }
}

/// Left/right arm and leg pairs that exist among `positions`.
pub fn default_pairs(positions: &[SensorPosition]) -> Vec<PairSpec> {
    let mut out = Vec::new();
    for pair in [LimbPair::Arms, LimbPair::Legs] {
        let find = |want_left: bool| {
            positions
                .iter()
                .find(|p| limb_of(p) == Some((pair, want_left)))
                .cloned()
        };
        if let (Some(left), Some(right)) = (find(true), find(false)) {
            out.push(PairSpec { pair, left, right });
        }
    }
    out
}

/// Computes features and pseudo-labels for windows of one sensor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeler {
    pub layout: Layout,
    pub sample_rate_hz: f64,
    pub sensors: Vec<SensorPosition>,
    pub pairs: Vec<PairSpec>,
    pub angle_source: AngleSource,
    pub ahrs_beta: f64,
    pub dtw_band: Option<usize>,
}

/// Madgwick gain used unless configured otherwise.
pub const DEFAULT_AHRS_BETA: f64 = 0.1;

impl PseudoLabeler {
    /// Uses every accelerometer triple in the layout and the default limb pairs.
    pub fn from_layout(layout: &Layout, sample_rate_hz: f64) -> Result<Self> {
        let sensors = layout.accel_positions();
        let pairs = default_pairs(&sensors);
        Self::new(layout, sample_rate_hz, sensors, pairs)
    }

    pub fn new(
        layout: &Layout,
        sample_rate_hz: f64,
        sensors: Vec<SensorPosition>,
        pairs: Vec<PairSpec>,
    ) -> Result<Self> {
        if sensors.is_empty() {
            return Err(PimError::NoSensors);
        }
        for p in sensors
            .iter()
            .chain(pairs.iter().flat_map(|p| [&p.left, &p.right]))
        {
            if layout.triple(p, Modality::Accel).is_none() {
                return Err(PimError::MissingSensor(p.to_string()));
            }
        }
        if pairs.is_empty() {
            log::warn!("no left/right limb pair in the layout; symmetry targets are skipped");
        }
        Ok(PseudoLabeler {
            layout: layout.clone(),
            sample_rate_hz,
            sensors,
            pairs,
            angle_source: AngleSource::Auto,
            ahrs_beta: DEFAULT_AHRS_BETA,
            dtw_band: None,
        })
    }

    fn triaxial(&self, w: &Window, p: &SensorPosition, m: Modality) -> Option<Triaxial> {
        let idx = self.layout.triple(p, m)?;
        Some(idx.map(|c| w.data.row(c).to_vec()))
    }

    fn accel(&self, w: &Window, p: &SensorPosition) -> Result<Triaxial> {
        self.triaxial(w, p, Modality::Accel)
            .ok_or_else(|| PimError::MissingSensor(p.to_string()))
    }

    /// Continuous features of one raw-unit window.
    pub fn features(&self, w: &Window) -> Result<RawFeatures> {
        if w.n_channels() != self.layout.len() {
            return Err(PimError::ShapeMismatch(format!(
                "window has {} channels, layout {}",
                w.n_channels(),
                self.layout.len()
            )));
        }
        let mut speed = BTreeMap::new();
        let mut angle = BTreeMap::new();
        for p in &self.sensors {
            let acc = self.accel(w, p)?;
            speed.insert(
                p.clone(),
                speed_of_motion(p, &acc, self.sample_rate_hz)?.delta_d,
            );
            let gyro = match self.angle_source {
                AngleSource::Auto => self.triaxial(w, p, Modality::Gyro),
                AngleSource::GravityOnly => None,
            };
            let angles = match gyro {
                Some(gyro) => {
                    let mag = self.triaxial(w, p, Modality::Mag);
                    angles_from_ahrs(
                        &acc,
                        &gyro,
                        mag.as_ref(),
                        self.sample_rate_hz,
                        self.ahrs_beta,
                    )?
                }
                None => angles_from_gravity(&gravity_estimate(&acc, self.sample_rate_hz)?)?,
            };
            angle.insert(p.clone(), angle_feature(p, &angles)?.delta_r);
        }
        let mut symmetry = BTreeMap::new();
        for spec in &self.pairs {
            let a1 = self.accel(w, &spec.left)?;
            let a2 = self.accel(w, &spec.right)?;
            let s = symmetry_feature(spec.pair, &a1, &a2, self.sample_rate_hz, self.dtw_band)?;
            symmetry.insert(spec.pair, s.delta_d_symmetry);
        }
        Ok(RawFeatures {
            speed,
            angle,
            symmetry,
        })
    }

    /// Features for many windows, computed in parallel, returned in order.
    pub fn features_all(&self, windows: &[Window]) -> Result<Vec<RawFeatures>> {
        par::map_indexed(windows, |i, w| {
            self.features(w)
                .map_err(|e| e.context(format!("window {i} of subject {}", w.subject_id)))
        })
        .into_iter()
        .collect()
    }

    /// Fits speed and symmetry bins on the pre-training corpus; angles use
    /// the fixed grid.
    pub fn fit(&self, features: &[RawFeatures]) -> Result<DiscretizerSet> {
        if features.is_empty() {
            return Err(PimError::EmptyInput("no features to fit discretizers on"));
        }
        let mut speed = BTreeMap::new();
        for p in &self.sensors {
            let values: Vec<f64> = features
                .iter()
                .filter_map(|f| f.speed.get(p).copied())
                .collect();
            let d = fit_uniform_discretizer(&values, N_BINS)
                .map_err(|e| e.context(format!("speed bins for {p}")))?;
            speed.insert(p.clone(), d);
        }
        let mut symmetry = BTreeMap::new();
        for spec in &self.pairs {
            let values: Vec<f64> = features
                .iter()
                .filter_map(|f| f.symmetry.get(&spec.pair).copied())
                .collect();
            let d = fit_uniform_discretizer(&values, N_BINS)
                .map_err(|e| e.context(format!("symmetry bins for {}", spec.pair)))?;
            symmetry.insert(spec.pair, d);
        }
        Ok(DiscretizerSet {
            speed,
            angle: fixed_angle_discretizer(),
            symmetry,
        })
    }

    /// Bins one window's features.
    pub fn label(&self, f: &RawFeatures, d: &DiscretizerSet) -> Result<PseudoLabelSet> {
        let mut out = PseudoLabelSet::default();
        for p in &self.sensors {
            let missing = || PimError::MissingSensor(p.to_string());
            let v = *f.speed.get(p).ok_or_else(missing)?;
            out.speed_bins
                .insert(p.clone(), d.speed.get(p).ok_or_else(missing)?.discretize(v));
            let r = f.angle.get(p).ok_or_else(missing)?;
            out.angle_bins
                .insert(p.clone(), r.map(|x| d.angle.discretize(x)));
        }
        for spec in &self.pairs {
            let missing = || PimError::MissingSensor(spec.pair.to_string());
            let v = *f.symmetry.get(&spec.pair).ok_or_else(missing)?;
            let disc = d.symmetry.get(&spec.pair).ok_or_else(missing)?;
            out.symmetry_bins.insert(spec.pair, disc.discretize(v));
        }
        Ok(out)
    }

    /// Pseudo-class counts `(speed, angle, symmetry)`:
    /// `n * 11`, `3 * n * 11` and `d * 11`.
    pub fn class_counts(&self) -> (usize, usize, usize) {
        let n = self.sensors.len();
        let d = self.pairs.len();
        (n * N_BINS, 3 * n * N_BINS, d * N_BINS)
    }
}

/// Fitted binning for every target of a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizerSet {
    pub speed: BTreeMap<SensorPosition, Discretizer>,
    pub angle: Discretizer,
    pub symmetry: BTreeMap<LimbPair, Discretizer>,
}

impl DiscretizerSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Attaches pseudo-labels to every window. Output order matches input order
/// and does not depend on the thread schedule.
pub fn build_pseudo_labels(
    windows: &[Window],
    labeler: &PseudoLabeler,
    discretizers: &DiscretizerSet,
) -> Result<Vec<Window>> {
    let features = labeler.features_all(windows)?;
    windows
        .iter()
        .zip(&features)
        .map(|(w, f)| {
            let mut out = w.clone();
            out.pseudo = Some(labeler.label(f, discretizers)?);
            Ok(out)
        })
        .collect()
}

/// One line of the pseudo-label export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub subject_id: String,
    pub window_index: usize,
    pub speed: BTreeMap<SensorPosition, usize>,
    pub angle: BTreeMap<SensorPosition, [usize; 3]>,
    pub symmetry: BTreeMap<LimbPair, usize>,
}

impl PseudoLabelRecord {
    pub fn from_window(w: &Window) -> Result<Self> {
        let p = w
            .pseudo
            .as_ref()
            .ok_or(PimError::NoPseudoLabels(w.window_index))?;
        Ok(PseudoLabelRecord {
            subject_id: w.subject_id.clone(),
            window_index: w.window_index,
            speed: p.speed_bins.clone(),
            angle: p.angle_bins.clone(),
            symmetry: p.symmetry_bins.clone(),
        })
    }

    pub fn into_label_set(self) -> PseudoLabelSet {
        PseudoLabelSet {
            speed_bins: self.speed,
            angle_bins: self.angle,
            symmetry_bins: self.symmetry,
        }
    }
}

/// Writes one JSON object per labelled window.
pub fn write_jsonl<W: Write>(windows: &[Window], mut out: W) -> Result<()> {
    for w in windows {
        let line = serde_json::to_string(&PseudoLabelRecord::from_window(w)?)?;
        writeln!(out, "{line}").map_err(|e| PimError::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<PseudoLabelRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
