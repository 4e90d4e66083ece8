//! Multi-channel IMU streams: data model, CSV ingestion, gap filling,
//! windowing and z-score normalization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::pseudo_labels::PseudoLabelSet;

/// Where a sensor is worn, e.g. `left_wrist` or `chest`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensorPosition(pub String);

impl SensorPosition {
    pub fn new(name: impl Into<String>) -> Self {
        SensorPosition(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SensorPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SensorPosition {
    fn from(s: &str) -> Self {
        SensorPosition(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Accel,
    Gyro,
    Mag,
}

impl Modality {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "accel" | "acc" => Some(Modality::Accel),
            "gyro" => Some(Modality::Gyro),
            "mag" => Some(Modality::Mag),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Accel => "accel",
            Modality::Gyro => "gyro",
            Modality::Mag => "mag",
        }
    }

    fn default_units(self) -> &'static str {
        match self {
            Modality::Accel => "m/s^2",
            Modality::Gyro => "rad/s",
            Modality::Mag => "uT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x" => Some(Axis::X),
            "y" => Some(Axis::Y),
            "z" => Some(Axis::Z),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Semantics of one channel of a stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub sensor_position: SensorPosition,
    pub modality: Modality,
    pub axis: Axis,
    pub units: String,
}

impl ChannelSpec {
    pub fn new(position: impl Into<String>, modality: Modality, axis: Axis) -> Self {
        ChannelSpec {
            sensor_position: SensorPosition::new(position),
            modality,
            axis,
            units: modality.default_units().to_string(),
        }
    }

    /// Parses a `<position>_<modality>_<axis>` column name. The position may
    /// itself contain underscores.
    pub fn parse_column(name: &str) -> Option<Self> {
        let mut parts = name.rsplitn(3, '_');
        let axis = Axis::parse(parts.next()?)?;
        let modality = Modality::parse(parts.next()?)?;
        let position = parts.next()?;
        if position.is_empty() {
            return None;
        }
        Some(ChannelSpec::new(position, modality, axis))
    }

    pub fn column_name(&self) -> String {
        format!(
            "{}_{}_{}",
            self.sensor_position,
            self.modality.as_str(),
            self.axis.as_str()
        )
    }
}

/// Ordered list of channel semantics.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Layout(pub Vec<ChannelSpec>);

impl Layout {
    pub fn new(channels: Vec<ChannelSpec>) -> Result<Self> {
        let layout = Layout(channels);
        layout.validate()?;
        Ok(layout)
    }

    /// Convenience constructor: accelerometer triples for each position, in order.
    pub fn accel_only<S: AsRef<str>>(positions: &[S]) -> Self {
        let mut channels = Vec::with_capacity(positions.len() * 3);
        for p in positions {
            for axis in Axis::ALL {
                channels.push(ChannelSpec::new(p.as_ref(), Modality::Accel, axis));
            }
        }
        Layout(channels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.0
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.0 {
            if !seen.insert((&c.sensor_position, c.modality, c.axis)) {
                return Err(PimError::ShapeMismatch(format!(
                    "duplicate channel {}",
                    c.column_name()
                )));
            }
        }
        Ok(())
    }

    /// Channel index of `(position, modality, axis)`.
    pub fn find(&self, position: &SensorPosition, modality: Modality, axis: Axis) -> Option<usize> {
        self.0.iter().position(|c| {
            &c.sensor_position == position && c.modality == modality && c.axis == axis
        })
    }

    /// Indices of the x, y, z channels of one sensor, if all three exist.
    pub fn triple(&self, position: &SensorPosition, modality: Modality) -> Option<[usize; 3]> {
        Some([
            self.find(position, modality, Axis::X)?,
            self.find(position, modality, Axis::Y)?,
            self.find(position, modality, Axis::Z)?,
        ])
    }

    /// Positions carrying a full accelerometer triple, in first-appearance order.
    pub fn accel_positions(&self) -> Vec<SensorPosition> {
        let mut out: Vec<SensorPosition> = Vec::new();
        for c in &self.0 {
            if c.modality == Modality::Accel
                && !out.contains(&c.sensor_position)
                && self.triple(&c.sensor_position, Modality::Accel).is_some()
            {
                out.push(c.sensor_position.clone());
            }
        }
        out
    }
}

/// Dense row-major matrix, one row per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix {
    n_channels: usize,
    n_samples: usize,
    data: Vec<f64>,
}

impl ChannelMatrix {
    pub fn zeros(n_channels: usize, n_samples: usize) -> Self {
        ChannelMatrix {
            n_channels,
            n_samples,
            data: vec![0.0; n_channels * n_samples],
        }
    }

    pub fn from_flat(n_channels: usize, n_samples: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_channels * n_samples {
            return Err(PimError::ShapeMismatch(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                n_channels,
                n_samples
            )));
        }
        Ok(ChannelMatrix {
            n_channels,
            n_samples,
            data,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_channels = rows.len();
        let n_samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_samples) {
            return Err(PimError::ShapeMismatch("ragged rows".into()));
        }
        Ok(ChannelMatrix {
            n_channels,
            n_samples,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty matrix yields no rows
        self.data
            .chunks_exact(self.n_samples.max(1))
            .take(self.n_channels)
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.n_samples + t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Copies columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> ChannelMatrix {
        let mut data = Vec::with_capacity(self.n_channels * len);
        for c in 0..self.n_channels {
            data.extend_from_slice(&self.row(c)[start..start + len]);
        }
        ChannelMatrix {
            n_channels: self.n_channels,
            n_samples: len,
            data,
        }
    }

    /// Stacks the given rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> ChannelMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_samples);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        ChannelMatrix {
            n_channels: rows.len(),
            n_samples: self.n_samples,
            data,
        }
    }
}

/// A uniformly sampled multi-channel stream from one subject and session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelSeries {
    pub data: ChannelMatrix,
    pub sample_rate_hz: f64,
    pub layout: Layout,
    pub subject_id: String,
    pub session_id: String,
    /// Per-sample activity ids, when the source is annotated.
    pub labels: Option<Vec<Option<usize>>>,
}

impl MultiChannelSeries {
    pub fn new(
        data: ChannelMatrix,
        sample_rate_hz: f64,
        layout: Layout,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0) {
            return Err(PimError::InvalidParameter(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if data.n_channels() != layout.len() {
            return Err(PimError::ShapeMismatch(format!(
                "{} data rows but {} channels in layout",
                data.n_channels(),
                layout.len()
            )));
        }
        layout.validate()?;
        Ok(MultiChannelSeries {
            data,
            sample_rate_hz,
            layout,
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != self.n_samples() {
            return Err(PimError::LengthMismatch(labels.len(), self.n_samples()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.data.n_samples()
    }

    pub fn n_channels(&self) -> usize {
        self.data.n_channels()
    }

    /// Sampling interval in seconds.
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }
}

/// One fixed-length segment of a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub data: ChannelMatrix,
    pub label: Option<usize>,
    pub pseudo: Option<PseudoLabelSet>,
    pub subject_id: String,
    pub session_id: String,
    /// Position of the window within its source series.
    pub window_index: usize,
}

impl Window {
    pub fn new(data: ChannelMatrix, subject_id: impl Into<String>) -> Self {
        Window {
            data,
            label: None,
            pseudo: None,
            subject_id: subject_id.into(),
            session_id: String::new(),
            window_index: 0,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn n_channels(&self) -> usize {
        self.data.n_channels()
    }

    pub fn len(&self) -> usize {
        self.data.n_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.data.n_samples() == 0
    }

    /// Same window with `data` replaced; labels and pseudo-labels carried over.
    pub fn with_data(&self, data: ChannelMatrix) -> Window {
        Window {
            data,
            label: self.label,
            pseudo: self.pseudo.clone(),
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            window_index: self.window_index,
        }
    }
}

/// Per-channel z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero; their std was replaced by 1.
    pub flagged: Vec<bool>,
}

/// Fills NaN gaps by linear interpolation between the nearest valid samples.
/// Leading and trailing gaps copy the nearest valid value.
pub fn interpolate_nan(series: &MultiChannelSeries) -> Result<MultiChannelSeries> {
    let mut out = series.clone();
    for c in 0..out.n_channels() {
        interpolate_row(out.data.row_mut(c))
            .map_err(|valid| PimError::AllNaNChannel { channel: c, valid })?;
    }
    Ok(out)
}

/// Interpolates one row in place; returns the count of valid samples on failure.
fn interpolate_row(row: &mut [f64]) -> std::result::Result<(), usize> {
    let valid: Vec<usize> = (0..row.len()).filter(|&i| !row[i].is_nan()).collect();
    if valid.len() < 2 {
        return Err(valid.len());
    }
    let first = valid[0];
    let last = *valid.last().unwrap();
    for i in 0..first {
        row[i] = row[first];
    }
    for i in last + 1..row.len() {
        row[i] = row[last];
    }
    for pair in valid.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi - lo < 2 {
            continue;
        }
        let (y0, y1) = (row[lo], row[hi]);
        let span = (hi - lo) as f64;
        for i in lo + 1..hi {
            let t = (i - lo) as f64 / span;
            row[i] = y0 + (y1 - y0) * t;
        }
    }
    Ok(())
}

/// Cuts the series into windows of `window_len` samples every `step` samples.
/// A trailing partial window is dropped.
pub fn sliding_windows(
    series: &MultiChannelSeries,
    window_len: usize,
    step: usize,
) -> Result<Vec<Window>> {
    if window_len == 0 || step == 0 {
        return Err(PimError::InvalidParameter(
            "window length and step must be positive".into(),
        ));
    }
    let n = series.n_samples();
    if n < window_len {
        return Err(PimError::SeriesTooShort {
            n_samples: n,
            window_len,
        });
    }
    let count = (n - window_len) / step + 1;
    let windows = (0..count)
        .map(|k| {
            let start = k * step;
            let label = series
                .labels
                .as_ref()
                .and_then(|l| majority_label(&l[start..start + window_len]));
            Window {
                data: series.data.slice_cols(start, window_len),
                label,
                pseudo: None,
                subject_id: series.subject_id.clone(),
                session_id: series.session_id.clone(),
                window_index: k,
            }
        })
        .collect();
    Ok(windows)
}

/// Most frequent annotated id; ties go to the smaller id.
fn majority_label(labels: &[Option<usize>]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        *counts.entry(*l).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (id, n) in counts {
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((id, n));
        }
    }
    best.map(|(id, _)| id)
}

/// Per-channel mean and standard deviation over every sample of every window.
pub fn fit_normalization(train_windows: &[Window]) -> Result<NormalizationStats> {
    let first = train_windows
        .first()
        .ok_or(PimError::EmptyInput("no training windows"))?;
    let n_c = first.n_channels();
    if let Some(w) = train_windows.iter().find(|w| w.n_channels() != n_c) {
        return Err(PimError::ShapeMismatch(format!(
            "window with {} channels, expected {n_c}",
            w.n_channels()
        )));
    }
    let mut mean = vec![0.0; n_c];
    let mut count = 0usize;
    for w in train_windows {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += w.data.row(c).iter().sum::<f64>();
        }
        count += w.len();
    }
    if count == 0 {
        return Err(PimError::EmptyInput("windows have no samples"));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; n_c];
    for w in train_windows {
        for (c, v) in var.iter_mut().enumerate() {
            *v += w
                .data
                .row(c)
                .iter()
                .map(|x| (x - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let mut std = Vec::with_capacity(n_c);
    let mut flagged = Vec::with_capacity(n_c);
    for (c, v) in var.into_iter().enumerate() {
        let s = (v / count as f64).sqrt();
        if s > 0.0 && s.is_finite() {
            std.push(s);
            flagged.push(false);
        } else {
            log::warn!("channel {c} has zero variance; normalizing with std = 1");
            std.push(1.0);
            flagged.push(true);
        }
    }
    Ok(NormalizationStats { mean, std, flagged })
}

/// z-scores every channel of the window.
pub fn apply_normalization(w: &Window, stats: &NormalizationStats) -> Result<Window> {
    check_stats(w, stats)?;
    let mut data = w.data.clone();
    for c in 0..data.n_channels() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for x in data.row_mut(c) {
            *x = (*x - m) / s;
        }
    }
    Ok(w.with_data(data))
}

/// Inverse of [`apply_normalization`].
pub fn invert_normalization(w: &Window, stats: &NormalizationStats) -> Result<Window> {
    check_stats(w, stats)?;
    let mut data = w.data.clone();
    for c in 0..data.n_channels() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for x in data.row_mut(c) {
            *x = *x * s + m;
        }
    }
    Ok(w.with_data(data))
}

fn check_stats(w: &Window, stats: &NormalizationStats) -> Result<()> {
    if stats.mean.len() != w.n_channels() || stats.std.len() != w.n_channels() {
        return Err(PimError::ShapeMismatch(format!(
            "stats for {} channels, window has {}",
            stats.mean.len(),
            w.n_channels()
        )));
    }
    Ok(())
}

/// Reads one `(subject, session)` CSV export.
///
/// Columns named `<position>_<modality>_<axis>` become channels. An optional
/// `timestamp_s` column is only used to check the sample rate (1 % tolerance),
/// and an optional `label` column holds integer activity ids. Empty cells and
/// `NaN` are read as missing.
pub fn read_csv(
    path: &Path,
    sample_rate_hz: f64,
    subject_id: &str,
    session_id: &str,
) -> Result<MultiChannelSeries> {
    let file = std::fs::File::open(path).map_err(|e| PimError::io(path, e))?;
    read_csv_from(file, sample_rate_hz, subject_id, session_id)
        .map_err(|e| e.context(path.display().to_string()))
}

pub fn read_csv_from<R: std::io::Read>(
    reader: R,
    sample_rate_hz: f64,
    subject_id: &str,
    session_id: &str,
) -> Result<MultiChannelSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut timestamp_col = None;
    let mut label_col = None;
    let mut channel_cols = Vec::new();
    let mut specs = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match h {
            "timestamp_s" => timestamp_col = Some(i),
            "label" => label_col = Some(i),
            _ => {
                let spec = ChannelSpec::parse_column(h)
                    .ok_or_else(|| PimError::Format(format!("unrecognised column `{h}`")))?;
                channel_cols.push(i);
                specs.push(spec);
            }
        }
    }
    let layout = Layout::new(specs)?;
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); channel_cols.len()];
    let mut timestamps = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record?;
        for (r, &col) in rows.iter_mut().zip(&channel_cols) {
            r.push(parse_cell(record.get(col).unwrap_or(""))?);
        }
        if let Some(col) = timestamp_col {
            timestamps.push(parse_cell(record.get(col).unwrap_or(""))?);
        }
        if let Some(col) = label_col {
            let cell = record.get(col).unwrap_or("");
            labels.push(if cell.is_empty() {
                None
            } else {
                Some(
                    cell.parse::<usize>().map_err(|_| {
                        PimError::Format(format!("label `{cell}` is not a class id"))
                    })?,
                )
            });
        }
    }
    if timestamp_col.is_some() {
        check_sample_rate(&timestamps, sample_rate_hz)?;
    }
    let data = ChannelMatrix::from_rows(rows)?;
    let series = MultiChannelSeries::new(data, sample_rate_hz, layout, subject_id, session_id)?;
    if label_col.is_some() {
        series.with_labels(labels)
    } else {
        Ok(series)
    }
}

fn parse_cell(cell: &str) -> Result<f64> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>()
        .map_err(|_| PimError::Format(format!("`{cell}` is not a number")))
}

fn check_sample_rate(timestamps: &[f64], expected_hz: f64) -> Result<()> {
    let valid: Vec<(usize, f64)> = timestamps
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, t)| t.is_finite())
        .collect();
    if valid.len() < 2 {
        return Ok(());
    }
    let (i0, t0) = valid[0];
    let (i1, t1) = valid[valid.len() - 1];
    let rate = (i1 - i0) as f64 / (t1 - t0);
    if ((rate - expected_hz) / expected_hz).abs() > 0.01 {
        return Err(PimError::Format(format!(
            "timestamps imply {rate:.3} Hz, configured {expected_hz} Hz"
        )));
    }
    Ok(())
}

/// Writes a series in the ingestion CSV schema (with `timestamp_s` and, when
/// present, `label`).
pub fn write_csv<W: std::io::Write>(series: &MultiChannelSeries, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp_s".to_string()];
    header.extend(
        series
            .layout
            .channels()
            .iter()
            .map(ChannelSpec::column_name),
    );
    if series.labels.is_some() {
        header.push("label".into());
    }
    wtr.write_record(&header)?;
    let dt = series.dt();
    for t in 0..series.n_samples() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(format!("{}", t as f64 * dt));
        for c in 0..series.n_channels() {
            let v = series.data.get(c, t);
            rec.push(if v.is_nan() {
                String::new()
            } else {
                format!("{v}")
            });
        }
        if let Some(labels) = &series.labels {
            rec.push(labels[t].map(|l| l.to_string()).unwrap_or_default());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| PimError::io("<csv writer>", e))?;
    Ok(())
}
