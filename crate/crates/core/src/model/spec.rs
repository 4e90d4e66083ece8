use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::nn::conv_out_len;
use crate::pseudo_labels::{LimbPair, PseudoLabeler, N_BINS};
use crate::timeseries::SensorPosition;

/// Shared convolutional encoder: three valid convolutions with ReLU and
/// dropout, then global max pooling over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub conv_channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub dropout: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            conv_channels: vec![32, 64, 96],
            kernel_sizes: vec![24, 16, 8],
            stride: 1,
            dropout: 0.1,
        }
    }
}

impl EncoderSpec {
    /// Size of the pooled embedding.
    pub fn embedding_dim(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&0)
    }

    /// Time-axis lengths after each convolution, or `None` if the window is
    /// too short for the chain.
    pub fn conv_lengths(&self, window_len: usize) -> Option<Vec<usize>> {
        let mut len = window_len;
        let mut out = Vec::with_capacity(self.kernel_sizes.len());
        for &k in &self.kernel_sizes {
            len = conv_out_len(len, k, self.stride)?;
            out.push(len);
        }
        Some(out)
    }

    /// Shortest window the encoder accepts.
    pub fn min_window_len(&self) -> usize {
        (1..)
            .find(|&l| self.conv_lengths(l).is_some())
            .expect("finite kernels")
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.kernel_sizes.len() {
            return Err(PimError::InvalidParameter(
                "encoder needs matching, non-empty channel and kernel lists".into(),
            ));
        }
        if self.stride == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(PimError::InvalidParameter(
                "encoder stride must be >= 1 and dropout in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Angle,
    Speed,
    Symmetry,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputNonlinearity {
    Sigmoid,
    None,
}

/// One prediction head on top of the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: Task,
    /// Sensor position for angle/speed, limb pair name for symmetry.
    pub key: String,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub output_nonlinearity: OutputNonlinearity,
}

/// Hidden widths of every pretext head.
pub const SAM_HIDDEN: [usize; 2] = [256, 128];

impl HeadSpec {
    pub fn angle(position: &SensorPosition) -> Self {
        HeadSpec {
            task: Task::Angle,
            key: position.to_string(),
            hidden: SAM_HIDDEN.to_vec(),
            output_dim: 3 * N_BINS,
            output_nonlinearity: OutputNonlinearity::Sigmoid,
        }
    }

    pub fn speed(position: &SensorPosition) -> Self {
        HeadSpec {
            task: Task::Speed,
            key: position.to_string(),
            hidden: SAM_HIDDEN.to_vec(),
            output_dim: N_BINS,
            output_nonlinearity: OutputNonlinearity::None,
        }
    }

    pub fn symmetry(pair: LimbPair) -> Self {
        HeadSpec {
            task: Task::Symmetry,
            key: pair.to_string(),
            hidden: SAM_HIDDEN.to_vec(),
            output_dim: N_BINS,
            output_nonlinearity: OutputNonlinearity::None,
        }
    }

    pub fn classifier(n_classes: usize) -> Self {
        HeadSpec {
            task: Task::Classifier,
            key: "activity".into(),
            hidden: Vec::new(),
            output_dim: n_classes,
            output_nonlinearity: OutputNonlinearity::None,
        }
    }
}

/// One angle and one speed head per sensor, one symmetry head per limb pair.
pub fn build_heads(sensors: &[SensorPosition], pairs: &[LimbPair]) -> Result<Vec<HeadSpec>> {
    if sensors.is_empty() {
        return Err(PimError::NoSensors);
    }
    if pairs.is_empty() {
        log::info!("no limb pairs configured; training without symmetry heads");
    }
    let mut heads: Vec<HeadSpec> = sensors.iter().map(HeadSpec::angle).collect();
    heads.extend(sensors.iter().map(HeadSpec::speed));
    heads.extend(pairs.iter().copied().map(HeadSpec::symmetry));
    Ok(heads)
}

/// Heads matching a labeler's sensors and pairs.
pub fn heads_for(labeler: &PseudoLabeler) -> Result<Vec<HeadSpec>> {
    let pairs: Vec<LimbPair> = labeler.pairs.iter().map(|p| p.pair).collect();
    build_heads(&labeler.sensors, &pairs)
}

/// Weights of the symmetry, angle and motion loss families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            max_epochs: 100,
            batch_size: 64,
            seed: 0,
            val_fraction: 0.3,
            patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(PimError::InvalidParameter(format!(
                "train config needs lr > 0, batch_size >= 1, val_fraction in [0, 1): {self:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pamap_window_chain() {
        let e = EncoderSpec::default();
        assert_eq!(e.conv_lengths(200), Some(vec![177, 162, 155]));
        assert_eq!(e.embedding_dim(), 96);
        assert_eq!(e.min_window_len(), 46);
        assert_eq!(e.conv_lengths(45), None);
        assert_eq!(e.conv_lengths(46), Some(vec![23, 8, 1]));
    }

    #[test]
    fn head_counts() {
        let sensors: Vec<SensorPosition> =
            ["left_wrist", "right_wrist", "left_ankle", "right_ankle"]
                .map(SensorPosition::from)
                .to_vec();
        let heads = build_heads(&sensors, &[LimbPair::Arms, LimbPair::Legs]).unwrap();
        let count = |t: Task| heads.iter().filter(|h| h.task == t).count();
        assert_eq!(
            (
                count(Task::Angle),
                count(Task::Speed),
                count(Task::Symmetry)
            ),
            (4, 4, 2)
        );
        assert!(heads
            .iter()
            .filter(|h| h.task == Task::Angle)
            .all(|h| h.output_dim == 33));
        assert!(heads
            .iter()
            .filter(|h| h.task != Task::Angle)
            .all(|h| h.output_dim == 11));

        let one = build_heads(&sensors[..1], &[]).unwrap();
        assert_eq!(one.len(), 2);
        assert!(matches!(build_heads(&[], &[]), Err(PimError::NoSensors)));
    }
}
