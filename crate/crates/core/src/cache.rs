//! Binary window cache: windows of one layout in a single archive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::nn::Archive;
use crate::pseudo_labels::PseudoLabelSet;
use crate::timeseries::{ChannelMatrix, Layout, Window};

pub const WINDOWS_KIND: &str = "pim-windows";

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub layout: Layout,
    pub sample_rate_hz: f64,
    pub windows: Vec<Window>,
    /// Fingerprint of the experiment config that produced the set.
    pub config_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WindowMeta {
    subject_id: String,
    session_id: String,
    window_index: usize,
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo: Option<PseudoLabelSet>,
}

#[derive(Serialize, Deserialize)]
struct SetMeta {
    layout: Layout,
    sample_rate_hz: f64,
    window_len: usize,
    windows: Vec<WindowMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_fingerprint: Option<String>,
}

impl WindowSet {
    pub fn to_archive(&self) -> Result<Archive> {
        let nc = self.layout.len();
        let len = self.windows.first().map_or(0, |w| w.len());
        let mut data = Vec::with_capacity(self.windows.len() * nc * len);
        let mut metas = Vec::with_capacity(self.windows.len());
        for w in &self.windows {
            if w.n_channels() != nc || w.len() != len {
                return Err(PimError::ShapeMismatch(format!(
                    "window {}x{} in a {nc}x{len} set",
                    w.n_channels(),
                    w.len()
                )));
            }
            data.extend_from_slice(w.data.as_slice());
            metas.push(WindowMeta {
                subject_id: w.subject_id.clone(),
                session_id: w.session_id.clone(),
                window_index: w.window_index,
                label: w.label,
                pseudo: w.pseudo.clone(),
            });
        }
        let meta = SetMeta {
            layout: self.layout.clone(),
            sample_rate_hz: self.sample_rate_hz,
            window_len: len,
            windows: metas,
            config_fingerprint: self.config_fingerprint.clone(),
        };
        let mut a = Archive::new(WINDOWS_KIND, serde_json::to_value(meta)?);
        a.push("data", vec![self.windows.len(), nc, len], vec![data]);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != WINDOWS_KIND {
            return Err(PimError::Format(format!(
                "expected a `{WINDOWS_KIND}` archive, found `{}`",
                a.kind
            )));
        }
        let meta: SetMeta = serde_json::from_value(a.meta.clone())?;
        let data = a.entry("data")?;
        let nc = meta.layout.len();
        let per = nc * meta.window_len;
        if data.shape != [meta.windows.len(), nc, meta.window_len] || data.blocks.len() != 1 {
            return Err(PimError::Format(
                "window data does not match its metadata".into(),
            ));
        }
        let windows = meta
            .windows
            .into_iter()
            .zip(data.blocks[0].chunks_exact(per.max(1)))
            .map(|(m, chunk)| {
                Ok(Window {
                    data: ChannelMatrix::from_flat(nc, meta.window_len, chunk.to_vec())?,
                    label: m.label,
                    pseudo: m.pseudo,
                    subject_id: m.subject_id,
                    session_id: m.session_id,
                    window_index: m.window_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowSet {
            layout: meta.layout,
            sample_rate_hz: meta.sample_rate_hz,
            windows,
            config_fingerprint: meta.config_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
