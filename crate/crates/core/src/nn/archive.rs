//! Versioned binary container: a JSON header describing named tensors,
//! followed by their raw little-endian `f64` blocks.
//!
//! ```text
//! magic      8 bytes   "PIMARCH\0"
//! version    u32 LE
//! header_len u64 LE
//! header     header_len bytes of UTF-8 JSON
//! blocks     for each tensor, for each of its `blocks`: prod(shape) f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};

pub const MAGIC: &[u8; 8] = b"PIMARCH\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Equal-length buffers, e.g. value and optimizer moments.
    pub blocks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub entries: Vec<ArchiveEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    blocks: usize,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Archive {
            kind: kind.into(),
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, blocks: Vec<Vec<f64>>) {
        self.entries.push(ArchiveEntry {
            name: name.into(),
            shape,
            blocks,
        });
    }

    pub fn entry(&self, name: &str) -> Result<&ArchiveEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| PimError::Format(format!("archive has no tensor `{name}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|e| TensorHeader {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    blocks: e.blocks.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| PimError::io("<archive>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for e in &self.entries {
            let n: usize = e.shape.iter().product();
            for b in &e.blocks {
                if b.len() != n {
                    return Err(PimError::ShapeMismatch(format!(
                        "tensor `{}` block has {} values, shape {:?}",
                        e.name,
                        b.len(),
                        e.shape
                    )));
                }
                let mut buf = Vec::with_capacity(n * 8);
                for v in b {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| PimError::io("<archive>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(PimError::Format("not a pim archive (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(PimError::Format(format!(
                "archive version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let mut blocks = Vec::with_capacity(t.blocks);
            for _ in 0..t.blocks {
                let mut raw = vec![0u8; n * 8];
                r.read_exact(&mut raw).map_err(io)?;
                blocks.push(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                );
            }
            entries.push(ArchiveEntry {
                name: t.name,
                shape: t.shape,
                blocks,
            });
        }
        Ok(Archive {
            kind: header.kind,
            meta: header.meta,
            entries,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| PimError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| PimError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| PimError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
            .map_err(|e| e.context(path.display().to_string()))
    }
}
