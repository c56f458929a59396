//! Versioned checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DMCK" | u16 version | u32 config_len | config JSON | 32-byte SHA-256 of the JSON
//!        | u64 step | u32 tensor_count
//!        | tensors: u16 name_len | name | u32 rows | u32 cols | rows·cols × f32
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tensor::Matrix;
use super::{ModelError, RankerModel};
use crate::config::Config;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint corrupt at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checkpoint config hash mismatch: stored {stored}, computed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("checkpoint was trained with config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl RankerModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&Sha256::digest(&config));
        out.extend_from_slice(&self.step.to_le_bytes());
        let mut tensors = Vec::new();
        self.visit(&mut |name, m| tensors.push((name, m)));
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for x in m.data() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Corrupt {
                offset: 0,
                reason: "bad magic".into(),
            }
            .into());
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Corrupt {
                offset: 4,
                reason: format!("unsupported version {version}"),
            }
            .into());
        }
        let len = r.u32("config length")? as usize;
        let config_offset = r.pos;
        let config_bytes = r.take(len, "config")?;
        let stored = hex::encode(r.take(32, "config hash")?);
        let computed = hex::encode(Sha256::digest(config_bytes));
        if stored != computed {
            return Err(CheckpointError::HashMismatch { stored, computed }.into());
        }
        let config: Config =
            serde_json::from_slice(config_bytes).map_err(|e| CheckpointError::Corrupt {
                offset: config_offset,
                reason: format!("config: {e}"),
            })?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_offset = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::Corrupt {
                    offset: name_offset,
                    reason: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let raw = r.take(rows * cols * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(name, Matrix::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt {
                offset: r.pos,
                reason: "trailing bytes".into(),
            }
            .into());
        }

        let mut model = RankerModel::new(&config)?;
        model.step = step;
        let mut failure = None;
        model.visit_mut(&mut |name, m| {
            if failure.is_some() {
                return;
            }
            match tensors.remove(&name) {
                Some(t) if t.shape() == m.shape() => *m = t,
                Some(t) => {
                    failure = Some(CheckpointError::Tensor {
                        reason: format!("shape {:?}, model expects {:?}", t.shape(), m.shape()),
                        name,
                    })
                }
                None => {
                    failure = Some(CheckpointError::Tensor {
                        name,
                        reason: "missing".into(),
                    })
                }
            }
        });
        if let Some(e) = failure {
            return Err(e.into());
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(CheckpointError::Tensor {
                name,
                reason: "not part of the model".into(),
            }
            .into());
        }
        Ok(model)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let write = || -> std::io::Result<()> {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let tmp = path.with_extension("tmp");
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_checkpoint_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| CheckpointError::Io(e).into())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(CheckpointError::Io)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Loads and additionally requires the embedded config to hash to
    /// `expected_digest` (see [`Config::digest`]).
    pub fn load_expecting(path: &Path, expected_digest: &str) -> Result<Self, ModelError> {
        let model = Self::load(path)?;
        let found = model.config.digest();
        if found != expected_digest {
            return Err(CheckpointError::ConfigMismatch {
                expected: expected_digest.to_string(),
                found,
            }
            .into());
        }
        Ok(model)
    }

    /// Rounds every weight to `f32`, the precision checkpoints store.
    pub fn round_to_checkpoint_precision(&mut self) {
        self.visit_mut(&mut |_, m| {
            for x in m.data_mut() {
                *x = *x as f32 as f64;
            }
        });
    }
}
