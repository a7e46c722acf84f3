//! Checkpoint files.
//!
//! ```text
//! microsegnet-ckpt-v1\n
//! {json header}\n
//! raw little-endian f32 tensors, in header order
//! ```
//!
//! The header echoes both configs, the training metadata, and the name,
//! shape and element offset of every tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::MicroSegNet;
use crate::nn::Module;

pub const CHECKPOINT_FORMAT: &str = "microsegnet-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Epochs completed; 0 for an untrained model.
    pub epoch: usize,
    pub seed: u64,
    /// Mean training loss of each completed epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    train: TrainConfig,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MicroSegNet<f32>,
    pub train: TrainConfig,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for p in self.model.params() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
            });
            offset += p.len();
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            model: self.model.config.clone(),
            train: self.train.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let mut buf = Vec::with_capacity(offset * 4 + 4096);
        buf.extend_from_slice(CHECKPOINT_FORMAT.as_bytes());
        buf.push(b'\n');
        buf.extend_from_slice(&serde_json::to_vec(&header)?);
        buf.push(b'\n');
        for p in self.model.params() {
            for v in &p.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing format line".into()))?;
        if &bytes[..magic_end] != CHECKPOINT_FORMAT.as_bytes() {
            return Err(bad(format!(
                "unknown format {:?}",
                String::from_utf8_lossy(&bytes[..magic_end.min(64)])
            )));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..header_end]).map_err(|e| bad(e.to_string()))?;
        let data = &rest[header_end + 1..];
        let mut model = MicroSegNet::<f32>::new(&header.model, 0)?;
        let total: usize = model.params().iter().map(|p| p.len()).sum();
        if data.len() != total * 4 {
            return Err(bad(format!("expected {} tensor bytes, found {}", total * 4, data.len())));
        }
        let params = model.params_mut();
        if params.len() != header.tensors.len() {
            return Err(bad(format!(
                "{} tensors in file, model has {}",
                header.tensors.len(),
                params.len()
            )));
        }
        for (p, entry) in params.into_iter().zip(&header.tensors) {
            if p.name != entry.name || p.shape != entry.shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    entry.name, entry.shape, p.name, p.shape
                )));
            }
            let start = entry.offset * 4;
            for (i, v) in p.value.iter_mut().enumerate() {
                let b = &data[start + 4 * i..start + 4 * i + 4];
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        Ok(Self {
            model,
            train: header.train,
            meta: header.meta,
        })
    }

    /// Fails unless the stored model config equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with {:?}, requested {:?}",
                self.model.config, expected
            )));
        }
        Ok(())
    }
}
