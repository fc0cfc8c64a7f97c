//! `MUXC` checkpoint files.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "MUXC" | version | descriptor length | descriptor (UTF-8 JSON)
//!        | tensor count | { rank | dims… | f32 data… }* | CRC32 of all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MUXC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    /// `classifier` or `multiplexer`.
    pub kind: String,
    pub architecture: serde_json::Value,
    /// Role of each stored tensor, in order.
    pub tensor_names: Vec<String>,
    pub seed: u64,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: CheckpointDescriptor,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.descriptor.tensor_names.len() != self.tensors.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "{} tensor names for {} tensors",
                    self.descriptor.tensor_names.len(),
                    self.tensors.len()
                ),
            ));
        }
        let desc = serde_json::to_vec(&self.descriptor).map_err(|e| Error::Format {
            kind: "checkpoint",
            detail: e.to_string(),
        })?;
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.len_u32(desc.len())?;
        w.bytes(&desc);
        w.len_u32(self.tensors.len())?;
        for t in &self.tensors {
            w.tensor(t)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _version) = Reader::open("checkpoint", bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let len = r.usize()?;
        let desc = r.bytes(len)?;
        let count = r.usize()?;
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let descriptor: CheckpointDescriptor = serde_json::from_slice(desc).map_err(|e| Error::Format {
            kind: "checkpoint",
            detail: format!("descriptor: {e}"),
        })?;
        if descriptor.tensor_names.len() != tensors.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: "tensor name count does not match tensor count".into(),
            });
        }
        Ok(Self { descriptor, tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
