//! Model persistence.
//!
//! Layout: `SPNL`, a little-endian `u32` version, a little-endian `u32`
//! byte length followed by a UTF-8 JSON header, then every parameter as a
//! little-endian `f32` in serialization order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::report::{write_atomic, RunConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPNL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub image_size: usize,
    /// Absent for models that were not produced by a training run.
    pub run: Option<RunConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub class_names: Vec<String>,
    pub run: Option<RunConfig>,
}

impl Checkpoint {
    pub fn new(model: Model, class_names: Vec<String>, run: Option<RunConfig>) -> Result<Self> {
        if class_names.len() != model.classes() {
            return Err(Error::Checkpoint(format!(
                "{} class names for a {}-class model",
                class_names.len(),
                model.classes()
            )));
        }
        Ok(Checkpoint {
            model,
            class_names,
            run,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            model: self.model.config(),
            class_names: self.class_names.clone(),
            image_size: self.model.image_size(),
            run: self.run.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.model.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.model.parameter_blob());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::Checkpoint("file ends inside the preamble".into()))
        };
        if bytes.get(..4) != Some(MAGIC) {
            return Err(Error::Checkpoint("missing SPNL magic".into()));
        }
        let version = word(4)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = word(8)? as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Checkpoint("file ends inside the header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.image_size != header.model.backbone.image_size {
            return Err(Error::Checkpoint(format!(
                "header image size {} disagrees with the backbone's {}",
                header.image_size, header.model.backbone.image_size
            )));
        }

        let payload = &bytes[12 + len..];
        let shapes = Model::parameter_shapes(&header.model);
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if payload.len() != 4 * expected {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                4 * expected,
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        let params = shapes
            .iter()
            .map(|shape| {
                Tensor::new(
                    shape,
                    values.by_ref().take(shape.iter().product()).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model::from_parameters(header.model, params)?;
        Checkpoint::new(model, header.class_names, header.run)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
