// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint file: `u64` LE header length, a JSON header with the config
//! and named tensor offsets, then every tensor as LE `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};

const FORMAT: &str = "poshid-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset from the start of the data section.
    offset: usize,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        self.weights.for_each_tensor(|name, shape, values| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: data.len(),
            });
            for v in values {
                data.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        });
        let header = Header {
            format: FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + data.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 8 {
            return Err(bad("file shorter than its length prefix"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(8..8usize.saturating_add(hlen))
            .ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT || header.version != 1 {
            return Err(bad(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        header.config.validate()?;
        let data = &bytes[8 + hlen..];
        let mut weights = Weights::zeros(&header.config);
        let mut expected = Vec::new();
        weights.for_each_tensor(|name, shape, _| expected.push((name, shape)));
        if expected.len() != header.tensors.len() {
            return Err(bad("tensor count does not match config"));
        }
        let mut slices = Vec::with_capacity(expected.len());
        let mut consumed = 0usize;
        for ((name, shape), t) in expected.iter().zip(&header.tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(bad(format!(
                    "expected tensor {name} {shape:?}, found {}",
                    t.name
                )));
            }
            let n = shape[0] * shape[1] * 4;
            let raw = data
                .get(t.offset..t.offset + n)
                .ok_or_else(|| bad(format!("tensor {name} runs past end of file")))?;
            consumed += n;
            slices.push(raw);
        }
        if consumed != data.len() {
            return Err(bad("trailing or overlapping tensor data"));
        }
        let mut it = slices.into_iter();
        weights.for_each_tensor_mut(|dst| {
            let raw = it.next().expect("one slice per tensor");
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
            }
        });
        Model::from_weights(header.config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_checkpoint_bytes(&bytes)
    }
}
