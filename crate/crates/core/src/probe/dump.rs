// SPDX-License-Identifier: MIT OR Apache-2.0

//! Averaged hidden-state dumps and the PHSD file format.
//!
//! Layout: `b"PHSD"`, then `u32` LE `version`, `n_layers`, `seq_len`,
//! `hidden_size`, then `f32` LE values in layer, position, channel order.
//! Metadata lives in a JSON sidecar at `<path>.json`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Series;
use crate::toymodel::{ForwardOverrides, Model, Session, BOS};

const MAGIC: &[u8; 4] = b"PHSD";
const VERSION: u32 = 1;
const SAMPLES_PER_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpMetadata {
    pub model_id: String,
    /// Where in the layer the activations were read, e.g. `"residual_in"`.
    pub capture_point: String,
    pub input: String,
    /// Number of inputs averaged.
    pub samples: u64,
    /// 1-based layer numbers, one per stored layer.
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateDump {
    seq_len: usize,
    hidden_size: usize,
    values: Vec<f32>,
    metadata: DumpMetadata,
}

impl HiddenStateDump {
    pub fn new(
        seq_len: usize,
        hidden_size: usize,
        values: Vec<f32>,
        metadata: DumpMetadata,
    ) -> Result<Self> {
        let n_layers = metadata.layers.len();
        if n_layers == 0 || seq_len == 0 || hidden_size == 0 {
            return Err(Error::invalid("dump dimensions must be positive"));
        }
        if values.len() != n_layers * seq_len * hidden_size {
            return Err(Error::invalid(format!(
                "{} values for {n_layers}x{seq_len}x{hidden_size} dump",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dump values must be finite"));
        }
        Ok(HiddenStateDump {
            seq_len,
            hidden_size,
            values,
            metadata,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.metadata.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn metadata(&self) -> &DumpMetadata {
        &self.metadata
    }

    /// Layer numbers in storage order.
    pub fn layers(&self) -> &[usize] {
        &self.metadata.layers
    }

    /// Activation at storage layer index `li`, position `p`, 1-based `channel`.
    pub fn get(&self, li: usize, p: usize, channel: usize) -> f32 {
        self.values[(li * self.seq_len + p) * self.hidden_size + channel - 1]
    }

    /// Values of one 1-based channel across positions at storage index `li`.
    pub fn channel(&self, li: usize, channel: usize) -> Result<Series> {
        if li >= self.n_layers() || channel == 0 || channel > self.hidden_size {
            return Err(Error::invalid(format!(
                "layer index {li} / channel {channel} outside dump"
            )));
        }
        Series::new(
            (0..self.seq_len)
                .map(|p| f64::from(self.get(li, p, channel)))
                .collect(),
        )
    }

    /// Residual input of a layer at one position, all channels.
    pub fn position(&self, li: usize, p: usize) -> &[f32] {
        let at = (li * self.seq_len + p) * self.hidden_size;
        &self.values[at..at + self.hidden_size]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.n_layers() as u32,
            self.seq_len as u32,
            self.hidden_size as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary part; `metadata` supplies what the header lacks.
    pub fn from_bytes(bytes: &[u8], metadata: Option<DumpMetadata>) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "PHSD dump",
            detail,
        };
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(bad("missing PHSD magic".into()));
        }
        let field = |i: usize| {
            let at = 4 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
        };
        if field(0) != VERSION as usize {
            return Err(bad(format!("unsupported version {}", field(0))));
        }
        let (n_layers, seq_len, hidden) = (field(1), field(2), field(3));
        let count = n_layers
            .checked_mul(seq_len)
            .and_then(|v| v.checked_mul(hidden))
            .ok_or_else(|| bad("dimensions overflow".into()))?;
        if bytes.len() != 20 + 4 * count {
            return Err(bad(format!(
                "expected {} value bytes, found {}",
                4 * count,
                bytes.len() - 20
            )));
        }
        let values: Vec<f32> = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let metadata = match metadata {
            Some(m) if m.layers.len() != n_layers => {
                return Err(bad(format!(
                    "sidecar lists {} layers, file has {n_layers}",
                    m.layers.len()
                )))
            }
            Some(m) => m,
            None => DumpMetadata {
                model_id: String::new(),
                capture_point: "unknown".into(),
                input: "unknown".into(),
                samples: 0,
                layers: (1..=n_layers).collect(),
            },
        };
        HiddenStateDump::new(seq_len, hidden, values, metadata).map_err(|e| bad(e.to_string()))
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the dump and its JSON sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        let mut text = serde_json::to_string_pretty(&self.metadata)?;
        text.push('\n');
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    /// Reads a dump; the sidecar is used when present.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        let metadata = match std::fs::read_to_string(&side) {
            Ok(text) => Some(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(side, e)),
        };
        HiddenStateDump::from_bytes(&bytes, metadata)
    }
}

/// Random input: BOS followed by printable ASCII bytes, `len` tokens in all.
pub(crate) fn random_bytes_input(rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    let mut t = Vec::with_capacity(len);
    t.push(BOS);
    t.extend((1..len).map(|_| rng.random_range(0x20u32..0x7f)));
    t
}

/// Mean residual-stream input of every layer over `n_samples` random
/// strings of `seq_len` tokens. Samples are drawn from
/// `ChaCha8Rng::seed_from_u64(seed)` in order.
pub fn mean_hidden_dump(
    model: &Model,
    n_samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<HiddenStateDump> {
    let c = model.config();
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if seq_len == 0 || seq_len > c.max_seq {
        return Err(Error::invalid(format!(
            "dump length {seq_len} outside 1..={}",
            c.max_seq
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<u32>> = (0..n_samples)
        .map(|_| random_bytes_input(&mut rng, seq_len))
        .collect();
    let (l, d) = (c.n_layers, c.d_model);
    let size = l * seq_len * d;

    let chunk_sums: Vec<Vec<f64>> = inputs
        .par_chunks(SAMPLES_PER_CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; size];
            for tokens in chunk {
                let mut s = Session::new(model, ForwardOverrides::none())?;
                s.extend(tokens)?;
                for l0 in 0..l {
                    for p in 0..seq_len {
                        let at = (l0 * seq_len + p) * d;
                        for (a, &x) in acc[at..at + d].iter_mut().zip(s.layer_input(p, l0)) {
                            *a += x;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut total = vec![0.0; size];
    for part in &chunk_sums {
        total.iter_mut().zip(part).for_each(|(t, v)| *t += v);
    }
    let inv = 1.0 / n_samples as f64;
    let values = total.iter().map(|v| (v * inv) as f32).collect();
    let metadata = DumpMetadata {
        model_id: model.id(),
        capture_point: "residual_in".into(),
        input: format!("random printable bytes, len {seq_len}, seed {seed}"),
        samples: n_samples as u64,
        layers: (1..=l).collect(),
    };
    HiddenStateDump::new(seq_len, d, values, metadata)
}
