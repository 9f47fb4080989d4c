// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative perturbations and capture requests for a forward pass.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::probe::Segment;

/// Inclusive 1-based layer range, serialized as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct LayerRange {
    lo: usize,
    hi: usize,
}

impl LayerRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!("bad layer range [{lo}, {hi}]")));
        }
        Ok(LayerRange { lo, hi })
    }

    pub fn single(layer: usize) -> Result<Self> {
        LayerRange::new(layer, layer)
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.lo..=self.hi).contains(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.lo..=self.hi
    }

    pub(crate) fn check(&self, n_layers: usize) -> Result<()> {
        if self.hi > n_layers {
            return Err(Error::invalid(format!(
                "layer range [{}, {}] exceeds {n_layers} layers",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

impl TryFrom<[usize; 2]> for LayerRange {
    type Error = Error;
    fn try_from(v: [usize; 2]) -> Result<Self> {
        LayerRange::new(v[0], v[1])
    }
}

impl From<LayerRange> for [usize; 2] {
    fn from(r: LayerRange) -> Self {
        [r.lo, r.hi]
    }
}

/// Which key columns a query row may attend to. Only columns `j <= i` are
/// ever considered; rules can remove causal edges but not add future ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    Causal,
    /// Rows inside the segment see only segment columns up to themselves,
    /// plus column 0 when `keep_first` is set.
    Crop {
        segment: Segment,
        keep_first: bool,
    },
}

impl MaskRule {
    pub fn allows(&self, row: usize, col: usize) -> bool {
        if col > row {
            return false;
        }
        match self {
            MaskRule::Causal => true,
            MaskRule::Crop {
                segment,
                keep_first,
            } => {
                if !segment.contains(row) {
                    true
                } else {
                    (*keep_first && col == 0) || segment.contains(col)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOverride {
    pub layers: LayerRange,
    pub rule: MaskRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Add(f64),
    Scale(f64),
}

/// Edit of one residual channel at the entry of each layer in range,
/// before normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEdit {
    pub layers: LayerRange,
    pub tokens: Segment,
    /// 1-based channel number.
    pub channel: usize,
    pub op: EditOp,
}

/// Post-softmax multiplication of the weights on a segment's columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBoost {
    pub layers: LayerRange,
    pub segment: Segment,
    pub factor: f64,
    #[serde(default = "default_true")]
    pub renormalize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCaptureRequest {
    /// 1-based layers.
    pub layers: Vec<usize>,
    /// 0-based heads; empty means all heads.
    #[serde(default)]
    pub heads: Vec<usize>,
    /// Record only the final row of each matrix.
    #[serde(default)]
    pub last_row_only: bool,
}

impl AttentionCaptureRequest {
    pub fn last_row(layers: impl IntoIterator<Item = usize>) -> Self {
        AttentionCaptureRequest {
            layers: layers.into_iter().collect(),
            heads: Vec::new(),
            last_row_only: true,
        }
    }

    pub fn full(layers: impl IntoIterator<Item = usize>) -> Self {
        AttentionCaptureRequest {
            layers: layers.into_iter().collect(),
            heads: Vec::new(),
            last_row_only: false,
        }
    }

    pub(crate) fn wants(&self, layer: usize, head: usize) -> bool {
        self.layers.contains(&layer) && (self.heads.is_empty() || self.heads.contains(&head))
    }
}

/// Everything a caller can change or observe in a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardOverrides {
    #[serde(default)]
    pub mask: Option<MaskOverride>,
    /// Position id per token; tokens past the end of the list use their index.
    #[serde(default)]
    pub position_ids: Option<Vec<u32>>,
    #[serde(default)]
    pub channel_edits: Vec<ChannelEdit>,
    #[serde(default)]
    pub attention_boosts: Vec<AttentionBoost>,
    /// 1-based layers whose residual input is recorded.
    #[serde(default)]
    pub capture_hidden: Vec<usize>,
    #[serde(default)]
    pub capture_attention: Option<AttentionCaptureRequest>,
    /// Replaces the embedding lookup with these vectors.
    #[serde(default)]
    pub embedded_input: Option<Vec<Vec<f64>>>,
}

impl ForwardOverrides {
    pub fn none() -> Self {
        ForwardOverrides::default()
    }

    /// True when nothing perturbs the computation (captures are allowed).
    pub fn is_unperturbed(&self) -> bool {
        self.mask.is_none()
            && self.position_ids.is_none()
            && self.channel_edits.is_empty()
            && self.attention_boosts.is_empty()
            && self.embedded_input.is_none()
    }

    pub fn position_id(&self, i: usize) -> u32 {
        self.position_ids
            .as_ref()
            .and_then(|ids| ids.get(i).copied())
            .unwrap_or(i as u32)
    }

    pub(crate) fn allows(&self, layer: usize, row: usize, col: usize) -> bool {
        match &self.mask {
            Some(m) if m.layers.contains(layer) => m.rule.allows(row, col),
            _ => col <= row,
        }
    }

    /// Checks ranges against the model, independent of sequence length.
    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        let check_layer = |l: usize| {
            if l == 0 || l > c.n_layers {
                Err(Error::invalid(format!(
                    "layer {l} outside 1..={}",
                    c.n_layers
                )))
            } else {
                Ok(())
            }
        };
        if let Some(m) = &self.mask {
            m.layers.check(c.n_layers)?;
        }
        if let Some(ids) = &self.position_ids {
            if let Some(bad) = ids.iter().find(|&&p| p as usize >= c.max_seq) {
                return Err(Error::invalid(format!(
                    "position id {bad} outside 0..{}",
                    c.max_seq
                )));
            }
        }
        for e in &self.channel_edits {
            e.layers.check(c.n_layers)?;
            if e.channel == 0 || e.channel > c.d_model {
                return Err(Error::invalid(format!(
                    "channel {} outside 1..={}",
                    e.channel, c.d_model
                )));
            }
            let v = match e.op {
                EditOp::Add(v) | EditOp::Scale(v) => v,
            };
            if !v.is_finite() {
                return Err(Error::invalid("channel edit value must be finite"));
            }
        }
        for b in &self.attention_boosts {
            b.layers.check(c.n_layers)?;
            if !(b.factor.is_finite() && b.factor > 0.0) {
                return Err(Error::invalid("attention boost factor must be > 0"));
            }
        }
        for &l in &self.capture_hidden {
            check_layer(l)?;
        }
        if let Some(req) = &self.capture_attention {
            for &l in &req.layers {
                check_layer(l)?;
            }
            if let Some(h) = req.heads.iter().find(|&&h| h >= c.n_heads) {
                return Err(Error::invalid(format!("head {h} outside 0..{}", c.n_heads)));
            }
        }
        if let Some(rows) = &self.embedded_input {
            if rows.iter().any(|r| r.len() != c.d_model) {
                return Err(Error::invalid("embedded input width must equal d_model"));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid("embedded input must be finite"));
            }
        }
        Ok(())
    }

    /// Checks token-position references against a sequence length.
    pub(crate) fn validate_len(&self, seq_len: usize) -> Result<()> {
        let seg = |s: &Segment| s.check_within(seq_len);
        if let Some(MaskOverride {
            rule: MaskRule::Crop { segment, .. },
            ..
        }) = &self.mask
        {
            seg(segment)?;
        }
        for e in &self.channel_edits {
            seg(&e.tokens)?;
        }
        for b in &self.attention_boosts {
            seg(&b.segment)?;
        }
        if let Some(ids) = &self.position_ids {
            if ids.len() > seq_len {
                return Err(Error::invalid(format!(
                    "{} position ids for {seq_len} tokens",
                    ids.len()
                )));
            }
        }
        Ok(())
    }
}
