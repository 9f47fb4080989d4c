// SPDX-License-Identifier: MIT OR Apache-2.0

//! Measurements and perturbations: segment attention, hidden-state dumps,
//! mask cropping, position-id shifts, channel offsets and attention boosts.

mod dump;

pub use dump::{mean_hidden_dump, DumpMetadata, HiddenStateDump};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toymodel::{
    AttentionBoost, AttentionCapture, ChannelEdit, EditOp, LayerRange, MaskOverride, MaskRule,
};

/// Contiguous token range `start..end` with a label such as `"gold"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    #[serde(default)]
    pub label: String,
}

impl Segment {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Result<Self> {
        if start >= end {
            return Err(Error::invalid(format!("empty segment {start}..{end}")));
        }
        Ok(Segment {
            start,
            end,
            label: label.into(),
        })
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub(crate) fn check_within(&self, seq_len: usize) -> Result<()> {
        if self.is_empty() || self.end > seq_len {
            return Err(Error::invalid(format!(
                "segment {}..{} outside sequence of {seq_len}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// Default observation band `[L/2, 5L/8]`.
pub fn default_observe_layers(n_layers: usize) -> LayerRange {
    let lo = (n_layers / 2).max(1);
    let hi = ((5 * n_layers) / 8).max(lo);
    LayerRange::new(lo, hi).expect("lo >= 1 and lo <= hi")
}

/// Mean over the selected layers and heads of the last row's average
/// weight on `g`. An empty `heads` slice selects every captured head.
pub fn attention_to_segment(
    capture: &AttentionCapture,
    g: &Segment,
    layers: &[usize],
    heads: &[usize],
) -> Result<f64> {
    g.check_within(capture.seq_len())?;
    if layers.is_empty() {
        return Err(Error::invalid("no layers selected"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for &l in layers {
        let selected: Vec<usize> = if heads.is_empty() {
            capture.keys().filter(|k| k.0 == l).map(|k| k.1).collect()
        } else {
            heads.to_vec()
        };
        if selected.is_empty() {
            return Err(Error::invalid(format!("layer {l} not captured")));
        }
        for h in selected {
            let row = capture
                .last_row(l, h)
                .ok_or_else(|| Error::invalid(format!("layer {l} head {h} not captured")))?;
            let sum: f64 = g
                .indices()
                .map(|j| row.get(j).copied().unwrap_or(0.0))
                .sum();
            total += sum / g.len() as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Rows in `g` see only `g` (up to themselves), plus column 0 when
/// `keep_first` is set.
pub fn crop_mask(
    seq_len: usize,
    g: &Segment,
    layers: LayerRange,
    keep_first: bool,
) -> Result<MaskOverride> {
    g.check_within(seq_len)?;
    if g.start == 0 {
        return Err(Error::invalid("crop segment must not contain position 0"));
    }
    Ok(MaskOverride {
        layers,
        rule: MaskRule::Crop {
            segment: g.clone(),
            keep_first,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Give `g` the ids of an earlier reference segment.
    ToBeginning(Segment),
    /// Give `g` the ids of a later reference segment.
    ToEnd(Segment),
    Offset(i64),
}

/// Position ids for `seq_len` tokens where the ids inside `g` are
/// replaced according to `mode` and all others equal their index.
pub fn shift_position_ids(seq_len: usize, g: &Segment, mode: &ShiftMode) -> Result<Vec<u32>> {
    g.check_within(seq_len)?;
    let mut ids: Vec<u32> = (0..seq_len as u32).collect();
    match mode {
        ShiftMode::ToBeginning(r) | ShiftMode::ToEnd(r) => {
            r.check_within(seq_len)?;
            if r.len() != g.len() {
                return Err(Error::invalid(format!(
                    "reference segment has {} tokens, target has {}",
                    r.len(),
                    g.len()
                )));
            }
            for (dst, src) in g.indices().zip(r.indices()) {
                ids[dst] = src as u32;
            }
        }
        ShiftMode::Offset(delta) => {
            for i in g.indices() {
                let p = i as i64 + delta;
                if p < 0 || p > i64::from(u32::MAX) {
                    return Err(Error::invalid(format!("shifted id {p} out of range")));
                }
                ids[i] = p as u32;
            }
        }
    }
    Ok(ids)
}

/// Adds `delta` to residual channel `channel` (1-based) on the tokens of `g`.
pub fn channel_offset(g: &Segment, channel: usize, delta: f64, layers: LayerRange) -> ChannelEdit {
    ChannelEdit {
        layers,
        tokens: g.clone(),
        channel,
        op: EditOp::Add(delta),
    }
}

/// Multiplies post-softmax weights on `g` by `factor` and renormalizes.
pub fn boost_attention(g: &Segment, factor: f64, layers: LayerRange) -> Result<AttentionBoost> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid("boost factor must be > 0"));
    }
    Ok(AttentionBoost {
        layers,
        segment: g.clone(),
        factor,
        renormalize: true,
    })
}

/// The same operation on a single attention row.
pub fn boost_row(row: &[f64], g: &Segment, factor: f64) -> Vec<f64> {
    let mut out: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(j, &a)| if g.contains(j) { a * factor } else { a })
        .collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|a| *a /= sum);
    }
    out
}
