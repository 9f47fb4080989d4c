// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built fixture with one known positional channel.
//!
//! Layer 1, head 0 has zero query and key projections, so it attends
//! uniformly over its causal prefix. Its value reads the begin-of-sequence
//! indicator, so the head writes `1/(p+1)` into the planted channel at
//! position `p`. Head 0 of the final layer reads that channel as a key
//! against a constant query, which biases attention toward early tokens,
//! and copies an "is lowercase alphanumeric" indicator into an output
//! channel that raises the logits of those bytes. Attention spread over
//! the key-value region therefore favours answer-like bytes, while
//! attention stuck on the first tokens does not. All other weights are
//! zero.

use super::{LayerRange, Model, ModelConfig, PositionScheme, Weights, BOS, BYTE_VOCAB, NORM_EPS};
use crate::error::{Error, Result};
use crate::scaling::ScalingSpec;

const QUERY_GAIN: f64 = 1.0;
const KEY_GAIN: f64 = 0.6;
const UNEMBED_GAIN: f64 = 1.0;

/// Where the fixture puts things; all channel numbers are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedLayout {
    /// Carries `1/(p+1)` from layer 2 on.
    pub channel: usize,
    /// Constant-one channels feeding the reader's query.
    pub bias_channels: [usize; 2],
    pub bos_channel: usize,
    /// One for lowercase letters and digits.
    pub alnum_channel: usize,
    /// Where the reader head writes the attended indicator.
    pub out_channel: usize,
    pub reader_layer: usize,
}

impl PlantedLayout {
    fn for_config(c: &ModelConfig) -> Self {
        PlantedLayout {
            channel: 41,
            bias_channels: [1, 2],
            bos_channel: 3,
            alnum_channel: 9,
            out_channel: 49,
            reader_layer: c.n_layers,
        }
    }
}

fn is_answer_byte(t: usize) -> bool {
    u8::try_from(t).is_ok_and(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
}

/// Builds the fixture for a NoPE config with `d_model >= 64` and the byte
/// vocabulary.
pub fn build_planted_model(config: &ModelConfig) -> Result<(Model, PlantedLayout)> {
    config.validate()?;
    if config.position_scheme != PositionScheme::Nope {
        return Err(Error::invalid("planted model needs the nope scheme"));
    }
    if config.d_model < 64 || config.vocab_size != BYTE_VOCAB {
        return Err(Error::invalid(
            "planted model needs d_model >= 64 and the byte vocabulary",
        ));
    }
    let layout = PlantedLayout::for_config(config);
    let d = config.d_model;
    let mut w = Weights::zeros(config);

    let [b0, b1] = layout.bias_channels.map(|c| c - 1);
    let bos = layout.bos_channel - 1;
    let alnum = layout.alnum_channel - 1;
    let out = layout.out_channel - 1;
    let planted = layout.channel - 1;
    for t in 0..config.vocab_size {
        let row = w.embed.row_mut(t);
        row[b0] = 1.0;
        row[b1] = 1.0;
        if t as u32 == BOS {
            row[bos] = 1.0;
        }
        if is_answer_byte(t) {
            row[alnum] = 1.0;
        }
    }

    // Normalized BOS input has bos channel 1/sqrt(3/d + eps).
    let writer = &mut w.layers[0];
    writer.wv.set(bos, 0, (3.0 / d as f64 + NORM_EPS).sqrt());
    writer.wo.set(0, planted, 1.0);

    let reader = &mut w.layers[layout.reader_layer - 1];
    reader.wq.set(b0, 0, QUERY_GAIN);
    reader.wq.set(b1, 0, QUERY_GAIN);
    reader.wk.set(planted, 0, KEY_GAIN);
    reader.wv.set(alnum, 0, 1.0);
    reader.wo.set(0, out, 1.0);
    for v in (0..config.vocab_size).filter(|&v| is_answer_byte(v)) {
        w.unembed.set(out, v, UNEMBED_GAIN);
    }
    Ok((Model::from_weights(config.clone(), w)?, layout))
}

/// Desk fixture config: the desk shape with the nope scheme.
pub fn planted_config(seed: u64) -> ModelConfig {
    ModelConfig::desk(seed).with_scheme(PositionScheme::Nope)
}

/// Spec scaling the planted channel from the middle layer through the reader.
pub fn planted_spec(layout: &PlantedLayout, factor: f64) -> ScalingSpec {
    let lo = (layout.reader_layer / 2).max(1);
    let layers = LayerRange::new(lo, layout.reader_layer).expect("lo <= reader layer");
    ScalingSpec::new(vec![layout.channel], factor, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{forward, ForwardOverrides};

    #[test]
    fn planted_channel_is_one_over_p_plus_one() {
        let (m, layout) = build_planted_model(&planted_config(3)).unwrap();
        let tokens: Vec<u32> = std::iter::once(BOS)
            .chain((0..63).map(|i| 97 + i % 26))
            .collect();
        let ov = ForwardOverrides {
            capture_hidden: vec![1, 2, 8],
            ..Default::default()
        };
        let dump = forward(&m, &tokens, &ov).unwrap().hidden_dump.unwrap();
        for p in [0usize, 1, 3, 10, 63] {
            assert_eq!(dump.get(0, p, layout.channel), 0.0);
            let want = 1.0 / (p as f64 + 1.0);
            for li in [1, 2] {
                assert!((f64::from(dump.get(li, p, layout.channel)) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn other_channels_are_constant_for_repeated_tokens() {
        let (m, layout) = build_planted_model(&planted_config(3)).unwrap();
        let tokens: Vec<u32> = std::iter::once(BOS)
            .chain(std::iter::repeat_n(b'x' as u32, 40))
            .collect();
        let ov = ForwardOverrides {
            capture_hidden: (1..=8).collect(),
            ..Default::default()
        };
        let dump = forward(&m, &tokens, &ov).unwrap().hidden_dump.unwrap();
        for li in 0..8 {
            for ch in (1..=64).filter(|&c| c != layout.channel) {
                let first = dump.get(li, 1, ch);
                assert!(
                    (2..41).all(|p| dump.get(li, p, ch) == first),
                    "layer {li} channel {ch}"
                );
            }
        }
    }

    #[test]
    fn rejects_positional_schemes() {
        assert!(build_planted_model(&ModelConfig::desk(0)).is_err());
    }
}
