// SPDX-License-Identifier: MIT OR Apache-2.0

//! A minimal pre-norm decoder-only transformer.
//!
//! Weights live in `f64` matrices but every value is representable in
//! `f32`, so a checkpoint round trip is exact. Layer and channel numbers in
//! public types are 1-based; token positions are 0-based.

mod capture;
mod checkpoint;
mod engine;
mod overrides;
mod planted;

pub use capture::{AttentionCapture, ForwardResult};
pub(crate) use engine::forward_scaled;
pub use engine::{forward, ScaledCache, Session};
pub use overrides::{
    AttentionBoost, AttentionCaptureRequest, ChannelEdit, EditOp, ForwardOverrides, LayerRange,
    MaskOverride, MaskRule,
};
pub use planted::{build_planted_model, planted_config, planted_spec, PlantedLayout};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Byte-level vocabulary: 256 byte tokens plus a begin-of-sequence token.
pub const BYTE_VOCAB: usize = 257;
/// Token id of the begin-of-sequence marker.
pub const BOS: u32 = 256;

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    Rope { base: f64 },
    Alibi,
    Nope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub position_scheme: PositionScheme,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 8 layers, 4 heads of width 16, RoPE.
    pub fn desk(seed: u64) -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 256,
            vocab_size: BYTE_VOCAB,
            max_seq: 1024,
            position_scheme: PositionScheme::Rope { base: 10_000.0 },
            seed,
        }
    }

    pub fn with_scheme(mut self, scheme: PositionScheme) -> Self {
        self.position_scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::invalid("n_heads and d_head must be positive"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::invalid("n_layers must be at least 2"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.max_seq < 64 {
            return Err(Error::invalid("max_seq must be at least 64"));
        }
        if self.d_ff == 0 {
            return Err(Error::invalid("d_ff must be positive"));
        }
        if let PositionScheme::Rope { base } = self.position_scheme {
            if !self.d_head.is_multiple_of(2) {
                return Err(Error::invalid("rope needs an even d_head"));
            }
            if !(base.is_finite() && base > 1.0) {
                return Err(Error::invalid("rope base must be finite and > 1"));
            }
        }
        Ok(())
    }
}

/// Weights of one transformer block. Projections map row vectors:
/// `q = h · wq` with `wq` of shape `d_model x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

impl LayerWeights {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            mlp_norm: vec![1.0; d],
            w_in: Matrix::zeros(d, c.d_ff),
            w_out: Matrix::zeros(c.d_ff, d),
        }
    }
}

/// Every tensor of a model, as hand-built fixtures and checkpoints see it.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub unembed: Matrix,
}

impl Weights {
    /// All-zero projections and unit norm gains.
    pub fn zeros(c: &ModelConfig) -> Self {
        Weights {
            embed: Matrix::zeros(c.vocab_size, c.d_model),
            layers: (0..c.n_layers).map(|_| LayerWeights::zeros(c)).collect(),
            final_norm: vec![1.0; c.d_model],
            unembed: Matrix::zeros(c.d_model, c.vocab_size),
        }
    }

    /// Visits every tensor in checkpoint order with its name and shape.
    pub(crate) fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(String, [usize; 2], &'a [f64])) {
        f(
            "embed".into(),
            [self.embed.rows(), self.embed.cols()],
            self.embed.data(),
        );
        for (l, w) in self.layers.iter().enumerate() {
            let n = l + 1;
            f(
                format!("layers.{n}.attn_norm"),
                [1, w.attn_norm.len()],
                &w.attn_norm,
            );
            for (name, m) in [("wq", &w.wq), ("wk", &w.wk), ("wv", &w.wv), ("wo", &w.wo)] {
                f(format!("layers.{n}.{name}"), [m.rows(), m.cols()], m.data());
            }
            f(
                format!("layers.{n}.mlp_norm"),
                [1, w.mlp_norm.len()],
                &w.mlp_norm,
            );
            f(
                format!("layers.{n}.w_in"),
                [w.w_in.rows(), w.w_in.cols()],
                w.w_in.data(),
            );
            f(
                format!("layers.{n}.w_out"),
                [w.w_out.rows(), w.w_out.cols()],
                w.w_out.data(),
            );
        }
        f(
            "final_norm".into(),
            [1, self.final_norm.len()],
            &self.final_norm,
        );
        f(
            "unembed".into(),
            [self.unembed.rows(), self.unembed.cols()],
            self.unembed.data(),
        );
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.embed.data_mut());
        for w in &mut self.layers {
            f(&mut w.attn_norm);
            for m in [&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo] {
                f(m.data_mut());
            }
            f(&mut w.mlp_norm);
            f(w.w_in.data_mut());
            f(w.w_out.data_mut());
        }
        f(&mut self.final_norm);
        f(self.unembed.data_mut());
    }

    fn check_shapes(&self, c: &ModelConfig) -> Result<()> {
        let d = c.d_model;
        let bad = |what: &str| Err(Error::invalid(format!("weight shape mismatch: {what}")));
        if (self.embed.rows(), self.embed.cols()) != (c.vocab_size, d) {
            return bad("embed");
        }
        if (self.unembed.rows(), self.unembed.cols()) != (d, c.vocab_size) {
            return bad("unembed");
        }
        if self.final_norm.len() != d {
            return bad("final_norm");
        }
        if self.layers.len() != c.n_layers {
            return bad("layer count");
        }
        for w in &self.layers {
            let square = [&w.wq, &w.wk, &w.wv, &w.wo]
                .iter()
                .all(|m| m.rows() == d && m.cols() == d);
            if !square || w.attn_norm.len() != d || w.mlp_norm.len() != d {
                return bad("attention block");
            }
            if (w.w_in.rows(), w.w_in.cols()) != (d, c.d_ff)
                || (w.w_out.rows(), w.w_out.cols()) != (c.d_ff, d)
            {
                return bad("mlp block");
            }
        }
        Ok(())
    }
}

/// A transformer with immutable weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    /// `[pos][pair]` rotation angles' cosines and sines, RoPE only.
    rope: Option<(Vec<f64>, Vec<f64>)>,
    alibi_slopes: Vec<f64>,
}

/// Draws all weights from `N(0, 1/sqrt(d_model))` with a ChaCha8 stream
/// seeded by `config.seed`, rounded to `f32`.
///
/// Tensors are filled in checkpoint order (embedding; per layer `wq`,
/// `wk`, `wv`, `wo`, `w_in`, `w_out`; unembedding), each row-major. Norm
/// gains are fixed at 1 and consume no randomness.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = 1.0 / (config.d_model as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut w = Weights::zeros(config);
    let mut fill = |m: &mut Matrix| {
        for v in m.data_mut() {
            *v = normal.sample(&mut rng);
        }
    };
    fill(&mut w.embed);
    for l in &mut w.layers {
        fill(&mut l.wq);
        fill(&mut l.wk);
        fill(&mut l.wv);
        fill(&mut l.wo);
        fill(&mut l.w_in);
        fill(&mut l.w_out);
    }
    fill(&mut w.unembed);
    Model::from_weights(config.clone(), w)
}

impl Model {
    /// Wraps hand-built weights. Values are rounded to `f32` precision.
    pub fn from_weights(config: ModelConfig, mut weights: Weights) -> Result<Model> {
        config.validate()?;
        weights.check_shapes(&config)?;
        let mut finite = true;
        weights.for_each_tensor_mut(|t| {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
                finite &= v.is_finite();
            }
        });
        if !finite {
            return Err(Error::invalid("weights must be finite"));
        }
        let rope = match config.position_scheme {
            PositionScheme::Rope { base } => Some(rope_table(base, config.d_head, config.max_seq)),
            _ => None,
        };
        let alibi_slopes = match config.position_scheme {
            PositionScheme::Alibi => alibi_slopes(config.n_heads),
            _ => vec![0.0; config.n_heads],
        };
        Ok(Model {
            config,
            weights,
            rope,
            alibi_slopes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// SHA-256 over the little-endian `f32` bytes of every tensor.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.weights.for_each_tensor(|_, _, data| {
            for v in data {
                h.update((*v as f32).to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short identifier recorded in dump and report metadata.
    pub fn id(&self) -> String {
        self.checksum()[..16].to_string()
    }

    pub(crate) fn alibi_slope(&self, head: usize) -> f64 {
        self.alibi_slopes[head]
    }

    /// Rotates each head of `x` in place by the angles for `pos`
    /// (half-split pairing: element `t` pairs with `t + d_head/2`).
    pub(crate) fn apply_rope(&self, x: &mut [f64], pos: u32) {
        let Some((cos, sin)) = &self.rope else {
            return;
        };
        let dh = self.config.d_head;
        let half = dh / 2;
        let base = pos as usize * half;
        for head in x.chunks_mut(dh) {
            for t in 0..half {
                let (c, s) = (cos[base + t], sin[base + t]);
                let (a, b) = (head[t], head[t + half]);
                head[t] = a * c - b * s;
                head[t + half] = a * s + b * c;
            }
        }
    }
}

fn rope_table(base: f64, d_head: usize, max_seq: usize) -> (Vec<f64>, Vec<f64>) {
    let half = d_head / 2;
    let mut cos = Vec::with_capacity(max_seq * half);
    let mut sin = Vec::with_capacity(max_seq * half);
    for pos in 0..max_seq {
        for t in 0..half {
            let theta = base.powf(-2.0 * t as f64 / d_head as f64);
            let angle = pos as f64 * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Geometric ALiBi slopes, with the usual interleaving when the head
/// count is not a power of two.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    fn pow2(n: usize) -> Vec<f64> {
        let start = 2f64.powf(-8.0 / n as f64);
        (1..=n).map(|i| start.powi(i as i32)).collect()
    }
    let closest = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let mut slopes = pow2(closest);
    if closest < n_heads {
        slopes.extend(
            pow2(2 * closest)
                .into_iter()
                .step_by(2)
                .take(n_heads - closest),
        );
    }
    slopes
}
