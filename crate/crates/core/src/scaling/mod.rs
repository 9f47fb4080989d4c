// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scaled last-token attention.
//!
//! In each layer of the spec's range, the query of in-scope rows and the
//! keys they attend to are recomputed from hidden states whose listed
//! channels are multiplied by `factor`. Values, and every row outside the
//! scope, keep the unscaled path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, vecmat};
use crate::toymodel::{
    forward_scaled, ForwardOverrides, ForwardResult, LayerRange, Model, ModelConfig, ScaledCache,
};

/// Rows whose attention uses the scaled path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    LastToken,
    LastK(usize),
    AllTokens,
}

impl TokenScope {
    /// Number of trailing rows in scope for a sequence of `n`.
    pub fn overlay_len(&self, n: usize) -> usize {
        match *self {
            TokenScope::LastToken => n.min(1),
            TokenScope::LastK(k) => n.min(k),
            TokenScope::AllTokens => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    /// 1-based channels sharing one factor.
    pub channels: Vec<usize>,
    pub factor: f64,
    pub layers: LayerRange,
    #[serde(default = "default_scope")]
    pub scope: TokenScope,
}

fn default_scope() -> TokenScope {
    TokenScope::LastToken
}

impl ScalingSpec {
    pub fn new(channels: Vec<usize>, factor: f64, layers: LayerRange) -> Self {
        ScalingSpec {
            channels,
            factor,
            layers,
            scope: TokenScope::LastToken,
        }
    }

    pub fn with_scope(mut self, scope: TokenScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_factor(mut self, factor: f64) -> Self {
        self.factor = factor;
        self
    }

    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("scaling spec needs at least one channel"));
        }
        let mut seen = self.channels.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.channels.len() {
            return Err(Error::invalid("scaling channels must be distinct"));
        }
        if let Some(&t) = self.channels.iter().find(|&&t| t == 0 || t > c.d_model) {
            return Err(Error::invalid(format!(
                "channel {t} outside 1..={}",
                c.d_model
            )));
        }
        if !self.factor.is_finite() {
            return Err(Error::invalid("scale factor must be finite"));
        }
        if self.scope == TokenScope::LastK(0) {
            return Err(Error::invalid("last_k scope needs k >= 1"));
        }
        self.layers.check(c.n_layers)
    }

    /// Cautions for ranges that touch the first two or the final layer.
    pub fn warnings(&self, n_layers: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.layers.lo() <= 2 {
            out.push(format!(
                "scaling starts at layer {}; early layers tend to be unstable",
                self.layers.lo()
            ));
        }
        if self.layers.hi() == n_layers {
            out.push(format!("scaling includes the final layer {n_layers}"));
        }
        out
    }
}

/// Layer range used when none is given: a fixed table for common depths,
/// otherwise roughly layers 10 to 25 of 32 rescaled to `n_layers`.
pub fn default_layer_range(n_layers: usize) -> LayerRange {
    let (lo, hi) = match n_layers {
        28 => (10, 22),
        32 => (10, 25),
        40 => (10, 34),
        48 => (10, 42),
        l => {
            let scale = |x: f64| (x * l as f64 / 32.0).round() as usize;
            let lo = scale(10.0).clamp(1, l);
            (lo, scale(25.0).clamp(lo, l))
        }
    };
    LayerRange::new(lo, hi).expect("range is ordered")
}

/// Copy of `h` with the spec's channels multiplied by its factor.
pub fn scale_hidden_row(h: &[f64], spec: &ScalingSpec) -> Vec<f64> {
    let mut out = h.to_vec();
    for &t in &spec.channels {
        out[t - 1] *= spec.factor;
    }
    out
}

pub fn scale_hidden(h: &[Vec<f64>], spec: &ScalingSpec) -> Vec<Vec<f64>> {
    h.iter().map(|r| scale_hidden_row(r, spec)).collect()
}

/// Attention output (heads concatenated, before the output projection)
/// of layer `layer` for normalized inputs `h` at `positions`.
///
/// This is a whole-matrix formulation, kept separate from the row engine
/// so the two can check each other. Only causal masking and the model's
/// own position scheme are applied. Outside the spec's layer range, or
/// with `spec` absent, every row takes the plain path.
pub fn combined_attention(
    model: &Model,
    layer: usize,
    h: &[Vec<f64>],
    positions: &[u32],
    spec: Option<&ScalingSpec>,
) -> Result<Vec<Vec<f64>>> {
    let c = model.config();
    if layer == 0 || layer > c.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} outside 1..={}",
            c.n_layers
        )));
    }
    if h.len() != positions.len() || h.iter().any(|r| r.len() != c.d_model) {
        return Err(Error::invalid(
            "inputs must be seq x d_model with one position each",
        ));
    }
    if let Some(s) = spec {
        s.validate(c)?;
    }
    let w = &model.weights().layers[layer - 1];
    let (d, dh) = (c.d_model, c.d_head);
    let n = h.len();
    let project = |rows: &[Vec<f64>], m: &crate::numerics::Matrix, rope: bool| {
        rows.iter()
            .zip(positions)
            .map(|(r, &p)| {
                let mut out = vec![0.0; d];
                vecmat(r, m, &mut out);
                if rope {
                    model.apply_rope(&mut out, p);
                }
                out
            })
            .collect::<Vec<_>>()
    };
    let q = project(h, &w.wq, true);
    let k = project(h, &w.wk, true);
    let v = project(h, &w.wv, false);
    let active = spec.filter(|s| s.layers.contains(layer));
    let (qbar, kbar, first_scaled) = match active {
        Some(s) => {
            let hs = scale_hidden(h, s);
            (
                project(&hs, &w.wq, true),
                project(&hs, &w.wk, true),
                n - s.scope.overlay_len(n),
            )
        }
        None => (Vec::new(), Vec::new(), n),
    };

    let scale = 1.0 / (dh as f64).sqrt();
    let mut z = vec![vec![0.0; d]; n];
    for (i, zi) in z.iter_mut().enumerate() {
        let scaled = i >= first_scaled;
        let (qs, ks) = if scaled { (&qbar, &kbar) } else { (&q, &k) };
        for head in 0..c.n_heads {
            let off = head * dh;
            let slope = model.alibi_slope(head);
            let mut a: Vec<f64> = (0..=i)
                .map(|j| {
                    let dotp: f64 = qs[i][off..off + dh]
                        .iter()
                        .zip(&ks[j][off..off + dh])
                        .map(|(x, y)| x * y)
                        .sum();
                    let mut s = dotp * scale;
                    if slope != 0.0 {
                        s -= slope * (i64::from(positions[i]) - i64::from(positions[j])) as f64;
                    }
                    s
                })
                .collect();
            softmax_in_place(&mut a);
            for (j, &aj) in a.iter().enumerate() {
                if aj == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    zi[off + t] += aj * v[j][off + t];
                }
            }
        }
    }
    Ok(z)
}

/// A model whose forward uses the scaled path in the spec's layers.
#[derive(Debug, Clone)]
pub struct ScaledModel<'m> {
    model: &'m Model,
    spec: ScalingSpec,
    warnings: Vec<String>,
}

/// Validates `spec` against `model` and wraps both. Cautions about the
/// layer range are logged and kept on the handle.
pub fn apply_spec<'m>(model: &'m Model, spec: ScalingSpec) -> Result<ScaledModel<'m>> {
    spec.validate(model.config())?;
    let warnings = spec.warnings(model.config().n_layers);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ScaledModel {
        model,
        spec,
        warnings,
    })
}

impl<'m> ScaledModel<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn spec(&self) -> &ScalingSpec {
        &self.spec
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn forward(&self, tokens: &[u32], overrides: &ForwardOverrides) -> Result<ForwardResult> {
        forward_scaled(self.model, tokens, overrides, Some(&self.spec))
    }

    /// Fresh cache for incremental use with a [`crate::toymodel::Session`].
    pub fn cache(&self) -> ScaledCache {
        ScaledCache::new(self.model, self.spec.clone()).expect("spec validated on construction")
    }
}
