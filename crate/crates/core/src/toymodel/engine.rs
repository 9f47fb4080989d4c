// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-at-a-time forward pass.
//!
//! A row (one token) is carried through every layer using the cached
//! keys and values of the rows before it. Full forwards, incremental
//! decoding and the scaled last-row recomputation all go through
//! [`Session::compute_row`], so the same inputs yield the same bits on
//! every path.
//!
//! Scaled rows are computed as an overlay on top of the unscaled rows:
//! below the first scaled layer they are identical to the unscaled rows,
//! so overlay computation resumes from the cached residual there.

use super::capture::{AttentionCapture, ForwardResult};
use super::overrides::{AttentionCaptureRequest, EditOp, ForwardOverrides};
use super::{Model, NORM_EPS};
use crate::error::{Error, Result};
use crate::numerics::{gelu, rms_norm, softmax_in_place, vecmat, Matrix};
use crate::probe::{DumpMetadata, HiddenStateDump};
use crate::scaling::{scale_hidden_row, ScalingSpec, TokenScope};

#[derive(Debug, Clone)]
pub(crate) struct LayerRow {
    /// Residual entering the layer, after channel edits.
    pub x: Vec<f64>,
    /// Normalised attention input.
    pub h: Vec<f64>,
    /// Position-encoded key.
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Key recomputed from scaled `h`; only for scaled rows in scaled layers.
    pub kbar: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct RowState {
    pub pos: u32,
    pub layers: Vec<LayerRow>,
    /// Residual after the last layer.
    pub out: Vec<f64>,
    pub attn: Vec<((usize, usize), Vec<f64>)>,
}

/// Rows visible to the row being computed: `base[..split]` followed by
/// `overlay`.
struct Prior<'a> {
    base: &'a [RowState],
    split: usize,
    overlay: &'a [RowState],
    /// Scaled keys of base rows, `[layer][row]`.
    kbar_base: &'a [Vec<Vec<f64>>],
}

impl<'a> Prior<'a> {
    fn plain(base: &'a [RowState]) -> Self {
        Prior {
            base,
            split: base.len(),
            overlay: &[],
            kbar_base: &[],
        }
    }

    fn row(&self, j: usize) -> &RowState {
        if j >= self.split {
            &self.overlay[j - self.split]
        } else {
            &self.base[j]
        }
    }

    fn kbar(&self, l0: usize, j: usize) -> &[f64] {
        if j >= self.split {
            self.overlay[j - self.split].layers[l0]
                .kbar
                .as_deref()
                .expect("scaled overlay row carries scaled keys")
        } else {
            &self.kbar_base[l0][j]
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward pass of `tokens` under `overrides`.
pub fn forward(
    model: &Model,
    tokens: &[u32],
    overrides: &ForwardOverrides,
) -> Result<ForwardResult> {
    forward_scaled(model, tokens, overrides, None)
}

/// Incremental forward state for one sequence.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m Model,
    overrides: ForwardOverrides,
    rows: Vec<RowState>,
    /// Embedding of each row before any edit.
    raw_inputs: Vec<Vec<f64>>,
    capture_all_rows: bool,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, overrides: ForwardOverrides) -> Result<Self> {
        overrides.validate(model.config())?;
        let capture_all_rows = overrides
            .capture_attention
            .as_ref()
            .is_some_and(|r| !r.last_row_only);
        Ok(Session {
            model,
            overrides,
            rows: Vec::new(),
            raw_inputs: Vec::new(),
            capture_all_rows,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn check_room(&self) -> Result<()> {
        if self.rows.len() >= self.model.config().max_seq {
            return Err(Error::invalid(format!(
                "sequence longer than max_seq {}",
                self.model.config().max_seq
            )));
        }
        Ok(())
    }

    pub fn push(&mut self, token: u32) -> Result<()> {
        let c = self.model.config();
        if token as usize >= c.vocab_size {
            return Err(Error::invalid(format!(
                "token {token} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        let e = self.model.weights().embed.row(token as usize).to_vec();
        self.push_embedding(e)
    }

    pub fn extend(&mut self, tokens: &[u32]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.push(t))
    }

    pub fn push_embedding(&mut self, e: Vec<f64>) -> Result<()> {
        self.check_room()?;
        if e.len() != self.model.config().d_model {
            return Err(Error::invalid("embedding width must equal d_model"));
        }
        let i = self.rows.len();
        self.raw_inputs.push(e.clone());
        let fresh = self.fresh_row(i, e);
        let capture = self
            .overrides
            .capture_attention
            .as_ref()
            .filter(|_| self.capture_all_rows);
        let row = self.compute_row(i, fresh, 0, &Prior::plain(&self.rows), None, capture);
        self.rows.push(row);
        Ok(())
    }

    fn fresh_row(&self, i: usize, e: Vec<f64>) -> RowState {
        RowState {
            pos: self.overrides.position_id(i),
            layers: Vec::with_capacity(self.model.config().n_layers),
            out: e,
            attn: Vec::new(),
        }
    }

    /// Residual entering layer `l0` (0-based) at row `r`, after edits.
    pub(crate) fn layer_input(&self, r: usize, l0: usize) -> &[f64] {
        &self.rows[r].layers[l0].x
    }

    /// Logits of unscaled row `i`.
    pub fn logits_at(&self, i: usize) -> Result<Vec<f64>> {
        let row = self
            .rows
            .get(i)
            .ok_or_else(|| Error::invalid(format!("row {i} not computed")))?;
        Ok(self.row_logits(row))
    }

    /// Logits of row `m` as if the sequence ended there, with the scaled
    /// path applied when a cache is given.
    pub fn logits_as_last(&self, m: usize, cache: Option<&mut ScaledCache>) -> Result<Vec<f64>> {
        match cache {
            None => self.logits_at(m),
            Some(cache) => {
                if m >= self.rows.len() {
                    return Err(Error::invalid(format!("row {m} not computed")));
                }
                let last = cache.row_as_last(self, m, None)?;
                Ok(self.row_logits(&last))
            }
        }
    }

    /// Attention of the final row, recomputed with capture.
    pub fn last_row_attention(
        &self,
        req: &AttentionCaptureRequest,
        cache: Option<&mut ScaledCache>,
    ) -> Result<AttentionCapture> {
        let n = self.rows.len();
        if n == 0 {
            return Err(Error::invalid("empty session"));
        }
        let row = match cache {
            Some(cache) => cache.row_as_last(self, n - 1, Some(req))?,
            None => {
                let fresh = self.fresh_row(n - 1, self.raw_inputs[n - 1].clone());
                self.compute_row(
                    n - 1,
                    fresh,
                    0,
                    &Prior::plain(&self.rows[..n - 1]),
                    None,
                    Some(req),
                )
            }
        };
        let mut cap = AttentionCapture {
            seq_len: n,
            ..Default::default()
        };
        for ((l, h), r) in row.attn {
            cap.insert(l, h, n - 1, r);
        }
        Ok(cap)
    }

    pub(crate) fn row_logits(&self, row: &RowState) -> Vec<f64> {
        let w = self.model.weights();
        let mut h = vec![0.0; row.out.len()];
        rms_norm(&row.out, &w.final_norm, NORM_EPS, &mut h);
        let mut logits = vec![0.0; w.unembed.cols()];
        vecmat(&h, &w.unembed, &mut logits);
        logits
    }

    fn apply_edits(&self, layer: usize, i: usize, x: &mut [f64]) {
        for e in &self.overrides.channel_edits {
            if e.layers.contains(layer) && e.tokens.contains(i) {
                let v = &mut x[e.channel - 1];
                match e.op {
                    EditOp::Add(d) => *v += d,
                    EditOp::Scale(s) => *v *= s,
                }
            }
        }
    }

    /// Carries row `i` through layers `start..L`.
    ///
    /// With `start == 0`, `row.out` holds the embedding. Otherwise `row`
    /// is a copy of a computed row and `row.layers[start].x` is resumed
    /// without re-applying that layer's edits.
    fn compute_row(
        &self,
        i: usize,
        mut row: RowState,
        start: usize,
        prior: &Prior<'_>,
        spec: Option<&ScalingSpec>,
        capture: Option<&AttentionCaptureRequest>,
    ) -> RowState {
        let model = self.model;
        let c = model.config();
        let (d, dh) = (c.d_model, c.d_head);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let w_all = model.weights();

        let mut resid = if start == 0 {
            std::mem::take(&mut row.out)
        } else {
            row.layers[start].x.clone()
        };
        row.layers.truncate(start);
        row.attn.retain(|((l, _), _)| *l <= start);

        let mut scores = Vec::with_capacity(i + 1);
        for l0 in start..c.n_layers {
            let ln = l0 + 1;
            if !(start > 0 && l0 == start) {
                self.apply_edits(ln, i, &mut resid);
            }
            let w = &w_all.layers[l0];
            let mut h = vec![0.0; d];
            rms_norm(&resid, &w.attn_norm, NORM_EPS, &mut h);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            vecmat(&h, &w.wq, &mut q);
            vecmat(&h, &w.wk, &mut k);
            vecmat(&h, &w.wv, &mut v);
            model.apply_rope(&mut q, row.pos);
            model.apply_rope(&mut k, row.pos);

            let scaled = spec.filter(|s| s.layers.contains(ln));
            let (query, kbar) = match scaled {
                Some(s) => {
                    let hs = scale_hidden_row(&h, s);
                    let mut qb = vec![0.0; d];
                    let mut kb = vec![0.0; d];
                    vecmat(&hs, &w.wq, &mut qb);
                    vecmat(&hs, &w.wk, &mut kb);
                    model.apply_rope(&mut qb, row.pos);
                    model.apply_rope(&mut kb, row.pos);
                    (qb, Some(kb))
                }
                None => (q, None),
            };
            let own_key = kbar.as_deref().unwrap_or(&k);

            let mut attn_out = vec![0.0; d];
            for head in 0..c.n_heads {
                let off = head * dh;
                let qh = &query[off..off + dh];
                let slope = model.alibi_slope(head);
                scores.clear();
                for j in 0..=i {
                    if !self.overrides.allows(ln, i, j) {
                        scores.push(f64::NEG_INFINITY);
                        continue;
                    }
                    let (key, pos_j) = if j == i {
                        (own_key, row.pos)
                    } else {
                        let pr = prior.row(j);
                        let key = if scaled.is_some() {
                            prior.kbar(l0, j)
                        } else {
                            pr.layers[l0].k.as_slice()
                        };
                        (key, pr.pos)
                    };
                    let mut s = dot(qh, &key[off..off + dh]) * inv_sqrt;
                    if slope != 0.0 {
                        s -= slope * (i64::from(row.pos) - i64::from(pos_j)) as f64;
                    }
                    scores.push(s);
                }
                softmax_in_place(&mut scores);
                for b in &self.overrides.attention_boosts {
                    if !b.layers.contains(ln) {
                        continue;
                    }
                    let mut touched = false;
                    let end = b.segment.end.min(i + 1);
                    for a in scores.iter_mut().take(end).skip(b.segment.start) {
                        *a *= b.factor;
                        touched = true;
                    }
                    if touched && b.renormalize {
                        let sum: f64 = scores.iter().sum();
                        if sum > 0.0 {
                            scores.iter_mut().for_each(|a| *a /= sum);
                        }
                    }
                }
                let out_h = &mut attn_out[off..off + dh];
                for (j, &a) in scores.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let vj = if j == i {
                        &v
                    } else {
                        &prior.row(j).layers[l0].v
                    };
                    for (o, &x) in out_h.iter_mut().zip(&vj[off..off + dh]) {
                        *o += a * x;
                    }
                }
                if capture.is_some_and(|r| r.wants(ln, head)) {
                    row.attn.push(((ln, head), scores.clone()));
                }
            }

            let x_in = resid.clone();
            let mut proj = vec![0.0; d];
            vecmat(&attn_out, &w.wo, &mut proj);
            resid.iter_mut().zip(&proj).for_each(|(r, p)| *r += p);

            let mut h2 = vec![0.0; d];
            rms_norm(&resid, &w.mlp_norm, NORM_EPS, &mut h2);
            let mut hidden = vec![0.0; c.d_ff];
            vecmat(&h2, &w.w_in, &mut hidden);
            hidden.iter_mut().for_each(|u| *u = gelu(*u));
            vecmat(&hidden, &w.w_out, &mut proj);
            resid.iter_mut().zip(&proj).for_each(|(r, p)| *r += p);

            row.layers.push(LayerRow {
                x: x_in,
                h,
                k,
                v,
                kbar,
            });
        }
        row.out = resid;
        row
    }
}

impl<'m> Session<'m> {
    /// Starting state for recomputing row `r` from layer `lo0`.
    fn resume_row(&self, r: usize, lo0: usize, from_scratch: bool) -> (RowState, usize) {
        if lo0 == 0 || from_scratch {
            return (self.fresh_row(r, self.raw_inputs[r].clone()), 0);
        }
        let src = &self.rows[r];
        let row = RowState {
            pos: src.pos,
            layers: src.layers[..=lo0].to_vec(),
            out: Vec::new(),
            attn: Vec::new(),
        };
        (row, lo0)
    }
}

/// Scaled-path state shared by the rows of one growing sequence.
///
/// A cache may be reused by any session whose rows extend the rows it has
/// already seen, such as a clone of the session it was first used with.
#[derive(Debug, Clone)]
pub struct ScaledCache {
    spec: ScalingSpec,
    /// Scaled keys of unscaled rows, `[layer][row]`.
    kbar: Vec<Vec<Vec<f64>>>,
    /// Rows of the all-tokens scope, computed once.
    all_rows: Vec<RowState>,
}

impl ScaledCache {
    pub fn new(model: &Model, spec: ScalingSpec) -> Result<Self> {
        spec.validate(model.config())?;
        Ok(ScaledCache {
            spec,
            kbar: vec![Vec::new(); model.config().n_layers],
            all_rows: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ScalingSpec {
        &self.spec
    }

    fn sync_kbar(&mut self, s: &Session<'_>, upto: usize) {
        let model = s.model;
        let d = model.config().d_model;
        for ln in self.spec.layers.layers() {
            let l0 = ln - 1;
            let wk = &model.weights().layers[l0].wk;
            while self.kbar[l0].len() < upto {
                let row = &s.rows[self.kbar[l0].len()];
                let hs = scale_hidden_row(&row.layers[l0].h, &self.spec);
                let mut kb = vec![0.0; d];
                vecmat(&hs, wk, &mut kb);
                model.apply_rope(&mut kb, row.pos);
                self.kbar[l0].push(kb);
            }
        }
    }

    fn extend_all(&mut self, s: &Session<'_>, upto: usize) {
        let lo0 = self.spec.layers.lo() - 1;
        while self.all_rows.len() < upto {
            let r = self.all_rows.len();
            let (row, start) = s.resume_row(r, lo0, false);
            let prior = Prior {
                base: &[],
                split: 0,
                overlay: &self.all_rows,
                kbar_base: &[],
            };
            let row = s.compute_row(r, row, start, &prior, Some(&self.spec), None);
            self.all_rows.push(row);
        }
    }

    /// Row `m` under the scaled path with `m` as the final row.
    fn row_as_last(
        &mut self,
        s: &Session<'_>,
        m: usize,
        capture: Option<&AttentionCaptureRequest>,
    ) -> Result<RowState> {
        if m >= s.rows.len() {
            return Err(Error::invalid(format!("row {m} not computed")));
        }
        if self.spec.scope == TokenScope::AllTokens {
            self.extend_all(s, m);
            if capture.is_none() && m < self.all_rows.len() {
                return Ok(self.all_rows[m].clone());
            }
            let (row, start) = s.resume_row(m, self.spec.layers.lo() - 1, capture.is_some());
            let prior = Prior {
                base: &[],
                split: 0,
                overlay: &self.all_rows[..m],
                kbar_base: &[],
            };
            let row = s.compute_row(m, row, start, &prior, Some(&self.spec), capture);
            if capture.is_none() {
                self.all_rows.push(row.clone());
            }
            return Ok(row);
        }
        let (_, mut rows) = self.overlay_rows(s, m + 1, capture, false);
        Ok(rows.pop().expect("overlay covers the final row"))
    }

    /// Scaled rows `start..end` for a sequence ending at `end`.
    fn overlay_rows(
        &mut self,
        s: &Session<'_>,
        end: usize,
        capture: Option<&AttentionCaptureRequest>,
        capture_all: bool,
    ) -> (usize, Vec<RowState>) {
        let start = end - self.spec.scope.overlay_len(end);
        self.sync_kbar(s, start);
        let lo0 = self.spec.layers.lo() - 1;
        let mut overlay: Vec<RowState> = Vec::with_capacity(end - start);
        for r in start..end {
            let cap = if capture_all || r + 1 == end {
                capture
            } else {
                None
            };
            let (row, first) = s.resume_row(r, lo0, cap.is_some());
            let prior = Prior {
                base: &s.rows,
                split: start,
                overlay: &overlay,
                kbar_base: &self.kbar,
            };
            let row = s.compute_row(r, row, first, &prior, Some(&self.spec), cap);
            overlay.push(row);
        }
        (start, overlay)
    }
}

/// Forward pass with an optional scaled attention path.
pub(crate) fn forward_scaled(
    model: &Model,
    tokens: &[u32],
    overrides: &ForwardOverrides,
    spec: Option<&ScalingSpec>,
) -> Result<ForwardResult> {
    let c = model.config();
    let n = match &overrides.embedded_input {
        Some(rows) => {
            if !tokens.is_empty() && tokens.len() != rows.len() {
                return Err(Error::invalid("embedded input and tokens differ in length"));
            }
            rows.len()
        }
        None => tokens.len(),
    };
    if n == 0 {
        return Err(Error::invalid("empty input"));
    }
    if n > c.max_seq {
        return Err(Error::invalid(format!(
            "{n} tokens exceed max_seq {}",
            c.max_seq
        )));
    }
    overrides.validate_len(n)?;
    let mut session = Session::new(model, overrides.clone())?;
    match &overrides.embedded_input {
        Some(rows) => rows
            .iter()
            .try_for_each(|e| session.push_embedding(e.clone()))?,
        None => session.extend(tokens)?,
    }

    let req = overrides.capture_attention.as_ref();
    let last_only = req.is_some_and(|r| r.last_row_only);
    let (start, overlay) = match spec {
        Some(spec) => {
            let mut cache = ScaledCache::new(model, spec.clone())?;
            cache.overlay_rows(&session, n, req, !last_only)
        }
        None if last_only => {
            let (row, _) = session.resume_row(n - 1, 0, true);
            let prior = Prior::plain(&session.rows[..n - 1]);
            (
                n - 1,
                vec![session.compute_row(n - 1, row, 0, &prior, None, req)],
            )
        }
        None => (n, Vec::new()),
    };
    let row_at = |r: usize| {
        if r >= start {
            &overlay[r - start]
        } else {
            &session.rows[r]
        }
    };

    let mut logits = Matrix::zeros(n, c.vocab_size);
    for r in 0..n {
        logits
            .row_mut(r)
            .copy_from_slice(&session.row_logits(row_at(r)));
    }

    let hidden_dump = if overrides.capture_hidden.is_empty() {
        None
    } else {
        let mut layers = overrides.capture_hidden.clone();
        layers.sort_unstable();
        layers.dedup();
        let mut values = Vec::with_capacity(layers.len() * n * c.d_model);
        for &l in &layers {
            for r in 0..n {
                values.extend(row_at(r).layers[l - 1].x.iter().map(|&v| v as f32));
            }
        }
        let meta = DumpMetadata {
            model_id: model.id(),
            capture_point: "residual_in".into(),
            input: "forward".into(),
            samples: 1,
            layers: layers.clone(),
        };
        Some(HiddenStateDump::new(n, c.d_model, values, meta)?)
    };

    let attention = req.map(|_| {
        let mut cap = AttentionCapture {
            seq_len: n,
            ..Default::default()
        };
        for r in 0..n {
            for ((l, h), a) in &row_at(r).attn {
                cap.insert(*l, *h, r, a.clone());
            }
        }
        cap
    });

    Ok(ForwardResult {
        logits,
        hidden_dump,
        attention,
    })
}
