// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use crate::numerics::Matrix;
use crate::probe::HiddenStateDump;

/// Post-softmax attention rows keyed by `(layer, head)` (1-based layer,
/// 0-based head). Row `i` holds weights for columns `0..=i`; later
/// columns are implicitly zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionCapture {
    pub(crate) seq_len: usize,
    pub(crate) rows: BTreeMap<(usize, usize), BTreeMap<usize, Vec<f64>>>,
}

impl AttentionCapture {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.keys().copied()
    }

    pub fn has(&self, layer: usize, head: usize) -> bool {
        self.rows.contains_key(&(layer, head))
    }

    pub fn row(&self, layer: usize, head: usize, i: usize) -> Option<&[f64]> {
        self.rows.get(&(layer, head))?.get(&i).map(Vec::as_slice)
    }

    pub fn last_row(&self, layer: usize, head: usize) -> Option<&[f64]> {
        self.row(layer, head, self.seq_len.checked_sub(1)?)
    }

    /// Weight `a[i][j]`, zero above the diagonal.
    pub fn weight(&self, layer: usize, head: usize, i: usize, j: usize) -> Option<f64> {
        let r = self.row(layer, head, i)?;
        Some(r.get(j).copied().unwrap_or(0.0))
    }

    /// Every captured row as `((layer, head), row index, weights)`.
    pub fn iter_rows(&self) -> impl Iterator<Item = ((usize, usize), usize, &[f64])> + '_ {
        self.rows
            .iter()
            .flat_map(|(&k, rows)| rows.iter().map(move |(&i, r)| (k, i, r.as_slice())))
    }

    /// Dense `seq x seq` matrix for one layer and head; rows not captured are zero.
    pub fn dense(&self, layer: usize, head: usize) -> Option<Matrix> {
        let rows = self.rows.get(&(layer, head))?;
        let mut m = Matrix::zeros(self.seq_len, self.seq_len);
        for (&i, r) in rows {
            m.row_mut(i)[..r.len()].copy_from_slice(r);
        }
        Some(m)
    }

    pub(crate) fn insert(&mut self, layer: usize, head: usize, i: usize, row: Vec<f64>) {
        self.rows.entry((layer, head)).or_default().insert(i, row);
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `seq x vocab`.
    pub logits: Matrix,
    pub hidden_dump: Option<HiddenStateDump>,
    pub attention: Option<AttentionCapture>,
}
