// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic numeric kernels.
//!
//! Everything here is pure and works in `f64`, including analysis of
//! activations that were stored as `f32`.

mod dense;
mod poly;

pub use dense::{gelu, log_softmax, rms_norm, softmax_in_place, vecmat, Matrix};
pub use poly::{cubic_fit, fit_is_monotone, poly_fit, Monotonicity, PolyFit};

use crate::error::{Error, Result};

/// A finite, non-empty sequence of values indexed by position.
#[derive(Debug, Clone, PartialEq)]
pub struct Series(Vec<f64>);

impl Series {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("series must not be empty"));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at position {p}")));
        }
        Ok(Series(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Series::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn reversed(&self) -> Series {
        Series(self.0.iter().rev().copied().collect())
    }
}

/// Trailing valid-mode moving average: element `i` is the mean of
/// `series[i..i + window]`, so the output has `len - window + 1` values.
pub fn sliding_mean(series: &Series, window: usize) -> Result<Series> {
    let n = series.len();
    if window == 0 || window > n {
        return Err(Error::invalid(format!(
            "sliding window {window} not in 1..={n}"
        )));
    }
    let xs = series.values();
    let inv = 1.0 / window as f64;
    let out = xs
        .windows(window)
        .map(|w| w.iter().sum::<f64>() * inv)
        .collect();
    Ok(Series(out))
}

/// `out[i] = x[i+2] - 2 x[i+1] + x[i]`.
pub fn second_difference(series: &Series) -> Result<Series> {
    if series.len() < 3 {
        return Err(Error::invalid(format!(
            "second difference needs at least 3 values, got {}",
            series.len()
        )));
    }
    let out = series
        .values()
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .collect();
    Ok(Series(out))
}

/// Sum of squared second differences; zero for any affine series.
pub fn smoothness_score(series: &Series) -> Result<f64> {
    Ok(second_difference(series)?
        .values()
        .iter()
        .map(|d| d * d)
        .sum())
}
