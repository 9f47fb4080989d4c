// SPDX-License-Identifier: MIT OR Apache-2.0

//! Least-squares polynomial fits over integer positions `0..n`.
//!
//! The normal equations are assembled on the abscissa mapped affinely to
//! `[-1, 1]` and on mean-centred ordinates, then solved with partial
//! pivoting. Coefficients are reported in the original position basis.

use serde::{Deserialize, Serialize};

use super::Series;
use crate::error::{Error, Result};

/// Relative pivot size below which the normal system is reported as
/// ill-conditioned.
const PIVOT_WARN: f64 = 1e-12;

/// Direction of a fitted curve over its whole domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    Increasing,
    Decreasing,
    None,
}

impl Monotonicity {
    pub fn flipped(self) -> Self {
        match self {
            Monotonicity::Increasing => Monotonicity::Decreasing,
            Monotonicity::Decreasing => Monotonicity::Increasing,
            Monotonicity::None => Monotonicity::None,
        }
    }

    pub fn is_monotone(self) -> bool {
        self != Monotonicity::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Monotonicity::Increasing => "increasing",
            Monotonicity::Decreasing => "decreasing",
            Monotonicity::None => "none",
        }
    }
}

/// A least-squares polynomial over positions `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    /// `c[k]` multiplies `p^k`, constant term first.
    coefficients: Vec<f64>,
    /// Same polynomial in the scaled variable `t = 2p/(len-1) - 1`.
    scaled: Vec<f64>,
    len: usize,
    /// Derivative magnitudes at or below this count as zero.
    tolerance: f64,
}

impl PolyFit {
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Number of integer positions the fit covers, starting at 0.
    pub fn domain_len(&self) -> usize {
        self.len
    }

    pub fn eval(&self, p: f64) -> f64 {
        horner(&self.coefficients, p)
    }

    /// First derivative with respect to position.
    pub fn derivative(&self, p: f64) -> f64 {
        horner(&derive(&self.coefficients), p)
    }

    fn t_of(&self, p: usize) -> f64 {
        2.0 * p as f64 / (self.len - 1) as f64 - 1.0
    }
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck)
}

fn derive(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(k, &ck)| k as f64 * ck)
        .collect()
}

/// Cubic least-squares fit.
pub fn cubic_fit(series: &Series) -> Result<PolyFit> {
    poly_fit(series, 3)
}

/// Least-squares fit of the given degree over positions `0..len`.
pub fn poly_fit(series: &Series, degree: usize) -> Result<PolyFit> {
    let n = series.len();
    let m = degree + 1;
    if n < m.max(4) {
        return Err(Error::invalid(format!(
            "degree-{degree} fit needs at least {} points, got {n}",
            m.max(4)
        )));
    }
    let ys = series.values();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let span = (n - 1) as f64;

    // Power sums of t and moments of the centred data.
    let mut sums = vec![0.0; 2 * m - 1];
    let mut rhs = vec![0.0; m];
    for (p, &y) in ys.iter().enumerate() {
        let t = 2.0 * p as f64 / span - 1.0;
        let yc = y - mean;
        let mut tk = 1.0;
        for (k, s) in sums.iter_mut().enumerate() {
            *s += tk;
            if k < m {
                rhs[k] += tk * yc;
            }
            tk *= t;
        }
    }
    let mut a = vec![vec![0.0; m]; m];
    for (j, row) in a.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = sums[j + k];
        }
    }
    let mut scaled = solve(a, rhs)?;
    scaled[0] += mean;

    let coefficients = to_position_basis(&scaled, 2.0 / span, -1.0);
    let (lo, hi, amax) = ys.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, 0.0f64),
        |(lo, hi, amax), &y| (lo.min(y), hi.max(y), amax.max(y.abs())),
    );
    Ok(PolyFit {
        coefficients,
        scaled,
        len: n,
        tolerance: 1e-9 * (hi - lo) + 1e-12 * amax,
    })
}

/// Rewrites `sum a_k t^k` with `t = alpha p + beta` as `sum c_k p^k`.
fn to_position_basis(a: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let m = a.len();
    let mut c = vec![0.0; m];
    // (alpha p + beta)^k expanded incrementally.
    let mut power = vec![1.0];
    for (k, &ak) in a.iter().enumerate() {
        if k > 0 {
            let mut next = vec![0.0; power.len() + 1];
            for (i, &pi) in power.iter().enumerate() {
                next[i] += pi * beta;
                next[i + 1] += pi * alpha;
            }
            power = next;
        }
        for (i, &pi) in power.iter().enumerate() {
            c[i] += ak * pi;
        }
    }
    c
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let m = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::NumericalFailure("degenerate normal system".into()));
    }
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        let pv = a[piv][col].abs();
        if pv == 0.0 || !pv.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "rank-deficient normal system at column {col}"
            )));
        }
        if pv < PIVOT_WARN * scale {
            log::warn!("ill-conditioned normal system: pivot {pv:e} vs scale {scale:e}");
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..m {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            let (upper, lower) = a.split_at_mut(r);
            for (x, &y) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= f * y;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let tail: f64 = (r + 1..m).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - tail) / a[r][r];
    }
    Ok(x)
}

/// Classifies the fitted derivative at every integer position of the
/// domain: increasing if strictly positive everywhere, decreasing if
/// strictly negative everywhere.
///
/// The sign is read in the scaled variable, which differs from the
/// position derivative by a positive constant. Derivatives within a tiny
/// data-relative tolerance of zero count as zero.
pub fn fit_is_monotone(fit: &PolyFit) -> Monotonicity {
    let d = derive(&fit.scaled);
    let tol = fit.tolerance;
    let mut pos = true;
    let mut neg = true;
    for p in 0..fit.len {
        let v = horner(&d, fit.t_of(p));
        pos &= v > tol;
        neg &= v < -tol;
        if !pos && !neg {
            return Monotonicity::None;
        }
    }
    if pos {
        Monotonicity::Increasing
    } else {
        Monotonicity::Decreasing
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(f: impl Fn(f64) -> f64, n: usize) -> Series {
        Series::new((0..n).map(|p| f(p as f64)).collect()).unwrap()
    }

    fn assert_coeffs(fit: &PolyFit, want: &[f64], tol: f64) {
        for (got, want) in fit.coefficients().iter().zip(want) {
            assert!(
                (got - want).abs() <= tol,
                "{:?} vs {want:?}",
                fit.coefficients()
            );
        }
    }

    #[test]
    fn recovers_exact_polynomials() {
        assert_coeffs(
            &cubic_fit(&series(|p| p * p * p, 10)).unwrap(),
            &[0., 0., 0., 1.],
            1e-8,
        );
        assert_coeffs(
            &cubic_fit(&series(|_| 5.0, 12)).unwrap(),
            &[5., 0., 0., 0.],
            1e-12,
        );
        assert_coeffs(
            &cubic_fit(&series(|p| 2.0 * p + 1.0, 7)).unwrap(),
            &[1., 2., 0., 0.],
            1e-10,
        );
    }

    #[test]
    fn too_short_is_rejected() {
        let s = Series::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(cubic_fit(&s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn degree_is_a_parameter() {
        let fit = poly_fit(&series(|p| 3.0 - p, 20), 1).unwrap();
        assert_eq!(fit.degree(), 1);
        assert_coeffs(&fit, &[3.0, -1.0], 1e-12);
        let fit = poly_fit(&series(|p| p.powi(5), 30), 5).unwrap();
        assert!((fit.coefficients()[5] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn monotonicity_examples() {
        let up = cubic_fit(&series(|p| p, 100)).unwrap();
        assert_eq!(fit_is_monotone(&up), Monotonicity::Increasing);
        let down = cubic_fit(&series(|p| -p, 100)).unwrap();
        assert_eq!(fit_is_monotone(&down), Monotonicity::Decreasing);
        let flat = cubic_fit(&series(|_| 0.731, 100)).unwrap();
        assert_eq!(fit_is_monotone(&flat), Monotonicity::None);
    }

    #[test]
    fn sine_is_not_monotone() {
        // Independent check: evaluate the fitted position-basis derivative
        // 3 c3 p^2 + 2 c2 p + c1 at every domain point and require a sign
        // change.
        let fit = cubic_fit(&series(|p| (p / 3.0).sin(), 200)).unwrap();
        let c = fit.coefficients();
        let signs: Vec<bool> = (0..200)
            .map(|p| {
                let p = p as f64;
                3.0 * c[3] * p * p + 2.0 * c[2] * p + c[1] > 0.0
            })
            .collect();
        assert!(signs.iter().any(|&s| s) && signs.iter().any(|&s| !s));
        assert_eq!(fit_is_monotone(&fit), Monotonicity::None);
    }

    #[test]
    fn hyperbola_needs_its_head_dropped() {
        // A cubic through 1/(p+1) over 0..256 overshoots and turns upward;
        // dropping the steep head makes the fit monotone.
        let full = cubic_fit(&series(|p| 1.0 / (p + 1.0), 256)).unwrap();
        assert_eq!(fit_is_monotone(&full), Monotonicity::None);
        let tail = cubic_fit(&series(|p| 1.0 / (p + 31.0), 226)).unwrap();
        assert_eq!(fit_is_monotone(&tail), Monotonicity::Decreasing);
    }

    fn sse(ys: &[f64], c: &[f64]) -> f64 {
        ys.iter()
            .enumerate()
            .map(|(p, y)| (y - horner(c, p as f64)).powi(2))
            .sum()
    }

    proptest! {
        #[test]
        fn least_squares_beats_competitors(
            ys in prop::collection::vec(-10.0f64..10.0, 4..60),
            delta in prop::collection::vec(-0.1f64..0.1, 4),
        ) {
            let fit = cubic_fit(&Series::new(ys.clone()).unwrap()).unwrap();
            let best = sse(&ys, fit.coefficients());
            let n = ys.len() as f64;
            // Perturb in a basis scaled to the domain so competitors stay near the optimum.
            let other: Vec<f64> = fit.coefficients().iter().zip(&delta).enumerate()
                .map(|(k, (c, d))| c + d / n.powi(k as i32)).collect();
            prop_assert!(best <= sse(&ys, &other) * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn reversal_flips_direction(ys in prop::collection::vec(-10.0f64..10.0, 4..80)) {
            let s = Series::new(ys).unwrap();
            let a = fit_is_monotone(&cubic_fit(&s).unwrap());
            let b = fit_is_monotone(&cubic_fit(&s.reversed()).unwrap());
            prop_assert_eq!(a, b.flipped());
        }

        #[test]
        fn constant_offset_keeps_direction(
            ys in prop::collection::vec(-10.0f64..10.0, 4..80),
            c in -100.0f64..100.0,
        ) {
            let a = fit_is_monotone(&cubic_fit(&Series::new(ys.clone()).unwrap()).unwrap());
            let shifted: Vec<f64> = ys.iter().map(|y| y + c).collect();
            let b = fit_is_monotone(&cubic_fit(&Series::new(shifted).unwrap()).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
