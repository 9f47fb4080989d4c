// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by integration tests.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poshid::probe::{DumpMetadata, HiddenStateDump};
use poshid::toymodel::BOS;

/// Exact least-squares polynomial coefficients (constant first) of `ys`
/// over positions `0..n`, from the normal equations in rational
/// arithmetic. Every f64 input is converted exactly.
pub fn exact_poly_fit(ys: &[f64], degree: usize) -> Vec<f64> {
    let m = degree + 1;
    let mut a = vec![vec![BigRational::zero(); m]; m];
    let mut b = vec![BigRational::zero(); m];
    for (p, &y) in ys.iter().enumerate() {
        let y = BigRational::from_float(y).expect("finite input");
        let pw: Vec<BigRational> = (0..2 * m - 1)
            .map(|k| BigRational::from_integer(BigInt::from(p).pow(k as u32)))
            .collect();
        for j in 0..m {
            for k in 0..m {
                a[j][k] += &pw[j + k];
            }
            b[j] += &pw[j] * &y;
        }
    }
    for col in 0..m {
        let piv = (col..m).find(|&r| !a[r][col].is_zero()).expect("full rank");
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..m {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let f = &a[r][col] / &a[col][col];
            let pivot_row = a[col].clone();
            for (x, y) in a[r].iter_mut().zip(&pivot_row).skip(col) {
                *x -= &f * y;
            }
            let t = &f * &b[col];
            b[r] -= t;
        }
    }
    (0..m)
        .map(|k| (&b[k] / &a[k][k]).to_f64().expect("representable"))
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// BOS followed by printable ASCII.
pub fn random_tokens(len: usize, seed: u64) -> Vec<u32> {
    let mut r = rng(seed);
    std::iter::once(BOS)
        .chain((1..len).map(|_| r.random_range(0x20u32..0x7f)))
        .collect()
}

/// Dump built from a function of `(layer index, position, 1-based channel)`.
pub fn synthetic_dump(
    n_layers: usize,
    seq: usize,
    width: usize,
    mut f: impl FnMut(usize, usize, usize) -> f64,
) -> HiddenStateDump {
    let mut values = Vec::with_capacity(n_layers * seq * width);
    for li in 0..n_layers {
        for p in 0..seq {
            for ch in 1..=width {
                values.push(f(li, p, ch) as f32);
            }
        }
    }
    let meta = DumpMetadata {
        model_id: "synthetic".into(),
        capture_point: "residual_in".into(),
        input: "synthetic".into(),
        samples: 1,
        layers: (1..=n_layers).collect(),
    };
    HiddenStateDump::new(seq, width, values, meta).expect("consistent dump")
}
