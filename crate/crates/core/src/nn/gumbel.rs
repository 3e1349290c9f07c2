//! Gumbel-Softmax sampling with straight-through gradients.

use super::ops::{softmax_backward, softmax_rows};
use crate::{Error, Result, Scalar};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};

/// Sample standard Gumbel noise, `-ln(-ln(u))` with `u` uniform in (0, 1).
pub fn gumbel_noise<T: Scalar>(shape: (usize, usize), rng: &mut impl RngCore) -> Array2<T> {
    Array2::from_shape_fn(shape, |_| {
        let mut u: f64 = rng.gen();
        while u <= 1e-300 {
            u = rng.gen();
        }
        T::of(-(-u.ln()).ln())
    })
}

/// Soft and hard Gumbel-Softmax samples per row.
///
/// `soft = softmax((logits + noise) / tau)`; `hard` is the one-hot of the soft
/// argmax. Passing `None` for the noise gives the deterministic zero-noise
/// variant used by tests and inference.
pub fn gumbel_softmax<T: Scalar>(
    logits: ArrayView2<T>,
    tau: f64,
    noise: Option<ArrayView2<T>>,
) -> Result<(Array2<T>, Array2<T>, Vec<usize>)> {
    if tau <= 0.0 {
        return Err(Error::config(format!("gumbel temperature must be positive, got {tau}")));
    }
    let inv_tau = T::of(1.0 / tau);
    let mut z = logits.to_owned();
    if let Some(g) = noise {
        z += &g;
    }
    z.mapv_inplace(|v| v * inv_tau);
    let soft = softmax_rows(z.view());
    let (n, k) = soft.dim();
    let mut hard = Array2::zeros((n, k));
    let mut arg = Vec::with_capacity(n);
    for i in 0..n {
        let row = soft.row(i);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        hard[[i, best]] = T::one();
        arg.push(best);
    }
    Ok((soft, hard, arg))
}

/// Straight-through backward: the gradient through the hard sample equals the
/// gradient through the soft sample, `d logits = softmax_jvp(soft, dy) / tau`.
pub fn gumbel_softmax_backward<T: Scalar>(soft: ArrayView2<T>, dy: ArrayView2<T>, tau: f64) -> Array2<T> {
    let mut d = softmax_backward(soft, dy);
    let inv_tau = T::of(1.0 / tau);
    d.mapv_inplace(|v| v * inv_tau);
    d
}
