//! Patch merging and sub-pixel (pixel shuffle) rearrangement.

use super::linalg::Dims;
use super::ops::Linear;
use super::params::{Grads, ParamStore};
use crate::Scalar;
use ndarray::{Array2, ArrayView2};
use rand::RngCore;

/// Concatenate each 2×2 token group (4C) and apply a linear map to 2C,
/// halving the grid and doubling the channel count.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub dim: usize,
    reduce: Linear,
}

pub struct PatchMergeCache<T: Scalar> {
    gathered: Array2<T>,
}

impl PatchMerge {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        PatchMerge {
            dim,
            reduce: Linear::new(format!("{}.reduce", name.into()), 4 * dim, 2 * dim),
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut impl RngCore) {
        self.reduce.init(ps, rng);
    }

    fn gather<T: Scalar>(&self, x: ArrayView2<T>, dims: Dims) -> Array2<T> {
        let d = self.dim;
        let (ho, wo) = (dims.h / 2, dims.w / 2);
        let mut out = Array2::zeros((dims.n * ho * wo, 4 * d));
        for b in 0..dims.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for (g, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let src = b * dims.h * dims.w + (2 * oy + dy) * dims.w + (2 * ox + dx);
                        for c in 0..d {
                            out[[row, g * d + c]] = x[[src, c]];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn out_dims(&self, dims: Dims) -> Dims {
        Dims::new(dims.n, dims.h / 2, dims.w / 2)
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: ArrayView2<T>,
        dims: Dims,
    ) -> (Array2<T>, PatchMergeCache<T>) {
        assert!(dims.h % 2 == 0 && dims.w % 2 == 0, "patch merge needs an even grid");
        let gathered = self.gather(x, dims);
        let y = self.reduce.forward(ps, gathered.view());
        (y, PatchMergeCache { gathered })
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        dims: Dims,
        cache: &PatchMergeCache<T>,
        dy: ArrayView2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let dgathered = self.reduce.backward(ps, cache.gathered.view(), dy, grads);
        let d = self.dim;
        let (ho, wo) = (dims.h / 2, dims.w / 2);
        let mut dx = Array2::zeros((dims.rows(), d));
        for b in 0..dims.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for (g, (dyy, dxx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let dst = b * dims.h * dims.w + (2 * oy + dyy) * dims.w + (2 * ox + dxx);
                        for c in 0..d {
                            dx[[dst, c]] = dgathered[[row, g * d + c]];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Channel-to-space rearrangement: (n·h·w) × (C·r²) -> (n·rh·rw) × C with
/// `out[b, y, x, c] = in[b, y/r, x/r, c·r² + (y mod r)·r + (x mod r)]`.
pub fn pixel_shuffle<T: Scalar>(x: ArrayView2<T>, dims: Dims, r: usize) -> (Array2<T>, Dims) {
    let cr2 = x.shape()[1];
    assert!(cr2 % (r * r) == 0, "channels {cr2} not divisible by r^2 = {}", r * r);
    let c = cr2 / (r * r);
    let out_dims = Dims::new(dims.n, dims.h * r, dims.w * r);
    let mut out = Array2::zeros((out_dims.rows(), c));
    for b in 0..dims.n {
        for y in 0..out_dims.h {
            for x_ in 0..out_dims.w {
                let dst = b * out_dims.h * out_dims.w + y * out_dims.w + x_;
                let src = b * dims.h * dims.w + (y / r) * dims.w + x_ / r;
                let off = (y % r) * r + (x_ % r);
                for ch in 0..c {
                    out[[dst, ch]] = x[[src, ch * r * r + off]];
                }
            }
        }
    }
    (out, out_dims)
}

/// Exact inverse of [`pixel_shuffle`]; also its gradient.
pub fn pixel_unshuffle<T: Scalar>(x: ArrayView2<T>, dims: Dims, r: usize) -> (Array2<T>, Dims) {
    assert!(dims.h % r == 0 && dims.w % r == 0);
    let c = x.shape()[1];
    let out_dims = Dims::new(dims.n, dims.h / r, dims.w / r);
    let mut out = Array2::zeros((out_dims.rows(), c * r * r));
    for b in 0..dims.n {
        for y in 0..dims.h {
            for x_ in 0..dims.w {
                let src = b * dims.h * dims.w + y * dims.w + x_;
                let dst = b * out_dims.h * out_dims.w + (y / r) * out_dims.w + x_ / r;
                let off = (y % r) * r + (x_ % r);
                for ch in 0..c {
                    out[[dst, ch * r * r + off]] = x[[src, ch]];
                }
            }
        }
    }
    (out, out_dims)
}
