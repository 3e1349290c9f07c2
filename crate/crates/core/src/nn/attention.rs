//! Window-based multi-head self-attention with optional cyclic shift, and
//! cross-attention against a small set of class tokens.

use super::linalg::{matmul, Dims};
use super::ops::{softmax_backward, softmax_rows, Linear};
use super::params::{Grads, ParamStore};
use crate::Scalar;
use ndarray::{s, Array2, ArrayView2};
use rand::RngCore;
use rayon::prelude::*;

const MASKED: f64 = -1e30;

fn gather_rows<T: Scalar>(x: ArrayView2<T>, perm: &[usize]) -> Array2<T> {
    let d = x.shape()[1];
    let mut out = Array2::zeros((perm.len(), d));
    for (i, &src) in perm.iter().enumerate() {
        out.row_mut(i).assign(&x.row(src));
    }
    out
}

fn scatter_rows<T: Scalar>(x: ArrayView2<T>, perm: &[usize]) -> Array2<T> {
    let d = x.shape()[1];
    let mut out = Array2::zeros((perm.len(), d));
    for (i, &dst) in perm.iter().enumerate() {
        out.row_mut(dst).assign(&x.row(i));
    }
    out
}

/// Row permutation mapping window-ordered rows to source rows, cyclically
/// shifting the grid by `-shift` first.
fn window_permutation(dims: Dims, window: usize, shift: usize) -> Vec<usize> {
    let (h, w) = (dims.h, dims.w);
    let nwx = w / window;
    let mut perm = Vec::with_capacity(dims.rows());
    for b in 0..dims.n {
        for wy in 0..h / window {
            for wx in 0..nwx {
                for iy in 0..window {
                    for ix in 0..window {
                        let sy = (wy * window + iy + shift) % h;
                        let sx = (wx * window + ix + shift) % w;
                        perm.push(b * h * w + sy * w + sx);
                    }
                }
            }
        }
    }
    perm
}

/// Per-window boolean masks for shifted attention: `true` marks pairs that
/// became neighbors only through the cyclic shift and must not attend.
fn shift_masks(h: usize, w: usize, window: usize, shift: usize) -> Vec<Array2<bool>> {
    let region = |pos: usize, extent: usize| -> usize {
        if pos < extent - window {
            0
        } else if pos < extent - shift {
            1
        } else {
            2
        }
    };
    let mut masks = Vec::with_capacity((h / window) * (w / window));
    for wy in 0..h / window {
        for wx in 0..w / window {
            let mut rid = Vec::with_capacity(window * window);
            for iy in 0..window {
                for ix in 0..window {
                    rid.push(region(wy * window + iy, h) * 3 + region(wx * window + ix, w));
                }
            }
            let n = rid.len();
            let mut m = Array2::from_elem((n, n), false);
            for i in 0..n {
                for j in 0..n {
                    m[[i, j]] = rid[i] != rid[j];
                }
            }
            masks.push(m);
        }
    }
    masks
}

/// Multi-head self-attention computed independently inside each window of a
/// token grid; `shift = window/2` gives the shifted variant with cross-window
/// pairs masked out. No positional term.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    o_proj: Linear,
}

pub struct WinAttnCache<T: Scalar> {
    perm: Vec<usize>,
    qw: Array2<T>,
    kw: Array2<T>,
    vw: Array2<T>,
    /// Softmax probabilities per (window, head), window-major.
    attn: Vec<Array2<T>>,
    /// Un-permuted context (input of the output projection).
    ctx: Array2<T>,
}

impl WindowAttention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize, window: usize, shift: usize) -> Self {
        let name = name.into();
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        assert!(shift == 0 || shift == window / 2, "shift must be 0 or window/2");
        WindowAttention {
            dim,
            heads,
            window,
            shift,
            q_proj: Linear::new(format!("{name}.q"), dim, dim),
            k_proj: Linear::new(format!("{name}.k"), dim, dim),
            v_proj: Linear::new(format!("{name}.v"), dim, dim),
            o_proj: Linear::new(format!("{name}.o"), dim, dim),
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut impl RngCore) {
        self.q_proj.init(ps, rng);
        self.k_proj.init(ps, rng);
        self.v_proj.init(ps, rng);
        self.o_proj.init(ps, rng);
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: ArrayView2<T>,
        dims: Dims,
    ) -> (Array2<T>, WinAttnCache<T>) {
        let s = self.window;
        assert!(
            dims.h % s == 0 && dims.w % s == 0,
            "grid {}x{} not divisible by window {s}",
            dims.h,
            dims.w
        );
        let q = self.q_proj.forward(ps, x);
        let k = self.k_proj.forward(ps, x);
        let v = self.v_proj.forward(ps, x);

        let perm = window_permutation(dims, s, self.shift);
        let qw = gather_rows(q.view(), &perm);
        let kw = gather_rows(k.view(), &perm);
        let vw = gather_rows(v.view(), &perm);

        let masks = if self.shift > 0 {
            Some(shift_masks(dims.h, dims.w, s, self.shift))
        } else {
            None
        };
        let nw_img = (dims.h / s) * (dims.w / s);
        let n_groups = dims.n * nw_img;
        let wsize = s * s;
        let dh = self.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let masked = T::of(MASKED);

        let tasks: Vec<(usize, usize)> = (0..n_groups)
            .flat_map(|g| (0..self.heads).map(move |hh| (g, hh)))
            .collect();
        let results: Vec<(Array2<T>, Array2<T>)> = tasks
            .par_iter()
            .map(|&(g, hh)| {
                let rows = g * wsize..(g + 1) * wsize;
                let cols = hh * dh..(hh + 1) * dh;
                let qg = qw.slice(s![rows.clone(), cols.clone()]);
                let kg = kw.slice(s![rows.clone(), cols.clone()]);
                let vg = vw.slice(s![rows, cols]);
                let mut scores = matmul(qg, kg.t());
                scores.mapv_inplace(|v| v * scale);
                if let Some(masks) = &masks {
                    let m = &masks[g % nw_img];
                    ndarray::Zip::from(&mut scores).and(m).for_each(|sv, &mm| {
                        if mm {
                            *sv = masked;
                        }
                    });
                }
                let a = softmax_rows(scores.view());
                let o = matmul(a.view(), vg);
                (a, o)
            })
            .collect();

        let mut ctx_w = Array2::zeros((dims.rows(), self.dim));
        let mut attn = Vec::with_capacity(results.len());
        for ((g, hh), (a, o)) in tasks.iter().zip(results) {
            let rows = g * wsize..(g + 1) * wsize;
            let cols = hh * dh..(hh + 1) * dh;
            ctx_w.slice_mut(s![rows, cols]).assign(&o);
            attn.push(a);
        }
        let ctx = scatter_rows(ctx_w.view(), &perm);
        let y = self.o_proj.forward(ps, ctx.view());
        (
            y,
            WinAttnCache {
                perm,
                qw,
                kw,
                vw,
                attn,
                ctx,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: ArrayView2<T>,
        cache: &WinAttnCache<T>,
        dy: ArrayView2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let dctx = self.o_proj.backward(ps, cache.ctx.view(), dy, grads);
        let dctx_w = gather_rows(dctx.view(), &cache.perm);

        let wsize = self.window * self.window;
        let n_groups = cache.perm.len() / wsize;
        let dh = self.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let tasks: Vec<(usize, usize)> = (0..n_groups)
            .flat_map(|g| (0..self.heads).map(move |hh| (g, hh)))
            .collect();
        let results: Vec<(Array2<T>, Array2<T>, Array2<T>)> = tasks
            .par_iter()
            .map(|&(g, hh)| {
                let rows = g * wsize..(g + 1) * wsize;
                let cols = hh * dh..(hh + 1) * dh;
                let qg = cache.qw.slice(s![rows.clone(), cols.clone()]);
                let kg = cache.kw.slice(s![rows.clone(), cols.clone()]);
                let vg = cache.vw.slice(s![rows.clone(), cols.clone()]);
                let a = &cache.attn[g * self.heads + hh];
                let dog = dctx_w.slice(s![rows, cols]);
                let da = matmul(dog, vg.t());
                let dv = matmul(a.t(), dog);
                let mut ds = softmax_backward(a.view(), da.view());
                ds.mapv_inplace(|v| v * scale);
                let dq = matmul(ds.view(), kg);
                let dk = matmul(ds.t(), qg);
                (dq, dk, dv)
            })
            .collect();

        let n = cache.perm.len();
        let mut dqw = Array2::zeros((n, self.dim));
        let mut dkw = Array2::zeros((n, self.dim));
        let mut dvw = Array2::zeros((n, self.dim));
        for ((g, hh), (dq, dk, dv)) in tasks.iter().zip(results) {
            let rows = g * wsize..(g + 1) * wsize;
            let cols = hh * dh..(hh + 1) * dh;
            dqw.slice_mut(s![rows.clone(), cols.clone()]).assign(&dq);
            dkw.slice_mut(s![rows.clone(), cols.clone()]).assign(&dk);
            dvw.slice_mut(s![rows, cols]).assign(&dv);
        }
        let dq = scatter_rows(dqw.view(), &cache.perm);
        let dk = scatter_rows(dkw.view(), &cache.perm);
        let dv = scatter_rows(dvw.view(), &cache.perm);

        let mut dx = self.q_proj.backward(ps, x, dq.view(), grads);
        dx += &self.k_proj.backward(ps, x, dk.view(), grads);
        dx += &self.v_proj.backward(ps, x, dv.view(), grads);
        dx
    }
}

// ---------------------------------------------------------------------------
// Cross-attention against class tokens
// ---------------------------------------------------------------------------

/// Attention where queries come from image tokens and keys/values from a
/// small set of learnable class tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub dim: usize,
    pub heads: usize,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    o_proj: Linear,
}

pub struct CrossAttnCache<T: Scalar> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    ctx: Array2<T>,
}

impl CrossAttention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Self {
        let name = name.into();
        assert!(dim % heads == 0);
        CrossAttention {
            dim,
            heads,
            q_proj: Linear::new(format!("{name}.q"), dim, dim),
            k_proj: Linear::new(format!("{name}.k"), dim, dim),
            v_proj: Linear::new(format!("{name}.v"), dim, dim),
            o_proj: Linear::new(format!("{name}.o"), dim, dim),
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut impl RngCore) {
        self.q_proj.init(ps, rng);
        self.k_proj.init(ps, rng);
        self.v_proj.init(ps, rng);
        self.o_proj.init(ps, rng);
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: ArrayView2<T>,
        class_tokens: ArrayView2<T>,
    ) -> (Array2<T>, CrossAttnCache<T>) {
        let m = class_tokens.shape()[0];
        assert!(m >= 1, "cross-attention needs at least one class token");
        let q = self.q_proj.forward(ps, x);
        let k = self.k_proj.forward(ps, class_tokens);
        let v = self.v_proj.forward(ps, class_tokens);
        let dh = self.dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let n = x.shape()[0];
        let mut ctx = Array2::zeros((n, self.dim));
        let mut attn = Vec::with_capacity(self.heads);
        for hh in 0..self.heads {
            let cols = hh * dh..(hh + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = matmul(qh, kh.t());
            scores.mapv_inplace(|v| v * scale);
            let a = softmax_rows(scores.view());
            let o = matmul(a.view(), vh);
            ctx.slice_mut(s![.., cols]).assign(&o);
            attn.push(a);
        }
        let y = self.o_proj.forward(ps, ctx.view());
        (y, CrossAttnCache { q, k, v, attn, ctx })
    }

    /// Returns (dx, d_class_tokens).
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: ArrayView2<T>,
        class_tokens: ArrayView2<T>,
        cache: &CrossAttnCache<T>,
        dy: ArrayView2<T>,
        grads: &mut Grads<T>,
    ) -> (Array2<T>, Array2<T>) {
        let dctx = self.o_proj.backward(ps, cache.ctx.view(), dy, grads);
        let dh = self.dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let n = x.shape()[0];
        let m = class_tokens.shape()[0];
        let mut dq = Array2::zeros((n, self.dim));
        let mut dk = Array2::zeros((m, self.dim));
        let mut dv = Array2::zeros((m, self.dim));
        for hh in 0..self.heads {
            let cols = hh * dh..(hh + 1) * dh;
            let a = &cache.attn[hh];
            let dog = dctx.slice(s![.., cols.clone()]);
            let da = matmul(dog, cache.v.slice(s![.., cols.clone()]).t());
            let dvh = matmul(a.t(), dog);
            let mut ds = softmax_backward(a.view(), da.view());
            ds.mapv_inplace(|v| v * scale);
            let dqh = matmul(ds.view(), cache.k.slice(s![.., cols.clone()]));
            let dkh = matmul(ds.t(), cache.q.slice(s![.., cols.clone()]));
            dq.slice_mut(s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(s![.., cols.clone()]).assign(&dkh);
            dv.slice_mut(s![.., cols]).assign(&dvh);
        }
        let dx = self.q_proj.backward(ps, x, dq.view(), grads);
        let mut dtok = self.k_proj.backward(ps, class_tokens, dk.view(), grads);
        dtok += &self.v_proj.backward(ps, class_tokens, dv.view(), grads);
        (dx, dtok)
    }
}
