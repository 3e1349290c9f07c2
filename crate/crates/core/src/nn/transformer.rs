//! Pre-norm transformer layer: window attention and an MLP, each behind a
//! residual connection.

use super::linalg::Dims;
use super::ops::{LayerNorm, LayerNormCache, Mlp, MlpCache};
use super::params::{Grads, ParamStore};
use super::WindowAttention;
use crate::Scalar;
use ndarray::{Array2, ArrayView2};
use rand::RngCore;

/// `x + attn(ln1(x))` followed by `x + mlp(ln2(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: WindowAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct TransformerLayerCache<T: Scalar> {
    ln1_cache: LayerNormCache<T>,
    normed1: Array2<T>,
    attn_cache: super::attention::WinAttnCache<T>,
    ln2_cache: LayerNormCache<T>,
    normed2: Array2<T>,
    mlp_cache: MlpCache<T>,
}

impl TransformerLayer {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize, window: usize, shift: usize) -> Self {
        let name = name.into();
        TransformerLayer {
            ln1: LayerNorm::new(format!("{name}.ln1"), dim),
            attn: WindowAttention::new(format!("{name}.attn"), dim, heads, window, shift),
            ln2: LayerNorm::new(format!("{name}.ln2"), dim),
            mlp: Mlp::new(format!("{name}.mlp"), dim, 4),
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut impl RngCore) {
        self.ln1.init(ps);
        self.attn.init(ps, rng);
        self.ln2.init(ps);
        self.mlp.init(ps, rng);
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: ArrayView2<T>,
        dims: Dims,
    ) -> (Array2<T>, TransformerLayerCache<T>) {
        let (normed1, ln1_cache) = self.ln1.forward(ps, x);
        let (attn_out, attn_cache) = self.attn.forward(ps, normed1.view(), dims);
        let mut mid = x.to_owned();
        mid += &attn_out;
        let (normed2, ln2_cache) = self.ln2.forward(ps, mid.view());
        let (mlp_out, mlp_cache) = self.mlp.forward(ps, normed2.view());
        let mut y = mid;
        y += &mlp_out;
        (
            y,
            TransformerLayerCache {
                ln1_cache,
                normed1,
                attn_cache,
                ln2_cache,
                normed2,
                mlp_cache,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &TransformerLayerCache<T>,
        dy: ArrayView2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let dnormed2 = self
            .mlp
            .backward(ps, cache.normed2.view(), &cache.mlp_cache, dy, grads);
        let mut dmid = self.ln2.backward(ps, &cache.ln2_cache, dnormed2.view(), grads);
        dmid += &dy;
        let dnormed1 = self
            .attn
            .backward(ps, cache.normed1.view(), &cache.attn_cache, dmid.view(), grads);
        let mut dx = self.ln1.backward(ps, &cache.ln1_cache, dnormed1.view(), grads);
        dx += &dmid;
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_layer_gradients() {
        for shift in [0usize, 2] {
            let tl = TransformerLayer::new("t", 8, 2, 4, shift);
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(51);
            tl.init(&mut ps, &mut rng);
            let dims = Dims::new(1, 4, 4);
            use rand::Rng;
            let x = Array2::from_shape_fn((dims.rows(), 8), |_| rng.gen::<f64>() - 0.5);
            let err = grad_check(
                &mut ps,
                &x,
                1e-3,
                40,
                |ps, x| tl.forward(ps, x, dims).0,
                |ps, x, dy| {
                    let mut g = Grads::new();
                    let (_, cache) = tl.forward(ps, x, dims);
                    let dx = tl.backward(ps, &cache, dy, &mut g);
                    (g, dx)
                },
            );
            assert!(err < 1e-4, "transformer layer shift {shift} rel err {err}");
        }
    }
}
