//! Central finite-difference gradient checks for arbitrary blocks.

use super::params::{Grads, ParamStore};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error between analytic and numeric gradients of a block.
///
/// The block output is reduced to the scalar `phi = sum(w ⊙ f(params, x))`
/// with a fixed random weighting `w`, so the analytic side is one backward
/// pass with `dy = w`. Central differences with step `eps` are evaluated at
/// up to `max_coords` strided coordinates of every parameter tensor and of
/// the input. Run this at f64.
pub fn grad_check<Fwd, Bwd>(
    ps: &mut ParamStore<f64>,
    x: &Array2<f64>,
    eps: f64,
    max_coords: usize,
    fwd: Fwd,
    bwd: Bwd,
) -> f64
where
    Fwd: Fn(&ParamStore<f64>, ArrayView2<f64>) -> Array2<f64>,
    Bwd: Fn(&ParamStore<f64>, ArrayView2<f64>, ArrayView2<f64>) -> (Grads<f64>, Array2<f64>),
{
    let y0 = fwd(ps, x.view());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let w = Array2::from_shape_fn(y0.raw_dim(), |_| rng.gen::<f64>() - 0.5);
    let phi = |ps: &ParamStore<f64>, x: ArrayView2<f64>| -> f64 { (&fwd(ps, x) * &w).sum() };

    let (grads, dx) = bwd(ps, x.view(), w.view());

    let rel = |a: f64, n: f64| -> f64 { (a - n).abs() / a.abs().max(n.abs()).max(1e-6) };
    let mut worst = 0.0f64;

    let names: Vec<String> = ps.names().cloned().collect();
    for name in names {
        let len = ps.get(&name).len();
        let stride = (len / max_coords).max(1);
        for idx in (0..len).step_by(stride) {
            let orig = ps.get(&name).as_slice().expect("standard layout")[idx];
            ps.get_mut(&name).as_slice_mut().expect("standard layout")[idx] = orig + eps;
            let up = phi(ps, x.view());
            ps.get_mut(&name).as_slice_mut().expect("standard layout")[idx] = orig - eps;
            let down = phi(ps, x.view());
            ps.get_mut(&name).as_slice_mut().expect("standard layout")[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads
                .get(&name)
                .map(|g| g.as_slice().expect("standard layout")[idx])
                .unwrap_or(0.0);
            worst = worst.max(rel(analytic, numeric));
        }
    }

    let mut xp = x.clone();
    let len = xp.len();
    let stride = (len / max_coords).max(1);
    for idx in (0..len).step_by(stride) {
        let orig = xp.as_slice().expect("standard layout")[idx];
        xp.as_slice_mut().expect("standard layout")[idx] = orig + eps;
        let up = phi(ps, xp.view());
        xp.as_slice_mut().expect("standard layout")[idx] = orig - eps;
        let down = phi(ps, xp.view());
        xp.as_slice_mut().expect("standard layout")[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = dx.as_slice().expect("standard layout")[idx];
        worst = worst.max(rel(analytic, numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linalg::Dims;
    use crate::nn::ops::{Conv2d, LayerNorm, Linear, Mlp};
    use crate::nn::patches::PatchMerge;
    use crate::nn::WindowAttention;

    fn rand_input(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn linear_gradients_are_exact() {
        let lin = Linear::new("l", 6, 4);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        lin.init(&mut ps, &mut rng);
        let x = rand_input(2, 5, 6);
        let err = grad_check(
            &mut ps,
            &x,
            1e-3,
            64,
            |ps, x| lin.forward(ps, x),
            |ps, x, dy| {
                let mut g = Grads::new();
                let dx = lin.backward(ps, x, dy, &mut g);
                (g, dx)
            },
        );
        assert!(err < 1e-7, "linear rel err {err}");
    }

    #[test]
    fn layer_norm_gradients() {
        let ln = LayerNorm::new("n", 8);
        let mut ps = ParamStore::new();
        ln.init(&mut ps);
        let x = rand_input(3, 6, 8);
        let err = grad_check(
            &mut ps,
            &x,
            1e-3,
            64,
            |ps, x| ln.forward(ps, x).0,
            |ps, x, dy| {
                let mut g = Grads::new();
                let (_, cache) = ln.forward(ps, x);
                let dx = ln.backward(ps, &cache, dy, &mut g);
                (g, dx)
            },
        );
        assert!(err < 1e-4, "layer_norm rel err {err}");
    }

    #[test]
    fn mlp_gradients() {
        let mlp = Mlp::new("m", 6, 4);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        mlp.init(&mut ps, &mut rng);
        let x = rand_input(5, 7, 6);
        let err = grad_check(
            &mut ps,
            &x,
            1e-3,
            64,
            |ps, x| mlp.forward(ps, x).0,
            |ps, x, dy| {
                let mut g = Grads::new();
                let (_, cache) = mlp.forward(ps, x);
                let dx = mlp.backward(ps, x, &cache, dy, &mut g);
                (g, dx)
            },
        );
        assert!(err < 1e-4, "mlp rel err {err}");
    }

    #[test]
    fn conv_gradients() {
        let conv = Conv2d::same("c", 3, 2, 3);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        conv.init(&mut ps, 0.3, &mut rng);
        let dims = Dims::new(2, 4, 3);
        let x = rand_input(6, dims.rows(), 2);
        let err = grad_check(
            &mut ps,
            &x,
            1e-3,
            64,
            |ps, x| conv.forward(ps, x, dims).0,
            |ps, x, dy| {
                let mut g = Grads::new();
                let dx = conv.backward(ps, x, dims, dy, &mut g);
                (g, dx)
            },
        );
        assert!(err < 1e-6, "conv rel err {err}");
    }

    #[test]
    fn window_attention_gradients_both_shifts() {
        for shift in [0usize, 2] {
            let attn = WindowAttention::new("a", 8, 2, 4, shift);
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            attn.init(&mut ps, &mut rng);
            let dims = Dims::new(1, 4, 8);
            let x = rand_input(8 + shift as u64, dims.rows(), 8);
            let err = grad_check(
                &mut ps,
                &x,
                1e-3,
                48,
                |ps, x| attn.forward(ps, x, dims).0,
                |ps, x, dy| {
                    let mut g = Grads::new();
                    let (_, cache) = attn.forward(ps, x, dims);
                    let dx = attn.backward(ps, x, &cache, dy, &mut g);
                    (g, dx)
                },
            );
            assert!(err < 1e-4, "window attention shift {shift} rel err {err}");
        }
    }

    #[test]
    fn patch_merge_gradients() {
        let pm = PatchMerge::new("p", 4);
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        pm.init(&mut ps, &mut rng);
        let dims = Dims::new(1, 4, 4);
        let x = rand_input(10, dims.rows(), 4);
        let err = grad_check(
            &mut ps,
            &x,
            1e-3,
            64,
            |ps, x| pm.forward(ps, x, dims).0,
            |ps, x, dy| {
                let mut g = Grads::new();
                let (_, cache) = pm.forward(ps, x, dims);
                let dx = pm.backward(ps, dims, &cache, dy, &mut g);
                (g, dx)
            },
        );
        assert!(err < 1e-5, "patch merge rel err {err}");
    }
}
