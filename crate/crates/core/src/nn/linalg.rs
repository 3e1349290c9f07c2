//! Matrix multiply with a deterministic two-way row split, plus im2col/col2im
//! used by convolution and patch embedding.

use crate::Scalar;
use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis};

/// Batch/grid geometry of a (n·h·w) × C token or feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, h: usize, w: usize) -> Self {
        Dims { n, h, w }
    }
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Work threshold below which a plain single-threaded GEMM wins.
const PAR_MULS: usize = 1 << 21;

fn mat_mul_into<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
}

/// `a · b`, splitting the output rows across the rayon pool when the GEMM is
/// large enough to pay for it. The split changes only which thread computes
/// which rows, so results are bit-identical to the sequential product.
pub fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
    let mut out = Array2::zeros((m, n));
    let threads = rayon::current_num_threads();
    if threads > 1 && m >= 2 && m * n * k >= PAR_MULS {
        let chunk = m.div_ceil(threads.min(4));
        let a_rows: Vec<ArrayView2<T>> = a.axis_chunks_iter(Axis(0), chunk).collect();
        let out_rows: Vec<ArrayViewMut2<T>> = out.axis_chunks_iter_mut(Axis(0), chunk).collect();
        rayon::scope(|s| {
            for (ai, oi) in a_rows.into_iter().zip(out_rows) {
                s.spawn(move |_| mat_mul_into(ai, b, oi));
            }
        });
    } else {
        mat_mul_into(a, b, out.view_mut());
    }
    out
}

/// y += bias broadcast over rows.
pub fn add_bias<T: Scalar>(y: &mut Array2<T>, bias: ndarray::ArrayView1<T>) {
    for mut row in y.rows_mut() {
        row += &bias;
    }
}

/// Sum of rows: the bias gradient of a linear layer.
pub fn sum_rows<T: Scalar>(dy: ArrayView2<T>) -> ndarray::Array1<T> {
    dy.sum_axis(Axis(0))
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Gather sliding-window patches into a (n·ho·wo) × (k²·c) matrix.
/// Column order is (ky, kx, channel); out-of-bounds taps read zero.
pub fn im2col<T: Scalar>(
    x: ArrayView2<T>,
    dims: Dims,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<T>, Dims) {
    let c = x.shape()[1];
    let ho = conv_out(dims.h, k, stride, pad);
    let wo = conv_out(dims.w, k, stride, pad);
    let out_dims = Dims::new(dims.n, ho, wo);
    let mut col = Array2::zeros((out_dims.rows(), k * k * c));
    for b in 0..dims.n {
        let in_base = b * dims.h * dims.w;
        let out_base = b * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let row = out_base + oy * wo + ox;
                for ky in 0..k {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= dims.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= dims.w as isize {
                            continue;
                        }
                        let src = in_base + sy as usize * dims.w + sx as usize;
                        let dst_col = (ky * k + kx) * c;
                        col.row_mut(row)
                            .slice_mut(ndarray::s![dst_col..dst_col + c])
                            .assign(&x.row(src));
                    }
                }
            }
        }
    }
    (col, out_dims)
}

/// Scatter-add the adjoint of [`im2col`]: fold patch-gradient columns back
/// onto the input grid.
pub fn col2im<T: Scalar>(
    dcol: ArrayView2<T>,
    dims: Dims,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let ho = conv_out(dims.h, k, stride, pad);
    let wo = conv_out(dims.w, k, stride, pad);
    let mut dx = Array2::zeros((dims.rows(), c));
    for b in 0..dims.n {
        let in_base = b * dims.h * dims.w;
        let out_base = b * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let row = out_base + oy * wo + ox;
                for ky in 0..k {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= dims.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= dims.w as isize {
                            continue;
                        }
                        let dst = in_base + sy as usize * dims.w + sx as usize;
                        let src_col = (ky * k + kx) * c;
                        for ch in 0..c {
                            dx[[dst, ch]] += dcol[[row, src_col + ch]];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_parallel_matches_sequential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = Array2::from_shape_fn((257, 129), |_| rng.gen::<f32>() - 0.5);
        let b = Array2::from_shape_fn((129, 255), |_| rng.gen::<f32>() - 0.5);
        let got = matmul(a.view(), b.view());
        let mut want = Array2::zeros((257, 255));
        general_mat_mul(1.0f32, &a, &b, 0.0, &mut want);
        assert_eq!(got, want);
    }

    #[test]
    fn im2col_identity_for_1x1() {
        let x = array![[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let (col, d) = im2col(x.view(), Dims::new(1, 2, 2), 1, 1, 0);
        assert_eq!(col, x);
        assert_eq!(d, Dims::new(1, 2, 2));
    }

    #[test]
    fn col2im_is_im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = Dims::new(2, 5, 4);
        let c = 3;
        let x = Array2::from_shape_fn((dims.rows(), c), |_| rng.gen::<f64>() - 0.5);
        let (col, od) = im2col(x.view(), dims, 3, 2, 1);
        let y = Array2::from_shape_fn((od.rows(), 9 * c), |_| rng.gen::<f64>() - 0.5);
        let lhs: f64 = (&col * &y).sum();
        let dx = col2im(y.view(), dims, c, 3, 2, 1);
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[cfg(test)]
mod bench {
    use super::*;

    #[test]
    #[ignore = "manual throughput probe"]
    fn gemm_throughput_probe() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for (m, k, n) in [(4096, 60, 240), (1024, 96, 384), (256, 256, 60), (8192, 540, 60)] {
            let a = Array2::from_shape_fn((m, k), |_| rng.gen::<f32>());
            let b = Array2::from_shape_fn((k, n), |_| rng.gen::<f32>());
            let reps = (2_000_000_000 / (2 * m * k * n)).max(3);
            let t0 = std::time::Instant::now();
            for _ in 0..reps {
                let c = matmul(a.view(), b.view());
                std::hint::black_box(&c);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gflops = (2 * m * k * n * reps) as f64 / dt / 1e9;
            eprintln!("gemm {m}x{k}x{n}: {gflops:.1} GFLOP/s");
        }
    }
}
