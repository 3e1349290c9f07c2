//! Image-quality metrics (PSNR, SSIM) and feature-space distribution
//! distances (Fréchet distance over Gaussian fits, unbiased polynomial-kernel
//! MMD), plus a fixed-seed surrogate feature extractor standing in for
//! external pretrained models.

use crate::image::ImagePlane;
use crate::nn::{Conv2d, Dims, ParamStore};
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// PSNR cap reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` on [0, 1] images; identical inputs report the cap.
pub fn psnr<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let mut acc = 0f64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR over matrices of pixel rows (used for per-tile comparisons).
pub fn psnr_matrix<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> f64 {
    let mut acc = 0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn to_gray<T: Scalar>(img: &ImagePlane<T>) -> Array2<f64> {
    let (h, w, c) = img.data.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += img.data[[y, x, ch]].as_f64();
        }
        acc / c as f64
    })
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) over valid window
/// positions; 3-channel images are converted to grayscale by channel mean.
pub fn ssim<T: Scalar>(a: &ImagePlane<T>, b: &ImagePlane<T>) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape("ssim shape mismatch".to_string()));
    }
    let (h, w, _) = a.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let ga = to_gray(a);
    let gb = to_gray(b);
    let k = gaussian_kernel();

    // separable filtering of the five moment maps
    let filt = |m: &Array2<f64>| -> Array2<f64> {
        let (h, w) = m.dim();
        let mut tmp = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
        for y in 0..h {
            for x in 0..w - SSIM_WINDOW + 1 {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    acc += kv * m[[y, x + i]];
                }
                tmp[[y, x]] = acc;
            }
        }
        let mut out = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
        for y in 0..h - SSIM_WINDOW + 1 {
            for x in 0..w - SSIM_WINDOW + 1 {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[[y + i, x]];
                }
                out[[y, x]] = acc;
            }
        }
        out
    };

    let mu_a = filt(&ga);
    let mu_b = filt(&gb);
    let aa = filt(&(&ga * &ga));
    let bb = filt(&(&gb * &gb));
    let ab = filt(&(&ga * &gb));

    let mut acc = 0.0;
    let (oh, ow) = mu_a.dim();
    for y in 0..oh {
        for x in 0..ow {
            let ma = mu_a[[y, x]];
            let mb = mu_b[[y, x]];
            let va = aa[[y, x]] - ma * ma;
            let vb = bb[[y, x]] - mb * mb;
            let cov = ab[[y, x]] - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            acc += s;
        }
    }
    Ok(acc / (oh * ow) as f64)
}

// ---------------------------------------------------------------------------
// Feature sets and distribution distances
// ---------------------------------------------------------------------------

/// Where a feature set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureProvenance {
    Surrogate,
    External,
}

/// M samples × D dims of real-valued features.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub data: Array2<f64>,
    pub provenance: FeatureProvenance,
}

impl FeatureSet {
    pub fn new(data: Array2<f64>, provenance: FeatureProvenance) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("feature set has non-finite entries".to_string()));
        }
        Ok(FeatureSet { data, provenance })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Mean and covariance (1/(M−1)) of a feature set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

pub fn feature_stats(f: &FeatureSet) -> Result<GaussianStats> {
    let m = f.len();
    let d = f.dim();
    if m < 2 {
        return Err(Error::config(format!("need at least 2 samples for statistics, got {m}")));
    }
    if m <= d {
        eprintln!("feature_stats: {m} samples for {d} dims; covariance will be rank-deficient");
    }
    let mean = f.data.sum_axis(ndarray::Axis(0)) / m as f64;
    let mut centered = f.data.clone();
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let cov = centered.t().dot(&centered) / (m - 1) as f64;
    Ok(GaussianStats { mean, cov })
}

const EIG_CLAMP: f64 = 1e-8;

fn symmetric_eigen(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let d = m.shape()[0];
    let nm = nalgebra::DMatrix::from_fn(d, d, |i, j| m[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(nm);
    let vals = Array1::from_shape_fn(d, |i| eig.eigenvalues[i]);
    let vecs = Array2::from_shape_fn((d, d), |(i, j)| eig.eigenvectors[(i, j)]);
    Ok((vals, vecs))
}

fn check_symmetric(m: &Array2<f64>, what: &str) -> Result<()> {
    let d = m.shape()[0];
    if m.shape()[1] != d {
        return Err(Error::shape(format!("{what} must be square")));
    }
    for i in 0..d {
        for j in 0..i {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-9 {
                return Err(Error::numeric(format!("{what} not symmetric at ({i},{j})")));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues in
/// [−1e-8, 0) clamp to zero, anything lower is an error.
fn sqrtm_psd(m: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let mut sq = Array1::zeros(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if v < -EIG_CLAMP {
            return Err(Error::numeric(format!("{what}: eigenvalue {v} below -{EIG_CLAMP}")));
        }
        sq[i] = v.max(0.0).sqrt();
    }
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        col *= sq[j];
    }
    Ok(scaled.dot(&vecs.t()))
}

/// Squared Fréchet distance between two Gaussian fits:
/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`, with the cross square root
/// evaluated through the symmetric form `Σ1^{1/2} Σ2 Σ1^{1/2}`.
pub fn frechet_distance(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    check_symmetric(&g1.cov, "covariance 1")?;
    check_symmetric(&g2.cov, "covariance 2")?;
    if g1.mean.len() != g2.mean.len() {
        return Err(Error::shape("mean dimension mismatch".to_string()));
    }
    let dmu = &g1.mean - &g2.mean;
    let mean_term: f64 = dmu.iter().map(|v| v * v).sum();
    let s1_half = sqrtm_psd(&g1.cov, "covariance 1")?;
    let inner = s1_half.dot(&g2.cov).dot(&s1_half);
    // symmetrize away rounding before the eigendecomposition
    let inner = (&inner + &inner.t()) * 0.5;
    let (vals, _) = symmetric_eigen(&inner)?;
    let mut tr_sqrt = 0.0;
    for &v in vals.iter() {
        if v < -EIG_CLAMP {
            return Err(Error::numeric(format!("cross term eigenvalue {v} below -{EIG_CLAMP}")));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let tr1: f64 = (0..g1.cov.shape()[0]).map(|i| g1.cov[[i, i]]).sum();
    let tr2: f64 = (0..g2.cov.shape()[0]).map(|i| g2.cov[[i, i]]).sum();
    Ok(mean_term + tr1 + tr2 - 2.0 * tr_sqrt)
}

/// Polynomial kernel `(xᵀy/D + 1)³`.
pub fn poly_kernel(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let d = x.shape()[1] as f64;
    let mut k = x.dot(&y.t());
    k.mapv_inplace(|v| (v / d + 1.0).powi(3));
    k
}

/// Unbiased MMD² estimator with the degree-3 polynomial kernel: off-diagonal
/// means of k(X,X) and k(Y,Y) minus twice the mean of k(X,Y). Slightly
/// negative values are expected from unbiasedness.
pub fn kernel_mmd2(xs: &FeatureSet, ys: &FeatureSet) -> Result<f64> {
    let (m, n) = (xs.len(), ys.len());
    if m < 2 || n < 2 {
        return Err(Error::config(format!(
            "unbiased MMD needs at least 2 samples per side, got {m} and {n}"
        )));
    }
    if xs.dim() != ys.dim() {
        return Err(Error::shape("feature dimension mismatch".to_string()));
    }
    let kxx = poly_kernel(xs.data.view(), xs.data.view());
    let kyy = poly_kernel(ys.data.view(), ys.data.view());
    let kxy = poly_kernel(xs.data.view(), ys.data.view());
    let sum_off = |k: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..k.shape()[0] {
            for j in 0..k.shape()[1] {
                if i != j {
                    acc += k[[i, j]];
                }
            }
        }
        acc
    };
    let term_x = sum_off(&kxx) / (m * (m - 1)) as f64;
    let term_y = sum_off(&kyy) / (n * (n - 1)) as f64;
    let term_xy = 2.0 * kxy.sum() / (m * n) as f64;
    Ok(term_x + term_y - term_xy)
}

// ---------------------------------------------------------------------------
// Surrogate feature extractor
// ---------------------------------------------------------------------------

/// Output dimension of the surrogate extractor.
pub const SURROGATE_DIM: usize = 64;
pub const SURROGATE_SEED: u64 = 0x5EED_F00D;

/// A frozen random-weight 4-layer strided convolution net with global average
/// pooling. Deterministic in (images, seed); a stand-in feature space, not a
/// perceptual model.
pub struct SurrogateExtractor {
    convs: Vec<Conv2d>,
    ps: ParamStore<f32>,
}

impl SurrogateExtractor {
    pub fn new(seed: u64) -> Self {
        let channels = [3usize, 16, 32, 64, SURROGATE_DIM];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let convs: Vec<Conv2d> = (0..4)
            .map(|i| {
                let conv = Conv2d::strided(format!("sur.c{i}"), 3, channels[i], channels[i + 1], 2, 1);
                conv.init_fan_in(&mut ps, &mut rng);
                conv
            })
            .collect();
        SurrogateExtractor { convs, ps }
    }

    /// Feature vector of one image.
    pub fn features_of(&self, img: &ImagePlane<f32>) -> Array1<f64> {
        let (h, w, _) = img.data.dim();
        let mut x = img.as_matrix().to_owned();
        let mut dims = Dims::new(1, h, w);
        for conv in &self.convs {
            let (y, nd) = conv.forward(&self.ps, x.view(), dims);
            x = y.mapv(|v: f32| v.max(0.0));
            dims = nd;
        }
        let rows = x.shape()[0] as f64;
        Array1::from_shape_fn(SURROGATE_DIM, |c| {
            x.column(c).iter().map(|&v| v as f64).sum::<f64>() / rows
        })
    }

    pub fn features(&self, images: &[ImagePlane<f32>]) -> Result<FeatureSet> {
        use rayon::prelude::*;
        let rows: Vec<Array1<f64>> = images.par_iter().map(|img| self.features_of(img)).collect();
        let mut data = Array2::zeros((rows.len(), SURROGATE_DIM));
        for (i, r) in rows.iter().enumerate() {
            data.row_mut(i).assign(r);
        }
        FeatureSet::new(data, FeatureProvenance::Surrogate)
    }
}

/// Convenience wrapper: surrogate features at a fixed seed.
pub fn surrogate_features(images: &[ImagePlane<f32>], seed: u64) -> Result<FeatureSet> {
    SurrogateExtractor::new(seed).features(images)
}

// ---------------------------------------------------------------------------
// Feature file format: magic, M, D (u32 LE), then M·D little-endian f32
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: &[u8; 4] = b"SSRF";

pub fn save_features(f: &FeatureSet, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&(f.len() as u32).to_le_bytes())?;
    out.write_all(&(f.dim() as u32).to_le_bytes())?;
    for v in f.data.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format("feature file magic mismatch".to_string()));
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().expect("slice of 4")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("slice of 4")) as usize;
    let need = 12 + 4 * m * d;
    if bytes.len() != need {
        return Err(Error::format(format!(
            "feature payload size mismatch: file has {} bytes, header implies {need}",
            bytes.len()
        )));
    }
    let mut data = Array2::zeros((m, d));
    for i in 0..m * d {
        let off = 12 + 4 * i;
        let raw: [u8; 4] = bytes[off..off + 4].try_into().expect("slice of 4");
        data[[i / d, i % d]] = f32::from_le_bytes(raw) as f64;
    }
    FeatureSet::new(data, FeatureProvenance::External)
}
