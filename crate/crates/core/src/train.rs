//! End-to-end training: joint forward through tile selection and refinement,
//! combined loss, Adam updates, checkpointing, validation, and inference.

use crate::image::{bicubic_resample, decode_image, nearest_resample, DatasetManifest, ImagePlane};
use crate::metrics;
use crate::nn::params::{load_checkpoint, save_checkpoint};
use crate::nn::{gumbel_noise, gumbel_softmax, gumbel_softmax_backward, Grads, ParamStore};
use crate::refiner::{RefinerConfig, RefinerNet};
use crate::selector::{
    flatten_labels, positive_probs, selection_loss, selection_loss_grad, selection_metrics,
    selection_outputs, SelectionOutput, SelectorConfig, SelectorNet, SCALE_GRIDS,
};
use crate::tiling::{make_pyramid_labels, partition_tiles, regroup_tiles, PyramidLabels, TileBatch};
use crate::{Error, Real, Result, Scalar};
use ndarray::{s, Array1, Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the refinement L1 term in the combined loss.
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Epochs routed by ground-truth labels before switching to predictions.
    pub warmup_epochs: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Validation images scored per epoch (0 = all).
    pub val_subset: usize,
    /// Skip optimizer updates for selection parameters.
    pub freeze_ts: bool,
    /// Route tiles by the max of all three prediction scales.
    pub use_max_consolidation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lr: 1e-5,
            epochs: 50,
            batch: 1,
            seed: 0,
            warmup_epochs: 2,
            clip_norm: 1.0,
            val_subset: 0,
            freeze_ts: false,
            use_max_consolidation: false,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 2e-4,
            epochs: 12,
            batch: 2,
            seed: 7,
            val_subset: 24,
            ..TrainConfig::default()
        }
    }
}

/// Complete pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsrConfig {
    pub selector: SelectorConfig,
    pub refiner: RefinerConfig,
    pub train: TrainConfig,
    /// Ground-truth (and output) edge length.
    pub hr_edge: usize,
    /// Upscaling factor; LR edge = hr_edge / scale.
    pub scale: usize,
    /// Tiles per image edge.
    pub grid: usize,
}

impl Default for SsrConfig {
    fn default() -> Self {
        SsrConfig {
            selector: SelectorConfig::default(),
            refiner: RefinerConfig::default(),
            train: TrainConfig::default(),
            hr_edge: 1024,
            scale: 4,
            grid: 4,
        }
    }
}

impl SsrConfig {
    /// Laptop-scale configuration: 64-pixel LR inputs upscaled 4× with the
    /// slim selector and refiner.
    pub fn desk() -> Self {
        SsrConfig {
            selector: SelectorConfig::desk(),
            refiner: RefinerConfig::desk(),
            train: TrainConfig::desk(),
            hr_edge: 256,
            scale: 4,
            grid: 4,
        }
    }

    pub fn lr_edge(&self) -> usize {
        self.hr_edge / self.scale
    }

    pub fn tile_edge(&self) -> usize {
        self.lr_edge() / self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 3 | 4) {
            return Err(Error::config(format!("scale must be 2, 3, or 4, got {}", self.scale)));
        }
        if self.hr_edge % self.scale != 0 {
            return Err(Error::config("HR edge not divisible by scale".to_string()));
        }
        if self.lr_edge() % self.grid != 0 {
            return Err(Error::config("LR edge not divisible by tile grid".to_string()));
        }
        if self.refiner.scale != self.scale {
            return Err(Error::config(format!(
                "refiner scale {} disagrees with pipeline scale {}",
                self.refiner.scale, self.scale
            )));
        }
        if self.train.alpha < 0.0 {
            return Err(Error::config("alpha must be non-negative".to_string()));
        }
        if self.train.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive".to_string()));
        }
        if self.grid != SCALE_GRIDS[2] {
            return Err(Error::config(format!(
                "routing grid {} must match the coarsest classifier grid {}",
                self.grid, SCALE_GRIDS[2]
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction (β1 = 0.9, β2 = 0.999, ε = 1e-8).
pub struct Adam<T: Scalar> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every gradient entry; names with a prefix in
    /// `skip_prefixes` are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &Grads<T>, skip_prefixes: &[&str]) {
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 / (1.0 - self.beta1.powi(self.t)));
        let corr2 = T::of(1.0 / (1.0 - self.beta2.powi(self.t)));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (name, g) in grads.iter() {
            if skip_prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            ndarray::Zip::from(v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            let p = ps.get_mut(name);
            ndarray::Zip::from(p)
                .and(&self.m[name])
                .and(&self.v[name])
                .for_each(|p, &m, &v| {
                    let mhat = m * corr1;
                    let vhat = v * corr2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

// ---------------------------------------------------------------------------
// Dataset in memory
// ---------------------------------------------------------------------------

pub struct LoadedRecord {
    pub lr: ImagePlane<Real>,
    pub hr: ImagePlane<Real>,
    pub labels: PyramidLabels,
}

/// Decode every record and pool its mask into pyramid labels at LR scale.
pub fn load_dataset(manifest: &DatasetManifest, cfg: &SsrConfig) -> Result<Vec<LoadedRecord>> {
    let lr_edge = cfg.lr_edge();
    manifest
        .records
        .par_iter()
        .map(|rec| {
            let lr = decode_image::<Real>(&manifest.path_of(&rec.lr))?;
            let hr = decode_image::<Real>(&manifest.path_of(&rec.hr))?;
            let mask = decode_image::<Real>(&manifest.path_of(&rec.mask))?;
            if lr.height() != lr_edge || hr.height() != cfg.hr_edge {
                return Err(Error::shape(format!(
                    "record {} has LR {} / HR {}, expected {lr_edge}/{}",
                    rec.lr,
                    lr.height(),
                    hr.height(),
                    cfg.hr_edge
                )));
            }
            let mask_lr = nearest_resample(&mask, lr_edge, lr_edge);
            let labels = make_pyramid_labels(&mask_lr, SCALE_GRIDS)?;
            Ok(LoadedRecord { lr, hr, labels })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SsrLossTerms {
    pub l_ts: f64,
    pub l_tr: f64,
    pub l_ssr: f64,
}

/// Combined loss: pyramid cross-entropy plus α times the mean-reduced L1
/// between the refined and ground-truth images.
pub fn ssr_loss<T: Scalar>(
    sel: &SelectionOutput,
    labels: &PyramidLabels,
    i_hr: &ImagePlane<T>,
    i_gt: &ImagePlane<T>,
    alpha: f64,
) -> Result<SsrLossTerms> {
    if i_hr.data.dim() != i_gt.data.dim() {
        return Err(Error::shape(format!(
            "refined {:?} vs ground truth {:?}",
            i_hr.data.dim(),
            i_gt.data.dim()
        )));
    }
    let probs: [Array1<f64>; 3] = [
        Array1::from_iter(sel.probs[0].iter().copied()),
        Array1::from_iter(sel.probs[1].iter().copied()),
        Array1::from_iter(sel.probs[2].iter().copied()),
    ];
    let flat = flatten_labels(&[labels]);
    let l_ts = selection_loss(
        &[probs[0].view(), probs[1].view(), probs[2].view()],
        &[flat[0].view(), flat[1].view(), flat[2].view()],
    );
    let mut acc = 0.0;
    for (a, b) in i_hr.data.iter().zip(i_gt.data.iter()) {
        acc += (a.as_f64() - b.as_f64()).abs();
    }
    let l_tr = acc / i_hr.data.len() as f64;
    Ok(SsrLossTerms {
        l_ts,
        l_tr,
        l_ssr: l_ts + alpha * l_tr,
    })
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ts: f64,
    pub l_tr: f64,
    pub l_ssr: f64,
    pub frac_selected: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_tpr: f64,
    pub val_maxf: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ValStats {
    pub psnr: f64,
    pub ssim: f64,
    pub tpr: f64,
    pub maxf: f64,
    pub frac_selected: f64,
    pub tpr_defined: bool,
    /// Mean PSNR over ground-truth-positive tiles, network output vs GT.
    pub psnr_pos_ssr: f64,
    /// Mean PSNR over the same tiles, bicubic upscale vs GT.
    pub psnr_pos_bicubic: f64,
}

pub struct StepStats {
    pub l_ts: f64,
    pub l_tr: f64,
    pub l_ssr: f64,
    pub frac_selected: f64,
}

pub struct Trainer {
    pub cfg: SsrConfig,
    pub selector: SelectorNet,
    pub refiner: RefinerNet,
    pub ps: ParamStore<Real>,
    pub adam: Adam<Real>,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: SsrConfig) -> Result<Self> {
        cfg.validate()?;
        let selector = SelectorNet::new(&cfg.selector, cfg.lr_edge(), 3)?;
        let refiner = RefinerNet::new(&cfg.refiner, cfg.tile_edge(), 3)?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        selector.init(&mut ps, &mut rng);
        refiner.init(&mut ps, &mut rng);
        let adam = Adam::new(cfg.train.lr);
        Ok(Trainer {
            cfg,
            selector,
            refiner,
            ps,
            adam,
            epoch: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": serde_json::to_value(&self.cfg).map_err(|e| Error::format(e.to_string()))?,
            "epoch": self.epoch,
        });
        save_checkpoint(&self.ps, &meta, path)
    }

    /// Restore a trainer from a checkpoint, validating shapes against the
    /// embedded configuration.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (ps, meta) = load_checkpoint::<Real>(path)?;
        let cfg: SsrConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        let mut fresh = Trainer::new(cfg)?;
        ps.validate_against(&fresh.ps)?;
        fresh.ps = ps;
        fresh.epoch = epoch;
        Ok(fresh)
    }

    /// Load a checkpoint into a trainer built from `cfg`, failing on any
    /// shape mismatch (wrong feature widths, depths, and so on).
    pub fn from_checkpoint_with_config(path: &Path, cfg: SsrConfig) -> Result<Self> {
        let (ps, meta) = load_checkpoint::<Real>(path)?;
        let mut fresh = Trainer::new(cfg)?;
        ps.validate_against(&fresh.ps)?;
        fresh.ps = ps;
        fresh.epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        Ok(fresh)
    }

    fn rng_for_step(&self, epoch: usize, step: usize) -> ChaCha8Rng {
        let tag = (epoch as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step as u64)
            .wrapping_add(self.cfg.train.seed.wrapping_mul(0x5851_F42D_4C95_7F2D));
        ChaCha8Rng::seed_from_u64(tag)
    }

    /// Stack LR images of a batch into one (B·H·W) × 3 matrix.
    fn stack_lr(&self, batch: &[&LoadedRecord]) -> Array2<Real> {
        let edge = self.cfg.lr_edge();
        let rows = edge * edge;
        let mut out = Array2::zeros((batch.len() * rows, 3));
        for (b, rec) in batch.iter().enumerate() {
            out.slice_mut(s![b * rows..(b + 1) * rows, ..])
                .assign(&rec.lr.as_matrix());
        }
        out
    }

    /// Stack tile pixels of every image in the batch, tiles row-major.
    fn stack_tiles(&self, batch: &[&LoadedRecord]) -> Result<Array2<Real>> {
        let g = self.cfg.grid;
        let t = self.cfg.tile_edge();
        let per_img = g * g * t * t;
        let mut out = Array2::zeros((batch.len() * per_img, 3));
        for (b, rec) in batch.iter().enumerate() {
            let tiles = partition_tiles(&rec.lr, g)?;
            out.slice_mut(s![b * per_img..(b + 1) * per_img, ..])
                .assign(&tiles.pixels);
        }
        Ok(out)
    }

    fn stack_gt_tiles(&self, batch: &[&LoadedRecord]) -> Result<Array2<Real>> {
        let g = self.cfg.grid;
        let t_out = self.cfg.hr_edge / g;
        let per_img = g * g * t_out * t_out;
        let mut out = Array2::zeros((batch.len() * per_img, 3));
        for (b, rec) in batch.iter().enumerate() {
            let tiles = partition_tiles(&rec.hr, g)?;
            out.slice_mut(s![b * per_img..(b + 1) * per_img, ..])
                .assign(&tiles.pixels);
        }
        Ok(out)
    }

    /// One optimizer step over a batch of records.
    pub fn train_step(&mut self, batch: &[&LoadedRecord], epoch: usize, step: usize) -> Result<StepStats> {
        let bsz = batch.len();
        let n_cells = self.cfg.grid * self.cfg.grid;
        let warmup = epoch < self.cfg.train.warmup_epochs;

        // selection forward
        let sel_in = self.stack_lr(batch);
        let (logits, sel_cache) = self.selector.forward(&self.ps, sel_in.view(), bsz);

        // selection loss over all batch cells
        let label_refs: Vec<&PyramidLabels> = batch.iter().map(|r| &r.labels).collect();
        let flat = flatten_labels(&label_refs);
        let probs64: [Array1<f64>; 3] = [
            positive_probs(logits[0].view()).mapv(|v| v.as_f64()),
            positive_probs(logits[1].view()).mapv(|v| v.as_f64()),
            positive_probs(logits[2].view()).mapv(|v| v.as_f64()),
        ];
        let l_ts = selection_loss(
            &[probs64[0].view(), probs64[1].view(), probs64[2].view()],
            &[flat[0].view(), flat[1].view(), flat[2].view()],
        );
        let mut dlogits = [
            selection_loss_grad(&logits[0], flat[0].view(), 1.0),
            selection_loss_grad(&logits[1], flat[1].view(), 1.0),
            selection_loss_grad(&logits[2], flat[2].view(), 1.0),
        ];

        // routing: ground-truth labels during warm-up, Gumbel samples after
        let mut st_soft: Option<Array2<Real>> = None;
        let gates: Vec<u8> = if warmup {
            flat[2].to_vec()
        } else {
            let mut rng = self.rng_for_step(epoch, step);
            let noise = gumbel_noise::<Real>(logits[2].dim(), &mut rng);
            let (soft, hard, _) = gumbel_softmax(logits[2].view(), self.cfg.selector.tau, Some(noise.view()))?;
            let g: Vec<u8> = (0..bsz * n_cells).map(|i| (hard[[i, 1]] == 1.0) as u8).collect();
            st_soft = Some(soft);
            g
        };

        // refinement forward over all tiles of the batch
        let tiles = self.stack_tiles(batch)?;
        let n_tiles = bsz * n_cells;
        let (hr, _, ref_cache) = self
            .refiner
            .refine_forward(&self.ps, tiles.view(), n_tiles, &gates, false);

        // mean L1 against ground-truth tiles (same pixels as whole images)
        let gt = self.stack_gt_tiles(batch)?;
        let mut acc = 0.0f64;
        for (a, b) in hr.iter().zip(gt.iter()) {
            acc += (*a as f64 - *b as f64).abs();
        }
        let l_tr = acc / hr.len() as f64;
        let alpha = self.cfg.train.alpha;
        let l_ssr = l_ts + alpha * l_tr;
        if !l_ssr.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at epoch {epoch} step {step}: l_ts {l_ts}, l_tr {l_tr}"
            )));
        }

        let mut grads = Grads::new();
        if alpha > 0.0 {
            let scale = (alpha / hr.len() as f64) as Real;
            let mut d_hr = Array2::zeros(hr.raw_dim());
            ndarray::Zip::from(&mut d_hr).and(&hr).and(&gt).for_each(|d, &a, &b| {
                *d = if a > b {
                    scale
                } else if a < b {
                    -scale
                } else {
                    0.0
                };
            });
            let d_gates = self
                .refiner
                .refine_backward(&self.ps, tiles.view(), &ref_cache, d_hr.view(), &mut grads);

            // straight-through: route gate gradients into the coarse logits
            if let Some(soft) = &st_soft {
                let mut d_soft = Array2::<Real>::zeros(soft.raw_dim());
                for (i, &dg) in d_gates.iter().enumerate() {
                    d_soft[[i, 1]] = dg;
                }
                let d_st = gumbel_softmax_backward(soft.view(), d_soft.view(), self.cfg.selector.tau);
                dlogits[2] += &d_st;
            }
        }
        self.selector
            .backward(&self.ps, sel_in.view(), &sel_cache, &dlogits, &mut grads);

        clip_global_norm(&mut grads, self.cfg.train.clip_norm);
        let skip: &[&str] = if self.cfg.train.freeze_ts { &["ts."] } else { &[] };
        self.adam.step(&mut self.ps, &grads, skip);

        let frac = gates.iter().map(|&g| g as f64).sum::<f64>() / gates.len() as f64;
        Ok(StepStats {
            l_ts,
            l_tr,
            l_ssr,
            frac_selected: frac,
        })
    }

    /// Full training loop; appends one record per epoch to `logs` and the
    /// optional JSON-lines writer.
    pub fn train(
        &mut self,
        train_set: &[LoadedRecord],
        val_set: &[LoadedRecord],
        mut log_out: Option<&mut dyn Write>,
    ) -> Result<Vec<EpochLog>> {
        if train_set.is_empty() {
            return Err(Error::config("empty training set".to_string()));
        }
        if let Some(out) = log_out.as_deref_mut() {
            let header = serde_json::json!({"config": &self.cfg});
            writeln!(out, "{header}")?;
        }
        let mut logs = Vec::new();
        let total = self.cfg.train.epochs;
        while self.epoch < total {
            let epoch = self.epoch;
            let t0 = std::time::Instant::now();
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.cfg.train.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(epoch as u64),
            );
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut sums = (0.0, 0.0, 0.0, 0.0);
            let mut steps = 0usize;
            for (step, chunk) in order.chunks(self.cfg.train.batch.max(1)).enumerate() {
                let batch: Vec<&LoadedRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
                let stats = self.train_step(&batch, epoch, step)?;
                sums.0 += stats.l_ts;
                sums.1 += stats.l_tr;
                sums.2 += stats.l_ssr;
                sums.3 += stats.frac_selected;
                steps += 1;
            }
            let n = steps as f64;
            let val = self.validate(val_set, self.cfg.train.val_subset)?;
            let log = EpochLog {
                epoch,
                l_ts: sums.0 / n,
                l_tr: sums.1 / n,
                l_ssr: sums.2 / n,
                frac_selected: sums.3 / n,
                val_psnr: val.psnr,
                val_ssim: val.ssim,
                val_tpr: val.tpr,
                val_maxf: val.maxf,
            };
            if let Some(out) = log_out.as_deref_mut() {
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string(&log).map_err(|e| Error::format(e.to_string()))?
                )?;
            }
            eprintln!(
                "epoch {epoch}: l_ssr {:.4} (ts {:.4}, tr {:.4}) frac {:.2} val_psnr {:.2} tpr {:.3} [{:.1}s]",
                log.l_ssr,
                log.l_ts,
                log.l_tr,
                log.frac_selected,
                log.val_psnr,
                log.val_tpr,
                t0.elapsed().as_secs_f64()
            );
            logs.push(log);
            self.epoch += 1;
        }
        Ok(logs)
    }

    /// Deterministic inference: argmax routing (no Gumbel noise), dual-path
    /// refinement, regrouped output clamped to [0, 1].
    pub fn infer(&self, lr: &ImagePlane<Real>) -> Result<(ImagePlane<Real>, SelectionOutput)> {
        let edge = self.cfg.lr_edge();
        if lr.height() != edge || lr.width() != edge {
            return Err(Error::shape(format!(
                "input {}x{}, expected {edge}x{edge}",
                lr.height(),
                lr.width()
            )));
        }
        let (logits, _) = self.selector.forward(&self.ps, lr.as_matrix(), 1);
        let outs = selection_outputs(
            &logits,
            1,
            self.cfg.selector.tau,
            None,
            self.cfg.train.use_max_consolidation,
        )?;
        let sel = outs.into_iter().next().expect("one image");
        let tiles = partition_tiles(lr, self.cfg.grid)?;
        let refined = crate::refiner::refine_batch(&self.refiner, &self.ps, &tiles, &sel.routing, true)?;
        let hr = regroup_tiles(&refined)?;
        Ok((hr, sel))
    }

    /// Quality and selection metrics over (a subset of) the validation set.
    pub fn validate(&self, val: &[LoadedRecord], subset: usize) -> Result<ValStats> {
        let n = if subset == 0 { val.len() } else { subset.min(val.len()) };
        let records = &val[..n];
        struct PerImage {
            psnr: f64,
            ssim: f64,
            probs: Vec<f64>,
            hard: Vec<u8>,
            labels: Vec<u8>,
            pos_pairs: Vec<(f64, f64)>,
        }
        let results: Vec<Result<PerImage>> = records
            .par_iter()
            .map(|rec| {
                let (hr, sel) = self.infer(&rec.lr)?;
                let psnr = metrics::psnr(&hr, &rec.hr)?;
                let ssim = metrics::ssim(&hr, &rec.hr)?;
                let probs: Vec<f64> = sel.probs[2].iter().copied().collect();
                let hard: Vec<u8> = sel.routing.iter().copied().collect();
                let labels: Vec<u8> = rec.labels.routing().iter().copied().collect();
                // per-tile PSNR on ground-truth-positive tiles: network
                // output vs bicubic upscale of the same LR tile
                let g = self.cfg.grid;
                let t = self.cfg.tile_edge();
                let t_out = t * self.cfg.scale;
                let lr_tiles = partition_tiles(&rec.lr, g)?;
                let hr_tiles = partition_tiles(&hr, g)?;
                let gt_tiles = partition_tiles(&rec.hr, g)?;
                let mut pos_pairs = Vec::new();
                for (i, &(r, c)) in lr_tiles.origin_index.iter().enumerate() {
                    if rec.labels.routing()[[r, c]] != 1 {
                        continue;
                    }
                    let lr_tile = ImagePlane::from_matrix(lr_tiles.tile_view(i), t, t);
                    let up = bicubic_resample(&lr_tile, t_out, t_out)?;
                    let p_ssr = metrics::psnr_matrix(hr_tiles.tile_view(i), gt_tiles.tile_view(i));
                    let p_bic = metrics::psnr_matrix(up.as_matrix(), gt_tiles.tile_view(i));
                    pos_pairs.push((p_ssr, p_bic));
                }
                Ok(PerImage {
                    psnr,
                    ssim,
                    probs,
                    hard,
                    labels,
                    pos_pairs,
                })
            })
            .collect();

        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        let mut probs = Vec::new();
        let mut hard = Vec::new();
        let mut labels = Vec::new();
        let mut pos_ssr = Vec::new();
        let mut pos_bic = Vec::new();
        for r in results {
            let r = r?;
            psnr_sum += r.psnr;
            ssim_sum += r.ssim;
            probs.extend(r.probs);
            hard.extend(r.hard);
            labels.extend(r.labels);
            for (a, b) in r.pos_pairs {
                pos_ssr.push(a);
                pos_bic.push(b);
            }
        }
        let probs = Array1::from_vec(probs);
        let hard = Array1::from_vec(hard);
        let labels = Array1::from_vec(labels);
        let sel = selection_metrics(probs.view(), hard.view(), labels.view());
        let mean = |v: &[f64]| -> f64 {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(ValStats {
            psnr: psnr_sum / n.max(1) as f64,
            ssim: ssim_sum / n.max(1) as f64,
            tpr: sel.tpr,
            maxf: sel.maxf,
            frac_selected: sel.fraction_selected,
            tpr_defined: sel.tpr_defined,
            psnr_pos_ssr: mean(&pos_ssr),
            psnr_pos_bicubic: mean(&pos_bic),
        })
    }

    /// Per-scale selection report over a validation set.
    pub fn selection_report(&self, val: &[LoadedRecord]) -> Result<crate::selector::SelectionReport> {
        let mut per_scale: Vec<(Vec<f64>, Vec<u8>, Vec<u8>)> = vec![(vec![], vec![], vec![]); 3];
        let mut routing_example: Vec<Vec<u8>> = Vec::new();
        for rec in val {
            let (_, sel) = self.infer(&rec.lr)?;
            for i in 0..3 {
                per_scale[i].0.extend(sel.probs[i].iter().copied());
                per_scale[i].1.extend(sel.hard[i].iter().copied());
                per_scale[i].2.extend(rec.labels.levels[i].iter().copied());
            }
            if routing_example.is_empty() {
                routing_example = sel
                    .routing
                    .rows()
                    .into_iter()
                    .map(|r| r.to_vec())
                    .collect();
            }
        }
        let scales = per_scale
            .iter()
            .enumerate()
            .map(|(i, (p, h, y))| {
                let m = selection_metrics(
                    Array1::from_vec(p.clone()).view(),
                    Array1::from_vec(h.clone()).view(),
                    Array1::from_vec(y.clone()).view(),
                );
                crate::selector::ScaleReport {
                    grid: SCALE_GRIDS[i],
                    tpr: m.tpr,
                    maxf: m.maxf,
                    fraction_selected: m.fraction_selected,
                    tpr_defined: m.tpr_defined,
                }
            })
            .collect();
        Ok(crate::selector::SelectionReport {
            scales,
            routing_example,
        })
    }
}

/// Bicubic-upscaled LR as the no-learning baseline output.
pub fn bicubic_baseline(lr: &ImagePlane<Real>, scale: usize) -> Result<ImagePlane<Real>> {
    bicubic_resample(lr, lr.height() * scale, lr.width() * scale)
}

/// Tile batch of the bicubic baseline, matching the refined tile layout.
pub fn bicubic_tiles(lr: &ImagePlane<Real>, grid: usize, scale: usize) -> Result<TileBatch<Real>> {
    let up = bicubic_baseline(lr, scale)?;
    partition_tiles(&up, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{build_dataset, SceneSpec};

    fn tiny_cfg() -> SsrConfig {
        let mut cfg = SsrConfig::desk();
        cfg.selector.embed_dim = 8;
        cfg.selector.head_hidden = 8;
        cfg.selector.heads = 2;
        cfg.refiner.feat_dim = 12;
        cfg.refiner.n_rtb = 1;
        cfg.refiner.heads = 2;
        cfg.refiner.window = 4;
        cfg.train.epochs = 2;
        cfg.train.batch = 2;
        cfg.train.warmup_epochs = 1;
        cfg.train.val_subset = 2;
        cfg.train.lr = 1e-3;
        cfg
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<LoadedRecord> {
        let dir = tempfile::tempdir().unwrap();
        let template = SceneSpec {
            seed,
            canvas: 256,
            n_objects: 2,
            size_range: (20.0, 40.0),
            ..SceneSpec::default()
        };
        let manifest = build_dataset::<Real>(n, &template, 4, dir.path(), "t").unwrap();
        load_dataset(&manifest, &tiny_cfg()).unwrap()
    }

    #[test]
    fn ssr_loss_zero_l1_when_outputs_match() {
        let data = tiny_dataset(1, 900);
        let rec = &data[0];
        let sel = SelectionOutput {
            probs: [
                Array2::from_elem((16, 16), 0.5),
                Array2::from_elem((8, 8), 0.5),
                Array2::from_elem((4, 4), 0.5),
            ],
            hard: [Array2::zeros((16, 16)), Array2::zeros((8, 8)), Array2::zeros((4, 4))],
            routing: Array2::zeros((4, 4)),
        };
        let terms = ssr_loss(&sel, &rec.labels, &rec.hr, &rec.hr, 1.0).unwrap();
        assert_eq!(terms.l_tr, 0.0);
        assert!((terms.l_ssr - terms.l_ts).abs() < 1e-15);
        // alpha = 0 decouples the refinement term
        let terms0 = ssr_loss(&sel, &rec.labels, &rec.lr_as_hr_shape_err_guard(), &rec.hr, 0.0);
        assert!(terms0.is_err());
    }

    #[test]
    fn ssr_loss_matches_hand_computation() {
        use ndarray::Array3;
        let a = ImagePlane::<f64> {
            data: Array3::from_shape_vec((2, 2, 1), vec![0.0, 0.5, 1.0, 0.25]).unwrap(),
        };
        let b = ImagePlane::<f64> {
            data: Array3::from_shape_vec((2, 2, 1), vec![0.5, 0.5, 0.0, 0.75]).unwrap(),
        };
        let sel = SelectionOutput {
            probs: [
                Array2::from_elem((16, 16), 0.5),
                Array2::from_elem((8, 8), 0.5),
                Array2::from_elem((4, 4), 0.5),
            ],
            hard: [Array2::zeros((16, 16)), Array2::zeros((8, 8)), Array2::zeros((4, 4))],
            routing: Array2::zeros((4, 4)),
        };
        let labels = PyramidLabels {
            grids: SCALE_GRIDS,
            levels: [Array2::zeros((16, 16)), Array2::zeros((8, 8)), Array2::zeros((4, 4))],
        };
        let terms = ssr_loss(&sel, &labels, &a, &b, 2.0).unwrap();
        let want_l1 = (0.5 + 0.0 + 1.0 + 0.5) / 4.0;
        assert!((terms.l_tr - want_l1).abs() < 1e-9);
        assert!((terms.l_ssr - (terms.l_ts + 2.0 * want_l1)).abs() < 1e-12);
    }

    #[test]
    fn two_runs_identical_logs() {
        let data = tiny_dataset(4, 901);
        let run = || -> Vec<EpochLog> {
            let mut t = Trainer::new(tiny_cfg()).unwrap();
            t.train(&data, &data, None).unwrap()
        };
        let a = run();
        let b = run();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn single_sample_overfit_reduces_loss() {
        let data = tiny_dataset(1, 902);
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let batch = [&data[0]];
        let before = t.train_step(&batch, 0, 0).unwrap();
        for s in 1..8 {
            t.train_step(&batch, 0, s).unwrap();
        }
        let after = t.train_step(&batch, 0, 8).unwrap();
        assert!(
            after.l_ssr < before.l_ssr,
            "loss should fall: {} -> {}",
            before.l_ssr,
            after.l_ssr
        );
    }

    #[test]
    fn frozen_selector_keeps_logits_fixed() {
        let data = tiny_dataset(2, 903);
        let mut cfg = tiny_cfg();
        cfg.train.freeze_ts = true;
        let mut t = Trainer::new(cfg).unwrap();
        let sel_in = t.stack_lr(&[&data[0]]);
        let (logits_before, _) = t.selector.forward(&t.ps, sel_in.view(), 1);
        let batch = [&data[0], &data[1]];
        for s in 0..3 {
            t.train_step(&batch, 0, s).unwrap();
        }
        let (logits_after, _) = t.selector.forward(&t.ps, sel_in.view(), 1);
        for i in 0..3 {
            assert_eq!(logits_before[i], logits_after[i]);
        }
    }

    #[test]
    fn infer_shapes_and_determinism() {
        let data = tiny_dataset(1, 904);
        let t = Trainer::new(tiny_cfg()).unwrap();
        let (hr1, sel1) = t.infer(&data[0].lr).unwrap();
        let (hr2, sel2) = t.infer(&data[0].lr).unwrap();
        assert_eq!(hr1.height(), 256);
        assert_eq!(hr1.width(), 256);
        assert_eq!(sel1.routing.dim(), (4, 4));
        assert_eq!(hr1.data, hr2.data);
        assert_eq!(sel1.routing, sel2.routing);
        // at zero-init deep convs, routing cannot change the output
        let all_pos = crate::refiner::refine_batch(
            &t.refiner,
            &t.ps,
            &partition_tiles(&data[0].lr, 4).unwrap(),
            &Array2::from_elem((4, 4), 1u8),
            true,
        )
        .unwrap();
        let regrouped = regroup_tiles(&all_pos).unwrap();
        assert_eq!(regrouped.data, hr1.data);
    }

    #[test]
    fn checkpoint_roundtrip_restores_trainer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ssr");
        let data = tiny_dataset(2, 905);
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let batch = [&data[0], &data[1]];
        t.train_step(&batch, 0, 0).unwrap();
        t.epoch = 1;
        t.save(&path).unwrap();
        let t2 = Trainer::from_checkpoint(&path).unwrap();
        assert_eq!(t2.epoch, 1);
        for (name, arr) in t.ps.iter() {
            assert_eq!(t2.ps.get(name), arr, "{name}");
        }
        // wrong feature width must fail naming the entry
        let mut bad_cfg = tiny_cfg();
        bad_cfg.refiner.feat_dim = 16;
        let err = match Trainer::from_checkpoint_with_config(&path, bad_cfg) {
            Err(e) => e,
            Ok(_) => panic!("mismatched feature width must fail"),
        };
        assert!(err.to_string().contains("tr."), "{err}");
    }

    #[test]
    fn alpha_scaling_is_exact_on_components() {
        let data = tiny_dataset(2, 906);
        for alpha in [0.5, 1.0, 3.0] {
            let mut cfg = tiny_cfg();
            cfg.train.alpha = alpha;
            let mut t = Trainer::new(cfg).unwrap();
            let stats = t.train_step(&[&data[0]], 0, 0).unwrap();
            assert_eq!(stats.l_ssr, stats.l_ts + alpha * stats.l_tr);
        }
    }

    #[test]
    fn alpha_zero_keeps_refiner_untouched() {
        let data = tiny_dataset(1, 907);
        let mut cfg = tiny_cfg();
        cfg.train.alpha = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before: Vec<(String, ArrayD<Real>)> = t
            .ps
            .iter()
            .filter(|(n, _)| n.starts_with("tr."))
            .map(|(n, a)| (n.clone(), a.clone()))
            .collect();
        t.train_step(&[&data[0]], 0, 0).unwrap();
        for (name, arr) in before {
            assert_eq!(t.ps.get(&name), &arr, "refiner parameter {name} moved");
        }
    }

    impl LoadedRecord {
        /// Test helper: an HR-shaped error trigger (wrong size on purpose).
        fn lr_as_hr_shape_err_guard(&self) -> ImagePlane<Real> {
            self.lr.clone()
        }
    }
}
