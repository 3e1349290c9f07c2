//! Tile selection: a patch-embedding ladder of Swin-style stages produces
//! token grids at three scales; per-scale cross-attention classifiers with
//! Gumbel-Softmax hard outputs decide which tiles carry objects.

use crate::nn::attention::CrossAttnCache;
use crate::nn::ops::{gelu, gelu_backward, softmax_rows, Conv2d, Linear};
use crate::nn::patches::PatchMergeCache;
use crate::nn::transformer::TransformerLayerCache;
use crate::nn::{
    gumbel_noise, gumbel_softmax, CrossAttention, Dims, Grads, ParamStore, PatchMerge, TransformerLayer,
};
use crate::tiling::PyramidLabels;
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Model size variant, an alias for the embedding patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectorVariant {
    Base,
    Small,
    Tiny,
}

impl SelectorVariant {
    pub fn patch(self) -> usize {
        match self {
            SelectorVariant::Base => 2,
            SelectorVariant::Small => 4,
            SelectorVariant::Tiny => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// Patch size of the embedding layer.
    pub patch: usize,
    /// Embedding dimension entering the stage ladder.
    pub embed_dim: usize,
    /// Transformer layers per stage.
    pub depth: usize,
    /// Preferred attention window; each stage uses the largest divisor of
    /// its token grid not exceeding this.
    pub window: usize,
    pub heads: usize,
    /// Hidden width of each per-scale classifier MLP.
    pub head_hidden: usize,
    /// Learnable class tokens per scale (two: negative/positive).
    pub class_tokens: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            patch: 2,
            embed_dim: 96,
            depth: 2,
            window: 7,
            heads: 3,
            head_hidden: 96,
            class_tokens: 2,
            tau: 1.0,
        }
    }
}

impl SelectorConfig {
    /// Laptop-scale configuration for 64-pixel LR inputs.
    pub fn desk() -> Self {
        SelectorConfig {
            embed_dim: 48,
            window: 4,
            head_hidden: 48,
            ..SelectorConfig::default()
        }
    }

    pub fn with_variant(mut self, v: SelectorVariant) -> Self {
        self.patch = v.patch();
        self
    }
}

struct Stage {
    merge: PatchMerge,
    layers: Vec<TransformerLayer>,
    dim_out: usize,
}

struct ClassifierHead {
    tokens_name: String,
    ca: CrossAttention,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

/// The three classifier grids, finest first: (4g, 2g, g) for routing grid g.
pub const SCALE_GRIDS: [usize; 3] = [16, 8, 4];

/// The TS network bound to a fixed LR input edge.
pub struct SelectorNet {
    pub cfg: SelectorConfig,
    pub edge: usize,
    pub in_channels: usize,
    embed: Conv2d,
    stages: Vec<Stage>,
    heads: Vec<ClassifierHead>,
}

impl SelectorNet {
    pub fn new(cfg: &SelectorConfig, edge: usize, in_channels: usize) -> Result<Self> {
        if edge % cfg.patch != 0 {
            return Err(Error::config(format!(
                "input edge {edge} not divisible by patch {}",
                cfg.patch
            )));
        }
        let e0 = edge / cfg.patch;
        let routing = SCALE_GRIDS[2];
        if e0 < 2 * routing || e0 % routing != 0 || !(e0 / routing).is_power_of_two() {
            return Err(Error::config(format!(
                "token grid {e0} cannot reach the {routing}x{routing} routing grid by halving"
            )));
        }
        let n_stages = (e0 / routing).trailing_zeros() as usize;
        if n_stages < 3 {
            return Err(Error::config(format!(
                "need at least 3 merge stages for the pyramid, got {n_stages}"
            )));
        }
        let embed = Conv2d::strided("ts.embed", cfg.patch, in_channels, cfg.embed_dim, cfg.patch, 0);
        let mut stages = Vec::with_capacity(n_stages);
        let mut dim = cfg.embed_dim;
        let mut grid = e0;
        for s in 0..n_stages {
            let dim_out = dim * 2;
            grid /= 2;
            // largest window that tiles the stage grid; a configured 7 on
            // power-of-two grids degrades to 4 instead of requiring padding
            let window = (1..=cfg.window.min(grid)).rev().find(|w| grid % w == 0).unwrap_or(1);
            let layers = (0..cfg.depth)
                .map(|l| {
                    let shift = if l % 2 == 0 { 0 } else { window / 2 };
                    TransformerLayer::new(format!("ts.s{s}.l{l}"), dim_out, cfg.heads, window, shift)
                })
                .collect();
            stages.push(Stage {
                merge: PatchMerge::new(format!("ts.s{s}.merge"), dim),
                layers,
                dim_out,
            });
            dim = dim_out;
        }
        let mut heads = Vec::with_capacity(3);
        for (i, stage_idx) in (n_stages - 3..n_stages).enumerate() {
            let d = stages[stage_idx].dim_out;
            heads.push(ClassifierHead {
                tokens_name: format!("ts.head{i}.tokens"),
                ca: CrossAttention::new(format!("ts.head{i}.ca"), d, cfg.heads),
                fc1: Linear::new(format!("ts.head{i}.fc1"), d, cfg.head_hidden),
                fc2: Linear::new(format!("ts.head{i}.fc2"), cfg.head_hidden, 2),
                dim: d,
            });
        }
        Ok(SelectorNet {
            cfg: cfg.clone(),
            edge,
            in_channels,
            embed,
            stages,
            heads,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut impl RngCore) {
        self.embed.init(ps, crate::nn::ops::INIT_SIGMA, rng);
        for stage in &self.stages {
            stage.merge.init(ps, rng);
            for layer in &stage.layers {
                layer.init(ps, rng);
            }
        }
        for head in &self.heads {
            ps.insert(
                head.tokens_name.clone(),
                crate::nn::params::trunc_normal(&[self.cfg.class_tokens, head.dim], 0.02, rng),
            );
            head.ca.init(ps, rng);
            head.fc1.init(ps, rng);
            head.fc2.init(ps, rng);
        }
    }

    /// Walk every parameterized layer; feeds the cost model.
    pub fn describe(&self, batch: usize) -> Vec<(String, crate::cost::LayerDesc)> {
        use crate::cost::LayerDesc;
        let mut rows = Vec::new();
        let e0 = self.edge / self.cfg.patch;
        rows.push((
            "ts.embed".to_string(),
            LayerDesc::Conv {
                k: self.cfg.patch,
                cin: self.in_channels,
                cout: self.cfg.embed_dim,
                out_h: e0,
                out_w: e0,
                batch,
            },
        ));
        let mut grid = e0;
        let mut dim = self.cfg.embed_dim;
        for (s, stage) in self.stages.iter().enumerate() {
            grid /= 2;
            rows.push((
                format!("ts.s{s}.merge"),
                LayerDesc::Linear {
                    d_in: 4 * dim,
                    d_out: 2 * dim,
                    tokens: batch * grid * grid,
                },
            ));
            dim = stage.dim_out;
            for (l, layer) in stage.layers.iter().enumerate() {
                let tokens = batch * grid * grid;
                rows.push((format!("ts.s{s}.l{l}.ln1"), LayerDesc::Norm { dim, tokens }));
                rows.push((
                    format!("ts.s{s}.l{l}.attn"),
                    LayerDesc::WindowAttention {
                        dim,
                        window: layer.attn.window,
                        tokens,
                    },
                ));
                rows.push((format!("ts.s{s}.l{l}.ln2"), LayerDesc::Norm { dim, tokens }));
                rows.push((format!("ts.s{s}.l{l}.mlp"), LayerDesc::Mlp { dim, ratio: 4, tokens }));
            }
        }
        for (i, head) in self.heads.iter().enumerate() {
            let g = SCALE_GRIDS[i];
            let tokens = batch * g * g;
            rows.push((
                format!("ts.head{i}.ca"),
                LayerDesc::CrossAttention {
                    dim: head.dim,
                    tokens,
                    kv: self.cfg.class_tokens,
                },
            ));
            rows.push((
                format!("ts.head{i}.fc1"),
                LayerDesc::Linear {
                    d_in: head.dim,
                    d_out: self.cfg.head_hidden,
                    tokens,
                },
            ));
            rows.push((
                format!("ts.head{i}.fc2"),
                LayerDesc::Linear {
                    d_in: self.cfg.head_hidden,
                    d_out: 2,
                    tokens,
                },
            ));
            rows.push((
                format!("ts.head{i}.tokens"),
                LayerDesc::Tokens {
                    count: self.cfg.class_tokens,
                    dim: head.dim,
                },
            ));
        }
        rows
    }

    /// Three-scale pyramid encoding of a batch of LR images packed as a
    /// (B·H·W) × C matrix. Returns per-scale token matrices, finest first.
    pub fn encode_pyramid<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        images: ArrayView2<T>,
        batch: usize,
    ) -> ([Array2<T>; 3], EncodeCache<T>) {
        let dims = Dims::new(batch, self.edge, self.edge);
        let (mut x, mut d) = self.embed.forward(ps, images, dims);
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let mut scale_outputs: Vec<Array2<T>> = Vec::with_capacity(3);
        let n_stages = self.stages.len();
        for (s, stage) in self.stages.iter().enumerate() {
            let (merged, merge_cache) = stage.merge.forward(ps, x.view(), d);
            let pre_merge_dims = d;
            d = stage.merge.out_dims(d);
            let mut cur = merged;
            let mut layer_caches = Vec::with_capacity(stage.layers.len());
            for layer in &stage.layers {
                let (next, cache) = layer.forward(ps, cur.view(), d);
                layer_caches.push(cache);
                cur = next;
            }
            if s >= n_stages - 3 {
                scale_outputs.push(cur.clone());
            }
            stage_caches.push(StageCache {
                merge_cache,
                layer_caches,
                pre_merge_dims,
                dims: d,
            });
            x = cur;
        }
        let r: [Array2<T>; 3] = scale_outputs.try_into().expect("three ladder outputs");
        (r, EncodeCache { batch, stage_caches })
    }

    /// Per-scale two-logit classification of every token.
    pub fn classify<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        r: &[Array2<T>; 3],
    ) -> ([Array2<T>; 3], Vec<HeadCache<T>>) {
        let mut logits = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for (i, head) in self.heads.iter().enumerate() {
            let tokens = ps.mat(&head.tokens_name);
            let (a, ca_cache) = head.ca.forward(ps, r[i].view(), tokens);
            let pre = head.fc1.forward(ps, a.view());
            let act = gelu(&pre);
            let lg = head.fc2.forward(ps, act.view());
            logits.push(lg);
            caches.push(HeadCache {
                attended: a,
                ca_cache,
                pre,
                act,
            });
        }
        (logits.try_into().expect("three heads"), caches)
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        images: ArrayView2<T>,
        batch: usize,
    ) -> ([Array2<T>; 3], SelectorCache<T>) {
        let (r, encode) = self.encode_pyramid(ps, images, batch);
        let (logits, head_caches) = self.classify(ps, &r);
        (
            logits,
            SelectorCache {
                encode,
                r,
                head_caches,
            },
        )
    }

    /// Backward pass; `images` must be the forward input.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        images: ArrayView2<T>,
        cache: &SelectorCache<T>,
        dlogits: &[Array2<T>; 3],
        grads: &mut Grads<T>,
    ) {
        let mut dr: Vec<Array2<T>> = cache.r.iter().map(|r| Array2::zeros(r.raw_dim())).collect();
        for (i, head) in self.heads.iter().enumerate() {
            let hc = &cache.head_caches[i];
            let dact = head.fc2.backward(ps, hc.act.view(), dlogits[i].view(), grads);
            let dpre = gelu_backward(&hc.pre, &dact);
            let da = head.fc1.backward(ps, hc.attended.view(), dpre.view(), grads);
            let tokens = ps.mat(&head.tokens_name);
            let (dri, dtok) = head
                .ca
                .backward(ps, cache.r[i].view(), tokens, &hc.ca_cache, da.view(), grads);
            dr[i] += &dri;
            grads.add(&head.tokens_name, dtok.into_dyn());
        }
        let n_stages = self.stages.len();
        let mut dnext: Option<Array2<T>> = None;
        for (s, stage) in self.stages.iter().enumerate().rev() {
            let sc = &cache.encode.stage_caches[s];
            let mut d = match dnext.take() {
                Some(d) => d,
                None => Array2::zeros((sc.dims.rows(), stage.dim_out)),
            };
            if s >= n_stages - 3 {
                d += &dr[s - (n_stages - 3)];
            }
            for (l, layer) in stage.layers.iter().enumerate().rev() {
                d = layer.backward(ps, &sc.layer_caches[l], d.view(), grads);
            }
            let dx = stage
                .merge
                .backward(ps, sc.pre_merge_dims, &sc.merge_cache, d.view(), grads);
            dnext = Some(dx);
        }
        let d0 = dnext.expect("at least one stage");
        let dims = Dims::new(cache.encode.batch, self.edge, self.edge);
        let _ = self.embed.backward(ps, images, dims, d0.view(), grads);
    }
}

struct StageCache<T: Scalar> {
    merge_cache: PatchMergeCache<T>,
    layer_caches: Vec<TransformerLayerCache<T>>,
    pre_merge_dims: Dims,
    dims: Dims,
}

pub struct EncodeCache<T: Scalar> {
    batch: usize,
    stage_caches: Vec<StageCache<T>>,
}

pub struct HeadCache<T: Scalar> {
    attended: Array2<T>,
    ca_cache: CrossAttnCache<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

pub struct SelectorCache<T: Scalar> {
    pub encode: EncodeCache<T>,
    pub r: [Array2<T>; 3],
    pub head_caches: Vec<HeadCache<T>>,
}

// ---------------------------------------------------------------------------
// Selection outputs, loss, consolidation, metrics
// ---------------------------------------------------------------------------

/// Per-image soft probabilities and hard decisions at the three scales.
#[derive(Debug, Clone)]
pub struct SelectionOutput {
    /// Positive-class probability grids, finest first.
    pub probs: [Array2<f64>; 3],
    /// Hard decisions per cell (1 = positive), finest first.
    pub hard: [Array2<u8>; 3],
    /// Routing grid at the coarsest scale.
    pub routing: Array2<u8>,
}

/// Positive-class probabilities from two-class logits.
pub fn positive_probs<T: Scalar>(logits: ArrayView2<T>) -> Array1<T> {
    let sm = softmax_rows(logits);
    sm.column(1).to_owned()
}

/// Assemble per-image selection outputs from batched logits. With an RNG the
/// hard decisions are Gumbel samples; without one they are logit argmax
/// (inference mode).
pub fn selection_outputs<T: Scalar>(
    logits: &[Array2<T>; 3],
    batch: usize,
    tau: f64,
    mut noise_rng: Option<&mut dyn RngCore>,
    use_max_consolidation: bool,
) -> Result<Vec<SelectionOutput>> {
    let mut hard_all: Vec<Array2<u8>> = Vec::with_capacity(3);
    let mut probs_all: Vec<Array1<f64>> = Vec::with_capacity(3);
    for lg in logits.iter() {
        let noise = noise_rng
            .as_deref_mut()
            .map(|mut rng| gumbel_noise::<T>(lg.dim(), &mut rng));
        let (_, hard, _) = gumbel_softmax(lg.view(), tau, noise.as_ref().map(|n| n.view()))?;
        hard_all.push(hard.mapv(|v| (v == T::one()) as u8));
        probs_all.push(positive_probs(lg.view()).mapv(|v| v.as_f64()));
    }
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(3);
        let mut hard: Vec<Array2<u8>> = Vec::with_capacity(3);
        for (i, &g) in SCALE_GRIDS.iter().enumerate() {
            let cells = g * g;
            probs.push(Array2::from_shape_fn((g, g), |(y, x)| {
                probs_all[i][b * cells + y * g + x]
            }));
            hard.push(Array2::from_shape_fn((g, g), |(y, x)| {
                hard_all[i][[b * cells + y * g + x, 1]]
            }));
        }
        let hard: [Array2<u8>; 3] = hard.try_into().expect("three scales");
        let routing = if use_max_consolidation {
            consolidate_max(&hard[0], &hard[1], &hard[2])
        } else {
            hard[2].clone()
        };
        out.push(SelectionOutput {
            probs: probs.try_into().expect("three scales"),
            hard,
            routing,
        });
    }
    Ok(out)
}

/// Routing grid that is positive if the prediction at any scale underneath
/// a cell is positive.
pub fn consolidate_max(h1: &Array2<u8>, h2: &Array2<u8>, h3: &Array2<u8>) -> Array2<u8> {
    let g = h3.shape()[0];
    assert_eq!(h2.shape()[0], 2 * g, "h2 must be twice the routing grid");
    assert_eq!(h1.shape()[0], 4 * g, "h1 must be four times the routing grid");
    Array2::from_shape_fn((g, g), |(y, x)| {
        let mut v = h3[[y, x]];
        for dy in 0..2 {
            for dx in 0..2 {
                v = v.max(h2[[2 * y + dy, 2 * x + dx]]);
            }
        }
        for dy in 0..4 {
            for dx in 0..4 {
                v = v.max(h1[[4 * y + dy, 4 * x + dx]]);
            }
        }
        v
    })
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Sum over scales of the mean per-cell binary cross-entropy, probabilities
/// clamped to [1e-7, 1 − 1e-7].
pub fn selection_loss(probs: &[ArrayView1<f64>; 3], labels: &[ArrayView1<u8>; 3]) -> f64 {
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels.iter()) {
        assert_eq!(p.len(), y.len(), "probability/label grids misaligned");
        let mut acc = 0.0;
        for (&pi, &yi) in p.iter().zip(y.iter()) {
            let s = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc -= if yi == 1 { s.ln() } else { (1.0 - s).ln() };
        }
        total += acc / p.len() as f64;
    }
    total
}

/// Gradient of [`selection_loss`] w.r.t. the two-class logits, fused through
/// the softmax: d logit_pos = (p − y)/n, d logit_neg = −(p − y)/n.
pub fn selection_loss_grad<T: Scalar>(
    logits: &Array2<T>,
    labels: ArrayView1<u8>,
    extra_scale: f64,
) -> Array2<T> {
    let n = logits.shape()[0];
    let p = positive_probs(logits.view());
    let scale = T::of(extra_scale / n as f64);
    let mut d = Array2::zeros((n, 2));
    for i in 0..n {
        let diff = (p[i] - T::of(labels[i] as f64)) * scale;
        d[[i, 1]] = diff;
        d[[i, 0]] = -diff;
    }
    d
}

/// Flatten pyramid labels for a batch into per-scale cell vectors aligned
/// with batched logits.
pub fn flatten_labels(labels: &[&PyramidLabels]) -> [Array1<u8>; 3] {
    let mut out: Vec<Array1<u8>> = Vec::with_capacity(3);
    for i in 0..3 {
        let g = SCALE_GRIDS[i];
        let mut v = Vec::with_capacity(labels.len() * g * g);
        for l in labels {
            assert_eq!(l.grids[i], g, "label grids must match classifier grids");
            v.extend(l.levels[i].iter().copied());
        }
        out.push(Array1::from_vec(v));
    }
    out.try_into().expect("three scales")
}

/// Selection quality at one scale.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SelectionMetrics {
    pub tpr: f64,
    pub maxf: f64,
    pub fraction_selected: f64,
    /// False when the evaluation set has no positive labels and the TPR of
    /// 1.0 is reported by convention.
    pub tpr_defined: bool,
}

/// TPR on hard decisions, max F1 over 101 evenly spaced probability
/// thresholds, and the fraction of cells selected.
pub fn selection_metrics(
    probs: ArrayView1<f64>,
    hard: ArrayView1<u8>,
    labels: ArrayView1<u8>,
) -> SelectionMetrics {
    assert_eq!(probs.len(), labels.len());
    assert_eq!(hard.len(), labels.len());
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let tp = hard
        .iter()
        .zip(labels.iter())
        .filter(|(&h, &y)| h == 1 && y == 1)
        .count();
    let (tpr, tpr_defined) = if positives == 0 {
        (1.0, false)
    } else {
        (tp as f64 / positives as f64, true)
    };
    let fraction_selected = hard.iter().filter(|&&h| h == 1).count() as f64 / hard.len().max(1) as f64;

    let mut maxf = 0.0f64;
    for k in 0..=100 {
        let thr = k as f64 / 100.0;
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for (&p, &y) in probs.iter().zip(labels.iter()) {
            match (p >= thr, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        if denom > 0 {
            maxf = maxf.max(2.0 * tp as f64 / denom as f64);
        }
    }
    SelectionMetrics {
        tpr,
        maxf,
        fraction_selected,
        tpr_defined,
    }
}

/// Selection report written next to evaluation outputs: per-scale quality
/// plus the routing grid of the first evaluated image.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub scales: Vec<ScaleReport>,
    pub routing_example: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleReport {
    pub grid: usize,
    pub tpr: f64,
    pub maxf: f64,
    pub fraction_selected: f64,
    pub tpr_defined: bool,
}
