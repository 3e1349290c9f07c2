//! Analytic parameter and multiply-accumulate accounting, and the
//! selective-compute savings curve as a function of the positive-tile
//! fraction.
//!
//! MACs count multiplications only; layer norms, softmax, scalar score
//! scaling, and activations are excluded, matching common FLOPs-counter
//! conventions.

use crate::refiner::RefinerNet;
use crate::selector::SelectorNet;
use crate::train::SsrConfig;
use crate::Result;
use serde::Serialize;

/// Shape description of one counted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    /// k×k convolution producing `out_h × out_w` per batch item.
    Conv {
        k: usize,
        cin: usize,
        cout: usize,
        out_h: usize,
        out_w: usize,
        batch: usize,
    },
    /// Dense map applied per token.
    Linear { d_in: usize, d_out: usize, tokens: usize },
    /// Layer norm: parameters only, no counted multiplications.
    Norm { dim: usize, tokens: usize },
    /// Two linear maps with a `ratio`-wide hidden layer.
    Mlp { dim: usize, ratio: usize, tokens: usize },
    /// Q/K/V/output projections plus per-window scores and weighted values.
    WindowAttention { dim: usize, window: usize, tokens: usize },
    /// Queries from `tokens` tokens, keys/values from `kv` class tokens.
    CrossAttention { dim: usize, tokens: usize, kv: usize },
    /// Learnable class tokens: parameters only.
    Tokens { count: usize, dim: usize },
}

/// Parameters and multiply-accumulate count of one layer.
pub fn count_layer(desc: &LayerDesc) -> (u64, u64) {
    match *desc {
        LayerDesc::Conv {
            k,
            cin,
            cout,
            out_h,
            out_w,
            batch,
        } => {
            let params = (k * k * cin * cout + cout) as u64;
            let macs = (k * k * cin * cout) as u64 * (out_h * out_w * batch) as u64;
            (params, macs)
        }
        LayerDesc::Linear { d_in, d_out, tokens } => {
            ((d_in * d_out + d_out) as u64, (tokens * d_in * d_out) as u64)
        }
        LayerDesc::Norm { dim, .. } => ((2 * dim) as u64, 0),
        LayerDesc::Mlp { dim, ratio, tokens } => {
            let hidden = dim * ratio;
            let params = (dim * hidden + hidden + hidden * dim + dim) as u64;
            let macs = 2 * (tokens * dim * hidden) as u64;
            (params, macs)
        }
        LayerDesc::WindowAttention { dim, window, tokens } => {
            let params = 4 * (dim * dim + dim) as u64;
            // projections + QK^T and AV inside each window; both are
            // tokens·window²·dim across heads
            let macs = 4 * (tokens * dim * dim) as u64 + 2 * (tokens * window * window * dim) as u64;
            (params, macs)
        }
        LayerDesc::CrossAttention { dim, tokens, kv } => {
            let params = 4 * (dim * dim + dim) as u64;
            let macs =
                2 * (tokens * dim * dim) as u64 + 2 * (kv * dim * dim) as u64 + 2 * (tokens * kv * dim) as u64;
            (params, macs)
        }
        LayerDesc::Tokens { count, dim } => ((count * dim) as u64, 0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Section {
    Selector,
    Shared,
    Deep,
    Negative,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub name: String,
    pub section: Section,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer accounting and the affine selective-compute model
/// `MACs(f) = fixed + f·deep + (1−f)·ntr`.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub params_total: u64,
    pub ts_params: u64,
    pub tr_params: u64,
    pub ts_macs: u64,
    /// Shallow + reconstruction MACs over all tiles (always paid).
    pub shared_macs: u64,
    /// Deep-stack MACs over all tiles (paid for the selected fraction).
    pub deep_macs: u64,
    /// Negative-path convolution MACs over all tiles (paid for 1−f).
    pub ntr_macs: u64,
    /// Requested operating fraction.
    pub fraction: f64,
    pub macs_at_fraction: f64,
    pub macs_at_zero: f64,
    pub macs_at_062: f64,
    pub macs_at_one: f64,
    /// macs_at_fraction / macs_at_one.
    pub savings_ratio: f64,
    /// macs_at_062 / macs_at_one: the selective-compute headline.
    pub ratio_at_062: f64,
}

impl CostReport {
    /// The affine compute model at positive-tile fraction `f`.
    pub fn macs_at(&self, f: f64) -> f64 {
        self.ts_macs as f64 + self.shared_macs as f64 + f * self.deep_macs as f64 + (1.0 - f) * self.ntr_macs as f64
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(10).max(10);
        out.push_str(&format!("{:<width$} {:>12} {:>16}  section\n", "layer", "params", "MACs"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$} {:>12} {:>16}  {:?}\n",
                r.name, r.params, r.macs, r.section
            ));
        }
        out.push_str(&format!(
            "{:<width$} {:>12} {:>16}\n",
            "total", self.params_total, (self.ts_macs + self.shared_macs + self.deep_macs + self.ntr_macs)
        ));
        out.push_str(&format!(
            "MACs(f): fixed {} + f x deep {} (+ (1-f) x ntr {})\n",
            self.ts_macs + self.shared_macs,
            self.deep_macs,
            self.ntr_macs
        ));
        out.push_str(&format!(
            "MACs(0) = {:.3e}  MACs(0.62) = {:.3e}  MACs(1) = {:.3e}\n",
            self.macs_at_zero, self.macs_at_062, self.macs_at_one
        ));
        out.push_str(&format!(
            "operating point f = {:.3}: MACs = {:.3e}, ratio vs all-positive = {:.4}\n",
            self.fraction, self.macs_at_fraction, self.savings_ratio
        ));
        out.push_str(&format!("ratio at f = 0.62: {:.4}\n", self.ratio_at_062));
        out
    }
}

/// Full cost report for a pipeline configuration at positive-tile fraction
/// `f`, counted for a single image at the configured LR input size.
pub fn ssr_cost(cfg: &SsrConfig, fraction: f64) -> Result<CostReport> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(crate::Error::config(format!(
            "fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let selector = SelectorNet::new(&cfg.selector, cfg.lr_edge(), 3)?;
    let refiner = RefinerNet::new(&cfg.refiner, cfg.tile_edge(), 3)?;
    let n_tiles = cfg.grid * cfg.grid;

    let mut rows = Vec::new();
    let mut ts_params = 0u64;
    let mut ts_macs = 0u64;
    for (name, desc) in selector.describe(1) {
        let (p, m) = count_layer(&desc);
        ts_params += p;
        ts_macs += m;
        rows.push(CostRow {
            name,
            section: Section::Selector,
            params: p,
            macs: m,
        });
    }
    let layers = refiner.describe(n_tiles);
    let mut tr_params = 0u64;
    let mut shared_macs = 0u64;
    for (name, desc) in layers.shared {
        let (p, m) = count_layer(&desc);
        tr_params += p;
        shared_macs += m;
        rows.push(CostRow {
            name,
            section: Section::Shared,
            params: p,
            macs: m,
        });
    }
    let mut deep_macs = 0u64;
    for (name, desc) in layers.deep {
        let (p, m) = count_layer(&desc);
        tr_params += p;
        deep_macs += m;
        rows.push(CostRow {
            name,
            section: Section::Deep,
            params: p,
            macs: m,
        });
    }
    let mut ntr_macs = 0u64;
    for (name, desc) in layers.ntr {
        let (p, m) = count_layer(&desc);
        tr_params += p;
        ntr_macs += m;
        rows.push(CostRow {
            name,
            section: Section::Negative,
            params: p,
            macs: m,
        });
    }

    let mut report = CostReport {
        rows,
        params_total: ts_params + tr_params,
        ts_params,
        tr_params,
        ts_macs,
        shared_macs,
        deep_macs,
        ntr_macs,
        fraction,
        macs_at_fraction: 0.0,
        macs_at_zero: 0.0,
        macs_at_062: 0.0,
        macs_at_one: 0.0,
        savings_ratio: 0.0,
        ratio_at_062: 0.0,
    };
    report.macs_at_fraction = report.macs_at(fraction);
    report.macs_at_zero = report.macs_at(0.0);
    report.macs_at_062 = report.macs_at(0.62);
    report.macs_at_one = report.macs_at(1.0);
    report.savings_ratio = report.macs_at_fraction / report.macs_at_one;
    report.ratio_at_062 = report.macs_at_062 / report.macs_at_one;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_formula_arithmetic() {
        // 3x3 conv, 3 -> 180 channels on 64x64
        let (_, macs) = count_layer(&LayerDesc::Conv {
            k: 3,
            cin: 3,
            cout: 180,
            out_h: 64,
            out_w: 64,
            batch: 1,
        });
        assert_eq!(macs, 19_906_560);
    }

    #[test]
    fn linear_formula_arithmetic() {
        // 96 -> 192 over one token
        let (params, macs) = count_layer(&LayerDesc::Linear {
            d_in: 96,
            d_out: 192,
            tokens: 1,
        });
        assert_eq!(macs, 18_432);
        assert_eq!(params, 18_624);
    }

    #[test]
    fn toy_net_hand_summed_total() {
        // conv 3x3 1->4 on 8x8, then linear 4->2 over 64 tokens
        let rows = [
            LayerDesc::Conv {
                k: 3,
                cin: 1,
                cout: 4,
                out_h: 8,
                out_w: 8,
                batch: 1,
            },
            LayerDesc::Linear {
                d_in: 4,
                d_out: 2,
                tokens: 64,
            },
        ];
        let (p, m) = rows
            .iter()
            .map(count_layer)
            .fold((0u64, 0u64), |(ap, am), (p, m)| (ap + p, am + m));
        // hand-summed: conv params 9*1*4+4 = 40, macs 9*1*4*64 = 2304
        //              linear params 4*2+2 = 10, macs 64*4*2 = 512
        assert_eq!(p, 40 + 10);
        assert_eq!(m, 2304 + 512);
    }

    #[test]
    fn cost_params_match_parameter_store() {
        for cfg in [SsrConfig::desk(), SsrConfig::default()] {
            let report = ssr_cost(&cfg, 0.5).unwrap();
            let selector = SelectorNet::new(&cfg.selector, cfg.lr_edge(), 3).unwrap();
            let refiner = RefinerNet::new(&cfg.refiner, cfg.tile_edge(), 3).unwrap();
            let mut ps = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            selector.init(&mut ps, &mut rng);
            refiner.init(&mut ps, &mut rng);
            assert_eq!(
                report.params_total,
                ps.total_len() as u64,
                "described parameters must match the real parameter store"
            );
        }
    }

    #[test]
    fn macs_curve_is_affine_with_positive_slope() {
        let report = ssr_cost(&SsrConfig::desk(), 0.62).unwrap();
        assert!(report.macs_at_zero < report.macs_at_one);
        // affine: midpoint of endpoints equals macs_at(0.5)
        let mid = 0.5 * (report.macs_at_zero + report.macs_at_one);
        assert!((report.macs_at(0.5) - mid).abs() < 1e-6);
        // endpoints
        assert!((report.macs_at(0.0) - (report.ts_macs + report.shared_macs) as f64).abs() < 1e-9);
        assert!(report.savings_ratio <= 1.0);
    }

    #[test]
    fn fraction_one_has_no_savings() {
        let report = ssr_cost(&SsrConfig::desk(), 1.0).unwrap();
        assert!((report.savings_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fraction_zero_drops_deep_stack() {
        let report = ssr_cost(&SsrConfig::desk(), 0.0).unwrap();
        assert_eq!(report.macs_at_fraction, (report.ts_macs + report.shared_macs) as f64);
    }

    #[test]
    fn rejects_out_of_range_fraction() {
        assert!(ssr_cost(&SsrConfig::desk(), 1.5).is_err());
        assert!(ssr_cost(&SsrConfig::desk(), -0.1).is_err());
    }

    #[test]
    fn ptr_ntr_per_tile_ratio_exceeds_five_at_default_config() {
        // deep stack dominates the per-tile cost at the full-size settings
        let cfg = SsrConfig::default();
        let refiner = RefinerNet::new(&cfg.refiner, cfg.tile_edge(), 3).unwrap();
        let layers = refiner.describe(1);
        let sum = |rows: &[(String, LayerDesc)]| -> u64 { rows.iter().map(|(_, d)| count_layer(d).1).sum() };
        let shared = sum(&layers.shared);
        let deep = sum(&layers.deep);
        let ratio = (shared + deep) as f64 / shared as f64;
        assert!(ratio > 5.0, "PTR/NTR per-tile MAC ratio {ratio}");
    }

    #[test]
    fn table_mentions_operating_points() {
        let report = ssr_cost(&SsrConfig::desk(), 0.62).unwrap();
        let table = report.to_table();
        assert!(table.contains("0.62"));
        assert!(table.contains("tr.rtb0.l0.attn"));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("macs_at_062"));
    }
}
