//! Analytic per-layer FLOPs formulas and an instrumented counter over
//! actual forwards, plus the sweep harness that compares them.
//!
//! Conventions (required to reproduce the analytic constants): 1 MAC =
//! 2 FLOPs; softmax, normalization, activations, biases, and embedding
//! lookups are excluded. The analytic FFN term presumes D = 4d; reports
//! flag configurations where that does not hold, and expose counted
//! numbers alongside rather than reconciling.

use serde::{Deserialize, Serialize};

use crate::count::{Component, MacCounter};
use crate::error::{Error, Result};
use crate::memvp::{InjectionCtx, MemVpConfig, VisualKv};
use crate::numkit::f32kernels::matmul_f32;
use crate::numkit::{Activation, MaskKind, Matrix};
use crate::transformer::config::{AttnMask, FfnKind, ModelConfig};
use crate::transformer::model::hidden_stack;
use crate::transformer::weights::ModelWeights;
use crate::transformer::Model;

/// FLOPs of one plain transformer layer: 4Ld(6d + L),
/// i.e. attention 8Ld^2 + 4L^2 d plus FFN 16Ld^2 under D = 4d.
pub fn flops_lm(l: u64, d: u64) -> u64 {
    4 * l * d * (6 * d + l)
}

/// Extra FLOPs per layer for input-space prompting: 4nd(6d + n + 2L).
/// Identically equals flops_lm(L + n, d) - flops_lm(L, d).
pub fn flops_vp_delta(l: u64, n: u64, d: u64) -> u64 {
    4 * n * d * (6 * d + n + 2 * l)
}

/// Extra FLOPs per layer for memory-space prompting: 4ndL.
pub fn flops_memvp_delta(l: u64, n: u64, d: u64) -> u64 {
    4 * n * d * l
}

/// Numeric precision for counted forward runs. The tallies are identical;
/// the flag only selects the arithmetic used to drive them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// Text length L.
    pub l: usize,
    /// Visual prompt length n (m = n entries for the memory-space run).
    pub n: usize,
    /// Token dimension d.
    pub d: usize,
    /// FFN hidden dimension D.
    pub d_ffn: usize,
    pub n_layers: usize,
    pub ffn_kind: FfnKind,
    #[serde(default)]
    pub precision: Precision,
}

impl CostConfig {
    pub fn analytic_assumptions_hold(&self) -> bool {
        self.d_ffn == 4 * self.d && self.ffn_kind == FfnKind::Standard
    }
}

/// Counted MACs for the three configurations, layer components only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountedMacs {
    pub lm: MacCounter,
    pub vp: MacCounter,
    pub memvp: MacCounter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    /// Analytic totals over all layers (2x MAC convention applied).
    pub flops_lm_total: u64,
    pub flops_vp_total: u64,
    pub flops_memvp_total: u64,
    /// Counted layer MACs over all layers.
    pub macs_lm: u64,
    pub macs_vp: u64,
    pub macs_memvp: u64,
    pub ratio_vp: f64,
    pub ratio_memvp: f64,
    /// False when D != 4d or the FFN is gated: the analytic FFN constant
    /// does not describe such layers; counted numbers remain exact.
    pub analytic_valid: bool,
}

/// Runs the three counted configurations for one cost point.
pub fn counted_macs(cfg: &CostConfig) -> Result<CountedMacs> {
    match cfg.precision {
        Precision::F64 => counted_macs_f64(cfg),
        Precision::F32 => counted_macs_f32(cfg),
    }
}

fn probe_model(cfg: &CostConfig, max_len: usize) -> Result<Model> {
    let model_cfg = ModelConfig {
        d_model: cfg.d,
        d_ffn: cfg.d_ffn,
        n_layers: cfg.n_layers,
        n_heads: 1,
        vocab: 2,
        max_len: max_len.max(1),
        activation: match cfg.ffn_kind {
            FfnKind::Standard => Activation::Relu,
            FfnKind::Glu => Activation::Silu,
        },
        ffn_kind: cfg.ffn_kind,
        attn_mask: AttnMask::Causal,
    };
    model_cfg.validate()?;
    let weights = zero_weights(&model_cfg);
    Model::new(model_cfg, weights)
}

fn zero_weights(cfg: &ModelConfig) -> ModelWeights {
    use crate::transformer::weights::{LayerWeights, NormParams};
    let d = cfg.d_model;
    let dff = cfg.d_ffn;
    ModelWeights {
        token_embedding: Matrix::zeros(cfg.vocab, d),
        pos_embedding: Matrix::zeros(cfg.max_len, d),
        layers: (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                w1: Matrix::zeros(d, dff),
                w2: Matrix::zeros(dff, d),
                w3: matches!(cfg.ffn_kind, FfnKind::Glu).then(|| Matrix::zeros(d, dff)),
                attn_norm: NormParams::unit(d),
                ffn_norm: NormParams::unit(d),
            })
            .collect(),
        final_norm: NormParams::unit(d),
    }
}

fn counted_macs_f64(cfg: &CostConfig) -> Result<CountedMacs> {
    let model = probe_model(cfg, cfg.l + cfg.n)?;

    let mut lm = MacCounter::new();
    hidden_stack(
        &model,
        Matrix::zeros(cfg.l, cfg.d),
        MaskKind::Causal,
        None,
        Some(&mut lm),
        None,
    )?;

    let mut vp = MacCounter::new();
    // the projection itself is tagged separately; layer totals cover the
    // longer sequence the prefix induces
    vp.record(Component::Projector, cfg.n, cfg.d, cfg.d);
    hidden_stack(
        &model,
        Matrix::zeros(cfg.l + cfg.n, cfg.d),
        MaskKind::PrefixCausal(cfg.n),
        None,
        Some(&mut vp),
        None,
    )?;

    let mut memvp = MacCounter::new();
    memvp.record(Component::Projector, cfg.n, cfg.d, cfg.d);
    let injection = (cfg.n > 0).then(|| InjectionCtx {
        per_layer: (0..cfg.n_layers)
            .map(|_| {
                Some(VisualKv {
                    k_vis: Matrix::zeros(cfg.n, cfg.d),
                    v_vis: Matrix::zeros(cfg.n, cfg.d),
                })
            })
            .collect(),
        config: MemVpConfig::desk(cfg.n),
    });
    hidden_stack(
        &model,
        Matrix::zeros(cfg.l, cfg.d),
        MaskKind::Causal,
        injection.as_ref(),
        Some(&mut memvp),
        None,
    )?;

    Ok(CountedMacs { lm, vp, memvp })
}

/// Single-precision counted runs: the same product shapes executed with
/// f32 kernels on zero buffers. Tallies must match the f64 path exactly.
fn counted_macs_f32(cfg: &CostConfig) -> Result<CountedMacs> {
    let mut lm = MacCounter::new();
    f32_layer_stack(cfg, cfg.l, 0, &mut lm);
    let mut vp = MacCounter::new();
    vp.record(Component::Projector, cfg.n, cfg.d, cfg.d);
    f32_layer_stack(cfg, cfg.l + cfg.n, 0, &mut vp);
    let mut memvp = MacCounter::new();
    memvp.record(Component::Projector, cfg.n, cfg.d, cfg.d);
    f32_layer_stack(cfg, cfg.l, cfg.n, &mut memvp);
    Ok(CountedMacs { lm, vp, memvp })
}

fn f32_layer_stack(cfg: &CostConfig, seq: usize, m: usize, ctr: &mut MacCounter) {
    let d = cfg.d;
    let dff = cfg.d_ffn;
    let mut mm = |comp: Component, r: usize, k: usize, c: usize| {
        let a = vec![0.0f32; r * k];
        let b = vec![0.0f32; k * c];
        let mut out = vec![0.0f32; r * c];
        matmul_f32(&a, &b, &mut out, r, k, c);
        ctr.record(comp, r, k, c);
    };
    for _ in 0..cfg.n_layers {
        // attention: q, k, v, o projections plus scores and context
        for _ in 0..3 {
            mm(Component::Mhsa, seq, d, d);
        }
        mm(Component::Mhsa, seq, d, seq);
        mm(Component::Mhsa, seq, seq, d);
        mm(Component::Mhsa, seq, d, d);
        // ffn over augmented width when visual entries are present
        mm(Component::Ffn, seq, d, dff);
        if m > 0 {
            mm(Component::Injection, seq, d, m);
        }
        if cfg.ffn_kind == FfnKind::Glu {
            mm(Component::Ffn, seq, d, dff);
        }
        mm(Component::Ffn, seq, dff, d);
        if m > 0 {
            mm(Component::Injection, seq, m, d);
        }
    }
}

/// Full report at one cost point: analytic totals, counted totals, ratios.
pub fn cost_report(cfg: &CostConfig) -> Result<CostReport> {
    let counted = counted_macs(cfg)?;
    let layers = cfg.n_layers as u64;
    let (l, n, d) = (cfg.l as u64, cfg.n as u64, cfg.d as u64);
    let flops_lm_total = layers * flops_lm(l, d);
    let flops_vp_total = layers * (flops_lm(l, d) + flops_vp_delta(l, n, d));
    let flops_memvp_total = layers * (flops_lm(l, d) + flops_memvp_delta(l, n, d));
    let ratio = |num: u64| {
        if flops_lm_total == 0 {
            0.0
        } else {
            num as f64 / flops_lm_total as f64
        }
    };
    Ok(CostReport {
        config: cfg.clone(),
        flops_lm_total,
        flops_vp_total,
        flops_memvp_total,
        macs_lm: counted.lm.layer_total(),
        macs_vp: counted.vp.layer_total(),
        macs_memvp: counted.memvp.layer_total(),
        ratio_vp: ratio(flops_vp_total),
        ratio_memvp: ratio(flops_memvp_total),
        analytic_valid: cfg.analytic_assumptions_hold(),
    })
}

pub const SWEEP_CSV_HEADER: &str =
    "L,n,d,D,layers,flops_lm,flops_vp,flops_memvp,macs_lm,macs_vp,macs_memvp,ratio_vp,ratio_memvp";

/// One CSV row per config: analytic totals, counted totals, and ratios
/// (ratios with 4 decimals).
pub fn sweep_report(grid: &[CostConfig]) -> Result<String> {
    if grid.is_empty() {
        return Err(Error::invalid("empty cost grid"));
    }
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for cfg in grid {
        let r = cost_report(cfg)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.4},{:.4}\n",
            cfg.l,
            cfg.n,
            cfg.d,
            cfg.d_ffn,
            cfg.n_layers,
            r.flops_lm_total,
            r.flops_vp_total,
            r.flops_memvp_total,
            r.macs_lm,
            r.macs_vp,
            r.macs_memvp,
            r.ratio_vp,
            r.ratio_memvp
        ));
    }
    Ok(out)
}
