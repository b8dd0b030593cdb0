//! Forward passes through FFN blocks carrying injected visual memory.
//!
//! Three routes compute the same quantity:
//!  * `memvp_ffn_forward` — the production matrix path over the augmented
//!    weight matrices (one fused product per FC layer);
//!  * `memvp_ffn_sum` — the explicit two-sum form (base retrieval plus
//!    visual retrieval), kept as the oracle;
//!  * `memvp_ffn_probed` — base and visual terms split apart so per-entry
//!    responses can be recorded and selectively clamped to zero.
//!
//! For GLU blocks the visual entries have no gate key: the gate is the
//! constant 1, never a materialized x/|x|^2 column (those are
//! token-dependent and exist here only as a debug path).

use std::collections::HashSet;

use crate::count::{record, Component, MacCounter};
use crate::error::{Error, Result};
use crate::numkit::{activation, Activation, Matrix};
use crate::transformer::config::FfnKind;
use crate::transformer::ffn::{ffn_forward, ffn_kv_form};
use crate::transformer::weights::LayerWeights;

use super::kv::{inject_weight_pair, MemVpConfig, VisualKv};

/// Production path: FFN over the augmented matrices of `inject_standard`
/// (or their GLU counterpart with a constant visual gate).
pub fn memvp_ffn_forward(
    w: &LayerWeights,
    kv: &VisualKv,
    cfg: &MemVpConfig,
    act: Activation,
    kind: FfnKind,
    x: &Matrix,
    mut macs: Option<&mut MacCounter>,
) -> Result<Matrix> {
    let (seq, d) = (x.rows(), x.cols());
    let dff = w.w1.cols();
    let m = kv.entries();
    let (w1_aug, w2_aug) = inject_weight_pair(&w.w1, &w.w2, kv, cfg)?;
    let pre = x.matmul(&w1_aug)?;
    record(&mut macs, Component::Ffn, seq, d, dff);
    record(&mut macs, Component::Injection, seq, d, m);
    let hidden = match kind {
        FfnKind::Standard => activation(act, &pre)?,
        FfnKind::Glu => {
            if act != Activation::Silu {
                return Err(Error::invalid("glu ffn requires silu activation"));
            }
            let w3 = w
                .w3
                .as_ref()
                .ok_or_else(|| Error::shape("glu layer missing w3"))?;
            let gate_base = x.matmul(w3)?;
            record(&mut macs, Component::Ffn, seq, d, dff);
            // visual entries gate with the constant 1
            let gate = Matrix::concat_cols(&[&gate_base, &Matrix::filled(seq, m, 1.0)])?;
            activation(Activation::Silu, &pre)?.hadamard(&gate)?
        }
    };
    let out = hidden.matmul(&w2_aug)?;
    record(&mut macs, Component::Ffn, seq, dff, d);
    record(&mut macs, Component::Injection, seq, m, d);
    Ok(out)
}

/// Oracle path: base key-value sum plus the visual retrieval sum, with the
/// retrieval term multiplied by `out_scale`.
pub fn memvp_ffn_sum(
    w: &LayerWeights,
    kv: &VisualKv,
    cfg: &MemVpConfig,
    act: Activation,
    kind: FfnKind,
    x: &Matrix,
) -> Result<Matrix> {
    let base = ffn_kv_form(w, act, kind, x)?;
    let mut retrieval = Matrix::zeros(x.rows(), x.cols());
    let response_act = visual_response_activation(act, kind);
    for t in 0..x.rows() {
        let xt = x.row(t);
        for i in 0..kv.entries() {
            let mut dot = 0.0;
            for k in 0..x.cols() {
                dot += xt[k] * kv.k_vis.get(i, k);
            }
            let strength = response_act.apply_scalar(dot);
            for (o, &v) in retrieval.row_mut(t).iter_mut().zip(kv.v_vis.row(i)) {
                *o += strength * v;
            }
        }
    }
    base.add(&retrieval.scale(cfg.out_scale))
}

/// Cells (token position, entry index) whose post-activation response is
/// forced to zero during a probed forward.
#[derive(Debug, Clone, Default)]
pub struct ResponseClamp {
    cells: HashSet<(usize, usize)>,
}

impl ResponseClamp {
    pub fn new(cells: impl IntoIterator<Item = (usize, usize)>) -> Self {
        ResponseClamp { cells: cells.into_iter().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, pos: usize, entry: usize) -> bool {
        self.cells.contains(&(pos, entry))
    }
}

/// Observer threaded through probed forwards: records the post-activation
/// response map phi(<x_t, K_vis_i>) of every injected layer (after any
/// clamping), in model layer order.
#[derive(Debug, Default)]
pub struct VisualProbe {
    pub clamp: Option<ResponseClamp>,
    pub maps: Vec<Matrix>,
}

impl VisualProbe {
    pub fn recorder() -> Self {
        VisualProbe::default()
    }

    pub fn clamping(clamp: ResponseClamp) -> Self {
        VisualProbe { clamp: Some(clamp), maps: Vec::new() }
    }
}

/// Split path: computes the base FFN and the visual retrieval separately so
/// responses can be observed and clamped. Numerically equivalent to the
/// fused path (same algebra, different grouping), and used by all probes.
pub fn memvp_ffn_probed(
    w: &LayerWeights,
    kv: &VisualKv,
    cfg: &MemVpConfig,
    act: Activation,
    kind: FfnKind,
    x: &Matrix,
    mut macs: Option<&mut MacCounter>,
    probe: Option<&mut VisualProbe>,
) -> Result<Matrix> {
    let base = ffn_forward(w, act, kind, x, macs.as_deref_mut())?;
    let (seq, d) = (x.rows(), x.cols());
    let m = kv.entries();

    let mut responses = x.matmul(&kv.k_vis.transpose())?;
    record(&mut macs, Component::Injection, seq, d, m);
    let response_act = visual_response_activation(act, kind);
    for v in responses.data_mut() {
        *v = response_act.apply_scalar(*v);
    }
    if let Some(p) = probe {
        if let Some(clamp) = &p.clamp {
            if !clamp.is_empty() {
                for t in 0..seq {
                    for i in 0..m {
                        if clamp.contains(t, i) {
                            responses.set(t, i, 0.0);
                        }
                    }
                }
            }
        }
        p.maps.push(responses.clone());
    }
    let retrieval = responses.matmul(&kv.v_vis)?;
    record(&mut macs, Component::Injection, seq, m, d);
    base.add(&retrieval.scale(cfg.out_scale))
}

/// Debug path for the GLU identity: materializes the token-dependent gate
/// columns x/|x|_2^2 and runs the explicit three-matrix retrieval. Rejects
/// zero-norm tokens (division by zero); the production constant-gate path
/// has no such hazard.
pub fn memvp_glu_explicit_gate(
    w: &LayerWeights,
    kv: &VisualKv,
    cfg: &MemVpConfig,
    x: &Matrix,
) -> Result<Matrix> {
    let base = ffn_kv_form(w, Activation::Silu, FfnKind::Glu, x)?;
    let mut retrieval = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let xt = x.row(t);
        let norm_sq: f64 = xt.iter().map(|&v| v * v).sum();
        if norm_sq == 0.0 {
            return Err(Error::invalid(format!(
                "explicit-gate path: token {t} has zero norm, gate x/|x|^2 undefined"
            )));
        }
        for i in 0..kv.entries() {
            let mut key_dot = 0.0;
            for k in 0..x.cols() {
                key_dot += xt[k] * kv.k_vis.get(i, k);
            }
            // gate key = x/|x|^2, so <x, gate> = 1 up to rounding
            let gate_dot: f64 = xt.iter().map(|&v| v * (v / norm_sq)).sum();
            let strength = Activation::Silu.apply_scalar(key_dot) * gate_dot;
            for (o, &v) in retrieval.row_mut(t).iter_mut().zip(kv.v_vis.row(i)) {
                *o += strength * v;
            }
        }
    }
    base.add(&retrieval.scale(cfg.out_scale))
}

/// Activation applied to visual-entry responses. GLU blocks look up the
/// visual knowledge with SiLU alone (the second key is omitted).
pub fn visual_response_activation(act: Activation, kind: FfnKind) -> Activation {
    match kind {
        FfnKind::Standard => act,
        FfnKind::Glu => Activation::Silu,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memvp::kv::{build_visual_kv, PosPair};
    use crate::numkit::rel_frobenius;
    use crate::transformer::ffn::ffn_only_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_with(m: usize, lambda: f64, out_scale: f64) -> MemVpConfig {
        MemVpConfig { lambda, out_scale, ..MemVpConfig::desk(m) }
    }

    fn random_setup(
        rng: &mut ChaCha8Rng,
        glu: bool,
        d: usize,
        dff: usize,
        m: usize,
        seq: usize,
    ) -> (LayerWeights, VisualKv, Matrix) {
        let w = ffn_only_layer(
            Matrix::random_normal(d, dff, 1.0, rng),
            Matrix::random_normal(dff, d, 1.0, rng),
            glu.then(|| Matrix::random_normal(d, dff, 1.0, rng)),
        );
        let kv = VisualKv {
            k_vis: Matrix::random_normal(m, d, 1.0, rng),
            v_vis: Matrix::random_normal(m, d, 1.0, rng),
        };
        let x = Matrix::random_normal(seq, d, 1.0, rng);
        (w, kv, x)
    }

    #[test]
    fn standard_injection_hand_example() {
        // base: key (1,0), value (0,1); visual entry K=(1,1), V=(2,1);
        // x=(2,3), relu: base (0,2) + 5*(2,1) = (10,7)
        let w = ffn_only_layer(
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            None,
        );
        let kv = VisualKv {
            k_vis: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            v_vis: Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap(),
        };
        let cfg = cfg_with(1, 1.0, 1.0);
        let x = Matrix::row_vec(&[2.0, 3.0]).unwrap();
        for out in [
            memvp_ffn_forward(&w, &kv, &cfg, Activation::Relu, FfnKind::Standard, &x, None)
                .unwrap(),
            memvp_ffn_sum(&w, &kv, &cfg, Activation::Relu, FfnKind::Standard, &x).unwrap(),
            memvp_ffn_probed(&w, &kv, &cfg, Activation::Relu, FfnKind::Standard, &x, None, None)
                .unwrap(),
        ] {
            assert!((out.get(0, 0) - 10.0).abs() < 1e-12);
            assert!((out.get(0, 1) - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_path_matches_sum_path_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..100 {
            let glu = case % 2 == 1;
            let (w, kv, x) = random_setup(&mut rng, glu, 4, 8, 3, 3);
            let cfg = cfg_with(3, 0.7, 1.3);
            let (act, kind) = if glu {
                (Activation::Silu, FfnKind::Glu)
            } else {
                (Activation::Gelu, FfnKind::Standard)
            };
            let fused = memvp_ffn_forward(&w, &kv, &cfg, act, kind, &x, None).unwrap();
            let sum = memvp_ffn_sum(&w, &kv, &cfg, act, kind, &x).unwrap();
            let probed = memvp_ffn_probed(&w, &kv, &cfg, act, kind, &x, None, None).unwrap();
            assert!(rel_frobenius(&fused, &sum) <= 1e-12);
            assert!(rel_frobenius(&probed, &sum) <= 1e-12);
        }
    }

    #[test]
    fn zero_lambda_zero_positions_is_bit_identical_to_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for act in [Activation::Relu, Activation::Gelu, Activation::Silu] {
            let glu = act == Activation::Silu;
            let (w, _, x) = random_setup(&mut rng, glu, 4, 8, 3, 2);
            let cfg = cfg_with(3, 0.0, 1.0);
            let prompts = Matrix::random_normal(3, 4, 1.0, &mut rng);
            let pe = PosPair { p_k: Matrix::zeros(3, 4), p_v: Matrix::zeros(3, 4) };
            let kv = build_visual_kv(&prompts, &pe, &cfg).unwrap();
            let kind = if glu { FfnKind::Glu } else { FfnKind::Standard };
            let base = ffn_forward(&w, act, kind, &x, None).unwrap();
            let injected = memvp_ffn_forward(&w, &kv, &cfg, act, kind, &x, None).unwrap();
            for (a, b) in injected.data().iter().zip(base.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_out_scale_recovers_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (w, kv, x) = random_setup(&mut rng, false, 4, 8, 3, 2);
        let cfg = cfg_with(3, 1.0, 0.0);
        let base = ffn_forward(&w, Activation::Gelu, FfnKind::Standard, &x, None).unwrap();
        let injected =
            memvp_ffn_sum(&w, &kv, &cfg, Activation::Gelu, FfnKind::Standard, &x).unwrap();
        assert!(rel_frobenius(&injected, &base) <= 1e-15);
    }

    #[test]
    fn glu_injection_hand_example() {
        // base GLU: key (1,0), gate (0,1), value (1,1), x (1,2)
        //   -> SiLU(1) * 2 * (1,1)
        // visual entry K=(0,1), V=(1,0), lambda=1, p=0
        //   -> SiLU(2) * (1,0)
        let w = ffn_only_layer(
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Some(Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap()),
        );
        let cfg = cfg_with(1, 1.0, 1.0);
        let prompts = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let pe = PosPair { p_k: Matrix::zeros(1, 2), p_v: Matrix::zeros(1, 2) };
        let mut kv = build_visual_kv(&prompts, &pe, &cfg).unwrap();
        kv.v_vis = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let x = Matrix::row_vec(&[1.0, 2.0]).unwrap();
        let out = memvp_ffn_forward(&w, &kv, &cfg, Activation::Silu, FfnKind::Glu, &x, None)
            .unwrap();
        let base = Activation::Silu.apply_scalar(1.0) * 2.0;
        let visual = Activation::Silu.apply_scalar(2.0);
        assert!((out.get(0, 0) - (base + visual)).abs() < 1e-12);
        assert!((out.get(0, 1) - base).abs() < 1e-12);
        // spec-level sanity on the constants themselves
        assert!((base + visual - 3.2237113132157747).abs() < 1e-12);
    }

    #[test]
    fn unit_gate_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x = Matrix::random_normal(1, 6, 1.0, &mut rng);
            let norm_sq: f64 = x.data().iter().map(|v| v * v).sum();
            let dot: f64 = x.data().iter().map(|&v| v * (v / norm_sq)).sum();
            assert!((dot - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_gate_matches_explicit_gate_on_nonzero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let (w, kv, x) = random_setup(&mut rng, true, 4, 8, 3, 3);
            let cfg = cfg_with(3, 0.5, 1.0);
            let constant =
                memvp_ffn_forward(&w, &kv, &cfg, Activation::Silu, FfnKind::Glu, &x, None)
                    .unwrap();
            let explicit = memvp_glu_explicit_gate(&w, &kv, &cfg, &x).unwrap();
            assert!(rel_frobenius(&constant, &explicit) <= 1e-10);
        }
    }

    #[test]
    fn explicit_gate_rejects_zero_norm_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (w, kv, _) = random_setup(&mut rng, true, 4, 8, 3, 1);
        let cfg = cfg_with(3, 1.0, 1.0);
        let x = Matrix::zeros(2, 4);
        let err = memvp_glu_explicit_gate(&w, &kv, &cfg, &x).unwrap_err();
        assert!(err.to_string().contains("zero norm"));
    }

    #[test]
    fn injected_layer_adds_exactly_two_ldm_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (d, dff, m, seq) = (8, 32, 5, 7);
        let (w, kv, x) = random_setup(&mut rng, false, d, dff, m, seq);
        let cfg = cfg_with(m, 0.01, 1.0);
        let mut plain = MacCounter::new();
        ffn_forward(&w, Activation::Relu, FfnKind::Standard, &x, Some(&mut plain)).unwrap();
        let mut injected = MacCounter::new();
        memvp_ffn_forward(
            &w,
            &kv,
            &cfg,
            Activation::Relu,
            FfnKind::Standard,
            &x,
            Some(&mut injected),
        )
        .unwrap();
        assert_eq!(
            injected.layer_total() - plain.layer_total(),
            2 * (seq * m * d) as u64
        );
        assert_eq!(injected.get(Component::Injection), 2 * (seq * m * d) as u64);
    }

    #[test]
    fn probe_records_responses_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (w, kv, x) = random_setup(&mut rng, false, 4, 8, 3, 2);
        let cfg = cfg_with(3, 1.0, 1.0);
        let mut probe = VisualProbe::recorder();
        let unclamped = memvp_ffn_probed(
            &w,
            &kv,
            &cfg,
            Activation::Relu,
            FfnKind::Standard,
            &x,
            None,
            Some(&mut probe),
        )
        .unwrap();
        assert_eq!(probe.maps.len(), 1);
        assert_eq!((probe.maps[0].rows(), probe.maps[0].cols()), (2, 3));

        // clamping every cell removes the whole visual contribution
        let all_cells = (0..2).flat_map(|t| (0..3).map(move |i| (t, i)));
        let mut clamped_probe = VisualProbe::clamping(ResponseClamp::new(all_cells));
        let clamped = memvp_ffn_probed(
            &w,
            &kv,
            &cfg,
            Activation::Relu,
            FfnKind::Standard,
            &x,
            None,
            Some(&mut clamped_probe),
        )
        .unwrap();
        let base = ffn_forward(&w, Activation::Relu, FfnKind::Standard, &x, None).unwrap();
        for (a, b) in clamped.data().iter().zip(base.data()) {
            assert!((a - b).abs() == 0.0);
        }
        assert!(clamped_probe.maps[0].data().iter().all(|&v| v == 0.0));
        assert!(unclamped.data() != clamped.data());
    }
}
