//! Differentiable forward graphs for training. Mirrors the plain forward
//! paths on top of the tape so gradients reach the projector, the position
//! embeddings, and the norms through the injected FFN weights.

use crate::error::{Error, Result};
use crate::memvp::{InjectionMode, MemVpState, PosMode, VisualFeatures};
use crate::numkit::autodiff::{Gradients, MaskKind, NodeId, Tape};
use crate::numkit::{Activation, Matrix};
use crate::transformer::config::{AttnMask, FfnKind, ModelConfig, NORM_EPS};
use crate::transformer::weights::ModelWeights;

/// How visual information reaches the language model during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MemVp,
    InputSpace,
}

/// One training item: a token sequence, the positions whose next-token
/// targets enter the loss, and the visual features (possibly empty).
#[derive(Debug, Clone)]
pub struct TraceItem {
    pub tokens: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
    pub features: VisualFeatures,
}

struct LayerNodes {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    w1: NodeId,
    w2: NodeId,
    w3: Option<NodeId>,
    attn_gain: NodeId,
    attn_bias: NodeId,
    ffn_gain: NodeId,
    ffn_bias: NodeId,
}

struct MemVpNodes {
    proj_w_in: NodeId,
    proj_b_in: NodeId,
    proj_w_out: Option<NodeId>,
    proj_b_out: Option<NodeId>,
    pe_tables: Vec<(NodeId, NodeId)>,
}

/// Parameter leaves in the same canonical order as `param_metas`.
pub struct GraphParams {
    pub ordered: Vec<NodeId>,
    tok_emb: NodeId,
    pos_emb: NodeId,
    layers: Vec<LayerNodes>,
    final_gain: NodeId,
    final_bias: NodeId,
    memvp: MemVpNodes,
}

/// Registers every parameter as a tape leaf, in canonical order.
pub fn register_params(tape: &mut Tape, weights: &ModelWeights, state: &MemVpState) -> GraphParams {
    let mut ordered = Vec::new();
    let mut leaf = |tape: &mut Tape, m: &Matrix| {
        let id = tape.leaf(m.clone());
        ordered.push(id);
        id
    };

    let tok_emb = leaf(tape, &weights.token_embedding);
    let pos_emb = leaf(tape, &weights.pos_embedding);
    let layers = weights
        .layers
        .iter()
        .map(|l| LayerNodes {
            wq: leaf(tape, &l.wq),
            wk: leaf(tape, &l.wk),
            wv: leaf(tape, &l.wv),
            wo: leaf(tape, &l.wo),
            w1: leaf(tape, &l.w1),
            w2: leaf(tape, &l.w2),
            w3: l.w3.as_ref().map(|w3| leaf(tape, w3)),
            attn_gain: leaf(tape, &l.attn_norm.gain),
            attn_bias: leaf(tape, &l.attn_norm.bias),
            ffn_gain: leaf(tape, &l.ffn_norm.gain),
            ffn_bias: leaf(tape, &l.ffn_norm.bias),
        })
        .collect();
    let final_gain = leaf(tape, &weights.final_norm.gain);
    let final_bias = leaf(tape, &weights.final_norm.bias);

    let proj = &state.projector;
    let memvp = MemVpNodes {
        proj_w_in: leaf(tape, &proj.w_in),
        proj_b_in: leaf(tape, &proj.b_in),
        proj_w_out: proj.w_out.as_ref().map(|w| leaf(tape, w)),
        proj_b_out: proj.b_out.as_ref().map(|b| leaf(tape, b)),
        pe_tables: {
            let mut tables = Vec::new();
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            state.pos_embeddings.visit(&mut |name, m| {
                if name.ends_with(".p_k") {
                    ks.push(m.clone());
                } else {
                    vs.push(m.clone());
                }
            });
            for (k, v) in ks.iter().zip(&vs) {
                let kn = leaf(tape, k);
                let vn = leaf(tape, v);
                tables.push((kn, vn));
            }
            tables
        },
    };

    GraphParams {
        ordered,
        tok_emb,
        pos_emb,
        layers,
        final_gain,
        final_bias,
        memvp,
    }
}

fn mask_for(config: &ModelConfig, prefix: usize) -> MaskKind {
    match config.attn_mask {
        AttnMask::Causal if prefix > 0 => MaskKind::PrefixCausal(prefix),
        AttnMask::Causal => MaskKind::Causal,
        AttnMask::Bidirectional => MaskKind::None,
    }
}

fn trace_projector(
    tape: &mut Tape,
    params: &GraphParams,
    state: &MemVpState,
    features: &VisualFeatures,
) -> Result<Option<NodeId>> {
    if features.count() == 0 {
        return Ok(None);
    }
    let z = tape.leaf(features.z.clone());
    let mut h = tape.matmul(z, params.memvp.proj_w_in)?;
    h = tape.add_bias_row(h, params.memvp.proj_b_in)?;
    if let (Some(w_out), Some(b_out)) = (params.memvp.proj_w_out, params.memvp.proj_b_out) {
        let a = tape.activation(h, state.projector.activation);
        h = tape.matmul(a, w_out)?;
        h = tape.add_bias_row(h, b_out)?;
    }
    Ok(Some(h))
}

/// Visual key or value block for one layer: lambda-scaled prompts combined
/// with the position table per the configured mode, padded to m rows.
fn trace_visual_block(
    tape: &mut Tape,
    table: NodeId,
    prompts: Option<NodeId>,
    n: usize,
    state: &MemVpState,
) -> Result<NodeId> {
    let cfg = &state.config;
    let m = cfg.m;
    if n == 0 {
        return Ok(table);
    }
    let scaled = prompts.map(|p| tape.scale(p, cfg.lambda));
    let head = match cfg.pos_mode {
        PosMode::Add => {
            let pos_head = tape.slice_rows(table, 0, n)?;
            match scaled {
                Some(s) => tape.add(s, pos_head)?,
                None => pos_head,
            }
        }
        PosMode::Concat => match scaled {
            Some(s) => s,
            None => {
                let d = tape.value(table).cols();
                tape.leaf(Matrix::zeros(n, d))
            }
        },
    };
    if n == m {
        return Ok(head);
    }
    let tail = tape.slice_rows(table, n, m)?;
    tape.concat_rows(&[head, tail])
}

fn trace_layer_stack(
    tape: &mut Tape,
    params: &GraphParams,
    config: &ModelConfig,
    state: &MemVpState,
    mut x: NodeId,
    mask: MaskKind,
    prompts: Option<NodeId>,
    n_prompts: usize,
    inject: bool,
) -> Result<NodeId> {
    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let seq = tape.value(x).rows();

    for (li, layer) in params.layers.iter().enumerate() {
        // attention sublayer
        let attn_in = tape.layer_norm(x, layer.attn_gain, layer.attn_bias, NORM_EPS)?;
        let q = tape.matmul(attn_in, layer.wq)?;
        let k = tape.matmul(attn_in, layer.wk)?;
        let v = tape.matmul(attn_in, layer.wv)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax(scaled, mask);
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = tape.matmul(ctx, layer.wo)?;
        x = tape.add(x, attn_out)?;

        // ffn sublayer, with visual entries when this layer is injected
        let ffn_in = tape.layer_norm(x, layer.ffn_gain, layer.ffn_bias, NORM_EPS)?;
        let kv = if inject && state.config.inject_layers.contains(li) {
            let (pk, pv) = params.memvp.pe_tables[state.pos_embeddings.table_index(li)];
            let (key_prompts, value_prompts) = match state.config.injection_mode {
                InjectionMode::Both => (prompts, prompts),
                InjectionMode::KeysOnly => (prompts, None),
                InjectionMode::ValuesOnly => (None, prompts),
            };
            let k_vis = trace_visual_block(tape, pk, key_prompts, n_prompts, state)?;
            let v_vis = trace_visual_block(tape, pv, value_prompts, n_prompts, state)?;
            Some((k_vis, v_vis))
        } else {
            None
        };

        let ffn_out = match kv {
            Some((k_vis, v_vis)) => {
                let k_cols = tape.transpose(k_vis);
                let w1_aug = tape.concat_cols(&[layer.w1, k_cols])?;
                let v_scaled = tape.scale(v_vis, state.config.out_scale);
                let w2_aug = tape.concat_rows(&[layer.w2, v_scaled])?;
                let pre = tape.matmul(ffn_in, w1_aug)?;
                let hidden = match config.ffn_kind {
                    FfnKind::Standard => tape.activation(pre, config.activation),
                    FfnKind::Glu => {
                        let gate_base =
                            tape.matmul(ffn_in, layer.w3.expect("glu layer has w3"))?;
                        let ones = tape.leaf(Matrix::filled(seq, state.config.m, 1.0));
                        let gate = tape.concat_cols(&[gate_base, ones])?;
                        let act = tape.activation(pre, Activation::Silu);
                        tape.hadamard(act, gate)?
                    }
                };
                tape.matmul(hidden, w2_aug)?
            }
            None => {
                let pre = tape.matmul(ffn_in, layer.w1)?;
                let hidden = match config.ffn_kind {
                    FfnKind::Standard => tape.activation(pre, config.activation),
                    FfnKind::Glu => {
                        let gate = tape.matmul(ffn_in, layer.w3.expect("glu layer has w3"))?;
                        let act = tape.activation(pre, Activation::Silu);
                        tape.hadamard(act, gate)?
                    }
                };
                tape.matmul(hidden, layer.w2)?
            }
        };
        x = tape.add(x, ffn_out)?;
    }
    tape.layer_norm(x, params.final_gain, params.final_bias, NORM_EPS)
}

/// Nodes of interest from one traced item.
pub struct TraceOutput {
    /// Summed cross-entropy over the item's targets (1x1).
    pub loss_sum: NodeId,
    /// Logits over the full traced sequence (prefix rows included for the
    /// input-space route).
    pub logits: NodeId,
    pub n_targets: usize,
}

/// Builds the summed cross-entropy loss node for one item.
pub fn trace_item_loss(
    tape: &mut Tape,
    params: &GraphParams,
    config: &ModelConfig,
    state: &MemVpState,
    method: Method,
    item: &TraceItem,
) -> Result<TraceOutput> {
    let seq = item.tokens.len();
    if seq == 0 {
        return Err(Error::invalid("empty token sequence"));
    }
    if seq > config.max_len {
        return Err(Error::invalid(format!(
            "sequence length {seq} exceeds max_len {}",
            config.max_len
        )));
    }
    let tok = tape.gather_rows(params.tok_emb, &item.tokens)?;
    let pos = tape.slice_rows(params.pos_emb, 0, seq)?;
    let text = tape.add(tok, pos)?;

    let n = item.features.count();
    let prompts = trace_projector(tape, params, state, &item.features)?;

    let (x0, mask, row_offset) = match method {
        Method::MemVp => (text, mask_for(config, 0), 0usize),
        Method::InputSpace => match prompts {
            Some(p) => {
                if n + seq > config.max_len {
                    return Err(Error::invalid(format!(
                        "prefix {n} + text {seq} exceeds max_len {}",
                        config.max_len
                    )));
                }
                (tape.concat_rows(&[p, text])?, mask_for(config, n), n)
            }
            None => (text, mask_for(config, 0), 0usize),
        },
    };

    let inject = method == Method::MemVp;
    let final_hidden = trace_layer_stack(
        tape,
        params,
        config,
        state,
        x0,
        mask,
        if inject { prompts } else { None },
        if inject { n } else { 0 },
        inject,
    )?;
    let head = tape.transpose(params.tok_emb);
    let logits = tape.matmul(final_hidden, head)?;

    let targets: Vec<(usize, usize)> = item
        .targets
        .iter()
        .map(|&(row, tok)| (row + row_offset, tok))
        .collect();
    if targets.is_empty() {
        return Err(Error::invalid("item has no loss targets"));
    }
    let loss_sum = tape.cross_entropy_sum(logits, &targets)?;
    Ok(TraceOutput { loss_sum, logits, n_targets: targets.len() })
}

/// Result of one differentiable evaluation over a batch.
pub struct BatchGradients {
    /// Mean cross-entropy over all target positions in the batch.
    pub loss: f64,
    /// Parameter gradients in canonical order.
    pub grads: Vec<Matrix>,
    pub n_targets: usize,
}

fn item_gradients(
    weights: &ModelWeights,
    state: &MemVpState,
    config: &ModelConfig,
    method: Method,
    item: &TraceItem,
) -> Result<(f64, Vec<Matrix>, usize)> {
    let mut tape = Tape::new();
    let params = register_params(&mut tape, weights, state);
    let out = trace_item_loss(&mut tape, &params, config, state, method, item)?;
    let grads: Gradients = tape.backward(out.loss_sum)?;
    let loss = tape.value(out.loss_sum).get(0, 0);
    let count = out.n_targets;
    let per_param: Vec<Matrix> = params
        .ordered
        .iter()
        .map(|&id| grads.dense(&tape, id))
        .collect();
    Ok((loss, per_param, count))
}

/// Gradient of the batch-mean loss, accumulated in a fixed sample order.
/// `threads > 1` evaluates items in parallel; the reduction order stays
/// deterministic because per-item results are collected by index first.
pub fn batch_gradients(
    weights: &ModelWeights,
    state: &MemVpState,
    config: &ModelConfig,
    method: Method,
    items: &[TraceItem],
    threads: usize,
) -> Result<BatchGradients> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results: Vec<Result<(f64, Vec<Matrix>, usize)>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            items
                .par_iter()
                .map(|item| item_gradients(weights, state, config, method, item))
                .collect()
        })
    } else {
        items
            .iter()
            .map(|item| item_gradients(weights, state, config, method, item))
            .collect()
    };

    let mut total_loss = 0.0;
    let mut total_targets = 0usize;
    let mut acc: Option<Vec<Matrix>> = None;
    for r in results {
        let (loss, grads, count) = r?;
        total_loss += loss;
        total_targets += count;
        match &mut acc {
            None => acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    *a = a.add(g)?;
                }
            }
        }
    }
    let scale = 1.0 / total_targets as f64;
    let grads = acc
        .expect("non-empty batch")
        .into_iter()
        .map(|g| g.scale(scale))
        .collect();
    Ok(BatchGradients { loss: total_loss * scale, grads, n_targets: total_targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memvp::{MemVpConfig, PositionEmbeddings, Projector, ProjectorKind};
    use crate::trainer::params::param_metas;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(glu: bool) -> (ModelConfig, ModelWeights, MemVpState) {
        let mut config = ModelConfig {
            d_model: 8,
            d_ffn: 12,
            n_layers: 2,
            n_heads: 2,
            vocab: 12,
            max_len: 10,
            activation: Activation::Gelu,
            ffn_kind: FfnKind::Standard,
            attn_mask: AttnMask::Causal,
        };
        if glu {
            config.ffn_kind = FfnKind::Glu;
            config.activation = Activation::Silu;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = ModelWeights::init_random(&config, &mut rng);
        let state = MemVpState {
            projector: Projector::init_random(
                ProjectorKind::OneFc,
                4,
                0,
                8,
                Activation::Gelu, 0.25, &mut rng,
            ),
            pos_embeddings: PositionEmbeddings::init_random(5, 8, 2, false, &mut rng),
            config: MemVpConfig { lambda: 0.5, ..MemVpConfig::desk(5) },
        };
        (config, weights, state)
    }

    fn tiny_item() -> TraceItem {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        TraceItem {
            tokens: vec![1, 4, 7, 0],
            targets: vec![(3, 9)],
            features: VisualFeatures::local(Matrix::random_normal(3, 4, 1.0, &mut rng)),
        }
    }

    #[test]
    fn registered_leaves_align_with_param_metas() {
        let (_, weights, state) = tiny_setup(false);
        let mut tape = Tape::new();
        let params = register_params(&mut tape, &weights, &state);
        let metas = param_metas(&weights, &state);
        assert_eq!(params.ordered.len(), metas.len());
        for (id, meta) in params.ordered.iter().zip(&metas) {
            let v = tape.value(*id);
            assert_eq!((v.rows(), v.cols()), (meta.rows, meta.cols), "{}", meta.name);
        }
    }

    #[test]
    fn graph_logits_match_plain_forward() {
        for glu in [false, true] {
            let (config, weights, state) = tiny_setup(glu);
            let item = tiny_item();
            let model =
                crate::transformer::Model::new(config.clone(), weights.clone()).unwrap();
            let ctx =
                crate::memvp::prepare_injection(&state, &item.features, config.n_layers, None)
                    .unwrap();
            let plain = crate::transformer::lm_forward(
                &model,
                &crate::transformer::TokenSequence::new(item.tokens.clone()),
                Some(&ctx),
            )
            .unwrap();

            let mut tape = Tape::new();
            let params = register_params(&mut tape, &weights, &state);
            let out =
                trace_item_loss(&mut tape, &params, &config, &state, Method::MemVp, &item)
                    .unwrap();
            let logits = tape.value(out.logits);
            // fused augmented matmul vs split probed path: same algebra,
            // different grouping, so compare within tolerance
            for (a, b) in logits.data().iter().zip(plain.data()) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_gradients_deterministic_and_mask_ready() {
        let (config, weights, state) = tiny_setup(false);
        let items = vec![tiny_item(), tiny_item()];
        let a = batch_gradients(&weights, &state, &config, Method::MemVp, &items, 1).unwrap();
        let b = batch_gradients(&weights, &state, &config, Method::MemVp, &items, 1).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (x, y) in a.grads.iter().zip(&b.grads) {
            assert_eq!(x, y);
        }
        assert_eq!(a.n_targets, 2);
    }

    #[test]
    fn input_space_route_offsets_targets() {
        let (config, weights, state) = tiny_setup(false);
        let item = tiny_item();
        let out =
            batch_gradients(&weights, &state, &config, Method::InputSpace, &[item], 1).unwrap();
        assert!(out.loss.is_finite());
    }
}
