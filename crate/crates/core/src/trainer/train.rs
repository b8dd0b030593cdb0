//! Parameter-efficient fine-tuning at desk scale: the backbone stays
//! frozen, only the projector, position embeddings, and norms move.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memvp::{
    prepare_injection, MemVpConfig, MemVpState, PositionEmbeddings, Projector, ProjectorKind,
    TrainableMask, VisualFeatures,
};
use crate::numkit::{Activation, Matrix, Tape};
use crate::trainer::checkpoint::{Checkpoint, ModelBundle, CHECKPOINT_VERSION};
use crate::trainer::dataset::{Dataset, QType, Sample};
use crate::trainer::graph::{
    batch_gradients, register_params, trace_item_loss, Method, TraceItem,
};
use crate::trainer::optimizer::AdamW;
use crate::trainer::params::{
    assign_params, collect_params, param_metas, trainable_flags, ParamMeta,
};
use crate::transformer::config::{ModelConfig, TokenSequence};
use crate::transformer::model::argmax_lowest_tie;
use crate::transformer::weights::ModelWeights;
use crate::transformer::Model;

/// What the model sees of each scene: the per-slot features, a single
/// mean-pooled vector, or nothing at all (position embeddings only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualMode {
    Local,
    Global,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub trainable: TrainableMask,
    pub method: Method,
    pub visual: VisualMode,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-2,
            batch_size: 32,
            epochs: 20,
            seed,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            trainable: TrainableMask::default(),
            method: Method::MemVp,
            visual: VisualMode::Local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive and finite"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Construction recipe for the visual-prompting state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemVpSetup {
    pub config: MemVpConfig,
    pub projector: ProjectorKind,
    /// Hidden width of the two-FC projector (ignored for one_fc).
    pub projector_hidden: usize,
    pub projector_activation: Activation,
    /// Initialization scale for projector weights. The lambda factor on
    /// prompts is small by default, so the projector starts large enough
    /// that lambda * f(z) matches the position-embedding magnitude.
    pub projector_init_std: f64,
    pub shared_pos_embeddings: bool,
    /// Feature dimension d' the projector expects.
    pub feature_dim: usize,
}

impl MemVpSetup {
    /// Desk default: single FC projector, per-layer position embeddings,
    /// m = n + 16 entries.
    ///
    /// The prompt scale is 1.0 rather than the 0.01 config default: the
    /// adaptive optimizer moves lambda * f(z) by lambda * lr per step, so a
    /// tiny lambda starves the visual pathway when the backbone starts
    /// random instead of pretrained.
    pub fn desk() -> Self {
        MemVpSetup {
            config: MemVpConfig { lambda: 1.0, ..MemVpConfig::desk(24) },
            projector: ProjectorKind::OneFc,
            projector_hidden: 32,
            projector_activation: Activation::Gelu,
            projector_init_std: 0.25,
            shared_pos_embeddings: false,
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub memvp: MemVpSetup,
    pub train: TrainConfig,
}

impl TrainJob {
    pub fn desk(seed: u64) -> Self {
        TrainJob {
            model: ModelConfig::desk(),
            memvp: MemVpSetup::desk(),
            train: TrainConfig::desk(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.memvp.config.validate(self.model.n_layers)?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Deterministic run initialization from (job, seed): backbone weights,
/// visual-prompting state, optimizer, and the training RNG.
pub fn init_run(job: &TrainJob) -> Result<(Model, MemVpState, AdamW, ChaCha8Rng)> {
    job.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(job.train.seed);
    let weights = ModelWeights::init_random(&job.model, &mut rng);
    let projector = Projector::init_random(
        job.memvp.projector,
        job.memvp.feature_dim,
        job.memvp.projector_hidden,
        job.model.d_model,
        job.memvp.projector_activation, 0.25, &mut rng,
    );
    let pos_embeddings = PositionEmbeddings::init_random(
        job.memvp.config.m,
        job.model.d_model,
        job.model.n_layers,
        job.memvp.shared_pos_embeddings,
        &mut rng,
    );
    let state = MemVpState { projector, pos_embeddings, config: job.memvp.config.clone() };
    let model = Model::new(job.model.clone(), weights)?;
    let metas = param_metas(&model.weights, &state);
    let shapes: Vec<(usize, usize)> = metas.iter().map(|m| (m.rows, m.cols)).collect();
    let opt = AdamW::new(
        job.train.lr,
        job.train.beta1,
        job.train.beta2,
        job.train.eps,
        job.train.weight_decay,
        &shapes,
    );
    Ok((model, state, opt, rng))
}

pub fn visual_for_mode(sample: &Sample, mode: VisualMode) -> Result<VisualFeatures> {
    let local = sample.visual()?;
    match mode {
        VisualMode::Local => Ok(local),
        VisualMode::Global => local.to_global(),
        VisualMode::None => Ok(VisualFeatures::local(Matrix::from_vec(
            0,
            local.z.cols(),
            vec![],
        )?)),
    }
}

pub fn to_trace_item(sample: &Sample, mode: VisualMode) -> Result<TraceItem> {
    let last = sample.question.len() - 1;
    Ok(TraceItem {
        tokens: sample.question.clone(),
        targets: vec![(last, sample.answer)],
        features: visual_for_mode(sample, mode)?,
    })
}

/// Mean cross-entropy of a batch under the current parameters (no update).
pub fn loss(
    model: &Model,
    state: &MemVpState,
    method: Method,
    mode: VisualMode,
    batch: &[Sample],
) -> Result<f64> {
    let items = batch
        .iter()
        .map(|s| to_trace_item(s, mode))
        .collect::<Result<Vec<_>>>()?;
    let bg = batch_gradients(&model.weights, state, &model.config, method, &items, 1)?;
    Ok(bg.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_type: BTreeMap<String, (usize, usize)>,
}

fn qtype_name(q: QType) -> &'static str {
    match q {
        QType::ColorAt => "color_at",
        QType::ShapeAt => "shape_at",
        QType::Exists => "exists",
    }
}

/// Single-token answer prediction at the answer-marker position.
pub fn predict_answer(
    model: &Model,
    state: &MemVpState,
    method: Method,
    mode: VisualMode,
    sample: &Sample,
) -> Result<usize> {
    let features = visual_for_mode(sample, mode)?;
    let tokens = TokenSequence::new(sample.question.clone());
    let logits = match method {
        Method::MemVp => {
            let ctx = prepare_injection(state, &features, model.config.n_layers, None)?;
            crate::transformer::lm_forward(model, &tokens, Some(&ctx))?
        }
        Method::InputSpace => crate::baselines::input_space_forward(
            model,
            &state.projector,
            &features,
            &tokens,
            None,
        )?,
    };
    Ok(argmax_lowest_tie(logits.row(logits.rows() - 1)))
}

/// Greedy exact-match accuracy with a per-question-type breakdown.
pub fn evaluate(
    model: &Model,
    state: &MemVpState,
    method: Method,
    mode: VisualMode,
    samples: &[Sample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut correct = 0;
    let mut per_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for sample in samples {
        let predicted = predict_answer(model, state, method, mode, sample)?;
        let entry = per_type.entry(qtype_name(sample.meta.qtype).into()).or_insert((0, 0));
        entry.1 += 1;
        if predicted == sample.answer {
            entry.0 += 1;
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        per_type,
    })
}

/// Full training run from scratch.
pub fn train(job: &TrainJob, data: &Dataset, threads: usize) -> Result<TrainOutcome> {
    let (model, state, opt, rng) = init_run(job)?;
    run_epochs(RunState {
        model,
        state,
        opt,
        rng,
        job: job.clone(),
        epochs_done: 0,
        best_val_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        best_snapshot: None,
        data,
        threads,
    })
}

/// Continue a checkpointed run up to `total_epochs`. The stored RNG state,
/// optimizer moments, and epoch counter make the continuation bit-identical
/// to an uninterrupted run with the same total.
pub fn resume(
    ckpt: Checkpoint,
    data: &Dataset,
    total_epochs: usize,
    threads: usize,
) -> Result<TrainOutcome> {
    if total_epochs < ckpt.epochs_done {
        return Err(Error::config(format!(
            "cannot resume to {total_epochs} epochs: checkpoint already ran {}",
            ckpt.epochs_done
        )));
    }
    let mut train_config = ckpt.train_config.clone();
    train_config.epochs = total_epochs;
    let job = TrainJob {
        model: ckpt.model.config.clone(),
        memvp: ckpt.setup.clone(),
        train: train_config,
    };
    job.validate()?;
    let model = Model::new(ckpt.model.config, ckpt.model.weights)?;
    run_epochs(RunState {
        model,
        state: ckpt.memvp,
        opt: ckpt.optimizer,
        rng: ckpt.rng,
        job,
        epochs_done: ckpt.epochs_done,
        best_val_acc: ckpt.best_val_acc,
        best_epoch: ckpt.best_epoch,
        best_snapshot: None,
        data,
        threads,
    })
}

struct RunState<'a> {
    model: Model,
    state: MemVpState,
    opt: AdamW,
    rng: ChaCha8Rng,
    job: TrainJob,
    epochs_done: usize,
    best_val_acc: f64,
    best_epoch: usize,
    best_snapshot: Option<Checkpoint>,
    data: &'a Dataset,
    threads: usize,
}

fn make_checkpoint(run: &RunState) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        model: ModelBundle {
            config: run.model.config.clone(),
            weights: run.model.weights.clone(),
            rng_seed: run.job.train.seed,
        },
        memvp: run.state.clone(),
        setup: run.job.memvp.clone(),
        train_config: run.job.train.clone(),
        optimizer: run.opt.clone(),
        epochs_done: run.epochs_done,
        rng: run.rng.clone(),
        best_val_acc: run.best_val_acc,
        best_epoch: run.best_epoch,
    }
}

fn run_epochs(mut run: RunState) -> Result<TrainOutcome> {
    if run.data.train.is_empty() || run.data.val.is_empty() {
        return Err(Error::invalid("training requires non-empty train and val splits"));
    }
    let metas: Vec<ParamMeta> = param_metas(&run.model.weights, &run.state);
    let flags = trainable_flags(&metas, &run.job.train.trainable);
    let cfg = run.job.train.clone();
    let mut metrics = Vec::new();

    for epoch in run.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..run.data.train.len()).collect();
        order.shuffle(&mut run.rng);
        let mut weighted_loss = 0.0;
        let mut total_targets = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let items = chunk
                .iter()
                .map(|&i| to_trace_item(&run.data.train[i], cfg.visual))
                .collect::<Result<Vec<_>>>()?;
            let bg = batch_gradients(
                &run.model.weights,
                &run.state,
                &run.model.config,
                cfg.method,
                &items,
                run.threads,
            )?;
            run.opt
                .step(&mut run.model.weights, &mut run.state, &bg.grads, &flags)?;
            weighted_loss += bg.loss * bg.n_targets as f64;
            total_targets += bg.n_targets;
        }
        run.epochs_done = epoch + 1;
        let train_loss = weighted_loss / total_targets as f64;
        let val = evaluate(&run.model, &run.state, cfg.method, cfg.visual, &run.data.val)?;
        metrics.push(EpochMetrics {
            epoch: run.epochs_done,
            train_loss,
            val_accuracy: val.accuracy,
        });
        if val.accuracy > run.best_val_acc {
            run.best_val_acc = val.accuracy;
            run.best_epoch = run.epochs_done;
            run.best_snapshot = Some(make_checkpoint(&run));
        }
    }

    let last = make_checkpoint(&run);
    let best = run.best_snapshot.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { last, best, metrics })
}

/// Central-difference validation of the analytic gradients on one item:
/// perturbs `n_coords` randomly chosen trainable coordinates and returns
/// the maximum relative error |analytic - fd| / max(1, |fd|).
pub fn finite_diff_check(
    model: &Model,
    state: &MemVpState,
    method: Method,
    item: &TraceItem,
    mask: &TrainableMask,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    let metas = param_metas(&model.weights, state);
    let flags = trainable_flags(&metas, mask);
    let trainable_idx: Vec<usize> = flags
        .iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(i, _)| i)
        .collect();
    if trainable_idx.is_empty() {
        return Err(Error::invalid("no trainable parameters under this mask"));
    }

    let analytic = batch_gradients(
        &model.weights,
        state,
        &model.config,
        method,
        std::slice::from_ref(item),
        1,
    )?;

    let base_params = collect_params(&model.weights, state);
    let loss_at = |params: &[Matrix]| -> Result<f64> {
        let mut weights = model.weights.clone();
        let mut st = state.clone();
        assign_params(&mut weights, &mut st, params);
        let mut tape = Tape::new();
        let graph = register_params(&mut tape, &weights, &st);
        let out = trace_item_loss(&mut tape, &graph, &model.config, &st, method, item)?;
        Ok(tape.value(out.loss_sum).get(0, 0) / out.n_targets as f64)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let pi = trainable_idx[rng.gen_range(0..trainable_idx.len())];
        let rows = metas[pi].rows;
        let cols = metas[pi].cols;
        let (i, j) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let theta = base_params[pi].get(i, j);
        let h = 1e-6 * theta.abs().max(1.0);

        let mut plus = base_params.clone();
        plus[pi].set(i, j, theta + h);
        let mut minus = base_params.clone();
        minus[pi].set(i, j, theta - h);
        let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
        let a = analytic.grads[pi].get(i, j);
        let rel = (a - fd).abs() / fd.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
