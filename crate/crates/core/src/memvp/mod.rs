//! Memory-space visual prompting: project visual features, build
//! position-embedded key/value entries, and concatenate them into FFN
//! weight matrices instead of extending the input sequence.

pub mod forward;
pub mod kv;
pub mod projector;

use serde::{Deserialize, Serialize};

use crate::count::MacCounter;
use crate::error::Result;
use crate::numkit::Matrix;
use crate::transformer::weights::ModelWeights;

pub use forward::{
    memvp_ffn_forward, memvp_ffn_probed, memvp_ffn_sum, memvp_glu_explicit_gate, ResponseClamp,
    VisualProbe,
};
pub use kv::{
    build_visual_kv, inject_standard, InjectLayers, InjectionMode, MemVpConfig, PosMode, PosPair,
    PositionEmbeddings, VisualKv,
};
pub use projector::{FeatureSource, Projector, ProjectorKind, VisualFeatures};

/// The trainable surface: all new parameters plus the unfrozen norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainableMask {
    pub projector: bool,
    pub p_k: bool,
    pub p_v: bool,
    pub norms: bool,
}

impl Default for TrainableMask {
    fn default() -> Self {
        TrainableMask { projector: true, p_k: true, p_v: true, norms: true }
    }
}

/// Everything persisted for the visual-prompting side of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemVpState {
    pub projector: Projector,
    pub pos_embeddings: PositionEmbeddings,
    pub config: MemVpConfig,
}

impl MemVpState {
    pub fn visit(&self, f: &mut impl FnMut(&str, &Matrix)) {
        self.projector.visit(&mut |name, m| f(&format!("memvp.{name}"), m));
        self.pos_embeddings.visit(&mut |name, m| f(&format!("memvp.{name}"), m));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Matrix)) {
        self.projector.visit_mut(&mut |name, m| f(&format!("memvp.{name}"), m));
        self.pos_embeddings.visit_mut(&mut |name, m| f(&format!("memvp.{name}"), m));
    }
}

/// Per-sample injection context: one assembled key/value block for every
/// layer selected by the config.
#[derive(Debug, Clone)]
pub struct InjectionCtx {
    pub per_layer: Vec<Option<VisualKv>>,
    pub config: MemVpConfig,
}

impl InjectionCtx {
    pub fn kv_for(&self, layer: usize) -> Option<&VisualKv> {
        self.per_layer.get(layer).and_then(|kv| kv.as_ref())
    }
}

/// Project features once, then assemble the key/value entries for every
/// injected layer. A text-only sample (n = 0) yields entries made of
/// position embeddings alone.
pub fn prepare_injection(
    state: &MemVpState,
    features: &VisualFeatures,
    n_layers: usize,
    mut macs: Option<&mut MacCounter>,
) -> Result<InjectionCtx> {
    state.config.validate(n_layers)?;
    let prompts = state.projector.project(features, macs.take())?;
    let per_layer = (0..n_layers)
        .map(|layer| {
            if state.config.inject_layers.contains(layer) {
                build_visual_kv(&prompts, state.pos_embeddings.for_layer(layer), &state.config)
                    .map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InjectionCtx { per_layer, config: state.config.clone() })
}

/// Exact trainable-parameter counts per group under a freeze mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub projector: usize,
    pub p_k: usize,
    pub p_v: usize,
    pub norms: usize,
    pub backbone_total: usize,
    pub trainable_total: usize,
}

pub fn count_trainable(
    weights: &ModelWeights,
    state: &MemVpState,
    mask: &TrainableMask,
) -> ParamCountReport {
    let mut backbone_total = 0;
    let mut norms = 0;
    weights.visit(&mut |name, m| {
        let count = m.rows() * m.cols();
        backbone_total += count;
        if name.contains("norm") {
            norms += count;
        }
    });
    // norms are reported as trainable, not backbone
    backbone_total -= norms;

    let projector = state.projector.param_count();
    let pe_total = state.pos_embeddings.param_count();
    let (p_k, p_v) = (pe_total / 2, pe_total / 2);

    let trainable_total = [
        (mask.projector, projector),
        (mask.p_k, p_k),
        (mask.p_v, p_v),
        (mask.norms, norms),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|(_, n)| n)
    .sum();

    ParamCountReport {
        projector: if mask.projector { projector } else { 0 },
        p_k: if mask.p_k { p_k } else { 0 },
        p_v: if mask.p_v { p_v } else { 0 },
        norms: if mask.norms { norms } else { 0 },
        backbone_total,
        trainable_total,
    }
}
