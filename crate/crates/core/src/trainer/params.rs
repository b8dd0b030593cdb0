//! Canonical flat view over every parameter of (model, memvp state):
//! a fixed name order shared by the optimizer, the gradient vectors, the
//! finite-difference checks, and the checkpoints.

use serde::{Deserialize, Serialize};

use crate::memvp::{MemVpState, TrainableMask};
use crate::numkit::Matrix;
use crate::transformer::weights::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Norms,
    Projector,
    PosKeys,
    PosValues,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("memvp.projector") {
            ParamGroup::Projector
        } else if name.ends_with(".p_k") {
            ParamGroup::PosKeys
        } else if name.ends_with(".p_v") {
            ParamGroup::PosValues
        } else if name.contains("norm") {
            ParamGroup::Norms
        } else {
            ParamGroup::Backbone
        }
    }

    pub fn trainable_under(&self, mask: &TrainableMask) -> bool {
        match self {
            ParamGroup::Backbone => false,
            ParamGroup::Norms => mask.norms,
            ParamGroup::Projector => mask.projector,
            ParamGroup::PosKeys => mask.p_k,
            ParamGroup::PosValues => mask.p_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
}

pub fn param_metas(weights: &ModelWeights, state: &MemVpState) -> Vec<ParamMeta> {
    let mut metas = Vec::new();
    let mut push = |name: &str, m: &Matrix| {
        metas.push(ParamMeta {
            name: name.to_string(),
            group: ParamGroup::of(name),
            rows: m.rows(),
            cols: m.cols(),
        });
    };
    weights.visit(&mut push);
    state.visit(&mut push);
    metas
}

pub fn collect_params(weights: &ModelWeights, state: &MemVpState) -> Vec<Matrix> {
    let mut out = Vec::new();
    weights.visit(&mut |_, m| out.push(m.clone()));
    state.visit(&mut |_, m| out.push(m.clone()));
    out
}

pub fn assign_params(weights: &mut ModelWeights, state: &mut MemVpState, values: &[Matrix]) {
    let mut idx = 0;
    let mut take = move || -> usize {
        let cur = idx;
        idx += 1;
        cur
    };
    weights.visit_mut(&mut |_, m| *m = values[take()].clone());
    let mut idx2 = {
        let mut count = 0;
        weights.visit(&mut |_, _| count += 1);
        count
    };
    state.visit_mut(&mut |_, m| {
        *m = values[idx2].clone();
        idx2 += 1;
    });
}

/// Per-parameter trainability flags in canonical order.
pub fn trainable_flags(metas: &[ParamMeta], mask: &TrainableMask) -> Vec<bool> {
    metas.iter().map(|m| m.group.trainable_under(mask)).collect()
}
