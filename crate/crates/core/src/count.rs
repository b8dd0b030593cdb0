//! Multiply-accumulate instrumentation shared by every forward path.
//!
//! Convention: every matrix product of shape (r x k) . (k x c) contributes
//! r*k*c MACs and 1 MAC = 2 FLOPs. Softmax, normalization, activations,
//! biases, and embedding lookups are excluded; this is what reproduces the
//! per-layer constants 8Ld^2 + 4L^2 d (attention) and 16Ld^2 (FFN at D=4d).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Mhsa,
    Ffn,
    /// Extra work from visual entries appended to FFN weights.
    Injection,
    /// Feature-to-prompt projection, outside the language-model layers.
    Projector,
    /// Output vocabulary projection, outside the per-layer tallies.
    LogitHead,
    /// Cross-attention retrieval baseline.
    XAttn,
}

const COMPONENTS: [Component; 6] = [
    Component::Mhsa,
    Component::Ffn,
    Component::Injection,
    Component::Projector,
    Component::LogitHead,
    Component::XAttn,
];

/// Accumulator owned by a single evaluation context; concurrent counted
/// runs use separate accumulators.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    mhsa: u64,
    ffn: u64,
    injection: u64,
    projector: u64,
    logit_head: u64,
    xattn: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, component: Component, rows: usize, inner: usize, cols: usize) {
        let macs = rows as u64 * inner as u64 * cols as u64;
        *self.slot(component) += macs;
    }

    fn slot(&mut self, component: Component) -> &mut u64 {
        match component {
            Component::Mhsa => &mut self.mhsa,
            Component::Ffn => &mut self.ffn,
            Component::Injection => &mut self.injection,
            Component::Projector => &mut self.projector,
            Component::LogitHead => &mut self.logit_head,
            Component::XAttn => &mut self.xattn,
        }
    }

    pub fn get(&self, component: Component) -> u64 {
        match component {
            Component::Mhsa => self.mhsa,
            Component::Ffn => self.ffn,
            Component::Injection => self.injection,
            Component::Projector => self.projector,
            Component::LogitHead => self.logit_head,
            Component::XAttn => self.xattn,
        }
    }

    /// MACs inside transformer layers only (attention + FFN + injection).
    pub fn layer_total(&self) -> u64 {
        self.mhsa + self.ffn + self.injection
    }

    pub fn total(&self) -> u64 {
        COMPONENTS.iter().map(|&c| self.get(c)).sum()
    }

    /// 1 MAC = 2 FLOPs.
    pub fn layer_flops(&self) -> u64 {
        2 * self.layer_total()
    }
}

/// Optional counting hook threaded through forward passes.
pub fn record(counter: &mut Option<&mut MacCounter>, component: Component, r: usize, k: usize, c: usize) {
    if let Some(ctr) = counter.as_deref_mut() {
        ctr.record(component, r, k, c);
    }
}
