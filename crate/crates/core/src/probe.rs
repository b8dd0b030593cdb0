//! Knowledge locating and distortion: read the per-entry retrieval
//! strengths of injected visual memory, and clamp selected strengths to
//! zero to test how the output depends on them.
//!
//! Responses are recorded after the activation and before value
//! multiplication, on the exact entries the forward pass uses (position
//! embeddings included, output scale excluded).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memvp::{prepare_injection, MemVpState, ResponseClamp, VisualProbe};
use crate::numkit::Matrix;
use crate::trainer::dataset::Sample;
use crate::trainer::train::{visual_for_mode, VisualMode};
use crate::transformer::config::TokenSequence;
use crate::transformer::model::{argmax_lowest_tie, lm_forward_with, ForwardHooks};
use crate::transformer::Model;

/// Per-(layer, token position, entry) retrieval strengths, plus the
/// layer-averaged map.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    /// One L x m matrix per model layer (zeros for non-injected layers).
    pub per_layer: Vec<Matrix>,
    /// Arithmetic mean over all layers.
    pub averaged: Matrix,
}

impl SimilarityMap {
    fn from_probe_maps(maps: Vec<Matrix>) -> Result<SimilarityMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("probe recorded no layers"))?;
        let mut averaged = Matrix::zeros(first.rows(), first.cols());
        for map in &maps {
            averaged = averaged.add(map)?;
        }
        let averaged = averaged.scale(1.0 / maps.len() as f64);
        Ok(SimilarityMap { per_layer: maps, averaged })
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn seq_len(&self) -> usize {
        self.averaged.rows()
    }

    pub fn entries(&self) -> usize {
        self.averaged.cols()
    }
}

/// Which entries to block, at which token positions. The action is always
/// "set the post-activation response to 0".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    /// Token positions whose retrievals are blocked.
    pub positions: Vec<usize>,
    pub selection: EntrySelection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySelection {
    /// The k most responsive entries, ranked by the layer-averaged response
    /// summed over the targeted positions (ties toward lower index).
    TopK(usize),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortReport {
    pub original_answer: usize,
    pub distorted_answer: usize,
    pub map_before: SimilarityMap,
    pub map_after: SimilarityMap,
    pub blocked_entries: Vec<usize>,
    /// True when the selection was empty: the distorted pass is the
    /// unmodified forward.
    pub no_op: bool,
}

fn probed_forward(
    model: &Model,
    state: &MemVpState,
    sample: &Sample,
    mode: VisualMode,
    clamp: Option<ResponseClamp>,
) -> Result<(usize, SimilarityMap)> {
    let features = visual_for_mode(sample, mode)?;
    let ctx = prepare_injection(state, &features, model.config.n_layers, None)?;
    let tokens = TokenSequence::new(sample.question.clone());
    let mut probe = match clamp {
        Some(c) => VisualProbe::clamping(c),
        None => VisualProbe::recorder(),
    };
    let logits = lm_forward_with(model, &tokens, Some(&ctx), ForwardHooks::probing(&mut probe))?;
    let answer = argmax_lowest_tie(logits.row(logits.rows() - 1));
    Ok((answer, SimilarityMap::from_probe_maps(probe.maps)?))
}

/// Records the query-key response map of one sample. Read-only: model and
/// state are untouched.
pub fn locate(model: &Model, state: &MemVpState, sample: &Sample, mode: VisualMode) -> Result<SimilarityMap> {
    let (_, map) = probed_forward(model, state, sample, mode, None)?;
    Ok(map)
}

/// Re-runs the forward pass with the selected responses clamped to zero at
/// the specified token positions, and reports both answers and both maps.
/// An empty selection is a no-op and is flagged as such.
pub fn distort(
    model: &Model,
    state: &MemVpState,
    sample: &Sample,
    mode: VisualMode,
    spec: &DistortionSpec,
) -> Result<DistortReport> {
    let (original_answer, map_before) = probed_forward(model, state, sample, mode, None)?;
    let seq = map_before.seq_len();
    if let Some(&bad) = spec.positions.iter().find(|&&p| p >= seq) {
        return Err(Error::invalid(format!(
            "distortion position {bad} out of range for sequence length {seq}"
        )));
    }

    let blocked: Vec<usize> = match &spec.selection {
        EntrySelection::Explicit(entries) => {
            if let Some(&bad) = entries.iter().find(|&&e| e >= map_before.entries()) {
                return Err(Error::invalid(format!(
                    "entry {bad} out of range for {} entries",
                    map_before.entries()
                )));
            }
            entries.clone()
        }
        EntrySelection::TopK(k) => {
            if *k > map_before.entries() {
                return Err(Error::invalid(format!(
                    "top-{k} exceeds {} entries",
                    map_before.entries()
                )));
            }
            let mut scored: Vec<(usize, f64)> = (0..map_before.entries())
                .map(|e| {
                    let total: f64 = spec
                        .positions
                        .iter()
                        .map(|&p| map_before.averaged.get(p, e))
                        .sum();
                    (e, total)
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.into_iter().take(*k).map(|(e, _)| e).collect()
        }
    };

    let no_op = blocked.is_empty() || spec.positions.is_empty();
    let clamp = ResponseClamp::new(
        spec.positions
            .iter()
            .flat_map(|&p| blocked.iter().map(move |&e| (p, e))),
    );
    let (distorted_answer, map_after) = probed_forward(model, state, sample, mode, Some(clamp))?;
    Ok(DistortReport {
        original_answer,
        distorted_answer,
        map_before,
        map_after,
        blocked_entries: blocked,
        no_op,
    })
}

/// CSV rows `layer,token_pos,entry,response`; layer -1 carries the
/// layer-averaged map. Ordering is layer-major, then position, then entry.
pub fn map_to_csv(map: &SimilarityMap) -> String {
    let mut out = String::from("layer,token_pos,entry,response\n");
    let mut emit = |layer: i64, m: &Matrix| {
        for t in 0..m.rows() {
            for e in 0..m.cols() {
                writeln!(out, "{layer},{t},{e},{}", m.get(t, e)).expect("string write");
            }
        }
    };
    for (li, m) in map.per_layer.iter().enumerate() {
        emit(li as i64, m);
    }
    emit(-1, &map.averaged);
    out
}

pub fn export_map(map: &SimilarityMap, path: &Path) -> Result<()> {
    std::fs::write(path, map_to_csv(map))?;
    Ok(())
}

pub fn parse_map_csv(text: &str) -> Result<Vec<(i64, usize, usize, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "layer,token_pos,entry,response" {
                return Err(Error::invalid("bad similarity-map header"));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::invalid(format!("bad row: {line}")));
        }
        rows.push((
            parts[0].parse().map_err(|e| Error::invalid(format!("{e}")))?,
            parts[1].parse().map_err(|e| Error::invalid(format!("{e}")))?,
            parts[2].parse().map_err(|e| Error::invalid(format!("{e}")))?,
            parts[3].parse().map_err(|e| Error::invalid(format!("{e}")))?,
        ));
    }
    Ok(rows)
}

/// Quick terminal rendering of the layer-averaged map.
pub fn render_ascii(map: &SimilarityMap) -> String {
    const SHADES: &[u8] = b" .:-=+*#%@";
    let m = &map.averaged;
    let max = m
        .data()
        .iter()
        .cloned()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    let mut out = String::new();
    writeln!(out, "averaged responses ({} positions x {} entries, max {max:.4})", m.rows(), m.cols())
        .expect("string write");
    for t in 0..m.rows() {
        out.push_str(&format!("pos {t:>2} |"));
        for e in 0..m.cols() {
            let frac = (m.get(t, e).abs() / max * (SHADES.len() - 1) as f64).round() as usize;
            out.push(SHADES[frac.min(SHADES.len() - 1)] as char);
        }
        out.push_str("|\n");
    }
    out
}
