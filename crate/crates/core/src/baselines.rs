//! The two comparison mechanisms memory-space prompting is measured
//! against: prepending projected features to the input sequence, and
//! cross-attention retrieval over the raw features.

use crate::count::{record, Component, MacCounter};
use crate::error::{Error, Result};
use crate::memvp::{Projector, VisualFeatures};
use crate::numkit::activation::softmax_row_in_place;
use crate::numkit::{MaskKind, Matrix};
use crate::transformer::config::{AttnMask, TokenSequence};
use crate::transformer::model::{hidden_stack, logits_from_hidden, Model};

/// Input-space visual prompting: the projected features become a prefix of
/// the embedded sequence. Prefix positions are mutually visible and visible
/// to all text positions; text-to-text attention keeps the model's mask.
/// The prefix carries no text position embeddings. Logits are returned for
/// the text positions only.
pub fn input_space_forward(
    model: &Model,
    projector: &Projector,
    features: &VisualFeatures,
    tokens: &TokenSequence,
    mut macs: Option<&mut MacCounter>,
) -> Result<Matrix> {
    tokens.validate(&model.config)?;
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    let n = features.count();
    let seq_text = tokens.len();
    if n + seq_text > model.config.max_len {
        return Err(Error::invalid(format!(
            "prefix {n} + text {seq_text} exceeds max_len {}",
            model.config.max_len
        )));
    }

    let prompts = projector.project(features, macs.as_deref_mut())?;
    let w = &model.weights;
    let mut text = Matrix::zeros(seq_text, model.config.d_model);
    for (r, &id) in tokens.ids.iter().enumerate() {
        for (j, (&tok, &pos)) in w
            .token_embedding
            .row(id)
            .iter()
            .zip(w.pos_embedding.row(r))
            .enumerate()
        {
            text.set(r, j, tok + pos);
        }
    }
    let x = if n == 0 {
        text
    } else {
        Matrix::concat_rows(&[&prompts, &text])?
    };
    let mask = match model.config.attn_mask {
        AttnMask::Causal => MaskKind::PrefixCausal(n),
        AttnMask::Bidirectional => MaskKind::None,
    };
    let hidden = hidden_stack(model, x, mask, None, macs.as_deref_mut(), None)?;
    let text_hidden = hidden.slice_rows(n, n + seq_text)?;
    logits_from_hidden(model, &text_hidden, macs)
}

/// Cross-attention retrieval weights. With token dimension d and feature
/// dimension d', the maps are wq: d x p, wk: d' x p, wv: d' x q, wo: d x q.
#[derive(Debug, Clone, PartialEq)]
pub struct XAttnWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl XAttnWeights {
    pub fn validate(&self) -> Result<()> {
        if self.wq.cols() != self.wk.cols() {
            return Err(Error::shape("xattn: wq and wk inner dims differ"));
        }
        if self.wk.rows() != self.wv.rows() {
            return Err(Error::shape("xattn: wk and wv feature dims differ"));
        }
        if self.wv.cols() != self.wo.cols() {
            return Err(Error::shape("xattn: wv and wo inner dims differ"));
        }
        Ok(())
    }
}

/// Cross-attention retrieval: softmax(x Wq Wk^T Z^T / sqrt(d)) Z Wv Wo^T.
pub fn xattn_forward(
    w: &XAttnWeights,
    x: &Matrix,
    z: &Matrix,
    macs: Option<&mut MacCounter>,
) -> Result<Matrix> {
    let (out, _) = xattn_with_attention(w, x, z, macs)?;
    Ok(out)
}

/// Same, returning the attention rows (L x n) for normalization checks.
pub fn xattn_with_attention(
    w: &XAttnWeights,
    x: &Matrix,
    z: &Matrix,
    mut macs: Option<&mut MacCounter>,
) -> Result<(Matrix, Matrix)> {
    w.validate()?;
    if z.rows() == 0 {
        return Err(Error::invalid(
            "cross-attention over zero visual features",
        ));
    }
    let d = x.cols();
    let queries = x.matmul(&w.wq)?;
    record(&mut macs, Component::XAttn, x.rows(), d, w.wq.cols());
    let keys = z.matmul(&w.wk)?;
    record(&mut macs, Component::XAttn, z.rows(), z.cols(), w.wk.cols());
    let mut scores = queries.matmul(&keys.transpose())?.scale(1.0 / (d as f64).sqrt());
    record(&mut macs, Component::XAttn, x.rows(), w.wq.cols(), z.rows());
    for i in 0..scores.rows() {
        softmax_row_in_place(scores.row_mut(i));
    }
    let values = z.matmul(&w.wv)?.matmul(&w.wo.transpose())?;
    record(&mut macs, Component::XAttn, z.rows(), z.cols(), w.wv.cols());
    record(&mut macs, Component::XAttn, z.rows(), w.wv.cols(), w.wo.rows());
    let out = scores.matmul(&values)?;
    record(&mut macs, Component::XAttn, x.rows(), z.rows(), values.cols());
    Ok((out, scores))
}
