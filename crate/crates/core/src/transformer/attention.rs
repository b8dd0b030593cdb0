use crate::count::{record, Component, MacCounter};
use crate::error::{Error, Result};
use crate::numkit::{MaskKind, Matrix};
use crate::transformer::weights::LayerWeights;

/// Standard multi-head self-attention with scale 1/sqrt(d/n_heads).
pub fn mhsa_forward(
    w: &LayerWeights,
    x: &Matrix,
    mask: MaskKind,
    n_heads: usize,
    mut macs: Option<&mut MacCounter>,
) -> Result<Matrix> {
    let (out, _) = mhsa_with_attention(w, x, mask, n_heads, macs.take())?;
    Ok(out)
}

/// Forward pass that also returns the per-head attention rows
/// (n_heads matrices of shape L x L), used by normalization checks.
pub fn mhsa_with_attention(
    w: &LayerWeights,
    x: &Matrix,
    mask: MaskKind,
    n_heads: usize,
    mut macs: Option<&mut MacCounter>,
) -> Result<(Matrix, Vec<Matrix>)> {
    let d = x.cols();
    if w.wq.rows() != d {
        return Err(Error::shape(format!(
            "mhsa: input dim {d} does not match wq {}x{}",
            w.wq.rows(),
            w.wq.cols()
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::invalid(format!("bad head count {n_heads} for d={d}")));
    }
    let seq = x.rows();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = x.matmul(&w.wq)?;
    let k = x.matmul(&w.wk)?;
    let v = x.matmul(&w.wv)?;
    record(&mut macs, Component::Mhsa, seq, d, d);
    record(&mut macs, Component::Mhsa, seq, d, d);
    record(&mut macs, Component::Mhsa, seq, d, d);

    let mut head_outputs = Vec::with_capacity(n_heads);
    let mut attentions = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let mut scores = qh.matmul(&kh.transpose())?.scale(scale);
        record(&mut macs, Component::Mhsa, seq, head_dim, seq);
        for i in 0..scores.rows() {
            crate::numkit::autodiff::masked_softmax_row(scores.row_mut(i), i, mask);
        }
        let ctx = scores.matmul(&vh)?;
        record(&mut macs, Component::Mhsa, seq, seq, head_dim);
        head_outputs.push(ctx);
        attentions.push(scores);
    }
    let refs: Vec<&Matrix> = head_outputs.iter().collect();
    let ctx = Matrix::concat_cols(&refs)?;
    let out = ctx.matmul(&w.wo)?;
    record(&mut macs, Component::Mhsa, seq, d, d);
    Ok((out, attentions))
}
