//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A `Tape` records the forward computation as an append-only node list;
//! `backward` replays it in strict reverse order and accumulates adjoints
//! via the chain rule. One training step builds and consumes one tape.

use crate::error::{Error, Result};
use crate::numkit::activation::{softmax_row_in_place, Activation};
use crate::numkit::matrix::{matmul_into, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Attention masking applied inside the fused softmax node. Masked entries
/// are excluded from the reduction entirely, so their probability is an
/// exact zero and masked positions can never leak into earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    /// Row i attends to columns j <= i.
    Causal,
    /// First `n` columns are a visual prefix: always visible; text-to-text
    /// attention stays causal. Prefix rows see only the prefix.
    PrefixCausal(usize),
}

impl MaskKind {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            MaskKind::None => true,
            MaskKind::Causal => j <= i,
            MaskKind::PrefixCausal(n) => j < n || j <= i,
        }
    }
}

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBiasRow(NodeId, NodeId),
    Activation(NodeId, Activation),
    Hadamard(NodeId, NodeId),
    Softmax {
        x: NodeId,
        // retained for graph debugging; backward only needs the
        // probabilities
        #[allow(dead_code)]
        mask: MaskKind,
    },
    Transpose(NodeId),
    SliceRows(NodeId, usize, #[allow(dead_code)] usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    /// Sum of cross-entropy terms `logsumexp(logits[row]) - logits[row][tok]`
    /// over the listed (row, token) targets.
    CrossEntropySum { logits: NodeId, targets: Vec<(usize, usize)> },
}

struct Node {
    op: OpKind,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Adjoint for a node, densified to its value shape when absent.
    pub fn dense(&self, tape: &Tape, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(id);
                Matrix::zeros(v.rows(), v.cols())
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: OpKind, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(OpKind::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(OpKind::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(OpKind::Add(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(OpKind::Scale(a, factor), value)
    }

    /// Broadcast-add a 1 x c bias row to every row of an r x c node.
    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape(format!(
                "add_bias_row: bias {}x{} for operand {}x{}",
                b.rows(),
                b.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(b.row(0)) {
                *o += v;
            }
        }
        // recreated below because `out` borrowed self immutably via value()
        Ok(self.push(OpKind::AddBiasRow(a, bias), out))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| kind.apply_scalar(v)).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data).expect("activation shape");
        self.push(OpKind::Activation(a, kind), value)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(OpKind::Hadamard(a, b), value))
    }

    pub fn softmax(&mut self, a: NodeId, mask: MaskKind) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..value.rows() {
            masked_softmax_row(value.row_mut(i), i, mask);
        }
        self.push(OpKind::Softmax { x: a, mask }, value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(OpKind::Transpose(a), value)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let value = self.value(a).slice_rows(start, end)?;
        Ok(self.push(OpKind::SliceRows(a, start, end), value))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let value = self.value(a).slice_cols(start, end)?;
        Ok(self.push(OpKind::SliceCols(a, start, end), value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        Ok(self.push(OpKind::ConcatRows(parts.to_vec()), value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        Ok(self.push(OpKind::ConcatCols(parts.to_vec()), value))
    }

    /// Row-wise layer normalization with learnable gain and bias (1 x c each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if g.rows() != 1 || g.cols() != c || b.rows() != 1 || b.cols() != c {
            return Err(Error::shape("layer_norm: gain/bias must be 1 x cols"));
        }
        let mut out = Matrix::zeros(xv.rows(), c);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                out.set(i, j, g.get(0, j) * xhat + b.get(0, j));
            }
        }
        Ok(self.push(OpKind::LayerNorm { x, gain, bias, eps }, out))
    }

    /// Embedding lookup: output row r is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(OpKind::GatherRows(table, ids.to_vec()), out))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![total]).expect("scalar");
        self.push(OpKind::Sum(a), value)
    }

    /// Summed cross-entropy over (row, target-token) pairs, as a 1x1 node.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
        let l = self.value(logits);
        let mut total = 0.0;
        for &(row, tok) in targets {
            if row >= l.rows() || tok >= l.cols() {
                return Err(Error::invalid(format!(
                    "cross_entropy target ({row},{tok}) out of range for {}x{}",
                    l.rows(),
                    l.cols()
                )));
            }
            let r = l.row(row);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - r[tok];
        }
        let value = Matrix::from_vec(1, 1, vec![total]).expect("scalar");
        Ok(self.push(
            OpKind::CrossEntropySum { logits, targets: targets.to_vec() },
            value,
        ))
    }

    /// Reverse pass from a scalar (1x1) loss node. Adjoints are computed for
    /// every reachable node, frozen leaves included; masking is the
    /// optimizer's concern.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss node, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("seed"));

        for idx in (0..=loss.0).rev() {
            let Some(adj) = grads[idx].take() else { continue };
            self.push_adjoint(idx, &adj, &mut grads);
            grads[idx] = Some(adj);
        }
        Ok(Gradients { grads })
    }

    fn push_adjoint(&self, idx: usize, adj: &Matrix, grads: &mut [Option<Matrix>]) {
        let accumulate = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| {
            match &mut grads[id.0] {
                Some(g) => {
                    let sum = g.add(&delta).expect("adjoint shape");
                    *g = sum;
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            OpKind::Leaf => {}
            OpKind::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = adj . B^T
                let bt = bv.transpose();
                let mut da = Matrix::zeros(av.rows(), av.cols());
                matmul_into(adj.data(), bt.data(), da.data_mut(), adj.rows(), adj.cols(), bt.cols());
                // dB = A^T . adj
                let at = av.transpose();
                let mut db = Matrix::zeros(bv.rows(), bv.cols());
                matmul_into(at.data(), adj.data(), db.data_mut(), at.rows(), at.cols(), adj.cols());
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            OpKind::Add(a, b) => {
                accumulate(grads, *a, adj.clone());
                accumulate(grads, *b, adj.clone());
            }
            OpKind::Scale(a, s) => {
                accumulate(grads, *a, adj.scale(*s));
            }
            OpKind::AddBiasRow(a, bias) => {
                accumulate(grads, *a, adj.clone());
                let mut db = Matrix::zeros(1, adj.cols());
                for i in 0..adj.rows() {
                    for (acc, &v) in db.row_mut(0).iter_mut().zip(adj.row(i)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *bias, db);
            }
            OpKind::Activation(a, kind) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(adj.data())
                    .map(|(&xv, &g)| g * kind.derivative(xv))
                    .collect();
                let da = Matrix::from_vec(x.rows(), x.cols(), data).expect("shape");
                accumulate(grads, *a, da);
            }
            OpKind::Hadamard(a, b) => {
                accumulate(grads, *a, adj.hadamard(self.value(*b)).expect("shape"));
                accumulate(grads, *b, adj.hadamard(self.value(*a)).expect("shape"));
            }
            OpKind::Softmax { x, .. } => {
                let p = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let dot: f64 = adj.row(i).iter().zip(p.row(i)).map(|(&g, &pv)| g * pv).sum();
                    for j in 0..p.cols() {
                        dx.set(i, j, p.get(i, j) * (adj.get(i, j) - dot));
                    }
                }
                accumulate(grads, *x, dx);
            }
            OpKind::Transpose(a) => {
                accumulate(grads, *a, adj.transpose());
            }
            OpKind::SliceRows(a, start, _) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for i in 0..adj.rows() {
                    da.row_mut(start + i).copy_from_slice(adj.row(i));
                }
                accumulate(grads, *a, da);
            }
            OpKind::SliceCols(a, start, end) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for i in 0..adj.rows() {
                    da.row_mut(i)[*start..*end].copy_from_slice(adj.row(i));
                }
                accumulate(grads, *a, da);
            }
            OpKind::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = adj.slice_rows(offset, offset + rows).expect("slice");
                    accumulate(grads, p, slice);
                    offset += rows;
                }
            }
            OpKind::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let slice = adj.slice_cols(offset, offset + cols).expect("slice");
                    accumulate(grads, p, slice);
                    offset += cols;
                }
            }
            OpKind::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let g = self.value(*gain);
                let (rows, c) = (xv.rows(), xv.cols());
                let mut dx = Matrix::zeros(rows, c);
                let mut dg = Matrix::zeros(1, c);
                let mut db = Matrix::zeros(1, c);
                for i in 0..rows {
                    let row = xv.row(i);
                    let (mean, inv_std) = row_moments(row, *eps);
                    // dxhat_j = adj_j * g_j
                    let mut dvar = 0.0;
                    let mut dmean = 0.0;
                    for j in 0..c {
                        let dxhat = adj.get(i, j) * g.get(0, j);
                        let centered = row[j] - mean;
                        dvar += dxhat * centered * (-0.5) * inv_std * inv_std * inv_std;
                        dmean += dxhat * (-inv_std);
                        let xhat = centered * inv_std;
                        dg.data_mut()[j] += adj.get(i, j) * xhat;
                        db.data_mut()[j] += adj.get(i, j);
                    }
                    let centered_sum: f64 = row.iter().map(|&v| v - mean).sum();
                    dmean += dvar * (-2.0) * centered_sum / c as f64;
                    for j in 0..c {
                        let dxhat = adj.get(i, j) * g.get(0, j);
                        let centered = row[j] - mean;
                        let v = dxhat * inv_std
                            + dvar * 2.0 * centered / c as f64
                            + dmean / c as f64;
                        dx.set(i, j, v);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            OpKind::GatherRows(table, ids) => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, &v) in dt.row_mut(i).iter_mut().zip(adj.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            OpKind::Sum(a) => {
                let av = self.value(*a);
                let da = Matrix::filled(av.rows(), av.cols(), adj.get(0, 0));
                accumulate(grads, *a, da);
            }
            OpKind::CrossEntropySum { logits, targets } => {
                let l = self.value(*logits);
                let seed = adj.get(0, 0);
                let mut dl = Matrix::zeros(l.rows(), l.cols());
                for &(row, tok) in targets {
                    let mut probs = l.row(row).to_vec();
                    softmax_row_in_place(&mut probs);
                    for (j, p) in probs.iter().enumerate() {
                        let indicator = if j == tok { 1.0 } else { 0.0 };
                        let cur = dl.get(row, j);
                        dl.set(row, j, cur + seed * (p - indicator));
                    }
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn masked_softmax_row(row: &mut [f64], i: usize, mask: MaskKind) {
    if matches!(mask, MaskKind::None) {
        softmax_row_in_place(row);
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if mask.allows(i, j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if mask.allows(i, j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` w.r.t. one entry of `m`.
    fn central_diff(
        m: &Matrix,
        i: usize,
        j: usize,
        f: impl Fn(&Matrix) -> f64,
    ) -> f64 {
        let h = 1e-6 * m.get(i, j).abs().max(1.0);
        let mut plus = m.clone();
        plus.set(i, j, m.get(i, j) + h);
        let mut minus = m.clone();
        minus.set(i, j, m.get(i, j) - h);
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn assert_grad_close(analytic: f64, fd: f64) {
        let err = (analytic - fd).abs() / fd.abs().max(1.0);
        assert!(err <= 1e-5, "analytic {analytic} vs fd {fd} (rel {err})");
    }

    #[test]
    fn sum_of_matmul_gradient_is_broadcast_operand() {
        // loss = sum(W . x) with x a column vector: dL/dW[i][j] = x[j]
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        let mut tape = Tape::new();
        let wn = tape.leaf(w);
        let xn = tape.leaf(x);
        let y = tape.matmul(wn, xn).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(wn).unwrap();
        assert_eq!(gw.data(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(Matrix::filled(1, 1, 2.0));
        let unused = tape.leaf(Matrix::filled(1, 1, 3.0));
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.dense(&tape, unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn per_op_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let base = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let other = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let right = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let gain = Matrix::random_normal(1, 4, 0.3, &mut rng);
        let bias = Matrix::random_normal(1, 4, 0.3, &mut rng);

        type Builder = fn(&mut Tape, NodeId, NodeId, NodeId, NodeId, NodeId) -> NodeId;
        let cases: Vec<(&str, Builder)> = vec![
            ("matmul", |t, a, _, r, _, _| t.matmul(a, r).unwrap()),
            ("add", |t, a, b, _, _, _| t.add(a, b).unwrap()),
            ("scale", |t, a, _, _, _, _| t.scale(a, -1.7)),
            ("hadamard", |t, a, b, _, _, _| t.hadamard(a, b).unwrap()),
            ("gelu", |t, a, _, _, _, _| t.activation(a, Activation::Gelu)),
            ("silu", |t, a, _, _, _, _| t.activation(a, Activation::Silu)),
            ("softmax", |t, a, _, _, _, _| t.softmax(a, MaskKind::None)),
            ("softmax_causal", |t, a, _, _, _, _| {
                t.softmax(a, MaskKind::Causal)
            }),
            ("transpose", |t, a, _, _, _, _| t.transpose(a)),
            ("slice_cols", |t, a, _, _, _, _| t.slice_cols(a, 1, 3).unwrap()),
            ("slice_rows", |t, a, _, _, _, _| t.slice_rows(a, 0, 2).unwrap()),
            ("concat_cols", |t, a, b, _, _, _| t.concat_cols(&[a, b]).unwrap()),
            ("concat_rows", |t, a, b, _, _, _| t.concat_rows(&[a, b]).unwrap()),
            ("layer_norm", |t, a, _, _, g, bi| {
                t.layer_norm(a, g, bi, 1e-5).unwrap()
            }),
            ("add_bias_row", |t, a, _, _, g, _| {
                t.add_bias_row(a, g).unwrap()
            }),
            ("gather", |t, a, _, _, _, _| {
                t.gather_rows(a, &[2, 0, 0, 1]).unwrap()
            }),
        ];

        for (name, build) in cases {
            // scalarize with a fixed random weighting so every output entry
            // contributes to the loss
            let eval = |m: &Matrix, which: usize| -> f64 {
                let mut t = Tape::new();
                let a = t.leaf(if which == 0 { m.clone() } else { base.clone() });
                let b = t.leaf(if which == 1 { m.clone() } else { other.clone() });
                let r = t.leaf(right.clone());
                let g = t.leaf(if which == 3 { m.clone() } else { gain.clone() });
                let bi = t.leaf(bias.clone());
                let out = build(&mut t, a, b, r, g, bi);
                let weights = t.leaf(weighting(t.value(out).rows(), t.value(out).cols()));
                let prod = t.hadamard(out, weights).unwrap();
                let loss = t.sum(prod);
                t.value(loss).get(0, 0)
            };

            let mut t = Tape::new();
            let a = t.leaf(base.clone());
            let b = t.leaf(other.clone());
            let r = t.leaf(right.clone());
            let g = t.leaf(gain.clone());
            let bi = t.leaf(bias.clone());
            let out = build(&mut t, a, b, r, g, bi);
            let weights = t.leaf(weighting(t.value(out).rows(), t.value(out).cols()));
            let prod = t.hadamard(out, weights).unwrap();
            let loss = t.sum(prod);
            let grads = t.backward(loss).unwrap();

            let checks: &[(usize, NodeId, &Matrix)] =
                &[(0, a, &base), (1, b, &other), (3, g, &gain)];
            for &(which, node, source) in checks {
                let ga = grads.dense(&t, node);
                let mut points = 0;
                for i in 0..source.rows() {
                    for j in 0..source.cols() {
                        if points >= 20 {
                            break;
                        }
                        let fd = central_diff(source, i, j, |m| eval(m, which));
                        assert_grad_close(ga.get(i, j), fd);
                        points += 1;
                    }
                }
            }
            let _ = name;
        }
    }

    fn weighting(rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|k| 0.3 + 0.11 * (k % 7) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn cross_entropy_matches_closed_form_and_fd() {
        // 2-class hand instance: logits [1, 0], target 0 -> ln(1 + e^-1)
        let logits = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let loss = t.cross_entropy_sum(l, &[(0, 0)]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((t.value(loss).get(0, 0) - expected).abs() < 1e-12);

        let grads = t.backward(loss).unwrap();
        let gl = grads.get(l).unwrap();
        for j in 0..2 {
            let fd = central_diff(&logits, 0, j, |m| {
                let mut t2 = Tape::new();
                let l2 = t2.leaf(m.clone());
                let loss2 = t2.cross_entropy_sum(l2, &[(0, 0)]).unwrap();
                t2.value(loss2).get(0, 0)
            });
            assert_grad_close(gl.get(0, j), fd);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let cols = 64;
        let logits = Matrix::filled(1, cols, 0.37);
        let mut t = Tape::new();
        let l = t.leaf(logits);
        let loss = t.cross_entropy_sum(l, &[(0, 5)]).unwrap();
        assert!((t.value(loss).get(0, 0) - (cols as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_is_exactly_zero_on_masked_entries() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(3, 3, 1.0));
        let s = t.softmax(a, MaskKind::Causal);
        let v = t.value(s);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        assert_eq!(v.get(0, 0), 1.0);
        for i in 0..3 {
            let sum: f64 = v.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}
