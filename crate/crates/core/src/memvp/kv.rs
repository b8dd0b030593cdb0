//! Assembly of visual key/value memory entries and their concatenation
//! into FFN weight matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::transformer::weights::LayerWeights;

/// Which half of each visual entry carries the projected prompt. The other
/// half falls back to its position embedding alone, so the entry count and
/// the trainable-parameter count stay fixed across ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    Both,
    KeysOnly,
    ValuesOnly,
}

/// How position embeddings combine with prompts. `Add` follows the primary
/// construction (entry i is lambda*f(z_i) + p_i). `Concat` gives prompts and
/// position embeddings disjoint slots: the first n entries are the scaled
/// prompts with no position term, the remaining m-n are position rows alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectLayers {
    All,
    Set(Vec<usize>),
}

impl InjectLayers {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            InjectLayers::All => true,
            InjectLayers::Set(set) => set.contains(&layer),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let InjectLayers::Set(set) = self {
            if let Some(&bad) = set.iter().find(|&&l| l >= n_layers) {
                return Err(Error::config(format!(
                    "inject layer {bad} out of range for {n_layers} layers"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemVpConfig {
    /// Scale on projected prompts inside keys and values.
    pub lambda: f64,
    /// Scale on the summed retrieval output.
    pub out_scale: f64,
    /// Number of visual memory entries (>= number of prompts; the tail is
    /// zero-padded, i.e. position-embedding rows alone).
    pub m: usize,
    pub injection_mode: InjectionMode,
    pub pos_mode: PosMode,
    pub inject_layers: InjectLayers,
}

impl MemVpConfig {
    pub fn desk(m: usize) -> Self {
        MemVpConfig {
            lambda: 0.01,
            out_scale: 1.0,
            m,
            injection_mode: InjectionMode::Both,
            pos_mode: PosMode::Add,
            inject_layers: InjectLayers::All,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and >= 0"));
        }
        if !self.out_scale.is_finite() {
            return Err(Error::config("out_scale must be finite"));
        }
        if self.m < 1 {
            return Err(Error::config("m must be >= 1"));
        }
        self.inject_layers.validate(n_layers)
    }
}

impl Default for MemVpConfig {
    fn default() -> Self {
        MemVpConfig::desk(24)
    }
}

/// Trainable position embeddings for visual entries: either one table pair
/// shared by every layer, or an independent pair per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEmbeddings {
    tables: Vec<PosPair>,
    shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosPair {
    pub p_k: Matrix,
    pub p_v: Matrix,
}

impl PositionEmbeddings {
    pub fn init_random<R: Rng>(
        m: usize,
        d: usize,
        n_layers: usize,
        shared: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let count = if shared { 1 } else { n_layers };
        let tables = (0..count)
            .map(|_| PosPair {
                p_k: Matrix::random_normal(m, d, std, rng),
                p_v: Matrix::random_normal(m, d, std, rng),
            })
            .collect();
        PositionEmbeddings { tables, shared }
    }

    pub fn zeros(m: usize, d: usize, n_layers: usize, shared: bool) -> Self {
        let count = if shared { 1 } else { n_layers };
        let tables = (0..count)
            .map(|_| PosPair { p_k: Matrix::zeros(m, d), p_v: Matrix::zeros(m, d) })
            .collect();
        PositionEmbeddings { tables, shared }
    }

    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn m(&self) -> usize {
        self.tables[0].p_k.rows()
    }

    pub fn for_layer(&self, layer: usize) -> &PosPair {
        if self.shared {
            &self.tables[0]
        } else {
            &self.tables[layer]
        }
    }

    /// Index of the table backing a layer (0 when shared).
    pub fn table_index(&self, layer: usize) -> usize {
        if self.shared {
            0
        } else {
            layer
        }
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn param_count(&self) -> usize {
        self.tables
            .iter()
            .map(|t| t.p_k.rows() * t.p_k.cols() + t.p_v.rows() * t.p_v.cols())
            .sum()
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &Matrix)) {
        for (i, t) in self.tables.iter().enumerate() {
            f(&format!("pos_embeddings.{i}.p_k"), &t.p_k);
            f(&format!("pos_embeddings.{i}.p_v"), &t.p_v);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Matrix)) {
        for (i, t) in self.tables.iter_mut().enumerate() {
            f(&format!("pos_embeddings.{i}.p_k"), &mut t.p_k);
            f(&format!("pos_embeddings.{i}.p_v"), &mut t.p_v);
        }
    }
}

/// Assembled visual key/value entries for one layer. Rows n..m derive only
/// from position embeddings (the zero-padding rule).
#[derive(Debug, Clone, PartialEq)]
pub struct VisualKv {
    pub k_vis: Matrix,
    pub v_vis: Matrix,
}

impl VisualKv {
    pub fn entries(&self) -> usize {
        self.k_vis.rows()
    }
}

/// Build the m visual entries from n projected prompts (n <= m).
///
/// Text-only samples pass zero prompt rows (or none at all): the entries
/// then reduce to the position embeddings alone.
pub fn build_visual_kv(prompts: &Matrix, pe: &PosPair, cfg: &MemVpConfig) -> Result<VisualKv> {
    let n = prompts.rows();
    let m = pe.p_k.rows();
    if n > m {
        return Err(Error::invalid(format!(
            "{n} visual prompts exceed m={m} position slots; raise m to at least {n}"
        )));
    }
    if m != cfg.m {
        return Err(Error::config(format!(
            "position table has m={m} rows but config says m={}",
            cfg.m
        )));
    }
    if n > 0 && prompts.cols() != pe.p_k.cols() {
        return Err(Error::shape(format!(
            "prompts are {}-dimensional, position embeddings {}-dimensional",
            prompts.cols(),
            pe.p_k.cols()
        )));
    }
    let d = pe.p_k.cols();

    let zero_row = Matrix::zeros(1, d);
    let mut k_vis = Matrix::zeros(m, d);
    let mut v_vis = Matrix::zeros(m, d);
    for i in 0..m {
        let prompt = if i < n { prompts.row(i) } else { zero_row.row(0) };
        let (key_prompt, value_prompt): (&[f64], &[f64]) = match cfg.injection_mode {
            InjectionMode::Both => (prompt, prompt),
            InjectionMode::KeysOnly => (prompt, zero_row.row(0)),
            InjectionMode::ValuesOnly => (zero_row.row(0), prompt),
        };
        for j in 0..d {
            let (k_pos, v_pos) = match cfg.pos_mode {
                PosMode::Add => (pe.p_k.get(i, j), pe.p_v.get(i, j)),
                // prompt slots carry no position term; padding slots do
                PosMode::Concat if i < n => (0.0, 0.0),
                PosMode::Concat => (pe.p_k.get(i, j), pe.p_v.get(i, j)),
            };
            k_vis.set(i, j, cfg.lambda * key_prompt[j] + k_pos);
            v_vis.set(i, j, cfg.lambda * value_prompt[j] + v_pos);
        }
    }
    Ok(VisualKv { k_vis, v_vis })
}

/// Concatenate visual entries into standard FFN weights:
/// W1' = (k_1..k_D, K_vis rows as columns), W2' = (v_1..v_D, out_scale * V_vis).
/// The output scale is folded into the appended value rows so it multiplies
/// only the appended-entry contribution.
pub fn inject_standard(
    w: &LayerWeights,
    kv: &VisualKv,
    cfg: &MemVpConfig,
) -> Result<(Matrix, Matrix)> {
    if w.w3.is_some() {
        return Err(Error::invalid(
            "inject_standard requires a standard (non-GLU) FFN",
        ));
    }
    inject_weight_pair(&w.w1, &w.w2, kv, cfg)
}

/// Shared concatenation used by both FFN kinds: the GLU path pairs these
/// augmented matrices with a constant-one gate for the appended columns.
pub fn inject_weight_pair(
    w1: &Matrix,
    w2: &Matrix,
    kv: &VisualKv,
    cfg: &MemVpConfig,
) -> Result<(Matrix, Matrix)> {
    if kv.k_vis.cols() != w1.rows() {
        return Err(Error::shape(format!(
            "visual entries are {}-dimensional, FFN keys {}-dimensional",
            kv.k_vis.cols(),
            w1.rows()
        )));
    }
    let w1_aug = Matrix::concat_cols(&[w1, &kv.k_vis.transpose()])?;
    let scaled_values = kv.v_vis.scale(cfg.out_scale);
    let w2_aug = Matrix::concat_rows(&[w2, &scaled_values])?;
    Ok((w1_aug, w2_aug))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_cfg(m: usize, lambda: f64) -> MemVpConfig {
        MemVpConfig { lambda, ..MemVpConfig::desk(m) }
    }

    fn zero_pe(m: usize, d: usize) -> PosPair {
        PosPair { p_k: Matrix::zeros(m, d), p_v: Matrix::zeros(m, d) }
    }

    #[test]
    fn unit_lambda_zero_positions_passes_prompts_through() {
        let prompts = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let kv = build_visual_kv(&prompts, &zero_pe(2, 2), &plain_cfg(2, 1.0)).unwrap();
        assert_eq!(kv.k_vis, prompts);
        assert_eq!(kv.v_vis, prompts);
    }

    #[test]
    fn text_only_sample_keeps_position_embeddings_alone() {
        let pe = PosPair {
            p_k: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            p_v: Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap(),
        };
        let prompts = Matrix::from_vec(0, 2, vec![]).unwrap();
        let kv = build_visual_kv(&prompts, &pe, &plain_cfg(2, 0.01)).unwrap();
        assert_eq!(kv.k_vis, pe.p_k);
        assert_eq!(kv.v_vis, pe.p_v);
    }

    #[test]
    fn default_lambda_is_one_percent() {
        assert_eq!(MemVpConfig::default().lambda, 0.01);
        assert_eq!(MemVpConfig::default().out_scale, 1.0);
    }

    #[test]
    fn too_many_prompts_rejected_with_guidance() {
        let prompts = Matrix::zeros(3, 2);
        let err = build_visual_kv(&prompts, &zero_pe(2, 2), &plain_cfg(2, 1.0)).unwrap_err();
        assert!(err.to_string().contains("raise m"));
    }

    #[test]
    fn padding_rows_are_independent_of_prompts() {
        let pe = PosPair {
            p_k: Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            p_v: Matrix::from_rows(&[vec![4.0], vec![5.0], vec![6.0]]).unwrap(),
        };
        let cfg = plain_cfg(3, 1.0);
        let a = build_visual_kv(&Matrix::from_rows(&[vec![10.0]]).unwrap(), &pe, &cfg).unwrap();
        let b = build_visual_kv(&Matrix::from_rows(&[vec![-7.0]]).unwrap(), &pe, &cfg).unwrap();
        for i in 1..3 {
            assert_eq!(a.k_vis.get(i, 0).to_bits(), b.k_vis.get(i, 0).to_bits());
            assert_eq!(a.v_vis.get(i, 0).to_bits(), b.v_vis.get(i, 0).to_bits());
        }
    }

    #[test]
    fn injection_modes_zero_one_side() {
        let prompts = Matrix::from_rows(&[vec![10.0, 20.0]]).unwrap();
        let pe = PosPair {
            p_k: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            p_v: Matrix::from_rows(&[vec![2.0, 2.0]]).unwrap(),
        };
        let mut cfg = plain_cfg(1, 0.1);
        cfg.injection_mode = InjectionMode::KeysOnly;
        let kv = build_visual_kv(&prompts, &pe, &cfg).unwrap();
        assert_eq!(kv.k_vis.data(), &[2.0, 3.0]);
        assert_eq!(kv.v_vis.data(), &[2.0, 2.0]);

        cfg.injection_mode = InjectionMode::ValuesOnly;
        let kv = build_visual_kv(&prompts, &pe, &cfg).unwrap();
        assert_eq!(kv.k_vis.data(), &[1.0, 1.0]);
        assert_eq!(kv.v_vis.data(), &[3.0, 4.0]);
    }

    #[test]
    fn concat_mode_splits_slots() {
        let prompts = Matrix::from_rows(&[vec![10.0, 20.0]]).unwrap();
        let pe = PosPair {
            p_k: Matrix::from_rows(&[vec![1.0, 1.0], vec![5.0, 5.0]]).unwrap(),
            p_v: Matrix::from_rows(&[vec![2.0, 2.0], vec![6.0, 6.0]]).unwrap(),
        };
        let mut cfg = plain_cfg(2, 0.1);
        cfg.pos_mode = PosMode::Concat;
        let kv = build_visual_kv(&prompts, &pe, &cfg).unwrap();
        // slot 0: scaled prompt only; slot 1: position row only
        assert_eq!(kv.k_vis.row(0), &[1.0, 2.0]);
        assert_eq!(kv.k_vis.row(1), &[5.0, 5.0]);
        assert_eq!(kv.v_vis.row(0), &[1.0, 2.0]);
        assert_eq!(kv.v_vis.row(1), &[6.0, 6.0]);
    }

    #[test]
    fn augmented_shapes_extend_weight_matrices() {
        let w = crate::transformer::ffn::ffn_only_layer(
            Matrix::zeros(2, 3),
            Matrix::zeros(3, 2),
            None,
        );
        let kv = VisualKv { k_vis: Matrix::zeros(4, 2), v_vis: Matrix::zeros(4, 2) };
        let (w1, w2) = inject_standard(&w, &kv, &plain_cfg(4, 0.01)).unwrap();
        assert_eq!((w1.rows(), w1.cols()), (2, 7));
        assert_eq!((w2.rows(), w2.cols()), (7, 2));
    }

    #[test]
    fn appended_memory_is_small_next_to_llama_scale_ffn() {
        // D = 11008 with n = m = 256 entries: the visual block is under 2.5%
        // of the augmented width.
        let (d, dff, m) = (4, 11008, 256);
        let w = crate::transformer::ffn::ffn_only_layer(
            Matrix::zeros(d, dff),
            Matrix::zeros(dff, d),
            None,
        );
        let kv = VisualKv { k_vis: Matrix::zeros(m, d), v_vis: Matrix::zeros(m, d) };
        let (w1, _) = inject_standard(&w, &kv, &plain_cfg(m, 0.01)).unwrap();
        assert_eq!(w1.cols(), dff + m);
        assert!((m as f64) / (w1.cols() as f64) < 0.025);
    }

    #[test]
    fn shared_vs_per_layer_position_embedding_counts() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let shared = PositionEmbeddings::init_random(6, 8, 4, true, &mut rng);
        let per_layer = PositionEmbeddings::init_random(6, 8, 4, false, &mut rng);
        assert_eq!(per_layer.param_count(), 4 * shared.param_count());
    }
}
