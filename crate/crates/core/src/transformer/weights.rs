use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::transformer::config::{FfnKind, ModelConfig, NORM_EPS};

/// Fan-in-scaled initialization keeps activations O(1) through frozen
/// random projections, which matters here: the backbone never trains, so
/// a bad scale would be permanent.
fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl NormParams {
    pub fn unit(d: usize) -> Self {
        NormParams { gain: Matrix::filled(1, d, 1.0), bias: Matrix::zeros(1, d) }
    }
}

/// Per-layer weights. `w1` columns are the FFN keys, `w2` rows the values,
/// and `w3` (GLU only) holds the gate keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Option<Matrix>,
    pub attn_norm: NormParams,
    pub ffn_norm: NormParams,
}

impl LayerWeights {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let dff = config.d_ffn;
        let square = [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)];
        for (name, m) in square {
            if m.rows() != d || m.cols() != d {
                return Err(Error::shape(format!("{name} must be {d}x{d}")));
            }
        }
        if self.w1.rows() != d || self.w1.cols() != dff {
            return Err(Error::shape(format!("w1 must be {d}x{dff}")));
        }
        if self.w2.rows() != dff || self.w2.cols() != d {
            return Err(Error::shape(format!("w2 must be {dff}x{d}")));
        }
        match (config.ffn_kind, &self.w3) {
            (FfnKind::Glu, Some(w3)) => {
                if w3.rows() != d || w3.cols() != dff {
                    return Err(Error::shape(format!("w3 must be {d}x{dff}")));
                }
            }
            (FfnKind::Glu, None) => return Err(Error::shape("glu layer missing w3")),
            (FfnKind::Standard, Some(_)) => {
                return Err(Error::shape("standard layer must not carry w3"))
            }
            (FfnKind::Standard, None) => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// vocab x d; the output head is tied to its transpose.
    pub token_embedding: Matrix,
    /// max_len x d learned absolute positions for text.
    pub pos_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormParams,
}

impl ModelWeights {
    pub fn init_random<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let dff = config.d_ffn;
        let token_embedding = Matrix::random_normal(config.vocab, d, fan_in_std(d), rng);
        let pos_embedding = Matrix::random_normal(config.max_len, d, fan_in_std(d), rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: Matrix::random_normal(d, d, fan_in_std(d), rng),
                wk: Matrix::random_normal(d, d, fan_in_std(d), rng),
                wv: Matrix::random_normal(d, d, fan_in_std(d), rng),
                wo: Matrix::random_normal(d, d, fan_in_std(d), rng),
                w1: Matrix::random_normal(d, dff, fan_in_std(d), rng),
                w2: Matrix::random_normal(dff, d, fan_in_std(dff), rng),
                w3: match config.ffn_kind {
                    FfnKind::Glu => Some(Matrix::random_normal(d, dff, fan_in_std(d), rng)),
                    FfnKind::Standard => None,
                },
                attn_norm: NormParams::unit(d),
                ffn_norm: NormParams::unit(d),
            })
            .collect();
        ModelWeights {
            token_embedding,
            pos_embedding,
            layers,
            final_norm: NormParams::unit(d),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.token_embedding.rows() != config.vocab
            || self.token_embedding.cols() != config.d_model
        {
            return Err(Error::shape("token_embedding shape"));
        }
        if self.pos_embedding.rows() != config.max_len
            || self.pos_embedding.cols() != config.d_model
        {
            return Err(Error::shape("pos_embedding shape"));
        }
        if self.layers.len() != config.n_layers {
            return Err(Error::shape(format!(
                "expected {} layers, found {}",
                config.n_layers,
                self.layers.len()
            )));
        }
        for layer in &self.layers {
            layer.validate(config)?;
        }
        Ok(())
    }

    /// Visit every parameter with a stable canonical name, in a fixed order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Matrix)) {
        f("token_embedding", &self.token_embedding);
        f("pos_embedding", &self.pos_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut named = |suffix: &str, m: &Matrix| f(&format!("layers.{i}.{suffix}"), m);
            named("wq", &layer.wq);
            named("wk", &layer.wk);
            named("wv", &layer.wv);
            named("wo", &layer.wo);
            named("w1", &layer.w1);
            named("w2", &layer.w2);
            if let Some(w3) = &layer.w3 {
                named("w3", w3);
            }
            named("attn_norm.gain", &layer.attn_norm.gain);
            named("attn_norm.bias", &layer.attn_norm.bias);
            named("ffn_norm.gain", &layer.ffn_norm.gain);
            named("ffn_norm.bias", &layer.ffn_norm.bias);
        }
        f("final_norm.gain", &self.final_norm.gain);
        f("final_norm.bias", &self.final_norm.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Matrix)) {
        f("token_embedding", &mut self.token_embedding);
        f("pos_embedding", &mut self.pos_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layers.{i}");
            f(&format!("{prefix}.wq"), &mut layer.wq);
            f(&format!("{prefix}.wk"), &mut layer.wk);
            f(&format!("{prefix}.wv"), &mut layer.wv);
            f(&format!("{prefix}.wo"), &mut layer.wo);
            f(&format!("{prefix}.w1"), &mut layer.w1);
            f(&format!("{prefix}.w2"), &mut layer.w2);
            if let Some(w3) = &mut layer.w3 {
                f(&format!("{prefix}.w3"), w3);
            }
            f(&format!("{prefix}.attn_norm.gain"), &mut layer.attn_norm.gain);
            f(&format!("{prefix}.attn_norm.bias"), &mut layer.attn_norm.bias);
            f(&format!("{prefix}.ffn_norm.gain"), &mut layer.ffn_norm.gain);
            f(&format!("{prefix}.ffn_norm.bias"), &mut layer.ffn_norm.bias);
        }
        f("final_norm.gain", &mut self.final_norm.gain);
        f("final_norm.bias", &mut self.final_norm.bias);
    }
}

/// Plain (non-tape) row-wise layer normalization.
pub fn layer_norm(x: &Matrix, params: &NormParams) -> Matrix {
    let c = x.cols();
    let mut out = Matrix::zeros(x.rows(), c);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        for j in 0..c {
            let xhat = (row[j] - mean) * inv_std;
            out.set(i, j, params.gain.get(0, j) * xhat + params.bias.get(0, j));
        }
    }
    out
}
