//! Adaptive-moment optimizer with decoupled weight decay and bias
//! correction, applied only to trainable parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memvp::MemVpState;
use crate::numkit::Matrix;
use crate::transformer::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    moments: Vec<MomentPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentPair {
    m: Matrix,
    v: Matrix,
}

impl AdamW {
    pub fn new(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        shapes: &[(usize, usize)],
    ) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            moments: shapes
                .iter()
                .map(|&(r, c)| MomentPair { m: Matrix::zeros(r, c), v: Matrix::zeros(r, c) })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.moments.len()
    }

    /// One update over (model, memvp) in canonical parameter order. A
    /// non-finite gradient on any trainable parameter rejects the whole
    /// step with a diagnostic; no state changes in that case.
    pub fn step(
        &mut self,
        weights: &mut ModelWeights,
        state: &mut MemVpState,
        grads: &[Matrix],
        trainable: &[bool],
    ) -> Result<()> {
        if grads.len() != self.moments.len() || trainable.len() != self.moments.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} gradients / {} flags",
                self.moments.len(),
                grads.len(),
                trainable.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if trainable[i] && !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for trainable parameter #{i}; step rejected"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let mut idx = 0usize;
        let moments = &mut self.moments;
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut update = |_: &str, param: &mut Matrix| {
            let i = idx;
            idx += 1;
            if !trainable[i] {
                return;
            }
            let pair = &mut moments[i];
            let g = &grads[i];
            for j in 0..param.data().len() {
                let gj = g.data()[j];
                let mj = b1 * pair.m.data()[j] + (1.0 - b1) * gj;
                let vj = b2 * pair.v.data()[j] + (1.0 - b2) * gj * gj;
                pair.m.data_mut()[j] = mj;
                pair.v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let theta = param.data()[j];
                param.data_mut()[j] = theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
            }
        };
        weights.visit_mut(&mut update);
        state.visit_mut(&mut update);
        debug_assert_eq!(idx, grads.len());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memvp::{MemVpConfig, PositionEmbeddings, Projector, ProjectorKind, TrainableMask};
    use crate::numkit::Activation;
    use crate::trainer::params::{param_metas, trainable_flags};
    use crate::transformer::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelWeights, MemVpState, AdamW, Vec<bool>) {
        let cfg = ModelConfig {
            d_model: 8,
            d_ffn: 16,
            n_layers: 1,
            n_heads: 2,
            vocab: 10,
            max_len: 6,
            activation: Activation::Gelu,
            ffn_kind: crate::transformer::config::FfnKind::Standard,
            attn_mask: crate::transformer::config::AttnMask::Causal,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights = ModelWeights::init_random(&cfg, &mut rng);
        let state = MemVpState {
            projector: Projector::init_random(
                ProjectorKind::OneFc,
                4,
                0,
                8,
                Activation::Gelu, 0.25, &mut rng,
            ),
            pos_embeddings: PositionEmbeddings::init_random(3, 8, 1, true, &mut rng),
            config: MemVpConfig::desk(3),
        };
        let metas = param_metas(&weights, &state);
        let shapes: Vec<(usize, usize)> = metas.iter().map(|m| (m.rows, m.cols)).collect();
        let opt = AdamW::new(1e-2, 0.9, 0.999, 1e-8, 0.0, &shapes);
        let flags = trainable_flags(&metas, &TrainableMask::default());
        (weights, state, opt, flags)
    }

    fn zero_grads(weights: &ModelWeights, state: &MemVpState) -> Vec<Matrix> {
        param_metas(weights, state)
            .iter()
            .map(|m| Matrix::zeros(m.rows, m.cols))
            .collect()
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameters_unchanged() {
        let (mut weights, mut state, mut opt, flags) = setup();
        let before = crate::trainer::params::collect_params(&weights, &state);
        let grads = zero_grads(&weights, &state);
        opt.step(&mut weights, &mut state, &grads, &flags).unwrap();
        let after = crate::trainer::params::collect_params(&weights, &state);
        assert_eq!(before, after);
    }

    #[test]
    fn frozen_backbone_is_byte_identical_after_many_steps() {
        let (mut weights, mut state, mut opt, flags) = setup();
        let backbone_before = weights.layers[0].wq.clone();
        let emb_before = weights.token_embedding.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let grads: Vec<Matrix> = param_metas(&weights, &state)
                .iter()
                .map(|m| Matrix::random_normal(m.rows, m.cols, 1.0, &mut rng))
                .collect();
            opt.step(&mut weights, &mut state, &grads, &flags).unwrap();
        }
        for (a, b) in weights.layers[0].wq.data().iter().zip(backbone_before.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in weights.token_embedding.data().iter().zip(emb_before.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // trainable parameters did move
        assert_ne!(weights.layers[0].attn_norm.gain.data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_rejects_step_without_mutation() {
        let (mut weights, mut state, mut opt, flags) = setup();
        let before = crate::trainer::params::collect_params(&weights, &state);
        let mut grads = zero_grads(&weights, &state);
        // poison a trainable (norm) gradient
        let metas = param_metas(&weights, &state);
        let idx = metas
            .iter()
            .position(|m| m.name == "final_norm.gain")
            .unwrap();
        let mut bad = Matrix::zeros(metas[idx].rows, metas[idx].cols);
        bad.data_mut()[0] = f64::NAN;
        grads[idx] = bad;
        let err = opt.step(&mut weights, &mut state, &grads, &flags).unwrap_err();
        assert!(err.to_string().contains("rejected"));
        assert_eq!(opt.step_count, 0);
        let after = crate::trainer::params::collect_params(&weights, &state);
        assert_eq!(before, after);
    }

    #[test]
    fn single_parameter_quadratic_converges() {
        // minimize (theta - 3)^2 with the tape providing the gradient
        use crate::numkit::Tape;
        let mut theta = Matrix::filled(1, 1, -2.0);
        let mut m = 0.0;
        let mut v = 0.0;
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut steps = 0;
        for t in 1..=5000 {
            let mut tape = Tape::new();
            let th = tape.leaf(theta.clone());
            let c = tape.leaf(Matrix::filled(1, 1, -3.0));
            let diff = tape.add(th, c).unwrap();
            let sq = tape.hadamard(diff, diff).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(th).unwrap().get(0, 0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            let cur = theta.get(0, 0);
            theta.set(0, 0, cur - lr * m_hat / (v_hat.sqrt() + eps));
            steps = t;
            if (theta.get(0, 0) - 3.0).abs() <= 1e-6 {
                break;
            }
        }
        assert!(
            (theta.get(0, 0) - 3.0).abs() <= 1e-6,
            "no convergence in {steps} steps: {}",
            theta.get(0, 0)
        );
        assert!(steps <= 5000);
    }
}
