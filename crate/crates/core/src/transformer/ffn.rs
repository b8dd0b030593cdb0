//! The FFN in both of its algebraically equivalent readings: the matrix
//! form phi(x W1) W2 and the per-entry key-value sum. The sum form walks
//! the weights entry by entry and serves as the oracle for the matrix form.

use crate::count::{record, Component, MacCounter};
use crate::error::{Error, Result};
use crate::numkit::{activation, Activation, Matrix};
use crate::transformer::config::FfnKind;
use crate::transformer::weights::LayerWeights;

/// Matrix-form FFN: standard phi(x W1) W2, or (SiLU(x W1) * x W3) W2 for GLU.
pub fn ffn_forward(
    w: &LayerWeights,
    act: Activation,
    kind: FfnKind,
    x: &Matrix,
    mut macs: Option<&mut MacCounter>,
) -> Result<Matrix> {
    check_shapes(w, kind, x)?;
    let (seq, d, dff) = (x.rows(), x.cols(), w.w1.cols());
    let pre = x.matmul(&w.w1)?;
    record(&mut macs, Component::Ffn, seq, d, dff);
    let hidden = match kind {
        FfnKind::Standard => activation(act, &pre)?,
        FfnKind::Glu => {
            let gate = x.matmul(w.w3.as_ref().expect("validated"))?;
            record(&mut macs, Component::Ffn, seq, d, dff);
            activation(Activation::Silu, &pre)?.hadamard(&gate)?
        }
    };
    let out = hidden.matmul(&w.w2)?;
    record(&mut macs, Component::Ffn, seq, dff, d);
    Ok(out)
}

/// Key-value sum form: accumulates phi(<x, k_i>) * v_i entry by entry
/// (with the extra <x, g_i> gate for GLU).
pub fn ffn_kv_form(w: &LayerWeights, act: Activation, kind: FfnKind, x: &Matrix) -> Result<Matrix> {
    check_shapes(w, kind, x)?;
    let (seq, d, dff) = (x.rows(), x.cols(), w.w1.cols());
    let mut out = Matrix::zeros(seq, d);
    for t in 0..seq {
        let xt = x.row(t);
        for i in 0..dff {
            let mut key_dot = 0.0;
            for k in 0..d {
                key_dot += xt[k] * w.w1.get(k, i);
            }
            let strength = match kind {
                FfnKind::Standard => act.apply_scalar(key_dot),
                FfnKind::Glu => {
                    let w3 = w.w3.as_ref().expect("validated");
                    let mut gate_dot = 0.0;
                    for k in 0..d {
                        gate_dot += xt[k] * w3.get(k, i);
                    }
                    Activation::Silu.apply_scalar(key_dot) * gate_dot
                }
            };
            let value = w.w2.row(i);
            for (o, &v) in out.row_mut(t).iter_mut().zip(value) {
                *o += strength * v;
            }
        }
    }
    Ok(out)
}

fn check_shapes(w: &LayerWeights, kind: FfnKind, x: &Matrix) -> Result<()> {
    if x.cols() != w.w1.rows() {
        return Err(Error::shape(format!(
            "ffn: input {}x{} vs w1 {}x{}",
            x.rows(),
            x.cols(),
            w.w1.rows(),
            w.w1.cols()
        )));
    }
    if w.w2.rows() != w.w1.cols() || w.w2.cols() != w.w1.rows() {
        return Err(Error::shape("ffn: w2 does not mirror w1"));
    }
    if kind == FfnKind::Glu && w.w3.is_none() {
        return Err(Error::shape("glu ffn requires w3"));
    }
    Ok(())
}

/// Builds a minimal layer holding only FFN weights, for tests and oracles.
pub fn ffn_only_layer(w1: Matrix, w2: Matrix, w3: Option<Matrix>) -> LayerWeights {
    let d = w1.rows();
    LayerWeights {
        wq: Matrix::identity(d),
        wk: Matrix::identity(d),
        wv: Matrix::identity(d),
        wo: Matrix::identity(d),
        w1,
        w2,
        w3,
        attn_norm: crate::transformer::weights::NormParams::unit(d),
        ffn_norm: crate::transformer::weights::NormParams::unit(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rel_frobenius;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_entry_hand_example() {
        // d=2, D=1, relu, key (1,0), value (0,1), x (2,3):
        // <x, k> = 2, relu -> 2, output 2 * (0,1) = (0,2)
        let w = ffn_only_layer(
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            None,
        );
        let x = Matrix::row_vec(&[2.0, 3.0]).unwrap();
        let out = ffn_forward(&w, Activation::Relu, FfnKind::Standard, &x, None).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
        let kv = ffn_kv_form(&w, Activation::Relu, FfnKind::Standard, &x).unwrap();
        assert_eq!(kv.data(), &[0.0, 2.0]);
    }

    #[test]
    fn zero_input_gives_zero_output_for_all_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ffn_only_layer(
            Matrix::random_normal(3, 6, 1.0, &mut rng),
            Matrix::random_normal(6, 3, 1.0, &mut rng),
            None,
        );
        let x = Matrix::zeros(2, 3);
        for act in [Activation::Relu, Activation::Gelu, Activation::Silu] {
            let out = ffn_forward(&w, act, FfnKind::Standard, &x, None).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn glu_hand_example() {
        // d=2, D=1, key (1,0), gate (0,1), value (1,1), x (1,2):
        // SiLU(1) * 2 * (1,1)
        let w = ffn_only_layer(
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Some(Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap()),
        );
        let x = Matrix::row_vec(&[1.0, 2.0]).unwrap();
        let out = ffn_forward(&w, Activation::Silu, FfnKind::Glu, &x, None).unwrap();
        let expected = Activation::Silu.apply_scalar(1.0) * 2.0;
        assert!((out.get(0, 0) - expected).abs() < 1e-12);
        assert!((out.get(0, 1) - expected).abs() < 1e-12);
        assert!((expected - 1.4621171572600098).abs() < 1e-12);
    }

    #[test]
    fn matrix_and_kv_forms_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for case in 0..100 {
            let glu = case % 2 == 1;
            let (d, dff, seq) = (4, 8, 3);
            let w = ffn_only_layer(
                Matrix::random_normal(d, dff, 1.0, &mut rng),
                Matrix::random_normal(dff, d, 1.0, &mut rng),
                glu.then(|| Matrix::random_normal(d, dff, 1.0, &mut rng)),
            );
            let x = Matrix::random_normal(seq, d, 1.0, &mut rng);
            let (act, kind) = if glu {
                (Activation::Silu, FfnKind::Glu)
            } else {
                (Activation::Gelu, FfnKind::Standard)
            };
            let a = ffn_forward(&w, act, kind, &x, None).unwrap();
            let b = ffn_kv_form(&w, act, kind, &x).unwrap();
            assert!(rel_frobenius(&a, &b) <= 1e-12);
        }
    }

    #[test]
    fn single_entry_is_rank_one_retrieval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = ffn_only_layer(
            Matrix::random_normal(3, 1, 1.0, &mut rng),
            Matrix::random_normal(1, 3, 1.0, &mut rng),
            None,
        );
        let x = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let out = ffn_kv_form(&w, Activation::Relu, FfnKind::Standard, &x).unwrap();
        let dot: f64 = (0..3).map(|k| x.get(0, k) * w.w1.get(k, 0)).sum();
        let strength = Activation::Relu.apply_scalar(dot);
        for j in 0..3 {
            assert!((out.get(0, j) - strength * w.w2.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn counted_macs_match_ffn_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, dff, seq) = (6, 24, 5);
        let w = ffn_only_layer(
            Matrix::random_normal(d, dff, 1.0, &mut rng),
            Matrix::random_normal(dff, d, 1.0, &mut rng),
            None,
        );
        let x = Matrix::random_normal(seq, d, 1.0, &mut rng);
        let mut ctr = MacCounter::new();
        ffn_forward(&w, Activation::Relu, FfnKind::Standard, &x, Some(&mut ctr)).unwrap();
        assert_eq!(ctr.get(Component::Ffn), 2 * (seq * d * dff) as u64);
    }
}
