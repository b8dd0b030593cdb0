use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// GELU tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
pub const GELU_C: f64 = 0.7978845608;
pub const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative, used by the reverse pass.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise activation; non-finite inputs are rejected.
pub fn activation(kind: Activation, x: &Matrix) -> Result<Matrix> {
    if !x.is_finite() {
        return Err(Error::NonFinite("activation input".into()));
    }
    let data = x.data().iter().map(|&v| kind.apply_scalar(v)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Row-wise softmax with max-subtraction stabilization.
/// Each output row sums to 1 within 1e-12 and entries lie in [0, 1].
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_row_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_activations_vanish_at_zero() {
        for kind in [Activation::Relu, Activation::Gelu, Activation::Silu] {
            assert_eq!(kind.apply_scalar(0.0), 0.0);
        }
    }

    #[test]
    fn silu_at_one_matches_closed_form() {
        // silu(1) = 1 / (1 + e^-1)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Activation::Silu.apply_scalar(1.0) - expected).abs() < 1e-15);
        assert!((expected - 0.7310585786).abs() < 1e-10);
    }

    #[test]
    fn relu_clamps_negative() {
        assert_eq!(Activation::Relu.apply_scalar(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply_scalar(3.0), 3.0);
    }

    #[test]
    fn activation_rejects_non_finite() {
        let mut m = Matrix::zeros(1, 2);
        m.data_mut()[0] = f64::INFINITY;
        // bypass the constructor check to exercise the activation guard
        assert!(activation(Activation::Relu, &m).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&m);
        for i in 0..2 {
            assert!((s.get(i, 0) - 0.5).abs() < 1e-12);
            assert!((s.get(i, 1) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap();
        let s = softmax_rows(&m);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::random_normal(6, 9, 3.0, &mut rng);
        let s = softmax_rows(&m);
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(s.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        // h chosen for the usual truncation/cancellation balance
        let h = 1e-6;
        for kind in [Activation::Relu, Activation::Gelu, Activation::Silu] {
            for i in 0..20 {
                let x = -3.0 + 0.31 * i as f64; // avoids the relu kink at 0
                let fd = (kind.apply_scalar(x + h) - kind.apply_scalar(x - h)) / (2.0 * h);
                let analytic = kind.derivative(x);
                assert!(
                    (analytic - fd).abs() / fd.abs().max(1.0) < 1e-5,
                    "{kind:?} at {x}: {analytic} vs {fd}"
                );
            }
        }
    }
}
