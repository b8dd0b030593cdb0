//! Minimal 32-bit kernels for the cost/profile path and precision studies.
//!
//! The rest of the crate computes in f64; these exist so counted forward
//! runs can optionally execute in single precision (counts are identical)
//! and so the wider-tolerance 32-bit equivalence properties can be checked.

use crate::numkit::activation::{GELU_A, GELU_C};
use crate::numkit::Activation;

/// `out[i][j] += sum_k a[i][k] * b[k][j]`, k ascending, all f32.
pub fn matmul_f32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k_dim: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k_dim..(i + 1) * k_dim];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

pub fn activation_f32(kind: Activation, x: f32) -> f32 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let u = GELU_C as f32 * (x + GELU_A as f32 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

pub fn demote(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_matmul_matches_f64_within_single_precision() {
        let a = [1.25f64, -0.5, 2.0, 0.75, 1.5, -2.25];
        let b = [0.5f64, 1.0, -1.5, 2.0, 0.25, -0.75];
        let mut out64 = [0.0f64; 4];
        crate::numkit::matrix::matmul_into(&a, &b, &mut out64, 2, 3, 2);
        let mut out32 = [0.0f32; 4];
        matmul_f32(&demote(&a), &demote(&b), &mut out32, 2, 3, 2);
        for (x, y) in out32.iter().zip(out64.iter()) {
            assert!((*x as f64 - y).abs() < 1e-5);
        }
    }
}
