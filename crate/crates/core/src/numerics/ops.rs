//! Elementwise nonlinearities and small reductions.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of `x·σ(x)`.
#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise `x·σ(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Numerically stable softmax of a vector (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total = exps.iter().fold(0.0, |a, &b| a + b);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log Σ exp(v)` computed with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().fold(0.0, |a, &x| a + (x - max).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn silu_fixtures() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(50.0) - 50.0).abs() < 1e-12);
        assert!((silu_scalar(1.0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn silu_global_minimum_bound() {
        let mut x = -20.0;
        while x < 20.0 {
            assert!(silu_scalar(x) >= -0.2785, "x={x}");
            x += 1e-3;
        }
    }

    #[test]
    fn silu_monotone_on_nonnegative() {
        let mut prev = silu_scalar(0.0);
        for i in 1..20_000 {
            let v = silu_scalar(i as f64 * 1e-3);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn softmax_fixtures() {
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let u = softmax(&[2.0; 5]).unwrap();
        assert!(u.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_scalar(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus_scalar(-800.0) >= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn softmax_is_probability_vector(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..8), c in -30.0f64..30.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softplus_positive(x in -700.0f64..700.0) {
            prop_assert!(softplus_scalar(x) > 0.0);
        }
    }
}
