//! Risk-level weighted prediction loss and the joint objective.

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Bucket of a raw (denormalized) risk value: 0, 1, 2 or 3 for anything ≥ 3.
pub fn risk_level_of(x: f64) -> Result<usize> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::InvalidArgument(format!("risk {x} must be non-negative")));
    }
    Ok((x.floor() as usize).min(3))
}

/// Per-entry λ looked up from raw ground-truth risk.
pub fn level_weights(raw: &[f64], weights: &[f64; 4]) -> Result<Vec<f64>> {
    raw.iter().map(|&x| Ok(weights[risk_level_of(x)?])).collect()
}

/// `½ Σ λ_{level(x)} (x − x̂)²` with levels taken from `x` itself.
pub fn weighted_prediction_loss(x: &[f64], x_hat: &[f64], weights: &[f64; 4]) -> Result<f64> {
    let lambda = level_weights(x, weights)?;
    weighted_sq_error(x, x_hat, &lambda)
}

/// `½ Σ λ_i (x_i − x̂_i)²`.
pub fn weighted_sq_error(x: &[f64], x_hat: &[f64], lambda: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() || x.len() != lambda.len() {
        return Err(Error::shape(
            "weighted_prediction_loss",
            format!("{} targets, {} predictions, {} weights", x.len(), x_hat.len(), lambda.len()),
        ));
    }
    Ok(0.5
        * x.iter()
            .zip(x_hat)
            .zip(lambda)
            .fold(0.0, |acc, ((a, b), l)| acc + l * (a - b) * (a - b)))
}

/// Tape form: `pred` is any tensor with as many entries as `target`.
pub fn weighted_loss_op(tape: &mut Tape, pred: Var, target: &[f64], lambda: Vec<f64>) -> Result<Var> {
    let p = tape.value(pred);
    let value = weighted_sq_error(target, p.data(), &lambda)?;
    let target = target.to_vec();
    Ok(tape.custom(&[pred], Tensor::scalar(value), move |ctx| {
        let g = ctx.grad.item();
        let mut out = ctx.inputs[0].clone();
        for ((o, t), l) in out.data_mut().iter_mut().zip(&target).zip(&lambda) {
            *o = g * l * (*o - t);
        }
        vec![Some(out)]
    }))
}

/// Individual loss terms of one step or epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub prediction: f64,
    pub reconstruction: f64,
    pub kmeans: f64,
    pub temporal: f64,
}

impl LossComponents {
    /// `L_rec + λ4 · L_km`.
    pub fn spatial(&self, w: &LossWeights) -> f64 {
        self.reconstruction + w.kmeans * self.kmeans
    }
}

/// `λ1 L_p + λ2 (L_rec + λ4 L_km) + λ3 L_t`.
pub fn joint_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.prediction * c.prediction + w.spatial * c.spatial(w) + w.temporal * c.temporal
}
