//! Per-region risk head: `D → D/2 → 1` with a SiLU hidden layer.

use crate::error::{Error, Result};
use crate::numerics::{matmul, ops, ParamId, ParamStore, ParamVars, SplitMix64, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct PredictHead {
    /// `D × H`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `H × 1`
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
    pub hidden: usize,
}

impl PredictHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut SplitMix64) -> Self {
        let hidden = (d_model / 2).max(1);
        let a1 = (6.0 / (d_model + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w1 = store.add(
            format!("{prefix}.w1"),
            Tensor::from_fn([d_model, hidden], || rng.uniform(-a1, a1)),
        );
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros([hidden]));
        let w2 = store.add(format!("{prefix}.w2"), Tensor::from_fn([hidden, 1], || rng.uniform(-a2, a2)));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros([1]));
        Self {
            w1,
            b1,
            w2,
            b2,
            d_model,
            hidden,
        }
    }

    /// `N × D` embeddings to an `N × 1` column of scores.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, m: Var) -> Result<Var> {
        let h = tape.matmul(m, vars[self.w1])?;
        let h = tape.add_row(h, vars[self.b1])?;
        let h = tape.silu(h);
        let y = tape.matmul(h, vars[self.w2])?;
        tape.add_row(y, vars[self.b2])
    }

    pub fn apply(&self, store: &ParamStore, m: &Tensor) -> Result<Vec<f64>> {
        predict_column(
            m,
            store.value(self.w1),
            store.value(self.b1),
            store.value(self.w2),
            store.value(self.b2),
        )
    }
}

fn predict_column(m: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Vec<f64>> {
    if m.rank() != 2 || m.cols() != w1.rows() {
        return Err(Error::shape("predict_head", format!("M {:?} vs W1 {:?}", m.shape(), w1.shape())));
    }
    let mut h = matmul(m, w1)?;
    for r in 0..h.rows() {
        for (v, b) in h.row_mut(r).iter_mut().zip(b1.data()) {
            *v = ops::silu_scalar(*v + b);
        }
    }
    let y = matmul(&h, w2)?;
    Ok(y.data().iter().map(|v| v + b2.item()).collect())
}

/// Region scores reshaped to the `rows × cols` grid.
pub fn predict_head(m: &Tensor, head: &PredictHead, store: &ParamStore, rows: usize, cols: usize) -> Result<Tensor> {
    let y = head.apply(store, m)?;
    if y.len() != rows * cols {
        return Err(Error::shape("predict_head", format!("{} regions for a {rows}×{cols} grid", y.len())));
    }
    Tensor::new([rows, cols], y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_map() {
        let mut store = ParamStore::new();
        let head = PredictHead::new(&mut store, "head", 4, &mut SplitMix64::new(1));
        store.zero_values();
        let m = Tensor::from_fn([6, 4], || 1.5);
        let map = predict_head(&m, &head, &store, 2, 3).unwrap();
        assert_eq!(map.shape(), &[2, 3]);
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_region_hand_forward() {
        // D = 2, H = 1: h = silu(1·1 + 2·(−1) + 1) = silu(0) = 0; y = 3·0 + 0.5
        // then with b1 = 2: h = silu(2) = 2σ(2)
        let y = predict_column(
            &Tensor::from_rows(&[&[1.0, 2.0]]),
            &Tensor::from_rows(&[&[1.0], &[-1.0]]),
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_rows(&[&[3.0]]),
            &Tensor::from_vec(vec![0.5]),
        )
        .unwrap();
        assert_eq!(y, vec![0.5]);
        let y = predict_column(
            &Tensor::from_rows(&[&[1.0, 2.0]]),
            &Tensor::from_rows(&[&[1.0], &[-1.0]]),
            &Tensor::from_vec(vec![2.0]),
            &Tensor::from_rows(&[&[3.0]]),
            &Tensor::from_vec(vec![0.5]),
        )
        .unwrap();
        let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y[0] - (3.0 * silu1 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn tape_matches_apply() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        let head = PredictHead::new(&mut store, "head", 6, &mut rng);
        let m = Tensor::from_fn([5, 6], || rng.normal());
        let mut tape = Tape::new();
        let vars = tape.bind(&store);
        let mv = tape.constant(m.clone());
        let out = head.forward(&mut tape, &vars, mv).unwrap();
        let direct = head.apply(&store, &m).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
