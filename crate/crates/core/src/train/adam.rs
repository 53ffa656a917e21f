//! Bias-corrected Adam.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One update from the gradients held in `store`. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument("optimizer state does not match the parameters".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    state.step(store, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store();
        let before = s.clone();
        let mut st = AdamState::new(&s);
        st.step(&mut s, &TrainConfig::default()).unwrap();
        assert_eq!(st.t, 1);
        assert_eq!(s.iter().next().unwrap().value, before.iter().next().unwrap().value);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store();
        let id = s.find("w").unwrap();
        s.get_mut(id).grad = Tensor::from_vec(vec![3.0, -0.1, 1e-3]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &TrainConfig::default()).unwrap();
        let v = s.value(id).data();
        assert!((v[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((v[1] - (-2.0 + 1e-4)).abs() < 1e-10);
        assert!((v[2] - (0.5 - 1e-4)).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut s = store();
        let id = s.find("w").unwrap();
        s.get_mut(id).grad = Tensor::from_vec(vec![0.0, f64::NAN, 0.0]);
        let mut st = AdamState::new(&s);
        let err = st.step(&mut s, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(st.t, 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut s = store();
            let id = s.find("w").unwrap();
            let mut st = AdamState::new(&s);
            for k in 0..20 {
                let g: Vec<f64> = s.value(id).data().iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                s.get_mut(id).grad = Tensor::from_vec(g);
                st.step(&mut s, &TrainConfig::default()).unwrap();
            }
            s.value(id).clone()
        };
        assert_eq!(run(), run());
    }
}
