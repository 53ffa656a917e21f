//! Central finite-difference check of tape gradients.

use super::params::ParamStore;
use super::tape::{ParamVars, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of |analytic − fd| / max(1, |fd|)
    pub max_rel_error: f64,
    /// parameter name and flat index of the worst entry
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of `f` against central differences for every
/// scalar entry of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    grad_check_sampled(store, eps, usize::MAX, f)
}

/// Like [`grad_check`] but checks at most `max_per_param` evenly strided
/// entries of each parameter.
pub fn grad_check_sampled<F>(
    store: &ParamStore,
    eps: f64,
    max_per_param: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::new();
        let vars = tape.bind(store);
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        tape.backward(loss)?.accumulate_into(&mut analytic);
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind(s);
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_param.min(n).max(1));
        for idx in (0..n).step_by(stride.max(1)) {
            let orig = store.value(id).data()[idx];
            probe.value_mut(id).data_mut()[idx] = orig + eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[idx] = orig - eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic.get(id).grad.data()[idx];
            let rel = (an - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![3.0]));
        let r = grad_check(&store, 1e-5, |t, v| {
            let id = crate::numerics::ParamId(0);
            let sq = t.mul(v[id], v[id])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![1.0, -2.0]));
        let r = grad_check(&store, 1e-5, |t, _| Ok(t.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn rejects_non_finite_objective() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![1.0]));
        let r = grad_check(&store, 1e-5, |t, _| Ok(t.constant(Tensor::scalar(f64::NAN))));
        assert!(r.is_err());
    }

    #[test]
    fn rejects_bad_step() {
        let store = ParamStore::new();
        assert!(grad_check(&store, 0.1, |t, _| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
    }
}
