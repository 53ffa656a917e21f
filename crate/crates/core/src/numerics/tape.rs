//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and a closure
//! that maps the output gradient to gradients of its parents. Model blocks
//! with non-trivial adjoints (spline expansion, selective scan, graph
//! propagation, contrastive loss) register their own closures through
//! [`Tape::custom`].

use super::ops::{relu, silu, silu_grad_scalar, sigmoid, softplus};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// What a backward closure sees.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Whether each input needs a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Parameter leaves bound onto a tape, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar. Only leaf gradients survive the sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf tied to a stored parameter.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds every parameter of the store as a leaf.
    pub fn bind(&mut self, store: &ParamStore) -> ParamVars {
        let vars = store
            .ids()
            .map(|id| self.param(id, store.value(id).clone()))
            .collect();
        ParamVars { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an operation with a caller-supplied adjoint. The closure
    /// returns one optional gradient per parent, each shaped like that parent.
    pub fn custom<F>(&mut self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let parents = parents.iter().map(|v| v.0).collect();
        self.push(value, parents, Some(Box::new(backward)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "grad shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    // ----- primitive operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.custom(&[a, b], value, |ctx| {
            let ga = ctx.needs[0].then(|| matmul_nt(ctx.grad, ctx.inputs[1]));
            let gb = ctx.needs[1].then(|| matmul_tn(ctx.inputs[0], ctx.grad));
            vec![ga, gb]
        }))
    }

    /// `a · bᵀ`, for weights stored output-major.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let value = matmul_nt(av, bv);
        Ok(self.custom(&[a, b], value, |ctx| {
            let ga = ctx.needs[0].then(|| matmul(ctx.grad, ctx.inputs[1]).expect("shape"));
            let gb = ctx.needs[1].then(|| matmul_tn(ctx.grad, ctx.inputs[0]));
            vec![ga, gb]
        }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(&[a, b], value, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.custom(&[a, b], value, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.custom(&[a, b], value, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
            ]
        }))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.rank() != 2 || bv.len() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        let c = av.cols();
        for r in 0..av.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        Ok(self.custom(&[a, bias], value, move |ctx| {
            let gb = ctx.needs[1].then(|| {
                let mut acc = vec![0.0; c];
                for r in 0..ctx.grad.rows() {
                    for (s, g) in acc.iter_mut().zip(ctx.grad.row(r)) {
                        *s += g;
                    }
                }
                Tensor::new(ctx.inputs[1].shape().to_vec(), acc).expect("bias shape")
            });
            vec![Some(ctx.grad.clone()), gb]
        }))
    }

    /// Multiplies every row of an `r×c` matrix elementwise by a length-`c` vector.
    pub fn mul_row(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        if av.rank() != 2 || wv.len() != av.cols() {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * {:?}", av.shape(), wv.shape()),
            ));
        }
        let mut value = av.clone();
        for r in 0..av.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(wv.data()) {
                *x *= b;
            }
        }
        Ok(self.custom(&[a, w], value, |ctx| {
            let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let ga = ctx.needs[0].then(|| {
                let mut out = g.clone();
                for r in 0..out.rows() {
                    for (o, wv) in out.row_mut(r).iter_mut().zip(w.data()) {
                        *o *= wv;
                    }
                }
                out
            });
            let gw = ctx.needs[1].then(|| {
                let mut acc = vec![0.0; w.len()];
                for r in 0..g.rows() {
                    for ((s, gv), xv) in acc.iter_mut().zip(g.row(r)).zip(x.row(r)) {
                        *s += gv * xv;
                    }
                }
                Tensor::new(w.shape().to_vec(), acc).expect("weight shape")
            });
            vec![ga, gw]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.custom(&[a], value, move |ctx| vec![Some(ctx.grad.map(|g| g * factor))])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = silu(self.value(a));
        self.custom(&[a], value, |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * silu_grad_scalar(x)))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = relu(self.value(a));
        self.custom(&[a], value, |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = softplus(self.value(a));
        self.custom(&[a], value, |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * sigmoid(x)))]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.custom(&[a], value, |ctx| vec![Some(ctx.grad.transpose())])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(&[a], value, |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares());
        self.custom(&[a], value, |ctx| {
            let g = ctx.grad.item();
            vec![Some(ctx.inputs[0].map(|x| 2.0 * g * x))]
        })
    }

    /// Gathers rows of a matrix.
    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select_rows(&rows);
        self.custom(&[a], value, move |ctx| {
            let mut out = Tensor::zeros(ctx.inputs[0].shape().to_vec());
            for (k, &r) in rows.iter().enumerate() {
                for (o, g) in out.row_mut(r).iter_mut().zip(ctx.grad.row(k)) {
                    *o += g;
                }
            }
            vec![Some(out)]
        })
    }

    /// Weighted sum of scalars.
    pub fn linear_combination(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        for &(_, v) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("linear_combination", "terms must be scalars"));
            }
        }
        let total = terms
            .iter()
            .fold(0.0, |acc, &(w, v)| acc + w * self.value(v).item());
        let weights: Vec<f64> = terms.iter().map(|&(w, _)| w).collect();
        let vars: Vec<Var> = terms.iter().map(|&(_, v)| v).collect();
        Ok(self.custom(&vars, Tensor::scalar(total), move |ctx| {
            let g = ctx.grad.item();
            weights
                .iter()
                .zip(&ctx.inputs)
                .map(|(w, x)| Some(Tensor::full(x.shape().to_vec(), w * g)))
                .collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_two_x() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![3.0]));
        let mut tape = Tape::new();
        let vars = tape.bind(&store);
        let y = tape.mul(vars[id], vars[id]).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(vars[id]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert!(grads.of(c).is_none());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(c).is_err());
    }
}
