//! Efficient Kolmogorov-Arnold layers.
//!
//! Each input is expanded once into its `K` B-spline basis values, and the
//! expansion is shared by every output unit:
//!
//! `Φ(x) = W_base · silu(x) + W_spline · e(x) + b`
//!
//! where `e(x)` concatenates the per-input bases, so column `i·K + k` of
//! `W_spline` weights basis `k` of input `i`. A per-edge KAN computes the same
//! function by evaluating a separate univariate spline on every edge; see
//! [`crate::bench::naive_kan_forward`].

use crate::error::{Error, Result};
use crate::numerics::{ops, ParamId, ParamStore, ParamVars, SplitMix64, Tape, Tensor, Var};

/// Uniform knot vector over `[-1, 1]`, extended by `degree` knots on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    degree: usize,
    num_basis: usize,
    knots: Vec<f64>,
}

pub const DOMAIN: (f64, f64) = (-1.0, 1.0);

impl SplineGrid {
    pub fn new(degree: usize, num_basis: usize) -> Result<Self> {
        if num_basis < degree + 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least degree + 1 = {} basis functions, got {num_basis}",
                degree + 1
            )));
        }
        let intervals = num_basis - degree;
        let h = (DOMAIN.1 - DOMAIN.0) / intervals as f64;
        let knots = (0..=num_basis + degree)
            .map(|j| DOMAIN.0 + (j as f64 - degree as f64) * h)
            .collect();
        Ok(Self {
            degree,
            num_basis,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot span `j` with `t_j ≤ x < t_{j+1}`, restricted to the domain spans
    /// so that `x = 1` falls in the last one.
    fn span(&self, x: f64) -> usize {
        let (p, k) = (self.degree, self.num_basis);
        let h = self.knots[p + 1] - self.knots[p];
        let mut j = p + ((x - DOMAIN.0) / h).floor().max(0.0) as usize;
        j = j.min(k - 1);
        while j > p && x < self.knots[j] {
            j -= 1;
        }
        while j < k - 1 && x >= self.knots[j + 1] {
            j += 1;
        }
        j
    }

    /// Writes the `K` basis values at `x` into `out` and, when given, their
    /// derivatives into `dout`. Inputs outside the domain are clamped and get
    /// zero derivative.
    pub fn eval_into(&self, x: f64, out: &mut [f64], dout: Option<&mut [f64]>) {
        debug_assert_eq!(out.len(), self.num_basis);
        let p = self.degree;
        let clamped = x.clamp(DOMAIN.0, DOMAIN.1);
        let inside = clamped == x;
        let j = self.span(clamped);
        let t = &self.knots;

        // de Boor's triangular scheme; `lower` keeps the degree p-1 values
        let mut n = vec![0.0; p + 1];
        let mut lower = Vec::new();
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for r in 1..=p {
            if r == p {
                lower = n[..p].to_vec();
            }
            left[r] = clamped - t[j + 1 - r];
            right[r] = t[j + r] - clamped;
            let mut saved = 0.0;
            for s in 0..r {
                let temp = n[s] / (right[s + 1] + left[r - s]);
                n[s] = saved + right[s + 1] * temp;
                saved = left[r - s] * temp;
            }
            n[r] = saved;
        }

        out.fill(0.0);
        let first = j - p;
        out[first..=j].copy_from_slice(&n);

        if let Some(dout) = dout {
            dout.fill(0.0);
            if p == 0 || !inside {
                return;
            }
            let pf = p as f64;
            for a in 0..=p {
                let i = first + a;
                let mut d = 0.0;
                if a >= 1 {
                    d += pf / (t[i + p] - t[i]) * lower[a - 1];
                }
                if a < p {
                    d -= pf / (t[i + p + 1] - t[i + 1]) * lower[a];
                }
                dout[i] = d;
            }
        }
    }

    /// The `K` basis values at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis];
        self.eval_into(x, &mut out, None);
        out
    }
}

/// Free-function form of [`SplineGrid::basis`].
pub fn bspline_basis(x: f64, grid: &SplineGrid) -> Vec<f64> {
    grid.basis(x)
}

/// Expands `rows × d_in` into `rows × (d_in·K)` basis values, plus derivatives.
pub fn expand(x: &Tensor, grid: &SplineGrid) -> (Tensor, Tensor) {
    let (rows, d_in) = (x.rows(), x.cols());
    let k = grid.num_basis();
    let mut vals = vec![0.0; rows * d_in * k];
    let mut ders = vec![0.0; rows * d_in * k];
    for (idx, &v) in x.data().iter().enumerate() {
        let at = idx * k..(idx + 1) * k;
        grid.eval_into(v, &mut vals[at.clone()], Some(&mut ders[at]));
    }
    let shape = [rows, d_in * k];
    (
        Tensor::new(shape, vals).expect("expansion shape"),
        Tensor::new(shape, ders).expect("expansion shape"),
    )
}

/// Basis expansion as a differentiable tape operation.
pub fn expand_op(tape: &mut Tape, x: Var, grid: &SplineGrid) -> Var {
    let (vals, ders) = expand(tape.value(x), grid);
    let k = grid.num_basis();
    tape.custom(&[x], vals, move |ctx| {
        let x = ctx.inputs[0];
        let mut gx = Tensor::zeros(x.shape().to_vec());
        for (idx, g) in gx.data_mut().iter_mut().enumerate() {
            let at = idx * k..(idx + 1) * k;
            *g = ctx.grad.data()[at.clone()]
                .iter()
                .zip(&ders.data()[at])
                .fold(0.0, |acc, (a, b)| acc + a * b);
        }
        vec![Some(gx)]
    })
}

/// Parameter handles of one layer. `w_base` is `d_out×d_in`, `w_spline` is
/// `d_out×(d_in·K)`, `bias` has `d_out` entries.
#[derive(Debug, Clone)]
pub struct EkanLayer {
    pub w_base: ParamId,
    pub w_spline: ParamId,
    pub bias: ParamId,
    pub grid: SplineGrid,
    pub d_in: usize,
    pub d_out: usize,
}

impl EkanLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        grid: SplineGrid,
        rng: &mut SplitMix64,
    ) -> Self {
        let k = grid.num_basis();
        let a = 1.0 / (d_in as f64).sqrt();
        let base = (0..d_out * d_in).map(|_| rng.uniform(-a, a)).collect();
        let spline = (0..d_out * d_in * k)
            .map(|_| 0.5 * a * rng.normal())
            .collect();
        let w_base = store.add(
            format!("{prefix}.w_base"),
            Tensor::new([d_out, d_in], base).expect("shape"),
        );
        let w_spline = store.add(
            format!("{prefix}.w_spline"),
            Tensor::new([d_out, d_in * k], spline).expect("shape"),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([d_out]));
        Self {
            w_base,
            w_spline,
            bias,
            grid,
            d_in,
            d_out,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.d_in {
            return Err(Error::shape(
                "ekan_layer_forward",
                format!("input {:?}, layer expects {} features", x.shape(), self.d_in),
            ));
        }
        Ok(())
    }

    /// Differentiable forward on a tape.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let act = tape.silu(x);
        let base = tape.matmul_t(act, vars[self.w_base])?;
        let e = expand_op(tape, x, &self.grid);
        let spline = tape.matmul_t(e, vars[self.w_spline])?;
        let sum = tape.add(base, spline)?;
        tape.add_row(sum, vars[self.bias])
    }

    /// Plain evaluation without recording gradients.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ekan_layer_forward(
            x,
            store.value(self.w_base),
            store.value(self.w_spline),
            store.value(self.bias),
            &self.grid,
        )
    }
}

/// `W_base·silu(x) + W_spline·e(x) + b` for a batch `x` of shape `batch×d_in`.
pub fn ekan_layer_forward(
    x: &Tensor,
    w_base: &Tensor,
    w_spline: &Tensor,
    bias: &Tensor,
    grid: &SplineGrid,
) -> Result<Tensor> {
    let (d_out, d_in) = (w_base.rows(), w_base.cols());
    let k = grid.num_basis();
    if x.rank() != 2
        || x.cols() != d_in
        || w_spline.shape() != [d_out, d_in * k]
        || bias.len() != d_out
    {
        return Err(Error::shape(
            "ekan_layer_forward",
            format!(
                "x {:?}, w_base {:?}, w_spline {:?}, bias {:?}",
                x.shape(),
                w_base.shape(),
                w_spline.shape(),
                bias.shape()
            ),
        ));
    }
    let (e, _) = expand(x, grid);
    let mut y = crate::numerics::matmul_nt(&ops::silu(x), w_base);
    let spline = crate::numerics::matmul_nt(&e, w_spline);
    y.add_assign(&spline);
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Layers `Φ_0 … Φ_L` applied in order.
#[derive(Debug, Clone)]
pub struct EkanStack {
    layers: Vec<EkanLayer>,
}

impl EkanStack {
    /// Builds layers for the width chain `dims[0] → dims[1] → …`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        grid: &SplineGrid,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an eKAN stack needs at least an input and an output width".into(),
            ));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| EkanLayer::new(store, &format!("{prefix}.l{l}"), w[0], w[1], grid.clone(), rng))
            .collect();
        Ok(Self { layers })
    }

    /// Wraps existing layers, checking that widths chain.
    pub fn from_layers(layers: Vec<EkanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("empty eKAN stack".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out != pair[1].d_in {
                return Err(Error::shape(
                    "EkanStack",
                    format!(
                        "layer {l} outputs {} but layer {} expects {}",
                        pair[0].d_out,
                        l + 1,
                        pair[1].d_in
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[EkanLayer] {
        &self.layers
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, vars, x)?;
        }
        Ok(x)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ekan_forward(x, self, store)
    }
}

/// Sequential composition of the stack's layers.
pub fn ekan_forward(x: &Tensor, stack: &EkanStack, store: &ParamStore) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in stack.layers() {
        h = layer.apply(store, &h)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    /// Textbook Cox–de Boor recursion, kept independent of `eval_into`.
    fn cox_de_boor(i: usize, p: usize, x: f64, t: &[f64]) -> f64 {
        if p == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(i, p - 1, x, t);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + p + 1] - x) / d2 * cox_de_boor(i + 1, p - 1, x, t);
        }
        v
    }

    #[test]
    fn degree_zero_indicators() {
        let g = SplineGrid::new(0, 2).unwrap();
        assert_eq!(g.knots(), &[-1.0, 0.0, 1.0]);
        assert_eq!(g.basis(-0.5), vec![1.0, 0.0]);
        assert_eq!(g.basis(0.5), vec![0.0, 1.0]);
        assert_eq!(g.basis(1.0), vec![0.0, 1.0]);
    }

    #[test]
    fn cubic_value_at_central_knot() {
        let g = SplineGrid::new(3, 8).unwrap();
        // basis 3 has support [t3, t7] inside the domain, centred on t5
        let center = g.knots()[5];
        let b = g.basis(center);
        assert!((b[3] - 2.0 / 3.0).abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn matches_recursive_oracle() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut rng = SplitMix64::new(5);
        for _ in 0..500 {
            let x = rng.uniform(-1.0, 0.999_999);
            let b = g.basis(x);
            for (i, &v) in b.iter().enumerate() {
                let o = cox_de_boor(i, 3, x, g.knots());
                assert!((v - o).abs() < 1e-12, "x={x} i={i}");
            }
        }
    }

    #[test]
    fn partition_of_unity_and_nonnegative() {
        for (p, k) in [(0, 2), (1, 4), (2, 5), (3, 8), (3, 12)] {
            let g = SplineGrid::new(p, k).unwrap();
            let mut x = -1.5;
            while x <= 1.5 {
                let b = g.basis(x);
                assert!(b.iter().all(|&v| v >= 0.0));
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-10, "p={p} x={x}");
                x += 0.0137;
            }
            assert!((g.basis(1.0).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut d = vec![0.0; 8];
        let mut v = vec![0.0; 8];
        for &x in &[-0.9, -0.31, 0.0, 0.2, 0.77] {
            g.eval_into(x, &mut v, Some(&mut d));
            let h = 1e-6;
            let (bp, bm) = (g.basis(x + h), g.basis(x - h));
            for k in 0..8 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - d[k]).abs() < 1e-6, "x={x} k={k}");
            }
        }
    }

    #[test]
    fn rejects_too_few_basis() {
        assert!(SplineGrid::new(3, 3).is_err());
    }

    fn layer_with(
        w_base: Tensor,
        w_spline: Tensor,
        bias: Tensor,
        grid: SplineGrid,
    ) -> (ParamStore, EkanLayer) {
        let mut store = ParamStore::new();
        let d_out = w_base.rows();
        let d_in = w_base.cols();
        let layer = EkanLayer {
            w_base: store.add("w_base", w_base),
            w_spline: store.add("w_spline", w_spline),
            bias: store.add("bias", bias),
            grid,
            d_in,
            d_out,
        };
        (store, layer)
    }

    #[test]
    fn spline_branch_off_gives_silu() {
        let g = SplineGrid::new(3, 8).unwrap();
        let (store, layer) = layer_with(
            Tensor::eye(3),
            Tensor::zeros([3, 24]),
            Tensor::zeros([3]),
            g,
        );
        let x = Tensor::from_rows(&[&[0.3, -0.7, 2.0], &[1.0, 0.0, -3.0]]);
        let y = layer.apply(&store, &x).unwrap();
        assert_eq!(y, ops::silu(&x));
    }

    #[test]
    fn zero_input_uses_spline_only() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut rng = SplitMix64::new(1);
        let mut store = ParamStore::new();
        let layer = EkanLayer::new(&mut store, "l", 2, 3, g.clone(), &mut rng);
        let x = Tensor::zeros([1, 2]);
        let y = layer.apply(&store, &x).unwrap();
        let (e, _) = expand(&x, &g);
        let want = crate::numerics::matmul_nt(&e, store.value(layer.w_spline));
        assert!(y.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn degree_zero_hand_fixture() {
        let g = SplineGrid::new(0, 2).unwrap();
        let (store, layer) = layer_with(
            Tensor::zeros([1, 1]),
            Tensor::from_rows(&[&[2.0, 5.0]]),
            Tensor::from_vec(vec![1.0]),
            g,
        );
        let y = layer.apply(&store, &Tensor::from_rows(&[&[0.5]])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut store = ParamStore::new();
        let layer = EkanLayer::new(&mut store, "l", 2, 3, g, &mut SplitMix64::new(0));
        assert!(layer.apply(&store, &Tensor::zeros([4, 3])).is_err());
        let mut tape = Tape::new();
        let vars = tape.bind(&store);
        let x = tape.constant(Tensor::zeros([4, 3]));
        assert!(layer.forward(&mut tape, &vars, x).is_err());
    }

    #[test]
    fn stack_rejects_broken_chain() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0);
        let a = EkanLayer::new(&mut store, "a", 2, 3, g.clone(), &mut rng);
        let b = EkanLayer::new(&mut store, "b", 4, 1, g, &mut rng);
        assert!(EkanStack::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn stack_equals_manual_nesting() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(4);
        let stack = EkanStack::new(&mut store, "s", &[3, 5, 2], &g, &mut rng).unwrap();
        let x = Tensor::new([4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let nested = stack.layers()[1]
            .apply(&store, &stack.layers()[0].apply(&store, &x).unwrap())
            .unwrap();
        assert_eq!(stack.apply(&store, &x).unwrap(), nested);

        let single = EkanStack::from_layers(vec![stack.layers()[0].clone()]).unwrap();
        assert_eq!(
            single.apply(&store, &x).unwrap(),
            stack.layers()[0].apply(&store, &x).unwrap()
        );
    }

    #[test]
    fn tape_forward_matches_apply() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(8);
        let stack = EkanStack::new(&mut store, "s", &[3, 4, 2], &g, &mut rng).unwrap();
        let x = Tensor::new([5, 3], (0..15).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(&store);
        let xv = tape.constant(x.clone());
        let y = stack.forward(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(y), &stack.apply(&store, &x).unwrap());
    }

    #[test]
    fn layer_gradients_pass_check() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(21);
        let layer = EkanLayer::new(&mut store, "l", 3, 2, g, &mut rng);
        let xdata = (0..12).map(|_| rng.uniform(-0.95, 0.95)).collect();
        let xid = store.add("x", Tensor::new([4, 3], xdata).unwrap());
        let r = grad_check(&store, 1e-6, |t, v| {
            let y = layer.forward(t, v, v[xid])?;
            let s = t.silu(y);
            Ok(t.sum_squares(s))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn continuous_across_knots() {
        let g = SplineGrid::new(3, 8).unwrap();
        let mut store = ParamStore::new();
        let layer = EkanLayer::new(&mut store, "l", 1, 3, g.clone(), &mut SplitMix64::new(2));
        let mut points: Vec<f64> = g.knots().iter().copied().filter(|k| k.abs() <= 1.0).collect();
        let mut rng = SplitMix64::new(77);
        points.extend((0..50).map(|_| rng.uniform(-1.0, 1.0)));
        for x in points {
            let x = x.min(1.0 - 2e-9);
            let a = layer.apply(&store, &Tensor::from_rows(&[&[x]])).unwrap();
            let b = layer.apply(&store, &Tensor::from_rows(&[&[x + 1e-9]])).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6, "x={x}");
        }
    }
}
