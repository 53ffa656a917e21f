//! The eKamba temporal block: causal depthwise convolution, a selective
//! state-space scan, a SiLU gate with SiLU residual, then an eKAN projection.
//!
//! Sequences are batched as contiguous segments of `seg_len` rows: row
//! `s·seg_len + t` is step `t` of sequence `s`. Convolution and scan never
//! cross a segment boundary.
//!
//! Scan semantics, per channel `c` and state `s`:
//!
//! ```text
//! Ā_t     = exp(Δ_{t,c} · A_{c,s})
//! h_{t,s} = Ā_t · h_{t-1,s} + Δ_{t,c} · B_{t,s} · u_{t,c}      (h_{-1} = 0)
//! y_{t,c} = Σ_s C_{t,s} · h_{t,s} + D_c · u_{t,c}
//! ```

use crate::ekan::{EkanStack, SplineGrid};
use crate::error::{Error, Result};
use crate::numerics::{ops, ParamId, ParamStore, ParamVars, SplitMix64, Tape, Tensor, Var};

fn check_segments(op: &'static str, rows: usize, seg_len: usize) -> Result<usize> {
    if seg_len == 0 || rows % seg_len != 0 {
        return Err(Error::shape(
            op,
            format!("{rows} rows do not split into segments of {seg_len}"),
        ));
    }
    Ok(rows / seg_len)
}

/// Depthwise causal convolution. `kernel` is `width×d`; its last row is the
/// tap applied to the current step, row `width-1-s` to the step `s` back.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor, seg_len: usize) -> Result<Tensor> {
    let (rows, d) = (x.rows(), x.cols());
    check_segments("causal_conv1d", rows, seg_len)?;
    if kernel.rank() != 2 || kernel.cols() != d || bias.len() != d {
        return Err(Error::shape(
            "causal_conv1d",
            format!("x {:?}, kernel {:?}, bias {:?}", x.shape(), kernel.shape(), bias.shape()),
        ));
    }
    let w = kernel.rows();
    let mut out = Tensor::zeros([rows, d]);
    for r in 0..rows {
        let t = r % seg_len;
        let orow = out.row_mut(r);
        orow.copy_from_slice(bias.data());
        for s in 0..w.min(t + 1) {
            let tap = kernel.row(w - 1 - s);
            let xin = x.row(r - s);
            for c in 0..d {
                orow[c] += tap[c] * xin[c];
            }
        }
    }
    Ok(out)
}

fn conv_op(tape: &mut Tape, x: Var, kernel: Var, bias: Var, seg_len: usize) -> Result<Var> {
    let value = causal_conv1d(tape.value(x), tape.value(kernel), tape.value(bias), seg_len)?;
    Ok(tape.custom(&[x, kernel, bias], value, move |ctx| {
        let (x, kernel, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let (rows, d, w) = (x.rows(), x.cols(), kernel.rows());
        let mut gx = Tensor::zeros([rows, d]);
        let mut gk = Tensor::zeros([w, d]);
        let mut gb = vec![0.0; d];
        for r in 0..rows {
            let t = r % seg_len;
            let grow = g.row(r);
            for c in 0..d {
                gb[c] += grow[c];
            }
            for s in 0..w.min(t + 1) {
                for c in 0..d {
                    gx.data_mut()[(r - s) * d + c] += grow[c] * kernel.at(w - 1 - s, c);
                    gk.data_mut()[(w - 1 - s) * d + c] += grow[c] * x.at(r - s, c);
                }
            }
        }
        vec![Some(gx), Some(gk), Some(Tensor::from_vec(gb))]
    }))
}

/// Input-dependent step sizes and projections:
/// `Δ = softplus(u·W_Δ + b_Δ)`, `B = u·W_B`, `C = u·W_C`.
pub fn ssm_projections(
    u: &Tensor,
    w_delta: &Tensor,
    b_delta: &Tensor,
    w_b: &Tensor,
    w_c: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut pre = crate::numerics::matmul(u, w_delta)?;
    if b_delta.len() != pre.cols() {
        return Err(Error::shape("ssm_projections", "b_delta width"));
    }
    for r in 0..pre.rows() {
        for (v, b) in pre.row_mut(r).iter_mut().zip(b_delta.data()) {
            *v += b;
        }
    }
    let delta = ops::softplus(&pre);
    let b = crate::numerics::matmul(u, w_b)?;
    let c = crate::numerics::matmul(u, w_c)?;
    Ok((delta, b, c))
}

/// Inputs of a selective scan over batched segments.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    /// `rows × d`
    pub u: &'a Tensor,
    /// `rows × d`, positive
    pub delta: &'a Tensor,
    /// `rows × d_state`
    pub b: &'a Tensor,
    /// `rows × d_state`
    pub c: &'a Tensor,
    /// `d × d_state`
    pub a: &'a Tensor,
    /// `d`
    pub d_skip: &'a Tensor,
    pub seg_len: usize,
}

impl ScanInputs<'_> {
    fn check(&self) -> Result<(usize, usize, usize)> {
        let (rows, d) = (self.u.rows(), self.u.cols());
        let s = self.a.cols();
        check_segments("ssm_scan", rows, self.seg_len)?;
        let ok = self.delta.shape() == [rows, d]
            && self.b.shape() == [rows, s]
            && self.c.shape() == [rows, s]
            && self.a.shape() == [d, s]
            && self.d_skip.len() == d;
        if !ok {
            return Err(Error::shape(
                "ssm_scan",
                format!(
                    "u {:?} delta {:?} B {:?} C {:?} A {:?} D {:?}",
                    self.u.shape(),
                    self.delta.shape(),
                    self.b.shape(),
                    self.c.shape(),
                    self.a.shape(),
                    self.d_skip.shape()
                ),
            ));
        }
        Ok((rows, d, s))
    }
}

/// Sequential reference scan. Returns `y` and the hidden states
/// (`rows × d × d_state`, flattened) needed by the adjoint.
pub fn ssm_scan_with_states(inp: ScanInputs<'_>) -> Result<(Tensor, Vec<f64>)> {
    let (rows, d, s) = inp.check()?;
    let mut y = Tensor::zeros([rows, d]);
    let mut h = vec![0.0; rows * d * s];
    for r in 0..rows {
        let t = r % inp.seg_len;
        for c in 0..d {
            let dt = inp.delta.at(r, c);
            let uc = inp.u.at(r, c);
            let mut acc = 0.0;
            for k in 0..s {
                let prev = if t == 0 { 0.0 } else { h[((r - 1) * d + c) * s + k] };
                let abar = (dt * inp.a.at(c, k)).exp();
                let hv = abar * prev + dt * inp.b.at(r, k) * uc;
                h[(r * d + c) * s + k] = hv;
                acc += inp.c.at(r, k) * hv;
            }
            y.set(r, c, acc + inp.d_skip.data()[c] * uc);
        }
    }
    Ok((y, h))
}

pub fn ssm_scan(inp: ScanInputs<'_>) -> Result<Tensor> {
    ssm_scan_with_states(inp).map(|(y, _)| y)
}

/// Log-depth associative scan over `(Ā, Δ·B·u)` pairs, composing
/// `(a1, b1) ∘ (a2, b2) = (a1·a2, a2·b1 + b2)` with doubling offsets.
/// Same result as [`ssm_scan`] up to summation order.
pub fn ssm_scan_associative(inp: ScanInputs<'_>) -> Result<Tensor> {
    let (rows, d, s) = inp.check()?;
    let seg_len = inp.seg_len;
    let mut y = Tensor::zeros([rows, d]);
    let mut a = vec![0.0; seg_len];
    let mut b = vec![0.0; seg_len];
    let mut next_a = vec![0.0; seg_len];
    let mut next_b = vec![0.0; seg_len];
    for seg in 0..rows / seg_len {
        let base = seg * seg_len;
        for c in 0..d {
            for k in 0..s {
                for t in 0..seg_len {
                    let r = base + t;
                    let dt = inp.delta.at(r, c);
                    a[t] = (dt * inp.a.at(c, k)).exp();
                    b[t] = dt * inp.b.at(r, k) * inp.u.at(r, c);
                }
                let mut offset = 1;
                while offset < seg_len {
                    for t in 0..seg_len {
                        if t >= offset {
                            next_a[t] = a[t - offset] * a[t];
                            next_b[t] = a[t] * b[t - offset] + b[t];
                        } else {
                            next_a[t] = a[t];
                            next_b[t] = b[t];
                        }
                    }
                    std::mem::swap(&mut a, &mut next_a);
                    std::mem::swap(&mut b, &mut next_b);
                    offset *= 2;
                }
                for t in 0..seg_len {
                    let r = base + t;
                    let v = y.at(r, c) + inp.c.at(r, k) * b[t];
                    y.set(r, c, v);
                }
            }
            for t in 0..seg_len {
                let r = base + t;
                let v = y.at(r, c) + inp.d_skip.data()[c] * inp.u.at(r, c);
                y.set(r, c, v);
            }
        }
    }
    Ok(y)
}

/// Differentiable selective scan; parents are `[u, Δ, B, C, A, D]`.
pub fn scan_op(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    b: Var,
    c: Var,
    a: Var,
    d_skip: Var,
    seg_len: usize,
) -> Result<Var> {
    let (y, h) = ssm_scan_with_states(ScanInputs {
        u: tape.value(u),
        delta: tape.value(delta),
        b: tape.value(b),
        c: tape.value(c),
        a: tape.value(a),
        d_skip: tape.value(d_skip),
        seg_len,
    })?;
    Ok(tape.custom(&[u, delta, b, c, a, d_skip], y, move |ctx| {
        let [u, delta, bm, cm, am, dm] = [
            ctx.inputs[0],
            ctx.inputs[1],
            ctx.inputs[2],
            ctx.inputs[3],
            ctx.inputs[4],
            ctx.inputs[5],
        ];
        let gy = ctx.grad;
        let (rows, d, s) = (u.rows(), u.cols(), am.cols());
        let mut gu = Tensor::zeros([rows, d]);
        let mut gdelta = Tensor::zeros([rows, d]);
        let mut gb = Tensor::zeros([rows, s]);
        let mut gc = Tensor::zeros([rows, s]);
        let mut ga = Tensor::zeros([d, s]);
        let mut gd = vec![0.0; d];
        // gradient flowing into h_t from later steps
        let mut carry = vec![0.0; d * s];
        for r in (0..rows).rev() {
            let t = r % seg_len;
            if t == seg_len - 1 {
                carry.fill(0.0);
            }
            for c in 0..d {
                let g = gy.at(r, c);
                let dt = delta.at(r, c);
                let uc = u.at(r, c);
                gd[c] += g * uc;
                let mut gu_rc = g * dm.data()[c];
                let mut gdt = 0.0;
                for k in 0..s {
                    let idx = c * s + k;
                    let hv = h[(r * d + c) * s + k];
                    gc.data_mut()[r * s + k] += g * hv;
                    let gh = g * cm.at(r, k) + carry[idx];
                    let akv = am.at(c, k);
                    let abar = (dt * akv).exp();
                    let prev = if t == 0 { 0.0 } else { h[((r - 1) * d + c) * s + k] };
                    // h = abar·prev + dt·B·u
                    let g_abar = gh * prev;
                    gdt += gh * bm.at(r, k) * uc + g_abar * abar * akv;
                    ga.data_mut()[idx] += g_abar * abar * dt;
                    gb.data_mut()[r * s + k] += gh * dt * uc;
                    gu_rc += gh * dt * bm.at(r, k);
                    carry[idx] = gh * abar;
                }
                gu.set(r, c, gu_rc);
                gdelta.set(r, c, gdt);
            }
        }
        vec![
            Some(gu),
            Some(gdelta),
            Some(gb),
            Some(gc),
            Some(ga),
            Some(Tensor::new(dm.shape().to_vec(), gd).expect("skip shape")),
        ]
    }))
}

/// Hyperparameters of one eKamba block.
#[derive(Debug, Clone)]
pub struct BlockShape {
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
}

/// Parameter handles of one eKamba block.
#[derive(Debug, Clone)]
pub struct EkambaBlock {
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    /// `d_model × d_state`, initialised to `-(1..=d_state)` per channel
    pub a: ParamId,
    pub d_skip: ParamId,
    pub post: EkanStack,
    pub shape: BlockShape,
}

impl EkambaBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        shape: BlockShape,
        grid: &SplineGrid,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let BlockShape {
            d_model: d,
            d_state: s,
            conv_width: w,
        } = shape;
        if d == 0 || s == 0 || w == 0 {
            return Err(Error::Config("eKamba widths must be positive".into()));
        }
        let uni = |rng: &mut SplitMix64, n: usize, a: f64| -> Vec<f64> {
            (0..n).map(|_| rng.uniform(-a, a)).collect()
        };
        let ad = 1.0 / (d as f64).sqrt();
        let conv_kernel = store.add(
            format!("{prefix}.conv.kernel"),
            Tensor::new([w, d], uni(rng, w * d, 1.0 / (w as f64).sqrt()))?,
        );
        let conv_bias = store.add(format!("{prefix}.conv.bias"), Tensor::zeros([d]));
        let w_delta = store.add(
            format!("{prefix}.ssm.w_delta"),
            Tensor::new([d, d], uni(rng, d * d, 0.1 * ad))?,
        );
        // step sizes start log-uniform in [0.01, 0.5]
        let b_delta_vals = (0..d)
            .map(|_| {
                let dt = (rng.uniform(0.01f64.ln(), 0.5f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln() // softplus⁻¹(dt) = dt + ln(1 - e^-dt)
            })
            .collect();
        let b_delta = store.add(format!("{prefix}.ssm.b_delta"), Tensor::new([d], b_delta_vals)?);
        let w_b = store.add(format!("{prefix}.ssm.w_b"), Tensor::new([d, s], uni(rng, d * s, ad))?);
        let w_c = store.add(format!("{prefix}.ssm.w_c"), Tensor::new([d, s], uni(rng, d * s, ad))?);
        let a_vals = (0..d).flat_map(|_| (1..=s).map(|k| -(k as f64))).collect();
        let a = store.add(format!("{prefix}.ssm.a"), Tensor::new([d, s], a_vals)?);
        let d_skip = store.add(format!("{prefix}.ssm.d"), Tensor::full([d], 1.0));
        let post = EkanStack::new(store, &format!("{prefix}.post"), &[d, d], grid, rng)?;
        Ok(Self {
            conv_kernel,
            conv_bias,
            w_delta,
            b_delta,
            w_b,
            w_c,
            a,
            d_skip,
            post,
            shape,
        })
    }

    /// `eKAN(silu(scan(conv(x))) + silu(x))` over segments of `seg_len` rows.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var, seg_len: usize) -> Result<Var> {
        let xv = tape.value(x);
        if xv.rank() != 2 || xv.cols() != self.shape.d_model {
            return Err(Error::shape(
                "ekamba_block",
                format!("input {:?}, block width {}", xv.shape(), self.shape.d_model),
            ));
        }
        let u = conv_op(tape, x, vars[self.conv_kernel], vars[self.conv_bias], seg_len)?;
        let pre = tape.matmul(u, vars[self.w_delta])?;
        let pre = tape.add_row(pre, vars[self.b_delta])?;
        let delta = tape.softplus(pre);
        let b = tape.matmul(u, vars[self.w_b])?;
        let c = tape.matmul(u, vars[self.w_c])?;
        let y = scan_op(tape, u, delta, b, c, vars[self.a], vars[self.d_skip], seg_len)?;
        let gated = tape.silu(y);
        let residual = tape.silu(x);
        let h = tape.add(gated, residual)?;
        self.post.forward(tape, vars, h)
    }

    /// Evaluation without gradient bookkeeping.
    pub fn apply(&self, store: &ParamStore, x: &Tensor, seg_len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(store);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &vars, xv, seg_len)?;
        Ok(tape.value(y).clone())
    }
}

/// Free-function form of [`EkambaBlock::apply`].
pub fn ekamba_block(x: &Tensor, block: &EkambaBlock, store: &ParamStore, seg_len: usize) -> Result<Tensor> {
    block.apply(store, x, seg_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new([v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::new([6, 2], (0..12).map(|i| i as f64 - 3.0).collect()).unwrap();
        let kernel = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        let y = causal_conv1d(&x, &kernel, &Tensor::zeros([2]), 3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn width_two_average() {
        let y = causal_conv1d(
            &col(&[2.0, 4.0]),
            &Tensor::from_rows(&[&[0.5], &[0.5]]),
            &Tensor::zeros([1]),
            2,
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }

    #[test]
    fn conv_is_causal_and_segmented() {
        let kernel = Tensor::from_rows(&[&[0.3], &[-0.2], &[0.9]]);
        let x = col(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = causal_conv1d(&x, &kernel, &Tensor::zeros([1]), 3).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[2] = 100.0; // last step of first segment
        let y2 = causal_conv1d(&x2, &kernel, &Tensor::zeros([1]), 3).unwrap();
        assert_eq!(&y.data()[..2], &y2.data()[..2]);
        assert_eq!(&y.data()[3..], &y2.data()[3..]);
    }

    #[test]
    fn projections_at_zero_input() {
        let u = Tensor::zeros([3, 2]);
        let (delta, b, _) = ssm_projections(
            &u,
            &Tensor::full([2, 2], 0.7),
            &Tensor::zeros([2]),
            &Tensor::zeros([2, 4]),
            &Tensor::full([2, 4], 1.0),
        )
        .unwrap();
        assert!(delta.data().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projections_zero_w_b_gives_zero_b() {
        let mut rng = SplitMix64::new(3);
        let u = Tensor::new([4, 2], (0..8).map(|_| rng.normal()).collect()).unwrap();
        let (_, b, _) = ssm_projections(
            &u,
            &Tensor::full([2, 2], 0.7),
            &Tensor::zeros([2]),
            &Tensor::zeros([2, 3]),
            &Tensor::full([2, 3], 1.0),
        )
        .unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    fn scan1(u: &[f64], delta: f64, b: f64, c: f64, a: f64, d: f64) -> Vec<f64> {
        let n = u.len();
        let u = col(u);
        let delta = Tensor::full([n, 1], delta);
        let bm = Tensor::full([n, 1], b);
        let cm = Tensor::full([n, 1], c);
        let am = Tensor::full([1, 1], a);
        let dm = Tensor::full([1], d);
        ssm_scan(ScanInputs {
            u: &u,
            delta: &delta,
            b: &bm,
            c: &cm,
            a: &am,
            d_skip: &dm,
            seg_len: n,
        })
        .unwrap()
        .into_data()
    }

    #[test]
    fn cumulative_sum_case() {
        assert_eq!(scan1(&[1.0, 2.0, 3.0], 1.0, 1.0, 1.0, 0.0, 0.0), vec![1.0, 3.0, 6.0]);
    }

    #[test]
    fn zero_input_zero_output() {
        assert_eq!(scan1(&[0.0; 5], 0.3, 2.0, -1.0, -1.0, 0.5), vec![0.0; 5]);
    }

    #[test]
    fn single_step_ignores_a() {
        for a in [-5.0, 0.0, 3.0] {
            assert_eq!(scan1(&[3.0], 2.0, 0.5, 1.0, a, 0.0), vec![3.0]);
        }
    }

    struct Instance {
        u: Tensor,
        delta: Tensor,
        b: Tensor,
        c: Tensor,
        a: Tensor,
        d: Tensor,
        seg: usize,
    }

    fn random_instance(rng: &mut SplitMix64, segs: usize, seg: usize, d: usize, s: usize) -> Instance {
        let rows = segs * seg;
        let mut t = |shape: [usize; 2], f: &mut dyn FnMut(&mut SplitMix64) -> f64| {
            Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| f(rng)).collect()).unwrap()
        };
        let u = t([rows, d], &mut |r| r.normal());
        let delta = t([rows, d], &mut |r| r.uniform(0.01, 1.0));
        let b = t([rows, s], &mut |r| r.normal());
        let c = t([rows, s], &mut |r| r.normal());
        let a = t([d, s], &mut |r| -r.uniform(0.1, 3.0));
        let dv = Tensor::new([d], (0..d).map(|_| rng.normal()).collect()).unwrap();
        Instance { u, delta, b, c, a, d: dv, seg }
    }

    #[test]
    fn associative_scan_matches_sequential() {
        let mut rng = SplitMix64::new(99);
        for i in 0..1000 {
            let seg = 1 + i % 13;
            let inst = random_instance(&mut rng, 1 + i % 3, seg, 1 + i % 4, 1 + i % 5);
            let inp = ScanInputs {
                u: &inst.u,
                delta: &inst.delta,
                b: &inst.b,
                c: &inst.c,
                a: &inst.a,
                d_skip: &inst.d,
                seg_len: inst.seg,
            };
            let seq = ssm_scan(inp).unwrap();
            let par = ssm_scan_associative(inp).unwrap();
            assert!(seq.max_abs_diff(&par) < 1e-10, "instance {i}");
        }
    }

    #[test]
    fn long_sequence_stays_finite() {
        let mut rng = SplitMix64::new(5);
        let inst = random_instance(&mut rng, 1, 10_000, 2, 4);
        let y = ssm_scan(ScanInputs {
            u: &inst.u,
            delta: &inst.delta,
            b: &inst.b,
            c: &inst.c,
            a: &inst.a,
            d_skip: &inst.d,
            seg_len: inst.seg,
        })
        .unwrap();
        assert!(y.is_finite());
        // |h| ≤ Σ_k sup|ΔBu| · sup|Ā|^k
        let sup_drive = (0..10_000)
            .flat_map(|r| (0..2).flat_map(move |c| (0..4).map(move |k| (r, c, k))))
            .map(|(r, c, k)| (inst.delta.at(r, c) * inst.b.at(r, k) * inst.u.at(r, c)).abs())
            .fold(0.0, f64::max);
        let sup_abar = (0..10_000)
            .flat_map(|r| (0..2).flat_map(move |c| (0..4).map(move |k| (r, c, k))))
            .map(|(r, c, k)| (inst.delta.at(r, c) * inst.a.at(c, k)).exp())
            .fold(0.0, f64::max);
        let bound_h = sup_drive / (1.0 - sup_abar);
        let sup_c = inst.c.max_abs();
        let bound_y = 4.0 * sup_c * bound_h + inst.d.max_abs() * inst.u.max_abs();
        assert!(y.max_abs() <= bound_y, "{} > {}", y.max_abs(), bound_y);
    }

    #[test]
    fn scan_gradients_pass_check() {
        let mut rng = SplitMix64::new(17);
        for (segs, seg, d, s) in [(1, 5, 2, 3), (2, 4, 3, 2), (1, 8, 4, 4)] {
            let inst = random_instance(&mut rng, segs, seg, d, s);
            let mut store = ParamStore::new();
            let ids = [
                store.add("u", inst.u),
                store.add("delta", inst.delta),
                store.add("b", inst.b),
                store.add("c", inst.c),
                store.add("a", inst.a),
                store.add("d", inst.d),
            ];
            let r = grad_check(&store, 1e-6, |t, v| {
                let y = scan_op(t, v[ids[0]], v[ids[1]], v[ids[2]], v[ids[3]], v[ids[4]], v[ids[5]], seg)?;
                let y2 = t.silu(y);
                Ok(t.sum_squares(y2))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn conv_gradients_pass_check() {
        let mut rng = SplitMix64::new(2);
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new([6, 2], (0..12).map(|_| rng.normal()).collect()).unwrap());
        let k = store.add("k", Tensor::new([4, 2], (0..8).map(|_| rng.normal()).collect()).unwrap());
        let b = store.add("b", Tensor::from_vec(vec![0.1, -0.3]));
        let r = grad_check(&store, 1e-6, |t, v| {
            let y = conv_op(t, v[x], v[k], v[b], 3)?;
            let y = t.silu(y);
            Ok(t.sum_squares(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn small_block(seed: u64) -> (ParamStore, EkambaBlock) {
        let mut store = ParamStore::new();
        let grid = SplineGrid::new(3, 8).unwrap();
        let block = EkambaBlock::new(
            &mut store,
            "blk",
            BlockShape {
                d_model: 3,
                d_state: 4,
                conv_width: 4,
            },
            &grid,
            &mut SplitMix64::new(seed),
        )
        .unwrap();
        (store, block)
    }

    #[test]
    fn residual_only_when_ssm_silenced() {
        let (mut store, block) = small_block(1);
        store.value_mut(block.w_c).data_mut().fill(0.0);
        store.value_mut(block.d_skip).data_mut().fill(0.0);
        let x = Tensor::new([5, 3], (0..15).map(|i| (i as f64 * 0.4).sin()).collect()).unwrap();
        let got = block.apply(&store, &x, 5).unwrap();
        let want = block.post.apply(&store, &ops::silu(&x)).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn block_shape_and_determinism() {
        let (store, block) = small_block(9);
        let x = Tensor::new([8, 3], (0..24).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let a = ekamba_block(&x, &block, &store, 4).unwrap();
        let (store2, block2) = small_block(9);
        let b = ekamba_block(&x, &block2, &store2, 4).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
    }

    #[test]
    fn a_initialised_negative_range() {
        let (store, block) = small_block(0);
        assert_eq!(store.value(block.a).row(0), &[-1.0, -2.0, -3.0, -4.0]);
    }

    #[test]
    fn block_gradients_pass_check() {
        let (mut store, block) = small_block(12);
        let mut rng = SplitMix64::new(4);
        let x = store.add("x", Tensor::new([10, 3], (0..30).map(|_| rng.uniform(-0.9, 0.9)).collect()).unwrap());
        let r = grad_check(&store, 1e-6, |t, v| {
            let y = block.forward(t, v, v[x], 5)?;
            Ok(t.sum_squares(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn delta_positive(v in -30.0f64..30.0, w in -3.0f64..3.0, b in -5.0f64..5.0) {
            let (delta, _, _) = ssm_projections(
                &Tensor::from_rows(&[&[v]]),
                &Tensor::from_rows(&[&[w]]),
                &Tensor::from_vec(vec![b]),
                &Tensor::zeros([1, 1]),
                &Tensor::zeros([1, 1]),
            ).unwrap();
            prop_assert!(delta.data()[0] > 0.0);
        }
    }
}
