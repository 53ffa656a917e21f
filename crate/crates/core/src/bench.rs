//! Desk-scale timing and allocation comparison of an eKAN layer stack, a
//! naive per-edge KAN computing the same function, and a plain linear layer.
//!
//! Peak allocation is read from [`CountingAlloc`], which only counts when a
//! binary installs it as its `#[global_allocator]`; otherwise peaks are
//! reported as absent.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ekan::{EkanLayer, EkanStack, SplineGrid};
use crate::error::{Error, Result};
use crate::numerics::ops::{silu_grad_scalar, silu_scalar};
use crate::numerics::{ParamId, ParamStore, SplitMix64, Tape, Tensor};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// Heap allocator wrapper that tracks live and peak bytes.
pub struct CountingAlloc;

impl CountingAlloc {
    fn grow(by: usize) {
        let now = CURRENT.fetch_add(by, Ordering::Relaxed) + by;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                Self::grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// True once [`CountingAlloc`] has served an allocation in this process.
pub fn allocation_tracking_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

/// Runs `f` and returns its result with the peak number of bytes allocated
/// above the live total at entry. `None` without the counting allocator.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<usize>) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    let peak = PEAK.load(Ordering::Relaxed).saturating_sub(base);
    (out, allocation_tracking_active().then_some(peak))
}

fn layer_params<'a>(layer: &EkanLayer, store: &'a ParamStore) -> (&'a Tensor, &'a Tensor, &'a Tensor) {
    (
        store.value(layer.w_base),
        store.value(layer.w_spline),
        store.value(layer.bias),
    )
}

/// One layer the slow way: every edge `(o, i)` evaluates its own spline,
/// each output unit re-expands its inputs, and all edge activations are
/// kept in a `batch × d_out × d_in` buffer before summing.
fn naive_layer(layer: &EkanLayer, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let (w_base, w_spline, bias) = layer_params(layer, store);
    let (d_in, d_out, k) = (layer.d_in, layer.d_out, layer.grid.num_basis());
    if x.rank() != 2 || x.cols() != d_in {
        return Err(Error::shape("naive_kan_forward", format!("input {:?}, layer expects {d_in}", x.shape())));
    }
    let batch = x.rows();
    let mut edges = vec![0.0; batch * d_out * d_in];
    for o in 0..d_out {
        let mut expanded = vec![0.0; batch * d_in * k];
        for (idx, &v) in x.data().iter().enumerate() {
            layer.grid.eval_into(v, &mut expanded[idx * k..(idx + 1) * k], None);
        }
        let coef = &w_spline.row(o);
        for b in 0..batch {
            for i in 0..d_in {
                let xv = x.at(b, i);
                let basis = &expanded[(b * d_in + i) * k..(b * d_in + i + 1) * k];
                let spline: f64 = basis.iter().zip(&coef[i * k..(i + 1) * k]).map(|(e, w)| e * w).sum();
                edges[(b * d_out + o) * d_in + i] = w_base.at(o, i) * silu_scalar(xv) + spline;
            }
        }
    }
    let mut y = Tensor::zeros([batch, d_out]);
    for b in 0..batch {
        for o in 0..d_out {
            let row = &edges[(b * d_out + o) * d_in..(b * d_out + o + 1) * d_in];
            y.set(b, o, row.iter().sum::<f64>() + bias.data()[o]);
        }
    }
    Ok(y)
}

/// Per-edge KAN evaluation of `stack`; agrees with
/// [`crate::ekan::ekan_forward`] up to rounding.
pub fn naive_kan_forward(x: &Tensor, stack: &EkanStack, store: &ParamStore) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in stack.layers() {
        h = naive_layer(layer, store, &h)?;
    }
    Ok(h)
}

/// Gradients from [`naive_kan_backward`].
#[derive(Debug, Clone)]
pub struct NaiveGrads {
    pub input: Tensor,
    pub params: Vec<(ParamId, Tensor)>,
}

/// Forward pass plus gradients of `Σ y ⊙ upstream`, again edge by edge.
pub fn naive_kan_backward(
    x: &Tensor,
    stack: &EkanStack,
    store: &ParamStore,
    upstream: &Tensor,
) -> Result<(Tensor, NaiveGrads)> {
    let mut inputs = vec![x.clone()];
    for layer in stack.layers() {
        let next = naive_layer(layer, store, inputs.last().expect("non-empty"))?;
        inputs.push(next);
    }
    let y = inputs.pop().expect("output");
    if upstream.shape() != y.shape() {
        return Err(Error::shape("naive_kan_backward", format!("upstream {:?} vs output {:?}", upstream.shape(), y.shape())));
    }
    let mut params = Vec::new();
    let mut g = upstream.clone();
    for (layer, h) in stack.layers().iter().zip(&inputs).rev() {
        let (w_base, w_spline, _) = layer_params(layer, store);
        let (d_in, d_out, k) = (layer.d_in, layer.d_out, layer.grid.num_basis());
        let batch = h.rows();
        let mut gw_base = Tensor::zeros([d_out, d_in]);
        let mut gw_spline = Tensor::zeros([d_out, d_in * k]);
        let mut g_bias = Tensor::zeros([d_out]);
        let mut gx = Tensor::zeros([batch, d_in]);
        for o in 0..d_out {
            let mut vals = vec![0.0; batch * d_in * k];
            let mut ders = vec![0.0; batch * d_in * k];
            for (idx, &v) in h.data().iter().enumerate() {
                let at = idx * k..(idx + 1) * k;
                layer.grid.eval_into(v, &mut vals[at.clone()], Some(&mut ders[at]));
            }
            for b in 0..batch {
                let go = g.at(b, o);
                g_bias.data_mut()[o] += go;
                for i in 0..d_in {
                    let xv = h.at(b, i);
                    let at = (b * d_in + i) * k;
                    gw_base.data_mut()[o * d_in + i] += go * silu_scalar(xv);
                    let mut dphi = w_base.at(o, i) * silu_grad_scalar(xv);
                    for kk in 0..k {
                        gw_spline.data_mut()[o * d_in * k + i * k + kk] += go * vals[at + kk];
                        dphi += w_spline.at(o, i * k + kk) * ders[at + kk];
                    }
                    gx.data_mut()[b * d_in + i] += go * dphi;
                }
            }
        }
        params.push((layer.bias, g_bias));
        params.push((layer.w_spline, gw_spline));
        params.push((layer.w_base, gw_base));
        g = gx;
    }
    params.reverse();
    Ok((y, NaiveGrads { input: g, params }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ekan,
    NaiveKan,
    Linear,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Ekan, Variant::NaiveKan, Variant::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ekan => "ekan",
            Variant::NaiveKan => "naive_kan",
            Variant::Linear => "linear",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown bench variant {s:?} (ekan, naive_kan, linear)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchShape {
    pub batch: usize,
    pub d_model: usize,
    pub num_basis: usize,
    pub degree: usize,
    pub layers: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            batch: 32,
            d_model: 512,
            num_basis: 8,
            degree: 3,
            layers: 1,
        }
    }
}

impl BenchShape {
    /// The configured shape followed by any extra batch sizes.
    pub fn from_config(cfg: &crate::config::BenchConfig) -> Vec<BenchShape> {
        std::iter::once(cfg.batch)
            .chain(cfg.batch_sweep.iter().copied())
            .map(|batch| BenchShape {
                batch,
                d_model: cfg.d_model,
                num_basis: cfg.num_basis,
                degree: cfg.spline_degree,
                layers: 1,
            })
            .collect()
    }

    fn label(&self) -> String {
        format!("b{}_d{}_k{}_l{}", self.batch, self.d_model, self.num_basis, self.layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: BenchShape,
    pub variant: Variant,
    /// median seconds
    pub forward_secs: f64,
    pub forward_backward_secs: f64,
    pub forward_peak_bytes: Option<usize>,
    pub forward_backward_peak_bytes: Option<usize>,
    /// sum of the forward output
    pub checksum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    pub allocation_tracked: bool,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, shape: &BenchShape, variant: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant && r.shape == *shape)
    }

    /// `variant,metric,value` rows; variants are suffixed with the shape.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "variant,metric,value")?;
        writeln!(out, "meta,threads,{}", self.threads)?;
        writeln!(out, "meta,repeats,{}", self.repeats)?;
        writeln!(out, "meta,warmup,{}", self.warmup)?;
        writeln!(out, "meta,allocation_tracked,{}", self.allocation_tracked)?;
        for r in &self.rows {
            let name = format!("{}/{}", r.variant, r.shape.label());
            writeln!(out, "{name},forward_secs,{:e}", r.forward_secs)?;
            writeln!(out, "{name},forward_backward_secs,{:e}", r.forward_backward_secs)?;
            if let Some(p) = r.forward_peak_bytes {
                writeln!(out, "{name},forward_peak_bytes,{p}")?;
            }
            if let Some(p) = r.forward_backward_peak_bytes {
                writeln!(out, "{name},forward_backward_peak_bytes,{p}")?;
            }
            writeln!(out, "{name},checksum,{:?}", r.checksum)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_median(repeats: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    Ok(median(times))
}

struct Fixture {
    store: ParamStore,
    stack: EkanStack,
    linear_store: ParamStore,
    linear: Vec<(ParamId, ParamId)>,
    x: Tensor,
    upstream: Tensor,
}

impl Fixture {
    fn new(shape: &BenchShape, seed: u64) -> Result<Self> {
        if shape.batch == 0 || shape.d_model == 0 || shape.layers == 0 {
            return Err(Error::InvalidArgument(format!("degenerate bench shape {shape:?}")));
        }
        let mut rng = SplitMix64::new(seed);
        let grid = SplineGrid::new(shape.degree, shape.num_basis)?;
        let mut store = ParamStore::new();
        let dims = vec![shape.d_model; shape.layers + 1];
        let stack = EkanStack::new(&mut store, "kan", &dims, &grid, &mut rng)?;
        let a = 1.0 / (shape.d_model as f64).sqrt();
        let mut linear_store = ParamStore::new();
        let linear = (0..shape.layers)
            .map(|l| {
                let w = linear_store.add(
                    format!("linear.l{l}.w"),
                    Tensor::from_fn([shape.d_model, shape.d_model], || rng.uniform(-a, a)),
                );
                let b = linear_store.add(format!("linear.l{l}.b"), Tensor::zeros([shape.d_model]));
                (w, b)
            })
            .collect();
        let x = Tensor::from_fn([shape.batch, shape.d_model], || rng.uniform(-1.0, 1.0));
        let upstream = Tensor::from_fn([shape.batch, shape.d_model], || rng.normal());
        Ok(Self {
            store,
            stack,
            linear_store,
            linear,
            x,
            upstream,
        })
    }

    fn linear_forward(&self) -> Result<Tensor> {
        let mut h = self.x.clone();
        for &(w, b) in &self.linear {
            let mut y = crate::numerics::matmul_nt(&h, self.linear_store.value(w));
            for r in 0..y.rows() {
                for (v, bv) in y.row_mut(r).iter_mut().zip(self.linear_store.value(b).data()) {
                    *v += bv;
                }
            }
            h = y;
        }
        Ok(h)
    }

    /// Tape forward and reverse sweep of `Σ y ⊙ upstream`.
    fn tape_backward(&self, variant: Variant) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = match variant {
            Variant::Linear => tape.bind(&self.linear_store),
            _ => tape.bind(&self.store),
        };
        let mut h = tape.constant(self.x.clone());
        match variant {
            Variant::Ekan => h = self.stack.forward(&mut tape, &vars, h)?,
            Variant::Linear => {
                for &(w, b) in &self.linear {
                    let y = tape.matmul_t(h, vars[w])?;
                    h = tape.add_row(y, vars[b])?;
                }
            }
            Variant::NaiveKan => unreachable!("naive variant has its own backward"),
        }
        let g = tape.constant(self.upstream.clone());
        let prod = tape.mul(h, g)?;
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        Ok(tape.value(h).clone())
    }

    fn forward(&self, variant: Variant) -> Result<Tensor> {
        match variant {
            Variant::Ekan => self.stack.apply(&self.store, &self.x),
            Variant::NaiveKan => naive_kan_forward(&self.x, &self.stack, &self.store),
            Variant::Linear => self.linear_forward(),
        }
    }

    fn forward_backward(&self, variant: Variant) -> Result<()> {
        match variant {
            Variant::NaiveKan => naive_kan_backward(&self.x, &self.stack, &self.store, &self.upstream).map(|_| ()),
            v => self.tape_backward(v).map(|_| ()),
        }
    }

    /// eKAN and naive outputs and parameter gradients must agree.
    fn check_equivalence(&self, tol: f64) -> Result<()> {
        let fast = self.stack.apply(&self.store, &self.x)?;
        let slow = naive_kan_forward(&self.x, &self.stack, &self.store)?;
        let diff = fast.max_abs_diff(&slow);
        if !(diff <= tol) {
            return Err(Error::BenchMismatch(format!("forward outputs differ by {diff:e}")));
        }
        let mut tape = Tape::new();
        let vars = tape.bind(&self.store);
        let x = tape.constant(self.x.clone());
        let y = self.stack.forward(&mut tape, &vars, x)?;
        let g = tape.constant(self.upstream.clone());
        let prod = tape.mul(y, g)?;
        let loss = tape.sum(prod);
        let grads = tape.backward(loss)?;
        let (_, naive) = naive_kan_backward(&self.x, &self.stack, &self.store, &self.upstream)?;
        for (id, g_naive) in &naive.params {
            let g_tape = grads
                .of(vars[*id])
                .ok_or_else(|| Error::BenchMismatch(format!("no tape gradient for {}", self.store.get(*id).name)))?;
            let diff = g_tape.max_abs_diff(g_naive);
            if !(diff <= tol) {
                return Err(Error::BenchMismatch(format!(
                    "gradients of {} differ by {diff:e}",
                    self.store.get(*id).name
                )));
            }
        }
        Ok(())
    }
}

/// Tolerance for the pre-timing equivalence check.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

/// Times every variant on every shape: median of `repeats` runs after
/// `warmup` discarded ones. Aborts with [`Error::BenchMismatch`] if eKAN and
/// the naive KAN disagree.
pub fn run_bench(
    shapes: &[BenchShape],
    variants: &[Variant],
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("bench needs at least one repeat".into()));
    }
    if variants.is_empty() || shapes.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one variant and one shape".into()));
    }
    let mut rows = Vec::new();
    for shape in shapes {
        let fx = Fixture::new(shape, seed)?;
        if variants.contains(&Variant::Ekan) && variants.contains(&Variant::NaiveKan) {
            fx.check_equivalence(EQUIVALENCE_TOL)?;
        }
        for &variant in variants {
            let forward_secs = time_median(repeats, warmup, || fx.forward(variant).map(|_| ()))?;
            let forward_backward_secs = time_median(repeats, warmup, || fx.forward_backward(variant))?;
            let (out, forward_peak_bytes) = measure_peak(|| fx.forward(variant));
            let checksum = out?.sum();
            let (res, forward_backward_peak_bytes) = measure_peak(|| fx.forward_backward(variant));
            res?;
            log::debug!("bench {variant} {}: forward {forward_secs:e}s", shape.label());
            rows.push(BenchRow {
                shape: *shape,
                variant,
                forward_secs,
                forward_backward_secs,
                forward_peak_bytes,
                forward_backward_peak_bytes,
                checksum,
            });
        }
    }
    Ok(BenchReport {
        repeats,
        warmup,
        threads: 1,
        allocation_tracked: allocation_tracking_active(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchShape {
        BenchShape {
            batch: 3,
            d_model: 5,
            num_basis: 6,
            degree: 3,
            layers: 2,
        }
    }

    #[test]
    fn naive_matches_ekan_forward_and_gradients() {
        for seed in 0..5 {
            let fx = Fixture::new(&small(), seed).unwrap();
            fx.check_equivalence(1e-12).unwrap();
        }
    }

    #[test]
    fn naive_input_gradient_matches_finite_differences() {
        let fx = Fixture::new(&small(), 3).unwrap();
        let (_, grads) = naive_kan_backward(&fx.x, &fx.stack, &fx.store, &fx.upstream).unwrap();
        let f = |x: &Tensor| {
            let y = naive_kan_forward(x, &fx.stack, &fx.store).unwrap();
            y.data().iter().zip(fx.upstream.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for idx in 0..fx.x.len() {
            let mut xp = fx.x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = fx.x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = grads.input.data()[idx];
            assert!((an - fd).abs() / fd.abs().max(1.0) < 1e-6, "{idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut fx = Fixture::new(&small(), 1).unwrap();
        fx.store.zero_values();
        let y = naive_kan_forward(&fx.x, &fx.stack, &fx.store).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn single_repeat_report_is_well_formed() {
        let rep = run_bench(&[small()], &Variant::ALL, 1, 0, 0).unwrap();
        assert_eq!(rep.rows.len(), 3);
        for r in &rep.rows {
            assert!(r.forward_secs > 0.0 && r.forward_backward_secs > 0.0);
            assert!(r.checksum.is_finite());
        }
        let e = rep.row(&small(), Variant::Ekan).unwrap().checksum;
        let n = rep.row(&small(), Variant::NaiveKan).unwrap().checksum;
        assert!((e - n).abs() < 1e-10);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("variant,metric,value\n"));
        assert!(text.lines().skip(1).all(|l| l.split(',').count() == 3));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("kan".parse::<Variant>().is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
