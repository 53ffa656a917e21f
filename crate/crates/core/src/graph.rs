//! Graph convolution over the city graph and the stacked spatio-temporal
//! encoder.
//!
//! Region sequences are laid out region-major: row `n·T + t` holds region
//! `n` at window step `t`.

use crate::config::{ModelConfig, Readout};
use crate::ekan::{EkanStack, SplineGrid};
use crate::error::{Error, Result};
use crate::numerics::{ops, ParamId, ParamStore, ParamVars, SplitMix64, Tape, Tensor, Var};
use crate::sssm::{BlockShape, EkambaBlock};

fn check_adjacency(op: &'static str, a: &Tensor) -> Result<usize> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::shape(op, format!("adjacency {:?} is not square", a.shape())));
    }
    let n = a.rows();
    for i in 0..n {
        for j in 0..i {
            if a.at(i, j) != a.at(j, i) {
                return Err(Error::InvalidArgument(format!(
                    "{op}: adjacency is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(n)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃_ii = Σ_j (A + I)_ij`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = check_adjacency("normalize_adjacency", a)?;
    let mut tilde = a.clone();
    for i in 0..n {
        let v = tilde.at(i, i) + 1.0;
        tilde.set(i, i, v);
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| tilde.row(i).iter().fold(0.0, |s, &v| s + v))
        .collect();
    let mut out = tilde;
    for i in 0..n {
        for j in 0..n {
            let v = out.at(i, j);
            if v != 0.0 {
                // one rounding for sqrt(d_i d_j) keeps regular rows summing to 1
                out.set(i, j, v / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    Ok(out)
}

/// `ReLU(Â · H · W)` for one slot.
pub fn gcn_layer(h: &Tensor, a_hat: &Tensor, w: &Tensor) -> Result<Tensor> {
    if a_hat.rank() != 2 || a_hat.cols() != h.rows() {
        return Err(Error::shape(
            "gcn_layer",
            format!("Â {:?} vs H {:?}", a_hat.shape(), h.shape()),
        ));
    }
    let ah = crate::numerics::matmul(a_hat, h)?;
    Ok(ops::relu(&crate::numerics::matmul(&ah, w)?))
}

/// Applies `Â` independently at every window step:
/// `out[n·T + t] = Σ_m Â[n, m] · x[m·T + t]`.
pub fn propagate(a_hat: &Tensor, x: &Tensor, seg_len: usize) -> Result<Tensor> {
    let n = a_hat.rows();
    if a_hat.cols() != n || x.rank() != 2 || x.rows() != n * seg_len {
        return Err(Error::shape(
            "propagate",
            format!("Â {:?}, x {:?}, T={seg_len}", a_hat.shape(), x.shape()),
        ));
    }
    let d = x.cols();
    let mut out = Tensor::zeros([n * seg_len, d]);
    for i in 0..n {
        for m in 0..n {
            let w = a_hat.at(i, m);
            if w == 0.0 {
                continue;
            }
            for t in 0..seg_len {
                let src = (m * seg_len + t) * d;
                let dst = (i * seg_len + t) * d;
                for c in 0..d {
                    out.data_mut()[dst + c] += w * x.data()[src + c];
                }
            }
        }
    }
    Ok(out)
}

pub fn propagate_op(tape: &mut Tape, a_hat: &Tensor, x: Var, seg_len: usize) -> Result<Var> {
    let value = propagate(a_hat, tape.value(x), seg_len)?;
    let a_t = a_hat.transpose();
    Ok(tape.custom(&[x], value, move |ctx| {
        vec![Some(propagate(&a_t, ctx.grad, seg_len).expect("shape checked in forward"))]
    }))
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    /// `d_in × d_out`
    pub w: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = (0..d_in * d_out).map(|_| rng.uniform(-a, a)).collect();
        let w = store.add(name, Tensor::new([d_in, d_out], w).expect("shape"));
        Self { w, d_in, d_out }
    }

    /// Per-step `ReLU(Â H_t W)` over a region-major sequence.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, a_hat: &Tensor, x: Var, seg_len: usize) -> Result<Var> {
        let ax = propagate_op(tape, a_hat, x, seg_len)?;
        let z = tape.matmul(ax, vars[self.w])?;
        Ok(tape.relu(z))
    }
}

#[derive(Debug, Clone)]
pub struct StLayer {
    pub first: EkambaBlock,
    pub gcn: GcnLayer,
    pub second: EkambaBlock,
}

/// Input eKAN projection followed by `L` (eKamba → GCN → eKamba) layers and
/// a temporal readout.
#[derive(Debug, Clone)]
pub struct StEncoder {
    pub input: EkanStack,
    pub layers: Vec<StLayer>,
    pub readout: Readout,
    pub d_model: usize,
}

/// Tape handles produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// output of the first temporal block, `N·T × D`
    pub first: Var,
    /// final per-step embeddings, `N·T × D`
    pub sequence: Var,
    /// region embeddings `N × D`
    pub regions: Var,
}

impl StEncoder {
    pub fn new(store: &mut ParamStore, d_feat: usize, cfg: &ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let grid = SplineGrid::new(cfg.spline_degree, cfg.num_basis)?;
        let d = cfg.d_model;
        let input = EkanStack::new(store, "enc.input", &[d_feat, d], &grid, rng)?;
        let shape = BlockShape {
            d_model: d,
            d_state: cfg.d_state,
            conv_width: cfg.conv_width,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let first = EkambaBlock::new(store, &format!("enc.l{l}.t0"), shape.clone(), &grid, rng)?;
            let gcn = GcnLayer::new(store, &format!("enc.l{l}.gcn.w"), d, d, rng);
            let second = EkambaBlock::new(store, &format!("enc.l{l}.t1"), shape.clone(), &grid, rng)?;
            layers.push(StLayer { first, gcn, second });
        }
        Ok(Self {
            input,
            layers,
            readout: cfg.readout,
            d_model: d,
        })
    }

    /// Encodes `x` (`N·T × d_feat`, region-major) over the graph `a_hat`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        a_hat: &Tensor,
        seg_len: usize,
    ) -> Result<Encoded> {
        let n = a_hat.rows();
        let xv = tape.value(x);
        if xv.rank() != 2 || xv.rows() != n * seg_len {
            return Err(Error::shape(
                "st_encode",
                format!("input {:?} for {n} regions × {seg_len} steps", xv.shape()),
            ));
        }
        let mut h = self.input.forward(tape, vars, x)?;
        let mut first = None;
        for layer in &self.layers {
            h = layer.first.forward(tape, vars, h, seg_len)?;
            first.get_or_insert(h);
            h = layer.gcn.forward(tape, vars, a_hat, h, seg_len)?;
            h = layer.second.forward(tape, vars, h, seg_len)?;
        }
        let regions = match self.readout {
            Readout::Last => tape.select_rows(h, (0..n).map(|i| i * seg_len + seg_len - 1).collect()),
            Readout::Mean => {
                let mut pool = Tensor::zeros([n, n * seg_len]);
                for i in 0..n {
                    for t in 0..seg_len {
                        pool.set(i, i * seg_len + t, 1.0 / seg_len as f64);
                    }
                }
                let pool = tape.constant(pool);
                tape.matmul(pool, h)?
            }
        };
        Ok(Encoded {
            first: first.expect("at least one layer"),
            sequence: h,
            regions,
        })
    }

    /// Region embeddings `M` without gradient bookkeeping.
    pub fn apply(&self, store: &ParamStore, x: &Tensor, a_hat: &Tensor, seg_len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(store);
        let xv = tape.constant(x.clone());
        let enc = self.encode(&mut tape, &vars, xv, a_hat, seg_len)?;
        Ok(tape.value(enc.regions).clone())
    }
}

/// Free-function form of [`StEncoder::apply`].
pub fn st_encode(
    x: &Tensor,
    a_hat: &Tensor,
    encoder: &StEncoder,
    store: &ParamStore,
    seg_len: usize,
) -> Result<Tensor> {
    encoder.apply(store, x, a_hat, seg_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_sampled, matmul};

    fn path_graph(n: usize) -> Tensor {
        let mut a = Tensor::zeros([n, n]);
        for i in 0..n - 1 {
            a.set(i, i + 1, 1.0);
            a.set(i + 1, i, 1.0);
        }
        a
    }

    #[test]
    fn two_node_fixture() {
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let h = normalize_adjacency(&a).unwrap();
        assert!(h.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn isolated_node_has_unit_diagonal() {
        let mut a = path_graph(3);
        a.set(1, 2, 0.0);
        a.set(2, 1, 0.0);
        let h = normalize_adjacency(&a).unwrap();
        assert_eq!(h.at(2, 2), 1.0);
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert!(normalize_adjacency(&a).is_err());
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        // 5-cycle is 2-regular
        let mut a = Tensor::zeros([5, 5]);
        for i in 0..5 {
            a.set(i, (i + 1) % 5, 1.0);
            a.set((i + 1) % 5, i, 1.0);
        }
        let h = normalize_adjacency(&a).unwrap();
        for i in 0..5 {
            assert_eq!(h.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn random_graphs_normalize_symmetric() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..100 {
            let n = 2 + rng.below(8) as usize;
            let mut a = Tensor::zeros([n, n]);
            for i in 0..n {
                for j in 0..i {
                    if rng.next_f64() < 0.4 {
                        a.set(i, j, 1.0);
                        a.set(j, i, 1.0);
                    }
                }
            }
            let h = normalize_adjacency(&a).unwrap();
            assert_eq!(h, h.transpose());
            assert!(h.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gcn_fixtures() {
        let h = Tensor::from_rows(&[&[1.0, -2.0], &[-0.5, 3.0]]);
        assert_eq!(gcn_layer(&h, &Tensor::eye(2), &Tensor::eye(2)).unwrap(), ops::relu(&h));
        let neg = Tensor::full([2, 2], -1.0);
        assert!(gcn_layer(&neg, &Tensor::eye(2), &Tensor::eye(2))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let a_hat = Tensor::full([2, 2], 0.5);
        let out = gcn_layer(&Tensor::from_rows(&[&[2.0], &[4.0]]), &a_hat, &Tensor::from_rows(&[&[1.0]])).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);
        assert!(gcn_layer(&h, &Tensor::eye(3), &Tensor::eye(2)).is_err());
    }

    #[test]
    fn propagate_matches_per_step_matmul() {
        let a_hat = normalize_adjacency(&path_graph(4)).unwrap();
        let mut rng = SplitMix64::new(1);
        let (n, t, d) = (4, 3, 2);
        let x = Tensor::new([n * t, d], (0..n * t * d).map(|_| rng.normal()).collect()).unwrap();
        let out = propagate(&a_hat, &x, t).unwrap();
        for step in 0..t {
            let rows: Vec<usize> = (0..n).map(|i| i * t + step).collect();
            let want = matmul(&a_hat, &x.select_rows(&rows)).unwrap();
            assert!(out.select_rows(&rows).max_abs_diff(&want) < 1e-15);
        }
    }

    fn small_cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            d_model: 4,
            d_state: 3,
            conv_width: 3,
            layers,
            spline_degree: 3,
            num_basis: 6,
            readout: Readout::Last,
        }
    }

    fn encoder(seed: u64, layers: usize) -> (ParamStore, StEncoder) {
        let mut store = ParamStore::new();
        let enc = StEncoder::new(&mut store, 2, &small_cfg(layers), &mut SplitMix64::new(seed)).unwrap();
        (store, enc)
    }

    fn input(n: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::new([n * t, 2], (0..n * t * 2).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_gcn_reduces_to_stacked_blocks() {
        let (mut store, enc) = encoder(5, 1);
        let w = enc.layers[0].gcn.w;
        *store.value_mut(w) = Tensor::eye(4);
        let (n, t) = (3, 4);
        let x = input(n, t, 2);
        let m = st_encode(&x, &Tensor::eye(n), &enc, &store, t).unwrap();
        let h0 = enc.input.apply(&store, &x).unwrap();
        let h1 = enc.layers[0].first.apply(&store, &h0, t).unwrap();
        let h2 = enc.layers[0].second.apply(&store, &ops::relu(&h1), t).unwrap();
        let rows: Vec<usize> = (0..n).map(|i| i * t + t - 1).collect();
        assert_eq!(m, h2.select_rows(&rows));
    }

    #[test]
    fn output_shape_and_determinism() {
        let (store, enc) = encoder(8, 2);
        let a_hat = normalize_adjacency(&path_graph(5)).unwrap();
        let x = input(5, 3, 1);
        let m = st_encode(&x, &a_hat, &enc, &store, 3).unwrap();
        assert_eq!(m.shape(), &[5, 4]);
        let (store2, enc2) = encoder(8, 2);
        assert_eq!(m, st_encode(&x, &a_hat, &enc2, &store2, 3).unwrap());
    }

    #[test]
    fn permutation_equivariance() {
        let (store, enc) = encoder(4, 2);
        let n = 5;
        let t = 3;
        let mut a = path_graph(n);
        a.set(0, 3, 1.0);
        a.set(3, 0, 1.0);
        let a_hat = normalize_adjacency(&a).unwrap();
        let x = input(n, t, 6);
        let perm = [3, 0, 4, 1, 2];
        let mut pa = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in 0..n {
                pa.set(i, j, a_hat.at(perm[i], perm[j]));
            }
        }
        let rows: Vec<usize> = perm.iter().flat_map(|&p| (0..t).map(move |s| p * t + s)).collect();
        let px = x.select_rows(&rows);
        let m = st_encode(&x, &a_hat, &enc, &store, t).unwrap();
        let pm = st_encode(&px, &pa, &enc, &store, t).unwrap();
        assert!(pm.max_abs_diff(&m.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn encoder_gradients_pass_check() {
        let (mut store, enc) = encoder(11, 2);
        let (n, t) = (4, 3);
        let x = store.add("x", input(n, t, 9));
        let a_hat = normalize_adjacency(&path_graph(n)).unwrap();
        let r = grad_check_sampled(&store, 1e-6, 12, |tape, v| {
            let e = enc.encode(tape, v, v[x], &a_hat, t)?;
            Ok(tape.sum_squares(e.regions))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gcn_gradients_pass_check() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let layer = GcnLayer::new(&mut store, "w", 3, 2, &mut rng);
        let x = store.add("x", Tensor::new([8, 3], (0..24).map(|_| rng.normal()).collect()).unwrap());
        let a_hat = normalize_adjacency(&path_graph(4)).unwrap();
        let r = crate::numerics::grad_check(&store, 1e-6, |tape, v| {
            let y = layer.forward(tape, v, &a_hat, v[x], 2)?;
            Ok(tape.sum_squares(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
