//! Self-supervised objectives.
//!
//! Spatial: fuse original and augmented region embeddings, autoencode,
//! reconstruct, and cluster the latent codes with a spectrally relaxed
//! k-means term. Temporal: bilinear scores between the two views' per-step
//! embeddings of the same region, turned into an InfoNCE loss whose
//! negatives are the other steps of the window.
//!
//! Latent codes are kept region-major (`Z`, `N × d_lat`); the column-per-region
//! matrix is its transpose.

use crate::error::{Error, Result};
use crate::numerics::{matmul, ParamId, ParamStore, ParamVars, SplitMix64, Tape, Tensor, Var};

/// Learnable tensors of both objectives.
#[derive(Debug, Clone)]
pub struct SslParams {
    pub w1: ParamId,
    pub w2: ParamId,
    /// `D × d_lat`
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    /// `d_lat × D`
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    /// `D × D`
    pub bilinear: ParamId,
    pub d_model: usize,
    pub d_lat: usize,
}

fn glorot(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn([rows, cols], || rng.uniform(-bound, bound))
}

impl SslParams {
    pub fn new(store: &mut ParamStore, d_model: usize, d_lat: usize, rng: &mut SplitMix64) -> Self {
        let w1 = store.add("ssl.fuse.w1", Tensor::full([d_model], 1.0));
        let w2 = store.add("ssl.fuse.w2", Tensor::full([d_model], 1.0));
        let enc_w = store.add("ssl.ae.enc_w", glorot(rng, d_model, d_lat));
        let enc_b = store.add("ssl.ae.enc_b", Tensor::zeros([d_lat]));
        let dec_w = store.add("ssl.ae.dec_w", glorot(rng, d_lat, d_model));
        let dec_b = store.add("ssl.ae.dec_b", Tensor::zeros([d_model]));
        let mut bil = Tensor::eye(d_model);
        let s = 1.0 / (d_model as f64).sqrt();
        bil = bil.map(|v| v * s);
        let bilinear = store.add("ssl.bilinear", bil);
        Self {
            w1,
            w2,
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            bilinear,
            d_model,
            d_lat,
        }
    }

    /// `V = w1 ⊙ M + w2 ⊙ M̃`.
    pub fn fuse(&self, tape: &mut Tape, vars: &ParamVars, m: Var, m_aug: Var) -> Result<Var> {
        fuse_op(tape, m, m_aug, vars[self.w1], vars[self.w2])
    }

    /// Returns `(Z, V′)`.
    pub fn autoencode(&self, tape: &mut Tape, vars: &ParamVars, v: Var) -> Result<(Var, Var)> {
        let z = tape.matmul(v, vars[self.enc_w])?;
        let z = tape.add_row(z, vars[self.enc_b])?;
        let r = tape.matmul(z, vars[self.dec_w])?;
        let r = tape.add_row(r, vars[self.dec_b])?;
        Ok((z, r))
    }

    /// `N·T × T` score matrix between the two views' sequences.
    pub fn scores(&self, tape: &mut Tape, vars: &ParamVars, seq: Var, seq_aug: Var, seg_len: usize) -> Result<Var> {
        let p = tape.matmul(seq, vars[self.bilinear])?;
        segment_scores_op(tape, p, seq_aug, seg_len)
    }
}

fn fuse_op(tape: &mut Tape, m: Var, m_aug: Var, w1: Var, w2: Var) -> Result<Var> {
    if tape.value(m).shape() != tape.value(m_aug).shape() {
        return Err(Error::shape(
            "fuse_embeddings",
            format!("{:?} vs {:?}", tape.value(m).shape(), tape.value(m_aug).shape()),
        ));
    }
    let a = tape.mul_row(m, w1)?;
    let b = tape.mul_row(m_aug, w2)?;
    tape.add(a, b)
}

/// `v_n = w1 ⊙ m_n + w2 ⊙ m̃_n`.
pub fn fuse_embeddings(m: &Tensor, m_aug: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = [m, m_aug, w1, w2].map(|t| tape.constant(t.clone()));
    let out = fuse_op(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.value(out).clone())
}

/// Linear encoder/decoder on row vectors: `Z = V·We + be`, `V′ = Z·Wd + bd`.
/// Returns the latent codes column-per-region (`d_lat × N`) and `V′`.
pub fn autoencode(
    v: &Tensor,
    enc_w: &Tensor,
    enc_b: &Tensor,
    dec_w: &Tensor,
    dec_b: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let add_bias = |mut x: Tensor, b: &Tensor| -> Result<Tensor> {
        if b.len() != x.cols() {
            return Err(Error::shape("autoencode", format!("bias {:?} for {:?}", b.shape(), x.shape())));
        }
        for r in 0..x.rows() {
            for (o, bv) in x.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(x)
    };
    let z = add_bias(matmul(v, enc_w)?, enc_b)?;
    let rec = add_bias(matmul(&z, dec_w)?, dec_b)?;
    Ok((z.transpose(), rec))
}

/// `(1/N) Σ_n ‖v_n − v′_n‖²` on the tape.
pub fn reconstruction_loss_op(tape: &mut Tape, v: Var, rec: Var) -> Result<Var> {
    let n = tape.value(v).rows().max(1);
    let diff = tape.sub(v, rec)?;
    let ss = tape.sum_squares(diff);
    Ok(tape.scale(ss, 1.0 / n as f64))
}

pub fn reconstruction_loss(v: &Tensor, rec: &Tensor) -> Result<f64> {
    if v.shape() != rec.shape() || v.rank() != 2 {
        return Err(Error::shape("reconstruction_loss", format!("{:?} vs {:?}", v.shape(), rec.shape())));
    }
    Ok(v.zip_map(rec, |a, b| a - b).sum_squares() / v.rows().max(1) as f64)
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations, sorted by
/// descending eigenvalue (a stable sort, so exact ties keep index order).
/// Column `i` of the returned matrix is the eigenvector of value `i`.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::shape("symmetric_eigen", format!("{:?} is not square", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric_eigen input".into()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Tensor::eye(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m.at(p, q) * m.at(p, q);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.at(k, p), m.at(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.at(p, k), m.at(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.at(j, j).total_cmp(&m.at(i, i)));
    let values = order.iter().map(|&i| m.at(i, i)).collect();
    let mut vectors = Tensor::zeros([n, n]);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.at(k, src));
        }
    }
    Ok((values, vectors))
}

/// Top-`k` eigenvectors (`N × k`) of a Gram matrix, each column signed so its
/// largest-magnitude entry (lowest index on ties) is positive.
pub fn indicator_from_gram(gram: &Tensor, k: usize) -> Result<Tensor> {
    let n = gram.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} clusters for {n} regions")));
    }
    let (_, vecs) = symmetric_eigen(gram)?;
    let mut f = Tensor::zeros([n, k]);
    for c in 0..k {
        let mut lead = 0;
        for r in 1..n {
            if vecs.at(r, c).abs() > vecs.at(lead, c).abs() {
                lead = r;
            }
        }
        let sign = if vecs.at(lead, c) < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            f.set(r, c, sign * vecs.at(r, c));
        }
    }
    Ok(f)
}

/// Gram matrix `DᵀD` of column-per-region latent codes (`d_lat × N`).
pub fn latent_gram(dlat: &Tensor) -> Tensor {
    crate::numerics::matmul_tn(dlat, dlat)
}

/// `F` from latent codes `D` (`d_lat × N`): top-k eigenvectors of `DᵀD`.
pub fn update_cluster_indicator(dlat: &Tensor, k: usize) -> Result<Tensor> {
    indicator_from_gram(&latent_gram(dlat), k)
}

/// `Tr(DᵀD) − Tr(Fᵀ DᵀD F)` with `D` given column-per-region.
pub fn kmeans_loss(dlat: &Tensor, f: &Tensor) -> Result<f64> {
    if f.rows() != dlat.cols() {
        return Err(Error::shape("kmeans_loss", format!("D {:?}, F {:?}", dlat.shape(), f.shape())));
    }
    let proj = matmul(dlat, f)?;
    Ok(dlat.sum_squares() - proj.sum_squares())
}

/// Tape form on region-major codes `Z = Dᵀ` (`N × d_lat`); `F` is a constant.
pub fn kmeans_loss_op(tape: &mut Tape, z: Var, f: &Tensor) -> Result<Var> {
    if tape.value(z).rows() != f.rows() {
        return Err(Error::shape(
            "kmeans_loss",
            format!("Z {:?}, F {:?}", tape.value(z).shape(), f.shape()),
        ));
    }
    let ft = tape.constant(f.transpose());
    let proj = tape.matmul(ft, z)?;
    let total = tape.sum_squares(z);
    let captured = tape.sum_squares(proj);
    tape.sub(total, captured)
}

/// `S[n·T + t, t′] = p_{t,n} · m̃_{t′,n}` for each region block.
fn segment_scores(p: &Tensor, m_aug: &Tensor, seg_len: usize) -> Tensor {
    let n = p.rows() / seg_len;
    let mut s = Tensor::zeros([p.rows(), seg_len]);
    for r in 0..n {
        for t in 0..seg_len {
            let pr = p.row(r * seg_len + t);
            for u in 0..seg_len {
                let dot = pr
                    .iter()
                    .zip(m_aug.row(r * seg_len + u))
                    .fold(0.0, |acc, (a, b)| acc + a * b);
                s.set(r * seg_len + t, u, dot);
            }
        }
    }
    s
}

fn segment_scores_op(tape: &mut Tape, p: Var, m_aug: Var, seg_len: usize) -> Result<Var> {
    let (pv, mv) = (tape.value(p), tape.value(m_aug));
    if pv.shape() != mv.shape() || seg_len == 0 || pv.rows() % seg_len != 0 {
        return Err(Error::shape(
            "bilinear_scores",
            format!("{:?} vs {:?}, T={seg_len}", pv.shape(), mv.shape()),
        ));
    }
    let value = segment_scores(pv, mv, seg_len);
    Ok(tape.custom(&[p, m_aug], value, move |ctx| {
        let (p, m, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let n = p.rows() / seg_len;
        let mut gp = Tensor::zeros(p.shape().to_vec());
        let mut gm = Tensor::zeros(m.shape().to_vec());
        for r in 0..n {
            for t in 0..seg_len {
                for u in 0..seg_len {
                    let w = g.at(r * seg_len + t, u);
                    if w == 0.0 {
                        continue;
                    }
                    let (a, b) = (r * seg_len + t, r * seg_len + u);
                    for d in 0..p.cols() {
                        let v = gp.at(a, d) + w * m.at(b, d);
                        gp.set(a, d, v);
                        let v = gm.at(b, d) + w * p.at(a, d);
                        gm.set(b, d, v);
                    }
                }
            }
        }
        vec![ctx.needs[0].then_some(gp), ctx.needs[1].then_some(gm)]
    }))
}

/// Positive and negative scores of the temporal objective.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearScores {
    /// `z′[t, n]`
    pub positive: Tensor,
    /// `N·T × T`; row `n·T + t`, column `t′` holds `m_{t,n}ᵀ W m̃_{t′,n}`,
    /// the diagonal of each block being the positive
    pub all: Tensor,
}

impl BilinearScores {
    /// `z″` for anchor `t`, region `n`: every column except `t`.
    pub fn negatives(&self, t: usize, n: usize) -> Vec<f64> {
        let seg_len = self.positive.rows();
        self.all
            .row(n * seg_len + t)
            .iter()
            .enumerate()
            .filter(|&(u, _)| u != t)
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Scores between per-step embeddings of the two views (both `N·T × D`).
pub fn bilinear_scores(m: &Tensor, m_aug: &Tensor, w_b: &Tensor, seg_len: usize) -> Result<BilinearScores> {
    if m.shape() != m_aug.shape() || seg_len == 0 || m.rows() % seg_len != 0 {
        return Err(Error::shape(
            "bilinear_scores",
            format!("{:?} vs {:?}, T={seg_len}", m.shape(), m_aug.shape()),
        ));
    }
    let p = matmul(m, w_b)?;
    let all = segment_scores(&p, m_aug, seg_len);
    let n = m.rows() / seg_len;
    let mut positive = Tensor::zeros([seg_len, n]);
    for r in 0..n {
        for t in 0..seg_len {
            positive.set(t, r, all.at(r * seg_len + t, t));
        }
    }
    Ok(BilinearScores { positive, all })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `−log( e^{z′/τ} / (e^{z′/τ} + Σ e^{z″/τ}) )`, evaluated stably.
pub fn info_nce(positive: f64, negatives: &[f64], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let all = std::iter::once(positive).chain(negatives.iter().copied()).map(|z| z / tau);
    Ok(log_sum_exp(all) - positive / tau)
}

/// Mean of [`info_nce`] over regions and anchor steps.
pub fn temporal_contrastive_loss(scores: &BilinearScores, tau: f64) -> Result<f64> {
    let (seg_len, n) = (scores.positive.rows(), scores.positive.cols());
    if seg_len < 2 {
        return Err(Error::InvalidArgument("contrastive loss needs at least two steps".into()));
    }
    let mut total = 0.0;
    for r in 0..n {
        for t in 0..seg_len {
            total += info_nce(scores.positive.at(t, r), &scores.negatives(t, r), tau)?;
        }
    }
    Ok(total / (n * seg_len) as f64)
}

/// Tape form over the `N·T × T` score matrix.
pub fn contrastive_loss_op(tape: &mut Tape, scores: Var, seg_len: usize, tau: f64) -> Result<Var> {
    let s = tape.value(scores);
    if seg_len < 2 || s.cols() != seg_len || s.rows() % seg_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs T ≥ 2 and an N·T × T score matrix, got {:?} with T={seg_len}",
            s.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let rows = s.rows();
    let mut total = 0.0;
    for row in 0..rows {
        let t = row % seg_len;
        let r = s.row(row);
        total += log_sum_exp(r.iter().map(|z| z / tau)) - r[t] / tau;
    }
    let value = Tensor::scalar(total / rows as f64);
    Ok(tape.custom(&[scores], value, move |ctx| {
        let (s, g) = (ctx.inputs[0], ctx.grad.item());
        let scale = g / (tau * rows as f64);
        let mut out = Tensor::zeros(s.shape().to_vec());
        for row in 0..rows {
            let t = row % seg_len;
            let r = s.row(row);
            let lse = log_sum_exp(r.iter().map(|z| z / tau));
            for (u, o) in out.row_mut(row).iter_mut().enumerate() {
                let soft = (r[u] / tau - lse).exp();
                *o = scale * (soft - if u == t { 1.0 } else { 0.0 });
            }
        }
        vec![Some(out)]
    }))
}
