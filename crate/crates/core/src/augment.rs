//! Heterogeneity scores and the two adaptive augmentations.
//!
//! `C` is the output of the first temporal block, laid out like every other
//! encoder sequence (`N·T × D`, row `n·T + t`). Scores `q` and selection
//! weights are returned as `T × N` tensors.
//!
//! Both augmentations are pure functions of their inputs and the generator
//! handed in; the trainer derives one generator per sample with
//! [`SplitMix64::substream`] keyed on `(epoch, batch, sample)`.

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::graph::normalize_adjacency;
use crate::numerics::{softmax, SplitMix64, Tensor};

fn check_sequence(op: &'static str, c: &Tensor, seg_len: usize) -> Result<usize> {
    if c.rank() != 2 || seg_len == 0 || c.rows() % seg_len != 0 {
        return Err(Error::shape(op, format!("sequence {:?} with T={seg_len}", c.shape())));
    }
    Ok(c.rows() / seg_len)
}

/// `q[t, n] = c_{t,n} · w0`.
pub fn local_global_scores(c: &Tensor, w0: &Tensor, seg_len: usize) -> Result<Tensor> {
    let n = check_sequence("local_global_scores", c, seg_len)?;
    if w0.len() != c.cols() {
        return Err(Error::shape(
            "local_global_scores",
            format!("w0 has {} entries, embeddings have {}", w0.len(), c.cols()),
        ));
    }
    let mut q = Tensor::zeros([seg_len, n]);
    for r in 0..n {
        for t in 0..seg_len {
            let dot = c
                .row(r * seg_len + t)
                .iter()
                .zip(w0.data())
                .fold(0.0, |s, (a, b)| s + a * b);
            q.set(t, r, dot);
        }
    }
    Ok(q)
}

/// `p_n = Σ_t q[t, n] · c_{t,n}`, an `N × D` matrix.
pub fn temporal_aggregate(q: &Tensor, c: &Tensor, seg_len: usize) -> Result<Tensor> {
    let n = check_sequence("temporal_aggregate", c, seg_len)?;
    if q.shape() != [seg_len, n] {
        return Err(Error::shape(
            "temporal_aggregate",
            format!("q {:?} vs {seg_len} steps × {n} regions", q.shape()),
        ));
    }
    let mut p = Tensor::zeros([n, c.cols()]);
    for r in 0..n {
        for t in 0..seg_len {
            let w = q.at(t, r);
            let src = c.row(r * seg_len + t).to_vec();
            for (o, v) in p.row_mut(r).iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    Ok(p)
}

/// Pearson correlations between region series.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    /// `N × N`, symmetric
    pub o: Tensor,
    /// regions whose series is constant; their pairs are 0
    pub constant: Vec<bool>,
}

/// Pearson correlation between the columns of `s` (`T × N`, `T ≥ 2`).
pub fn pearson_matrix(s: &Tensor) -> Result<Correlation> {
    if s.rank() != 2 || s.rows() < 2 {
        return Err(Error::shape(
            "pearson_matrix",
            format!("need at least two steps, got {:?}", s.shape()),
        ));
    }
    let (t, n) = (s.rows(), s.cols());
    let mut centered = vec![0.0; t * n];
    let mut norm = vec![0.0; n];
    for r in 0..n {
        let mean = (0..t).fold(0.0, |acc, k| acc + s.at(k, r)) / t as f64;
        let mut ss = 0.0;
        for k in 0..t {
            let v = s.at(k, r) - mean;
            centered[r * t + k] = v;
            ss += v * v;
        }
        norm[r] = ss.sqrt();
    }
    let constant: Vec<bool> = norm.iter().map(|&v| v == 0.0).collect();
    let mut o = Tensor::zeros([n, n]);
    for a in 0..n {
        for b in a..n {
            let v = if constant[a] || constant[b] {
                0.0
            } else if a == b {
                1.0
            } else {
                let cov = (0..t).fold(0.0, |acc, k| acc + centered[a * t + k] * centered[b * t + k]);
                (cov / (norm[a] * norm[b])).clamp(-1.0, 1.0)
            };
            o.set(a, b, v);
            o.set(b, a, v);
        }
    }
    Ok(Correlation { o, constant })
}

/// Row-wise `softmax(−q)`: the per-slot region selection distribution.
pub fn selection_weights(q: &Tensor) -> Result<Tensor> {
    let mut alpha = Tensor::zeros(q.shape().to_vec());
    for t in 0..q.rows() {
        let neg: Vec<f64> = q.row(t).iter().map(|v| -v).collect();
        alpha.row_mut(t).copy_from_slice(&softmax(&neg)?);
    }
    Ok(alpha)
}

/// Draws `m` distinct indices, each draw proportional to the remaining weights.
pub fn weighted_sample_without_replacement(weights: &[f64], m: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(m.min(w.len()));
    for _ in 0..m.min(w.len()) {
        let total: f64 = w.iter().sum();
        let choice = if total > 0.0 {
            let mut u = rng.next_f64() * total;
            let mut choice = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi <= 0.0 {
                    continue;
                }
                choice = Some(i);
                if u < wi {
                    break;
                }
                u -= wi;
            }
            choice.expect("positive total")
        } else {
            // all remaining mass underflowed: uniform over what is left
            let left: Vec<usize> = (0..w.len()).filter(|i| !picked.contains(i)).collect();
            left[rng.below(left.len() as u64) as usize]
        };
        picked.push(choice);
        w[choice] = 0.0;
    }
    picked
}

/// Result of an incident-level augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidentAugment {
    pub x: Tensor,
    /// regions perturbed at each window step
    pub selected: Vec<Vec<usize>>,
}

/// Regions perturbed per slot: `⌈rate · N⌉`.
pub fn incident_count(rate: f64, regions: usize) -> usize {
    ((rate * regions as f64).ceil() as usize).min(regions)
}

/// Adds `magnitude` to the risk channel (column 0) of `⌈rate·N⌉` regions per
/// window step, chosen without replacement with probabilities `softmax(−q)`.
pub fn incident_augment(
    x: &Tensor,
    q: &Tensor,
    cfg: &AugmentConfig,
    magnitude: f64,
    rng: &mut SplitMix64,
) -> Result<IncidentAugment> {
    let (seg_len, n) = (q.rows(), q.cols());
    if x.rank() != 2 || x.rows() != n * seg_len || x.cols() == 0 {
        return Err(Error::shape(
            "incident_augment",
            format!("x {:?} vs q {:?}", x.shape(), q.shape()),
        ));
    }
    let alpha = selection_weights(q)?;
    let m = incident_count(cfg.feature_rate, n);
    let mut out = x.clone();
    let mut selected = Vec::with_capacity(seg_len);
    for t in 0..seg_len {
        let picks = if m == 0 {
            Vec::new()
        } else {
            weighted_sample_without_replacement(alpha.row(t), m, rng)
        };
        for &r in &picks {
            let v = out.at(r * seg_len + t, 0) + magnitude;
            out.set(r * seg_len + t, 0, v);
        }
        selected.push(picks);
    }
    Ok(IncidentAugment { x: out, selected })
}

/// Result of a graph-structure augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAugment {
    pub adjacency: Tensor,
    pub removed: Vec<(usize, usize)>,
    pub added: Vec<(usize, usize)>,
}

/// Removes edges with probabilities `softmax(−o)` over existing edges and
/// adds as many edges between the highest-correlated non-adjacent pairs.
/// The removal count has expectation `rate · |E|` (randomized rounding).
pub fn graph_augment(a: &Tensor, o: &Tensor, rate: f64, rng: &mut SplitMix64) -> Result<GraphAugment> {
    if a.rank() != 2 || a.rows() != a.cols() || o.shape() != a.shape() {
        return Err(Error::shape(
            "graph_augment",
            format!("adjacency {:?}, correlation {:?}", a.shape(), o.shape()),
        ));
    }
    let n = a.rows();
    let mut edges = Vec::new();
    let mut free = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if a.at(i, j) != a.at(j, i) {
                return Err(Error::InvalidArgument(format!(
                    "graph_augment: adjacency is not symmetric at ({i}, {j})"
                )));
            }
            if a.at(i, j) != 0.0 {
                edges.push((i, j));
            } else {
                free.push((i, j));
            }
        }
    }
    let mut out = a.clone();
    for i in 0..n {
        out.set(i, i, 0.0);
    }
    if edges.is_empty() || rate <= 0.0 {
        return Ok(GraphAugment {
            adjacency: out,
            removed: Vec::new(),
            added: Vec::new(),
        });
    }
    let expected = rate * edges.len() as f64;
    let mut count = expected.floor() as usize;
    if rng.next_f64() < expected - expected.floor() {
        count += 1;
    }
    let beta = softmax(&edges.iter().map(|&(i, j)| -o.at(i, j)).collect::<Vec<_>>())?;
    let mut removed: Vec<(usize, usize)> = weighted_sample_without_replacement(&beta, count, rng)
        .into_iter()
        .map(|k| edges[k])
        .collect();
    removed.sort_unstable();
    for &(i, j) in &removed {
        out.set(i, j, 0.0);
        out.set(j, i, 0.0);
    }
    // stable sort keeps index order among equal correlations
    free.sort_by(|&(a1, b1), &(a2, b2)| o.at(a2, b2).total_cmp(&o.at(a1, b1)));
    let added: Vec<(usize, usize)> = free.into_iter().take(removed.len()).collect();
    for &(i, j) in &added {
        out.set(i, j, 1.0);
        out.set(j, i, 1.0);
    }
    Ok(GraphAugment {
        adjacency: out,
        removed,
        added,
    })
}

/// An augmented view of one sample.
#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub x: Tensor,
    pub adjacency: Tensor,
    pub a_hat: Tensor,
    pub q: Tensor,
}

/// Computes `q` from the first-block output, then applies both augmentations.
pub fn augment_view(
    x: &Tensor,
    adjacency: &Tensor,
    first: &Tensor,
    w0: &Tensor,
    seg_len: usize,
    cfg: &AugmentConfig,
    magnitude: f64,
    rng: &mut SplitMix64,
) -> Result<AugmentedView> {
    let q = local_global_scores(first, w0, seg_len)?;
    let inc = incident_augment(x, &q, cfg, magnitude, rng)?;
    let graph = if seg_len >= 2 && cfg.graph_rate > 0.0 {
        let corr = pearson_matrix(&q)?;
        graph_augment(adjacency, &corr.o, cfg.graph_rate, rng)?.adjacency
    } else {
        adjacency.clone()
    };
    let a_hat = normalize_adjacency(&graph)?;
    Ok(AugmentedView {
        x: inc.x,
        adjacency: graph,
        a_hat,
        q,
    })
}
