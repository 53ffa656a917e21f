//! RMSE, Recall@k and MAP@k over sequences of risk maps.
//!
//! Inputs are `T × N` tensors: one row per time slot, one column per region.
//! A region counts as an actual accident site at slot `t` when its true risk
//! is positive. Predicted rankings order regions by descending score, ties
//! going to the lower region index.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Top-k settings. `k` must satisfy `1 ≤ k ≤ N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopKConfig {
    pub k: usize,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self { k: 20 }
    }
}

fn check_pair(op: &'static str, truth: &Tensor, pred: &Tensor) -> Result<(usize, usize)> {
    if truth.rank() != 2 || truth.shape() != pred.shape() {
        return Err(Error::shape(
            op,
            format!("truth {:?} vs prediction {:?}", truth.shape(), pred.shape()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok((truth.rows(), truth.cols()))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside [1, {n}]")));
    }
    Ok(())
}

/// `sqrt( Σ_{t,n} (X − X̂)² / (T·N) )`.
pub fn rmse(truth: &Tensor, pred: &Tensor) -> Result<f64> {
    let (t, n) = check_pair("rmse", truth, pred)?;
    let mut per_slot = 0.0;
    for s in 0..t {
        let sse = truth
            .row(s)
            .iter()
            .zip(pred.row(s))
            .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
        per_slot += sse / n as f64;
    }
    Ok((per_slot / t as f64).sqrt())
}

/// Indices of the `k` highest scores; equal scores rank the lower index first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `(1/T) Σ_t |R_t ∩ R′_t| / k`, with `R_t` the regions with positive true
/// risk and `R′_t` the predicted top-k.
pub fn recall_at_k(truth: &Tensor, pred: &Tensor, cfg: TopKConfig) -> Result<f64> {
    let (t, n) = check_pair("recall_at_k", truth, pred)?;
    check_k(cfg.k, n)?;
    let mut total = 0.0;
    for s in 0..t {
        let hits = top_k(pred.row(s), cfg.k)
            .into_iter()
            .filter(|&r| truth.at(s, r) > 0.0)
            .count();
        total += hits as f64 / cfg.k as f64;
    }
    Ok(total / t as f64)
}

/// `(1/T) Σ_t [Σ_{j≤k} pre(j)·rel(j)] / k`, where `pre(j)` is the fraction of
/// relevant regions among ranks `1..=j`.
pub fn map_at_k(truth: &Tensor, pred: &Tensor, cfg: TopKConfig) -> Result<f64> {
    let (t, n) = check_pair("map_at_k", truth, pred)?;
    check_k(cfg.k, n)?;
    let mut total = 0.0;
    for s in 0..t {
        let mut relevant = 0usize;
        let mut ap = 0.0;
        for (j, r) in top_k(pred.row(s), cfg.k).into_iter().enumerate() {
            if truth.at(s, r) > 0.0 {
                relevant += 1;
                ap += relevant as f64 / (j + 1) as f64;
            }
        }
        total += ap / cfg.k as f64;
    }
    Ok(total / t as f64)
}

/// The three evaluation metrics for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub recall: f64,
    pub map: f64,
    pub k: usize,
    pub slots: usize,
}

impl MetricsReport {
    pub fn compute(truth: &Tensor, pred: &Tensor, cfg: TopKConfig) -> Result<Self> {
        Ok(Self {
            rmse: rmse(truth, pred)?,
            recall: recall_at_k(truth, pred, cfg)?,
            map: map_at_k(truth, pred, cfg)?,
            k: cfg.k,
            slots: truth.rows(),
        })
    }

    /// `name value` lines, floats with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "rmse {:.16e}", self.rmse).unwrap();
        writeln!(s, "recall_at_{} {:.16e}", self.k, self.recall).unwrap();
        writeln!(s, "map_at_{} {:.16e}", self.k, self.map).unwrap();
        writeln!(s, "k {}", self.k).unwrap();
        writeln!(s, "slots {}", self.slots).unwrap();
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn rmse_fixtures() {
        let x = t(&[&[1.0, 2.0], &[0.0, 5.0]]);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(rmse(&t(&[&[4.0]]), &t(&[&[1.0]])).unwrap(), 3.0);
        let r = rmse(&t(&[&[3.0, 4.0]]), &t(&[&[0.0, 0.0]])).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&Tensor::zeros([0, 3]), &Tensor::zeros([0, 3])).is_err());
    }

    #[test]
    fn recall_fixtures() {
        // all accident regions predicted, |R_t| ≥ k
        let truth = t(&[&[1.0, 2.0, 1.0, 0.0]]);
        let pred = t(&[&[0.9, 0.8, 0.7, 0.1]]);
        assert_eq!(recall_at_k(&truth, &pred, TopKConfig { k: 3 }).unwrap(), 1.0);
        // disjoint
        let truth = t(&[&[0.0, 0.0, 1.0, 1.0]]);
        let pred = t(&[&[0.9, 0.8, 0.1, 0.0]]);
        assert_eq!(recall_at_k(&truth, &pred, TopKConfig { k: 2 }).unwrap(), 0.0);
        // 2 of top-3
        let truth = t(&[&[1.0, 0.0, 3.0, 2.0, 0.0]]);
        let pred = t(&[&[0.9, 0.8, 0.7, 0.1, 0.0]]);
        let r = recall_at_k(&truth, &pred, TopKConfig { k: 3 }).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn map_fixtures() {
        let cfg = TopKConfig { k: 3 };
        let truth = t(&[&[1.0, 0.0, 1.0, 0.0]]);
        let pred = t(&[&[0.9, 0.8, 0.7, 0.0]]);
        let m = map_at_k(&truth, &pred, cfg).unwrap();
        assert!((m - 5.0 / 9.0).abs() < 1e-15);
        let all = t(&[&[1.0, 1.0, 1.0, 0.0]]);
        assert_eq!(map_at_k(&all, &pred, cfg).unwrap(), 1.0);
        let none = t(&[&[0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(map_at_k(&none, &pred, cfg).unwrap(), 0.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k(&[0.5, 0.7, 0.5, 0.7], 3), vec![1, 3, 0]);
        assert_eq!(top_k(&[0.0; 5], 2), vec![0, 1]);
    }

    #[test]
    fn k_out_of_range() {
        let x = t(&[&[1.0, 0.0]]);
        assert!(recall_at_k(&x, &x, TopKConfig { k: 3 }).is_err());
        assert!(map_at_k(&x, &x, TopKConfig { k: 0 }).is_err());
    }

    #[test]
    fn report_text_has_seventeen_digits() {
        let x = t(&[&[1.0, 0.0]]);
        let p = t(&[&[0.3, 0.1]]);
        let rep = MetricsReport::compute(&x, &p, TopKConfig { k: 1 }).unwrap();
        let text = rep.to_text();
        let line = text.lines().next().unwrap();
        let mantissa = line.split(' ').nth(1).unwrap().split('e').next().unwrap();
        assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
    }
}
