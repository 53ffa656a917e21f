//! Training loop: shuffled mini-batches, two-view encoding, joint loss,
//! Adam, per-epoch cluster refresh, validation and early stopping.
//!
//! Batch order and augmentations are drawn from substreams of the run seed
//! keyed on epoch, batch and position, so a run resumed from a checkpoint
//! replays exactly what the uninterrupted run would have done.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, RunConfig};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{SplitMix64, Tape, Tensor};
use crate::ssl::indicator_from_gram;

use super::adam::AdamState;
use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::loss::LossComponents;
use super::model::{Model, ViewSource, STREAM_AUGMENT, STREAM_SHUFFLE};

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    pub train_prediction: f64,
    pub train_reconstruction: f64,
    pub train_kmeans: f64,
    pub train_temporal: f64,
    pub train_joint: f64,
    pub val_prediction: f64,
    pub val_rmse: f64,
    pub weight_prediction: f64,
    pub weight_spatial: f64,
    pub weight_temporal: f64,
}

impl EpochRecord {
    fn components(&self) -> [f64; 3] {
        [self.train_prediction, self.train_reconstruction, self.train_temporal]
    }
}

pub const HISTORY_HEADER: &str = "epoch,train_prediction,train_reconstruction,train_kmeans,train_temporal,\
train_joint,val_prediction,val_rmse,weight_prediction,weight_spatial,weight_temporal";

/// Writes the history as CSV with round-trip float formatting.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let fields = [
            r.train_prediction,
            r.train_reconstruction,
            r.train_kmeans,
            r.train_temporal,
            r.train_joint,
            r.val_prediction,
            r.val_rmse,
            r.weight_prediction,
            r.weight_spatial,
            r.weight_temporal,
        ];
        out.push_str(&r.epoch.to_string());
        for v in fields {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<'a> {
    ds: &'a Dataset,
    pub model: Model,
    adam: AdamState,
    /// cluster indicator, `N × k`
    f: Option<Tensor>,
    best: Option<(usize, f64, Vec<Tensor>)>,
    bad_epochs: usize,
    epochs_run: usize,
    stopped: bool,
    history: Vec<EpochRecord>,
}

fn ssl_active(cfg: &RunConfig) -> bool {
    cfg.train.loss_weights.spatial > 0.0 || cfg.train.loss_weights.temporal > 0.0
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, config: &RunConfig) -> Result<Self> {
        Self::check(ds, config)?;
        let model = Model::new(config, ds.channels())?;
        let adam = AdamState::new(&model.store);
        let mut t = Self {
            ds,
            model,
            adam,
            f: None,
            best: None,
            bad_epochs: 0,
            epochs_run: 0,
            stopped: false,
            history: Vec::new(),
        };
        if ssl_active(config) {
            t.f = Some(t.initial_indicator()?);
        }
        Ok(t)
    }

    fn check(ds: &Dataset, config: &RunConfig) -> Result<()> {
        config.validate()?;
        if config.window != ds.window {
            return Err(Error::Config("dataset windows differ from the run config".into()));
        }
        if ssl_active(config) {
            if config.ssl.clusters > ds.regions() {
                return Err(Error::Config(format!(
                    "ssl.clusters = {} exceeds the {} regions",
                    config.ssl.clusters,
                    ds.regions()
                )));
            }
            if config.window.len() < 2 {
                return Err(Error::Config("the temporal objective needs a window of at least 2 slots".into()));
            }
        }
        Ok(())
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ds: &'a Dataset, ckpt: &Checkpoint) -> Result<Self> {
        Self::check(ds, &ckpt.config)?;
        let mut model = Model::new(&ckpt.config, ckpt.meta.d_feat)?;
        assign_group(&mut model, ckpt, "param/")?;
        let mut adam = AdamState::new(&model.store);
        for (i, p) in model.store.iter().enumerate() {
            let get = |prefix: &str| {
                ckpt.tensor(&format!("{prefix}{}", p.name))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{}", p.name)))
            };
            adam.m[i] = get("adam.m/")?;
            adam.v[i] = get("adam.v/")?;
        }
        adam.t = ckpt.meta.adam_t;
        let best = match (ckpt.meta.best_epoch, ckpt.meta.best_val) {
            (Some(e), Some(v)) => {
                let params = model
                    .store
                    .iter()
                    .map(|p| {
                        ckpt.tensor(&format!("best/{}", p.name))
                            .cloned()
                            .ok_or_else(|| Error::Format(format!("checkpoint lacks best/{}", p.name)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some((e, v, params))
            }
            _ => None,
        };
        Ok(Self {
            ds,
            model,
            adam,
            f: ckpt.tensor("ssl.f").cloned(),
            best,
            bad_epochs: ckpt.meta.bad_epochs,
            epochs_run: ckpt.meta.epochs_run,
            stopped: ckpt.meta.stopped,
            history: ckpt.meta.history.clone(),
        })
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn cluster_indicator(&self) -> Option<&Tensor> {
        self.f.as_ref()
    }

    fn cfg(&self) -> &RunConfig {
        &self.model.config
    }

    fn clusters(&self) -> usize {
        self.cfg().ssl.clusters
    }

    /// `F` from the un-augmented fusion of the first training batch.
    fn initial_indicator(&self) -> Result<Tensor> {
        let m = &self.model;
        let n = self.ds.regions();
        let count = self.cfg().train.batch_size.min(self.ds.split.train.len());
        let mut gram = Tensor::zeros([n, n]);
        for idx in self.ds.split.train.start..self.ds.split.train.start + count {
            let s = self.ds.sample(idx);
            let emb = m.encoder.apply(&m.store, &s.input, &self.ds.a_hat, m.seg_len())?;
            let fused = crate::ssl::fuse_embeddings(
                &emb,
                &emb,
                m.store.value(m.ssl.w1),
                m.store.value(m.ssl.w2),
            )?;
            let (dlat, _) = crate::ssl::autoencode(
                &fused,
                m.store.value(m.ssl.enc_w),
                m.store.value(m.ssl.enc_b),
                m.store.value(m.ssl.dec_w),
                m.store.value(m.ssl.dec_b),
            )?;
            gram.add_assign(&crate::ssl::latent_gram(&dlat));
        }
        let gram = gram.map(|v| v / count as f64);
        indicator_from_gram(&gram, self.clusters())
    }

    /// Base loss weights, optionally rescaled by dynamic weight averaging.
    pub fn effective_weights(&self) -> LossWeights {
        let base = self.cfg().train.loss_weights.clone();
        let dwa = &self.cfg().train.dwa;
        let h = &self.history;
        if !dwa.enabled || h.len() < 2 {
            return base;
        }
        let (prev, prev2) = (h[h.len() - 1].components(), h[h.len() - 2].components());
        let ratios: Vec<f64> = prev
            .iter()
            .zip(prev2)
            .map(|(&a, b)| if b > 0.0 { a / b } else { 1.0 })
            .collect();
        let exps: Vec<f64> = ratios.iter().map(|r| (r / dwa.temperature).exp()).collect();
        let total: f64 = exps.iter().sum();
        let factor: Vec<f64> = exps.iter().map(|e| 3.0 * e / total).collect();
        LossWeights {
            prediction: base.prediction * factor[0],
            spatial: base.spatial * factor[1],
            temporal: base.temporal * factor[2],
            kmeans: base.kmeans,
        }
    }

    fn batch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = self.ds.split.train.clone().collect();
        SplitMix64::substream(self.cfg().train.seed, &[STREAM_SHUFFLE, epoch as u64]).shuffle(&mut order);
        order
    }

    /// Runs one epoch; returns `None` once training has stopped early or
    /// reached `max_epochs`.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.stopped || self.epochs_run >= self.cfg().train.max_epochs {
            return Ok(None);
        }
        let epoch = self.epochs_run;
        let weights = self.effective_weights();
        let order = self.batch_order(epoch);
        let batch = self.cfg().train.batch_size;
        let seed = self.cfg().train.seed;
        let magnitude = self.cfg().augment.magnitude_scale * self.ds.risk_std;
        let use_ssl = ssl_active(self.cfg());
        let n = self.ds.regions();

        let mut sums = LossComponents::default();
        let mut joint_sum = 0.0;
        let mut gram = Tensor::zeros([n, n]);
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(batch).enumerate() {
            self.model.store.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let scaled = LossWeights {
                prediction: weights.prediction * scale,
                spatial: weights.spatial * scale,
                temporal: weights.temporal * scale,
                kmeans: weights.kmeans,
            };
            for (pos, &idx) in chunk.iter().enumerate() {
                let sample = self.ds.sample(idx);
                let mut tape = Tape::new();
                let vars = tape.bind(&self.model.store);
                let view = if use_ssl {
                    ViewSource::Sample {
                        rng: SplitMix64::substream(seed, &[STREAM_AUGMENT, epoch as u64, b as u64, pos as u64]),
                        magnitude,
                    }
                } else {
                    ViewSource::None
                };
                let terms = self
                    .model
                    .objective(&mut tape, &vars, &sample, self.ds, view, self.f.as_ref(), &scaled)?;
                let val = |v: Option<crate::numerics::Var>| v.map_or(0.0, |v| tape.value(v).item());
                let c = LossComponents {
                    prediction: tape.value(terms.prediction).item(),
                    reconstruction: val(terms.reconstruction),
                    kmeans: val(terms.kmeans),
                    temporal: val(terms.temporal),
                };
                let joint = tape.value(terms.joint).item() / scale;
                if !joint.is_finite() {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        step: b,
                        detail: format!(
                            "sample {idx}: joint {joint}, prediction {}, reconstruction {}, kmeans {}, temporal {}; \
                             largest |param| {:.3e}",
                            c.prediction,
                            c.reconstruction,
                            c.kmeans,
                            c.temporal,
                            self.model.store.iter().map(|p| p.value.max_abs()).fold(0.0, f64::max)
                        ),
                    });
                }
                if let Some(z) = terms.latent {
                    let zv = tape.value(z);
                    gram.add_assign(&crate::numerics::matmul_nt(zv, zv));
                }
                tape.backward(terms.joint)?.accumulate_into(&mut self.model.store);
                sums.prediction += c.prediction;
                sums.reconstruction += c.reconstruction;
                sums.kmeans += c.kmeans;
                sums.temporal += c.temporal;
                joint_sum += joint;
                seen += 1;
            }
            self.adam
                .step(&mut self.model.store, &self.model.config.train)
                .map_err(|e| Error::Divergence {
                    epoch: epoch + 1,
                    step: b,
                    detail: e.to_string(),
                })?;
        }

        if use_ssl && seen > 0 {
            let g = gram.map(|v| v / seen as f64);
            self.f = Some(indicator_from_gram(&g, self.clusters())?);
        }

        let val_range = self.ds.split.val.clone();
        let val_prediction = self.model.prediction_loss(self.ds, val_range.clone())?;
        let (truth, pred) = self.model.predict_range(self.ds, val_range)?;
        let val_rmse = crate::metrics::rmse(&truth, &pred)?;
        let denom = seen.max(1) as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_prediction: sums.prediction / denom,
            train_reconstruction: sums.reconstruction / denom,
            train_kmeans: sums.kmeans / denom,
            train_temporal: sums.temporal / denom,
            train_joint: joint_sum / denom,
            val_prediction,
            val_rmse,
            weight_prediction: weights.prediction,
            weight_spatial: weights.spatial,
            weight_temporal: weights.temporal,
        };
        log::info!(
            "epoch {:>3}  train L_p {:.6}  joint {:.6}  val L_p {:.6}  val rmse {:.4}",
            record.epoch,
            record.train_prediction,
            record.train_joint,
            record.val_prediction,
            record.val_rmse
        );
        self.history.push(record);
        self.epochs_run += 1;

        let improved = self.best.as_ref().is_none_or(|(_, v, _)| val_prediction < *v);
        if improved {
            let snapshot = self.model.store.iter().map(|p| p.value.clone()).collect();
            self.best = Some((epoch + 1, val_prediction, snapshot));
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg().train.patience {
                self.stopped = true;
            }
        }
        Ok(Some(record))
    }

    /// Runs epochs until early stopping or `max_epochs`.
    pub fn run(&mut self) -> Result<()> {
        while self.run_epoch()?.is_some() {}
        Ok(())
    }

    /// Snapshot of the full training state (current parameters).
    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        let mut tensors = Vec::with_capacity(5 * store.len() + 1);
        for p in store.iter() {
            tensors.push((format!("param/{}", p.name), p.value.clone()));
        }
        if let Some((_, _, best)) = &self.best {
            for (p, t) in store.iter().zip(best) {
                tensors.push((format!("best/{}", p.name), t.clone()));
            }
        }
        for ((p, m), v) in store.iter().zip(&self.adam.m).zip(&self.adam.v) {
            tensors.push((format!("adam.m/{}", p.name), m.clone()));
            tensors.push((format!("adam.v/{}", p.name), v.clone()));
        }
        if let Some(f) = &self.f {
            tensors.push(("ssl.f".into(), f.clone()));
        }
        Checkpoint {
            config: self.model.config.clone(),
            meta: CheckpointMeta {
                d_feat: self.model.d_feat,
                rows: self.ds.grid.rows,
                cols: self.ds.grid.cols,
                norm: self.ds.norm.clone(),
                seed: self.model.config.train.seed,
                epochs_run: self.epochs_run,
                best_epoch: self.best.as_ref().map(|b| b.0),
                best_val: self.best.as_ref().map(|b| b.1),
                bad_epochs: self.bad_epochs,
                stopped: self.stopped,
                adam_t: self.adam.t,
                history: self.history.clone(),
            },
            tensors,
        }
    }

    /// Restores the best validation parameters and returns the final checkpoint.
    pub fn finish(mut self) -> TrainOutcome {
        if let Some((_, _, best)) = &self.best {
            for (p, t) in self.model.store.iter_mut().zip(best) {
                p.value = t.clone();
            }
        }
        let checkpoint = self.checkpoint();
        TrainOutcome {
            checkpoint,
            history: self.history,
        }
    }
}

fn assign_group(model: &mut Model, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let t = ckpt
            .tensor(&format!("{prefix}{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{name}")))?;
        model.store.assign(&name, t.clone())?;
    }
    Ok(())
}

impl Model {
    /// Rebuilds the model stored in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&ckpt.config, ckpt.meta.d_feat)?;
        assign_group(&mut model, ckpt, "param/")?;
        Ok(model)
    }
}

/// Trains until early stopping or `max_epochs` and restores the best epoch.
pub fn train(ds: &Dataset, config: &RunConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(ds, config)?;
    t.run()?;
    Ok(t.finish())
}
