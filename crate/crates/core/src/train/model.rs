//! The full model: shared spatio-temporal encoder, risk head, discrepancy
//! direction and the self-supervised heads, plus the per-sample objective.

use crate::augment::{augment_view, AugmentedView};
use crate::config::{LossWeights, RunConfig};
use crate::dataio::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::StEncoder;
use crate::metrics::{MetricsReport, TopKConfig};
use crate::numerics::{ParamId, ParamStore, ParamVars, SplitMix64, Tape, Tensor, Var};
use crate::ssl::{contrastive_loss_op, kmeans_loss_op, reconstruction_loss_op, SslParams};

use super::head::PredictHead;
use super::loss::{level_weights, weighted_loss_op};

/// Stream keys for [`SplitMix64::substream`].
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_AUGMENT: u64 = 3;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub d_feat: usize,
    pub store: ParamStore,
    pub encoder: StEncoder,
    pub head: PredictHead,
    /// global direction of the local-to-global discrepancy score
    pub w0: ParamId,
    pub ssl: SslParams,
}

/// Where the second view of a sample comes from.
pub enum ViewSource<'a> {
    /// supervised only; no second encoder pass
    None,
    /// a precomputed augmentation (gradient checks, tests)
    Fixed(&'a AugmentedView),
    /// augment on the fly from the first-block output
    Sample { rng: SplitMix64, magnitude: f64 },
}

/// Tape handles of one sample's objective.
#[derive(Debug, Clone, Copy)]
pub struct StepTerms {
    pub joint: Var,
    pub prediction: Var,
    pub reconstruction: Option<Var>,
    pub kmeans: Option<Var>,
    pub temporal: Option<Var>,
    /// latent codes `Z` (`N × d_lat`)
    pub latent: Option<Var>,
}

impl Model {
    pub fn new(config: &RunConfig, d_feat: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::substream(config.train.seed, &[STREAM_INIT]);
        let mut store = ParamStore::new();
        let encoder = StEncoder::new(&mut store, d_feat, &config.model, &mut rng)?;
        let d = config.model.d_model;
        let head = PredictHead::new(&mut store, "head", d, &mut rng);
        let a = 1.0 / (d as f64).sqrt();
        let w0 = store.add("aug.w0", Tensor::from_fn([d], || rng.uniform(-a, a)));
        let ssl = SslParams::new(&mut store, d, config.latent_dim(), &mut rng);
        Ok(Self {
            config: config.clone(),
            d_feat,
            store,
            encoder,
            head,
            w0,
            ssl,
        })
    }

    pub fn seg_len(&self) -> usize {
        self.config.window.len()
    }

    /// Builds the per-sample objective on `tape`. `weights` are the effective
    /// loss weights (already scaled by any batch averaging).
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        sample: &Sample,
        ds: &Dataset,
        view: ViewSource<'_>,
        f: Option<&Tensor>,
        weights: &LossWeights,
    ) -> Result<StepTerms> {
        let seg_len = self.seg_len();
        let lambda = level_weights(&sample.target_raw, &self.config.train.risk_weights)?;
        let x = tape.constant(sample.input.clone());
        let enc = self.encoder.encode(tape, vars, x, &ds.a_hat, seg_len)?;
        let pred = self.head.forward(tape, vars, enc.regions)?;
        let prediction = weighted_loss_op(tape, pred, &sample.target, lambda)?;

        let owned;
        let view = match view {
            ViewSource::None => None,
            ViewSource::Fixed(v) => Some(v),
            ViewSource::Sample { mut rng, magnitude } => {
                owned = augment_view(
                    &sample.input,
                    &ds.adjacency,
                    tape.value(enc.first),
                    self.store.value(self.w0),
                    seg_len,
                    &self.config.augment,
                    magnitude,
                    &mut rng,
                )?;
                Some(&owned)
            }
        };
        let Some(view) = view else {
            let joint = tape.linear_combination(&[(weights.prediction, prediction)])?;
            return Ok(StepTerms {
                joint,
                prediction,
                reconstruction: None,
                kmeans: None,
                temporal: None,
                latent: None,
            });
        };

        let xa = tape.constant(view.x.clone());
        let aug = self.encoder.encode(tape, vars, xa, &view.a_hat, seg_len)?;
        let v = self.ssl.fuse(tape, vars, enc.regions, aug.regions)?;
        let (z, rec) = self.ssl.autoencode(tape, vars, v)?;
        let reconstruction = reconstruction_loss_op(tape, v, rec)?;
        let f = f.ok_or_else(|| Error::InvalidArgument("spatial loss needs a cluster indicator".into()))?;
        let kmeans = kmeans_loss_op(tape, z, f)?;
        let scores = self.ssl.scores(tape, vars, enc.sequence, aug.sequence, seg_len)?;
        let temporal = contrastive_loss_op(tape, scores, seg_len, self.config.ssl.temperature)?;
        let joint = tape.linear_combination(&[
            (weights.prediction, prediction),
            (weights.spatial, reconstruction),
            (weights.spatial * weights.kmeans, kmeans),
            (weights.temporal, temporal),
        ])?;
        Ok(StepTerms {
            joint,
            prediction,
            reconstruction: Some(reconstruction),
            kmeans: Some(kmeans),
            temporal: Some(temporal),
            latent: Some(z),
        })
    }

    /// Normalized per-region predictions for one sample.
    pub fn predict_normalized(&self, ds: &Dataset, sample: &Sample) -> Result<Vec<f64>> {
        let m = self.encoder.apply(&self.store, &sample.input, &ds.a_hat, self.seg_len())?;
        self.head.apply(&self.store, &m)
    }

    /// Denormalized per-region risk predictions.
    pub fn predict(&self, ds: &Dataset, sample: &Sample) -> Result<Vec<f64>> {
        Ok(self
            .predict_normalized(ds, sample)?
            .into_iter()
            .map(|v| ds.norm.denormalize_value(0, v))
            .collect())
    }

    /// Truth and prediction matrices (`T × N`, raw scale) over sample indices.
    pub fn predict_range(&self, ds: &Dataset, indices: std::ops::Range<usize>) -> Result<(Tensor, Tensor)> {
        let n = ds.regions();
        let mut truth = Tensor::zeros([indices.len(), n]);
        let mut pred = Tensor::zeros([indices.len(), n]);
        for (row, idx) in indices.enumerate() {
            let s = ds.sample(idx);
            let p = self.predict(ds, &s)?;
            truth.row_mut(row).copy_from_slice(&s.target_raw);
            pred.row_mut(row).copy_from_slice(&p);
        }
        Ok((truth, pred))
    }

    /// Mean per-sample weighted prediction loss (normalized space).
    pub fn prediction_loss(&self, ds: &Dataset, indices: std::ops::Range<usize>) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Empty("prediction_loss"));
        }
        let count = indices.len();
        let mut total = 0.0;
        for idx in indices {
            let s = ds.sample(idx);
            let p = self.predict_normalized(ds, &s)?;
            let lambda = level_weights(&s.target_raw, &self.config.train.risk_weights)?;
            total += super::loss::weighted_sq_error(&s.target, &p, &lambda)?;
        }
        Ok(total / count as f64)
    }

    /// RMSE, Recall@k and MAP@k on raw-scale risk; `k` is capped at `N`.
    pub fn evaluate(&self, ds: &Dataset, indices: std::ops::Range<usize>) -> Result<MetricsReport> {
        if indices.is_empty() {
            return Err(Error::Empty("evaluate"));
        }
        let (truth, pred) = self.predict_range(ds, indices)?;
        let k = self.config.metrics.k.min(ds.regions());
        MetricsReport::compute(&truth, &pred, TopKConfig { k })
    }
}
