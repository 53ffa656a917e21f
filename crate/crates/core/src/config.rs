//! Run configuration. Every field has a default; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub ssl: SslConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    Four,
    Eight,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub cell_size_km: f64,
    pub neighborhood: Neighborhood,
    pub slot_minutes: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cell_size_km: 2.0,
            neighborhood: Neighborhood::Four,
            slot_minutes: 60,
        }
    }
}

/// Encoder window: `recent` slots right before the target plus `weekly`
/// same-slot lookbacks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub recent: usize,
    pub weekly: usize,
    pub slots_per_week: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            recent: 3,
            weekly: 4,
            slots_per_week: 168,
        }
    }
}

impl WindowConfig {
    pub fn len(&self) -> usize {
        self.recent + self.weekly
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// embedding of the slot adjacent to the target
    Last,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
    /// number of stacked (eKamba, GCN, eKamba) layers
    pub layers: usize,
    pub spline_degree: usize,
    pub num_basis: usize,
    pub readout: Readout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_state: 16,
            conv_width: 4,
            layers: 2,
            spline_degree: 3,
            num_basis: 8,
            readout: Readout::Last,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub feature_rate: f64,
    pub graph_rate: f64,
    /// injected risk = magnitude_scale × risk-channel std
    pub magnitude_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            feature_rate: 0.2,
            graph_rate: 0.5,
            magnitude_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub temperature: f64,
    pub clusters: usize,
    /// defaults to d_model / 2
    pub latent_dim: Option<usize>,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            clusters: 4,
            latent_dim: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub prediction: f64,
    pub spatial: f64,
    pub temporal: f64,
    /// weight of the k-means term inside the spatial loss
    pub kmeans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            prediction: 1.0,
            spatial: 0.5,
            temporal: 0.5,
            kmeans: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DwaConfig {
    pub enabled: bool,
    pub temperature: f64,
}

impl Default for DwaConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            temperature: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// λ for risk levels 0, 1, 2 and ≥3
    pub risk_weights: [f64; 4],
    pub loss_weights: LossWeights,
    pub dwa: DwaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            risk_weights: [0.05, 0.2, 0.25, 0.5],
            loss_weights: LossWeights::default(),
            dwa: DwaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { k: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub d_model: usize,
    pub batch: usize,
    pub num_basis: usize,
    pub spline_degree: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// extra batch sizes for the monotonicity sanity check
    pub batch_sweep: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            batch: 32,
            num_basis: 8,
            spline_degree: 3,
            repeats: 30,
            warmup: 5,
            batch_sweep: Vec::new(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn latent_dim(&self) -> usize {
        self.ssl.latent_dim.unwrap_or((self.model.d_model / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.window.is_empty() {
            return bad("window.recent + window.weekly must be at least 1");
        }
        if self.window.weekly > 0 && self.window.slots_per_week == 0 {
            return bad("window.slots_per_week must be positive");
        }
        let m = &self.model;
        if m.d_model == 0 || m.d_state == 0 || m.conv_width == 0 || m.layers == 0 {
            return bad("model widths and layer count must be positive");
        }
        if m.num_basis < m.spline_degree + 1 {
            return bad("model.num_basis must be at least spline_degree + 1");
        }
        for (name, r) in [
            ("augment.feature_rate", self.augment.feature_rate),
            ("augment.graph_rate", self.augment.graph_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.ssl.temperature > 0.0) {
            return bad("ssl.temperature must be positive");
        }
        if self.ssl.clusters == 0 || self.latent_dim() == 0 {
            return bad("ssl.clusters and latent_dim must be positive");
        }
        let t = &self.train;
        if t.batch_size == 0 || t.patience == 0 {
            return bad("train.batch_size and train.patience must be at least 1");
        }
        if t.risk_weights.iter().any(|&w| !(w > 0.0)) {
            return bad("train.risk_weights must be positive");
        }
        let lw = &t.loss_weights;
        if [lw.prediction, lw.spatial, lw.temporal, lw.kmeans]
            .iter()
            .any(|&w| !(w >= 0.0))
        {
            return bad("train.loss_weights must be non-negative");
        }
        if !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("invalid optimizer constants");
        }
        if self.metrics.k == 0 {
            return bad("metrics.k must be at least 1");
        }
        if self.bench.repeats == 0 {
            return bad("bench.repeats must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.augment.feature_rate, 0.2);
        assert_eq!(cfg.latent_dim(), 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 77;
        cfg.model.readout = Readout::Mean;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_bad_rates() {
        assert!(RunConfig::from_json(r#"{"augment": {"graph_rate": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"ssl": {"temperature": 0.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"window": {"recent": 0, "weekly": 0}}"#).is_err());
    }
}
