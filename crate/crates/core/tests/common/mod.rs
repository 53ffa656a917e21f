//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use ekamba::config::RunConfig;
use ekamba::dataio::{synth_city, Dataset};

/// The 8-region desk dataset: a 2×4 grid whose 872 slots yield 200 samples
/// with the default window (3 recent slots, 4 weekly lookbacks).
pub fn desk_dataset(cfg: &RunConfig) -> Dataset {
    let city = synth_city(0, 2, 4, 872, 3).expect("synthetic city");
    Dataset::new(city.grid, city.features, &cfg.window, cfg.grid.neighborhood).expect("dataset")
}

/// A model small enough for finite differences and quick training runs.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.window.recent = 3;
    cfg.window.weekly = 2;
    cfg.window.slots_per_week = 4;
    cfg.model.d_model = 8;
    cfg.model.d_state = 4;
    cfg.model.conv_width = 2;
    cfg.model.layers = 1;
    cfg.model.num_basis = 5;
    cfg.ssl.clusters = 2;
    cfg.train.batch_size = 4;
    cfg.train.max_epochs = 3;
    cfg.train.lr = 1e-3;
    cfg.metrics.k = 3;
    cfg
}

/// 2×3 grid, 2 channels, 40 slots: 32 windows under [`tiny_config`].
pub fn tiny_dataset(cfg: &RunConfig) -> Dataset {
    let city = synth_city(1, 2, 3, 40, 2).expect("synthetic city");
    Dataset::new(city.grid, city.features, &cfg.window, cfg.grid.neighborhood).expect("dataset")
}
