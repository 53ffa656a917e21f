mod common;

use ekamba::config::RunConfig;
use ekamba::dataio::{load_dir, synth_city, write_synth, Dataset};
use ekamba::train::{train, Checkpoint, Model, Trainer};

fn tiny() -> (RunConfig, Dataset) {
    let cfg = common::tiny_config();
    let ds = common::tiny_dataset(&cfg);
    (cfg, ds)
}

#[test]
fn zero_learning_rate_stops_after_patience() {
    let (mut cfg, ds) = tiny();
    cfg.train.lr = 0.0;
    cfg.train.patience = 2;
    cfg.train.max_epochs = 10;
    let out = train(&ds, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.checkpoint.meta.stopped);
    assert_eq!(out.checkpoint.meta.best_epoch, Some(1));
    let v = out.history[0].val_prediction;
    assert!(out.history.iter().all(|r| r.val_prediction == v));
}

#[test]
fn ssl_off_records_zero_auxiliary_losses() {
    let (mut cfg, ds) = tiny();
    cfg.train.loss_weights.spatial = 0.0;
    cfg.train.loss_weights.temporal = 0.0;
    cfg.train.loss_weights.kmeans = 0.0;
    let out = train(&ds, &cfg).unwrap();
    for r in &out.history {
        assert_eq!((r.train_reconstruction, r.train_kmeans, r.train_temporal), (0.0, 0.0, 0.0));
        assert_eq!(r.train_joint, r.train_prediction);
        assert!(r.val_rmse.is_finite());
    }
}

#[test]
fn best_parameters_are_restored() {
    let (mut cfg, ds) = tiny();
    cfg.train.max_epochs = 4;
    let out = train(&ds, &cfg).unwrap();
    let best = out.checkpoint.meta.best_epoch.unwrap();
    let model = Model::from_checkpoint(&out.checkpoint).unwrap();
    let val = model.prediction_loss(&ds, ds.split.val.clone()).unwrap();
    assert_eq!(val, out.history[best - 1].val_prediction);
    assert_eq!(Some(val), out.checkpoint.meta.best_val);
}

#[test]
fn resume_from_saved_state_matches_uninterrupted_run() {
    let (cfg, ds) = tiny();
    let full = train(&ds, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    let mut t = Trainer::new(&ds, &cfg).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    t.checkpoint().save(&path).unwrap();
    drop(t);

    let state = Checkpoint::load(&path).unwrap();
    let mut t = Trainer::resume(&ds, &state).unwrap();
    assert_eq!(t.epochs_run(), 2);
    t.run().unwrap();
    let resumed = t.finish();
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
}

#[test]
fn files_round_trip_into_the_same_dataset() {
    let cfg = common::tiny_config();
    let city = synth_city(4, 2, 3, 40, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), &city, 4, 60).unwrap();
    let (meta, grid, features) = load_dir(dir.path()).unwrap();
    assert_eq!((meta.rows, meta.cols, meta.channels), (2, 3, 2));

    let from_files = Dataset::new(grid, features, &cfg.window, cfg.grid.neighborhood).unwrap();
    let in_memory = Dataset::new(city.grid, city.features, &cfg.window, cfg.grid.neighborhood).unwrap();
    assert_eq!(from_files.windows.len(), in_memory.windows.len());
    for i in [0, from_files.windows.len() - 1] {
        let (a, b) = (from_files.sample(i), in_memory.sample(i));
        assert_eq!(a.target_raw, b.target_raw);
        assert!(a.input.max_abs_diff(&b.input) <= 1e-12);
    }
}

#[test]
fn evaluation_clamps_k_to_region_count() {
    let (mut cfg, ds) = tiny();
    cfg.metrics.k = 50;
    let model = Model::new(&cfg, ds.channels()).unwrap();
    let report = model.evaluate(&ds, ds.split.test.clone()).unwrap();
    assert_eq!(report.k, ds.regions());
    assert!(report.rmse.is_finite());
}
