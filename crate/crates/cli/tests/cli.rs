use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ekamba::config::RunConfig;
use ekamba::dataio::{load_dir, Dataset};
use ekamba::train::Trainer;

const TINY: &str = r#"{
  "window": {"recent": 3, "weekly": 2, "slots_per_week": 4},
  "model": {"d_model": 8, "d_state": 4, "conv_width": 2, "layers": 1, "num_basis": 5},
  "ssl": {"clusters": 2},
  "train": {"batch_size": 4, "max_epochs": 2, "lr": 0.001},
  "metrics": {"k": 3}
}"#;

fn ekamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ekamba")).args(args).output().expect("spawn ekamba")
}

fn ok(args: &[&str]) -> String {
    let out = ekamba(args);
    assert!(
        out.status.success(),
        "ekamba {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic 2×3 city plus the tiny config, written under `root`.
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(&["synth", "--seed", "3", "--rows", "2", "--cols", "3", "--slots", "40", "--channels", "2", "--out", s(&data)]);
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    (data, cfg)
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse::<f64>().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--seed", "5", "--rows", "3", "--cols", "2", "--slots", "100", "--out", s(d)]);
    }
    for f in ["events.csv", "features.csv", "meta.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ekamba(&["synth", "--rows", "0", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = ekamba(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    // non-empty output directory without --force
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let out = ekamba(&["synth", "--slots", "50", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&["synth", "--slots", "50", "--out", s(dir.path()), "--force"]);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = ekamba(&[
        "train",
        "--data",
        s(&dir.path().join("nowhere")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_eval_predict_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    for f in ["checkpoint.bin", "state.bin", "history.csv", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let ckpt = run.join("checkpoint.bin");
    let evald = dir.path().join("eval");
    let text = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&evald)]);
    assert_eq!(fs::read_to_string(evald.join("metrics.txt")).unwrap(), text);
    for key in ["rmse", "recall_at_3", "map_at_3"] {
        let v = metric(&text, key);
        assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
    }

    // windows need 2 weekly lookbacks of 4 slots, so slot 7 is the first target
    let map = ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--slot", "20"]);
    let rows: Vec<Vec<f64>> = map
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == 3 && r.iter().all(|v| v.is_finite())));
    let out = ekamba(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--slot", "2"]);
    assert_eq!(out.status.code(), Some(2));

    let info = ok(&["inspect", "--checkpoint", s(&ckpt)]);
    assert!(info.contains("grid 2x3"));
    assert!(info.contains("epochs_run 2"));
    assert!(info.lines().any(|l| l.starts_with("config {")));

    // resume continues from the saved state
    let more = dir.path().join("more");
    ok(&["train", "--resume", s(&run.join("state.bin")), "--epochs", "3", "--data", s(&data), "--out", s(&more)]);
    let info = ok(&["inspect", "--checkpoint", s(&more.join("checkpoint.bin"))]);
    assert!(info.contains("epochs_run 3"), "{info}");
}

#[test]
fn zero_model_recall_follows_tie_break() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg_path) = setup(dir.path());
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (meta, mut grid, features) = load_dir(&data).unwrap();
    grid.cell_size_km = meta.cell_size_km;
    let ds = Dataset::new(grid, features, &cfg.window, cfg.grid.neighborhood).unwrap();
    let mut trainer = Trainer::new(&ds, &cfg).unwrap();
    trainer.model.store.zero_values();
    let ckpt = dir.path().join("zero.bin");
    trainer.checkpoint().save(&ckpt).unwrap();

    // all scores equal, so the top 3 are regions 0, 1, 2 on every slot
    let k = 3;
    let test = ds.split.test.clone();
    let slots = test.len();
    let want = test
        .map(|i| {
            let truth = ds.sample(i).target_raw;
            truth[..k].iter().filter(|&&v| v > 0.0).count() as f64 / k as f64
        })
        .sum::<f64>()
        / slots as f64;
    let text = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test"]);
    assert_eq!(metric(&text, "recall_at_3"), want);
    assert_eq!(metric(&text, "slots") as usize, slots);
}

#[test]
fn bench_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&[
        "bench", "--d-model", "16", "--batch", "4", "--repeats", "2", "--warmup", "0", "--out", s(&out),
    ]);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("variant,metric,value"));
    for v in ["ekan/", "naive_kan/", "linear/"] {
        assert!(csv.contains(v), "no {v} rows in {csv}");
    }
    let out = ekamba(&["bench", "--variants", "ekan,cubic", "--d-model", "8"]);
    assert_eq!(out.status.code(), Some(2));
}
