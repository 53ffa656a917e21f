//! `ekamba` command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ekamba::bench::{run_bench, BenchShape, CountingAlloc, Variant};
use ekamba::config::RunConfig;
use ekamba::dataio::{load_dir, synth_city, write_synth, Dataset, Meta};
use ekamba::train::{write_history, Checkpoint, Model, Trainer};
use ekamba::Error;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  internal error (shape mismatch or empty input)
  2  usage error (bad flags, invalid config, invalid argument)
  3  I/O or data error (missing or malformed files, checkpoints, records)
  4  numeric divergence (non-finite loss or gradient, benchmark mismatch)";

#[derive(Parser)]
#[command(name = "ekamba", version, about = "Traffic-accident risk forecasting on gridded cities", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city (events.csv, features.csv, meta.json)
    Synth(SynthArgs),
    /// Train a model and write checkpoint.bin and history.csv
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split (RMSE, Recall@k, MAP@k)
    Eval(EvalArgs),
    /// Write the predicted risk map for one target slot as CSV
    Predict(PredictArgs),
    /// Time eKAN, naive KAN and linear layers
    Bench(BenchArgs),
    /// Print checkpoint metadata
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    #[arg(long, default_value_t = 2000)]
    slots: usize,
    /// feature channels; channel 0 is risk
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 60)]
    slot_minutes: u32,
    #[arg(long)]
    out: PathBuf,
    /// allow writing into a non-empty directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; omitted keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// overrides train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// overrides train.max_epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// directory for metrics.txt and the config echo
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// target time slot to predict
    #[arg(long)]
    slot: usize,
    /// directory for risk_map.csv and the config echo; stdout otherwise
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON run config; only the `bench` section is used
    #[arg(long)]
    config: Option<PathBuf>,
    /// comma-separated subset of ekan, naive_kan, linear
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// directory for bench.csv and the config echo; stdout otherwise
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Shape { .. } | Error::Empty(_) => 1,
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Format(_)
        | Error::Version { .. }
        | Error::Record { .. }
        | Error::TooShort(_) => 3,
        Error::NonFinite(_) | Error::Divergence { .. } | Error::BenchMismatch(_) => 4,
    }
}

type CmdResult = ekamba::Result<()>;

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> CmdResult {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> CmdResult {
    write_text(&dir.join("config.json"), &(cfg.to_json() + "\n"))
}

fn load_config(path: Option<&Path>) -> ekamba::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dataset(data: &Path, cfg: &RunConfig, norm: Option<ekamba::dataio::NormStats>) -> ekamba::Result<(Meta, Dataset)> {
    let (meta, mut grid, features) = load_dir(data)?;
    grid.cell_size_km = meta.cell_size_km;
    let ds = Dataset::with_norm(grid, features, &cfg.window, cfg.grid.neighborhood, norm)?;
    Ok((meta, ds))
}

fn checkpoint_dataset(ckpt: &Checkpoint, data: &Path) -> ekamba::Result<(Meta, Dataset)> {
    let (meta, ds) = dataset(data, &ckpt.config, Some(ckpt.meta.norm.clone()))?;
    if (meta.rows, meta.cols) != (ckpt.meta.rows, ckpt.meta.cols) || meta.channels != ckpt.meta.d_feat {
        return Err(Error::InvalidArgument(format!(
            "data is {}x{} with {} channels but the checkpoint expects {}x{} with {}",
            meta.rows, meta.cols, meta.channels, ckpt.meta.rows, ckpt.meta.cols, ckpt.meta.d_feat
        )));
    }
    Ok((meta, ds))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let city = synth_city(a.seed, a.rows, a.cols, a.slots, a.channels)?;
    prepare_out(&a.out, a.force)?;
    write_synth(&a.out, &city, a.seed, a.slot_minutes)?;
    let mut cfg = RunConfig::default();
    cfg.grid.slot_minutes = a.slot_minutes;
    cfg.grid.cell_size_km = city.grid.cell_size_km;
    echo_config(&a.out, &cfg)?;
    println!(
        "wrote {} events over {} slots for a {}x{} grid to {}",
        city.events.len(),
        a.slots,
        a.rows,
        a.cols,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&resume, &a.config) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument("--resume takes its config from the checkpoint".into()))
        }
        (Some(c), None) => c.config.clone(),
        (None, path) => load_config(path.as_deref())?,
    };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.max_epochs = epochs;
    }
    cfg.validate()?;
    prepare_out(&a.out, a.force)?;
    echo_config(&a.out, &cfg)?;

    let norm = resume.as_ref().map(|c| c.meta.norm.clone());
    let (_, ds) = dataset(&a.data, &cfg, norm)?;
    let mut trainer = match &resume {
        Some(ckpt) => {
            let mut c = ckpt.clone();
            c.config = cfg.clone();
            Trainer::resume(&ds, &c)?
        }
        None => Trainer::new(&ds, &cfg)?,
    };
    while let Some(rec) = trainer.run_epoch()? {
        log::info!(
            "epoch {} train_prediction {:.6e} val_prediction {:.6e} val_rmse {:.4}",
            rec.epoch,
            rec.train_prediction,
            rec.val_prediction,
            rec.val_rmse
        );
    }
    trainer.checkpoint().save(&a.out.join("state.bin"))?;
    let outcome = trainer.finish();
    outcome.checkpoint.save(&a.out.join("checkpoint.bin"))?;
    write_history(&a.out.join("history.csv"), &outcome.history)?;
    let meta = &outcome.checkpoint.meta;
    println!(
        "trained {} epochs; best epoch {} (val prediction loss {}); wrote {}",
        meta.epochs_run,
        meta.best_epoch.map_or("-".into(), |e| e.to_string()),
        meta.best_val.map_or("-".into(), |v| format!("{v:.6e}")),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (_, ds) = checkpoint_dataset(&ckpt, &a.data)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let range = match a.split {
        Split::Train => ds.split.train.clone(),
        Split::Val => ds.split.val.clone(),
        Split::Test => ds.split.test.clone(),
    };
    let report = model.evaluate(&ds, range)?;
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
        echo_config(out, &ckpt.config)?;
        report.write(&out.join("metrics.txt"))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (meta, ds) = checkpoint_dataset(&ckpt, &a.data)?;
    let idx = ds.windows.iter().position(|w| w.target == a.slot).ok_or_else(|| {
        let first = ds.windows.first().map_or(0, |w| w.target);
        let last = ds.windows.last().map_or(0, |w| w.target);
        Error::InvalidArgument(format!("slot {} has no full input window (valid slots {first}..={last})", a.slot))
    })?;
    let model = Model::from_checkpoint(&ckpt)?;
    let pred = model.predict(&ds, &ds.sample(idx))?;
    let mut csv = String::new();
    for r in 0..meta.rows {
        let line: Vec<String> = (0..meta.cols).map(|c| format!("{:?}", pred[ds.grid.index(r, c)])).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    match &a.out {
        Some(out) => {
            prepare_out(out, a.force)?;
            echo_config(out, &ckpt.config)?;
            write_text(&out.join("risk_map.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    let b = &mut cfg.bench;
    if let Some(r) = a.repeats {
        b.repeats = r;
    }
    if let Some(w) = a.warmup {
        b.warmup = w;
    }
    if let Some(d) = a.d_model {
        b.d_model = d;
    }
    if let Some(n) = a.batch {
        b.batch = n;
    }
    cfg.validate()?;
    let variants = match &a.variants {
        Some(names) => names.iter().map(|s| s.parse()).collect::<ekamba::Result<Vec<Variant>>>()?,
        None => Variant::ALL.to_vec(),
    };
    let shapes = BenchShape::from_config(&cfg.bench);
    let report = run_bench(&shapes, &variants, cfg.bench.repeats, cfg.bench.warmup, cfg.bench.seed)?;
    match &a.out {
        Some(out) => {
            prepare_out(out, a.force)?;
            echo_config(out, &cfg)?;
            report.save_csv(&out.join("bench.csv"))?;
        }
        None => {
            let stdout = std::io::stdout();
            report.write_csv(stdout.lock()).map_err(|e| io_err(Path::new("<stdout>"), e))?;
        }
    }
    for shape in &shapes {
        if let (Some(e), Some(n)) = (report.row(shape, Variant::Ekan), report.row(shape, Variant::NaiveKan)) {
            log::info!(
                "batch {}: ekan/naive forward+backward time ratio {:.3}",
                shape.batch,
                e.forward_backward_secs / n.forward_backward_secs
            );
        }
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let m = &ckpt.meta;
    let mut out = std::io::stdout().lock();
    let numel: usize = ckpt.group("param/").map(|(_, t)| t.len()).sum();
    let lines = [
        format!("grid {}x{}", m.rows, m.cols),
        format!("features {}", m.d_feat),
        format!("seed {}", m.seed),
        format!("epochs_run {}", m.epochs_run),
        format!("best_epoch {}", m.best_epoch.map_or("-".into(), |e| e.to_string())),
        format!("best_val {}", m.best_val.map_or("-".into(), |v| format!("{v:?}"))),
        format!("stopped {}", m.stopped),
        format!("adam_steps {}", m.adam_t),
        format!("parameters {numel}"),
        format!("tensors {}", ckpt.tensors.len()),
    ];
    let text = lines.join("\n") + "\n";
    out.write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))?;
    writeln!(out, "config {}", serde_json::to_string(&ckpt.config)?).map_err(|e| io_err(Path::new("<stdout>"), e))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
