//! The `spinal` command line: synth, train, eval, sweep and predict.
//!
//! [`run_cli`] returns the process exit code: 0 on success, 1 for usage
//! errors, 2 for runtime failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use spinal_core::backbone::DEFAULT_IMAGE_SIZE;
use spinal_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use spinal_core::data::{
    decode_image, load_image_folder, normalize, resize_bilinear, stratified_split, synth_generate,
    Dataset, Level, LoadOptions, DEFAULT_TRAIN_FRACTION,
};
use spinal_core::report::{
    confusion_heatmap_pgm, confusion_to_csv, metrics_to_json, timing_to_json, write_atomic,
    DatasetSummary, RunConfig, RunRecord,
};
use spinal_core::train::{evaluate, fit, predict, predict_tta, TrainConfig};
use spinal_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping worker threads (default 1).
pub const THREADS_VAR: &str = "SPINAL_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "spinal",
    version,
    about = "Galaxy morphology classifier with a gradual-input head"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic folder-per-class galaxy dataset.
    Synth(SynthArgs),
    /// Train a model and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Re-evaluate a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Train once per hidden width.
    Sweep(SweepArgs),
    /// Classify a single image.
    Predict(PredictArgs),
}

fn parse_level(s: &str) -> std::result::Result<Level, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_level)]
    level: Level,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by `train` and `sweep`.
#[derive(Debug, Args)]
struct CommonTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_level)]
    level: Level,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 2)]
    segments: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    metadata: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Checkpoint path; reports are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    widths: Vec<usize>,
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Output directory, one checkpoint and report set per width.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report_dir: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Average over the eight rotations and reflections.
    #[arg(long)]
    tta: bool,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprint!("{e}");
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("{}", usage_line(&e));
            return EXIT_USAGE;
        }
    };
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Synth(args) => synth(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Sweep(args) => sweep(args),
        Command::Predict(args) => predict_cmd(args),
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// One-line summary of a clap error.
fn usage_line(err: &clap::Error) -> String {
    if err.kind() == ErrorKind::MissingRequiredArgument {
        if let Some(ContextValue::Strings(args)) = err.get(ContextKind::InvalidArg) {
            return format!("error: missing required flag(s): {}", args.join(", "));
        }
    }
    let rendered = err.render().to_string();
    rendered
        .lines()
        .next()
        .unwrap_or("error: invalid arguments")
        .to_string()
}

fn configure_threads() -> Result<()> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{THREADS_VAR} must be a positive integer, got {v:?}"
                ))
            })?,
        Err(_) => 1,
    };
    // A pool that is already configured (repeated calls in one process) is kept.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let manifest = synth_generate(
        args.level,
        args.per_class,
        args.image_size,
        args.seed,
        &args.out,
    )?;
    println!("wrote {} images to {}", manifest.len(), args.out.display());
    Ok(())
}

fn load_split(config: &RunConfig, data: &Path) -> Result<Dataset> {
    let options = LoadOptions {
        level: config.level,
        image_size: config.image_size,
        min_confidence: config.min_confidence,
        metadata: config.metadata.as_ref().map(PathBuf::from),
    };
    let (dataset, report) = load_image_folder(data, &options)?;
    log::info!(
        "loaded {} images ({} filtered, {} undecodable)",
        report.loaded,
        report.filtered,
        report.skipped.len()
    );
    stratified_split(dataset, config.train_fraction, config.seed)
}

fn run_config(common: &CommonTrainArgs, width: usize) -> RunConfig {
    RunConfig {
        data: Some(common.data.display().to_string()),
        level: common.level,
        image_size: common.image_size,
        train_fraction: DEFAULT_TRAIN_FRACTION,
        seed: common.seed,
        train: TrainConfig {
            epochs: common.epochs,
            batch_size: common.batch,
            learning_rate: common.lr,
            seed: common.seed,
            width,
            segments: common.segments,
            layers: common.layers,
        },
        min_confidence: common.min_confidence,
        metadata: common.metadata.as_ref().map(|p| p.display().to_string()),
    }
}

/// Files written next to a primary output.
struct Outputs {
    record: PathBuf,
    confusion_csv: PathBuf,
    heatmap: PathBuf,
    timing: PathBuf,
}

impl Outputs {
    /// `m.spnl` gives `m.run.json`, `m.confusion.csv`, ...
    fn beside(primary: &Path) -> Self {
        Outputs {
            record: primary.with_extension("run.json"),
            confusion_csv: primary.with_extension("confusion.csv"),
            heatmap: primary.with_extension("confusion.pgm"),
            timing: primary.with_extension("timing.json"),
        }
    }

    fn in_dir(dir: &Path) -> Self {
        Outputs {
            record: dir.join("run.json"),
            confusion_csv: dir.join("confusion.csv"),
            heatmap: dir.join("confusion.pgm"),
            timing: dir.join("timing.json"),
        }
    }

    fn write(&self, record: &RunRecord) -> Result<()> {
        write_atomic(&self.record, metrics_to_json(record).as_bytes())?;
        let csv = confusion_to_csv(&record.evaluation, &record.dataset.class_names)?;
        write_atomic(&self.confusion_csv, csv.as_bytes())?;
        write_atomic(&self.heatmap, &confusion_heatmap_pgm(&record.evaluation))?;
        write_atomic(&self.timing, timing_to_json(record).as_bytes())
    }
}

/// Trains, evaluates and saves one model; returns its record.
fn train_one(config: RunConfig, data: &Dataset, checkpoint: &Path) -> Result<RunRecord> {
    let started = Instant::now();
    let mut model = config
        .train
        .build_model(config.image_size, data.class_names().len())?;
    log::info!(
        "training {} parameters (width {}) for {} epochs",
        model.parameter_count(),
        config.train.width,
        config.train.epochs
    );
    let history = fit(&mut model, data, &config.train)?;
    let evaluation = evaluate(&model, data)?;
    let record = RunRecord {
        dataset: DatasetSummary::from_dataset(data)?,
        evaluation,
        history,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    let ck = Checkpoint::new(model, data.class_names().to_vec(), Some(config))?;
    save_checkpoint(checkpoint, &ck)?;
    Outputs::beside(checkpoint).write(&record)?;
    Ok(record)
}

fn train(args: TrainArgs) -> Result<()> {
    let config = run_config(&args.common, args.width);
    let data = load_split(&config, &args.common.data)?;
    let record = train_one(config, &data, &args.out)?;
    println!(
        "test accuracy {:.6} on {} images; model written to {}",
        record.evaluation.accuracy,
        record.evaluation.n_test,
        args.out.display()
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    if args.widths.contains(&0) {
        return Err(Error::Config("widths must be positive".into()));
    }
    // the split does not depend on width, so load once
    let data = load_split(&run_config(&args.common, args.widths[0]), &args.common.data)?;
    let mut summary = String::from("width,accuracy\n");
    for &width in &args.widths {
        let config = run_config(&args.common, width);
        let record = train_one(config, &data, &args.out.join(format!("w{width}.spnl")))?;
        println!(
            "width {width}: test accuracy {:.6}",
            record.evaluation.accuracy
        );
        writeln!(summary, "{width},{:.6}", record.evaluation.accuracy).expect("string write");
    }
    write_atomic(&args.out.join("sweep.csv"), summary.as_bytes())
}

fn eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let ck = load_checkpoint(&args.model)?;
    let config = ck.run.clone().ok_or_else(|| {
        Error::Config(
            "checkpoint has no run configuration, so its test split cannot be rebuilt".into(),
        )
    })?;
    let data = load_split(&config, &args.data)?;
    if data.class_names() != ck.class_names.as_slice() {
        return Err(Error::Config(format!(
            "checkpoint classes {:?} differ from the data's {:?}",
            ck.class_names,
            data.class_names()
        )));
    }
    let evaluation = evaluate(&ck.model, &data)?;
    let record = RunRecord {
        config,
        dataset: DatasetSummary::from_dataset(&data)?,
        evaluation,
        history: Vec::new(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    fs::create_dir_all(&args.report_dir).map_err(|e| Error::io(&args.report_dir, e))?;
    Outputs::in_dir(&args.report_dir).write(&record)?;
    println!(
        "test accuracy {:.6} on {} images; reports in {}",
        record.evaluation.accuracy,
        record.evaluation.n_test,
        args.report_dir.display()
    );
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&args.model)?;
    let bytes = fs::read(&args.image).map_err(|e| Error::io(&args.image, e))?;
    let grid = resize_bilinear(&decode_image(&bytes)?, ck.model.image_size())?;
    let pixels = normalize(&grid);
    let prediction = if args.tta {
        predict_tta(&ck.model, &pixels)?
    } else {
        predict(&ck.model, &pixels)?
    };
    println!(
        "{} {:.5}",
        ck.class_names[prediction.label], prediction.probabilities[prediction.label]
    );
    Ok(())
}
