//! The `transcc` command line: `gen-data`, `train`, `eval`, `infer` and
//! `report`.
//!
//! Exit status: 0 on success, 2 for invalid configuration or arguments, 3
//! for unreadable or unwritable files, 4 when training hits a non-finite
//! loss, 1 for anything else.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::format::{read_tensor, write_tensor};
use crate::data::{generate_dataset, read_record, write_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_identity, evaluate_model, format_summary, image_mae, read_table_csv, write_table_csv,
};
use crate::imaging::{LinearImage, Plane};
use crate::trainer::{
    infer, model_from_checkpoint, read_metrics, Checkpoint, EpochSummary, TrainConfig, Trainer, LATEST_CHECKPOINT, METRICS_FILE,
};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "transcc", version, about = "Multi-illuminant color constancy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted KEY=VALUE applied on top of the configuration file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || self.seed.is_some() || !self.overrides.is_empty()
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-illuminant dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples; overrides `count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on the train split, validating on the val split after each epoch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint (or the identity baseline) on a dataset split.
    Eval {
        /// Checkpoint file (`.tcck`).
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// One of train, val, test.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Per-image CSV table; defaults to `eval_<split>.csv` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the identity predictor instead of a network.
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
    },
    /// Run a checkpoint on one image.
    Infer {
        /// Checkpoint file (`.tcck`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// A tensor file (H, W, 3), a PPM image or a dataset sample directory.
        #[arg(long)]
        input: PathBuf,
        /// White-balanced output; the weight and edge maps are written
        /// alongside with `_weight` and `_edge` suffixes. A `.ppm` extension
        /// selects 16-bit PPM/PGM output, anything else the tensor format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot training curves and error histograms and print summary tables.
    Report {
        /// Metrics log, optionally labeled as LABEL=PATH.
        #[arg(long)]
        metrics: Vec<String>,
        /// Per-image table from `eval`, optionally labeled as LABEL=PATH.
        #[arg(long)]
        table: Vec<String>,
        /// Directory for the plots and `summary.txt`.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite { .. } => 4,
        Error::Numeric(_) | Error::Tensor(_) => 1,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, count } => gen_data(&config, &out, count),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(&config, &data, &out, resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            identity,
        } => eval(checkpoint.as_deref(), &data, split, out.as_deref(), identity),
        Command::Infer { checkpoint, input, out } => infer_cmd(&checkpoint, &input, &out),
        Command::Report { metrics, table, out } => report_cmd(&metrics, &table, &out),
    }
}

fn gen_data(args: &ConfigArgs, out: &Path, count: Option<usize>) -> Result<()> {
    let mut cfg = args.resolve()?;
    if let Some(n) = count {
        cfg.count = n;
        cfg.validate()?;
    }
    let (records, manifest) = generate_dataset(&cfg.data, cfg.count, cfg.seed, cfg.effective_threads())?;
    write_dataset(&records, &manifest, out)?;
    println!("{}", manifest.summary());
    Ok(())
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = config::resolved_path(dir);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(path, e))
}

fn train(args: &ConfigArgs, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let latest = out.join(LATEST_CHECKPOINT);
    let mut trainer = if resume {
        let mut ckpt = Checkpoint::load(&latest)?;
        if args.given() {
            let stored = RunConfig::from_run(&ckpt.model_config, &ckpt.train_config)?;
            let cfg = match &args.config {
                Some(_) => args.resolve()?,
                None => {
                    let mut c = RunConfig::from_toml(&stored.to_toml()?, &args.overrides)?;
                    if let Some(seed) = args.seed {
                        c.set_seed(seed);
                    }
                    c
                }
            };
            let resumable = TrainConfig {
                epochs: ckpt.train_config.epochs,
                checkpoint_interval: ckpt.train_config.checkpoint_interval,
                ..cfg.train.clone()
            };
            if cfg.model != ckpt.model_config || resumable != ckpt.train_config {
                return Err(Error::Config(format!(
                    "only train.epochs and train.checkpoint_interval may change on resume; {} was written with a different configuration",
                    latest.display()
                )));
            }
            ckpt.train_config = cfg.train.clone();
            write_resolved(&cfg, out)?;
        }
        let t = Trainer::from_checkpoint(ckpt)?;
        println!("resuming after epoch {} (step {})", t.epoch(), t.step_count());
        t
    } else {
        if latest.exists() || out.join(METRICS_FILE).exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or choose another --out",
                out.display()
            )));
        }
        let cfg = args.resolve()?;
        let t = Trainer::new(&cfg.model, &cfg.train)?;
        crate::data::format::create_dir(out)?;
        write_resolved(&cfg, out)?;
        t
    };

    let ds = Dataset::open(data)?;
    let size = trainer.config().image_size;
    if (ds.manifest.height, ds.manifest.width) != (size, size) {
        return Err(Error::Config(format!(
            "dataset is {}x{}, the run expects {size}x{size}; regenerate with image_size = {size}",
            ds.manifest.height, ds.manifest.width
        )));
    }
    let train_set = ds.load_split(Split::Train)?;
    let val_set = ds.load_split(Split::Val)?;
    println!(
        "training on {} samples, validating on {}, {} parameters",
        train_set.len(),
        val_set.len(),
        trainer.model().params().parameter_count()
    );
    let epochs = trainer.config().epochs;
    trainer.fit(&train_set, &val_set, Some(out), &mut |s: &EpochSummary| {
        let val = s.val_mae.map_or("-".into(), |v| format!("{v:.3}"));
        println!("epoch {:>4}/{epochs} lr {:.3e} loss {:.4} val MAE {val}", s.epoch, s.lr, s.train.total);
    })?;
    match trainer.best_val_mae() {
        Some(best) => {
            let last = crate::trainer::read_metrics(&out.join(METRICS_FILE))?;
            let final_val = report::epoch_points(&last).last().and_then(|p| p.val_mae);
            if let Some(v) = final_val {
                println!("final validation MAE {v:.4} deg (best {best:.4})");
            }
        }
        None => println!("no validation samples"),
    }
    Ok(())
}

fn eval(checkpoint: Option<&Path>, data: &Path, split: Split, out: Option<&Path>, identity: bool) -> Result<()> {
    let ds = Dataset::open(data)?;
    let (report, default_out) = if identity {
        let records = ds.load_split(split)?;
        (evaluate_identity(&records)?, PathBuf::from(format!("identity_{}.csv", split.name())))
    } else {
        let path = checkpoint.ok_or_else(|| Error::Argument("--checkpoint is required".into()))?;
        let model = model_from_checkpoint(&Checkpoint::load(path)?)?;
        let size = model.config().input_size;
        if (ds.manifest.height, ds.manifest.width) != (size, size) {
            return Err(Error::Config(format!(
                "checkpoint expects {size}x{size} inputs, dataset is {}x{}",
                ds.manifest.height, ds.manifest.width
            )));
        }
        let records = ds.load_split(split)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        (evaluate_model(&model, &records)?, dir.join(format!("eval_{}.csv", split.name())))
    };
    print!("{}", format_summary(&report));
    let table = out.map_or(default_out, Path::to_path_buf);
    write_table_csv(&table, &report.images)?;
    println!("per-image table: {}", table.display());
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{} image(s) could not be scored", report.failures.len())))
    }
}

fn load_image(path: &Path) -> Result<LinearImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if matches!(ext.as_str(), "ppm" | "pnm" | "pgm" | "pam") {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb32f();
        let (w, h) = img.dimensions();
        LinearImage::new(h as usize, w as usize, img.into_raw().into_iter().map(f64::from).collect())
            .map_err(|e| Error::format(path, e.to_string()))
    } else {
        let t = read_tensor(path)?;
        match t.dims[..] {
            [h, w, 3] => LinearImage::new(h, w, t.data.iter().map(|&v| f64::from(v)).collect())
                .map_err(|e| Error::format(path, e.to_string())),
            _ => Err(Error::format(path, format!("expected an (H, W, 3) tensor, found {:?}", t.dims))),
        }
    }
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Binary 16-bit PPM (`channels` 3) or PGM (`channels` 1), big-endian
/// samples with maxval 65535.
fn save_pnm16(path: &Path, width: usize, height: usize, channels: usize, samples: &[f64]) -> Result<()> {
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut bytes = format!("{magic}\n{width} {height}\n65535\n").into_bytes();
    bytes.reserve(2 * samples.len());
    for &v in samples {
        bytes.extend_from_slice(&to_u16(v).to_be_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sibling(out: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

fn write_outputs(out: &Path, wb: &LinearImage, weight: &Plane, edge: &Plane) -> Result<()> {
    let (h, w) = wb.dims();
    let pnm = out.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if pnm {
        save_pnm16(out, w, h, 3, wb.as_slice())?;
        for (plane, suffix) in [(weight, "weight"), (edge, "edge")] {
            save_pnm16(&sibling(out, suffix, "pgm"), w, h, 1, plane.as_slice())?;
        }
    } else {
        let f32s = |s: &[f64]| s.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        write_tensor(out, &[h, w, 3], &f32s(wb.as_slice()))?;
        let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("t");
        for (plane, suffix) in [(weight, "weight"), (edge, "edge")] {
            write_tensor(&sibling(out, suffix, ext), &[h, w], &f32s(plane.as_slice()))?;
        }
    }
    Ok(())
}

fn infer_cmd(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let record = if input.is_dir() { Some(read_record(input)?) } else { None };
    let image = match &record {
        Some(r) => r.input.clone(),
        None => load_image(input)?,
    };
    let (h, w) = image.dims();
    let size = model.config().input_size;
    if (h, w) != (size, size) {
        let hint = if h % 16 != 0 || w % 16 != 0 {
            format!("; sides must be multiples of 16, resize or crop to {size}x{size}")
        } else {
            format!("; resize or crop to {size}x{size}")
        };
        return Err(Error::Config(format!("image is {h}x{w}, the checkpoint expects {size}x{size}{hint}")));
    }
    let outputs = infer(&model, &image)?;
    let (wb, weight, edge) = outputs.item(0)?;
    write_outputs(out, &wb, &weight, &edge)?;
    println!("wrote {}", out.display());
    if let Some(r) = record {
        let mae = image_mae(&r.input, &wb, &r.gt, &r.mask)?;
        println!("MAE {mae:.4} deg");
    }
    Ok(())
}

/// `LABEL=PATH` or a bare path labeled by its parent directory.
fn labeled(spec: &str) -> (String, PathBuf) {
    if let Some((label, path)) = spec.split_once('=') {
        if !label.is_empty() && !label.contains(std::path::MAIN_SEPARATOR) {
            return (label.to_string(), PathBuf::from(path));
        }
    }
    let path = PathBuf::from(spec);
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or(spec)
        .to_string();
    (label, path)
}

fn report_cmd(metrics: &[String], tables: &[String], out: &Path) -> Result<()> {
    if metrics.is_empty() && tables.is_empty() {
        return Err(Error::Argument("nothing to plot: pass --metrics and/or --table".into()));
    }
    let runs = metrics
        .iter()
        .map(|s| {
            let (label, path) = labeled(s);
            Ok((label, report::epoch_points(&read_metrics(&path)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    let tables = tables
        .iter()
        .map(|s| {
            let (label, path) = labeled(s);
            Ok((label, read_table_csv(&path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    if runs.iter().all(|(_, p)| p.is_empty()) && tables.iter().all(|(_, t)| t.is_empty()) {
        return Err(Error::Argument("nothing to plot: inputs hold no epochs or images".into()));
    }
    crate::data::format::create_dir(out)?;
    let mut summary = String::new();
    if runs.iter().any(|(_, p)| !p.is_empty()) {
        let path = out.join("training_curve.svg");
        report::plot_training_curves(&path, &runs)?;
        println!("wrote {}", path.display());
        summary += &report::training_summary(&runs);
    }
    let tables: Vec<_> = tables.into_iter().filter(|(_, t)| !t.is_empty()).collect();
    if !tables.is_empty() {
        let path = out.join("error_histogram.svg");
        report::plot_error_histogram(&path, &tables, 30)?;
        println!("wrote {}", path.display());
        if !summary.is_empty() {
            summary.push('\n');
        }
        summary += &report::error_summary(&tables)?;
    }
    let path = out.join("summary.txt");
    std::fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    Ok(())
}
