//! Subcommand implementations shared by the binary and the tests.

use std::fs;
use std::path::{Path, PathBuf};

use ia2u_core::checkpoint::Checkpoint;
use ia2u_core::classifier::Classifier;
use ia2u_core::tasks::metrics::MetricReport;
use ia2u_core::tasks::{TaskKind, TaskModel};
use ia2u_core::train::{evaluate_det, evaluate_uie, train_classifier, train_task, EpochStats};
use ia2u_core::watersim::Split;
use ia2u_core::{ImageTensor, RunConfig};

use crate::corpus::{generate_corpus, load_split, GenOptions, ManifestRecord};
use crate::error::{Error, Result};
use crate::mosaic::feature_mosaic;
use crate::png_io::{read_png, write_png, write_rgb};
use crate::report::{format_report, plot_curve, write_csv};
use crate::settings::Settings;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const LOSS_PLOT: &str = "loss.png";
pub const VAL_PLOT: &str = "val.png";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Checkpoint::decode(&bytes).map_err(|e| Error::format(path, e))
}

pub fn gen_data(out: &Path, opts: &GenOptions) -> Result<Vec<ManifestRecord>> {
    generate_corpus(out, opts)
}

/// What a training command trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Classifier,
    Task(TaskKind),
}

/// A prior that `--disable-prior` can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prior {
    Water,
    Degradation,
    Sample,
}

impl Prior {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "w" | "water" => Some(Prior::Water),
            "d" | "degrad" | "degradation" => Some(Prior::Degradation),
            "s" | "sample" => Some(Prior::Sample),
            _ => None,
        }
    }
}

/// Command-line overrides for the training commands; `None` keeps the
/// config-file or default value.
#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub no_plugin: bool,
    pub disable_prior: Vec<Prior>,
    pub no_full_scale: bool,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub history: Vec<EpochStats>,
    pub metrics: MetricReport,
}

fn defaults(target: Target) -> RunConfig {
    match target {
        Target::Classifier => RunConfig::classifier(),
        Target::Task(TaskKind::Uie) => RunConfig::default(),
        Target::Task(TaskKind::Det) => RunConfig::detection(),
    }
}

/// Defaults, then the config file, then the flags.
pub fn resolve_settings(target: Target, args: &TrainArgs) -> Result<Settings> {
    let mut s = match &args.config {
        Some(p) => Settings::load(p, defaults(target))?,
        None => Settings::new(defaults(target)),
    };
    let r = &mut s.run;
    if args.no_plugin {
        r.use_plugin = false;
    }
    for p in &args.disable_prior {
        match p {
            Prior::Water => r.enable_water_prior = false,
            Prior::Degradation => r.enable_degrad_prior = false,
            Prior::Sample => r.enable_sample_prior = false,
        }
    }
    if args.no_full_scale {
        r.enable_full_scale = false;
    }
    if let Some(seed) = args.seed {
        r.seed = seed;
    }
    if let Some(e) = args.epochs {
        r.epochs = e;
    }
    let p = &mut s.paths;
    for (flag, slot) in [
        (&args.corpus, &mut p.corpus_dir),
        (&args.out, &mut p.output_dir),
        (&args.classifier, &mut p.classifier),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    s.run.validate()?;
    Ok(s)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Usage(format!("missing {what} (flag or config key)")))
}

/// Per-epoch validation table as written to `metrics.csv`.
pub fn epoch_report(target: Target, history: &[EpochStats]) -> MetricReport {
    let cols: &[&str] = match target {
        Target::Classifier => &["top1"],
        Target::Task(TaskKind::Uie) => &["psnr", "ssim"],
        Target::Task(TaskKind::Det) => &["map50"],
    };
    let mut r = MetricReport::new(cols);
    for e in history {
        r.push((e.epoch + 1).to_string(), e.val.clone());
    }
    r
}

/// Train, then write the checkpoint, `metrics.csv` (one row per epoch plus
/// the mean), `loss.csv` and the two curve plots into the output directory.
pub fn train(target: Target, args: &TrainArgs, log: &mut dyn FnMut(&EpochStats)) -> Result<TrainOutcome> {
    let s = resolve_settings(target, args)?;
    let corpus_dir = required(&s.paths.corpus_dir, "--corpus")?;
    let out = required(&s.paths.output_dir, "--out")?.to_path_buf();
    let classifier = match target {
        Target::Task(_) if s.run.use_plugin => {
            let path = required(&s.paths.classifier, "--classifier (needed by the plugin; use --no-plugin for the bare head)")?;
            Some(Classifier::from_checkpoint(&load_checkpoint(path)?).map_err(|e| Error::format(path, e))?)
        }
        _ => None,
    };
    let train_set = load_split(corpus_dir, Split::Train)?;
    let val_set = load_split(corpus_dir, Split::Val)?;
    fs::create_dir_all(&out).map_err(Error::io(&out))?;
    let (ckpt, history) = match target {
        Target::Classifier => {
            let (model, h) = train_classifier(&train_set.samples, &val_set.samples, &s.run, log)?;
            let steps = steps_taken(&s.run, train_set.samples.len());
            (model.to_checkpoint(&s.run, steps), h)
        }
        Target::Task(kind) => {
            let (model, h) = train_task(kind, classifier, &train_set.samples, &val_set.samples, &s.run, log)?;
            (model.to_checkpoint(steps_taken(&s.run, train_set.samples.len())), h)
        }
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ckpt)?;
    let metrics = epoch_report(target, &history);
    write_csv(&out.join(METRICS_FILE), &metrics)?;
    let mut losses = MetricReport::new(&["train_loss"]);
    for e in &history {
        losses.push((e.epoch + 1).to_string(), vec![e.train_loss]);
    }
    write_csv(&out.join(LOSS_FILE), &losses)?;
    let loss: Vec<f64> = history.iter().flat_map(|e| e.step_losses.iter().copied()).collect();
    plot_curve(&out.join(LOSS_PLOT), &loss)?;
    let val: Vec<f64> = history.iter().map(|e| e.val[0]).collect();
    plot_curve(&out.join(VAL_PLOT), &val)?;
    Ok(TrainOutcome {
        out_dir: out,
        history,
        metrics,
    })
}

fn steps_taken(cfg: &RunConfig, n: usize) -> u64 {
    (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64
}

/// PNG files of `dir`, sorted by name.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

/// Enhance every PNG of `input_dir` with the plugin of a task checkpoint (or
/// with a bare enhancement head). Returns the written files.
pub fn enhance(checkpoint: &Path, input_dir: &Path, out_dir: &Path, dump_features: bool) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = TaskModel::from_checkpoint(&ckpt).map_err(|e| Error::format(checkpoint, e))?;
    if model.fen.is_none() && (dump_features || model.kind() != Some(TaskKind::Uie)) {
        return Err(Error::Usage(format!(
            "{}: '{}' checkpoint has no enhancement plugin",
            checkpoint.display(),
            ckpt.component
        )));
    }
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut written = Vec::new();
    for input in list_pngs(input_dir)? {
        let x = read_png(&input)?;
        let name = input.file_name().map(PathBuf::from).unwrap_or_default();
        let y = match &model.fen {
            Some(fen) => fen.enhance(&model.store, &x)?,
            None => ImageTensor::new(model.infer(&x)?)?,
        };
        let path = out_dir.join(&name);
        write_png(&path, &y)?;
        written.push(path);
        if let (true, Some(fen)) = (dump_features, &model.fen) {
            let f = fen.enhance_features(&model.store, &x)?;
            let (rgb, h, w) = feature_mosaic(f.tensor());
            let stem = input.file_stem().unwrap_or_default().to_string_lossy();
            let path = out_dir.join(format!("{stem}_features.png"));
            write_rgb(&path, &rgb, h, w)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Evaluate a task checkpoint on one split. Enhancement rows are images
/// (`psnr`, `ssim`); detection rows are classes (`map50` holds each class's
/// AP50, so the mean row is mAP50).
pub fn eval(checkpoint: &Path, corpus: &Path, split: Split, task: TaskKind) -> Result<MetricReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = TaskModel::from_checkpoint(&ckpt).map_err(|e| Error::format(checkpoint, e))?;
    if model.kind() != Some(task) {
        return Err(Error::Usage(format!(
            "{} holds a {} network, not {}",
            checkpoint.display(),
            model.kind().map_or("bare", |k| k.name()),
            task.name()
        )));
    }
    let data = load_split(corpus, split)?;
    match task {
        TaskKind::Uie => {
            let mut r = evaluate_uie(&model, &data.samples)?;
            for ((id, _), rec) in r.rows.iter_mut().zip(&data.records) {
                id.clone_from(&rec.id);
            }
            Ok(r)
        }
        TaskKind::Det => Ok(evaluate_det(&model, &data.samples)?.0),
    }
}

/// Print the table and write it as CSV.
pub fn publish(report: &MetricReport, csv: &Path) -> Result<String> {
    write_csv(csv, report)?;
    Ok(format_report(report))
}
