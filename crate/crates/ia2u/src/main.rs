use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ia2u::commands::{self, Prior, Target, TrainArgs};
use ia2u::corpus::GenOptions;
use ia2u::{Error, Result};
use ia2u_core::tasks::TaskKind;
use ia2u_core::train::EpochStats;
use ia2u_core::watersim::Split;

#[derive(Parser)]
#[command(name = "ia2u", version, about = "Prior-conditioned underwater enhancement plugin")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic paired corpus and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 900)]
        n_train: usize,
        #[arg(long, default_value_t = 180)]
        n_val: usize,
        #[arg(long, default_value_t = 90)]
        n_test: usize,
        /// Image side in pixels (multiple of 32).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Place geometric objects and record their boxes.
        #[arg(long)]
        objects: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the water-type classifier.
    TrainClassifier(TrainFlags),
    /// Train the enhancement head, with the plugin unless --no-plugin.
    TrainUie(TrainFlags),
    /// Train the detector, with the plugin unless --no-plugin.
    TrainDet(TrainFlags),
    /// Enhance every PNG of a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write a channel mosaic of the enhancement features per image.
        #[arg(long)]
        dump_features: bool,
    },
    /// Evaluate a task checkpoint on one corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        task: String,
        /// CSV destination (default: eval_<task>_<split>.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainFlags {
    /// key = value run file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and plots.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classifier checkpoint used by the plugin.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Train the task network alone.
    #[arg(long)]
    no_plugin: bool,
    /// Priors to switch off: w, d, s.
    #[arg(long, num_args = 1..)]
    disable_prior: Vec<String>,
    /// Align at the anchor scale only.
    #[arg(long)]
    no_full_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl TrainFlags {
    fn into_args(self) -> Result<TrainArgs> {
        let disable_prior = self
            .disable_prior
            .iter()
            .map(|p| Prior::parse(p).ok_or_else(|| Error::Usage(format!("unknown prior '{p}' (expected w, d or s)"))))
            .collect::<Result<_>>()?;
        Ok(TrainArgs {
            config: self.config,
            corpus: self.corpus,
            out: self.out,
            classifier: self.classifier,
            no_plugin: self.no_plugin,
            disable_prior,
            no_full_scale: self.no_full_scale,
            seed: self.seed,
            epochs: self.epochs,
        })
    }
}

fn print_epoch(e: &EpochStats) {
    let val: Vec<String> = e.val.iter().map(|v| format!("{v:.4}")).collect();
    eprintln!(
        "epoch {:>3}  size {:>3}  loss {:.5}  val {}",
        e.epoch + 1,
        e.image_size,
        e.train_loss,
        val.join(" ")
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            n_train,
            n_val,
            n_test,
            size,
            objects,
            seed,
        } => {
            let opts = GenOptions {
                n_train,
                n_val,
                n_test,
                size,
                objects,
                seed,
            };
            let recs = commands::gen_data(&out, &opts)?;
            println!("wrote {} samples to {}", recs.len(), out.display());
        }
        Cmd::TrainClassifier(f) => train(Target::Classifier, f)?,
        Cmd::TrainUie(f) => train(Target::Task(TaskKind::Uie), f)?,
        Cmd::TrainDet(f) => train(Target::Task(TaskKind::Det), f)?,
        Cmd::Enhance {
            checkpoint,
            input_dir,
            out_dir,
            dump_features,
        } => {
            let files = commands::enhance(&checkpoint, &input_dir, &out_dir, dump_features)?;
            println!("wrote {} images to {}", files.len(), out_dir.display());
        }
        Cmd::Eval {
            checkpoint,
            corpus,
            split,
            task,
            out,
        } => {
            let split = Split::parse(&split).ok_or_else(|| Error::Usage(format!("unknown split '{split}'")))?;
            let task = TaskKind::parse(&task).ok_or_else(|| Error::Usage(format!("unknown task '{task}'")))?;
            let report = commands::eval(&checkpoint, &corpus, split, task)?;
            let csv = out.unwrap_or_else(|| {
                checkpoint
                    .with_file_name(format!("eval_{}_{}.csv", task.name(), split.name()))
            });
            print!("{}", commands::publish(&report, &csv)?);
        }
    }
    Ok(())
}

fn train(target: Target, flags: TrainFlags) -> Result<()> {
    let out = commands::train(target, &flags.into_args()?, &mut print_epoch)?;
    println!("wrote {}", out.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
