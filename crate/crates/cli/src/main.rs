use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use cxrtl_cli::commands;
use cxrtl_cli::config::{Overrides, RunSpec};
use cxrtl_core::augment::TransformKind;
use cxrtl_core::{BackboneKind, Split, Strategy};

/// Transfer-learning experiments for pneumonia detection on chest X-rays.
#[derive(Parser)]
#[command(name = "cxrtl", version)]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "CXRTL_LOG")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run specification; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding train/val/test with NORMAL and PNEUMONIA folders.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Directory with manifest.tsv and norm_stats.toml from `prepare`.
    #[arg(long)]
    prepared: Option<PathBuf>,
    /// Run directory for history, checkpoints and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed for every random stage.
    #[arg(long)]
    seed: Option<u64>,
    /// resnet18 or densenet121.
    #[arg(long)]
    backbone: Option<BackboneKind>,
    /// I, II or III.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Hidden-layer width of the head (strategies I and II).
    #[arg(long)]
    n_neurons: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from random weights instead of ImageNet weights.
    #[arg(long)]
    no_pretrained: bool,
    /// ImageNet weight file (safetensors, torchvision names).
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl RunArgs {
    fn spec(&self, grid: Option<Vec<usize>>) -> Result<RunSpec> {
        let o = Overrides {
            data_root: self.data_root.clone(),
            out: self.out.clone(),
            prepared: self.prepared.clone(),
            seed: self.seed,
            backbone: self.backbone,
            strategy: self.strategy,
            n_neurons: self.n_neurons,
            epochs: self.epochs,
            no_pretrained: self.no_pretrained,
            weights: self.weights.clone(),
            grid,
        };
        RunSpec::resolve(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Index, repartition, balance and compute normalization statistics.
    Prepare {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and evaluate it on the test split.
    Train(RunArgs),
    /// Train one model per hidden-layer width.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated widths, e.g. 10,100,500.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
    },
    /// Rank single augmentations with a small reference network.
    AblateAugmentation {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated transforms (rotate, hflip, jitter, crop_flip_rotate).
        #[arg(long, value_delimiter = ',')]
        transforms: Option<Vec<TransformKind>>,
    },
    /// Re-evaluate a run's best checkpoint.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Collect finished runs into a results table and accuracy curves.
    Report {
        /// Run or sweep directories to scan for metrics.json.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a 2x2 grid of the four augmentations applied to one image.
    PreviewTransforms {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { data_root, out, seed } => {
            let summary = commands::cmd_prepare(&data_root, &out, seed)?;
            for line in summary.lines() {
                println!("{line}");
            }
        }
        Command::Train(args) => {
            let outcome = commands::cmd_train(&args.spec(None)?)?;
            match &outcome.metrics {
                Some(m) => {
                    let (_, table) = cxrtl_cli::report::render_table(std::slice::from_ref(&m.row))?;
                    print!("{table}");
                }
                None => println!("no epochs run; history is empty"),
            }
            println!("run directory: {}", outcome.run_dir.display());
        }
        Command::Sweep { run, grid } => {
            let spec = run.spec(grid)?;
            let outcome = commands::cmd_sweep(&spec)?;
            println!("best n_neurons: {}", outcome.best_n_neurons);
            println!("sweep directory: {}", spec.out.display());
        }
        Command::AblateAugmentation { run, transforms } => {
            let mut spec = run.spec(None)?;
            if let Some(t) = transforms {
                spec.augment.ablation = t;
            }
            let rows = commands::cmd_ablate(&spec)?;
            println!("{}", commands::ABLATION_NOTE);
            for (i, r) in rows.iter().enumerate() {
                println!("{}. {:<16} test accuracy {:.4}", i + 1, r.transform, r.test_accuracy);
            }
        }
        Command::Evaluate { run, split, checkpoint } => {
            let m = commands::cmd_evaluate(&run, split, checkpoint.as_deref())?;
            let (_, table) = cxrtl_cli::report::render_table(std::slice::from_ref(&m.row))?;
            println!("split: {split}");
            print!("{table}");
        }
        Command::Report { runs, out } => {
            let outcome = commands::cmd_report(&runs, &out)?;
            print!("{}", outcome.table);
        }
        Command::PreviewTransforms {
            image,
            out,
            seed,
            input_size,
        } => {
            commands::cmd_preview(&image, &out, seed, input_size)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(cxrtl_cli::exit_code(&e))
        }
    }
}
