mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pinsite::model::BlockMode;
use pinsite::Error;

#[derive(Parser, Debug)]
#[command(name = "pinsite", version, about = "Pin-site image classifier: data, training, evaluation and explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Focal,
    Ce,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BlocksArg {
    Errc,
    Ir,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassArg {
    A,
    B,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic dataset with a bounding-box manifest
    Synth {
        /// Images per class
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every image plus its eight augmented variants
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split, augment and train; writes the best checkpoint and the epoch report
    Train {
        /// key=value run configuration
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, value_enum)]
        blocks: Option<BlocksArg>,
        /// Overrides data_root
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides out_dir
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Metrics, confusion matrix, ROC curve and single-image timing on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Group-B probability at or above which an image is called Group B
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Directory for metrics.csv and roc.csv
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long, default_value_t = 1000)]
        timing_runs: usize,
    },
    /// Classify one image
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Grad-CAM overlay PNG and heatmap CSV for one image
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class to explain; defaults to the predicted one
        #[arg(long, value_enum)]
        class: Option<ClassArg>,
        #[arg(long, default_value = pinsite::model::DEFAULT_CAM_LAYER)]
        layer: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = pinsite::explain::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Per-layer parameter counts next to the closed-form block formulas
    AuditParams {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Hidden-layer embeddings as CSV for external projection
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Spec(_) | Error::Mode(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> pinsite::Result<()> {
    match cli.command {
        Command::Synth { n, seed, out } => commands::synth(n, seed, &out),
        Command::Augment { input, out, seed } => commands::augment(&input, &out, seed),
        Command::Train {
            config,
            loss,
            blocks,
            data,
            out,
            seed,
            max_epochs,
        } => {
            let mut cfg = config::RunConfig::load(config.as_deref())?;
            if let Some(l) = loss {
                cfg.cross_entropy = matches!(l, LossArg::Ce);
            }
            if let Some(b) = blocks {
                cfg.model.block_mode = match b {
                    BlocksArg::Errc => BlockMode::Errc,
                    BlocksArg::Ir => BlockMode::InvertedResidualOnly,
                };
            }
            cfg.data_root = data.unwrap_or(cfg.data_root);
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.train.max_epochs = max_epochs.unwrap_or(cfg.train.max_epochs);
            commands::train(&cfg.finish()?)
        }
        Command::Eval {
            checkpoint,
            data,
            threshold,
            out,
            warmup,
            timing_runs,
        } => commands::eval(&checkpoint, &data, threshold, &out, warmup, timing_runs),
        Command::Predict {
            checkpoint,
            image,
            threshold,
        } => commands::predict(&checkpoint, &image, threshold),
        Command::Explain {
            checkpoint,
            image,
            class,
            layer,
            out,
            alpha,
        } => {
            let class = class.map(|c| match c {
                ClassArg::A => pinsite::Label::GroupA,
                ClassArg::B => pinsite::Label::GroupB,
            });
            commands::explain(&checkpoint, &image, class, &layer, &out, alpha)
        }
        Command::AuditParams { config } => {
            let cfg = config::RunConfig::load(config.as_deref())?;
            cfg.model.validate()?;
            commands::audit_params(&cfg.model)
        }
        Command::ExportEmbeddings { checkpoint, data, out } => commands::export_embeddings(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
