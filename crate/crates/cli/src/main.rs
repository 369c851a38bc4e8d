//! `cmt`: preprocess recordings, split folds, train, evaluate, interpret,
//! count parameters, and verify gradients.

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use cmt_core::Error;

#[derive(Parser)]
#[command(
    name = "cmt",
    version,
    about = "Cross-modal transformer sleep staging",
    after_help = "Configuration: a flat JSON file with dotted keys plus dotted override flags,\n\
                  e.g. `cmt train --config run.json --train.lr 0.001 --model.embed_dim 64`.\n\
                  CMT_DATA_DIR provides the default dataset directory."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest a raw-signal manifest and write a processed dataset.
    Preprocess {
        #[arg(long)]
        manifest: std::path::PathBuf,
        #[arg(long)]
        out: std::path::PathBuf,
        /// Comma-separated channel names to keep, in modality order.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long, default_value_t = 1001)]
        filter_taps: usize,
        /// Worker threads (0 = default pool).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Assign subjects to cross-validation folds.
    Split {
        #[arg(long)]
        data: Option<std::path::PathBuf>,
        #[arg(long)]
        out: std::path::PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train one fold (or all folds) of the configured model.
    Train {
        #[arg(long)]
        config: Option<std::path::PathBuf>,
        #[arg(long, conflicts_with = "all")]
        fold: Option<usize>,
        /// Run every fold and pool the results.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<std::path::PathBuf>,
        /// Continue an interrupted run from its last epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write metrics JSON + confusion matrix.
    Evaluate {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long)]
        data: Option<std::path::PathBuf>,
        #[arg(long)]
        folds: Option<std::path::PathBuf>,
        /// Restrict to the held-out subjects of this fold.
        #[arg(long, requires = "folds")]
        fold: Option<usize>,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Export attention reports for selected sequence windows.
    Interpret {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long)]
        data: Option<std::path::PathBuf>,
        /// Comma-separated windows as `<rec-id>:<start>`, e.g. `SYN00:0,SYN01:5`.
        #[arg(long)]
        sequences: String,
        #[arg(long, default_value = "svg")]
        format: String,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Report the exact learnable-parameter count of the configured model.
    ParamCount {
        #[arg(long)]
        config: Option<std::path::PathBuf>,
    },
    /// Verify every differentiable op against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = cmt_core::gradcheck::DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = cmt_core::gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = cmt_core::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

/// Line-oriented `key=value` records on stderr.
struct KvLogger;

impl log::Log for KvLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        eprintln!(
            "level={} {}",
            record.level().to_string().to_lowercase(),
            record.args()
        );
    }

    fn flush(&self) {}
}

static LOGGER: KvLogger = KvLogger;

fn run() -> cmt_core::Result<()> {
    let raw: Vec<String> = std::env::args().collect();
    let (args, overrides) = config::extract_dotted_overrides(raw)?;
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let _ = e.print();
            return Err(Error::Config("invalid command line".into()));
        }
    };
    match cli.cmd {
        Cmd::Preprocess {
            manifest,
            out,
            channels,
            filter_taps,
            jobs,
        } => commands::preprocess(&manifest, &out, channels.as_deref(), filter_taps, jobs),
        Cmd::Split { data, out, k, seed } => commands::split(data.as_deref(), &out, k, seed),
        Cmd::Train {
            config,
            fold,
            all,
            out,
            resume,
        } => commands::train(config.as_deref(), &overrides, fold, all, out.as_deref(), resume),
        Cmd::Evaluate {
            checkpoint,
            data,
            folds,
            fold,
            out,
        } => commands::evaluate(&checkpoint, data.as_deref(), folds.as_deref(), fold, &out),
        Cmd::Interpret {
            checkpoint,
            data,
            sequences,
            format,
            out,
        } => commands::interpret(&checkpoint, data.as_deref(), &sequences, &format, &out),
        Cmd::ParamCount { config } => commands::param_count(config.as_deref(), &overrides),
        Cmd::Gradcheck {
            seed,
            repeats,
            step,
            tolerance,
        } => commands::gradcheck(seed, repeats, step, tolerance),
    }
}

fn main() -> ExitCode {
    log::set_logger(&LOGGER).expect("logger installed once");
    log::set_max_level(log::LevelFilter::Info);
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
