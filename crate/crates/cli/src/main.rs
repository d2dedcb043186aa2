mod commands;
mod config;
mod dataset;
mod error;
mod manifest;
mod overlay;
mod pnm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::Flags;
use crate::error::CliError;

/// Anchor-masked region-proposal detector for single-target video.
#[derive(Parser, Debug)]
#[command(name = "amrpn", version, about)]
struct Cli {
    /// JSON config file with flat dotted keys (e.g. {"train.lr": 0.01}).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides both the run seed and the synthesis seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Gate proposals with the predicted anchor mask.
    #[arg(long, global = true, value_parser = parse_toggle, value_name = "on|off")]
    mask: Option<bool>,

    /// OR the predicted mask with the last heat map's support.
    #[arg(long, global = true, value_parser = parse_toggle, value_name = "on|off")]
    fusion: Option<bool>,

    /// Replace the predicted mask with all ones (ablation; equals plain).
    #[arg(long, global = true)]
    force_ones_mask: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sequences (frames as PGM plus groundtruth.txt).
    Synth {
        /// Output directory for the generated dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone and proposal head on a dataset directory.
    TrainRpn {
        /// Dataset root: one subdirectory per sequence.
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; fresh seeded nets when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask net on ground-truth heat-map histories.
    TrainMask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one sequence; writes per-frame metrics, heat maps and masks.
    Run {
        /// Sequence directory (frames plus groundtruth.txt).
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every sequence in a dataset and summarize mean IoU.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render frames with ground-truth, masked and plain detections.
    ExportOverlays {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_toggle(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got '{other}'")),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let settings = config::load_settings(cli.config.as_deref())?;
    let flags = Flags {
        seed: cli.seed,
        mask: cli.mask,
        fusion: cli.fusion,
        force_ones_mask: cli.force_ones_mask,
    };
    match &cli.command {
        Command::Synth { out } => commands::synth(settings, &flags, out),
        Command::TrainRpn { data, ckpt, out } => {
            commands::train_rpn_cmd(settings, &flags, data, ckpt.as_deref(), out)
        }
        Command::TrainMask { data, ckpt, out } => {
            commands::train_mask_cmd(settings, &flags, data, ckpt.as_deref(), out)
        }
        Command::Run { seq, ckpt, out } => {
            commands::run_cmd(settings, &flags, seq, ckpt.as_deref(), out)
        }
        Command::Eval { data, ckpt, out } => {
            commands::eval_cmd(settings, &flags, data, ckpt.as_deref(), out)
        }
        Command::ExportOverlays { seq, ckpt, out } => {
            commands::export_overlays_cmd(settings, &flags, seq, ckpt.as_deref(), out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
