//! `obstacle` — stereo disparity, dense optical flow and per-object
//! depth/motion labeling for road scenes.
//!
//! Exit codes: 0 success, 1 input/validation error, 2 internal invariant
//! violation. Diagnostics go to stderr, controlled by the `OBSTACLE_LOG`
//! environment variable (error/warn/info/debug); all data outputs are files.

mod commands;
mod font;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "obstacle", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a dense disparity map from a rectified stereo pair
    Disparity {
        /// Left image (PNG or PGM)
        #[arg(long)]
        left: PathBuf,
        /// Right image (PNG or PGM)
        #[arg(long)]
        right: PathBuf,
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output 16-bit disparity PNG (KITTI convention, value = disparity * 256)
        #[arg(long)]
        out: PathBuf,
        /// Optional colorized preview PNG
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Compute dense optical flow between two consecutive frames
    Flow {
        /// Earlier frame
        #[arg(long)]
        prev: PathBuf,
        /// Later frame
        #[arg(long)]
        next: PathBuf,
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output Middlebury .flo file
        #[arg(long)]
        out: PathBuf,
        /// Optional arrow-grid preview PNG
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Run the full pipeline over a frame directory
    Analyze {
        /// Directory with NNNNNN_left.png / NNNNNN_right.png pairs
        #[arg(long)]
        frames: PathBuf,
        /// detections.json with per-frame instance masks
        #[arg(long)]
        detections: PathBuf,
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (analysis.json plus per-frame artifacts)
        #[arg(long)]
        out: PathBuf,
        /// Worker count for per-frame parallelism (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score predicted labels against manual ground truth
    Evaluate {
        /// analysis.json produced by `analyze`
        #[arg(long)]
        pred: PathBuf,
        /// groundtruth.json with manual annotations
        #[arg(long)]
        gt: PathBuf,
        /// Output directory for the report CSVs
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-frame overlays (mask tint, labels, flow arrow)
    Render {
        /// Directory with NNNNNN_left.png frames
        #[arg(long)]
        frames: PathBuf,
        /// analysis.json produced by `analyze`
        #[arg(long)]
        analysis: PathBuf,
        /// Output directory for overlay PNGs
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic stereo scene with exact ground truth
    Synth {
        /// Scene script JSON
        #[arg(long)]
        script: PathBuf,
        /// Render seed; same script and seed give byte-identical outputs
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (frames, detections.json, groundtruth.json, config.txt)
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> obstacle_core::Result<()> {
    match &cli.command {
        Command::Disparity {
            left,
            right,
            config,
            out,
            preview,
        } => commands::disparity(left, right, config, out, preview),
        Command::Flow {
            prev,
            next,
            config,
            out,
            preview,
        } => commands::flow(prev, next, config, out, preview),
        Command::Analyze {
            frames,
            detections,
            config,
            out,
            jobs,
        } => commands::analyze(frames, detections, config, out, *jobs),
        Command::Evaluate { pred, gt, out } => commands::evaluate(pred, gt, out),
        Command::Render {
            frames,
            analysis,
            out,
        } => commands::render(frames, analysis, out),
        Command::Synth { script, seed, out } => commands::synth(script, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version print and succeed; usage errors are input
            // errors (exit 1), never clap's default exit 2.
            let is_help = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp
                    | clap::error::ErrorKind::DisplayVersion
                    | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            );
            let _ = err.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };

    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter("OBSTACLE_LOG")
            .default_filter_or("warn"),
    )
    .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_input_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
