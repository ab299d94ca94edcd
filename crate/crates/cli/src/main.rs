mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use revi_core::adapter::{AdapterKind, Placement};
use revi_core::data::Distortion;
use revi_core::Error;

/// Decomposition adapters on a frozen toy segmentation backbone.
#[derive(Parser)]
#[command(name = "revi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Run configuration (`section.key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct AdapterFlags {
    #[arg(long)]
    pub placement: Option<Placement>,
    #[arg(long)]
    pub adapter: Option<AdapterKind>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/test and proxy splits to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; overrides `paths.data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the whole backbone on the clean proxy task.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Freeze a pretrained backbone, attach adapters and train them.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        adapter: AdapterFlags,
        /// Pretrained backbone; overrides `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra distortion condition such as `blur:15`; repeatable.
        #[arg(long = "distort")]
        distort: Vec<Distortion>,
    },
    /// Split an image into low-rank and sparse parts.
    Decompose {
        /// Grey PGM (or colour PPM for --learned).
        input: PathBuf,
        /// Robust PCA on the pixel matrix.
        #[arg(long, conflicts_with = "learned")]
        classical: bool,
        /// Dump each adapter's low-rank and sparse feature maps.
        #[arg(long, requires = "checkpoint")]
        learned: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the trainable/frozen parameter census.
    Census {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        adapter: AdapterFlags,
        /// Report on a saved model instead of a fresh one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Also run a deliberately broken operation.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::SvdNoConvergence(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        _ => 1,
    }
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
    let result = match cli.command {
        Command::GenData { common, out } => commands::gen_data(&common, out),
        Command::Pretrain { common, out } => commands::pretrain(&common, out),
        Command::Train {
            common,
            adapter,
            checkpoint,
            out,
        } => commands::train(&common, &adapter, checkpoint, out),
        Command::Eval {
            common,
            checkpoint,
            out,
            distort,
        } => commands::eval(&common, &checkpoint, out, &distort),
        Command::Decompose {
            input,
            classical,
            learned,
            checkpoint,
            out,
        } => {
            if classical == learned {
                eprintln!("error: pass exactly one of --classical or --learned");
                return ExitCode::from(1);
            }
            commands::decompose(&input, learned.then_some(checkpoint).flatten(), &out)
        }
        Command::Census {
            common,
            adapter,
            checkpoint,
        } => commands::census(&common, &adapter, checkpoint),
        Command::Gradcheck { inject_fault } => commands::gradcheck(inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
