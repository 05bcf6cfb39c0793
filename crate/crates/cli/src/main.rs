//! `gmmt`: train, evaluate and sweep the fusion pipelines on the synthetic world.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmmt_core::fusion::Method;
use gmmt_core::metrics::Axis;

#[derive(Parser, Debug)]
#[command(name = "gmmt", version, about = "Generative multi-modal feature fusion on a synthetic tracking world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fusion route: base, raw, cgan or dm.
    #[arg(long, global = true)]
    pub mode: Option<Method>,
    /// Reverse-diffusion sampler steps `s`.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Encoder/decoder block pairs of the denoiser.
    #[arg(long, global = true)]
    pub blocks: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one pipeline; writes checkpoint.gmck and loss.csv.
    Train(#[command(flatten)] Common),
    /// Fuse scenarios with a trained checkpoint; writes fused_NNNN.gmmt and infer.csv.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scenario file to fuse instead of the held-out set.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Held-out scenarios to fuse.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Evaluate a checkpoint on the held-out scenarios; writes eval.csv and eval_curves.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate BASE, RAW, CGAN and DM; writes ablation.csv.
    Ablate(#[command(flatten)] Common),
    /// Sweep one axis; writes sweep_<axis>.csv.
    Sweep {
        axis: Axis,
        #[command(flatten)]
        common: Common,
        /// Comma-separated axis values (the standard grid when omitted).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Regenerate the golden files.
    Goldens {
        #[command(flatten)]
        common: Common,
        /// Required: confirms that existing goldens may be overwritten.
        #[arg(long)]
        force: bool,
    },
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("GMMT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| format!("GMMT_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("GMMT_THREADS must be a positive integer, got 0".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Infer { common, checkpoint, input, count } => {
            commands::infer(&common, checkpoint.as_deref(), input.as_deref(), count)
        }
        Command::Eval { common, checkpoint } => commands::eval(&common, checkpoint.as_deref()),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Sweep { axis, common, values } => commands::sweep(&common, axis, values),
        Command::Goldens { common, force } => commands::goldens(&common, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
