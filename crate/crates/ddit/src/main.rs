//! Thin command-line front end over the `ddit` library.
//!
//! Exit codes: 0 success, 2 invalid config/usage, 3 numeric failure,
//! 1 other errors (and a failed gradcheck).

use clap::{Parser, Subcommand};
use ddit::cli::{cmd_analyze, cmd_gradcheck, cmd_sample, cmd_train, AnalyzeArgs, SampleArgs};
use ddit::sampler::SampleMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ddit",
    version,
    about = "Flow-matching diffusion transformer with representation-diversity training and CKA analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<SampleMode, String> {
    match s {
        "sde" => Ok(SampleMode::Sde),
        "ode" => Ok(SampleMode::Ode),
        other => Err(format!("unknown mode {other:?} (expected sde|ode)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config; writes checkpoints and a
    /// JSON-lines metrics log
    Train {
        /// Run config (JSON with groups model/diversity/train/sample/data)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint [default: fresh start]
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a trained checkpoint (CSV in points mode, DDIT1
    /// container in grid mode)
    Sample {
        /// Checkpoint to sample from
        #[arg(long)]
        ckpt: PathBuf,
        /// Integrator: sde or ode [default: from config, sde]
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SampleMode>,
        /// Integration steps [default: from config, 250]
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale; 1.0 means no classifier-free guidance
        /// [default: from config, 1.0]
        #[arg(long = "cfg")]
        cfg: Option<f64>,
        /// Condition on this class id [default: from config]
        #[arg(long, conflicts_with = "uncond")]
        class: Option<usize>,
        /// Sample unconditionally (null class)
        #[arg(long)]
        uncond: bool,
        /// Number of samples [default: from config, 512]
        #[arg(long)]
        n: Option<usize>,
        /// Sampling seed [default: from config, 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Output file
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the block×block CKA similarity matrix of a checkpoint at one
    /// noise timestep
    Analyze {
        /// Checkpoint to analyze
        #[arg(long)]
        ckpt: PathBuf,
        /// Noise timestep in (0,1]
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        /// Fresh-data batch size for the forward pass
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Kernel: linear, rbf (median heuristic), or polynomial
        #[arg(long, default_value = "rbf")]
        kernel: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Also dump captured per-block features to this DDIT1 container
        #[arg(long)]
        dump_features: Option<PathBuf>,
        /// Token-row budget before Gram construction
        #[arg(long, default_value_t = 512)]
        max_rows: usize,
    },
    /// Verify reverse-mode gradients of every loss component against
    /// central finite differences on a tiny model
    Gradcheck {
        /// Tiny run config (num_blocks ≤ 4, hidden_dim ≤ 16)
        /// [default: built-in tiny config]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Negative control: corrupt one gradient and expect failure
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train {
            config,
            out,
            resume,
        } => cmd_train(config, out, resume.as_deref()).map(|()| true),
        Command::Sample {
            ckpt,
            mode,
            steps,
            cfg,
            class,
            uncond,
            n,
            seed,
            out,
        } => cmd_sample(&SampleArgs {
            ckpt: ckpt.clone(),
            mode: *mode,
            steps: *steps,
            cfg_scale: *cfg,
            class: *class,
            uncond: *uncond,
            num_samples: *n,
            seed: *seed,
            out: out.clone(),
        })
        .map(|()| true),
        Command::Analyze {
            ckpt,
            t,
            batch,
            kernel,
            out,
            dump_features,
            max_rows,
        } => cmd_analyze(&AnalyzeArgs {
            ckpt: ckpt.clone(),
            t: *t,
            batch: *batch,
            kernel: kernel.clone(),
            out: out.clone(),
            dump_features: dump_features.clone(),
            max_rows: *max_rows,
        })
        .map(|()| true),
        Command::Gradcheck { config, corrupt } => cmd_gradcheck(config.as_deref(), *corrupt),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
