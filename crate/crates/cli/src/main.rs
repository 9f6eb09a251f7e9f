//! `vqmoe` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, I/O or
//! checkpoint error, 3 non-finite loss.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vqmoe::config::RunConfig;
use vqmoe::error::{Error, Result};
use vqmoe::run::{self, AnalyzeArgs, Report};

#[derive(Parser)]
#[command(name = "vqmoe", version, about = "Vector-quantized mixture-of-experts language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[out] directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random stream; overrides the config seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level language model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Fine-tune a vqmoe checkpoint on the discrete path.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
    },
    /// Write a diagnostic report.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// consistency, jacobian, pca, drift or flops.
        #[arg(long)]
        report: String,
        /// Checkpoint to inspect; repeat in training order for drift and
        /// temporal consistency.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Byte file supplying the probe windows.
        #[arg(long)]
        probe: Option<PathBuf>,
        /// MoE layer index; the last layer by default.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 50)]
        max_probes: usize,
    },
    /// Run the synthetic clustering experiments.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out.clone());
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, from } => {
            let (cfg, out) = load(&common)?;
            let s = run::pretrain(&cfg, &out, from.as_deref())?;
            println!("valid_bpc {:.4} test_bpc {:.4} steps {} in {:.1}s", s.valid_bpc, s.test_bpc, s.steps, s.seconds);
        }
        Command::Finetune { common, from } => {
            let (cfg, out) = load(&common)?;
            let s = run::finetune(&cfg, &from, &out)?;
            println!(
                "accuracy {:.4} after {} steps; FLOPs ratio measured {:.4} analytic {:.4}",
                s.accuracy, s.steps, s.measured_flops_ratio, s.analytic_flops_ratio
            );
        }
        Command::Analyze { common, report, checkpoints, probe, layer, max_probes } => {
            let report: Report = report.parse()?;
            let (cfg, out) = load(&common)?;
            let args = AnalyzeArgs { checkpoints, probe, layer, max_probes };
            let path = run::analyze(&cfg, report, &args, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Simulate { common } => {
            let (cfg, out) = load(&common)?;
            let s = run::simulate(&cfg, &out)?;
            println!(
                "identity strictly minimal: {} (margin {:.6}); wrote {}",
                s.oracle.identity_strictly_minimal(),
                s.oracle.margin(),
                out.display()
            );
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
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
