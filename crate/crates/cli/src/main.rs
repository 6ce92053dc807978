mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rcl_core::forecaster::{FreezeMode, REPLACE_FRACTIONS};
use rcl_core::verify::Suite;

use commands::{Failure, ProbeArgs, TrainArgs};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Contrastive pretraining, transfer, training and probing of selective
/// state-space forecasters.
#[derive(Parser, Debug)]
#[command(name = "rcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain one block with the repeated-step contrastive objective.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV path or `synth:<multi-sine|ar1-with-spikes>`.
        #[arg(long)]
        data: Option<String>,
        /// Parameter container to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a forecaster, optionally transfer a pretrained block, train and test it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long, value_parser = ["96", "192", "336", "720"])]
        horizon: String,
        /// Pretrained block container.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Leading fraction of layers to replace: 0, 0.25, 0.5, 0.75 or 1.0.
        #[arg(long, value_parser = parse_fraction)]
        replace: Option<f64>,
        #[arg(long, value_parser = parse_freeze)]
        freeze: Option<FreezeMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture block traces on the test split and report selectivity.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Number of evenly spaced test windows to probe.
        #[arg(long, default_value_t = 32)]
        windows: usize,
        /// Layer whose traces are written as CSV.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Probe window whose traces are written as CSV.
        #[arg(long, default_value_t = 0)]
        seq: usize,
    },
    /// Run the numerical oracles.
    Verify {
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the oracle report and the noise sweep.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split metrics of a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<String>,
    },
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let allowed = || REPLACE_FRACTIONS.map(|f| format!("{f:?}")).join(", ");
    let v: f64 = s.parse().map_err(|_| format!("expected one of {}", allowed()))?;
    if REPLACE_FRACTIONS.contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not one of {}", allowed()))
    }
}

fn parse_freeze(s: &str) -> Result<FreezeMode, String> {
    s.parse().map_err(|e: rcl_core::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: rcl_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { config, data, out } => commands::pretrain_cmd(config.as_deref(), data.as_deref(), &out),
        Command::Train {
            config,
            data,
            horizon,
            init,
            replace,
            freeze,
            out,
        } => commands::train_cmd(TrainArgs {
            config: config.as_deref(),
            data: data.as_deref(),
            horizon: horizon.parse().expect("validated by clap"),
            init: init.as_deref(),
            replace,
            freeze,
            out: &out,
        }),
        Command::Probe {
            model,
            data,
            out,
            windows,
            layer,
            seq,
        } => commands::probe_cmd(ProbeArgs {
            model: &model,
            data: data.as_deref(),
            out: &out,
            windows,
            layer,
            seq,
        }),
        Command::Verify { suite, seed, out } => commands::verify_cmd(suite, seed, out.as_deref()),
        Command::Eval { model, data } => commands::eval_cmd(&model, data.as_deref()),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
