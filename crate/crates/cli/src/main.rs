//! `ilpcnet` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ilpcnet", version, about = "Neural LP vocoder with a mixture-density excitation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract a feature file from a mono 16-bit WAV.
    Features {
        wav: PathBuf,
        feat: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train on a corpus directory of paired `<name>.wav` / `<name>.feat` files.
    Train(TrainArgs),
    /// Generate a waveform from a feature file.
    Synth {
        checkpoint: PathBuf,
        feat: PathBuf,
        wav: PathBuf,
        /// Spread multiplier in voiced frames (1.0 disables sharpening).
        #[arg(long, default_value_t = 0.7)]
        sharpen: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a synthesized WAV against its reference.
    Eval {
        reference: PathBuf,
        synthesized: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Finite-difference gradient checks of every layer and loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one component's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic corpus directory.
    Corpus {
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        utterances: usize,
        /// Seconds per utterance.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// First-order autoregressive noise with this coefficient instead of speech-like signals.
        #[arg(long)]
        ar1: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// `key = value` overrides of the model and training defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    corpus: PathBuf,
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Continue from this checkpoint; `--config` applies on top of its settings.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step loss CSV (default: `<checkpoint>.loss.csv`).
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Held-out corpus for periodic validation NLL.
    #[arg(long)]
    valid: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Features { wav, feat, config } => commands::features(&wav, &feat, config.config.as_deref()),
        Command::Train(a) => commands::train(&commands::TrainOptions {
            corpus: a.corpus,
            checkpoint: a.checkpoint,
            config: a.config.config,
            resume: a.resume,
            seed: a.seed,
            loss_log: a.loss_log,
            valid: a.valid,
        }),
        Command::Synth {
            checkpoint,
            feat,
            wav,
            sharpen,
            seed,
        } => commands::synth(&checkpoint, &feat, &wav, sharpen, seed),
        Command::Eval {
            reference,
            synthesized,
            config,
        } => commands::eval(&reference, &synthesized, config.config.as_deref()),
        Command::Gradcheck { trials, seed, corrupt } => commands::gradcheck(trials, seed, corrupt.as_deref()),
        Command::Corpus {
            out,
            utterances,
            duration,
            seed,
            ar1,
            config,
        } => commands::corpus(&out, utterances, duration, seed, ar1, config.config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
