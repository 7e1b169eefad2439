//! unitforge command-line interface.
//!
//! Exit codes: 0 success, 2 I/O or config problems (also clap usage errors),
//! 3 missing prerequisite artifact, 4 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unitforge::commands::{
    cmd_eval, cmd_gen_units, cmd_pretrain, cmd_report, cmd_synth, cmd_train_uasr, CliError,
};
use unitforge::config::RunConfig;
use unitforge::evalsynth::Pipeline;

#[derive(Parser)]
#[command(
    name = "unitforge",
    about = "Frame-aligned discrete-unit discovery and masked-prediction pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Path to the run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default configuration file with desk and paper presets.
    InitConfig {
        /// Where to write the configuration.
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory recorded in the config.
        #[arg(long, default_value = "out/corpus")]
        corpus_dir: PathBuf,
        /// Output directory recorded in the config.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Generate the synthetic oracle corpus (features, ground truth, text).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the adversarial unsupervised phoneme labeler.
    TrainUasr {
        #[command(flatten)]
        common: Common,
    },
    /// Generate frame-aligned unit files for one pipeline.
    GenUnits {
        #[command(flatten)]
        common: Common,
        /// Unit pipeline: mono, lt, pt, pp, or pc.
        #[arg(long = "type", value_parser = parse_pipeline)]
        pipeline: Pipeline,
    },
    /// Pre-train the backbone on a unit file with the masked-prediction loss.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Unit pipeline: mono, lt, pt, pp, or pc.
        #[arg(long = "type", value_parser = parse_pipeline)]
        pipeline: Pipeline,
    },
    /// Score every generated unit inventory against the oracle ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Render the evaluation report as an aligned text table.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    Pipeline::parse(s).ok_or_else(|| format!("unknown unit type `{s}` (want mono|lt|pt|pp|pc)"))
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config).map_err(CliError::Config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::InitConfig {
            config,
            corpus_dir,
            out_dir,
            seed,
        } => {
            let cfg = RunConfig::default_config(corpus_dir, out_dir, seed);
            cfg.save(&config).map_err(CliError::Config)?;
            println!("wrote {}", config.display());
            Ok(())
        }
        Command::Synth { common } => cmd_synth(&load(&common)?),
        Command::TrainUasr { common } => cmd_train_uasr(&load(&common)?),
        Command::GenUnits { common, pipeline } => cmd_gen_units(&load(&common)?, pipeline),
        Command::Pretrain { common, pipeline } => cmd_pretrain(&load(&common)?, pipeline),
        Command::Eval { common } => cmd_eval(&load(&common)?),
        Command::Report { common } => {
            let table = cmd_report(&load(&common)?)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
