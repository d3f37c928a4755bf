use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use fedgrow::config::{count_report, ExperimentConfig, Preset};
use fedgrow::experiment::{report, run_experiment, summary_json};
use fedgrow::{Error, Result};

/// Federated growth simulator.
#[derive(Parser)]
#[command(name = "fedgrow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the file and FEDGROW_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// agg, noagg, scratch or fedavg_matched.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write the artifact bundle.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory (else FEDGROW_OUT, else ./fedgrow-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the normalized configuration as TOML.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the summary of a finished run from its checkpoints.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and traffic accounting without training.
    Count {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let env_out = cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &common.preset {
        cfg.preset = p.parse::<Preset>()?;
    }
    Ok((cfg.normalized()?, env_out))
}

fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Run { common, out } => {
            let (cfg, env_out) = load(&common)?;
            let dir = out.or(env_out).unwrap_or_else(|| PathBuf::from("fedgrow-out"));
            let summary = run_experiment(&cfg, &dir)?;
            summary_json(&summary)
        }
        Command::Validate { common } => load(&common)?.0.to_toml(),
        Command::Report { out } => summary_json(&report(Path::new(&out))?),
        Command::Count { common } => {
            let (cfg, _) = load(&common)?;
            Ok(serde_json::to_string_pretty(&count_report(&cfg)?)? + "\n")
        }
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    match e {
        Error::Config(issues) => json!({ "error": e.kind(), "message": e.to_string(), "issues": issues }),
        _ => json!({ "error": e.kind(), "message": e.to_string() }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
