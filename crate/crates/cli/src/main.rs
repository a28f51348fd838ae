use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corefed_cli::{
    apply_seed_override, cmd_run, cmd_sweep, parse_algorithms, parse_config, resolved_toml,
    CliError, RunManifest, SEED_ENV,
};
use corefed_core::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "corefed",
    version,
    about = "Fairness-aware federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<algorithm>-<config hash prefix>`.
        #[arg(long)]
        run_id: Option<String>,
        /// Replace an existing run directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Run several algorithms on the same seed and partition.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "corefed,cofed,refed,fedavg")]
        algorithms: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Parse and validate a config, then print it fully resolved.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut config = parse_config(path)?;
    apply_seed_override(&mut config, std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            run_id,
            overwrite,
        } => {
            let cfg = load(&config)?;
            let manifest = RunManifest::new(&config, &out, run_id, cfg)?;
            let summary = cmd_run(&manifest, overwrite)?;
            println!("{}", manifest.run_dir().display());
            if let Some(m) = summary.final_metrics {
                println!(
                    "round {}: mean_accuracy {:.4}, d_cosine_mean {}, d_manhattan_mean {:.4}",
                    m.round,
                    m.mean_accuracy,
                    m.d_cosine_mean.map_or("n/a".into(), |d| format!("{d:.4}")),
                    m.d_manhattan_mean
                );
            }
        }
        Command::Sweep {
            config,
            algorithms,
            out,
            overwrite,
        } => {
            let cfg = load(&config)?;
            let algs = parse_algorithms(&algorithms)?;
            cmd_sweep(&config, &cfg, &algs, &out, overwrite)?;
            println!("{}", out.join("comparison.csv").display());
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            print!("{}", resolved_toml(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
