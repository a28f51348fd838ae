//! Config parsing, run directories and result files for the `corefed` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use corefed_core::orchestrator::Experiment;
use corefed_core::{Algorithm, ExperimentConfig, Report};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bumped whenever a CSV column or summary field changes.
pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "COREFED_SEED";
pub const ROUNDS_HEADER: &str =
    "round,mean_accuracy,d_cosine_mean,d_manhattan_mean,learning_rate,num_online,mean_contrastive_loss";
pub const COMPARISON_HEADER: &str = "algorithm,mean_accuracy,d_cosine_mean,d_manhattan_mean";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ReadConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("run directory {0} already exists; pass --overwrite to replace it")]
    Exists(PathBuf),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] corefed_core::Error),
}

impl CliError {
    /// 2 for bad input, 1 for everything that failed while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ReadConfig { .. } | CliError::Parse(_) | CliError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Parses and validates a TOML config. Unknown keys are rejected; missing
/// keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string().trim_end().to_owned()))?;
    config
        .validate()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| CliError::ReadConfig {
        path: path.to_owned(),
        source,
    })?;
    parse_config_str(&text)
}

/// Replaces the seed with `value` when it is set.
pub fn apply_seed_override(config: &mut ExperimentConfig, value: Option<&str>) -> Result<()> {
    if let Some(raw) = value {
        config.seed = raw.trim().parse().map_err(|_| {
            CliError::Invalid(format!(
                "{SEED_ENV} must be a non-negative integer, got {raw:?}"
            ))
        })?;
    }
    Ok(())
}

/// The fully resolved config as TOML; parsing it back gives the same config.
pub fn resolved_toml(config: &ExperimentConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| CliError::Parse(format!("cannot serialize config: {e}")))
}

/// Git-style object hash: SHA-256 over `blob <len>\0<content>`.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    pub run_id: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub resolved: String,
}

impl RunManifest {
    /// Without an explicit id the run is named after the config hash.
    pub fn new(
        config_path: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
        run_id: Option<String>,
        config: ExperimentConfig,
    ) -> Result<Self> {
        let resolved = resolved_toml(&config)?;
        let config_hash = content_hash(&resolved);
        let run_id = match run_id {
            Some(id) => {
                if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                    return Err(CliError::Invalid(format!(
                        "run id {id:?} is not a plain name"
                    )));
                }
                id
            }
            None => format!("{}-{}", config.algorithm, &config_hash[..12]),
        };
        Ok(Self {
            config_path: config_path.into(),
            output_dir: output_dir.into(),
            run_id,
            config_hash,
            config,
            resolved,
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub round: usize,
    pub mean_accuracy: f64,
    pub d_cosine_mean: Option<f64>,
    pub d_manhattan_mean: f64,
    pub learning_rate: f64,
    pub num_online: usize,
    pub mean_contrastive_loss: Option<f64>,
}

impl From<&Report> for FinalMetrics {
    fn from(r: &Report) -> Self {
        Self {
            round: r.round,
            mean_accuracy: r.mean_accuracy,
            d_cosine_mean: r.d_cosine_mean,
            d_manhattan_mean: r.d_manhattan_mean,
            learning_rate: r.learning_rate,
            num_online: r.online.len(),
            mean_contrastive_loss: r.mean_contrastive_loss(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    #[serde(rename = "final")]
    pub final_metrics: Option<FinalMetrics>,
    pub final_per_client_accuracy: BTreeMap<usize, f64>,
}

pub fn rounds_csv(reports: &[Report]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in reports {
        let m = FinalMetrics::from(r);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.round,
            fmt_real(m.mean_accuracy),
            fmt_opt(m.d_cosine_mean),
            fmt_real(m.d_manhattan_mean),
            fmt_real(m.learning_rate),
            m.num_online,
            fmt_opt(m.mean_contrastive_loss),
        );
    }
    out
}

/// Long format: one row per (round, client).
pub fn per_client_csv(reports: &[Report]) -> String {
    let mut out = String::from("round,client_id,accuracy\n");
    for r in reports {
        for (id, acc) in &r.per_client_accuracy {
            let _ = writeln!(out, "{},{},{}", r.round, id, fmt_real(*acc));
        }
    }
    out
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(CliError::Exists(dir.to_owned()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs one experiment into `<output_dir>/<run_id>/`. Checkpoints land in the
/// run directory unless the config names another one.
pub fn cmd_run(manifest: &RunManifest, overwrite: bool) -> Result<Summary> {
    let dir = manifest.run_dir();
    prepare_dir(&dir, overwrite)?;
    fs::write(dir.join("config.toml"), &manifest.resolved)?;

    let mut config = manifest.config.clone();
    if config.checkpoint_interval > 0 && config.checkpoint_dir.is_none() {
        config.checkpoint_dir = Some(dir.clone());
    }
    log::info!("run {} -> {}", manifest.run_id, dir.display());
    let mut exp = Experiment::<f64>::new(config)?;
    let reports = exp.run()?;

    fs::write(dir.join("rounds.csv"), rounds_csv(&reports))?;
    fs::write(
        dir.join("per_client_accuracy.csv"),
        per_client_csv(&reports),
    )?;
    let last = reports.last();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        run_id: manifest.run_id.clone(),
        config_hash: manifest.config_hash.clone(),
        algorithm: manifest.config.algorithm,
        seed: manifest.config.seed,
        rounds: reports.len(),
        final_metrics: last.map(FinalMetrics::from),
        final_per_client_accuracy: last
            .map(|r| r.per_client_accuracy.clone())
            .unwrap_or_default(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(corefed_core::Error::from)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

/// Parses a comma-separated algorithm list, keeping the given order.
pub fn parse_algorithms(list: &str) -> Result<Vec<Algorithm>> {
    let mut out: Vec<Algorithm> = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let alg: Algorithm = name
            .parse()
            .map_err(|e: corefed_core::Error| CliError::Invalid(e.to_string()))?;
        if out.contains(&alg) {
            return Err(CliError::Invalid(format!("algorithm {alg} listed twice")));
        }
        out.push(alg);
    }
    if out.is_empty() {
        return Err(CliError::Invalid("no algorithms given".into()));
    }
    Ok(out)
}

/// Runs every algorithm on the same config and seed, each into
/// `<out>/<algorithm>/`, then writes `<out>/comparison.csv` in the given order.
pub fn cmd_sweep(
    config_path: &Path,
    config: &ExperimentConfig,
    algorithms: &[Algorithm],
    out: &Path,
    overwrite: bool,
) -> Result<Vec<Summary>> {
    if algorithms.is_empty() {
        return Err(CliError::Invalid("no algorithms given".into()));
    }
    fs::create_dir_all(out)?;
    let mut summaries = Vec::with_capacity(algorithms.len());
    let mut table = String::from(COMPARISON_HEADER);
    table.push('\n');
    for &alg in algorithms {
        let cfg = ExperimentConfig {
            algorithm: alg,
            ..config.clone()
        };
        let manifest = RunManifest::new(config_path, out, Some(alg.to_string()), cfg)?;
        let summary = cmd_run(&manifest, overwrite)?;
        match &summary.final_metrics {
            Some(m) => {
                let _ = writeln!(
                    table,
                    "{alg},{},{},{}",
                    fmt_real(m.mean_accuracy),
                    fmt_opt(m.d_cosine_mean),
                    fmt_real(m.d_manhattan_mean)
                );
            }
            None => {
                let _ = writeln!(table, "{alg},,,");
            }
        }
        summaries.push(summary);
    }
    fs::write(out.join("comparison.csv"), table)?;
    Ok(summaries)
}
