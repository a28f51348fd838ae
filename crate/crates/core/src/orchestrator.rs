//! Round loop: client sampling, local training, representation alignment,
//! aggregation and metrics, for the full method and its ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, assemble_round, fedavg_aggregate, pseudo_gradient, window_length,
    ParticipationLedger,
};
use crate::checkpoint;
use crate::datasets::{dirichlet_partition, gen_synthetic, load_idx, split_test, Dataset, Shard};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_accuracy, fairness_summary, pooled_accuracy, RoundReport};
use crate::nnmodel::{local_train, ModelSpec, ParameterVector};
use crate::representation::{
    align_round, client_embedding, cos, global_embedding, AlignmentRecord, Embedding,
};
use crate::rng::{substream, Purpose};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Alignment plus contribution-aware aggregation.
    Corefed,
    /// Contribution-aware aggregation on raw embeddings, no alignment.
    Cofed,
    /// Alignment diagnostics with data-size-weighted aggregation.
    Refed,
    Fedavg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Corefed,
        Algorithm::Cofed,
        Algorithm::Refed,
        Algorithm::Fedavg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Corefed => "corefed",
            Algorithm::Cofed => "cofed",
            Algorithm::Refed => "refed",
            Algorithm::Fedavg => "fedavg",
        }
    }

    fn uses_embeddings(self) -> bool {
        self != Algorithm::Fedavg
    }

    fn distills(self) -> bool {
        matches!(self, Algorithm::Corefed | Algorithm::Refed)
    }

    fn fairness_aggregation(self) -> bool {
        matches!(self, Algorithm::Corefed | Algorithm::Cofed)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown algorithm {s:?}; expected one of corefed, cofed, refed, fedavg"
                ))
            })
    }
}

/// How per-round accuracy is reduced over clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Unweighted mean of per-client test accuracies.
    #[default]
    PerClient,
    /// One accuracy over all clients' test samples together.
    Pooled,
}

/// Clients online per round, as a count or a fraction of all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OnlineClients {
    Count(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        num_classes: usize,
        input_dim: usize,
        samples: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub clients: usize,
    pub online_per_round: OnlineClients,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub lr_decay: f64,
    pub gamma: f64,
    pub k: f64,
    pub beta: f64,
    pub tau_c: f64,
    pub dirichlet_alpha: f64,
    pub test_fraction: f64,
    pub accuracy: AccuracyMode,
    pub seed: u64,
    /// Write a checkpoint every this many rounds; 0 disables checkpoints.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub dataset: DatasetSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Corefed,
            rounds: 1000,
            clients: 100,
            online_per_round: OnlineClients::Count(20),
            local_epochs: 1,
            batch_size: 50,
            eta0: 0.1,
            lr_decay: 0.999,
            gamma: 0.5,
            k: 2.0,
            beta: 0.5,
            tau_c: 0.07,
            dirichlet_alpha: 0.5,
            test_fraction: 0.2,
            accuracy: AccuracyMode::PerClient,
            seed: 0,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            model: ModelSpec::synthetic(10),
            dataset: DatasetSource::Synthetic {
                num_classes: 10,
                input_dim: 32,
                samples: 6000,
            },
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn online_count(&self) -> usize {
        match self.online_per_round {
            OnlineClients::Count(c) => c,
            OnlineClients::Fraction(f) => ((f * self.clients as f64).round() as usize).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(invalid("clients must be at least 1"));
        }
        if let OnlineClients::Fraction(f) = self.online_per_round {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid("online_per_round as a fraction must lie in (0,1]"));
            }
        }
        let online = self.online_count();
        if online == 0 || online > self.clients {
            return Err(invalid(format!(
                "online_per_round must lie in [1, clients = {}], got {online}",
                self.clients
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(invalid("eta0 must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("lr_decay must lie in (0,1]"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma must be non-negative"));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(invalid("k must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("beta must lie in [0,1]"));
        }
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return Err(invalid("tau_c must be positive"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(invalid("dirichlet_alpha must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction must lie in (0,1)"));
        }
        self.model.validate()?;
        if let DatasetSource::Synthetic {
            num_classes,
            input_dim,
            samples,
        } = self.dataset
        {
            if num_classes == 0 || input_dim == 0 || samples == 0 {
                return Err(invalid(
                    "dataset num_classes, input_dim and samples must be positive",
                ));
            }
            if input_dim != self.model.input_dim {
                return Err(invalid(format!(
                    "model.input_dim = {} does not match dataset.input_dim = {input_dim}",
                    self.model.input_dim
                )));
            }
            if num_classes > self.model.num_classes {
                return Err(invalid(format!(
                    "model.num_classes = {} is smaller than dataset.num_classes = {num_classes}",
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// `eta0 * decay^(t - 1)`.
pub fn lr_schedule(eta0: f64, decay: f64, t: usize) -> f64 {
    eta0 * decay.powi(t.saturating_sub(1) as i32)
}

/// Uniform sample without replacement of `k` of the `n` client ids, from the
/// sampling stream of round `t`.
pub fn sample_clients(seed: u64, t: usize, n: usize, k: usize) -> BTreeSet<usize> {
    let mut rng = substream(seed, Purpose::Sampling, t as u64, 0);
    rand::seq::index::sample(&mut rng, n, k.min(n))
        .into_iter()
        .collect()
}

pub fn build_dataset<T: Scalar>(source: &DatasetSource, seed: u64) -> Result<Dataset<T>> {
    match source {
        DatasetSource::Synthetic {
            num_classes,
            input_dim,
            samples,
        } => gen_synthetic(*num_classes, *input_dim, *samples, seed),
        DatasetSource::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Dataset, Dirichlet partition and per-client train/test split for `config`.
/// Depends only on the seed and data settings, never on the algorithm.
pub fn build_shards<T: Scalar>(config: &ExperimentConfig) -> Result<Vec<Shard<T>>> {
    let data: Dataset<T> = build_dataset(&config.dataset, config.seed)?;
    if data.input_dim() != config.model.input_dim {
        return Err(invalid(format!(
            "dataset has input_dim {}, model expects {}",
            data.input_dim(),
            config.model.input_dim
        )));
    }
    if data.num_classes() > config.model.num_classes {
        return Err(invalid(format!(
            "dataset has {} classes, model has {}",
            data.num_classes(),
            config.model.num_classes
        )));
    }
    let plan = dirichlet_partition(&data, config.clients, config.dirichlet_alpha, config.seed)?;
    split_test(&data, &plan, config.test_fraction)
}

pub fn initial_model<T: Scalar>(config: &ExperimentConfig) -> ParameterVector<T> {
    ParameterVector::init(
        &config.model,
        &mut substream(config.seed, Purpose::Init, 0, 0),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState<T> {
    /// Rounds completed so far.
    pub round: usize,
    pub global: ParameterVector<T>,
    pub ledger: ParticipationLedger<T>,
}

/// Everything one round produced, beyond the report.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome<T> {
    pub report: RoundReport<T>,
    pub alignment: Vec<AlignmentRecord<T>>,
    pub locals: BTreeMap<usize, ParameterVector<T>>,
    /// Clients that were sampled but failed to train and were dropped.
    pub dropped: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput<T> {
    pub initial_model: ParameterVector<T>,
    pub final_model: ParameterVector<T>,
    pub reports: Vec<RoundReport<T>>,
}

pub struct Experiment<T> {
    config: ExperimentConfig,
    shards: Vec<Shard<T>>,
    state: RunState<T>,
}

struct ClientResult<T> {
    local: ParameterVector<T>,
    embedding: Option<Embedding<T>>,
}

impl<T: Scalar> Experiment<T> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let shards = build_shards(&config)?;
        Self::with_shards(config, shards)
    }

    /// Uses caller-provided shards; client ids must be `0..clients`.
    pub fn with_shards(config: ExperimentConfig, shards: Vec<Shard<T>>) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.clients
            || shards.iter().enumerate().any(|(i, s)| s.client_id != i)
        {
            return Err(invalid(format!(
                "expected shards for clients 0..{}, got {}",
                config.clients,
                shards.len()
            )));
        }
        let global = initial_model(&config);
        Ok(Self {
            config,
            shards,
            state: RunState {
                round: 0,
                global,
                ledger: ParticipationLedger::new(),
            },
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn shards(&self) -> &[Shard<T>] {
        &self.shards
    }

    pub fn state(&self) -> &RunState<T> {
        &self.state
    }

    pub fn global(&self) -> &ParameterVector<T> {
        &self.state.global
    }

    fn train_clients(
        &self,
        t: usize,
        online: &BTreeSet<usize>,
        lr: T,
    ) -> Vec<(usize, Result<ClientResult<T>>)> {
        let cfg = &self.config;
        let global = &self.state.global;
        let ids: Vec<usize> = online.iter().copied().collect();
        ids.into_par_iter()
            .map(|id| {
                let shard = &self.shards[id];
                let mut rng = substream(cfg.seed, Purpose::Shuffle, t as u64, id as u64);
                let res = local_train(
                    global,
                    &cfg.model,
                    shard,
                    cfg.local_epochs,
                    cfg.batch_size,
                    lr,
                    &mut rng,
                )
                .and_then(|local| {
                    let embedding = if cfg.algorithm.uses_embeddings() {
                        let ce = client_embedding(&local, &cfg.model, shard)?;
                        if ce.degenerate {
                            return Err(Error::Measurement(format!(
                                "client {id} produced only degenerate embeddings"
                            )));
                        }
                        Some(ce.embedding)
                    } else {
                        None
                    };
                    Ok(ClientResult { local, embedding })
                });
                (id, res)
            })
            .collect()
    }

    /// Executes the next round.
    pub fn run_round(&mut self) -> Result<RoundOutcome<T>> {
        let cfg = self.config.clone();
        let t = self.state.round + 1;
        let lr_f64 = lr_schedule(cfg.eta0, cfg.lr_decay, t);
        let lr = T::of(lr_f64);
        let online = sample_clients(cfg.seed, t, cfg.clients, cfg.online_count());

        let mut locals = BTreeMap::new();
        let mut embeddings = Vec::new();
        let mut dropped = BTreeSet::new();
        for (id, res) in self.train_clients(t, &online, lr) {
            match res {
                Ok(r) => {
                    if let Some(e) = r.embedding {
                        embeddings.push((id, e));
                    }
                    locals.insert(id, r.local);
                }
                Err(e) => {
                    log::warn!("round {t}: dropping client {id}: {e}");
                    dropped.insert(id);
                }
            }
        }
        if locals.is_empty() {
            return Err(Error::Protocol(format!(
                "round {t}: every sampled client failed"
            )));
        }
        let active: BTreeSet<usize> = locals.keys().copied().collect();

        // Representation block.
        let alignment = if !cfg.algorithm.uses_embeddings() {
            Vec::new()
        } else if cfg.algorithm.distills() {
            align_round(&embeddings, T::of(cfg.beta), T::of(cfg.tau_c))?.1
        } else {
            let raw: Vec<Embedding<T>> = embeddings.iter().map(|(_, e)| e.clone()).collect();
            let z_g = global_embedding(&raw)?;
            embeddings
                .iter()
                .map(|(id, z)| {
                    let score = cos(z, &z_g);
                    AlignmentRecord {
                        client_id: *id,
                        raw: z.clone(),
                        alignment_score: score,
                        refined: z.clone(),
                        similarity: score,
                        contrastive_loss: None,
                    }
                })
                .collect()
        };
        let similarities: BTreeMap<usize, T> = alignment
            .iter()
            .map(|r| (r.client_id, r.similarity))
            .collect();

        // Aggregation block.
        let global = &self.state.global;
        let mut fresh = BTreeMap::new();
        for (&id, local) in &locals {
            fresh.insert(id, pseudo_gradient(global, local, lr)?);
        }
        let (new_global, weights, window_tau) = if cfg.algorithm.fairness_aggregation() {
            let assembly = assemble_round(
                &mut self.state.ledger,
                &active,
                fresh,
                &similarities,
                t,
                T::of(cfg.gamma),
                T::of(cfg.k),
            )?;
            let next = aggregate(global, &assembly.assignment, &assembly.gradients, lr)?;
            (
                next,
                assembly.assignment.weights,
                Some(assembly.assignment.window_tau),
            )
        } else {
            let tau = window_length(&self.state.ledger, active.len());
            let ledger = &mut self.state.ledger;
            ledger.record_round(t, &active)?;
            for (id, g) in fresh {
                ledger.store_gradient(id, g);
            }
            for (&id, &rho) in &similarities {
                ledger.store_similarity(id, rho);
            }
            let sizes: BTreeMap<usize, usize> = active
                .iter()
                .map(|&id| (id, self.shards[id].train.len()))
                .collect();
            let n: usize = sizes.values().sum();
            let weights = sizes
                .iter()
                .map(|(&id, &s)| (id, T::of_usize(s) / T::of_usize(n)))
                .collect();
            (fedavg_aggregate(&locals, &sizes)?, weights, Some(tau))
        };

        let (mut mean_accuracy, per_client_accuracy) =
            evaluate_accuracy(&new_global, &cfg.model, &self.shards)?;
        if cfg.accuracy == AccuracyMode::Pooled {
            mean_accuracy = pooled_accuracy(&new_global, &cfg.model, &self.shards)?;
        }
        let (d_cosine_mean, d_manhattan_mean) = fairness_summary(&locals, &new_global)?;
        let contrastive_losses = if cfg.algorithm.distills() {
            alignment
                .iter()
                .map(|r| (r.client_id, r.contrastive_loss))
                .collect()
        } else {
            BTreeMap::new()
        };

        self.state.global = new_global;
        self.state.round = t;
        if cfg.checkpoint_interval > 0 && t.is_multiple_of(cfg.checkpoint_interval) {
            if let Some(dir) = &cfg.checkpoint_dir {
                self.write_checkpoint(dir)?;
            }
        }

        let report = RoundReport {
            round: t,
            mean_accuracy,
            per_client_accuracy,
            d_cosine_mean,
            d_manhattan_mean,
            contrastive_losses,
            weights,
            learning_rate: lr,
            online,
            window_tau,
        };
        Ok(RoundOutcome {
            report,
            alignment,
            locals,
            dropped,
        })
    }

    /// Writes `round_{t}/global.bin` and the ledger files under `dir`.
    pub fn write_checkpoint(&self, dir: &std::path::Path) -> Result<PathBuf> {
        let round_dir = dir.join(format!("round_{}", self.state.round));
        std::fs::create_dir_all(&round_dir)?;
        let mut w = BufWriter::new(File::create(round_dir.join("global.bin"))?);
        checkpoint::write_vector(&mut w, self.state.global.as_slice())?;
        w.flush()?;
        self.state.ledger.save(&round_dir)?;
        Ok(round_dir)
    }

    /// Runs the remaining rounds up to `config.rounds`.
    pub fn run(&mut self) -> Result<Vec<RoundReport<T>>> {
        let mut reports = Vec::with_capacity(self.config.rounds);
        while self.state.round < self.config.rounds {
            let outcome = self.run_round()?;
            log::info!(
                "[{}] round {}: acc {:.4} d_cos {:?} d_l1 {:.4}",
                self.config.algorithm,
                outcome.report.round,
                outcome.report.mean_accuracy,
                outcome.report.d_cosine_mean,
                outcome.report.d_manhattan_mean
            );
            reports.push(outcome.report);
        }
        Ok(reports)
    }
}

pub fn run_experiment<T: Scalar>(config: ExperimentConfig) -> Result<RunOutput<T>> {
    let mut exp = Experiment::<T>::new(config)?;
    let initial_model = exp.global().clone();
    let reports = exp.run()?;
    Ok(RunOutput {
        initial_model,
        final_model: exp.global().clone(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::PartitionPlan;

    fn small_config(algorithm: Algorithm) -> ExperimentConfig {
        ExperimentConfig {
            algorithm,
            rounds: 3,
            clients: 5,
            online_per_round: OnlineClients::Count(3),
            batch_size: 16,
            dirichlet_alpha: 1.0,
            seed: 17,
            model: ModelSpec::new(8, vec![12, 10], 3).unwrap(),
            dataset: DatasetSource::Synthetic {
                num_classes: 3,
                input_dim: 8,
                samples: 300,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(0.1, 0.999, 1), 0.1);
        assert!((lr_schedule(0.1, 0.999, 2) - 0.0999).abs() < 1e-15);
        let t1000 = lr_schedule(0.1, 0.999, 1000);
        assert!((t1000 - 0.1 * 0.999f64.powf(999.0)).abs() < 1e-15);
        assert!((t1000 - 0.03681).abs() < 1e-5);
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_clients(1, 1, 10, 10), (0..10).collect());
        assert_eq!(sample_clients(4, 7, 100, 20), sample_clients(4, 7, 100, 20));
        assert_eq!(sample_clients(4, 7, 100, 20).len(), 20);
    }

    #[test]
    fn sampling_rate_is_uniform() {
        let mut counts = [0usize; 100];
        for t in 1..=1000 {
            for c in sample_clients(99, t, 100, 20) {
                counts[c] += 1;
            }
        }
        for c in counts {
            let rate = c as f64 / 1000.0;
            assert!((0.15..=0.25).contains(&rate), "rate {rate}");
        }
    }

    #[test]
    fn validation_messages() {
        let c = ExperimentConfig {
            beta: 1.5,
            ..ExperimentConfig::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("beta must lie in [0,1]"), "{err}");
        let c = ExperimentConfig {
            online_per_round: OnlineClients::Count(101),
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let mut cfg = small_config(Algorithm::Corefed);
        cfg.rounds = 0;
        let out = run_experiment::<f64>(cfg.clone()).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.final_model, out.initial_model);
        assert_eq!(out.initial_model, initial_model::<f64>(&cfg));
    }

    #[test]
    fn runs_are_deterministic() {
        for alg in Algorithm::ALL {
            let a = run_experiment::<f64>(small_config(alg)).unwrap();
            let b = run_experiment::<f64>(small_config(alg)).unwrap();
            assert_eq!(a, b, "{alg}");
            assert_eq!(a.reports.len(), 3);
        }
    }

    #[test]
    fn fedavg_single_client_adopts_local_model() {
        let mut cfg = small_config(Algorithm::Fedavg);
        cfg.online_per_round = OnlineClients::Count(1);
        let mut exp = Experiment::<f64>::new(cfg).unwrap();
        let out = exp.run_round().unwrap();
        let (_, local) = out.locals.iter().next().unwrap();
        assert_eq!(exp.global(), local);
    }

    #[test]
    fn algorithms_share_partition_and_samples() {
        let mut online = Vec::new();
        for alg in Algorithm::ALL {
            let exp = Experiment::<f64>::new(small_config(alg)).unwrap();
            let mut e = exp;
            let shards = e.shards().to_vec();
            let init = e.global().clone();
            let reports = e.run().unwrap();
            online.push((
                shards,
                init,
                reports.iter().map(|r| r.online.clone()).collect::<Vec<_>>(),
            ));
        }
        for w in online.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn refed_and_corefed_share_alignment_records() {
        let mut a = Experiment::<f64>::new(small_config(Algorithm::Corefed)).unwrap();
        let mut b = Experiment::<f64>::new(small_config(Algorithm::Refed)).unwrap();
        let ra = a.run_round().unwrap();
        let rb = b.run_round().unwrap();
        assert_eq!(ra.locals, rb.locals);
        assert_eq!(ra.alignment, rb.alignment);
        for r in &ra.alignment {
            assert_eq!(
                r.similarity,
                cos(
                    &r.refined,
                    &global_embedding(
                        &ra.alignment
                            .iter()
                            .map(|x| x.raw.clone())
                            .collect::<Vec<_>>()
                    )
                    .unwrap()
                )
            );
        }
    }

    #[test]
    fn ledger_tracks_distinct_clients() {
        let mut exp = Experiment::<f64>::new(small_config(Algorithm::Corefed)).unwrap();
        let mut last = 0;
        for _ in 0..3 {
            exp.run_round().unwrap();
            let m = exp.state().ledger.distinct_count();
            assert!(m >= last && m <= 5);
            last = m;
        }
    }

    #[test]
    fn pooled_mode_changes_only_the_reported_mean() {
        let per = run_experiment::<f64>(small_config(Algorithm::Corefed)).unwrap();
        let cfg = ExperimentConfig {
            accuracy: AccuracyMode::Pooled,
            ..small_config(Algorithm::Corefed)
        };
        let pooled = run_experiment::<f64>(cfg.clone()).unwrap();
        assert_eq!(per.final_model, pooled.final_model);
        let shards = build_shards::<f64>(&cfg).unwrap();
        for (a, b) in per.reports.iter().zip(&pooled.reports) {
            assert_eq!(a.per_client_accuracy, b.per_client_accuracy);
            // Oracle: weight each client's accuracy by its test size.
            let (mut hit, mut n) = (0.0, 0usize);
            for s in shards.iter().filter(|s| !s.test.is_empty()) {
                hit += b.per_client_accuracy[&s.client_id] * s.test.len() as f64;
                n += s.test.len();
            }
            assert!((b.mean_accuracy - hit / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn report_weights_lie_on_simplex() {
        let mut exp = Experiment::<f64>::new(small_config(Algorithm::Corefed)).unwrap();
        for _ in 0..3 {
            let out = exp.run_round().unwrap();
            let w = &out.report.weights;
            assert!(w.values().all(|&x| x > 0.0));
            assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(out.report.mean_contrastive_loss().is_some());
        }
    }

    #[test]
    fn checkpoints_written_on_interval() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(Algorithm::Corefed);
        cfg.checkpoint_interval = 2;
        cfg.rounds = 4;
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let out = run_experiment::<f64>(cfg).unwrap();
        assert!(!dir.path().join("round_1").exists());
        let r4 = dir.path().join("round_4");
        let bytes = std::fs::read(r4.join("global.bin")).unwrap();
        let back: Vec<f64> = checkpoint::read_vector(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, out.final_model.as_slice());
        let ledger = ParticipationLedger::<f64>::load(&r4).unwrap();
        assert_eq!(ledger.rounds(), 4);
    }

    #[test]
    fn with_shards_rejects_misnumbered_clients() {
        let cfg = small_config(Algorithm::Fedavg);
        let data: Dataset<f64> = gen_synthetic(3, 8, 50, 0).unwrap();
        let shards = split_test(&data, &PartitionPlan::round_robin(50, 4, 0), 0.2).unwrap();
        assert!(Experiment::with_shards(cfg, shards).is_err());
    }

    #[test]
    fn f32_run_completes() {
        let out = run_experiment::<f32>(small_config(Algorithm::Corefed)).unwrap();
        assert_eq!(out.reports.len(), 3);
        assert!(out.reports.iter().all(|r| r.mean_accuracy.is_finite()));
    }
}
