//! Deterministic, single-process federated-learning simulator.
//!
//! The crate simulates a population of clients training a small MLP on
//! private shards, and a server that aligns client representations in
//! embedding space and aggregates local models with weights driven by
//! participation frequency and embedding alignment. A plain FedAvg baseline
//! and the two ablations (aggregation-only and alignment-only) share the same
//! machinery so they can be compared on identical partitions and client
//! samples.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pin the `f64` instantiation used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod nnmodel;
pub mod orchestrator;
pub mod representation;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use aggregation::{ParticipationLedger, WeightAssignment};
pub use datasets::{Dataset, PartitionPlan, Shard};
pub use metrics::RoundReport;
pub use nnmodel::{Activation, Batch, Matrix, ModelSpec, ParameterVector};
pub use orchestrator::{
    AccuracyMode, Algorithm, DatasetSource, Experiment, ExperimentConfig, OnlineClients, RunOutput,
};
pub use representation::{AlignmentRecord, Embedding};

/// Flat parameter vector in double precision.
pub type Params = ParameterVector<f64>;
/// Single-precision parameter vector.
pub type Params32 = ParameterVector<f32>;
/// Double-precision dataset.
pub type Data = Dataset<f64>;
/// Double-precision client shard.
pub type ClientShard = Shard<f64>;
/// Double-precision embedding.
pub type Emb = Embedding<f64>;
/// Double-precision participation ledger.
pub type Ledger = ParticipationLedger<f64>;
/// Double-precision round report.
pub type Report = RoundReport<f64>;
/// Double-precision experiment driver.
pub type Sim = Experiment<f64>;
