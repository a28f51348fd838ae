//! Contribution-aware aggregation.
//!
//! Participation is tracked in a [`ParticipationLedger`]. Each round the
//! window length is `ceil(M / |C_t|)`, where `M` counts distinct clients seen
//! in earlier rounds. A member's weight is proportional to
//! `(1/f_i)^gamma * sigmoid(k * rho_i)`: clients that show up rarely and whose
//! refined embedding agrees with the global one are favored. Recently offline
//! clients keep contributing their cached pseudo-gradient for up to `tau`
//! rounds after their last appearance.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{check_len, Error, Result};
use crate::nnmodel::ParameterVector;
use crate::scalar::{log_sigmoid, Scalar};

pub const LEDGER_FILE: &str = "ledger.json";
pub const GRADIENT_FILE: &str = "gradients.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationLedger<T> {
    /// `history[r - 1]` is the online set of round `r`.
    history: Vec<BTreeSet<usize>>,
    last_participation: BTreeMap<usize, usize>,
    last_gradient: BTreeMap<usize, ParameterVector<T>>,
    last_similarity: BTreeMap<usize, T>,
}

impl<T: Scalar> Default for ParticipationLedger<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParticipationLedger<T> {
    pub fn new() -> Self {
        Self {
            history: Vec::new(),
            last_participation: BTreeMap::new(),
            last_gradient: BTreeMap::new(),
            last_similarity: BTreeMap::new(),
        }
    }

    /// Number of rounds recorded so far.
    pub fn rounds(&self) -> usize {
        self.history.len()
    }

    /// `M`: distinct clients across all recorded rounds.
    pub fn distinct_count(&self) -> usize {
        self.last_participation.len()
    }

    pub fn online_at(&self, round: usize) -> Option<&BTreeSet<usize>> {
        round.checked_sub(1).and_then(|r| self.history.get(r))
    }

    pub fn participated(&self, client: usize, round: usize) -> bool {
        self.online_at(round).is_some_and(|s| s.contains(&client))
    }

    pub fn last_participation(&self, client: usize) -> Option<usize> {
        self.last_participation.get(&client).copied()
    }

    pub fn cached_gradient(&self, client: usize) -> Option<&ParameterVector<T>> {
        self.last_gradient.get(&client)
    }

    pub fn cached_similarity(&self, client: usize) -> Option<T> {
        self.last_similarity.get(&client).copied()
    }

    pub fn known_clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.last_participation.keys().copied()
    }

    /// Appends round `t`'s online set. Rounds must be recorded in order.
    pub fn record_round(&mut self, t: usize, online: &BTreeSet<usize>) -> Result<()> {
        if t != self.history.len() + 1 {
            return Err(Error::Protocol(format!(
                "ledger expected round {}, got {t}",
                self.history.len() + 1
            )));
        }
        self.history.push(online.clone());
        for &c in online {
            self.last_participation.insert(c, t);
        }
        Ok(())
    }

    pub fn store_gradient(&mut self, client: usize, gradient: ParameterVector<T>) {
        self.last_gradient.insert(client, gradient);
    }

    pub fn store_similarity(&mut self, client: usize, similarity: T) {
        self.last_similarity.insert(client, similarity);
    }

    /// Writes `ledger.json` and `gradients.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bin = BufWriter::new(File::create(dir.join(GRADIENT_FILE))?);
        let mut gradients = Vec::with_capacity(self.last_gradient.len());
        for (&client, g) in &self.last_gradient {
            bin.write_all(&(client as u64).to_le_bytes())?;
            checkpoint::write_vector(&mut bin, g.as_slice())?;
            gradients.push(GradientDigest {
                client,
                len: g.len(),
                sha256: checkpoint::digest(g.as_slice()),
            });
        }
        bin.flush()?;
        let doc = LedgerCheckpoint {
            format_version: 1,
            rounds: self.history.len(),
            distinct_clients: self.distinct_count(),
            history: self
                .history
                .iter()
                .map(|s| s.iter().copied().collect())
                .collect(),
            last_participation: self.last_participation.clone(),
            last_similarity: self
                .last_similarity
                .iter()
                .map(|(&c, s)| (c, s.as_f64()))
                .collect(),
            gradients,
        };
        let mut json = BufWriter::new(File::create(dir.join(LEDGER_FILE))?);
        serde_json::to_writer_pretty(&mut json, &doc)?;
        json.write_all(b"\n")?;
        json.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let doc: LedgerCheckpoint =
            serde_json::from_reader(BufReader::new(File::open(dir.join(LEDGER_FILE))?))?;
        let mut bin = BufReader::new(File::open(dir.join(GRADIENT_FILE))?);
        let mut last_gradient = BTreeMap::new();
        for entry in &doc.gradients {
            let client = checkpoint::read_u64(&mut bin)? as usize;
            let values: Vec<T> = checkpoint::read_vector(&mut bin)?;
            if client != entry.client
                || values.len() != entry.len
                || checkpoint::digest(&values) != entry.sha256
            {
                return Err(Error::Format(format!(
                    "gradient cache entry for client {} does not match its digest",
                    entry.client
                )));
            }
            last_gradient.insert(client, ParameterVector::new(values));
        }
        let ledger = Self {
            history: doc
                .history
                .into_iter()
                .map(|r| r.into_iter().collect())
                .collect(),
            last_participation: doc.last_participation,
            last_gradient,
            last_similarity: doc
                .last_similarity
                .into_iter()
                .map(|(c, s)| (c, T::of(s)))
                .collect(),
        };
        if ledger.distinct_count() != doc.distinct_clients || ledger.rounds() != doc.rounds {
            return Err(Error::Format(
                "ledger checkpoint header is inconsistent".into(),
            ));
        }
        Ok(ledger)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GradientDigest {
    client: usize,
    len: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LedgerCheckpoint {
    format_version: u32,
    rounds: usize,
    distinct_clients: usize,
    history: Vec<Vec<usize>>,
    last_participation: BTreeMap<usize, usize>,
    last_similarity: BTreeMap<usize, f64>,
    gradients: Vec<GradientDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightAssignment<T> {
    pub weights: BTreeMap<usize, T>,
    pub window_tau: usize,
    pub frequencies: BTreeMap<usize, T>,
    pub similarities: BTreeMap<usize, T>,
}

impl<T: Scalar> WeightAssignment<T> {
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.keys().copied()
    }

    pub fn total(&self) -> T {
        self.weights.values().copied().sum()
    }
}

/// `max(1, ceil(M / num_online))`, with `M` taken from the rounds recorded so
/// far.
pub fn window_length<T: Scalar>(ledger: &ParticipationLedger<T>, num_online: usize) -> usize {
    let m = ledger.distinct_count();
    m.div_ceil(num_online.max(1)).max(1)
}

/// Fraction of rounds `t - tau + 1 ..= t` in which `client` was online.
/// Rounds before 1, or not yet recorded, count as absent.
pub fn participation_frequency<T: Scalar>(
    ledger: &ParticipationLedger<T>,
    client: usize,
    t: usize,
    tau: usize,
) -> T {
    let tau = tau.max(1);
    let start = (t + 1).saturating_sub(tau).max(1);
    let hits = (start..=t)
        .filter(|&r| ledger.participated(client, r))
        .count();
    T::of_usize(hits) / T::of_usize(tau)
}

/// Normalized `(1/f_i)^gamma * sigmoid(k * rho_i)` over `members`.
pub fn fairness_weights<T: Scalar>(
    members: &[usize],
    frequencies: &BTreeMap<usize, T>,
    similarities: &BTreeMap<usize, T>,
    gamma: T,
    k: T,
) -> Result<WeightAssignment<T>> {
    if members.is_empty() {
        return Err(Error::Protocol("fairness weights over zero members".into()));
    }
    if !(gamma >= T::zero()) || !(k >= T::zero()) {
        return Err(Error::Config(format!(
            "gamma and k must be non-negative, got gamma = {gamma}, k = {k}"
        )));
    }
    // Scores are combined in log space so large gamma or tiny f cannot
    // overflow before normalization.
    let mut logs = Vec::with_capacity(members.len());
    for &i in members {
        let f = *frequencies.get(&i).ok_or_else(|| {
            Error::Invariant(format!("no participation frequency for client {i}"))
        })?;
        if !(f > T::zero()) {
            return Err(Error::Invariant(format!(
                "participation frequency of client {i} is {f}; members must have f > 0"
            )));
        }
        let rho = *similarities
            .get(&i)
            .ok_or_else(|| Error::Invariant(format!("no similarity for client {i}")))?;
        logs.push(-gamma * f.ln() + log_sigmoid(k * rho));
    }
    let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: T = raw.iter().copied().sum();
    let mut weights: BTreeMap<usize, T> = members
        .iter()
        .zip(&raw)
        .map(|(&i, &w)| (i, w / total))
        .collect();
    let again: T = weights.values().copied().sum();
    weights.values_mut().for_each(|w| *w = *w / again);
    Ok(WeightAssignment {
        weights,
        window_tau: 0,
        frequencies: members.iter().map(|i| (*i, frequencies[i])).collect(),
        similarities: members.iter().map(|i| (*i, similarities[i])).collect(),
    })
}

/// `(global - local) / eta`: the gradient that a single SGD step of size `eta`
/// would need to move `global` onto `local`.
pub fn pseudo_gradient<T: Scalar>(
    global: &ParameterVector<T>,
    local: &ParameterVector<T>,
    eta: T,
) -> Result<ParameterVector<T>> {
    if !(eta > T::zero()) {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    check_len("pseudo-gradient", global.len(), local.len())?;
    Ok(ParameterVector::new(
        global
            .iter()
            .zip(local.iter())
            .map(|(&g, &l)| (g - l) / eta)
            .collect(),
    ))
}

/// Gradient-reuse rule: the fresh gradient for online clients (which also
/// refreshes the cache), the cached one if the client was last seen at most
/// `tau` rounds ago, otherwise nothing.
pub fn reuse_gradient<T: Scalar>(
    ledger: &mut ParticipationLedger<T>,
    client: usize,
    t: usize,
    tau: usize,
    current: Option<ParameterVector<T>>,
) -> Option<ParameterVector<T>> {
    if let Some(g) = current {
        ledger.store_gradient(client, g.clone());
        return Some(g);
    }
    let t_i = ledger.last_participation(client)?;
    if t_i < t && t - t_i <= tau {
        ledger.cached_gradient(client).cloned()
    } else {
        None
    }
}

/// `global - eta * sum_i w_i * g_i`.
pub fn aggregate<T: Scalar>(
    global: &ParameterVector<T>,
    assignment: &WeightAssignment<T>,
    gradients: &BTreeMap<usize, ParameterVector<T>>,
    eta: T,
) -> Result<ParameterVector<T>> {
    if !assignment.weights.keys().eq(gradients.keys()) {
        return Err(Error::Protocol(
            "weight assignment and gradient set cover different clients".into(),
        ));
    }
    let total = assignment.total();
    if (total - T::one()).abs() > T::of(1e-9) {
        return Err(Error::Invariant(format!("weights sum to {total}, not 1")));
    }
    let mut step = vec![T::zero(); global.len()];
    for (i, g) in gradients {
        check_len("aggregated gradient", global.len(), g.len())?;
        let w = assignment.weights[i];
        for (s, &v) in step.iter_mut().zip(g.iter()) {
            *s = *s + w * v;
        }
    }
    Ok(ParameterVector::new(
        global
            .iter()
            .zip(&step)
            .map(|(&p, &s)| p - eta * s)
            .collect(),
    ))
}

/// Data-size-weighted model average.
pub fn fedavg_aggregate<T: Scalar>(
    locals: &BTreeMap<usize, ParameterVector<T>>,
    sizes: &BTreeMap<usize, usize>,
) -> Result<ParameterVector<T>> {
    let len = locals
        .values()
        .next()
        .ok_or_else(|| Error::Protocol("FedAvg over zero clients".into()))?
        .len();
    let mut n = 0usize;
    for i in locals.keys() {
        match sizes.get(i) {
            Some(&s) if s > 0 => n += s,
            _ => {
                return Err(Error::Protocol(format!(
                    "client {i} has no positive data size"
                )))
            }
        }
    }
    let n = T::of_usize(n);
    let mut out = vec![T::zero(); len];
    for (i, local) in locals {
        check_len("FedAvg local model", len, local.len())?;
        let w = T::of_usize(sizes[i]) / n;
        for (o, &v) in out.iter_mut().zip(local.iter()) {
            *o = *o + w * v;
        }
    }
    Ok(ParameterVector::new(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundAssembly<T> {
    pub assignment: WeightAssignment<T>,
    pub gradients: BTreeMap<usize, ParameterVector<T>>,
    /// Members that contributed a cached gradient.
    pub reused: BTreeSet<usize>,
}

/// Builds the aggregation set for round `t` and records the round in the
/// ledger.
///
/// Members are the online clients plus every offline client last seen within
/// `tau` rounds; the latter contribute their cached gradient and cached
/// similarity. A reused member exactly `tau` rounds stale has no hit inside
/// the window, so its frequency is floored at `1/tau`.
pub fn assemble_round<T: Scalar>(
    ledger: &mut ParticipationLedger<T>,
    online: &BTreeSet<usize>,
    fresh_gradients: BTreeMap<usize, ParameterVector<T>>,
    fresh_similarities: &BTreeMap<usize, T>,
    t: usize,
    gamma: T,
    k: T,
) -> Result<RoundAssembly<T>> {
    if online.is_empty() {
        return Err(Error::Protocol("no online clients this round".into()));
    }
    if !fresh_gradients.keys().eq(online.iter()) || !fresh_similarities.keys().eq(online.iter()) {
        return Err(Error::Protocol(
            "fresh gradients and similarities must be keyed by the online set".into(),
        ));
    }
    let tau = window_length(ledger, online.len());
    let stale: Vec<usize> = ledger
        .known_clients()
        .filter(|c| !online.contains(c))
        .collect();
    ledger.record_round(t, online)?;

    let mut gradients = BTreeMap::new();
    let mut reused = BTreeSet::new();
    for (c, g) in fresh_gradients {
        let g = reuse_gradient(ledger, c, t, tau, Some(g)).expect("fresh gradient");
        ledger.store_similarity(c, fresh_similarities[&c]);
        gradients.insert(c, g);
    }
    for c in stale {
        if let Some(g) = reuse_gradient(ledger, c, t, tau, None) {
            gradients.insert(c, g);
            reused.insert(c);
        }
    }

    let floor = T::one() / T::of_usize(tau);
    let mut frequencies = BTreeMap::new();
    let mut similarities = BTreeMap::new();
    for &c in gradients.keys() {
        let f = participation_frequency(ledger, c, t, tau);
        frequencies.insert(c, if reused.contains(&c) { f.max(floor) } else { f });
        let rho = ledger
            .cached_similarity(c)
            .ok_or_else(|| Error::Invariant(format!("no cached similarity for client {c}")))?;
        similarities.insert(c, rho);
    }
    let members: Vec<usize> = gradients.keys().copied().collect();
    let mut assignment = fairness_weights(&members, &frequencies, &similarities, gamma, k)?;
    assignment.window_tau = tau;
    Ok(RoundAssembly {
        assignment,
        gradients,
        reused,
    })
}
