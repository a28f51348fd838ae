//! Fairness and accuracy measurement.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::datasets::Shard;
use crate::error::{check_len, Error, Result};
use crate::nnmodel::{forward, ModelSpec, ParameterVector};
use crate::representation::NORM_EPS;
use crate::scalar::{dot, norm, Scalar};

/// Angle in radians between the flattened parameter vectors.
pub fn d_cosine<T: Scalar>(client: &ParameterVector<T>, global: &ParameterVector<T>) -> Result<T> {
    check_len("d_cosine", global.len(), client.len())?;
    let (a, b) = (client.as_slice(), global.as_slice());
    let (na, nb) = (norm(a), norm(b));
    if na < T::of(NORM_EPS) || nb < T::of(NORM_EPS) {
        return Err(Error::Measurement(
            "angular distance undefined for a zero-norm parameter vector".into(),
        ));
    }
    let c = (dot(a, b) / (na * nb)).max(-T::one()).min(T::one());
    Ok(c.acos())
}

/// L1 distance between the flattened parameter vectors.
pub fn d_manhattan<T: Scalar>(
    client: &ParameterVector<T>,
    global: &ParameterVector<T>,
) -> Result<T> {
    check_len("d_manhattan", global.len(), client.len())?;
    Ok(client
        .iter()
        .zip(global.iter())
        .map(|(&a, &b)| (a - b).abs())
        .sum())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-client test accuracy of `global` and its unweighted mean over clients
/// with a non-empty test slice.
pub fn evaluate_accuracy<T: Scalar>(
    global: &ParameterVector<T>,
    spec: &ModelSpec,
    shards: &[Shard<T>],
) -> Result<(T, BTreeMap<usize, T>)> {
    let mut per_client = BTreeMap::new();
    for shard in shards.iter().filter(|s| !s.test.is_empty()) {
        let out = forward(global, spec, &shard.test.as_batch()?)?;
        let correct = out
            .logits
            .iter_rows()
            .zip(shard.test.labels())
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        per_client.insert(
            shard.client_id,
            T::of_usize(correct) / T::of_usize(shard.test.len()),
        );
    }
    if per_client.is_empty() {
        return Err(Error::Measurement(
            "no client has a non-empty test slice".into(),
        ));
    }
    let mean = per_client.values().copied().sum::<T>() / T::of_usize(per_client.len());
    Ok((mean, per_client))
}

/// Accuracy of `global` over the union of all non-empty test slices.
pub fn pooled_accuracy<T: Scalar>(
    global: &ParameterVector<T>,
    spec: &ModelSpec,
    shards: &[Shard<T>],
) -> Result<T> {
    let (mut correct, mut total) = (0usize, 0usize);
    for shard in shards.iter().filter(|s| !s.test.is_empty()) {
        let out = forward(global, spec, &shard.test.as_batch()?)?;
        correct += out
            .logits
            .iter_rows()
            .zip(shard.test.labels())
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        total += shard.test.len();
    }
    if total == 0 {
        return Err(Error::Measurement(
            "no client has a non-empty test slice".into(),
        ));
    }
    Ok(T::of_usize(correct) / T::of_usize(total))
}

/// Unweighted means of `d_cosine` and `d_manhattan` between each local model
/// and the global one. Clients whose angular distance is undefined are left
/// out of the cosine mean; `None` if none remain.
pub fn fairness_summary<T: Scalar>(
    locals: &BTreeMap<usize, ParameterVector<T>>,
    global: &ParameterVector<T>,
) -> Result<(Option<T>, T)> {
    if locals.is_empty() {
        return Err(Error::Measurement(
            "fairness summary over zero clients".into(),
        ));
    }
    let mut cos_sum = T::zero();
    let mut cos_n = 0usize;
    let mut l1_sum = T::zero();
    for local in locals.values() {
        if let Ok(d) = d_cosine(local, global) {
            cos_sum = cos_sum + d;
            cos_n += 1;
        }
        l1_sum = l1_sum + d_manhattan(local, global)?;
    }
    let cos_mean = (cos_n > 0).then(|| cos_sum / T::of_usize(cos_n));
    Ok((cos_mean, l1_sum / T::of_usize(locals.len())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport<T> {
    pub round: usize,
    pub mean_accuracy: T,
    pub per_client_accuracy: BTreeMap<usize, T>,
    pub d_cosine_mean: Option<T>,
    pub d_manhattan_mean: T,
    pub contrastive_losses: BTreeMap<usize, Option<T>>,
    /// Aggregation weights, members only.
    pub weights: BTreeMap<usize, T>,
    pub learning_rate: T,
    pub online: BTreeSet<usize>,
    pub window_tau: Option<usize>,
}

impl<T: Scalar> RoundReport<T> {
    /// Mean of the defined contrastive losses, if any.
    pub fn mean_contrastive_loss(&self) -> Option<T> {
        let vals: Vec<T> = self
            .contrastive_losses
            .values()
            .flatten()
            .copied()
            .collect();
        (!vals.is_empty()).then(|| vals.iter().copied().sum::<T>() / T::of_usize(vals.len()))
    }
}
