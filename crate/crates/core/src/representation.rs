//! Server-side embedding machinery: client and global embeddings, cosine
//! similarity, the InfoNCE diagnostic, alignment vectors and embedding-level
//! distillation.

use serde::{Deserialize, Serialize};

use crate::datasets::Shard;
use crate::error::{check_len, Error, Result};
use crate::nnmodel::{forward, ModelSpec, ParameterVector};
use crate::scalar::{dot, norm, Scalar};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding<T> {
    values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(vec![T::zero(); d])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        norm(&self.values)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::new(self.values.iter().map(|&v| v * s).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Output of [`client_embedding`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEmbedding<T> {
    pub embedding: Embedding<T>,
    /// Samples whose feature vector had (near) zero norm.
    pub skipped: usize,
    /// Every sample was skipped; `embedding` is the zero vector.
    pub degenerate: bool,
}

/// Mean of the unit-normalized feature vectors of the client's training
/// samples.
pub fn client_embedding<T: Scalar>(
    model: &ParameterVector<T>,
    spec: &ModelSpec,
    shard: &Shard<T>,
) -> Result<ClientEmbedding<T>> {
    if shard.train.is_empty() {
        return Err(Error::EmptyShard(shard.client_id));
    }
    let out = forward(model, spec, &shard.train.as_batch()?)?;
    let d = spec.embedding_dim();
    let mut acc = vec![T::zero(); d];
    let mut skipped = 0;
    let eps = T::of(NORM_EPS);
    for row in out.embeddings.iter_rows() {
        let n = norm(row);
        if n < eps {
            skipped += 1;
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v / n;
        }
    }
    let total = shard.train.len();
    let degenerate = skipped == total;
    if degenerate {
        log::warn!("client {}: every embedding is degenerate", shard.client_id);
    } else {
        // Skipped samples still count in n_i.
        let n = T::of_usize(total);
        acc.iter_mut().for_each(|a| *a = *a / n);
    }
    Ok(ClientEmbedding {
        embedding: Embedding::new(acc),
        skipped,
        degenerate,
    })
}

pub fn global_embedding<T: Scalar>(embeddings: &[Embedding<T>]) -> Result<Embedding<T>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Protocol("global embedding over zero clients".into()))?;
    let d = first.dim();
    let mut acc = vec![T::zero(); d];
    for e in embeddings {
        check_len("embedding", d, e.dim())?;
        for (a, &v) in acc.iter_mut().zip(e.as_slice()) {
            *a = *a + v;
        }
    }
    let n = T::of_usize(embeddings.len());
    Ok(Embedding::new(acc.into_iter().map(|a| a / n).collect()))
}

/// Cosine similarity clamped to `[-1, 1]`; 0 when either vector is (near)
/// zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let (na, nb) = (norm(a), norm(b));
    let eps = T::of(NORM_EPS);
    if na < eps || nb < eps {
        return T::zero();
    }
    (dot(a, b) / (na * nb)).max(-T::one()).min(T::one())
}

pub fn cos<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> T {
    cosine(a.as_slice(), b.as_slice())
}

/// InfoNCE loss of client `i` with the global embedding as the positive and
/// the other clients as negatives. `None` when there are no negatives.
pub fn contrastive_loss<T: Scalar>(
    i: usize,
    embeddings: &[Embedding<T>],
    z_g: &Embedding<T>,
    tau_c: T,
) -> Option<T> {
    if embeddings.len() < 2 || i >= embeddings.len() || !(tau_c > T::zero()) {
        return None;
    }
    let z_i = &embeddings[i];
    let positive = cos(z_i, z_g) / tau_c;
    let negatives: Vec<T> = embeddings
        .iter()
        .enumerate()
        .filter(|&(l, _)| l != i)
        .map(|(_, z_l)| cos(z_i, z_l) / tau_c)
        .collect();
    let max = negatives.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + negatives.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    Some(lse - positive)
}

/// `A_i * z_g` with `A_i = cos(z_i, z_g)`.
pub fn alignment_vector<T: Scalar>(z_i: &Embedding<T>, z_g: &Embedding<T>) -> Embedding<T> {
    z_g.scaled(cos(z_i, z_g))
}

/// `z_i + beta * (z_align - z_i)`.
pub fn distill<T: Scalar>(
    z_i: &Embedding<T>,
    z_align: &Embedding<T>,
    beta: T,
) -> Result<Embedding<T>> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::Config(format!("beta must lie in [0,1], got {beta}")));
    }
    check_len("distillation target", z_i.dim(), z_align.dim())?;
    Ok(Embedding::new(
        z_i.as_slice()
            .iter()
            .zip(z_align.as_slice())
            .map(|(&a, &t)| a + beta * (t - a))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord<T> {
    pub client_id: usize,
    pub raw: Embedding<T>,
    pub alignment_score: T,
    pub refined: Embedding<T>,
    /// `cos(refined, z_g)`.
    pub similarity: T,
    pub contrastive_loss: Option<T>,
}

/// Runs the alignment block for one round: global embedding, per-client
/// contrastive diagnostic, alignment vector, distillation and the refined
/// similarity. `clients` must be in ascending id order.
pub fn align_round<T: Scalar>(
    clients: &[(usize, Embedding<T>)],
    beta: T,
    tau_c: T,
) -> Result<(Embedding<T>, Vec<AlignmentRecord<T>>)> {
    let embeddings: Vec<Embedding<T>> = clients.iter().map(|(_, e)| e.clone()).collect();
    let z_g = global_embedding(&embeddings)?;
    let mut records = Vec::with_capacity(clients.len());
    for (pos, (id, z_i)) in clients.iter().enumerate() {
        let score = cos(z_i, &z_g);
        if score < T::zero() {
            log::warn!("client {id}: negative alignment score {score}; alignment target points away from z_g");
        }
        let refined = distill(z_i, &z_g.scaled(score), beta)?;
        records.push(AlignmentRecord {
            client_id: *id,
            raw: z_i.clone(),
            alignment_score: score,
            similarity: cos(&refined, &z_g),
            refined,
            contrastive_loss: contrastive_loss(pos, &embeddings, &z_g, tau_c),
        });
    }
    Ok((z_g, records))
}
