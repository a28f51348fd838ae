//! Labeled datasets, the IDX loader, and Dirichlet non-IID partitioning.

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nnmodel::{Batch, Matrix};
use crate::rng::{substream, Purpose};
use crate::scalar::Scalar;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

const PARTITION_RETRIES: usize = 100;
const SYNTHETIC_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Vec<T>,
    input_dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Vec<T>,
        input_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Config(
                "dataset needs positive input_dim and num_classes".into(),
            ));
        }
        check_len("dataset inputs", labels.len() * input_dim, inputs.len())?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            input_dim,
            labels,
            num_classes,
        })
    }

    pub fn empty(input_dim: usize, num_classes: usize) -> Self {
        Self {
            inputs: Vec::new(),
            input_dim,
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[T] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            inputs,
            input_dim: self.input_dim,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let sub = self.subset(indices);
        Batch::new(
            Matrix::from_vec(sub.len(), self.input_dim, sub.inputs)?,
            sub.labels,
        )
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Result<Batch<T>> {
        Batch::new(
            Matrix::from_vec(self.len(), self.input_dim, self.inputs.clone())?,
            self.labels.clone(),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard<T> {
    pub client_id: usize,
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    /// Source-dataset rows backing `train`, when built by [`split_test`].
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Set when the test slice came out empty.
    pub test_empty: bool,
}

impl<T: Scalar> Shard<T> {
    pub fn new(client_id: usize, train: Dataset<T>, test: Dataset<T>) -> Self {
        let test_empty = test.is_empty();
        Self {
            client_id,
            train,
            test,
            train_indices: Vec::new(),
            test_indices: Vec::new(),
            test_empty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
    /// Client index of every source sample.
    pub assignment: Vec<usize>,
}

impl PartitionPlan {
    /// Sample indices owned by `client`, ascending.
    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == client).then_some(i))
            .collect()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clients];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// Sample `i` goes to client `i % m`. Gives equal shard sizes when `m`
    /// divides `n`.
    pub fn round_robin(n: usize, m: usize, seed: u64) -> Self {
        Self {
            alpha: f64::INFINITY,
            num_clients: m,
            seed,
            assignment: (0..n).map(|i| i % m).collect(),
        }
    }
}

/// Gaussian class blobs (sigma 0.3) clipped to `[0, 1]`. Each coordinate of a
/// class mean is 0.2 or 0.8 with equal odds; sample `i` belongs to class
/// `i % num_classes`.
pub fn gen_synthetic<T: Scalar>(
    num_classes: usize,
    input_dim: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if num_classes == 0 || input_dim == 0 || n == 0 {
        return Err(Error::Config(
            "synthetic dataset needs positive classes, dimension and size".into(),
        ));
    }
    let mut rng = substream(seed, Purpose::Dataset, 0, 0);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| if rng.random::<bool>() { 0.8 } else { 0.2 })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, SYNTHETIC_SIGMA).expect("valid sigma");
    let mut inputs = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for &mu in &means[c] {
            let x: f64 = mu + noise.sample(&mut rng);
            inputs.push(T::of(x.clamp(0.0, 1.0)));
        }
        labels.push(c);
    }
    Dataset::new(inputs, input_dim, labels, num_classes)
}

fn read_u32(bytes: &[u8], at: usize) -> io::Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "IDX header truncated"))
}

fn idx_body(bytes: &[u8], header: usize, len: usize) -> io::Result<&[u8]> {
    bytes
        .get(header..header + len)
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "IDX payload truncated"))
}

/// Parses an IDX3 image file: `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX3 magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = idx_body(bytes, 16, count * rows * cols)?;
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX1 magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4)? as usize;
    Ok(idx_body(bytes, 8, count)?)
}

/// Builds a dataset from in-memory IDX3 images and IDX1 labels. Pixels are
/// scaled by 1/255.
pub fn dataset_from_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "image count {count} does not match label count {}",
            labels.len()
        )));
    }
    if count == 0 || rows * cols == 0 {
        return Err(Error::Format("IDX file holds no samples".into()));
    }
    let scale = T::of(255.0);
    let inputs = pixels
        .iter()
        .map(|&p| T::of(f64::from(p)) / scale)
        .collect();
    let labels: Vec<usize> = labels.iter().map(|&y| usize::from(y)).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(inputs, rows * cols, labels, num_classes)
}

pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    dataset_from_idx(&images, &labels)
}

/// Splits `total` into integer counts proportional to `weights`, handing the
/// leftover units to the largest fractional parts (ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, m: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Per-class Dirichlet allocation of samples to `m` clients. Plans that leave
/// a client empty are redrawn up to 100 times.
pub fn dirichlet_partition<T: Scalar>(
    dataset: &Dataset<T>,
    m: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if m == 0 {
        return Err(Error::Config("number of clients must be at least 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "dirichlet_alpha must be positive, got {alpha}"
        )));
    }
    if m == 1 {
        return Ok(PartitionPlan {
            alpha,
            num_clients: 1,
            seed,
            assignment: vec![0; dataset.len()],
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = substream(seed, Purpose::Partition, 0, 0);
    for _ in 0..PARTITION_RETRIES {
        let mut assignment = vec![0; dataset.len()];
        let mut sizes = vec![0usize; m];
        for members in by_class.iter().filter(|c| !c.is_empty()) {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = sample_dirichlet(alpha, m, &mut rng);
            let counts = largest_remainder(&props, members.len());
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                for &i in &members[cursor..cursor + count] {
                    assignment[i] = client;
                }
                sizes[client] += count;
                cursor += count;
            }
        }
        if sizes.iter().all(|&s| s > 0) {
            return Ok(PartitionPlan {
                alpha,
                num_clients: m,
                seed,
                assignment,
            });
        }
    }
    Err(Error::Partition(format!(
        "could not give every one of {m} clients a sample after {PARTITION_RETRIES} draws (alpha = {alpha})"
    )))
}

/// Shannon entropy (nats) of each client's label distribution under `plan`.
pub fn client_label_entropies<T: Scalar>(dataset: &Dataset<T>, plan: &PartitionPlan) -> Vec<f64> {
    let mut counts = vec![vec![0usize; dataset.num_classes()]; plan.num_clients];
    for (i, &c) in plan.assignment.iter().enumerate() {
        counts[c][dataset.labels()[i]] += 1;
    }
    counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            if n == 0 {
                return 0.0;
            }
            row.iter()
                .filter(|&&k| k > 0)
                .map(|&k| {
                    let p = k as f64 / n as f64;
                    -p * p.ln()
                })
                .sum()
        })
        .collect()
}

/// Stratified per-client train/test split. Every class with at least two
/// samples contributes at least one test sample and keeps at least one for
/// training.
pub fn split_test<T: Scalar>(
    dataset: &Dataset<T>,
    plan: &PartitionPlan,
    test_fraction: f64,
) -> Result<Vec<Shard<T>>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    check_len("partition assignment", dataset.len(), plan.assignment.len())?;
    let mut owned: Vec<Vec<Vec<usize>>> =
        vec![vec![Vec::new(); dataset.num_classes()]; plan.num_clients];
    for (i, &c) in plan.assignment.iter().enumerate() {
        owned[c][dataset.labels()[i]].push(i);
    }
    let mut shards = Vec::with_capacity(plan.num_clients);
    for (client, classes) in owned.into_iter().enumerate() {
        let mut rng = substream(plan.seed, Purpose::TestSplit, 0, client as u64);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for mut members in classes {
            let n = members.len();
            let n_test = if n >= 2 {
                ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
            } else {
                0
            };
            members.shuffle(&mut rng);
            test_idx.extend_from_slice(&members[..n_test]);
            train_idx.extend_from_slice(&members[n_test..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let mut shard = Shard::new(
            client,
            dataset.subset(&train_idx),
            dataset.subset(&test_idx),
        );
        if shard.test_empty {
            log::warn!("client {client} has an empty test slice");
        }
        shard.train_indices = train_idx;
        shard.test_indices = test_idx;
        shards.push(shard);
    }
    Ok(shards)
}
