//! Feed-forward classifier: ReLU feature extractor followed by a linear
//! predictor head, with hand-written backpropagation.
//!
//! Parameters live in one flat [`ParameterVector`]. The layout is layer-major:
//! for each layer, the `fan_out x fan_in` weight matrix in row-major order,
//! then the `fan_out` biases.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Shard;
use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Widths of the hidden layers; the last one is the embedding dimension.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Position of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSlot {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 784-200-200-10, the FMNIST-shaped default.
    pub fn fmnist() -> Self {
        Self::new(784, vec![200, 200], 10).unwrap()
    }

    /// 32-64-64-C, the synthetic-benchmark default.
    pub fn synthetic(num_classes: usize) -> Self {
        Self::new(32, vec![64, 64], num_classes).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "model.hidden_dims must contain at least one layer".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "model.hidden_dims entries must be positive".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self
            .hidden_dims
            .last()
            .expect("validated spec has a hidden layer")
    }

    /// `(fan_in, fan_out)` for every layer, output head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_dims {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn layer_slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    offset,
                };
                offset += slot.len();
                slot
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("matrix row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector<T> {
    values: Vec<T>,
}

/// One layer unpacked from a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_out x fan_in`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    /// Per-layer uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(spec.num_params());
        for slot in spec.layer_slots() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for _ in 0..slot.len() {
                values.push(T::of(rng.random_range(-bound..=bound)));
            }
        }
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        check_len("parameter vector", spec.num_params(), self.len())
    }

    pub fn unflatten(&self, spec: &ModelSpec) -> Result<Vec<Layer<T>>> {
        self.check_spec(spec)?;
        Ok(spec
            .layer_slots()
            .into_iter()
            .map(|slot| Layer {
                fan_in: slot.fan_in,
                fan_out: slot.fan_out,
                weights: self.values[slot.weight_range()].to_vec(),
                bias: self.values[slot.bias_range()].to_vec(),
            })
            .collect())
    }

    pub fn flatten(layers: &[Layer<T>]) -> Self {
        let mut values = Vec::new();
        for layer in layers {
            values.extend_from_slice(&layer.weights);
            values.extend_from_slice(&layer.bias);
        }
        Self { values }
    }

    /// `self - scale * other`, elementwise.
    pub fn sub_scaled(&self, other: &Self, scale: T) -> Result<Self> {
        check_len("parameter vector", self.len(), other.len())?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a - scale * b)
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ParameterVector<U> {
        ParameterVector {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T> From<Vec<T>> for ParameterVector<T> {
    fn from(values: Vec<T>) -> Self {
        Self { values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config(
                "batch must contain at least one sample".into(),
            ));
        }
        check_len("batch labels", inputs.rows(), labels.len())?;
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        check_len("batch input width", spec.input_dim, self.inputs.cols())?;
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= spec.num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                spec.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `batch x d`, post-activation output of the last hidden layer.
    pub embeddings: Matrix<T>,
    /// `batch x num_classes`.
    pub logits: Matrix<T>,
}

/// `input * W^T + b`.
fn affine<T: Scalar>(input: &Matrix<T>, params: &[T], slot: &LayerSlot) -> Matrix<T> {
    let w = &params[slot.weight_range()];
    let b = &params[slot.bias_range()];
    let mut out = Matrix::zeros(input.rows(), slot.fan_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let o = out.row_mut(r);
        for (j, oj) in o.iter_mut().enumerate() {
            let wj = &w[j * slot.fan_in..(j + 1) * slot.fan_in];
            let mut acc = b[j];
            for (&xi, &wi) in x.iter().zip(wj) {
                acc = acc + xi * wi;
            }
            *oj = acc;
        }
    }
    out
}

fn relu_in_place<T: Scalar>(m: &mut Matrix<T>) {
    for v in m.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Input followed by every hidden activation, plus logits.
fn forward_trace<T: Scalar>(
    model: &ParameterVector<T>,
    spec: &ModelSpec,
    batch: &Batch<T>,
) -> Result<(Vec<Matrix<T>>, Matrix<T>)> {
    model.check_spec(spec)?;
    batch.check(spec)?;
    let slots = spec.layer_slots();
    let (head, hidden) = slots.split_last().expect("at least one layer");
    let mut acts = Vec::with_capacity(slots.len());
    acts.push(batch.inputs.clone());
    for slot in hidden {
        let mut h = affine(acts.last().unwrap(), model.as_slice(), slot);
        match spec.activation {
            Activation::Relu => relu_in_place(&mut h),
        }
        acts.push(h);
    }
    let logits = affine(acts.last().unwrap(), model.as_slice(), head);
    Ok((acts, logits))
}

pub fn forward<T: Scalar>(
    model: &ParameterVector<T>,
    spec: &ModelSpec,
    batch: &Batch<T>,
) -> Result<ForwardOutput<T>> {
    let (mut acts, logits) = forward_trace(model, spec, batch)?;
    Ok(ForwardOutput {
        embeddings: acts.pop().expect("hidden activation"),
        logits,
    })
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    out
}

/// Mean softmax cross-entropy.
pub fn loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<T> {
    check_len("loss labels", logits.rows(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Config("loss of an empty batch".into()));
    }
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::Config(format!("label {y} out of range")));
        }
        total = total + (log_sum_exp(row) - row[y]);
    }
    Ok(total / T::of_usize(labels.len()))
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub fn backward<T: Scalar>(
    model: &ParameterVector<T>,
    spec: &ModelSpec,
    batch: &Batch<T>,
) -> Result<ParameterVector<T>> {
    let (acts, logits) = forward_trace(model, spec, batch)?;
    let params = model.as_slice();
    let slots = spec.layer_slots();
    let n = T::of_usize(batch.len());

    let mut delta = softmax(&logits);
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = delta.row_mut(r);
        row[y] = row[y] - T::one();
        for v in row.iter_mut() {
            *v = *v / n;
        }
    }

    let mut grad = vec![T::zero(); params.len()];
    for (li, slot) in slots.iter().enumerate().rev() {
        let input = &acts[li];
        {
            let (gw, gb) = grad[slot.offset..slot.offset + slot.len()]
                .split_at_mut(slot.fan_in * slot.fan_out);
            for r in 0..delta.rows() {
                let d = delta.row(r);
                let x = input.row(r);
                for (j, &dj) in d.iter().enumerate() {
                    if dj == T::zero() {
                        continue;
                    }
                    gb[j] = gb[j] + dj;
                    let gwj = &mut gw[j * slot.fan_in..(j + 1) * slot.fan_in];
                    for (g, &xi) in gwj.iter_mut().zip(x) {
                        *g = *g + dj * xi;
                    }
                }
            }
        }
        if li == 0 {
            break;
        }
        // Propagate to the previous (post-ReLU) activation, then through ReLU.
        let w = &params[slot.weight_range()];
        let mut prev = Matrix::zeros(delta.rows(), slot.fan_in);
        for r in 0..delta.rows() {
            let d = delta.row(r);
            let p = prev.row_mut(r);
            for (j, &dj) in d.iter().enumerate() {
                if dj == T::zero() {
                    continue;
                }
                let wj = &w[j * slot.fan_in..(j + 1) * slot.fan_in];
                for (pi, &wi) in p.iter_mut().zip(wj) {
                    *pi = *pi + dj * wi;
                }
            }
            for (pi, &a) in p.iter_mut().zip(input.row(r)) {
                if a <= T::zero() {
                    *pi = T::zero();
                }
            }
        }
        delta = prev;
    }
    Ok(ParameterVector::new(grad))
}

pub fn sgd_step<T: Scalar>(
    model: &ParameterVector<T>,
    grad: &ParameterVector<T>,
    lr: T,
) -> Result<ParameterVector<T>> {
    if !(lr > T::zero()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    model.sub_scaled(grad, lr)
}

/// Runs `epochs` passes of mini-batch SGD over a shuffled copy of the
/// client's training slice. The trailing partial batch is kept.
#[allow(clippy::too_many_arguments)]
pub fn local_train<T: Scalar, R: Rng + ?Sized>(
    model: &ParameterVector<T>,
    spec: &ModelSpec,
    shard: &Shard<T>,
    epochs: usize,
    batch_size: usize,
    lr: T,
    rng: &mut R,
) -> Result<ParameterVector<T>> {
    if shard.train.is_empty() {
        return Err(Error::EmptyShard(shard.client_id));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    model.check_spec(spec)?;
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..shard.train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = shard.train.batch(chunk)?;
            let grad = backward(&current, spec, &batch)?;
            current = sgd_step(&current, &grad, lr)?;
        }
    }
    Ok(current)
}
