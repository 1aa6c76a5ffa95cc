//! Deterministic MLP engine over flat parameter vectors.
//!
//! Parameters are laid out layer by layer: the weight matrix of a layer in
//! row-major `[out][in]` order, followed by its `out` biases. Hidden layers
//! apply the configured activation; the final layer is affine.
//!
//! Everything runs in `f64`. There are no stochastic layers and no batch
//! statistics, so two forward calls on identical inputs are bit-identical.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::counters::Counters;
use crate::error::{ensure_finite, GlueError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Logits,
    Scalar,
}

/// Network architecture: `layer_sizes = [d_in, hidden..., d_out]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub output: OutputKind,
}

impl ArchSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, output: OutputKind) -> Result<Self> {
        let arch = Self {
            layer_sizes,
            activation,
            output,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn mlp(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::new(layer_sizes.to_vec(), activation, OutputKind::Logits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(GlueError::Config(
                "architecture needs an input size and at least one layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(GlueError::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Exact parameter count: weights plus biases of every layer.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` per layer.
    fn layer_slices(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset;
                let biases = offset + fan_in * fan_out;
                offset = biases + fan_out;
                (weights, biases, fan_in, fan_out)
            })
            .collect()
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(GlueError::Shape(format!(
                "parameter vector has {} entries, architecture implies {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector for one network instantiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

/// Four independent accumulators so the reduction vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GlueError::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Supervised targets: class indices or real-valued regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A set of `(x, y)` pairs. Minibatches and whole datasets share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

pub type Dataset = Batch;

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.rows != targets.len() {
            return Err(GlueError::Shape(format!(
                "{} input rows but {} targets",
                inputs.rows,
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn classification(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::new(inputs, Targets::Classes(labels))
    }

    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(c) => Some(c),
            Targets::Values(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(m) => Targets::Values(m.select_rows(idx)),
        };
        Batch {
            inputs: self.inputs.select_rows(idx),
            targets,
        }
    }

    /// Concatenate datasets with identical input width.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let first = parts
            .first()
            .ok_or_else(|| GlueError::Data("nothing to concatenate".into()))?;
        let cols = first.dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != cols {
                return Err(GlueError::Shape("concatenating datasets of different width".into()));
            }
            data.extend_from_slice(&p.inputs.data);
            match &p.targets {
                Targets::Classes(c) => labels.extend_from_slice(c),
                Targets::Values(_) => return Err(GlueError::Data("concat supports classification sets only".into())),
            }
        }
        let rows = labels.len();
        Batch::classification(Matrix::new(rows, cols, data)?, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

impl LossKind {
    /// Natural loss for an architecture's output kind.
    pub fn for_arch(arch: &ArchSpec) -> LossKind {
        match arch.output {
            OutputKind::Logits => LossKind::CrossEntropy,
            OutputKind::Scalar => LossKind::SquaredError,
        }
    }
}

fn check_batch(arch: &ArchSpec, batch_inputs: &Matrix) -> Result<()> {
    if batch_inputs.cols != arch.input_dim() {
        return Err(GlueError::Shape(format!(
            "input width {} does not match architecture input {}",
            batch_inputs.cols,
            arch.input_dim()
        )));
    }
    if batch_inputs.rows == 0 {
        return Err(GlueError::Shape("empty batch".into()));
    }
    Ok(())
}

/// Pre-activations and activations of every layer, kept for backprop.
struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Matrix>,
}

fn forward_trace(arch: &ArchSpec, params: &[f64], inputs: &Matrix) -> Trace {
    let layers = arch.layer_slices();
    let n_layers = layers.len();
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(inputs.clone());
    for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
        let x = &acts[l];
        let w = &params[w_off..w_off + fan_in * fan_out];
        let b = &params[b_off..b_off + fan_out];
        let mut out = Matrix::zeros(x.rows, fan_out);
        let hidden = l + 1 < n_layers;
        for r in 0..x.rows {
            let xr = x.row(r);
            let orow = out.row_mut(r);
            for (o, slot) in orow.iter_mut().enumerate() {
                let z = b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], xr);
                *slot = if hidden {
                    match arch.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                    }
                } else {
                    z
                };
            }
        }
        acts.push(out);
    }
    Trace { acts }
}

/// Evaluate `f(x; params)` for every row of `inputs`. Adds one forward pass.
pub fn forward(arch: &ArchSpec, params: &ParamVector, inputs: &Matrix, counters: &mut Counters) -> Result<Matrix> {
    arch.check_params(params)?;
    check_batch(arch, inputs)?;
    ensure_finite(params.as_slice(), "params")?;
    counters.forwards += 1;
    let mut trace = forward_trace(arch, params.as_slice(), inputs);
    Ok(trace.acts.pop().unwrap())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_loss_inputs(predictions: &Matrix, targets: &Targets, kind: LossKind) -> Result<()> {
    if predictions.rows != targets.len() {
        return Err(GlueError::Shape(format!(
            "{} prediction rows but {} targets",
            predictions.rows,
            targets.len()
        )));
    }
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            if let Some(bad) = labels.iter().find(|&&y| y >= predictions.cols) {
                return Err(GlueError::Label(format!(
                    "label {bad} outside [0, {})",
                    predictions.cols
                )));
            }
            Ok(())
        }
        (LossKind::SquaredError, Targets::Values(values)) => {
            if values.cols != predictions.cols {
                return Err(GlueError::Shape(format!(
                    "target width {} does not match output width {}",
                    values.cols, predictions.cols
                )));
            }
            Ok(())
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => {
            Err(GlueError::Config("cross-entropy needs class labels".into()))
        }
        (LossKind::SquaredError, Targets::Classes(_)) => {
            Err(GlueError::Config("squared error needs real-valued targets".into()))
        }
    }
}

/// Mean per-sample loss `(1/b) Σ ℓ(f(x_j), y_j)`.
///
/// Squared error is `ℓ = Σ_c (f_c − y_c)²` per sample.
pub fn loss_eval(predictions: &Matrix, targets: &Targets, kind: LossKind) -> Result<f64> {
    check_loss_inputs(predictions, targets, kind)?;
    let b = predictions.rows as f64;
    let total: f64 = match targets {
        Targets::Classes(labels) => labels
            .iter()
            .enumerate()
            .map(|(j, &y)| {
                let row = predictions.row(j);
                log_sum_exp(row) - row[y]
            })
            .sum(),
        Targets::Values(values) => (0..predictions.rows)
            .map(|j| {
                predictions
                    .row(j)
                    .iter()
                    .zip(values.row(j))
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
            })
            .sum(),
    };
    let loss = total / b;
    if !loss.is_finite() {
        return Err(GlueError::Numeric("loss is not finite".into()));
    }
    Ok(loss)
}

/// Forward plus loss on a batch.
pub fn batch_loss(
    arch: &ArchSpec,
    params: &ParamVector,
    batch: &Batch,
    kind: LossKind,
    counters: &mut Counters,
) -> Result<f64> {
    let preds = forward(arch, params, &batch.inputs, counters)?;
    loss_eval(&preds, &batch.targets, kind)
}

/// Gradient of the mean loss with respect to the network output.
fn output_gradient(predictions: &Matrix, targets: &Targets) -> Matrix {
    let b = predictions.rows as f64;
    let mut grad = Matrix::zeros(predictions.rows, predictions.cols);
    match targets {
        Targets::Classes(labels) => {
            for (j, &y) in labels.iter().enumerate() {
                let row = predictions.row(j);
                let lse = log_sum_exp(row);
                let g = grad.row_mut(j);
                for c in 0..row.len() {
                    g[c] = (row[c] - lse).exp() / b;
                }
                g[y] -= 1.0 / b;
            }
        }
        Targets::Values(values) => {
            for j in 0..predictions.rows {
                let g = grad.row_mut(j);
                for (c, (p, t)) in predictions.row(j).iter().zip(values.row(j)).enumerate() {
                    g[c] = 2.0 * (p - t) / b;
                }
            }
        }
    }
    grad
}

/// Exact reverse-mode gradient of `loss_eval ∘ forward` with respect to the
/// parameters, together with the loss value. Adds one forward and one
/// backward pass.
pub fn loss_and_grad(
    arch: &ArchSpec,
    params: &ParamVector,
    batch: &Batch,
    kind: LossKind,
    counters: &mut Counters,
) -> Result<(f64, ParamVector)> {
    arch.check_params(params)?;
    check_batch(arch, &batch.inputs)?;
    ensure_finite(params.as_slice(), "params")?;
    counters.forwards += 1;
    let p = params.as_slice();
    let trace = forward_trace(arch, p, &batch.inputs);
    let preds = trace.acts.last().unwrap();
    let loss = loss_eval(preds, &batch.targets, kind)?;
    counters.backwards += 1;

    let layers = arch.layer_slices();
    let mut grad = vec![0.0; p.len()];
    let mut delta = output_gradient(preds, &batch.targets);
    for l in (0..layers.len()).rev() {
        let (w_off, b_off, fan_in, fan_out) = layers[l];
        let x = &trace.acts[l];
        {
            let (gw, gb) = grad[w_off..b_off + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..x.rows {
                let d = delta.row(r);
                let xr = x.row(r);
                for o in 0..fan_out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for (gwi, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                        *gwi += dv * xi;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // Propagate to the previous layer's activations, then through its
        // nonlinearity.
        let w = &p[w_off..w_off + fan_in * fan_out];
        let mut prev = Matrix::zeros(x.rows, fan_in);
        for r in 0..x.rows {
            let d = delta.row(r);
            let pr = prev.row_mut(r);
            for o in 0..fan_out {
                let dv = d[o];
                if dv == 0.0 {
                    continue;
                }
                for (pi, wi) in pr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *pi += dv * wi;
                }
            }
            let ar = x.row(r);
            for (pi, a) in pr.iter_mut().zip(ar) {
                *pi *= match arch.activation {
                    Activation::Relu => {
                        if *a > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => 1.0 - a * a,
                };
            }
        }
        delta = prev;
    }
    Ok((loss, ParamVector::new(grad)))
}

/// `∇θ L` only; see [`loss_and_grad`].
pub fn grad_params(
    arch: &ArchSpec,
    params: &ParamVector,
    batch: &Batch,
    kind: LossKind,
    counters: &mut Counters,
) -> Result<ParamVector> {
    loss_and_grad(arch, params, batch, kind, counters).map(|(_, g)| g)
}

/// Random initialization: He-normal weights for ReLU, Xavier-normal for
/// tanh, zero biases.
pub fn init_params(arch: &ArchSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    for (w_off, _, fan_in, fan_out) in arch.layer_slices() {
        let var = match arch.activation {
            Activation::Relu => 2.0 / fan_in as f64,
            Activation::Tanh => 2.0 / (fan_in + fan_out) as f64,
        };
        let normal = Normal::new(0.0, var.sqrt()).unwrap();
        for v in &mut values[w_off..w_off + fan_in * fan_out] {
            *v = normal.sample(&mut rng);
        }
    }
    ParamVector::new(values)
}

/// Fixed-seed shuffled epochs over `n` items, yielding minibatch index sets.
#[derive(Debug, Clone)]
pub struct MinibatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl MinibatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(GlueError::Config("empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(GlueError::Config("batch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            cursor: 0,
            batch_size,
            epoch: 0,
            rng,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Next minibatch; the final batch of an epoch may be short.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor >= self.order.len() {
            self.epoch += 1;
        }
        idx
    }
}

/// Minibatch training configuration shared by expert training and
/// fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            adam: AdamConfig::expert_default(),
        }
    }
}

/// Full-parameter Adam training. `on_epoch(epoch, params, counters)` is
/// called after every epoch (1-based). Returns the trained parameters.
pub fn fit(
    arch: &ArchSpec,
    init: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    counters: &mut Counters,
    mut on_epoch: impl FnMut(usize, &ParamVector, &Counters) -> Result<()>,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(GlueError::Config("training set is empty".into()));
    }
    cfg.adam.validate()?;
    arch.check_params(init)?;
    let kind = LossKind::for_arch(arch);
    let mut params = init.clone();
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let mut stream = MinibatchStream::new(data.len(), cfg.batch_size, seed)?;
    let mut adam = Adam::new(cfg.adam, params.len());
    for epoch in 1..=cfg.epochs {
        for _ in 0..stream.batches_per_epoch() {
            let batch = data.select(&stream.next_indices());
            let grad = grad_params(arch, &params, &batch, kind, counters)?;
            adam.step(params.as_mut_slice(), grad.as_slice());
        }
        ensure_finite(params.as_slice(), "params")?;
        on_epoch(epoch, &params, counters)?;
    }
    Ok(params)
}

/// Train one expert from `init` on its private split.
pub fn train_expert(
    arch: &ArchSpec,
    init: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParamVector> {
    let mut counters = Counters::new();
    fit(arch, init, data, cfg, seed, &mut counters, |_, _, _| Ok(()))
}
