//! Feed-forward ReLU networks with hand-written backpropagation.
//!
//! Batches are stored feature-major: an input batch is a `d × M` matrix
//! whose column `i` is sample `i`. Layer `ℓ` holds a weight matrix
//! `θ⁽ℓ⁾ ∈ R^{out×in}` and a bias; only the weights enter spectral norms.
//!
//! Per-sample weight gradients of a dense layer are outer products
//! `δᵢ aᵢᵀ`, so [`PerSampleGradBatch`] keeps them factored unless additive
//! gradient noise forces a dense representation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{gaussian_matrix, LinalgError, Matrix, Rng};

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("layer {layer}: output width {out} does not match next input width {next_in}")]
    DimsDoNotChain {
        layer: usize,
        out: usize,
        next_in: usize,
    },
    #[error("network needs at least one layer with nonzero widths")]
    EmptySpec,
    #[error("input has {got} features, network expects {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("{inputs} input columns but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter shapes do not match the network spec at layer {layer}")]
    ParameterShape { layer: usize },
    #[error("non-finite parameter after update in layer {layer}")]
    NonFiniteUpdate { layer: usize },
    #[error("invalid supervision noise: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Input/output widths of one linear unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub input: usize,
    pub output: usize,
}

/// Layer widths of a ReLU network; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layers: Vec<LayerDims>,
}

impl MlpSpec {
    pub fn new(dims: Vec<(usize, usize)>) -> Result<Self, MlpError> {
        if dims.is_empty() || dims.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(MlpError::EmptySpec);
        }
        for (layer, pair) in dims.windows(2).enumerate() {
            if pair[0].1 != pair[1].0 {
                return Err(MlpError::DimsDoNotChain {
                    layer,
                    out: pair[0].1,
                    next_in: pair[1].0,
                });
            }
        }
        Ok(Self {
            layers: dims
                .into_iter()
                .map(|(input, output)| LayerDims { input, output })
                .collect(),
        })
    }

    /// `[784, 512, 256, 10]` becomes three layers 784→512→256→10.
    pub fn from_widths(widths: &[usize]) -> Result<Self, MlpError> {
        if widths.len() < 2 {
            return Err(MlpError::EmptySpec);
        }
        Self::new(widths.windows(2).map(|w| (w[0], w[1])).collect())
    }

    /// The 784→512→256→10 MNIST classifier with three parameterized layers.
    pub fn mnist_default() -> Self {
        Self::from_widths(&[784, 512, 256, 10]).expect("static widths chain")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerDims] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.output));
        w
    }
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self::mnist_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Softmax followed by negative log-likelihood.
    #[default]
    CrossEntropy,
    /// `½‖z − onehot(y)‖²`.
    MeanSquared,
}

/// Parameters of a network plus the SGD step counter and learning rate.
#[derive(Clone, Debug)]
pub struct MlpState {
    spec: MlpSpec,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
}

impl MlpState {
    /// Kaiming-normal weights `N(0, 2/fan_in)` and zero biases.
    pub fn kaiming(spec: &MlpSpec, rng: &mut Rng, lr: f64) -> Self {
        let weights = spec
            .layers()
            .iter()
            .map(|d| gaussian_matrix(rng, d.output, d.input, (2.0 / d.input as f64).sqrt()))
            .collect();
        let biases = spec.layers().iter().map(|d| vec![0.0; d.output]).collect();
        Self {
            spec: spec.clone(),
            weights,
            biases,
            step: 0,
            lr,
        }
    }

    pub fn from_parts(
        spec: &MlpSpec,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        lr: f64,
    ) -> Result<Self, MlpError> {
        if weights.len() != spec.num_layers() || biases.len() != spec.num_layers() {
            return Err(MlpError::ParameterShape {
                layer: weights.len().min(biases.len()),
            });
        }
        for (layer, (d, (w, b))) in spec
            .layers()
            .iter()
            .zip(weights.iter().zip(&biases))
            .enumerate()
        {
            if w.shape() != (d.output, d.input) || b.len() != d.output {
                return Err(MlpError::ParameterShape { layer });
            }
        }
        Ok(Self {
            spec: spec.clone(),
            weights,
            biases,
            step: 0,
            lr,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass over a `d × M` batch; returns `c × M` logits.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache), MlpError> {
        if inputs.rows() != self.spec.input_dim() {
            return Err(MlpError::InputWidth {
                got: inputs.rows(),
                expected: self.spec.input_dim(),
            });
        }
        let last = self.num_layers() - 1;
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        let mut current = inputs.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matmul(&current)?;
            for j in 0..z.cols() {
                for (zi, bi) in z.col_mut(j).iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            let next = if l == last {
                z.clone()
            } else {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0));
                a
            };
            layer_inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(z);
        }
        Ok((
            current,
            ForwardCache {
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// Applies `θ ← θ − η·g` to every weight and bias.
    ///
    /// The state is left untouched if any updated entry would be non-finite.
    pub fn sgd_step(&mut self, grads: &Gradients) -> Result<(), MlpError> {
        if grads.weights.len() != self.num_layers() || grads.biases.len() != self.num_layers() {
            return Err(MlpError::ParameterShape { layer: 0 });
        }
        let lr = self.lr;
        let mut new_weights = Vec::with_capacity(self.num_layers());
        let mut new_biases = Vec::with_capacity(self.num_layers());
        for layer in 0..self.num_layers() {
            let (w, gw) = (&self.weights[layer], &grads.weights[layer]);
            let (b, gb) = (&self.biases[layer], &grads.biases[layer]);
            if w.shape() != gw.shape() || b.len() != gb.len() {
                return Err(MlpError::ParameterShape { layer });
            }
            let mut nw = w.clone();
            nw.axpy(-lr, gw)?;
            let nb: Vec<f64> = b.iter().zip(gb).map(|(x, g)| x - lr * g).collect();
            if !nw.is_finite() || nb.iter().any(|x| !x.is_finite()) {
                return Err(MlpError::NonFiniteUpdate { layer });
            }
            new_weights.push(nw);
            new_biases.push(nb);
        }
        self.weights = new_weights;
        self.biases = new_biases;
        self.step += 1;
        Ok(())
    }
}

/// Per-layer activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to layer `ℓ` (`in_ℓ × M`); entry 0 is the batch itself.
    pub layer_inputs: Vec<Matrix>,
    /// `θ⁽ℓ⁾ a + b` before the activation (`out_ℓ × M`).
    pub pre_activations: Vec<Matrix>,
}

/// Mean gradients for every parameter of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(state: &MlpState) -> Self {
        Self {
            weights: state
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: state.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) -> Result<(), MlpError> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(alpha, b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
        Ok(())
    }
}

/// Storage of the per-sample weight gradients of one layer.
#[derive(Clone, Debug)]
pub enum GradRows {
    /// Row `i` is `vec(scale · δᵢ aᵢᵀ)`: `deltas` is `m × M`, `inputs` is
    /// `n × M`.
    Outer {
        deltas: Matrix,
        inputs: Matrix,
        scale: f64,
    },
    /// Column `i` of the `mn × M` matrix is row `i`.
    Dense(Matrix),
}

/// Per-sample vectorized weight gradients `vec(∇⁽ℓ⁾ ℓ(θ; xᵢ, yᵢ))` of one
/// layer over one mini-batch.
#[derive(Clone, Debug)]
pub struct PerSampleGradBatch {
    pub layer: usize,
    rows: usize,
    cols: usize,
    grads: GradRows,
}

impl PerSampleGradBatch {
    /// Factored batch: sample `i` has gradient `scale · deltas[:, i] inputs[:, i]ᵀ`.
    pub fn outer(
        layer: usize,
        deltas: Matrix,
        inputs: Matrix,
        scale: f64,
    ) -> Result<Self, MlpError> {
        if deltas.cols() != inputs.cols() {
            return Err(MlpError::LabelCount {
                inputs: inputs.cols(),
                labels: deltas.cols(),
            });
        }
        Ok(Self {
            layer,
            rows: deltas.rows(),
            cols: inputs.rows(),
            grads: GradRows::Outer {
                deltas,
                inputs,
                scale,
            },
        })
    }

    /// Dense batch for an `m × n` layer; `columns` is `mn × M`.
    pub fn dense(layer: usize, m: usize, n: usize, columns: Matrix) -> Result<Self, MlpError> {
        if columns.rows() != m * n {
            return Err(MlpError::ParameterShape { layer });
        }
        Ok(Self {
            layer,
            rows: m,
            cols: n,
            grads: GradRows::Dense(columns),
        })
    }

    /// `(m, n)` of the layer's weight matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn batch_size(&self) -> usize {
        match &self.grads {
            GradRows::Outer { deltas, .. } => deltas.cols(),
            GradRows::Dense(c) => c.cols(),
        }
    }

    pub fn grads(&self) -> &GradRows {
        &self.grads
    }

    /// Gradient of sample `i` as an `m × n` matrix.
    pub fn sample(&self, i: usize) -> Matrix {
        match &self.grads {
            GradRows::Outer {
                deltas,
                inputs,
                scale,
            } => {
                let (d, x) = (deltas.col(i), inputs.col(i));
                Matrix::from_fn(self.rows, self.cols, |r, c| scale * d[r] * x[c])
            }
            GradRows::Dense(cols) => {
                Matrix::from_col_major(self.rows, self.cols, cols.col(i).to_vec())
                    .expect("stored gradients are finite")
            }
        }
    }

    /// All rows as an `mn × M` matrix (column `i` = row `i`).
    pub fn to_dense_columns(&self) -> Matrix {
        match &self.grads {
            GradRows::Dense(c) => c.clone(),
            GradRows::Outer { .. } => {
                let mn = self.rows * self.cols;
                let mut out = Matrix::zeros(mn, self.batch_size());
                for i in 0..self.batch_size() {
                    out.col_mut(i).copy_from_slice(self.sample(i).as_slice());
                }
                out
            }
        }
    }

    /// Mean over samples, i.e. the mini-batch gradient of this layer.
    pub fn mean(&self) -> Matrix {
        let m = self.batch_size() as f64;
        match &self.grads {
            GradRows::Outer {
                deltas,
                inputs,
                scale,
            } => deltas
                .matmul_t(inputs)
                .expect("factor shapes agree")
                .scaled(scale / m),
            GradRows::Dense(cols) => {
                let mut acc = vec![0.0; cols.rows()];
                for i in 0..cols.cols() {
                    acc.iter_mut().zip(cols.col(i)).for_each(|(a, x)| *a += x);
                }
                acc.iter_mut().for_each(|a| *a /= m);
                Matrix::from_col_major(self.rows, self.cols, acc).expect("finite mean")
            }
        }
    }
}

/// Additive noise mixed into the supervision signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseMode {
    /// Gradients are left untouched and `rho` is ignored.
    None,
    /// `n ~ N(0, std²)` per coordinate.
    Gaussian { std: f64 },
    /// `n ~ U[-half_width, half_width]` per coordinate.
    Uniform { half_width: f64 },
    /// Scaling by `√ρ` with a zero noise component.
    ZeroMix,
}

/// Supervision perturbations: gradient mixing `√ρ·g + √(1−ρ)·n` and uniform
/// label corruption with probability `label_corruption_eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionNoise {
    pub mode: NoiseMode,
    pub rho: f64,
    pub label_corruption_eps: f64,
}

impl Default for SupervisionNoise {
    fn default() -> Self {
        Self::none()
    }
}

impl SupervisionNoise {
    pub fn none() -> Self {
        Self {
            mode: NoiseMode::None,
            rho: 1.0,
            label_corruption_eps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(MlpError::InvalidNoise(format!(
                "rho {} outside [0, 1]",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.label_corruption_eps) {
            return Err(MlpError::InvalidNoise(format!(
                "label corruption {} outside [0, 1]",
                self.label_corruption_eps
            )));
        }
        match self.mode {
            NoiseMode::Gaussian { std } if !(std >= 0.0 && std.is_finite()) => {
                Err(MlpError::InvalidNoise(format!("gaussian std {std}")))
            }
            NoiseMode::Uniform { half_width } if !(half_width >= 0.0 && half_width.is_finite()) => {
                Err(MlpError::InvalidNoise(format!(
                    "uniform half width {half_width}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// `(signal scale, noise scale)` applied to per-sample gradients.
    pub fn mixing(&self) -> (f64, f64) {
        match self.mode {
            NoiseMode::None => (1.0, 0.0),
            NoiseMode::ZeroMix => (self.rho.sqrt(), 0.0),
            NoiseMode::Gaussian { .. } | NoiseMode::Uniform { .. } => {
                (self.rho.sqrt(), (1.0 - self.rho).sqrt())
            }
        }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        match self.mode {
            NoiseMode::Gaussian { std } => std * rng.normal(),
            NoiseMode::Uniform { half_width } => rng.uniform_in(-half_width, half_width),
            NoiseMode::None | NoiseMode::ZeroMix => 0.0,
        }
    }
}

/// Per-sample gradients of every layer for one mini-batch.
#[derive(Clone, Debug)]
pub struct SampleGradients {
    pub layers: Vec<PerSampleGradBatch>,
    /// Mean bias gradient per layer (after noise mixing).
    pub bias_means: Vec<Vec<f64>>,
    /// Mean un-mixed instance loss over the batch.
    pub mean_loss: f64,
}

impl SampleGradients {
    pub fn mean_gradients(&self) -> Gradients {
        Gradients {
            weights: self.layers.iter().map(|l| l.mean()).collect(),
            biases: self.bias_means.clone(),
        }
    }
}

/// Per-sample gradients for a `d × M` batch.
///
/// Row `i` of each layer's batch is the gradient of the (noise-mixed)
/// instance loss at sample `i`; the row mean is the mini-batch gradient.
/// `rng` is consumed only by additive noise modes.
pub fn per_sample_gradients(
    state: &MlpState,
    inputs: &Matrix,
    labels: &[usize],
    loss: Loss,
    noise: &SupervisionNoise,
    rng: &mut Rng,
) -> Result<SampleGradients, MlpError> {
    noise.validate()?;
    let (deltas, cache, mean_loss) = backward(state, inputs, labels, loss)?;
    let batch = inputs.cols();
    let (signal, noise_scale) = noise.mixing();

    let mut layers = Vec::with_capacity(state.num_layers());
    let mut bias_means = Vec::with_capacity(state.num_layers());
    for (layer, (delta, a)) in deltas.into_iter().zip(cache.layer_inputs).enumerate() {
        let (m, n) = (delta.rows(), a.rows());
        let mut bias_mean = vec![0.0; m];
        for i in 0..batch {
            bias_mean
                .iter_mut()
                .zip(delta.col(i))
                .for_each(|(b, d)| *b += d);
        }
        bias_mean
            .iter_mut()
            .for_each(|b| *b *= signal / batch as f64);

        if noise_scale == 0.0 {
            layers.push(PerSampleGradBatch::outer(layer, delta, a, signal)?);
        } else {
            let mut cols = Matrix::zeros(m * n, batch);
            let mut bias_noise = vec![0.0; m];
            for i in 0..batch {
                let (d, x) = (delta.col(i), a.col(i));
                let col = cols.col_mut(i);
                for c in 0..n {
                    for r in 0..m {
                        col[c * m + r] = signal * d[r] * x[c] + noise_scale * noise.draw(rng);
                    }
                }
                for b in bias_noise.iter_mut() {
                    *b += noise_scale * noise.draw(rng);
                }
            }
            bias_mean
                .iter_mut()
                .zip(&bias_noise)
                .for_each(|(b, z)| *b += z / batch as f64);
            layers.push(PerSampleGradBatch::dense(layer, m, n, cols)?);
        }
        bias_means.push(bias_mean);
    }
    Ok(SampleGradients {
        layers,
        bias_means,
        mean_loss,
    })
}

/// Mean gradient and mean loss over a `d × N` sample set, processed in
/// fixed-size chunks summed in order.
pub fn mean_gradients(
    state: &MlpState,
    inputs: &Matrix,
    labels: &[usize],
    loss: Loss,
) -> Result<(Gradients, f64), MlpError> {
    const CHUNK: usize = 2048;
    let total = inputs.cols();
    if total != labels.len() {
        return Err(MlpError::LabelCount {
            inputs: total,
            labels: labels.len(),
        });
    }
    let mut acc = Gradients::zeros_like(state);
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let chunk = column_range(inputs, start, end);
        let (deltas, cache, mean_loss) = backward(state, &chunk, &labels[start..end], loss)?;
        for (layer, (delta, a)) in deltas.iter().zip(&cache.layer_inputs).enumerate() {
            crate::tensor::gemm(1.0, delta, false, a, true, 1.0, &mut acc.weights[layer]);
            for i in 0..delta.cols() {
                acc.biases[layer]
                    .iter_mut()
                    .zip(delta.col(i))
                    .for_each(|(b, d)| *b += d);
            }
        }
        loss_sum += mean_loss * (end - start) as f64;
        start = end;
    }
    let inv = 1.0 / total as f64;
    acc.weights.iter_mut().for_each(|w| w.scale(inv));
    acc.biases
        .iter_mut()
        .for_each(|b| b.iter_mut().for_each(|x| *x *= inv));
    Ok((acc, loss_sum * inv))
}

/// Mean instance loss and accuracy over a sample set.
pub fn evaluate(
    state: &MlpState,
    inputs: &Matrix,
    labels: &[usize],
    loss: Loss,
) -> Result<(f64, f64), MlpError> {
    let (logits, _) = state.forward(inputs)?;
    let mut total = 0.0;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.col(i);
        total += instance_loss(z, y, loss);
        let argmax = (0..z.len()).fold(0, |b, k| if z[k] > z[b] { k } else { b });
        correct += usize::from(argmax == y);
    }
    let n = labels.len() as f64;
    Ok((total / n, correct as f64 / n))
}

/// Replaces each label, with probability `eps`, by a uniform draw over all
/// `num_classes` classes (which may coincide with the original).
pub fn corrupt_labels(rng: &mut Rng, labels: &[usize], eps: f64, num_classes: usize) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&eps), "eps must be in [0, 1]");
    labels
        .iter()
        .map(|&y| {
            if rng.uniform() < eps {
                rng.below(num_classes)
            } else {
                y
            }
        })
        .collect()
}

/// Gathers columns `start..end` of a column-major matrix.
pub(crate) fn column_range(m: &Matrix, start: usize, end: usize) -> Matrix {
    let r = m.rows();
    Matrix::from_col_major(r, end - start, m.as_slice()[start * r..end * r].to_vec())
        .expect("slice of finite matrix")
}

fn instance_loss(z: &[f64], y: usize, loss: Loss) -> f64 {
    match loss {
        Loss::CrossEntropy => {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y]
        }
        Loss::MeanSquared => z
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let t = if k == y { 1.0 } else { 0.0 };
                0.5 * (v - t) * (v - t)
            })
            .sum(),
    }
}

/// Backpropagates per-sample instance losses. Returns per-layer `δ`
/// matrices (`out_ℓ × M`, unaveraged), the forward cache, and mean loss.
fn backward(
    state: &MlpState,
    inputs: &Matrix,
    labels: &[usize],
    loss: Loss,
) -> Result<(Vec<Matrix>, ForwardCache, f64), MlpError> {
    if inputs.cols() != labels.len() {
        return Err(MlpError::LabelCount {
            inputs: inputs.cols(),
            labels: labels.len(),
        });
    }
    let classes = state.spec().output_dim();
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(MlpError::LabelOutOfRange { label, classes });
    }
    let (logits, cache) = state.forward(inputs)?;
    let batch = inputs.cols();

    let mut delta = Matrix::zeros(classes, batch);
    let mut loss_sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.col(i);
        loss_sum += instance_loss(z, y, loss);
        let d = delta.col_mut(i);
        match loss {
            Loss::CrossEntropy => {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (dk, zk) in d.iter_mut().zip(z) {
                    *dk = (zk - max).exp();
                    denom += *dk;
                }
                d.iter_mut().for_each(|dk| *dk /= denom);
                d[y] -= 1.0;
            }
            Loss::MeanSquared => {
                d.copy_from_slice(z);
                d[y] -= 1.0;
            }
        }
    }

    let layers = state.num_layers();
    let mut deltas = vec![Matrix::zeros(0, 0); layers];
    deltas[layers - 1] = delta;
    for l in (0..layers - 1).rev() {
        let mut back = state.weights[l + 1].t_matmul(&deltas[l + 1])?;
        for (b, z) in back
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre_activations[l].as_slice())
        {
            if *z <= 0.0 {
                *b = 0.0;
            }
        }
        deltas[l] = back;
    }
    Ok((deltas, cache, loss_sum / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_state(seed: u64, widths: &[usize]) -> MlpState {
        let spec = MlpSpec::from_widths(widths).unwrap();
        let mut rng = Rng::new(seed);
        let mut s = MlpState::kaiming(&spec, &mut rng, 0.1);
        for b in &mut s.biases {
            b.iter_mut().for_each(|x| *x = 0.1 * rng.normal());
        }
        s
    }

    fn batch(seed: u64, d: usize, m: usize, classes: usize) -> (Matrix, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let x = gaussian_matrix(&mut rng, d, m, 1.0);
        let y = (0..m).map(|_| rng.below(classes)).collect();
        (x, y)
    }

    #[test]
    fn spec_chaining() {
        assert!(MlpSpec::new(vec![(4, 3), (2, 1)]).is_err());
        let s = MlpSpec::mnist_default();
        assert_eq!(s.widths(), vec![784, 512, 256, 10]);
        assert_eq!(s.num_layers(), 3);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let spec = MlpSpec::from_widths(&[3, 4, 2]).unwrap();
        let weights = vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)];
        let biases = vec![vec![0.0; 4], vec![0.0; 2]];
        let s = MlpState::from_parts(&spec, weights, biases, 0.1).unwrap();
        let (x, _) = batch(1, 3, 5, 2);
        let (z, _) = s.forward(&x).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs() {
        let spec = MlpSpec::from_widths(&[3, 3]).unwrap();
        let s = MlpState::from_parts(&spec, vec![Matrix::identity(3)], vec![vec![0.0; 3]], 0.1)
            .unwrap();
        let (x, _) = batch(2, 3, 4, 3);
        assert_eq!(s.forward(&x).unwrap().0, x);
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let s = tiny_state(3, &[5, 7, 3]);
        let (x, _) = batch(4, 5, 6, 3);
        let (z, _) = s.forward(&x).unwrap();
        for i in 0..6 {
            let xi = x.col(i);
            let mut h = vec![0.0; 7];
            for r in 0..7 {
                let mut acc = s.biases[0][r];
                for c in 0..5 {
                    acc += s.weights[0][(r, c)] * xi[c];
                }
                h[r] = acc.max(0.0);
            }
            for r in 0..3 {
                let mut acc = s.biases[1][r];
                for c in 0..7 {
                    acc += s.weights[1][(r, c)] * h[c];
                }
                assert!((acc - z[(r, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_net_is_homogeneous_in_single_layer_scale() {
        let spec = MlpSpec::from_widths(&[4, 3]).unwrap();
        let mut rng = Rng::new(5);
        let s = MlpState::kaiming(&spec, &mut rng, 0.1);
        let mut scaled = s.clone();
        scaled.weights[0].scale(2.5);
        let (x, _) = batch(6, 4, 3, 3);
        let z = s.forward(&x).unwrap().0;
        let zs = scaled.forward(&x).unwrap().0;
        for (a, b) in z.as_slice().iter().zip(zs.as_slice()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    fn loss_at(state: &MlpState, x: &Matrix, y: &[usize], loss: Loss) -> f64 {
        evaluate(state, x, y, loss).unwrap().0
    }

    #[test]
    fn gradients_match_central_differences() {
        for loss in [Loss::CrossEntropy, Loss::MeanSquared] {
            let s = tiny_state(7, &[4, 6, 5, 3]);
            let (x, y) = batch(8, 4, 5, 3);
            let g = per_sample_gradients(
                &s,
                &x,
                &y,
                loss,
                &SupervisionNoise::none(),
                &mut Rng::new(0),
            )
            .unwrap()
            .mean_gradients();
            let h = 1e-4;
            let mut rng = Rng::new(9);
            for _ in 0..10 {
                let layer = rng.below(3);
                let (m, n) = s.weights[layer].shape();
                let (r, c) = (rng.below(m), rng.below(n));
                let mut plus = s.clone();
                plus.weights[layer][(r, c)] += h;
                let mut minus = s.clone();
                minus.weights[layer][(r, c)] -= h;
                let fd = (loss_at(&plus, &x, &y, loss) - loss_at(&minus, &x, &y, loss)) / (2.0 * h);
                let an = g.weights[layer][(r, c)];
                let rel = (fd - an).abs() / an.abs().max(1e-6);
                assert!(
                    rel < 1e-5,
                    "{loss:?} layer {layer} ({r},{c}): fd {fd} vs {an}"
                );
            }
            for layer in 0..3 {
                let mut plus = s.clone();
                plus.biases[layer][0] += h;
                let mut minus = s.clone();
                minus.biases[layer][0] -= h;
                let fd = (loss_at(&plus, &x, &y, loss) - loss_at(&minus, &x, &y, loss)) / (2.0 * h);
                let an = g.biases[layer][0];
                assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-5);
            }
        }
    }

    #[test]
    fn single_sample_row_is_batch_gradient() {
        let s = tiny_state(10, &[3, 4, 2]);
        let (x, y) = batch(11, 3, 1, 2);
        let sg = per_sample_gradients(
            &s,
            &x,
            &y,
            Loss::CrossEntropy,
            &SupervisionNoise::none(),
            &mut Rng::new(0),
        )
        .unwrap();
        let (full, _) = mean_gradients(&s, &x, &y, Loss::CrossEntropy).unwrap();
        for (l, batch) in sg.layers.iter().enumerate() {
            assert_eq!(batch.batch_size(), 1);
            let row = batch.sample(0);
            assert!(row.sub(&full.weights[l]).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn row_mean_is_batch_gradient() {
        let s = tiny_state(12, &[5, 8, 4]);
        let (x, y) = batch(13, 5, 9, 4);
        let noise = SupervisionNoise {
            mode: NoiseMode::Gaussian { std: 0.3 },
            rho: 0.5,
            label_corruption_eps: 0.0,
        };
        for nz in [SupervisionNoise::none(), noise] {
            let sg = per_sample_gradients(&s, &x, &y, Loss::CrossEntropy, &nz, &mut Rng::new(1))
                .unwrap();
            for batch in &sg.layers {
                let mut acc = Matrix::zeros(batch.shape().0, batch.shape().1);
                for i in 0..batch.batch_size() {
                    acc.axpy(1.0 / 9.0, &batch.sample(i)).unwrap();
                }
                assert!(acc.sub(&batch.mean()).unwrap().max_abs() < 1e-10);
            }
        }
        let sg = per_sample_gradients(
            &s,
            &x,
            &y,
            Loss::CrossEntropy,
            &SupervisionNoise::none(),
            &mut Rng::new(1),
        )
        .unwrap();
        let (full, _) = mean_gradients(&s, &x, &y, Loss::CrossEntropy).unwrap();
        for (l, b) in sg.layers.iter().enumerate() {
            assert!(b.mean().sub(&full.weights[l]).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mixing_is_identity() {
        let s = tiny_state(14, &[3, 5, 2]);
        let (x, y) = batch(15, 3, 4, 2);
        let plain = per_sample_gradients(
            &s,
            &x,
            &y,
            Loss::CrossEntropy,
            &SupervisionNoise::none(),
            &mut Rng::new(0),
        )
        .unwrap();
        for mode in [
            NoiseMode::None,
            NoiseMode::ZeroMix,
            NoiseMode::Gaussian { std: 1.0 },
        ] {
            let nz = SupervisionNoise {
                mode,
                rho: 1.0,
                label_corruption_eps: 0.0,
            };
            let mixed = per_sample_gradients(&s, &x, &y, Loss::CrossEntropy, &nz, &mut Rng::new(0))
                .unwrap();
            for (a, b) in plain.layers.iter().zip(&mixed.layers) {
                assert_eq!(a.to_dense_columns(), b.to_dense_columns());
            }
        }
    }

    #[test]
    fn injected_noise_variance() {
        // Zero network: the true gradient of layer 0 vanishes, so the rows
        // are pure injected noise.
        let spec = MlpSpec::from_widths(&[2, 2]).unwrap();
        let s = MlpState::from_parts(&spec, vec![Matrix::zeros(2, 2)], vec![vec![0.0; 2]], 0.1)
            .unwrap();
        let x = Matrix::zeros(2, 2500);
        let y = vec![0; 2500];
        let (rho, std) = (0.3, 0.8);
        let nz = SupervisionNoise {
            mode: NoiseMode::Gaussian { std },
            rho,
            label_corruption_eps: 0.0,
        };
        let sg =
            per_sample_gradients(&s, &x, &y, Loss::CrossEntropy, &nz, &mut Rng::new(2)).unwrap();
        let cols = sg.layers[0].to_dense_columns();
        let expected = (1.0 - rho) * std * std;
        for r in 0..4 {
            let vals: Vec<f64> = (0..cols.cols()).map(|i| cols[(r, i)]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            assert!(
                (var - expected).abs() / expected < 0.1,
                "{var} vs {expected}"
            );
        }
    }

    #[test]
    fn label_corruption() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        assert_eq!(corrupt_labels(&mut Rng::new(1), &labels, 0.0, 10), labels);
        let a = corrupt_labels(&mut Rng::new(2), &labels, 0.4, 10);
        let b = corrupt_labels(&mut Rng::new(2), &labels, 0.4, 10);
        assert_eq!(a, b);
        assert_ne!(a, labels);

        let n = 100_000;
        let all = corrupt_labels(&mut Rng::new(3), &vec![0; n], 1.0, 10);
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for k in 0..10 {
            let count = all.iter().filter(|&&y| y == k).count() as f64;
            assert!(
                (count - 0.1 * n as f64).abs() < 3.0 * sd,
                "class {k}: {count}"
            );
        }
    }

    #[test]
    fn sgd_step_cases() {
        let mut s = tiny_state(16, &[3, 4, 2]);
        let before = s.clone();
        s.sgd_step(&Gradients::zeros_like(&s)).unwrap();
        assert_eq!(s.weights, before.weights);
        assert_eq!(s.step, 1);

        let mut t = before.clone();
        t.lr = 1.0;
        let g = Gradients {
            weights: t.weights.clone(),
            biases: t.biases.clone(),
        };
        t.sgd_step(&g).unwrap();
        assert!(t.weights.iter().all(|w| w.max_abs() == 0.0));

        let mut bad = Gradients::zeros_like(&before);
        bad.weights[1][(0, 0)] = f64::INFINITY;
        let mut u = before.clone();
        let err = u.sgd_step(&bad).unwrap_err();
        assert!(matches!(err, MlpError::NonFiniteUpdate { layer: 1 }));
        assert_eq!(u.weights, before.weights);
        assert_eq!(u.step, 0);
    }

    #[test]
    fn frozen_gradients_compose_additively() {
        let base = tiny_state(17, &[3, 4, 2]);
        let mut rng = Rng::new(18);
        let frozen = |rng: &mut Rng| Gradients {
            weights: base
                .weights
                .iter()
                .map(|w| gaussian_matrix(rng, w.rows(), w.cols(), 0.1))
                .collect(),
            biases: base
                .biases
                .iter()
                .map(|b| (0..b.len()).map(|_| rng.normal()).collect())
                .collect(),
        };
        let (g1, g2) = (frozen(&mut rng), frozen(&mut rng));
        let mut two = base.clone();
        two.sgd_step(&g1).unwrap();
        two.sgd_step(&g2).unwrap();
        let mut sum = g1.clone();
        sum.axpy(1.0, &g2).unwrap();
        let mut one = base.clone();
        one.sgd_step(&sum).unwrap();
        for (a, b) in two.weights.iter().zip(&one.weights) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = tiny_state(19, &[3, 2]);
        let (x, _) = batch(20, 3, 2, 2);
        assert!(matches!(
            per_sample_gradients(
                &s,
                &x,
                &[0, 5],
                Loss::CrossEntropy,
                &SupervisionNoise::none(),
                &mut Rng::new(0)
            ),
            Err(MlpError::LabelOutOfRange { label: 5, .. })
        ));
        assert!(matches!(
            s.forward(&Matrix::zeros(4, 1)),
            Err(MlpError::InputWidth { .. })
        ));
        let bad = SupervisionNoise {
            rho: 1.5,
            ..SupervisionNoise::none()
        };
        assert!(bad.validate().is_err());
    }
}
