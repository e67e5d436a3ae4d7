//! Dense ReLU networks: forward pass, exact backpropagation (including input
//! gradients), and momentum SGD with decoupled masks.
//!
//! Layer weights are stored row-major with shape `(out_dim, in_dim)`, so a
//! layer computes `z = x · Wᵀ + b` on a row-major batch `x`.

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::pruning::SparsityMask;
use crate::rng::{self, LabRng};
use crate::tensor::{axpy, dot, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_widths,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("net.input_dim must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            problems.push("net.num_classes must be >= 2".to_string());
        }
        for (i, &w) in self.hidden_widths.iter().enumerate() {
            if w == 0 {
                problems.push(format!("net.hidden_widths[{i}] must be >= 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// `(in_dim, out_dim)` of every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// Width of the penultimate representation (input width for a single layer).
    pub fn feature_dim(&self) -> usize {
        self.hidden_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn weight_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor2::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }
}

/// All trainable parameters of a network, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<DenseLayer>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_dims()
                .into_iter()
                .map(|(i, o)| DenseLayer::zeros(i, o))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.weight.cols(), l.weight.rows()))
                .collect(),
        }
    }

    /// He initialization: weights `N(0, 2/fan_in)`, biases zero.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = rng::rng_from(seed, &[rng::TAG_INIT]);
        let mut p = Self::zeros(spec);
        for layer in &mut p.layers {
            let std = (2.0 / layer.weight.cols() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = std * rng::normal(&mut rng);
            }
        }
        p
    }

    pub fn total_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len()).sum()
    }

    pub fn check_matches(&self, spec: &MlpSpec) -> Result<()> {
        let dims = spec.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::shape(
                "parameters",
                format!("{} layers, spec expects {}", self.layers.len(), dims.len()),
            ));
        }
        for (l, ((i, o), layer)) in dims.iter().zip(&self.layers).enumerate() {
            if layer.weight.rows() != *o || layer.weight.cols() != *i || layer.bias.len() != *o {
                return Err(Error::shape(
                    format!("layer {l}"),
                    format!(
                        "weight {}x{} bias {}, spec expects {o}x{i} bias {o}",
                        layer.weight.rows(),
                        layer.weight.cols(),
                        layer.bias.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows()
                    && a.weight.cols() == b.weight.cols()
                    && a.bias.len() == b.bias.len()
            })
    }

    pub(crate) fn ensure_same_shape(&self, other: &ParamSet, context: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, "parameter sets differ in shape"))
        }
    }

    /// Flattened parameters: each layer's weights (row-major) then its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(spec);
        if flat.len() != p.total_count() {
            return Err(Error::shape(
                "ParamSet::from_flat",
                format!("{} values, spec needs {}", flat.len(), p.total_count()),
            ));
        }
        let mut off = 0;
        for l in &mut p.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + m]);
            off += m;
        }
        Ok(p)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(alpha, b.weight.data(), a.weight.data_mut());
            axpy(alpha, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight.map_inplace(|v| v * c);
            l.bias.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor2,
    pub pre_activations: Vec<Tensor2>,
    /// Post-activation outputs; the last entry is the logits.
    pub activations: Vec<Tensor2>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor2 {
        self.activations.last().expect("network has at least one layer")
    }

    /// Output of the last hidden layer (the input itself for a single-layer net).
    pub fn features(&self) -> &Tensor2 {
        let n = self.activations.len();
        if n >= 2 {
            &self.activations[n - 2]
        } else {
            &self.input
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

fn layer_forward(layer: &DenseLayer, x: &Tensor2) -> Tensor2 {
    let out_dim = layer.weight.rows();
    let mut z = Tensor2::zeros(x.rows(), out_dim);
    for (b, xb) in x.row_iter().enumerate() {
        let zr = z.row_mut(b);
        for (o, zo) in zr.iter_mut().enumerate() {
            *zo = dot(layer.weight.row(o), xb) + layer.bias[o];
        }
    }
    z
}

pub fn forward(spec: &MlpSpec, params: &ParamSet, batch: &Tensor2) -> Result<ForwardTrace> {
    params.check_matches(spec)?;
    if batch.cols() != spec.input_dim {
        return Err(Error::shape(
            "layer 0 input",
            format!("batch has {} columns, spec input_dim is {}", batch.cols(), spec.input_dim),
        ));
    }
    Ok(forward_unchecked(params, batch))
}

pub(crate) fn forward_unchecked(params: &ParamSet, batch: &Tensor2) -> ForwardTrace {
    let n = params.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut act: Vec<Tensor2> = Vec::with_capacity(n);
    for (l, layer) in params.layers.iter().enumerate() {
        let x = if l == 0 { batch } else { &act[l - 1] };
        let z = layer_forward(layer, x);
        let mut a = z.clone();
        if l + 1 < n {
            a.map_inplace(|v| v.max(0.0));
        }
        pre.push(z);
        act.push(a);
    }
    ForwardTrace {
        input: batch.clone(),
        pre_activations: pre,
        activations: act,
    }
}

/// Logits of the output layer applied to given penultimate features.
pub fn logits_from_features(params: &ParamSet, features: &Tensor2) -> Tensor2 {
    layer_forward(params.layers.last().expect("at least one layer"), features)
}

/// Row-wise softmax of `logits / temperature`, max-shifted.
pub fn softmax_rows(logits: &Tensor2, temperature: f64) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / temperature).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// `log Σ exp(row)` with max shift.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub grads: ParamSet,
    pub input_grads: Tensor2,
}

/// Backpropagates `d_act` (gradient w.r.t. the activation output of layer
/// `start`) down to the input. Layers above `start` get zero gradients.
pub(crate) fn backprop(
    params: &ParamSet,
    trace: &ForwardTrace,
    start: usize,
    d_act: Tensor2,
    mask: Option<&SparsityMask>,
) -> (ParamSet, Tensor2) {
    let n = params.layers.len();
    let mut grads = params.zeros_like();
    let mut d_a = d_act;
    for l in (0..=start).rev() {
        let mut d_z = d_a;
        if l + 1 < n {
            let z = &trace.pre_activations[l];
            for (g, zv) in d_z.data_mut().iter_mut().zip(z.data()) {
                if *zv <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.activations[l - 1]
        };
        let layer = &params.layers[l];
        let g = &mut grads.layers[l];
        let out_dim = layer.weight.rows();
        let in_dim = layer.weight.cols();
        let mut d_in = Tensor2::zeros(d_z.rows(), in_dim);
        for b in 0..d_z.rows() {
            let dzb = d_z.row(b);
            let xb = input.row(b);
            for o in 0..out_dim {
                let dz = dzb[o];
                if dz == 0.0 {
                    continue;
                }
                g.bias[o] += dz;
                axpy(dz, xb, g.weight.row_mut(o));
                axpy(dz, layer.weight.row(o), d_in.row_mut(b));
            }
        }
        d_a = d_in;
    }
    if let Some(m) = mask {
        m.zero_masked(&mut grads);
    }
    (grads, d_a)
}

/// Weighted soft-target cross-entropy on temperature-scaled logits:
/// `Σ_b w_b · CE(target_b, softmax(z_b / T))`, with exact gradients.
pub fn backward_soft(
    spec: &MlpSpec,
    params: &ParamSet,
    batch: &Tensor2,
    targets: &Tensor2,
    sample_weights: &[f64],
    temperature: f64,
    mask: Option<&SparsityMask>,
) -> Result<BackwardOutput> {
    let trace = forward(spec, params, batch)?;
    if targets.rows() != batch.rows() || targets.cols() != spec.num_classes {
        return Err(Error::shape(
            "targets",
            format!(
                "{}x{} targets for {} samples and {} classes",
                targets.rows(),
                targets.cols(),
                batch.rows(),
                spec.num_classes
            ),
        ));
    }
    if sample_weights.len() != batch.rows() {
        return Err(Error::shape("sample weights", "one weight per sample required"));
    }
    soft_from_trace(params, &trace, targets, sample_weights, temperature, mask)
}

fn soft_from_trace(
    params: &ParamSet,
    trace: &ForwardTrace,
    targets: &Tensor2,
    sample_weights: &[f64],
    temperature: f64,
    mask: Option<&SparsityMask>,
) -> Result<BackwardOutput> {
    let logits = trace.logits();
    let probs = softmax_rows(logits, temperature);
    let mut loss = 0.0;
    let mut d_logits = Tensor2::zeros(logits.rows(), logits.cols());
    for b in 0..logits.rows() {
        let scaled: Vec<f64> = logits.row(b).iter().map(|v| v / temperature).collect();
        let lse = log_sum_exp(&scaled);
        let w = sample_weights[b];
        let t = targets.row(b);
        let mut ce = 0.0;
        for c in 0..t.len() {
            if t[c] != 0.0 {
                ce -= t[c] * (scaled[c] - lse);
            }
        }
        loss += w * ce;
        let tsum: f64 = t.iter().sum();
        let p = probs.row(b);
        let d = d_logits.row_mut(b);
        for c in 0..t.len() {
            d[c] = w * (tsum * p[c] - t[c]) / temperature;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: None,
            batch: None,
        });
    }
    let last = params.layers.len() - 1;
    let (grads, input_grads) = backprop(params, trace, last, d_logits, mask);
    Ok(BackwardOutput {
        loss,
        grads,
        input_grads,
    })
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor2 {
    let mut t = Tensor2::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        t.set(i, y, 1.0);
    }
    t
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for (sample, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes,
                sample,
            });
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradients.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamSet,
    batch: &Tensor2,
    labels: &[usize],
    mask: Option<&SparsityMask>,
) -> Result<BackwardOutput> {
    if labels.len() != batch.rows() {
        return Err(Error::shape(
            "labels",
            format!("{} labels for {} samples", labels.len(), batch.rows()),
        ));
    }
    check_labels(labels, spec.num_classes)?;
    let n = batch.rows().max(1) as f64;
    let weights = vec![1.0 / n; batch.rows()];
    backward_soft(
        spec,
        params,
        batch,
        &one_hot(labels, spec.num_classes),
        &weights,
        1.0,
        mask,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: from `epoch` completed epochs on, the rate is
    /// `learning_rate * multiplier`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    /// Std of Gaussian noise added to every training input, redrawn per
    /// batch. Zero disables it and draws nothing from the RNG.
    #[serde(default)]
    pub input_jitter: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            lr_schedule: vec![(100, 0.1), (150, 0.01)],
            input_jitter: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("sgd.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("sgd.momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("sgd.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.input_jitter >= 0.0 && self.input_jitter.is_finite()) {
            p.push(format!("sgd.input_jitter must be finite and >= 0, got {}", self.input_jitter));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            p.push("sgd.lr_schedule epochs must be strictly increasing".to_string());
        }
        p
    }

    /// Learning rate used for the epoch that follows `completed` epochs.
    pub fn lr_at(&self, completed: usize) -> f64 {
        let mult = self
            .lr_schedule
            .iter()
            .take_while(|(e, _)| *e <= completed)
            .last()
            .map_or(1.0, |(_, m)| *m);
        self.learning_rate * mult
    }
}

/// One momentum step: `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`. Biases are not
/// decayed; masked weights and their velocity are held at zero.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    velocity: &mut ParamSet,
    cfg: &SgdConfig,
    lr: f64,
    mask: Option<&SparsityMask>,
) -> Result<()> {
    params.ensure_same_shape(grads, "sgd_step grads")?;
    params.ensure_same_shape(velocity, "sgd_step velocity")?;
    let mu = cfg.momentum;
    let wd = cfg.weight_decay;
    for ((p, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        for ((w, gw), vw) in p
            .weight
            .data_mut()
            .iter_mut()
            .zip(g.weight.data())
            .zip(v.weight.data_mut())
        {
            *vw = mu * *vw + (gw + wd * *w);
            *w -= lr * *vw;
        }
        for ((b, gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = mu * *vb + gb;
            *b -= lr * *vb;
        }
    }
    if let Some(m) = mask {
        m.zero_masked(params);
        m.zero_masked(velocity);
    }
    Ok(())
}

/// Auxiliary outliers trained toward the uniform prediction.
#[derive(Debug, Clone, Copy)]
pub struct OutlierExposure<'a> {
    pub outliers: &'a Tensor2,
    pub weight: f64,
}

/// One epoch of mini-batch SGD over `data` in an order drawn from `rng`.
/// Returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    spec: &MlpSpec,
    params: &mut ParamSet,
    velocity: &mut ParamSet,
    sgd: &SgdConfig,
    lr: f64,
    data: &LabeledDataset,
    batch_size: usize,
    rng: &mut LabRng,
    mask: Option<&SparsityMask>,
    oe: Option<OutlierExposure<'_>>,
) -> Result<f64> {
    let labels = data
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("training data must be labeled".into()))?;
    check_labels(labels, spec.num_classes)?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("training set".into()));
    }
    let batch_size = batch_size.max(1);
    let order = rng::permutation(n, rng);
    let outlier_order = oe.map(|o| rng::permutation(o.outliers.rows(), rng));
    let mut outlier_cursor = 0usize;
    let mut total = 0.0;
    let mut batches = 0usize;
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        let mut x = data.inputs.select_rows(chunk);
        if sgd.input_jitter > 0.0 {
            x.data_mut()
                .iter_mut()
                .for_each(|v| *v += sgd.input_jitter * rng::normal(rng));
        }
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let out = match (oe, &outlier_order) {
            (Some(o), Some(oo)) if !oo.is_empty() => {
                let idx: Vec<usize> = (0..chunk.len())
                    .map(|j| oo[(outlier_cursor + j) % oo.len()])
                    .collect();
                outlier_cursor = (outlier_cursor + chunk.len()) % oo.len();
                let xo = o.outliers.select_rows(&idx);
                let k = spec.num_classes;
                let mut targets = one_hot(&y, k);
                let uniform = Tensor2::from_vec(idx.len(), k, vec![1.0 / k as f64; idx.len() * k])?;
                targets = targets.vstack(&uniform)?;
                let mut w = vec![1.0 / chunk.len() as f64; chunk.len()];
                w.extend(std::iter::repeat_n(o.weight / idx.len() as f64, idx.len()));
                let xb = x.vstack(&xo)?;
                backward_soft(spec, params, &xb, &targets, &w, 1.0, mask)
            }
            _ => backward(spec, params, &x, &y, mask),
        }
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                epoch: None,
                batch: Some(bi),
            },
            other => other,
        })?;
        sgd_step(params, &out.grads, velocity, sgd, lr, mask)?;
        total += out.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Predicted class (first maximum) of each logit row.
pub fn argmax_rows(logits: &Tensor2) -> Vec<usize> {
    logits
        .row_iter()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Classification accuracy of `params` on a labeled dataset.
pub fn accuracy(spec: &MlpSpec, params: &ParamSet, data: &LabeledDataset) -> Result<f64> {
    let labels = data
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("accuracy needs labels".into()))?;
    let trace = forward(spec, params, &data.inputs)?;
    let pred = argmax_rows(trace.logits());
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}
