//! Small dense feed-forward classifiers.
//!
//! The general model, every artificial expert and the gating model are all
//! [`MlpClassifier`] values. Besides training and prediction the network
//! exposes what the out-of-distribution detectors need: temperature-scaled
//! softmax, penultimate-layer features, and gradients of a logit objective
//! (or a feature objective) with respect to the input.
//!
//! Layout: layer `l` maps `layer_dims[l]` inputs to `layer_dims[l + 1]`
//! outputs; its weight matrix is stored row-major with shape
//! `(layer_dims[l + 1], layer_dims[l])`. Hidden layers apply the activation,
//! the output layer is affine and produces logits.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative evaluated at the pre-activation value. The rectifier uses 0 at the kink.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Mini-batch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Train on inputs standardised with the training set's per-feature mean
    /// and deviation, then fold that map into the first layer. The first
    /// layer's starting weights are read in standardised coordinates.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 0,
            shuffle: true,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A scalar function of the logits that can be differentiated with respect to them.
pub trait LogitObjective {
    fn value(&self, logits: &[f64]) -> f64;
    fn gradient(&self, logits: &[f64]) -> Vec<f64>;
}

/// `logits[i]`.
#[derive(Debug, Clone, Copy)]
pub struct LogitComponent(pub usize);

impl LogitObjective for LogitComponent {
    fn value(&self, logits: &[f64]) -> f64 {
        logits[self.0]
    }

    fn gradient(&self, logits: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; logits.len()];
        g[self.0] = 1.0;
        g
    }
}

/// `log max_i softmax(logits / T)_i`, with the arg-max taken on the logits.
#[derive(Debug, Clone, Copy)]
pub struct LogMaxSoftmax {
    pub temperature: f64,
}

impl LogitObjective for LogMaxSoftmax {
    fn value(&self, logits: &[f64]) -> f64 {
        let m = argmax(logits);
        let t = self.temperature;
        let max = logits[m];
        let lse: f64 = logits.iter().map(|z| ((z - max) / t).exp()).sum::<f64>().ln();
        -lse
    }

    fn gradient(&self, logits: &[f64]) -> Vec<f64> {
        let m = argmax(logits);
        let t = self.temperature;
        let max = logits[m];
        let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / t).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter()
            .enumerate()
            .map(|(i, e)| {
                let onehot = if i == m { 1.0 } else { 0.0 };
                (onehot - e / sum) / t
            })
            .collect()
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `p_i = exp(z_i / T) / sum_j exp(z_j / T)`, evaluated with max-subtraction.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be finite and > 0, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Parameter("softmax of an empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Per-feature mean and standard deviation; constant features get scale 1.
fn feature_moments(inputs: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = inputs.len() as f64;
    let d = inputs[0].len();
    let mut mean = vec![0.0; d];
    for x in inputs {
        mean.iter_mut().zip(x.iter()).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for x in inputs {
        var.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    let scale = var
        .into_iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Output of [`MlpClassifier::predict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub label: u32,
    pub confidence: f64,
}

/// Per-layer intermediate values of one forward pass.
struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the instance itself.
    inputs: Vec<Vec<f64>>,
    /// `pre[l] = W_l inputs[l] + b_l`; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
}

struct Gradients {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &MlpClassifier) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn reset(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpClassifier {
    layer_dims: Vec<usize>,
    activation: Activation,
    class_labels: Vec<u32>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl MlpClassifier {
    /// He-initialised network with zero biases.
    pub fn new(
        layer_dims: &[usize],
        class_labels: &[u32],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        Self::check_dims(layer_dims, class_labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
            weights.push((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            class_labels: class_labels.to_vec(),
            weights,
            biases,
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(layer_dims: &[usize], class_labels: &[u32], activation: Activation) -> Result<Self> {
        Self::check_dims(layer_dims, class_labels)?;
        let weights = layer_dims.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect();
        let biases = layer_dims.windows(2).map(|p| vec![0.0; p[1]]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            class_labels: class_labels.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        activation: Activation,
        class_labels: Vec<u32>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let net = Self {
            layer_dims,
            activation,
            class_labels,
            weights,
            biases,
        };
        net.validate()?;
        Ok(net)
    }

    fn check_dims(layer_dims: &[usize], class_labels: &[u32]) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::Structure(
                "layer_dims needs at least an input and an output dimension".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Structure("layer dimensions must be positive".into()));
        }
        if *layer_dims.last().unwrap() != class_labels.len() {
            return Err(Error::Structure(format!(
                "output dimension {} does not match {} class labels",
                layer_dims.last().unwrap(),
                class_labels.len()
            )));
        }
        let mut sorted = class_labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != class_labels.len() {
            return Err(Error::Structure("duplicate class labels".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_dims(&self.layer_dims, &self.class_labels)?;
        let transitions = self.layer_dims.len() - 1;
        if self.weights.len() != transitions || self.biases.len() != transitions {
            return Err(Error::Structure(format!(
                "expected {transitions} weight/bias pairs, got {}/{}",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (l, pair) in self.layer_dims.windows(2).enumerate() {
            if self.weights[l].len() != pair[0] * pair[1] || self.biases[l].len() != pair[1] {
                return Err(Error::Structure(format!("layer {l} has inconsistent shapes")));
            }
        }
        if self
            .weights
            .iter()
            .chain(self.biases.iter())
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_labels(&self) -> &[u32] {
        &self.class_labels
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn label_index(&self, label: u32) -> Option<usize> {
        self.class_labels.iter().position(|&c| c == label)
    }

    /// Dimension of [`Self::extract_features`]; `None` without a hidden layer.
    pub fn feature_dim(&self) -> Option<usize> {
        (self.layer_dims.len() >= 3).then(|| self.layer_dims[self.layer_dims.len() - 2])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> ForwardTrace {
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut current = x.to_vec();
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.weights[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    self.biases[l][o] + row.iter().zip(&current).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let next = if l + 1 < layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        ForwardTrace { inputs, pre }
    }

    /// Propagates `delta = dL/dpre[top]` down to the input, optionally
    /// accumulating parameter gradients on the way.
    fn backward(
        &self,
        trace: &ForwardTrace,
        top: usize,
        mut delta: Vec<f64>,
        mut grads: Option<&mut Gradients>,
    ) -> Vec<f64> {
        let mut l = top;
        loop {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.weights[l];
            if let Some(g) = grads.as_deref_mut() {
                let input = &trace.inputs[l];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[l][o] += d;
                    let row = &mut g.weights[l][o * n_in..(o + 1) * n_in];
                    for (gw, xi) in row.iter_mut().zip(input) {
                        *gw += d * xi;
                    }
                }
            }
            let mut d_input = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (di, wi) in d_input.iter_mut().zip(row) {
                    *di += d * wi;
                }
            }
            if l == 0 {
                return d_input;
            }
            let pre = &trace.pre[l - 1];
            delta = d_input
                .iter()
                .zip(pre)
                .map(|(d, &p)| d * self.activation.derivative(p))
                .collect();
            l -= 1;
        }
    }

    /// Pre-softmax scores.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut t = self.trace(x);
        Ok(t.pre.pop().expect("at least one layer"))
    }

    /// Arg-max class of the softmax at T = 1 and its probability.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let logits = self.forward(x)?;
        let probs = softmax_with_temperature(&logits, 1.0)?;
        let index = argmax(&probs);
        Ok(Prediction {
            index,
            label: self.class_labels[index],
            confidence: probs[index],
        })
    }

    /// Post-activation values of the penultimate layer.
    pub fn extract_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if self.feature_dim().is_none() {
            return Err(Error::Structure("network has no hidden layer".into()));
        }
        let mut t = self.trace(x);
        Ok(t.inputs.pop().expect("hidden layer present"))
    }

    /// Gradient of `objective(forward(x))` with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], objective: &dyn LogitObjective) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let top = self.weights.len() - 1;
        let delta = objective.gradient(&trace.pre[top]);
        Ok(self.backward(&trace, top, delta, None))
    }

    /// Features at `x` together with the input gradient of a feature-space
    /// objective whose gradient at those features is produced by `d_objective`.
    pub fn feature_input_gradient(
        &self,
        x: &[f64],
        d_objective: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        if self.feature_dim().is_none() {
            return Err(Error::Structure("network has no hidden layer".into()));
        }
        let trace = self.trace(x);
        let last = self.weights.len() - 1;
        let features = trace.inputs[last].clone();
        let d_feat = d_objective(&features);
        let top = last - 1;
        let delta = d_feat
            .iter()
            .zip(&trace.pre[top])
            .map(|(d, &p)| d * self.activation.derivative(p))
            .collect();
        let grad = self.backward(&trace, top, delta, None);
        Ok((features, grad))
    }

    /// In-place mini-batch SGD on softmax cross-entropy. Returns the mean
    /// training loss of every epoch.
    pub fn fit(&mut self, inputs: &[&[f64]], labels: &[u32], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if inputs.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let targets = labels
            .iter()
            .map(|&l| self.label_index(l).ok_or(Error::Label(l)))
            .collect::<Result<Vec<_>>>()?;
        for x in inputs {
            self.check_input(x)?;
        }
        if cfg.standardize {
            let (shift, scale) = feature_moments(inputs);
            let scaled: Vec<Vec<f64>> = inputs
                .iter()
                .map(|x| x.iter().zip(&shift).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
                .collect();
            let refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
            let history = self.sgd(&refs, &targets, cfg)?;
            self.fold_input_map(&shift, &scale);
            return Ok(history);
        }
        self.sgd(inputs, &targets, cfg)
    }

    /// Rewrites the first layer so that `f(x)` equals the current network
    /// applied to `(x - shift) / scale`.
    fn fold_input_map(&mut self, shift: &[f64], scale: &[f64]) {
        for (row, b) in self.weights[0]
            .chunks_mut(self.layer_dims[0])
            .zip(self.biases[0].iter_mut())
        {
            for ((w, m), s) in row.iter_mut().zip(shift).zip(scale) {
                *w /= s;
                *b -= *w * m;
            }
        }
    }

    fn sgd(&mut self, inputs: &[&[f64]], targets: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut grads = Gradients::zeros_like(self);
        let top = self.weights.len() - 1;
        let mut history = Vec::with_capacity(cfg.epochs);

        for _ in 0..cfg.epochs {
            if cfg.shuffle {
                order.shuffle(&mut rng);
            }
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                grads.reset();
                for &i in batch {
                    let trace = self.trace(inputs[i]);
                    let logits = &trace.pre[top];
                    epoch_loss += cross_entropy(logits, targets[i]);
                    // dL/dz = softmax(z) - onehot
                    let mut delta = softmax_with_temperature(logits, 1.0)?;
                    delta[targets[i]] -= 1.0;
                    self.backward(&trace, top, delta, Some(&mut grads));
                }
                let step = cfg.learning_rate / batch.len() as f64;
                for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
                    w.iter_mut().zip(g).for_each(|(w, g)| *w -= step * g);
                }
                for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
                    b.iter_mut().zip(g).for_each(|(b, g)| *b -= step * g);
                }
            }
            let mean = epoch_loss / inputs.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Numeric("training diverged".into()));
            }
            history.push(mean);
        }
        Ok(history)
    }

    /// Trains a copy of `self` on `data` and returns it with its loss history.
    pub fn train(
        &self,
        data: &crate::datasets::Dataset,
        cfg: &TrainConfig,
    ) -> Result<(Self, Vec<f64>)> {
        let inputs: Vec<&[f64]> = data.instances.iter().map(|i| i.features.as_slice()).collect();
        let labels: Vec<u32> = data.instances.iter().map(|i| i.class_label.0).collect();
        let mut net = self.clone();
        let history = net.fit(&inputs, &labels, cfg)?;
        Ok((net, history))
    }

    /// Fraction of `(x, label)` pairs predicted correctly.
    pub fn accuracy(&self, data: &crate::datasets::Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("accuracy of an empty dataset".into()));
        }
        let mut correct = 0usize;
        for inst in &data.instances {
            if self.predict(&inst.features)?.label == inst.class_label.0 {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}
