//! Small feedforward networks with hand-written backpropagation.
//!
//! A model is a chain of dense layers. Each layer may batch-normalise its
//! pre-activations before the nonlinearity. The last layer is either a
//! linear multi-class head (`class_count` logits) or a one-unit sigmoid head
//! whose output is read as the probability that a sample is OOD.

mod backprop;
mod gradcheck;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::Vector;
use crate::rng::SeededRng;

pub use backprop::{Gradients, LossKind};
pub use gradcheck::{backprop_check, backprop_check_batch};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use train::{train, BatchComposition, LabeledSet, TrainConfig, TrainReport};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    BatchnormRelu,
    Linear,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics a batch-norm layer normalises with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormStats {
    Batch,
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Normalise with batch statistics even in eval mode (batches of two or more).
    #[serde(default)]
    pub batch_stat_at_inference: bool,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            batch_stat_at_inference: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Row-major `output_dim x input_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNorm>,
}

impl Layer {
    fn new(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (input_dim + output_dim) as f64).sqrt();
        let weights = (0..input_dim * output_dim).map(|_| rng.uniform(-limit, limit)).collect();
        let batch_norm = (activation == Activation::BatchnormRelu).then(|| BatchNorm::new(output_dim));
        Self { input_dim, output_dim, weights, bias: vec![0.0; output_dim], activation, batch_norm }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len() + self.batch_norm.as_ref().map_or(0, |bn| 2 * bn.gamma.len())
    }
}

/// Width and activation of one layer, used to build a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn new(width: usize, activation: Activation) -> Self {
        Self { width, activation }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub class_count: usize,
    pub rng_seed: u64,
}

/// Output of a forward pass: final-layer pre-activations and the activations
/// feeding the final layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vector>,
    pub hidden: Vec<Vector>,
}

/// Default hidden width of the IDD classifier's last hidden layer.
pub const CLASSIFIER_HIDDEN: usize = 16;

impl MlpModel {
    /// Build a model with Glorot-uniform weights drawn from `seed`; biases start at zero.
    pub fn new(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let Some(last) = specs.last() else {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        };
        if input_dim == 0 || specs.iter().any(|s| s.width == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        for s in &specs[..specs.len() - 1] {
            if s.activation == Activation::Sigmoid {
                return Err(Error::InvalidConfig("sigmoid is only supported on the output layer".into()));
            }
        }
        let class_count = match last.activation {
            Activation::Sigmoid if last.width != 1 => {
                return Err(Error::InvalidConfig("sigmoid head must have width 1".into()));
            }
            Activation::Sigmoid => 1,
            Activation::Linear => last.width,
            _ => return Err(Error::InvalidConfig("output layer must be linear or sigmoid".into())),
        };
        let mut rng = SeededRng::new(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for s in specs {
            layers.push(Layer::new(fan_in, s.width, s.activation, &mut rng));
            fan_in = s.width;
        }
        Ok(Self { layers, class_count, rng_seed: seed })
    }

    /// input -> dense(64)+ReLU -> dense(16)+ReLU -> dense(class_count).
    pub fn classifier(input_dim: usize, class_count: usize, seed: u64) -> Result<Self> {
        Self::new(
            input_dim,
            &[
                LayerSpec::new(64, Activation::Relu),
                LayerSpec::new(CLASSIFIER_HIDDEN, Activation::Relu),
                LayerSpec::new(class_count, Activation::Linear),
            ],
            seed,
        )
    }

    /// input -> dense(32)+batchnorm+ReLU -> dense(16)+ReLU -> dense(1)+sigmoid.
    pub fn discriminator(input_dim: usize, seed: u64) -> Result<Self> {
        Self::new(
            input_dim,
            &[
                LayerSpec::new(32, Activation::BatchnormRelu),
                LayerSpec::new(16, Activation::Relu),
                LayerSpec::new(1, Activation::Sigmoid),
            ],
            seed,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn feature_dim_last_hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.input_dim)
    }

    pub fn is_binary(&self) -> bool {
        self.layers.last().is_some_and(|l| l.activation == Activation::Sigmoid)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm.is_some())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn set_batch_stat_at_inference(&mut self, on: bool) {
        for bn in self.layers.iter_mut().filter_map(|l| l.batch_norm.as_mut()) {
            bn.batch_stat_at_inference = on;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().chain(&l.bias).all(|v| v.is_finite())
                && l.batch_norm.as_ref().is_none_or(|bn| {
                    bn.gamma.iter().chain(&bn.beta).chain(&bn.running_mean).chain(&bn.running_var).all(|v| v.is_finite())
                })
        })
    }

    /// Parameter slices in a fixed order: per layer weights, bias, then
    /// batch-norm gamma and beta when present.
    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            if let Some(bn) = l.batch_norm.as_mut() {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub(crate) fn norm_stats(&self, mode: Mode, batch_len: usize) -> NormStats {
        match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => {
                let flagged = self.layers.iter().filter_map(|l| l.batch_norm.as_ref()).any(|bn| bn.batch_stat_at_inference);
                if flagged && batch_len >= 2 {
                    NormStats::Batch
                } else {
                    NormStats::Running
                }
            }
        }
    }

    fn check_batch(&self, batch: &[Vector], stats: NormStats) -> Result<()> {
        if batch.is_empty() && stats == NormStats::Batch && self.has_batch_norm() {
            return Err(Error::Empty("batch-norm forward in train mode"));
        }
        for x in batch {
            ensure_len(self.input_dim(), x.dim())?;
        }
        Ok(())
    }

    /// Forward a batch. Train mode normalises with batch statistics; eval mode
    /// uses running statistics unless the layer is flagged otherwise.
    pub fn forward(&self, batch: &[Vector], mode: Mode) -> Result<ForwardOutput> {
        let stats = self.norm_stats(mode, batch.len());
        self.forward_with(batch, stats)
    }

    pub(crate) fn forward_with(&self, batch: &[Vector], stats: NormStats) -> Result<ForwardOutput> {
        self.check_batch(batch, stats)?;
        if batch.is_empty() {
            return Ok(ForwardOutput { logits: Vec::new(), hidden: Vec::new() });
        }
        let cache = self.forward_cached(batch, stats);
        let last = cache.layers.last().expect("model has layers");
        let n = batch.len();
        let split = |m: &backprop::Matrix| (0..n).map(|i| Vector(m.row(i).to_vec())).collect::<Vec<_>>();
        Ok(ForwardOutput { logits: split(&last.pre_activation), hidden: split(&last.input) })
    }

    /// Forward one sample in eval mode.
    pub fn forward_one(&self, sample: &Vector) -> Result<(Vector, Vector)> {
        let mut out = self.forward(std::slice::from_ref(sample), Mode::Eval)?;
        Ok((out.logits.pop().expect("one row"), out.hidden.pop().expect("one row")))
    }

    /// Softmax class probabilities for one sample.
    pub fn predict_proba(&self, sample: &Vector) -> Result<Vector> {
        let (logits, _) = self.forward_one(sample)?;
        Ok(softmax(&logits))
    }

    pub fn predict_class(&self, sample: &Vector) -> Result<usize> {
        Ok(argmax(&self.predict_proba(sample)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.into_model()
    }
}

/// On-disk JSON layout for a model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub input_dim: usize,
    pub class_count: usize,
    pub rng_seed: u64,
    pub layers: Vec<Layer>,
}

pub const MODEL_FORMAT: &str = "gradova.mlp.v1";

impl From<&MlpModel> for ModelDocument {
    fn from(m: &MlpModel) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            input_dim: m.input_dim(),
            class_count: m.class_count,
            rng_seed: m.rng_seed,
            layers: m.layers.clone(),
        }
    }
}

impl ModelDocument {
    pub fn into_model(self) -> Result<MlpModel> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Malformed(format!("unknown model format {:?}", self.format)));
        }
        let mut fan_in = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.input_dim != fan_in || l.weights.len() != l.input_dim * l.output_dim || l.bias.len() != l.output_dim {
                return Err(Error::Malformed(format!("layer {i} dimensions do not chain")));
            }
            if let Some(bn) = &l.batch_norm {
                let w = l.output_dim;
                if bn.gamma.len() != w || bn.beta.len() != w || bn.running_mean.len() != w || bn.running_var.len() != w {
                    return Err(Error::Malformed(format!("layer {i} batch-norm width")));
                }
            }
            fan_in = l.output_dim;
        }
        let expected = match self.layers.last() {
            Some(l) if l.activation == Activation::Sigmoid => 1,
            Some(l) => l.output_dim,
            None => return Err(Error::Malformed("model has no layers".into())),
        };
        if expected != self.class_count {
            return Err(Error::Malformed("class_count does not match output layer".into()));
        }
        Ok(MlpModel { layers: self.layers, class_count: self.class_count, rng_seed: self.rng_seed })
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / total).collect())
}

/// `-ln(max(p_label, 1e-30))`.
pub fn cross_entropy(probabilities: &[f64], label: usize) -> Result<f64> {
    let p = probabilities
        .get(label)
        .ok_or(Error::LabelOutOfRange { label, class_count: probabilities.len() })?;
    Ok(-p.max(1e-30).ln())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
