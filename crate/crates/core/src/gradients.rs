//! Per-sample gradients of the cross-entropy loss with respect to the final
//! linear layer.
//!
//! With `h` the last hidden activations and `p = softmax(logits)`, the weight
//! gradient for label `y` is the outer product `(p - e_y) h^T`, flattened
//! class-major (entry `c * H + j`), optionally followed by the bias gradient
//! `p - e_y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::nn::{softmax, MlpModel};

/// Which label produced a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The classifier's own argmax.
    Predicted,
    /// The frozen least-likely class chosen for suspected OOD samples.
    Selected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vector,
    pub source_label: usize,
    pub label_mode: LabelMode,
}

/// Gradient dimension for a model.
pub fn gradient_dim(model: &MlpModel, include_bias: bool) -> usize {
    let c = model.class_count;
    c * model.feature_dim_last_hidden() + if include_bias { c } else { 0 }
}

pub(crate) fn gradient_from_parts(probs: &[f64], hidden: &[f64], label: usize, include_bias: bool) -> Vector {
    let delta: Vec<f64> = probs.iter().enumerate().map(|(c, p)| p - if c == label { 1.0 } else { 0.0 }).collect();
    let mut values = Vec::with_capacity(delta.len() * (hidden.len() + include_bias as usize));
    for d in &delta {
        values.extend(hidden.iter().map(|h| d * h));
    }
    if include_bias {
        values.extend_from_slice(&delta);
    }
    Vector(values)
}

fn check_label(model: &MlpModel, label: usize) -> Result<()> {
    if model.is_binary() || label >= model.class_count {
        return Err(Error::LabelOutOfRange { label, class_count: model.class_count });
    }
    Ok(())
}

/// Gradient for `sample` under `label`; tagged `Predicted` when the label is
/// the model's argmax.
pub fn extract_gradient(model: &MlpModel, sample: &Vector, label: usize, include_bias: bool) -> Result<GradientVector> {
    check_label(model, label)?;
    let (logits, hidden) = model.forward_one(sample)?;
    let probs = softmax(&logits);
    let label_mode = if crate::nn::argmax(&probs) == label { LabelMode::Predicted } else { LabelMode::Selected };
    Ok(GradientVector { values: gradient_from_parts(&probs, &hidden, label, include_bias), source_label: label, label_mode })
}

/// Element-wise [`extract_gradient`]; no coupling between samples.
pub fn extract_batch(model: &MlpModel, samples: &[Vector], labels: &[usize], include_bias: bool) -> Result<Vec<GradientVector>> {
    if samples.len() != labels.len() {
        return Err(Error::LengthMismatch { left: samples.len(), right: labels.len() });
    }
    samples.iter().zip(labels).map(|(x, &y)| extract_gradient(model, x, y, include_bias)).collect()
}
