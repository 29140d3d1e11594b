use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::rng::SeededRng;

use super::backprop::loss_and_grad;
use super::{LossKind, MlpModel, Mode};

const STEP: f64 = 1e-5;
/// Floor on the relative-error denominator so that gradients which are zero
/// on both sides compare as equal.
const REL_FLOOR: f64 = 1e-6;
/// Pre-activations closer than this to a ReLU kink trigger a sample nudge.
const KINK_MARGIN: f64 = 1e-4;

/// Max relative error between analytic parameter gradients and central
/// finite differences for the loss of `sample` under `label`.
pub fn backprop_check(model: &MlpModel, sample: &Vector, label: usize) -> Result<f64> {
    backprop_check_batch(model, std::slice::from_ref(sample), &[label], Mode::Eval)
}

/// Batch version; in train mode batch-norm layers use the batch statistics,
/// so their coupling between samples is part of what gets checked.
pub fn backprop_check_batch(model: &MlpModel, samples: &[Vector], labels: &[usize], mode: Mode) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("gradient check batch"));
    }
    let kind = if model.is_binary() { LossKind::Discriminator } else { LossKind::Multiclass };
    let stats = model.norm_stats(mode, samples.len());
    let samples = away_from_kinks(model, samples, stats)?;

    let cache = model.forward_cached(&samples, stats);
    let (_, dlogits) = loss_and_grad(cache.logits(), labels, kind)?;
    let analytic = model.backward(&cache, dlogits).flatten();

    let loss_at = |m: &MlpModel| -> Result<f64> {
        let c = m.forward_cached(&samples, stats);
        Ok(loss_and_grad(c.logits(), labels, kind)?.0)
    };

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut flat_index = 0;
    let slice_lens: Vec<usize> = probe.param_slices_mut().iter().map(|s| s.len()).collect();
    for (k, len) in slice_lens.into_iter().enumerate() {
        for i in 0..len {
            let original = probe.param_slices_mut()[k][i];
            probe.param_slices_mut()[k][i] = original + STEP;
            let up = loss_at(&probe)?;
            probe.param_slices_mut()[k][i] = original - STEP;
            let down = loss_at(&probe)?;
            probe.param_slices_mut()[k][i] = original;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[flat_index];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            flat_index += 1;
        }
    }
    Ok(worst)
}

/// Nudge inputs with growing noise until no hidden ReLU sits within
/// `KINK_MARGIN` of zero. Gives up after a fixed number of rounds, which only
/// happens when the inputs cannot move the pre-activations (zero weights).
fn away_from_kinks(model: &MlpModel, samples: &[Vector], stats: super::NormStats) -> Result<Vec<Vector>> {
    let mut current = samples.to_vec();
    let mut rng = SeededRng::new(0x6b69_6e6b);
    let mut scale = 1e-2;
    for _ in 0..50 {
        let cache = model.forward_cached(&current, stats);
        let hidden = &cache.layers[..cache.layers.len() - 1];
        let near_kink = hidden.iter().any(|lc| lc.pre_activation.data.iter().any(|v| v.abs() < KINK_MARGIN));
        if !near_kink {
            return Ok(current);
        }
        for x in &mut current {
            for v in x.iter_mut() {
                *v += scale * rng.normal();
            }
        }
        scale *= 1.5;
    }
    Ok(current)
}
