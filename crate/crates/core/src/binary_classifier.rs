//! The self-trained IDD/OOD discriminator.
//!
//! The sigmoid output is read as the probability that a sample is OOD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::nn::{sigmoid, train, BatchComposition, LabeledSet, LossKind, MlpModel, Mode, NormStats, TrainConfig, TrainReport};
use crate::rng::{derive_seed, tags};
use crate::stream::ScoredSample;

pub const DISCRIMINATOR_FORMAT: &str = "gradova.discriminator.v1";

/// Balanced pseudo-labelled selection taken from the two ends of the score
/// ranking. Indices point into the scored list.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSet {
    pub idd_samples: Vec<Vector>,
    pub ood_samples: Vec<Vector>,
    pub idd_indices: Vec<usize>,
    pub ood_indices: Vec<usize>,
    pub selection_fraction: f64,
}

impl PseudoLabeledSet {
    pub fn per_side(&self) -> usize {
        self.idd_samples.len()
    }

    pub fn from_indices(samples: &[Vector], idd: Vec<usize>, ood: Vec<usize>, selection_fraction: f64) -> Result<Self> {
        if idd.is_empty() || idd.len() != ood.len() {
            return Err(Error::InvalidConfig(format!("pseudo set must be balanced and non-empty, got {}/{}", idd.len(), ood.len())));
        }
        let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
        Ok(Self { idd_samples: pick(&idd), ood_samples: pick(&ood), idd_indices: idd, ood_indices: ood, selection_fraction })
    }

    fn labeled(&self) -> LabeledSet {
        let samples = self.idd_samples.iter().chain(&self.ood_samples).cloned().collect();
        let labels = std::iter::repeat_n(0, self.idd_samples.len()).chain(std::iter::repeat_n(1, self.ood_samples.len())).collect();
        LabeledSet { samples, labels }
    }
}

/// `k = max(1, floor(fraction * n / 2))` per side.
pub fn pseudo_side_count(n: usize, selection_fraction: f64) -> usize {
    ((selection_fraction * n as f64 / 2.0).floor() as usize).max(1)
}

pub fn validate_fraction(selection_fraction: f64) -> Result<()> {
    if !(selection_fraction > 0.0 && selection_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("selection_fraction must lie in (0, 1], got {selection_fraction}")));
    }
    Ok(())
}

/// Highest `k` scores become pseudo-OOD, lowest `k` pseudo-IDD. Equal scores
/// keep stream order.
pub fn build_pseudo_set(scored: &[ScoredSample], selection_fraction: f64) -> Result<PseudoLabeledSet> {
    validate_fraction(selection_fraction)?;
    if scored.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, available: scored.len() });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].novelty_score.total_cmp(&scored[a].novelty_score));
    let k = pseudo_side_count(scored.len(), selection_fraction);
    let ood = order[..k].to_vec();
    let mut idd = order[scored.len() - k..].to_vec();
    idd.reverse();
    let payloads: Vec<Vector> = scored.iter().map(|s| s.payload.clone()).collect();
    PseudoLabeledSet::from_indices(&payloads, idd, ood, selection_fraction)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Each sample alone, normalised with running statistics.
    #[default]
    PerSample,
    /// The whole list as one batch sharing one label. Batch-norm layers use
    /// the batch's own statistics only when the network was trained on pure
    /// batches; otherwise running statistics.
    PureBatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRule {
    /// OOD when the mean sigmoid output exceeds 0.5.
    #[default]
    Mean,
    /// OOD when more than half the members individually exceed 0.5.
    Majority,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: MlpModel,
    pub generation: u64,
    pub training_set_size: usize,
    pub report: TrainReport,
}

impl Discriminator {
    /// Train the next generation. With `reinit` (the default policy) the
    /// network starts from a fresh initialisation seeded by
    /// `cfg.rng_seed + generation`; otherwise training continues from the
    /// previous parameters.
    pub fn retrain(previous: Option<&Discriminator>, pseudo: &PseudoLabeledSet, cfg: &TrainConfig, reinit: bool) -> Result<Self> {
        let generation = previous.map_or(1, |d| d.generation + 1);
        let dim = pseudo.idd_samples.first().ok_or(Error::Empty("pseudo set"))?.dim();
        let seed = cfg.rng_seed.wrapping_add(generation);
        let start = match previous {
            Some(d) if !reinit => d.net.clone(),
            _ => MlpModel::discriminator(dim, seed)?,
        };
        let run_cfg = TrainConfig { rng_seed: derive_seed(seed, tags::DISCRIMINATOR), ..cfg.clone() };
        let data = pseudo.labeled();
        let (mut net, report) = train(&start, &data, &run_cfg, LossKind::Discriminator)?;
        net.set_batch_stat_at_inference(cfg.batch_composition == BatchComposition::Pure);
        Ok(Self { net, generation, training_set_size: data.len(), report })
    }

    /// Sigmoid outputs. Batch statistics need a batch of two or more; a
    /// single sample falls back to running statistics.
    pub fn probabilities(&self, samples: &[Vector], mode: InferenceMode) -> Result<Vec<f64>> {
        let stats = match mode {
            InferenceMode::PureBatch => self.net.norm_stats(Mode::Eval, samples.len()),
            InferenceMode::PerSample => NormStats::Running,
        };
        let out = self.net.forward_with(samples, stats)?;
        Ok(out.logits.iter().map(|z| sigmoid(z[0])).collect())
    }

    /// `true` marks OOD. A sigmoid output of exactly 0.5 is IDD.
    pub fn predict(&self, samples: &[Vector], mode: InferenceMode, rule: BatchRule) -> Result<Vec<bool>> {
        let probs = self.probabilities(samples, mode)?;
        Ok(match mode {
            InferenceMode::PerSample => probs.iter().map(|&p| p > 0.5).collect(),
            InferenceMode::PureBatch => {
                if samples.is_empty() {
                    return Err(Error::Empty("pure batch"));
                }
                let n = probs.len() as f64;
                let ood = match rule {
                    BatchRule::Mean => probs.iter().sum::<f64>() / n > 0.5,
                    BatchRule::Majority => probs.iter().filter(|&&p| p > 0.5).count() as f64 > n / 2.0,
                };
                vec![ood; samples.len()]
            }
        })
    }

    /// Fraction of samples whose per-sample prediction matches `truth_ood`.
    pub fn accuracy(&self, samples: &[Vector], truth_ood: &[bool]) -> Result<f64> {
        if samples.len() != truth_ood.len() {
            return Err(Error::LengthMismatch { left: samples.len(), right: truth_ood.len() });
        }
        let pred = self.predict(samples, InferenceMode::PerSample, BatchRule::Mean)?;
        let hits = pred.iter().zip(truth_ood).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / samples.len().max(1) as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DiscriminatorDocument {
            format: DISCRIMINATOR_FORMAT.to_string(),
            generation: self.generation,
            training_set_size: self.training_set_size,
            losses: self.report.losses.clone(),
            degenerate: self.report.degenerate,
            model: crate::nn::ModelDocument::from(&self.net),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DiscriminatorDocument = serde_json::from_str(text)?;
        if doc.format != DISCRIMINATOR_FORMAT {
            return Err(Error::Malformed(format!("unknown discriminator format {:?}", doc.format)));
        }
        let net = doc.model.into_model()?;
        if !net.is_binary() {
            return Err(Error::Malformed("discriminator needs a sigmoid head".into()));
        }
        Ok(Self {
            net,
            generation: doc.generation,
            training_set_size: doc.training_set_size,
            report: TrainReport { losses: doc.losses, degenerate: doc.degenerate },
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DiscriminatorDocument {
    format: String,
    generation: u64,
    training_set_size: usize,
    losses: Vec<f64>,
    degenerate: bool,
    model: crate::nn::ModelDocument,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn scored(scores: &[f64]) -> Vec<ScoredSample> {
        scores.iter().enumerate().map(|(i, &s)| ScoredSample::new(Vector(vec![i as f64]), s)).collect()
    }

    fn blob_pseudo(seed: u64, n: usize, gap: f64) -> PseudoLabeledSet {
        let mut rng = SeededRng::new(seed);
        let mut draw = |shift: f64| Vector((0..3).map(|i| rng.normal() + if i == 0 { shift } else { 0.0 }).collect());
        let idd: Vec<Vector> = (0..n).map(|_| draw(-gap / 2.0)).collect();
        let ood: Vec<Vector> = (0..n).map(|_| draw(gap / 2.0)).collect();
        let all: Vec<Vector> = idd.into_iter().chain(ood).collect();
        PseudoLabeledSet::from_indices(&all, (0..n).collect(), (n..2 * n).collect(), 0.5).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { learning_rate: 1e-2, epochs: 30, rng_seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn two_sample_split() {
        let p = build_pseudo_set(&scored(&[9.0, 1.0]), 1.0).unwrap();
        assert_eq!((p.ood_indices.clone(), p.idd_indices.clone()), (vec![0], vec![1]));
    }

    #[test]
    fn fraction_arithmetic() {
        let p = build_pseudo_set(&scored(&[5.0, 1.0, 7.0, 3.0, 8.0, 2.0, 6.0, 4.0]), 0.5).unwrap();
        assert_eq!(p.ood_indices, vec![4, 2]);
        assert_eq!(p.idd_indices, vec![1, 5]);
        assert_eq!(pseudo_side_count(3, 0.1), 1);
        assert!(build_pseudo_set(&scored(&[1.0]), 1.0).is_err());
        assert!(build_pseudo_set(&scored(&[1.0, 2.0]), 0.0).is_err());
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = SeededRng::new(9);
        // rounded scores force ties
        let scores: Vec<f64> = (0..200).map(|_| (rng.normal() * 4.0).round()).collect();
        let p = build_pseudo_set(&scored(&scores), 0.5).unwrap();
        let mut keyed: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
        // descending score, ascending index
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top: Vec<usize> = keyed[..50].iter().map(|x| x.1).collect();
        let mut bottom: Vec<usize> = keyed[150..].iter().map(|x| x.1).collect();
        bottom.reverse();
        assert_eq!(p.ood_indices, top);
        assert_eq!(p.idd_indices, bottom);
        let min_ood = p.ood_indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_idd = p.idd_indices.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_ood >= max_idd);
    }

    #[test]
    fn separable_pseudo_set_is_learned() {
        let pseudo = blob_pseudo(1, 100, 8.0);
        let d = Discriminator::retrain(None, &pseudo, &quick_cfg(), true).unwrap();
        assert_eq!(d.generation, 1);
        assert_eq!(d.training_set_size, 200);
        let samples: Vec<Vector> = pseudo.idd_samples.iter().chain(&pseudo.ood_samples).cloned().collect();
        let truth: Vec<bool> = (0..200).map(|i| i >= 100).collect();
        assert!(d.accuracy(&samples, &truth).unwrap() >= 0.99);
        assert!(d.probabilities(&samples, InferenceMode::PerSample).unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn retrain_is_deterministic_and_fresh() {
        let pseudo = blob_pseudo(2, 40, 4.0);
        let a = Discriminator::retrain(None, &pseudo, &quick_cfg(), true).unwrap();
        let b = Discriminator::retrain(None, &pseudo, &quick_cfg(), true).unwrap();
        assert_eq!(a, b);

        let mut poisoned = a.clone();
        poisoned.net.layers.iter_mut().for_each(|l| l.weights.iter_mut().for_each(|w| *w = f64::NAN));
        let next = Discriminator::retrain(Some(&poisoned), &pseudo, &quick_cfg(), true).unwrap();
        assert_eq!(next.generation, 2);
        assert!(next.net.is_finite());
        assert!(next.probabilities(&pseudo.idd_samples, InferenceMode::PerSample).unwrap().iter().all(|p| p.is_finite()));
        assert!(Discriminator::retrain(Some(&poisoned), &pseudo, &quick_cfg(), false).is_err());
    }

    #[test]
    fn boundary_is_idd() {
        let pseudo = blob_pseudo(3, 10, 4.0);
        let mut d = Discriminator::retrain(None, &pseudo, &TrainConfig { epochs: 1, ..quick_cfg() }, true).unwrap();
        let last = d.net.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias[0] = 0.0;
        assert_eq!(d.probabilities(&pseudo.ood_samples, InferenceMode::PerSample).unwrap()[0], 0.5);
        assert!(d.predict(&pseudo.ood_samples, InferenceMode::PerSample, BatchRule::Mean).unwrap().iter().all(|&o| !o));
        assert!(d.predict(&pseudo.ood_samples, InferenceMode::PureBatch, BatchRule::Mean).unwrap().iter().all(|&o| !o));
        assert!(d.predict(&[], InferenceMode::PureBatch, BatchRule::Mean).is_err());
    }

    #[test]
    fn single_member_batch_equals_per_sample() {
        let pseudo = blob_pseudo(4, 30, 3.0);
        let d = Discriminator::retrain(None, &pseudo, &quick_cfg(), true).unwrap();
        for x in pseudo.idd_samples.iter().chain(&pseudo.ood_samples) {
            let one = std::slice::from_ref(x);
            assert_eq!(
                d.probabilities(one, InferenceMode::PureBatch).unwrap(),
                d.probabilities(one, InferenceMode::PerSample).unwrap()
            );
        }
    }

    #[test]
    fn pure_batch_of_ood_is_flagged() {
        let pseudo = blob_pseudo(5, 100, 6.0);
        let d = Discriminator::retrain(None, &pseudo, &quick_cfg(), true).unwrap();
        let fresh = blob_pseudo(6, 32, 6.0);
        let per = d.probabilities(&fresh.ood_samples, InferenceMode::PerSample).unwrap();
        let majority = per.iter().filter(|&&p| p > 0.5).count() > 16;
        let mean = per.iter().sum::<f64>() / 32.0 > 0.5;
        assert!(majority && mean);
        assert!(d.predict(&fresh.ood_samples, InferenceMode::PerSample, BatchRule::Mean).unwrap().iter().filter(|&&o| o).count() > 16);
        assert!(d.predict(&fresh.ood_samples, InferenceMode::PureBatch, BatchRule::Mean).unwrap().iter().all(|&o| o));
        assert!(d.predict(&fresh.ood_samples, InferenceMode::PureBatch, BatchRule::Majority).unwrap().iter().all(|&o| o));
        assert!(d.predict(&fresh.idd_samples, InferenceMode::PureBatch, BatchRule::Mean).unwrap().iter().all(|&o| !o));
    }

    #[test]
    fn pure_composition_trains() {
        // pure batches normalise away a pure mean shift, so only completion is checked
        let pseudo = blob_pseudo(5, 50, 6.0);
        let cfg = TrainConfig { batch_composition: BatchComposition::Pure, ..quick_cfg() };
        let d = Discriminator::retrain(None, &pseudo, &cfg, true).unwrap();
        assert!(d.net.is_finite());
        assert!(d.net.layers[0].batch_norm.as_ref().unwrap().batch_stat_at_inference);
        let mixed = Discriminator::retrain(None, &pseudo, &quick_cfg(), true).unwrap();
        assert!(!mixed.net.layers[0].batch_norm.as_ref().unwrap().batch_stat_at_inference);
        assert_eq!(d.predict(&pseudo.ood_samples, InferenceMode::PureBatch, BatchRule::Mean).unwrap().len(), 50);
    }

    #[test]
    fn json_round_trip() {
        let pseudo = blob_pseudo(7, 10, 4.0);
        let d = Discriminator::retrain(None, &pseudo, &TrainConfig { epochs: 3, ..quick_cfg() }, true).unwrap();
        let back = Discriminator::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
