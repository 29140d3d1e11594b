//! The closed detector/discriminator loop over a stream of unlabeled batches.
//!
//! Each call to [`StreamState::consume_batch`]:
//!
//! 1. appends the batch to the history;
//! 2. scores the whole history, using the frozen selected label for samples
//!    the current discriminator flags as OOD and the predicted label for the
//!    rest (the first batch uses predicted labels throughout);
//! 3. takes the top and bottom of the score ranking as a pseudo-labelled set;
//! 4. estimates the selected label from the pseudo-OOD side if none is held;
//! 5. retrains the discriminator on the pseudo set.
//!
//! The loop never sees truth tags: batches are bare feature vectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary_classifier::{build_pseudo_set, pseudo_side_count, validate_fraction, BatchRule, Discriminator, InferenceMode, PseudoLabeledSet};
use crate::data::OodTag;
use crate::error::{Error, Result};
use crate::gradients::LabelMode;
use crate::label_select::{select_label, SelectedLabel};
use crate::linalg::Vector;
use crate::mahalanobis::{percentile, score_sample, GradientStatistics, NoveltyScore};
use crate::nn::{MlpModel, TrainConfig};
use crate::rng::{derive_seed, tags, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// 95th percentile of the IDD training set's own scores.
    #[default]
    Tpr95,
    /// 95th percentile of the scores of the current pseudo-IDD members.
    PseudoIdd95,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Score every sample with its predicted label; no discriminator.
    pub disable_discriminator: bool,
    /// Draw the pseudo set at random instead of from the score ranking.
    pub random_pseudo_labels: bool,
    /// Continue training the previous discriminator instead of starting fresh.
    pub no_reinit: bool,
    /// Re-estimate the selected label every iteration.
    pub refresh_label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub batch_size_in: usize,
    pub batch_size_ood: usize,
    pub selection_fraction: f64,
    pub discriminator_train: TrainConfig,
    pub score_threshold_policy: ThresholdPolicy,
    pub ablation_flags: AblationFlags,
    /// Seed for the random pseudo-label ablation.
    pub rng_seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            batch_size_in: 50,
            batch_size_ood: 50,
            selection_fraction: 0.5,
            discriminator_train: TrainConfig::default(),
            score_threshold_policy: ThresholdPolicy::Tpr95,
            ablation_flags: AblationFlags::default(),
            rng_seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_in == 0 && self.batch_size_ood == 0 {
            return Err(Error::InvalidConfig("batch sizes must not both be zero".into()));
        }
        validate_fraction(self.selection_fraction)?;
        if let ThresholdPolicy::Fixed(v) = self.score_threshold_policy {
            if !v.is_finite() {
                return Err(Error::InvalidConfig("fixed threshold must be finite".into()));
            }
        }
        self.discriminator_train.validate()
    }
}

/// A history member with its current score and discriminator vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub payload: Vector,
    pub novelty_score: f64,
    pub label_mode: LabelMode,
    pub discriminator_vote: Option<bool>,
    /// Filled only by evaluation code.
    pub truth_tag: Option<OodTag>,
}

impl ScoredSample {
    pub fn new(payload: Vector, novelty_score: f64) -> Self {
        Self { payload, novelty_score, label_mode: LabelMode::Predicted, discriminator_vote: None, truth_tag: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub history: Vec<Vector>,
    pub scores: Vec<NoveltyScore>,
    pub votes: Vec<Option<bool>>,
    pub selected_label: Option<SelectedLabel>,
    pub discriminator: Option<Discriminator>,
    pub pseudo: Option<PseudoLabeledSet>,
    pub iteration: usize,
    pub config: LoopConfig,
    reference_threshold: f64,
}

impl StreamState {
    pub fn new(config: LoopConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            history: Vec::new(),
            scores: Vec::new(),
            votes: Vec::new(),
            selected_label: None,
            discriminator: None,
            pseudo: None,
            iteration: 0,
            config,
            reference_threshold: f64::NAN,
        })
    }

    pub fn score_values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.value).collect()
    }

    pub fn scored_samples(&self) -> Vec<ScoredSample> {
        self.history
            .iter()
            .zip(&self.scores)
            .zip(&self.votes)
            .map(|((x, s), v)| ScoredSample {
                payload: x.clone(),
                novelty_score: s.value,
                label_mode: s.label_mode,
                discriminator_vote: *v,
                truth_tag: None,
            })
            .collect()
    }

    pub fn consume_batch(&mut self, batch: &[Vector], model: &MlpModel, stats: &GradientStatistics) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("stream batch"));
        }
        if stats.class_count() != model.class_count {
            return Err(Error::InvalidConfig("statistics do not belong to this model".into()));
        }
        self.reference_threshold = stats.idd_score_q95;
        self.history.extend_from_slice(batch);
        let flags = self.config.ablation_flags;

        let votes: Vec<Option<bool>> = match (&self.discriminator, flags.disable_discriminator) {
            (Some(d), false) => d.predict(&self.history, InferenceMode::PerSample, BatchRule::Mean)?.into_iter().map(Some).collect(),
            _ => vec![None; self.history.len()],
        };
        let selected = self.selected_label.map(|s| s.class_index);
        self.scores = self
            .history
            .par_iter()
            .zip(&votes)
            .map(|(x, vote)| {
                let label = if *vote == Some(true) { selected } else { None };
                score_sample(model, stats, x, label)
            })
            .collect::<Result<_>>()?;
        self.votes = votes;

        let pseudo = if flags.random_pseudo_labels {
            self.random_pseudo_set()?
        } else {
            build_pseudo_set(&self.scored_samples(), self.config.selection_fraction)?
        };

        if self.selected_label.is_none() || flags.refresh_label {
            let mut label = select_label(model, &pseudo.ood_samples)?;
            label.frozen = !flags.refresh_label;
            self.selected_label = Some(label);
        }

        if !flags.disable_discriminator {
            let next = Discriminator::retrain(self.discriminator.as_ref(), &pseudo, &self.config.discriminator_train, !flags.no_reinit)?;
            self.discriminator = Some(next);
        }
        self.pseudo = Some(pseudo);
        self.iteration += 1;
        Ok(())
    }

    fn random_pseudo_set(&self) -> Result<PseudoLabeledSet> {
        let n = self.history.len();
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, available: n });
        }
        let k = pseudo_side_count(n, self.config.selection_fraction);
        let seed = derive_seed(self.config.rng_seed, tags::ABLATION).wrapping_add(self.iteration as u64);
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::new(seed).shuffle(&mut order);
        PseudoLabeledSet::from_indices(&self.history, order[..k].to_vec(), order[n - k..].to_vec(), self.config.selection_fraction)
    }

    pub fn threshold(&self) -> Result<f64> {
        if self.iteration == 0 {
            return Err(Error::InvalidConfig("no batch has been consumed".into()));
        }
        Ok(match self.config.score_threshold_policy {
            ThresholdPolicy::Tpr95 => self.reference_threshold,
            ThresholdPolicy::PseudoIdd95 => {
                let pseudo = self.pseudo.as_ref().expect("set after the first batch");
                let s: Vec<f64> = pseudo.idd_indices.iter().map(|&i| self.scores[i].value).collect();
                percentile(&s, 0.95)
            }
            ThresholdPolicy::Fixed(v) => v,
        })
    }

    /// `true` marks an outlier: score strictly above the threshold.
    pub fn final_decisions(&self) -> Result<Vec<bool>> {
        let t = self.threshold()?;
        Ok(self.scores.iter().map(|s| s.value > t).collect())
    }
}

/// Metrics supplied by an evaluation observer after each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Observation {
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub disc_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub selected_label: Option<usize>,
    pub n_history: usize,
    pub threshold: f64,
}

/// Feed every batch in order, recording one trace entry per iteration.
pub fn run_stream(
    batches: &[Vec<Vector>],
    model: &MlpModel,
    stats: &GradientStatistics,
    cfg: &LoopConfig,
    observer: &mut dyn FnMut(&StreamState) -> Result<Observation>,
) -> Result<(Vec<TraceRecord>, StreamState)> {
    if batches.is_empty() {
        return Err(Error::Empty("stream"));
    }
    let mut state = StreamState::new(cfg.clone())?;
    let mut trace = Vec::with_capacity(batches.len());
    for batch in batches {
        state.consume_batch(batch, model, stats)?;
        let obs = observer(&state)?;
        trace.push(TraceRecord {
            iteration: state.iteration,
            auroc: obs.auroc,
            aupr: obs.aupr,
            disc_accuracy: obs.disc_accuracy,
            selected_label: state.selected_label.map(|s| s.class_index),
            n_history: state.history.len(),
            threshold: state.threshold()?,
        });
    }
    Ok((trace, state))
}

/// One JSON object per line.
pub fn trace_to_ndjson(trace: &[TraceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, labeled_idd, DatasetSpec, OodPlacement, OodSpec};
    use crate::mahalanobis::{fit, DEFAULT_EPSILON_SCALE};
    use crate::nn::{train, LossKind};

    struct Fixture {
        model: MlpModel,
        stats: GradientStatistics,
        idd: Vec<Vector>,
        ood: Vec<Vector>,
    }

    fn fixture() -> Fixture {
        let spec = DatasetSpec::blobs(3, 6, 200, 6.0, 17).with_ood(OodSpec {
            fraction: 3.0,
            samples_per_mode: 120,
            placement: OodPlacement::Midpoint,
            ..OodSpec::default()
        });
        let data = generate(&spec).unwrap();
        let labeled = labeled_idd(&data);
        let (model, _) = train(
            &MlpModel::classifier(6, 3, 2).unwrap(),
            &labeled,
            &TrainConfig { epochs: 60, learning_rate: 2e-3, rng_seed: 3, ..TrainConfig::default() },
            LossKind::Multiclass,
        )
        .unwrap();
        let stats = fit(&model, &labeled, false, DEFAULT_EPSILON_SCALE).unwrap();
        let test = crate::data::generate_split(&spec, 1).unwrap();
        let mut idd: Vec<Vector> = test.iter().filter(|s| !s.ood_tag.is_ood()).map(|s| s.features.clone()).collect();
        SeededRng::new(5).shuffle(&mut idd);
        let ood = test.iter().filter(|s| s.ood_tag.is_ood()).map(|s| s.features.clone()).collect();
        Fixture { model, stats, idd, ood }
    }

    fn quick_loop() -> LoopConfig {
        LoopConfig {
            discriminator_train: TrainConfig { epochs: 60, learning_rate: 5e-3, rng_seed: 11, ..TrainConfig::default() },
            ..LoopConfig::default()
        }
    }

    fn batches(f: &Fixture, count: usize, size: usize) -> Vec<Vec<Vector>> {
        (0..count)
            .map(|b| {
                let mut batch: Vec<Vector> = f.idd[b * size..(b + 1) * size].to_vec();
                batch.extend_from_slice(&f.ood[b * size..(b + 1) * size]);
                batch
            })
            .collect()
    }

    #[test]
    fn first_batch_pseudo_set_follows_hand_scores() {
        let f = fixture();
        let batch = vec![f.idd[0].clone(), f.ood[0].clone(), f.idd[1].clone(), f.ood[1].clone()];
        let mut state = StreamState::new(quick_loop()).unwrap();
        state.consume_batch(&batch, &f.model, &f.stats).unwrap();
        let hand: Vec<f64> = batch.iter().map(|x| score_sample(&f.model, &f.stats, x, None).unwrap().value).collect();
        let top = (0..4).max_by(|&a, &b| hand[a].total_cmp(&hand[b])).unwrap();
        let bottom = (0..4).min_by(|&a, &b| hand[a].total_cmp(&hand[b])).unwrap();
        let pseudo = state.pseudo.as_ref().unwrap();
        assert_eq!(pseudo.ood_indices, vec![top]);
        assert_eq!(pseudo.idd_indices, vec![bottom]);
        assert_eq!(state.score_values(), hand);
        assert!(state.selected_label.unwrap().frozen);
        assert_eq!(state.discriminator.as_ref().unwrap().generation, 1);
    }

    #[test]
    fn disabled_discriminator_scores_with_predictions() {
        let f = fixture();
        let cfg = LoopConfig { ablation_flags: AblationFlags { disable_discriminator: true, ..AblationFlags::default() }, ..quick_loop() };
        let mut state = StreamState::new(cfg).unwrap();
        for b in batches(&f, 3, 10) {
            state.consume_batch(&b, &f.model, &f.stats).unwrap();
            let plain: Vec<f64> = state.history.iter().map(|x| score_sample(&f.model, &f.stats, x, None).unwrap().value).collect();
            assert_eq!(state.score_values(), plain);
            assert!(state.scores.iter().all(|s| s.label_mode == LabelMode::Predicted));
            assert!(state.discriminator.is_none());
        }
    }

    #[test]
    fn runs_are_deterministic_and_history_grows() {
        let f = fixture();
        let run = || {
            let mut state = StreamState::new(quick_loop()).unwrap();
            let mut sizes = Vec::new();
            let mut labels = Vec::new();
            for b in batches(&f, 3, 10) {
                state.consume_batch(&b, &f.model, &f.stats).unwrap();
                sizes.push(state.history.len());
                labels.push(state.selected_label.unwrap());
                assert_eq!(state.scores.len(), state.history.len());
            }
            (state, sizes, labels)
        };
        let (a, sizes, labels) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert_eq!(sizes, vec![20, 40, 60]);
        assert!(labels.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(a.iteration, 3);
        // the selected label only appears on flagged samples
        for (s, v) in a.scores.iter().zip(&a.votes) {
            if s.label_mode == LabelMode::Selected {
                assert_eq!(*v, Some(true));
            }
        }
    }

    #[test]
    fn fixed_thresholds() {
        let f = fixture();
        let mut state = StreamState::new(LoopConfig { score_threshold_policy: ThresholdPolicy::Fixed(-1.0), ..quick_loop() }).unwrap();
        assert!(state.final_decisions().is_err());
        state.consume_batch(&batches(&f, 1, 10)[0], &f.model, &f.stats).unwrap();
        assert!(state.final_decisions().unwrap().iter().all(|&d| d));
        state.config.score_threshold_policy = ThresholdPolicy::Fixed(f64::MAX);
        assert!(state.final_decisions().unwrap().iter().all(|&d| !d));
        for s in &mut state.scores {
            s.value = 2.0;
        }
        state.config.score_threshold_policy = ThresholdPolicy::Fixed(2.0);
        assert!(state.final_decisions().unwrap().iter().all(|&d| !d));
    }

    #[test]
    fn tpr95_separates_far_stream() {
        let f = fixture();
        let mut state = StreamState::new(quick_loop()).unwrap();
        for b in batches(&f, 4, 25) {
            state.consume_batch(&b, &f.model, &f.stats).unwrap();
        }
        let decisions = state.final_decisions().unwrap();
        let truth: Vec<bool> = (0..4).flat_map(|_| std::iter::repeat_n(false, 25).chain(std::iter::repeat_n(true, 25))).collect();
        let hits = decisions.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(hits as f64 / truth.len() as f64 >= 0.95, "accuracy {}", hits as f64 / truth.len() as f64);
    }

    #[test]
    fn run_stream_trace() {
        let f = fixture();
        let (trace, state) = run_stream(&batches(&f, 1, 10), &f.model, &f.stats, &quick_loop(), &mut |_| Ok(Observation::default())).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].n_history, state.history.len());
        let text = trace_to_ndjson(&trace).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"selected_label\""));
        assert!(run_stream(&[], &f.model, &f.stats, &quick_loop(), &mut |_| Ok(Observation::default())).is_err());
    }

    #[test]
    fn random_pseudo_labels_are_seeded() {
        let f = fixture();
        let cfg = LoopConfig { ablation_flags: AblationFlags { random_pseudo_labels: true, ..AblationFlags::default() }, ..quick_loop() };
        let mut a = StreamState::new(cfg.clone()).unwrap();
        let mut b = StreamState::new(cfg).unwrap();
        let batch = &batches(&f, 1, 20)[0];
        a.consume_batch(batch, &f.model, &f.stats).unwrap();
        b.consume_batch(batch, &f.model, &f.stats).unwrap();
        assert_eq!(a.pseudo, b.pseudo);
        assert_eq!(a.pseudo.as_ref().unwrap().per_side(), 10);
    }
}
