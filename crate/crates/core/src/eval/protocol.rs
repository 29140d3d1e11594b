//! Experiment configuration, seeded setup and tagged stream runs.

use serde::{Deserialize, Serialize};

use super::metrics::{aupr, auroc, BatchMode, MetricReport};
use crate::binary_classifier::{BatchRule, InferenceMode};
use crate::data::{generate_split, labeled_idd, DatasetKind, DatasetSpec, OodPlacement, OodSpec, OodTag, TaggedSample};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::mahalanobis::{fit, score_sample, GradientStatistics, DEFAULT_EPSILON_SCALE};
use crate::nn::{train, LossKind, MlpModel, TrainConfig, TrainReport};
use crate::rng::{derive_seed, tags, SeededRng};
use crate::stream::{run_stream, LoopConfig, Observation, StreamState, TraceRecord};

/// Budgets and geometry for the one-class experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneClassConfig {
    pub data: DatasetSpec,
    pub budgets: Vec<usize>,
    pub ood_stream: usize,
    pub batches: usize,
}

impl Default for OneClassConfig {
    fn default() -> Self {
        Self {
            data: DatasetSpec::blobs(4, 8, 500, 6.0, 0).with_ood(OodSpec {
                samples_per_mode: 500,
                fraction: 3.0,
                placement: OodPlacement::Midpoint,
                ..OodSpec::default()
            }),
            budgets: vec![500, 1000],
            ood_stream: 500,
            batches: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; run `r` uses `seed + r` and derives every component seed
    /// from it.
    pub seed: u64,
    pub n_runs: usize,
    /// Generator for the IDD classes and the OOD source. Split 0 trains the
    /// classifier, split 1 feeds the stream, split 2 is held out.
    pub data: DatasetSpec,
    pub classifier: TrainConfig,
    pub include_bias: bool,
    pub epsilon_scale: f64,
    pub stream: LoopConfig,
    pub batches: usize,
    pub pure_batch_sizes: Vec<usize>,
    pub selection_fractions: Vec<f64>,
    pub one_class: OneClassConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::near_ood()
    }
}

impl ExperimentConfig {
    fn suite(fraction: f64) -> Self {
        Self {
            seed: 1,
            n_runs: 1,
            data: DatasetSpec::blobs(4, 8, 500, 6.0, 0).with_ood(OodSpec {
                samples_per_mode: 2000,
                fraction,
                placement: OodPlacement::Midpoint,
                ..OodSpec::default()
            }),
            classifier: TrainConfig::default(),
            include_bias: false,
            epsilon_scale: DEFAULT_EPSILON_SCALE,
            stream: LoopConfig::default(),
            batches: 10,
            pure_batch_sizes: vec![8, 32, 128],
            selection_fractions: vec![0.25, 0.5, 1.0],
            one_class: OneClassConfig::default(),
        }
    }

    /// OOD centred 0.6 separations off the midpoint of two classes.
    pub fn near_ood() -> Self {
        Self::suite(0.6)
    }

    pub fn far_ood() -> Self {
        Self::suite(3.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !matches!(self.data.kind, DatasetKind::Blobs | DatasetKind::Rings) {
            return bad("experiments need a synthetic data spec");
        }
        if self.data.ood.is_none() {
            return bad("data.ood is required");
        }
        self.data.validate()?;
        self.one_class.data.validate()?;
        self.classifier.validate()?;
        self.stream.validate()?;
        if self.n_runs == 0 || self.batches == 0 {
            return bad("n_runs and batches must be at least 1");
        }
        if !(self.epsilon_scale > 0.0 && self.epsilon_scale.is_finite()) {
            return bad("epsilon_scale must be positive");
        }
        if self.pure_batch_sizes.contains(&0) {
            return bad("pure batch sizes must be at least 1");
        }
        self.selection_fractions.iter().try_for_each(|&f| crate::binary_classifier::validate_fraction(f))
    }
}

/// Component seeds of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub root: u64,
    pub data: u64,
    pub classifier: u64,
    pub discriminator: u64,
    pub stream: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn derive(root: u64) -> Self {
        Self {
            root,
            data: derive_seed(root, tags::IDD_DATA),
            classifier: derive_seed(root, tags::CLASSIFIER),
            discriminator: derive_seed(root, tags::DISCRIMINATOR),
            stream: derive_seed(root, tags::STREAM),
            eval: derive_seed(root, tags::EVAL),
        }
    }

    pub fn for_run(cfg: &ExperimentConfig, run: usize) -> Self {
        Self::derive(cfg.seed.wrapping_add(run as u64))
    }
}

/// A trained classifier with its statistics and the evaluation splits.
#[derive(Clone, Debug)]
pub struct Setup {
    pub seeds: RunSeeds,
    pub spec: DatasetSpec,
    pub model: MlpModel,
    pub stats: GradientStatistics,
    pub classifier_report: TrainReport,
    pub stream_pool: Vec<TaggedSample>,
    pub test: Vec<TaggedSample>,
}

impl Setup {
    /// The stream config with this run's seeds filled in.
    pub fn loop_config(&self, base: &LoopConfig) -> LoopConfig {
        let mut cfg = base.clone();
        cfg.rng_seed = self.seeds.stream;
        cfg.discriminator_train.rng_seed = self.seeds.discriminator;
        cfg
    }
}

pub fn train_classifier(spec: &DatasetSpec, train_cfg: &TrainConfig, seed: u64) -> Result<(MlpModel, TrainReport)> {
    let data = labeled_idd(&generate_split(spec, 0)?);
    let class_count = data.labels.iter().max().map_or(0, |m| m + 1);
    let start = MlpModel::classifier(spec.dim, class_count, seed)?;
    let (model, report) = train(&start, &data, &TrainConfig { rng_seed: seed, ..train_cfg.clone() }, LossKind::Multiclass)?;
    if !model.is_finite() {
        return Err(Error::NonFinite("trained classifier".into()));
    }
    Ok((model, report))
}

pub fn prepare_with(data: &DatasetSpec, cfg: &ExperimentConfig, seeds: RunSeeds) -> Result<Setup> {
    let mut spec = data.clone();
    spec.seed = seeds.data;
    let (model, classifier_report) = train_classifier(&spec, &cfg.classifier, seeds.classifier)?;
    let stats = fit(&model, &labeled_idd(&generate_split(&spec, 0)?), cfg.include_bias, cfg.epsilon_scale)?;
    let stream_pool = generate_split(&spec, 1)?;
    let test = generate_split(&spec, 2)?;
    Ok(Setup { seeds, spec, model, stats, classifier_report, stream_pool, test })
}

pub fn prepare(cfg: &ExperimentConfig, run: usize) -> Result<Setup> {
    cfg.validate()?;
    prepare_with(&cfg.data, cfg, RunSeeds::for_run(cfg, run))
}

/// Unlabeled batches for the loop plus the truth tags of the concatenated
/// history, kept apart from the batches.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedStream {
    pub batches: Vec<Vec<Vector>>,
    pub tags: Vec<OodTag>,
    pub class_labels: Vec<Option<usize>>,
}

/// Shuffle the IDD and OOD pools, then deal `n_in + n_ood` samples per
/// batch and shuffle within each batch.
pub fn build_stream(pool: &[TaggedSample], batches: usize, n_in: usize, n_ood: usize, seed: u64) -> Result<TaggedStream> {
    if batches == 0 || n_in + n_ood == 0 {
        return Err(Error::InvalidConfig("a stream needs at least one non-empty batch".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut idd: Vec<&TaggedSample> = pool.iter().filter(|s| !s.ood_tag.is_ood()).collect();
    let mut ood: Vec<&TaggedSample> = pool.iter().filter(|s| s.ood_tag.is_ood()).collect();
    for (have, need) in [(idd.len(), batches * n_in), (ood.len(), batches * n_ood)] {
        if have < need {
            return Err(Error::InsufficientSamples { needed: need, available: have });
        }
    }
    rng.shuffle(&mut idd);
    rng.shuffle(&mut ood);
    let mut out = TaggedStream { batches: Vec::with_capacity(batches), tags: Vec::new(), class_labels: Vec::new() };
    for b in 0..batches {
        let mut members: Vec<&TaggedSample> = idd[b * n_in..(b + 1) * n_in].to_vec();
        members.extend_from_slice(&ood[b * n_ood..(b + 1) * n_ood]);
        rng.shuffle(&mut members);
        out.batches.push(members.iter().map(|s| s.features.clone()).collect());
        out.tags.extend(members.iter().map(|s| s.ood_tag));
        out.class_labels.extend(members.iter().map(|s| s.class_label));
    }
    Ok(out)
}

impl Setup {
    pub fn stream(&self, cfg: &ExperimentConfig) -> Result<TaggedStream> {
        build_stream(&self.stream_pool, cfg.batches, cfg.stream.batch_size_in, cfg.stream.batch_size_ood, self.seeds.stream)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub first_auroc: Option<f64>,
    pub final_auroc: Option<f64>,
    pub final_aupr: Option<f64>,
    pub selected_label: Option<usize>,
    /// Agreement of the final decisions with the truth tags.
    pub decision_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct StreamRun {
    pub trace: Vec<TraceRecord>,
    pub state: StreamState,
    pub summary: StreamSummary,
}

fn both_present(tags: &[OodTag]) -> bool {
    tags.iter().any(|t| t.is_ood()) && tags.iter().any(|t| !t.is_ood())
}

/// Run the loop, measuring AUROC/AUPR of the history after every iteration
/// and the discriminator's accuracy on the held-out split.
pub fn run_tagged_stream(setup: &Setup, stream: &TaggedStream, cfg: &LoopConfig) -> Result<StreamRun> {
    let held_x: Vec<Vector> = setup.test.iter().map(|s| s.features.clone()).collect();
    let held_y: Vec<bool> = setup.test.iter().map(|s| s.ood_tag.is_ood()).collect();
    let mut observer = |state: &StreamState| -> Result<Observation> {
        let tags = &stream.tags[..state.history.len()];
        let scores = state.score_values();
        let (auroc_v, aupr_v) = if both_present(tags) { (Some(auroc(&scores, tags)?), Some(aupr(&scores, tags)?)) } else { (None, None) };
        let disc_accuracy = match &state.discriminator {
            Some(d) if !held_x.is_empty() => Some(d.accuracy(&held_x, &held_y)?),
            _ => None,
        };
        Ok(Observation { auroc: auroc_v, aupr: aupr_v, disc_accuracy })
    };
    let (trace, state) = run_stream(&stream.batches, &setup.model, &setup.stats, cfg, &mut observer)?;
    let decisions = state.final_decisions()?;
    let hits = decisions.iter().zip(&stream.tags).filter(|(d, t)| **d == t.is_ood()).count();
    let last = trace.last().expect("at least one batch");
    let summary = StreamSummary {
        first_auroc: trace[0].auroc,
        final_auroc: last.auroc,
        final_aupr: last.aupr,
        selected_label: last.selected_label,
        decision_accuracy: hits as f64 / decisions.len() as f64,
    };
    Ok(StreamRun { trace, state, summary })
}

/// Score held-out samples partitioned into class-pure batches of
/// `batch_size` (seeded shuffle, remainder dropped). In `PureBatch` mode the
/// discriminator votes once per batch; in `PerSample` mode each member votes
/// on its own. Flagged samples are scored with the selected label.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_batches(
    state: &StreamState,
    model: &MlpModel,
    stats: &GradientStatistics,
    test: &[TaggedSample],
    batch_size: usize,
    seed: u64,
    mode: InferenceMode,
    rule: BatchRule,
) -> Result<MetricReport> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for tag in [OodTag::Idd, OodTag::Ood] {
        let mut members: Vec<&Vector> = test.iter().filter(|s| s.ood_tag == tag).map(|s| &s.features).collect();
        if members.len() < batch_size {
            return Err(Error::InsufficientSamples { needed: batch_size, available: members.len() });
        }
        rng.shuffle(&mut members);
        for chunk in members.chunks_exact(batch_size) {
            let batch: Vec<Vector> = chunk.iter().map(|&x| x.clone()).collect();
            let votes = match &state.discriminator {
                Some(d) if !state.config.ablation_flags.disable_discriminator => d.predict(&batch, mode, rule)?,
                _ => vec![false; batch.len()],
            };
            for (x, vote) in batch.iter().zip(votes) {
                let label = if vote { state.selected_label.map(|s| s.class_index) } else { None };
                scores.push(score_sample(model, stats, x, label)?.value);
                truth.push(tag);
            }
        }
    }
    let batch_mode = match mode {
        InferenceMode::PerSample => BatchMode::PerSample,
        InferenceMode::PureBatch => BatchMode::PureBatch(batch_size),
    };
    MetricReport::compute(&scores, &truth, batch_mode)
}

pub fn evaluate_pure_batch(
    state: &StreamState,
    model: &MlpModel,
    stats: &GradientStatistics,
    test: &[TaggedSample],
    batch_size: usize,
    seed: u64,
) -> Result<MetricReport> {
    evaluate_batches(state, model, stats, test, batch_size, seed, InferenceMode::PureBatch, BatchRule::Mean)
}

/// Mean OOD scores and AUROC with predicted labels against the selected
/// label applied to the truly-OOD samples only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreShiftReport {
    pub selected_label: usize,
    pub mean_ood_predicted: f64,
    pub mean_ood_selected: f64,
    pub auroc_predicted: f64,
    pub auroc_selected: f64,
}

pub fn score_shift(model: &MlpModel, stats: &GradientStatistics, test: &[TaggedSample]) -> Result<ScoreShiftReport> {
    let ood: Vec<Vector> = test.iter().filter(|s| s.ood_tag.is_ood()).map(|s| s.features.clone()).collect();
    let selected_label = crate::label_select::select_label(model, &ood)?.class_index;
    let truth: Vec<OodTag> = test.iter().map(|s| s.ood_tag).collect();
    let mut predicted = Vec::with_capacity(test.len());
    let mut routed = Vec::with_capacity(test.len());
    for s in test {
        let p = score_sample(model, stats, &s.features, None)?.value;
        predicted.push(p);
        routed.push(if s.ood_tag.is_ood() { score_sample(model, stats, &s.features, Some(selected_label))?.value } else { p });
    }
    let ood_mean = |v: &[f64]| v.iter().zip(&truth).filter(|(_, t)| t.is_ood()).map(|(x, _)| x).sum::<f64>() / ood.len() as f64;
    Ok(ScoreShiftReport {
        selected_label,
        mean_ood_predicted: ood_mean(&predicted),
        mean_ood_selected: ood_mean(&routed),
        auroc_predicted: auroc(&predicted, &truth)?,
        auroc_selected: auroc(&routed, &truth)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    MeanStd { mean, std, n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seeds: RunSeeds,
    pub summary: StreamSummary,
    pub trace: Vec<TraceRecord>,
    pub per_sample: MetricReport,
    pub pure_batch: Vec<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PureBatchSummary {
    pub batch_size: usize,
    pub auroc: MeanStd,
    pub aupr: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunReport>,
    pub final_auroc: MeanStd,
    pub final_aupr: MeanStd,
    pub per_sample_auroc: MeanStd,
    pub pure_batch: Vec<PureBatchSummary>,
}

pub fn run_once(cfg: &ExperimentConfig, run: usize) -> Result<RunReport> {
    let setup = prepare(cfg, run)?;
    let stream = setup.stream(cfg)?;
    let result = run_tagged_stream(&setup, &stream, &setup.loop_config(&cfg.stream))?;
    let eval_seed = setup.seeds.eval;
    let per_sample = evaluate_batches(&result.state, &setup.model, &setup.stats, &setup.test, 1, eval_seed, InferenceMode::PerSample, BatchRule::Mean)?;
    let pure_batch = cfg
        .pure_batch_sizes
        .iter()
        .map(|&b| evaluate_pure_batch(&result.state, &setup.model, &setup.stats, &setup.test, b, eval_seed))
        .collect::<Result<_>>()?;
    Ok(RunReport { seeds: setup.seeds, summary: result.summary, trace: result.trace, per_sample, pure_batch })
}

/// `n_runs` seeded repetitions with mean and sample standard deviation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let runs: Vec<RunReport> = (0..cfg.n_runs).map(|r| run_once(cfg, r)).collect::<Result<_>>()?;
    let collect = |f: &dyn Fn(&RunReport) -> Option<f64>| mean_std(&runs.iter().filter_map(f).collect::<Vec<_>>());
    let pure_batch = cfg
        .pure_batch_sizes
        .iter()
        .enumerate()
        .map(|(i, &b)| PureBatchSummary {
            batch_size: b,
            auroc: collect(&|r| Some(r.pure_batch[i].auroc)),
            aupr: collect(&|r| Some(r.pure_batch[i].aupr)),
        })
        .collect();
    Ok(ExperimentReport {
        final_auroc: collect(&|r| r.summary.final_auroc),
        final_aupr: collect(&|r| r.summary.final_aupr),
        per_sample_auroc: collect(&|r| Some(r.per_sample.auroc)),
        pure_batch,
        runs,
    })
}
