use gradova::binary_classifier::{BatchRule, InferenceMode};
use gradova::data::{DatasetSpec, OodPlacement, OodSpec, TaggedSample};
use gradova::eval::{
    evaluate_batches, evaluate_pure_batch, one_class_experiment, prepare, run_experiment, run_tagged_stream, BatchMode, ExperimentConfig, Setup,
};
use gradova::stream::StreamState;
use gradova::Error;

fn small(fraction: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::near_ood();
    cfg.data = DatasetSpec::blobs(3, 6, 120, 8.0, 0).with_ood(OodSpec {
        samples_per_mode: 360,
        fraction,
        placement: OodPlacement::Midpoint,
        ..OodSpec::default()
    });
    cfg.classifier.epochs = 40;
    cfg.classifier.learning_rate = 2e-3;
    cfg.stream.discriminator_train.epochs = 40;
    cfg.stream.discriminator_train.learning_rate = 2e-3;
    cfg.stream.batch_size_in = 20;
    cfg.stream.batch_size_ood = 20;
    cfg.batches = 4;
    cfg
}

fn trained(cfg: &ExperimentConfig) -> (Setup, StreamState) {
    let setup = prepare(cfg, 0).unwrap();
    let stream = setup.stream(cfg).unwrap();
    let run = run_tagged_stream(&setup, &stream, &setup.loop_config(&cfg.stream)).unwrap();
    (setup, run.state)
}

fn subset(test: &[TaggedSample], idd: usize, ood: usize) -> Vec<TaggedSample> {
    let mut out: Vec<TaggedSample> = test.iter().filter(|s| !s.ood_tag.is_ood()).take(idd).cloned().collect();
    out.extend(test.iter().filter(|s| s.ood_tag.is_ood()).take(ood).cloned());
    out
}

#[test]
fn pure_batches_partition_and_drop_the_remainder() {
    let (setup, state) = trained(&small(3.0));
    let test = subset(&setup.test, 16, 16);
    let r = evaluate_pure_batch(&state, &setup.model, &setup.stats, &test, 8, 4).unwrap();
    assert_eq!((r.n_negative, r.n_positive), (16, 16));
    assert_eq!(r.batch_mode, BatchMode::PureBatch(8));

    let ragged = subset(&setup.test, 21, 19);
    let r = evaluate_pure_batch(&state, &setup.model, &setup.stats, &ragged, 8, 4).unwrap();
    assert_eq!((r.n_negative, r.n_positive), (16, 16));

    let big = evaluate_pure_batch(&state, &setup.model, &setup.stats, &setup.test, 128, 4).unwrap();
    assert!(big.n_negative <= 360 && big.n_positive <= 360);
    assert_eq!(big.n_negative % 128, 0);
    assert!((0.0..=1.0).contains(&big.auroc) && (0.0..=1.0).contains(&big.aupr));

    assert!(matches!(
        evaluate_pure_batch(&state, &setup.model, &setup.stats, &subset(&setup.test, 7, 16), 8, 4),
        Err(Error::InsufficientSamples { needed: 8, available: 7 })
    ));
}

#[test]
fn batch_size_one_equals_per_sample_mode() {
    let (setup, state) = trained(&small(0.6));
    let pure = evaluate_pure_batch(&state, &setup.model, &setup.stats, &setup.test, 1, 9).unwrap();
    let per = evaluate_batches(&state, &setup.model, &setup.stats, &setup.test, 1, 9, InferenceMode::PerSample, BatchRule::Mean).unwrap();
    assert_eq!((pure.auroc, pure.aupr), (per.auroc, per.aupr));
}

#[test]
fn widely_separated_ood_is_ranked_perfectly() {
    let mut cfg = small(3.0);
    cfg.data.separation = 12.0;
    let (setup, state) = trained(&cfg);
    for b in [1, 8, 32] {
        let r = evaluate_pure_batch(&state, &setup.model, &setup.stats, &setup.test, b, 2).unwrap();
        assert_eq!(r.auroc, 1.0, "batch size {b}");
    }
}

#[test]
fn repeated_runs_report_spread() {
    let mut cfg = small(3.0);
    cfg.n_runs = 2;
    cfg.pure_batch_sizes = vec![8];
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert_ne!(report.runs[0].seeds, report.runs[1].seeds);
    assert_eq!(report.final_auroc.n, 2);
    let values: Vec<f64> = report.runs.iter().map(|r| r.summary.final_auroc.unwrap()).collect();
    assert_eq!(report.final_auroc.mean, (values[0] + values[1]) / 2.0);
    assert!((report.final_auroc.std - (values[0] - values[1]).abs() / 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(run_experiment(&cfg).unwrap(), report);
}

fn one_class_cfg(on_class: Option<usize>) -> ExperimentConfig {
    let mut cfg = small(3.0);
    cfg.one_class.data = DatasetSpec::blobs(3, 6, 200, 8.0, 0).with_ood(OodSpec {
        samples_per_mode: 200,
        fraction: 3.0,
        on_class,
        placement: OodPlacement::Midpoint,
        ..OodSpec::default()
    });
    cfg.one_class.batches = 4;
    cfg
}

#[test]
fn one_class_routes_far_ood_to_the_extra_class() {
    let r = one_class_experiment(&one_class_cfg(None), 0, 200, 200).unwrap();
    assert_eq!(r.per_class_single_head_accuracy.len(), 4);
    assert_eq!((r.memory_budget, r.ood_stream_size), (200, 200));
    assert!(r.per_class_single_head_accuracy[&3] >= 0.9, "{r:?}");
}

#[test]
fn ood_on_an_idd_centroid_cannot_be_learned() {
    let r = one_class_experiment(&one_class_cfg(Some(1)), 0, 200, 200).unwrap();
    assert!(r.per_class_single_head_accuracy[&3] <= 0.5, "{r:?}");
}

#[test]
fn budget_below_one_batch_is_rejected() {
    assert!(matches!(one_class_experiment(&one_class_cfg(None), 0, 3, 200), Err(Error::InvalidConfig(_))));
}
