//! Metrics and experiment protocols.

mod ablation;
mod metrics;
mod one_class;
mod protocol;
mod report;

pub use ablation::{run_ablation, AblationArm, AblationKind, AblationReport};
pub use metrics::{aupr, auroc, BatchMode, MetricReport};
pub use one_class::{one_class_experiment, OneClassReport};
pub use protocol::{
    build_stream, evaluate_batches, evaluate_pure_batch, mean_std, prepare, prepare_with, run_experiment, run_once, run_tagged_stream,
    score_shift, train_classifier, ExperimentConfig, ExperimentReport, MeanStd, OneClassConfig, PureBatchSummary, RunReport, RunSeeds,
    ScoreShiftReport, Setup, StreamRun, StreamSummary, TaggedStream,
};
pub use report::{fmt_opt, format_table, trace_csv};
