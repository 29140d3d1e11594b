//! Learning an extra class through the detector: the IDD classifier keeps
//! its K heads and every sample the loop decides is OOD is assigned class K.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::protocol::{build_stream, prepare_with, run_tagged_stream, ExperimentConfig, RunSeeds};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneClassReport {
    /// Classes `0..K` are the IDD classes, `K` is the OOD class.
    pub per_class_single_head_accuracy: BTreeMap<usize, f64>,
    pub memory_budget: usize,
    pub ood_stream_size: usize,
    pub seed: u64,
}

/// Stream `memory_budget` IDD samples against `ood_stream` OOD samples over
/// `cfg.one_class.batches` batches and score the routed decisions on that
/// history.
pub fn one_class_experiment(cfg: &ExperimentConfig, run: usize, memory_budget: usize, ood_stream: usize) -> Result<OneClassReport> {
    cfg.validate()?;
    let oc = &cfg.one_class;
    if oc.data.ood.is_none() {
        return Err(Error::InvalidConfig("one_class.data.ood is required".into()));
    }
    let batches = oc.batches.max(1);
    let (n_in, n_ood) = (memory_budget / batches, ood_stream / batches);
    if n_in == 0 || n_ood == 0 {
        return Err(Error::InvalidConfig(format!("budget {memory_budget} / {ood_stream} is below one sample per batch over {batches} batches")));
    }
    let seeds = RunSeeds::for_run(cfg, run);
    let setup = prepare_with(&oc.data, cfg, seeds)?;
    let stream = build_stream(&setup.stream_pool, batches, n_in, n_ood, seeds.stream)?;
    let loop_cfg = setup.loop_config(&cfg.stream);
    let result = run_tagged_stream(&setup, &stream, &loop_cfg)?;
    let decisions = result.state.final_decisions()?;

    let k = setup.model.class_count;
    let mut hits = vec![0usize; k + 1];
    let mut totals = vec![0usize; k + 1];
    for (i, x) in result.state.history.iter().enumerate() {
        let truth = stream.class_labels[i].unwrap_or(k);
        let routed = if decisions[i] { k } else { setup.model.predict_class(x)? };
        totals[truth] += 1;
        hits[truth] += (routed == truth) as usize;
    }
    let per_class_single_head_accuracy =
        (0..=k).filter(|&c| totals[c] > 0).map(|c| (c, hits[c] as f64 / totals[c] as f64)).collect();
    Ok(OneClassReport {
        per_class_single_head_accuracy,
        memory_budget: n_in * batches,
        ood_stream_size: n_ood * batches,
        seed: seeds.root,
    })
}
