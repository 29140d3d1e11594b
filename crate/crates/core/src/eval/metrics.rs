//! Threshold-free ranking metrics with OOD as the positive class.

use serde::{Deserialize, Serialize};

use crate::data::OodTag;
use crate::error::{Error, Result};

fn check(scores: &[f64], truth: &[OodTag]) -> Result<(usize, usize)> {
    if scores.len() != truth.len() {
        return Err(Error::LengthMismatch { left: scores.len(), right: truth.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let pos = truth.iter().filter(|t| t.is_ood()).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// `P(score_ood > score_idd) + 0.5 P(tie)` via the rank-sum statistic.
pub fn auroc(scores: &[f64], truth: &[OodTag]) -> Result<f64> {
    let (pos, neg) = check(scores, truth)?;
    // walk groups from the lowest score up: each OOD member beats every IDD
    // sample below its group and ties with the IDD members inside it
    let mut idd_below = 0usize;
    let mut twice_wins = 0u128;
    for group in tie_groups(scores).iter().rev() {
        let o = group.iter().filter(|&&i| truth[i].is_ood()).count();
        let d = group.len() - o;
        twice_wins += (o as u128) * (2 * idd_below as u128 + d as u128);
        idd_below += d;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Area under the precision-recall staircase: the sum of precision times
/// the recall increment over every distinct threshold, descending.
pub fn aupr(scores: &[f64], truth: &[OodTag]) -> Result<f64> {
    let (pos, _) = check(scores, truth)?;
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    for group in tie_groups(scores) {
        let hits = group.iter().filter(|&&i| truth[i].is_ood()).count();
        tp += hits;
        seen += group.len();
        area += (tp as f64 / seen as f64) * (hits as f64 / pos as f64);
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "size")]
pub enum BatchMode {
    #[default]
    PerSample,
    PureBatch(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub aupr: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub batch_mode: BatchMode,
}

impl MetricReport {
    pub fn compute(scores: &[f64], truth: &[OodTag], batch_mode: BatchMode) -> Result<Self> {
        let (n_positive, n_negative) = check(scores, truth)?;
        Ok(Self { auroc: auroc(scores, truth)?, aupr: aupr(scores, truth)?, n_positive, n_negative, batch_mode })
    }
}
