//! Paired loop runs that switch one component off or change one knob.

use serde::{Deserialize, Serialize};

use super::protocol::{run_tagged_stream, Setup, TaggedStream};
use crate::error::Result;
use crate::stream::{AblationFlags, LoopConfig, TraceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// (a) with and without the discriminator.
    Discriminator,
    /// (b) ranked pseudo labels against random ones.
    PseudoLabels,
    /// (c) one run per selection fraction.
    SelectionFraction,
    /// (d) fresh discriminator each iteration against warm starts.
    Reinit,
}

impl AblationKind {
    pub fn from_letter(letter: &str) -> Option<Self> {
        match letter {
            "a" => Some(Self::Discriminator),
            "b" => Some(Self::PseudoLabels),
            "c" => Some(Self::SelectionFraction),
            "d" => Some(Self::Reinit),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub first_auroc: Option<f64>,
    pub final_auroc: Option<f64>,
    pub final_aupr: Option<f64>,
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub seed: u64,
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

fn arms_for(kind: AblationKind, base: &LoopConfig, fractions: &[f64]) -> Vec<(String, LoopConfig)> {
    let with = |flags: AblationFlags| LoopConfig { ablation_flags: flags, ..base.clone() };
    let on = base.ablation_flags;
    match kind {
        AblationKind::Discriminator => vec![
            ("with_discriminator".into(), base.clone()),
            ("without_discriminator".into(), with(AblationFlags { disable_discriminator: true, ..on })),
        ],
        AblationKind::PseudoLabels => vec![
            ("ranked".into(), base.clone()),
            ("random_pseudo_labels".into(), with(AblationFlags { random_pseudo_labels: true, ..on })),
        ],
        AblationKind::SelectionFraction => fractions
            .iter()
            .map(|&f| (format!("fraction_{f}"), LoopConfig { selection_fraction: f, ..base.clone() }))
            .collect(),
        AblationKind::Reinit => vec![
            ("reinit".into(), base.clone()),
            ("no_reinit".into(), with(AblationFlags { no_reinit: true, ..on })),
        ],
    }
}

/// Every arm sees the same setup and the same stream.
pub fn run_ablation(setup: &Setup, stream: &TaggedStream, base: &LoopConfig, kind: AblationKind, fractions: &[f64]) -> Result<AblationReport> {
    let base = setup.loop_config(base);
    let arms = arms_for(kind, &base, fractions)
        .into_iter()
        .map(|(name, cfg)| {
            let run = run_tagged_stream(setup, stream, &cfg)?;
            Ok(AblationArm {
                name,
                first_auroc: run.summary.first_auroc,
                final_auroc: run.summary.final_auroc,
                final_aupr: run.summary.final_aupr,
                trace: run.trace,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport { kind, seed: setup.seeds.root, arms })
}
