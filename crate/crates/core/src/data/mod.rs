//! Datasets: seeded synthetic generators and IDX/CSV readers.

mod csv_io;
mod idx;
mod synth;

use serde::{Deserialize, Serialize};

use crate::linalg::Vector;

pub use csv_io::{read_csv, write_csv};
pub use idx::{read_idx, read_idx_labels, read_idx_pair, write_idx_images, write_idx_labels, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use synth::{generate, generate_split, load, DatasetKind, DatasetSpec, OodPlacement, OodSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodTag {
    Idd,
    Ood,
}

impl OodTag {
    pub fn is_ood(self) -> bool {
        self == OodTag::Ood
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggedSample {
    pub features: Vector,
    pub class_label: Option<usize>,
    pub ood_tag: OodTag,
}

impl TaggedSample {
    pub fn idd(features: Vector, class_label: usize) -> Self {
        Self { features, class_label: Some(class_label), ood_tag: OodTag::Idd }
    }

    pub fn ood(features: Vector) -> Self {
        Self { features, class_label: None, ood_tag: OodTag::Ood }
    }
}

/// Split tagged samples into the IDD training view (features + labels).
pub fn labeled_idd(samples: &[TaggedSample]) -> crate::nn::LabeledSet {
    let mut set = crate::nn::LabeledSet::default();
    for s in samples.iter().filter(|s| s.ood_tag == OodTag::Idd) {
        if let Some(label) = s.class_label {
            set.samples.push(s.features.clone());
            set.labels.push(label);
        }
    }
    set
}
