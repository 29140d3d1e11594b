use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{OodTag, TaggedSample};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::rng::{derive_seed, SeededRng};

const GEOMETRY_TAG: u64 = 0x6765_6f6d;
const SAMPLES_TAG: u64 = 0x7361_6d70;
const OOD_SAMPLES_TAG: u64 = 0x6f6f_6473;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Rings,
    IdxFile,
    CsvFile,
}

/// Where the OOD source sits relative to the IDD classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSpec {
    #[serde(default = "default_modes")]
    pub modes: usize,
    pub samples_per_mode: usize,
    /// Radius of the OOD centroids as a multiple of the IDD centroid radius
    /// (0.6 = near-OOD hard case, 3.0 = far-OOD).
    pub fraction: f64,
    /// Place the single OOD mode exactly on this IDD class centroid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_class: Option<usize>,
    #[serde(default)]
    pub placement: OodPlacement,
}

/// Direction of each OOD centroid from the origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodPlacement {
    /// A seeded random unit direction.
    #[default]
    Random,
    /// The bisector of two neighbouring class directions (mode `m` uses
    /// classes `m` and `m + 1`, modulo `class_count`).
    Between,
    /// Offset from the centroid of class `m mod class_count` by
    /// `fraction * separation` along a seeded direction orthogonal to every
    /// class direction (when `dim > class_count`), so the nearest IDD
    /// centroid is exactly that far away.
    Offset,
    /// Like `Offset`, anchored at the midpoint of classes `m` and `m + 1`.
    Midpoint,
}

fn default_modes() -> usize {
    1
}

impl Default for OodSpec {
    fn default() -> Self {
        Self { modes: 1, samples_per_mode: 100, fraction: 3.0, on_class: None, placement: OodPlacement::Random }
    }
}

/// Description of a dataset: either a seeded generator or a file.
///
/// Blobs: the `class_count` centroids are `separation / sqrt(2)` times a set
/// of seeded random orthonormal directions, so every pair of centroids is
/// exactly `separation` apart; samples add unit isotropic noise.
/// Rings: class `c` lies on a circle of radius `(c + 1) * separation` in the
/// plane spanned by the first two seeded directions, with unit noise in every
/// coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub class_count: usize,
    #[serde(default)]
    pub dim: usize,
    #[serde(default)]
    pub samples_per_class: usize,
    #[serde(default)]
    pub separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// IDX label file paired with `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    #[serde(default)]
    pub has_label: bool,
}

impl DatasetSpec {
    pub fn blobs(class_count: usize, dim: usize, samples_per_class: usize, separation: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Blobs,
            class_count,
            dim,
            samples_per_class,
            separation,
            ood: None,
            seed,
            path: None,
            label_path: None,
            has_label: false,
        }
    }

    pub fn with_ood(mut self, ood: OodSpec) -> Self {
        self.ood = Some(ood);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        match self.kind {
            DatasetKind::Blobs | DatasetKind::Rings => {
                if self.class_count == 0 || self.dim == 0 || self.samples_per_class == 0 {
                    return bad("class_count, dim and samples_per_class must be at least 1");
                }
                if !(self.separation >= 0.0 && self.separation.is_finite()) {
                    return bad("separation must be a finite non-negative number");
                }
                let needed = if self.kind == DatasetKind::Blobs { self.class_count } else { 2 };
                if needed > self.dim {
                    return bad("dim must be at least class_count for blobs and at least 2 for rings");
                }
                if let Some(ood) = &self.ood {
                    if ood.modes == 0 || ood.samples_per_mode == 0 {
                        return bad("ood.modes and ood.samples_per_mode must be at least 1");
                    }
                    if !(ood.fraction >= 0.0 && ood.fraction.is_finite()) {
                        return bad("ood.fraction must be a finite non-negative number");
                    }
                    if ood.on_class.is_some_and(|c| c >= self.class_count) {
                        return bad("ood.on_class is out of range");
                    }
                }
                Ok(())
            }
            DatasetKind::IdxFile | DatasetKind::CsvFile => {
                if self.path.is_none() {
                    return bad("file datasets need a path");
                }
                Ok(())
            }
        }
    }

    /// IDD centroid radius.
    fn radius(&self) -> f64 {
        self.separation / std::f64::consts::SQRT_2
    }
}

/// Seeded orthonormal directions via Gram-Schmidt on Gaussian draws.
fn orthonormal_directions(rng: &mut SeededRng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    orthonormal_directions_from(rng, &[], count, dim)
}

fn orthonormal_directions_from(rng: &mut SeededRng, start: &[Vec<f64>], count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = start.to_vec();
    while basis.len() < count {
        let mut v = rng.direction(dim);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// One seeded unit direction orthogonal to the given orthonormal set.
fn orthonormal_directions_after(rng: &mut SeededRng, basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut all = basis.to_vec();
    let n = all.len();
    all.extend(orthonormal_directions_from(rng, &all, n + 1, dim).into_iter().skip(n));
    all.pop().expect("one direction added")
}

struct Geometry {
    centers: Vec<Vec<f64>>,
    ring_plane: Vec<Vec<f64>>,
    ood_centers: Vec<Vec<f64>>,
}

fn geometry(spec: &DatasetSpec) -> Geometry {
    let mut rng = SeededRng::new(derive_seed(spec.seed, GEOMETRY_TAG));
    let radius = spec.radius();
    let (centers, ring_plane): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match spec.kind {
        DatasetKind::Rings => (Vec::new(), orthonormal_directions(&mut rng, 2, spec.dim)),
        _ => {
            let dirs = orthonormal_directions(&mut rng, spec.class_count, spec.dim);
            (dirs.into_iter().map(|d| d.into_iter().map(|x| x * radius).collect()).collect(), Vec::new())
        }
    };
    let ood_centers = match &spec.ood {
        None => Vec::new(),
        Some(ood) => match ood.on_class {
            Some(c) if spec.kind == DatasetKind::Blobs => vec![centers[c].clone(); ood.modes],
            _ => (0..ood.modes)
                .map(|m| {
                    let r = ood.fraction * if spec.kind == DatasetKind::Rings { spec.separation } else { radius };
                    let dir = match ood.placement {
                        OodPlacement::Between if spec.kind == DatasetKind::Blobs && spec.class_count >= 2 => {
                            let (a, b) = (&centers[m % spec.class_count], &centers[(m + 1) % spec.class_count]);
                            let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                            let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
                            sum.into_iter().map(|x| x / norm).collect()
                        }
                        OodPlacement::Offset | OodPlacement::Midpoint if spec.kind == DatasetKind::Blobs => {
                            let mut basis: Vec<Vec<f64>> =
                                centers.iter().map(|c| c.iter().map(|x| x / radius.max(f64::MIN_POSITIVE)).collect()).collect();
                            let free = spec.dim > spec.class_count && radius > 0.0;
                            if !free {
                                basis.clear();
                            }
                            let u = orthonormal_directions_after(&mut rng, &basis, spec.dim);
                            let step = ood.fraction * spec.separation;
                            let k = spec.class_count;
                            let anchor: Vec<f64> = if ood.placement == OodPlacement::Midpoint && k >= 2 {
                                centers[m % k].iter().zip(&centers[(m + 1) % k]).map(|(a, b)| 0.5 * (a + b)).collect()
                            } else {
                                centers[m % k].clone()
                            };
                            return anchor.iter().zip(&u).map(|(c, d)| c + step * d).collect();
                        }
                        _ => rng.direction(spec.dim),
                    };
                    dir.into_iter().map(|x| x * r).collect()
                })
                .collect(),
        },
    };
    Geometry { centers, ring_plane, ood_centers }
}

/// Generate split 0 of a synthetic spec.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<TaggedSample>> {
    generate_split(spec, 0)
}

/// Generate one split: the geometry depends only on `spec.seed`, the noise on
/// `(spec.seed, split)`. IDD samples come first, class by class, then OOD.
pub fn generate_split(spec: &DatasetSpec, split: u64) -> Result<Vec<TaggedSample>> {
    spec.validate()?;
    if !matches!(spec.kind, DatasetKind::Blobs | DatasetKind::Rings) {
        return Err(Error::InvalidConfig("generate needs a blobs or rings spec; use load for files".into()));
    }
    let geo = geometry(spec);
    let mut rng = SeededRng::new(derive_seed(spec.seed, SAMPLES_TAG.wrapping_add(split)));
    let noise = |rng: &mut SeededRng, center: &[f64]| Vector(center.iter().map(|m| m + rng.normal()).collect());
    let mut out = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    for c in 0..spec.class_count {
        for _ in 0..spec.samples_per_class {
            let features = match spec.kind {
                DatasetKind::Rings => {
                    let angle = std::f64::consts::TAU * rng.unit();
                    let r = (c + 1) as f64 * spec.separation;
                    let center: Vec<f64> = (0..spec.dim)
                        .map(|i| r * (angle.cos() * geo.ring_plane[0][i] + angle.sin() * geo.ring_plane[1][i]))
                        .collect();
                    noise(&mut rng, &center)
                }
                _ => noise(&mut rng, &geo.centers[c]),
            };
            out.push(TaggedSample::idd(features, c));
        }
    }
    if let Some(ood) = &spec.ood {
        let mut ood_rng = SeededRng::new(derive_seed(spec.seed, OOD_SAMPLES_TAG.wrapping_add(split)));
        for center in &geo.ood_centers {
            for _ in 0..ood.samples_per_mode {
                out.push(TaggedSample { features: noise(&mut ood_rng, center), class_label: None, ood_tag: OodTag::Ood });
            }
        }
    }
    Ok(out)
}

/// Load any dataset kind: generators produce split 0, files are read.
pub fn load(spec: &DatasetSpec) -> Result<Vec<TaggedSample>> {
    spec.validate()?;
    match spec.kind {
        DatasetKind::Blobs | DatasetKind::Rings => generate(spec),
        DatasetKind::IdxFile => {
            let path = spec.path.as_ref().expect("validated");
            match &spec.label_path {
                Some(labels) => super::read_idx_pair(path, labels),
                None => super::read_idx(path),
            }
        }
        DatasetKind::CsvFile => super::read_csv(spec.path.as_ref().expect("validated"), spec.has_label),
    }
}
