//! Class-conditional gradient statistics with a tied precision matrix, and
//! the Mahalanobis novelty score built on them.
//!
//! Fitting uses ground-truth labels: `mu_c` is the mean gradient of class
//! `c`, and the tied covariance pools `(g - mu_c)(g - mu_c)^T` over every
//! training sample with divisor `N` (the whole training set size).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::gradients::{extract_gradient, GradientVector, LabelMode};
use crate::linalg::{quadratic_form, regularized_inverse, CovarianceAccumulator, SymMatrix, Vector};
use crate::nn::{argmax, LabeledSet, MlpModel};

pub const DEFAULT_EPSILON_SCALE: f64 = 1e-6;
pub const STATS_FORMAT: &str = "gradova.stats.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientStatistics {
    pub class_means: Vec<Vector>,
    pub tied_precision: SymMatrix,
    pub dimension: usize,
    pub per_class_counts: Vec<usize>,
    pub epsilon_scale: f64,
    pub include_bias: bool,
    /// 95th percentile (nearest rank) of the predicted-label scores of the
    /// training set; the reference for the tpr95 threshold.
    pub idd_score_q95: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyScore {
    pub value: f64,
    pub label_used: usize,
    pub label_mode: LabelMode,
}

/// Nearest-rank percentile of unsorted values (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl GradientStatistics {
    /// Fit means and tied precision from precomputed gradients with their
    /// ground-truth labels. `idd_score_q95` is left at zero.
    pub fn from_gradients(gradients: &[Vector], labels: &[usize], class_count: usize, epsilon_scale: f64, include_bias: bool) -> Result<Self> {
        if gradients.len() != labels.len() {
            return Err(Error::LengthMismatch { left: gradients.len(), right: labels.len() });
        }
        let dim = gradients.first().ok_or(Error::Empty("fit gradients"))?.dim();
        let mut sums = vec![vec![0.0; dim]; class_count];
        let mut counts = vec![0usize; class_count];
        for (g, &y) in gradients.iter().zip(labels) {
            if y >= class_count {
                return Err(Error::LabelOutOfRange { label: y, class_count });
            }
            ensure_len(dim, g.dim())?;
            counts[y] += 1;
            sums[y].iter_mut().zip(g.iter()).for_each(|(s, v)| *s += v);
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(empty));
        }
        let means: Vec<Vector> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| Vector(s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        let mut acc = CovarianceAccumulator::new(dim);
        for (g, &y) in gradients.iter().zip(labels) {
            acc.add_centered(&g.sub(&means[y])?)?;
        }
        let covariance = acc.finish_with_divisor(gradients.len());
        let tied_precision = regularized_inverse(&covariance, epsilon_scale)?;
        Ok(Self {
            class_means: means,
            tied_precision,
            dimension: dim,
            per_class_counts: counts,
            epsilon_scale,
            include_bias,
            idd_score_q95: 0.0,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_means.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = StatsDocument { format: STATS_FORMAT.to_string(), stats: self.clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: StatsDocument = serde_json::from_str(text)?;
        if doc.format != STATS_FORMAT {
            return Err(Error::Malformed(format!("unknown statistics format {:?}", doc.format)));
        }
        let s = doc.stats;
        if s.tied_precision.dim() != s.dimension || s.class_means.iter().any(|m| m.dim() != s.dimension) {
            return Err(Error::Malformed("statistics dimensions disagree".into()));
        }
        s.tied_precision.check_symmetric()?;
        Ok(s)
    }
}

#[derive(Serialize, Deserialize)]
struct StatsDocument {
    format: String,
    #[serde(flatten)]
    stats: GradientStatistics,
}

/// Fit statistics on the IDD training set using each sample's ground-truth
/// label for gradient extraction.
pub fn fit(model: &MlpModel, training: &LabeledSet, include_bias: bool, epsilon_scale: f64) -> Result<GradientStatistics> {
    if training.is_empty() {
        return Err(Error::Empty("IDD training set"));
    }
    let grads: Vec<Vector> = training
        .samples
        .par_iter()
        .zip(&training.labels)
        .map(|(x, &y)| extract_gradient(model, x, y, include_bias).map(|g| g.values))
        .collect::<Result<_>>()?;
    let mut stats = GradientStatistics::from_gradients(&grads, &training.labels, model.class_count, epsilon_scale, include_bias)?;
    let reference: Vec<f64> = training
        .samples
        .par_iter()
        .map(|x| score_sample(model, &stats, x, None).map(|s| s.value))
        .collect::<Result<_>>()?;
    stats.idd_score_q95 = percentile(&reference, 0.95);
    Ok(stats)
}

/// Mahalanobis distance of `gradient` to the mean of `class_for_mean`.
pub fn score(stats: &GradientStatistics, gradient: &GradientVector, class_for_mean: usize) -> Result<NoveltyScore> {
    let mean = stats
        .class_means
        .get(class_for_mean)
        .ok_or(Error::LabelOutOfRange { label: class_for_mean, class_count: stats.class_count() })?;
    let value = quadratic_form(&gradient.values, mean, &stats.tied_precision)?;
    Ok(NoveltyScore { value, label_used: gradient.source_label, label_mode: gradient.label_mode })
}

/// Score one sample. Without an override the predicted class is used; with
/// one, the override drives both the gradient and the mean index.
pub fn score_sample(model: &MlpModel, stats: &GradientStatistics, sample: &Vector, label_override: Option<usize>) -> Result<NoveltyScore> {
    let (logits, hidden) = model.forward_one(sample)?;
    let probs = crate::nn::softmax(&logits);
    let predicted = argmax(&probs);
    let label = match label_override {
        Some(c) if c >= stats.class_count() || c >= model.class_count => {
            return Err(Error::LabelOutOfRange { label: c, class_count: stats.class_count() });
        }
        Some(c) => c,
        None => predicted,
    };
    let values = crate::gradients::gradient_from_parts(&probs, &hidden, label, stats.include_bias);
    ensure_len(stats.dimension, values.dim())?;
    let label_mode = if label == predicted { LabelMode::Predicted } else { LabelMode::Selected };
    score(stats, &GradientVector { values, source_label: label, label_mode }, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use crate::nn::{train, LossKind, TrainConfig};
    use crate::rng::SeededRng;

    fn gv(values: Vec<f64>, label: usize) -> GradientVector {
        GradientVector { values: Vector(values), source_label: label, label_mode: LabelMode::Predicted }
    }

    #[test]
    fn single_sample_fit() {
        let g = Vector(vec![0.5, -1.5]);
        let s = GradientStatistics::from_gradients(std::slice::from_ref(&g), &[0], 1, 1e-6, false).unwrap();
        assert_eq!(s.class_means[0], g);
        assert!((s.tied_precision.get(0, 0) - 1e6).abs() < 1e-6);
        assert_eq!(s.tied_precision.get(0, 1), 0.0);
    }

    #[test]
    fn two_class_hand_expansion() {
        // class 0: (1,2), (3,2); class 1: (0,0), (0,4)
        let grads = [vec![1.0, 2.0], vec![3.0, 2.0], vec![0.0, 0.0], vec![0.0, 4.0]].map(Vector);
        let s = GradientStatistics::from_gradients(&grads, &[0, 0, 1, 1], 2, 1e-6, false).unwrap();
        assert_eq!(s.class_means[0].0, vec![2.0, 2.0]);
        assert_eq!(s.class_means[1].0, vec![0.0, 2.0]);
        // centred: (-1,0), (1,0), (0,-2), (0,2) -> sigma = diag(2, 8) / 4
        let eps = 1e-6 * (0.5 + 2.0) / 2.0;
        assert!((s.tied_precision.get(0, 0) - 1.0 / (0.5 + eps)).abs() < 1e-12);
        assert!((s.tied_precision.get(1, 1) - 1.0 / (2.0 + eps)).abs() < 1e-12);
        assert!(s.tied_precision.get(0, 1).abs() < 1e-12);
        assert_eq!(s.per_class_counts, vec![2, 2]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let grads = [Vector(vec![1.0])];
        assert!(matches!(GradientStatistics::from_gradients(&grads, &[0], 2, 1e-6, false), Err(Error::EmptyClass(1))));
        let drift = [Vector(vec![1.0]), Vector(vec![1.0, 2.0])];
        assert!(matches!(GradientStatistics::from_gradients(&drift, &[0, 1], 2, 1e-6, false), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn score_cases() {
        let mut s = GradientStatistics::from_gradients(&[Vector(vec![1.0, 1.0]), Vector(vec![-1.0, -1.0])], &[0, 0], 1, 1e-6, false).unwrap();
        assert_eq!(score(&s, &gv(vec![0.0, 0.0], 0), 0).unwrap().value, 0.0);
        s.tied_precision = SymMatrix::identity(2);
        assert_eq!(score(&s, &gv(vec![0.0, 1.0], 0), 0).unwrap().value, 1.0);
        assert!(score(&s, &gv(vec![0.0, 1.0], 0), 1).is_err());
        assert!(score(&s, &gv(vec![0.0], 0), 0).is_err());
    }

    #[test]
    fn score_matches_quadratic_form_oracle() {
        let mut rng = SeededRng::new(3);
        let grads: Vec<Vector> = (0..20).map(|_| Vector((0..4).map(|_| rng.normal()).collect())).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let s = GradientStatistics::from_gradients(&grads, &labels, 2, 1e-6, false).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let d: Vec<f64> = x.iter().zip(s.class_means[1].iter()).map(|(a, b)| a - b).collect();
        let mut naive = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                naive += d[i] * s.tied_precision.get(i, j) * d[j];
            }
        }
        let v = score(&s, &gv(x, 1), 1).unwrap().value;
        assert!((v - naive).abs() < 1e-12 * naive.max(1.0));
    }

    fn trained_blob_model() -> (MlpModel, LabeledSet, GradientStatistics) {
        let spec = crate::data::DatasetSpec::blobs(4, 6, 100, 6.0, 21);
        let data = crate::data::labeled_idd(&crate::data::generate(&spec).unwrap());
        let model = MlpModel::classifier(6, 4, 1).unwrap();
        let (model, _) = train(&model, &data, &TrainConfig { rng_seed: 2, ..TrainConfig::default() }, LossKind::Multiclass).unwrap();
        let stats = fit(&model, &data, false, DEFAULT_EPSILON_SCALE).unwrap();
        (model, data, stats)
    }

    #[test]
    fn fitted_blobs_behave() {
        let (model, data, stats) = trained_blob_model();
        // class means recomputed independently differ pairwise
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert!(stats.class_means[a].sub(&stats.class_means[b]).unwrap().norm() > 0.0);
            }
        }
        let mut mean_grad = vec![0.0; stats.dimension];
        for (x, &y) in data.samples.iter().zip(&data.labels).filter(|(_, &y)| y == 0) {
            let g = extract_gradient(&model, x, y, false).unwrap();
            mean_grad.iter_mut().zip(g.values.iter()).for_each(|(m, v)| *m += v / 100.0);
        }
        for (a, b) in mean_grad.iter().zip(stats.class_means[0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // sample nearest the class-0 centroid scores below the class 95th percentile
        let class0: Vec<&Vector> = data.samples.iter().zip(&data.labels).filter(|(_, &y)| y == 0).map(|(x, _)| x).collect();
        let centroid: Vec<f64> = (0..6).map(|i| class0.iter().map(|x| x[i]).sum::<f64>() / class0.len() as f64).collect();
        let nearest = class0
            .iter()
            .min_by(|a, b| {
                let da: f64 = a.iter().zip(&centroid).map(|(x, c)| (x - c).powi(2)).sum();
                let db: f64 = b.iter().zip(&centroid).map(|(x, c)| (x - c).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        let class_scores: Vec<f64> = class0.iter().map(|x| score_sample(&model, &stats, x, None).unwrap().value).collect();
        let near = score_sample(&model, &stats, nearest, None).unwrap();
        assert!(near.value <= percentile(&class_scores, 0.95));

        // override equal to the prediction changes nothing
        let pred = model.predict_class(nearest).unwrap();
        assert_eq!(score_sample(&model, &stats, nearest, Some(pred)).unwrap(), near);
        assert!(score_sample(&model, &stats, nearest, Some(4)).is_err());
    }

    #[test]
    fn far_point_with_selected_label_exceeds_training_scores() {
        let (model, data, stats) = trained_blob_model();
        let train_max = data
            .samples
            .iter()
            .map(|x| score_sample(&model, &stats, x, None).unwrap().value)
            .fold(0.0, f64::max);
        // 20 sigma from the origin along a direction away from every centroid
        let mut far = vec![0.0; 6];
        for m in &data.samples {
            far.iter_mut().zip(m.iter()).for_each(|(f, v)| *f -= v);
        }
        let norm = far.iter().map(|v| v * v).sum::<f64>().sqrt();
        let far = Vector(far.into_iter().map(|v| 20.0 * v / norm).collect());
        let probs = model.predict_proba(&far).unwrap();
        let least = probs.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let s = score_sample(&model, &stats, &far, Some(least)).unwrap();
        assert!(s.value > train_max, "{} <= {}", s.value, train_max);
        assert_eq!(s.label_mode, LabelMode::Selected);
    }

    #[test]
    fn json_round_trip() {
        let grads = [vec![1.0, 2.0], vec![3.0, 2.5], vec![0.1, 0.0], vec![0.0, 4.0]].map(Vector);
        let s = GradientStatistics::from_gradients(&grads, &[0, 0, 1, 1], 2, 1e-6, true).unwrap();
        let back = GradientStatistics::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }
}
