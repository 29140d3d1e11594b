//! The least-likely class over a set of suspected outliers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::nn::MlpModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedLabel {
    pub class_index: usize,
    pub estimated_from: usize,
    pub frozen: bool,
}

/// Argmin of the per-class probability sums; lowest index on ties.
pub fn select_label_from_probabilities(probabilities: &[Vector]) -> Result<SelectedLabel> {
    let first = probabilities.first().ok_or(Error::Empty("predicted-OOD samples"))?;
    let mut sums = vec![0.0; first.dim()];
    for p in probabilities {
        if p.dim() != sums.len() {
            return Err(Error::DimensionMismatch { expected: sums.len(), actual: p.dim() });
        }
        sums.iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
    }
    let mut best = 0;
    for (c, &s) in sums.iter().enumerate() {
        if s < sums[best] {
            best = c;
        }
    }
    Ok(SelectedLabel { class_index: best, estimated_from: probabilities.len(), frozen: true })
}

pub fn select_label(model: &MlpModel, predicted_ood: &[Vector]) -> Result<SelectedLabel> {
    if predicted_ood.is_empty() {
        return Err(Error::Empty("predicted-OOD samples"));
    }
    let probs: Vec<Vector> = predicted_ood.iter().map(|x| model.predict_proba(x)).collect::<Result<_>>()?;
    select_label_from_probabilities(&probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{train, LossKind, TrainConfig};
    use crate::rng::SeededRng;

    fn v(x: &[f64]) -> Vector {
        Vector(x.to_vec())
    }

    #[test]
    fn single_sample_argmin() {
        assert_eq!(select_label_from_probabilities(&[v(&[0.7, 0.2, 0.1])]).unwrap().class_index, 2);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let s = select_label_from_probabilities(&[v(&[0.5, 0.5, 0.0]), v(&[0.0, 0.5, 0.5])]).unwrap();
        assert_eq!(s, SelectedLabel { class_index: 0, estimated_from: 2, frozen: true });
    }

    #[test]
    fn empty_is_an_error() {
        let model = MlpModel::classifier(2, 3, 0).unwrap();
        assert!(matches!(select_label(&model, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn trained_model_matches_exhaustive_sums() {
        let spec = crate::data::DatasetSpec::blobs(4, 5, 60, 5.0, 8);
        let data = crate::data::labeled_idd(&crate::data::generate(&spec).unwrap());
        let (model, _) = train(
            &MlpModel::classifier(5, 4, 3).unwrap(),
            &data,
            &TrainConfig { epochs: 40, rng_seed: 1, ..TrainConfig::default() },
            LossKind::Multiclass,
        )
        .unwrap();
        let mut rng = SeededRng::new(12);
        for trial in 0..5 {
            let xs: Vec<Vector> = (0..50).map(|_| Vector((0..5).map(|_| 4.0 * rng.normal()).collect())).collect();
            let chosen = select_label(&model, &xs).unwrap().class_index;
            let class_sum = |c: usize| xs.iter().map(|x| model.predict_proba(x).unwrap()[c]).sum::<f64>();
            for c in 0..4 {
                assert!(class_sum(chosen) <= class_sum(c), "trial {trial}");
            }

            let mut shuffled = xs.clone();
            rng.shuffle(&mut shuffled);
            assert_eq!(select_label(&model, &shuffled).unwrap().class_index, chosen);
            let doubled: Vec<Vector> = xs.iter().chain(&xs).cloned().collect();
            assert_eq!(select_label(&model, &doubled).unwrap().class_index, chosen);
        }
    }

    #[test]
    fn never_the_most_likely_class() {
        let mut rng = SeededRng::new(5);
        for _ in 0..200 {
            let probs: Vec<Vector> = (0..3).map(|_| crate::nn::softmax(&(0..4).map(|_| rng.normal()).collect::<Vec<_>>())).collect();
            let s = select_label_from_probabilities(&probs).unwrap().class_index;
            let mut sums = [0.0; 4];
            for p in &probs {
                sums.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
            }
            assert_ne!(s, crate::nn::argmax(&sums));
        }
    }
}
