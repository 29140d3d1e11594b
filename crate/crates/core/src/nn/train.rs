use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::rng::SeededRng;

use super::backprop::{loss_and_grad, ForwardCache, Gradients, LossKind};
use super::optim::{Adam, Optimizer, OptimizerKind, Sgd};
use super::{MlpModel, NormStats, BATCH_NORM_MOMENTUM};

/// How discriminator minibatches are assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchComposition {
    /// Each minibatch holds equal numbers of IDD and OOD samples and is
    /// normalised as one batch.
    #[default]
    Mixed,
    /// IDD and OOD halves are forwarded as separate pure batches, each with
    /// its own batch-norm statistics.
    Pure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub rng_seed: u64,
    pub optimizer: OptimizerKind,
    pub batch_composition: BatchComposition,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epochs: 200,
            minibatch_size: 32,
            rng_seed: 0,
            optimizer: OptimizerKind::Adam,
            batch_composition: BatchComposition::Mixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // a zero learning rate is accepted: it freezes the parameters
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.minibatch_size == 0 {
            return Err(Error::InvalidConfig("epochs and minibatch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> Box<dyn Optimizer> {
        match self.optimizer {
            OptimizerKind::Adam => Box::new(Adam::new(self.learning_rate, self.adam_beta1, self.adam_beta2)),
            OptimizerKind::Sgd => Box::new(Sgd { learning_rate: self.learning_rate }),
        }
    }
}

/// Samples with integer labels. In discriminator mode 0 = IDD, 1 = OOD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub samples: Vec<Vector>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(samples: Vec<Vector>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::LengthMismatch { left: samples.len(), right: labels.len() });
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub losses: Vec<f64>,
    /// Set when a discriminator class consists of identical vectors.
    pub degenerate: bool,
}

/// Train `model` in place of a copy and return it with its loss trace.
/// Shuffling draws from `cfg.rng_seed`, so equal inputs give equal models.
pub fn train(model: &MlpModel, data: &LabeledSet, cfg: &TrainConfig, loss: LossKind) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if data.labels.len() != data.samples.len() {
        return Err(Error::LengthMismatch { left: data.samples.len(), right: data.labels.len() });
    }
    let limit = if loss == LossKind::Discriminator { 2 } else { model.class_count };
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= limit) {
        return Err(Error::LabelOutOfRange { label: bad, class_count: limit });
    }
    for s in &data.samples {
        crate::error::ensure_len(model.input_dim(), s.dim())?;
    }

    let mut model = model.clone();
    let mut optimizer = cfg.optimizer();
    let mut rng = SeededRng::new(cfg.rng_seed);
    let mut report = TrainReport::default();

    match loss {
        LossKind::Multiclass => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            for epoch in 0..cfg.epochs {
                rng.shuffle(&mut order);
                let mut total = 0.0;
                let mut batches = 0;
                for chunk in order.chunks(cfg.minibatch_size) {
                    total += step(&mut model, optimizer.as_mut(), data, &[chunk], loss)?;
                    batches += 1;
                }
                push_epoch(&mut report, total / batches as f64, epoch)?;
            }
        }
        LossKind::Discriminator => {
            let mut idd: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == 0).collect();
            let mut ood: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == 1).collect();
            if idd.is_empty() || ood.is_empty() {
                return Err(Error::SingleClass);
            }
            report.degenerate = all_identical(data, &idd) || all_identical(data, &ood);
            let half = (cfg.minibatch_size / 2).max(1);
            let steps = idd.len().max(ood.len()).div_ceil(half);
            for epoch in 0..cfg.epochs {
                rng.shuffle(&mut idd);
                rng.shuffle(&mut ood);
                let mut total = 0.0;
                for s in 0..steps {
                    let pick = |ids: &[usize]| -> Vec<usize> {
                        let start = s * half;
                        let take = half.min(ids.len());
                        (0..take).map(|k| ids[(start + k) % ids.len()]).collect()
                    };
                    let (bi, bo) = (pick(&idd), pick(&ood));
                    total += match cfg.batch_composition {
                        BatchComposition::Mixed => {
                            let joined: Vec<usize> = bi.iter().chain(&bo).copied().collect();
                            step(&mut model, optimizer.as_mut(), data, &[&joined], loss)?
                        }
                        BatchComposition::Pure => step(&mut model, optimizer.as_mut(), data, &[&bi, &bo], loss)?,
                    };
                }
                push_epoch(&mut report, total / steps as f64, epoch)?;
            }
        }
    }
    Ok((model, report))
}

fn push_epoch(report: &mut TrainReport, loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
    }
    report.losses.push(loss);
    Ok(())
}

fn all_identical(data: &LabeledSet, ids: &[usize]) -> bool {
    ids.len() > 1 && ids.iter().all(|&i| data.samples[i] == data.samples[ids[0]])
}

/// One optimizer step over one or more separately normalised groups; the
/// group losses and gradients are summed.
fn step(model: &mut MlpModel, optimizer: &mut dyn Optimizer, data: &LabeledSet, groups: &[&[usize]], loss: LossKind) -> Result<f64> {
    let mut total_loss = 0.0;
    let mut grads: Option<Gradients> = None;
    for ids in groups {
        let batch: Vec<Vector> = ids.iter().map(|&i| data.samples[i].clone()).collect();
        let labels: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
        let cache = model.forward_cached(&batch, NormStats::Batch);
        let (value, dlogits) = loss_and_grad(cache.logits(), &labels, loss)?;
        total_loss += value;
        let g = model.backward(&cache, dlogits);
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
        update_running_stats(model, &cache);
    }
    if let Some(g) = grads {
        optimizer.step(model, &g);
    }
    Ok(total_loss)
}

fn update_running_stats(model: &mut MlpModel, cache: &ForwardCache) {
    for (layer, lc) in model.layers.iter_mut().zip(&cache.layers) {
        let (Some(bn), Some(nc)) = (layer.batch_norm.as_mut(), lc.norm.as_ref()) else {
            continue;
        };
        let n = lc.input.rows as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..bn.running_mean.len() {
            bn.running_mean[c] = (1.0 - BATCH_NORM_MOMENTUM) * bn.running_mean[c] + BATCH_NORM_MOMENTUM * nc.mean[c];
            bn.running_var[c] = (1.0 - BATCH_NORM_MOMENTUM) * bn.running_var[c] + BATCH_NORM_MOMENTUM * nc.var[c] * unbias;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{argmax, Mode};

    fn blobs(seed: u64, centers: &[Vec<f64>], per_class: usize) -> LabeledSet {
        let mut rng = SeededRng::new(seed);
        let mut set = LabeledSet::default();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                set.samples.push(Vector(center.iter().map(|m| m + rng.normal()).collect()));
                set.labels.push(c);
            }
        }
        set
    }

    fn accuracy(model: &MlpModel, data: &LabeledSet) -> f64 {
        let out = model.forward(&data.samples, Mode::Eval).unwrap();
        let hits = out.logits.iter().zip(&data.labels).filter(|(z, &y)| argmax(z) == y).count();
        hits as f64 / data.len() as f64
    }

    /// Batch gradient-descent logistic regression, used to confirm separability.
    fn logistic_regression_accuracy(data: &LabeledSet) -> f64 {
        let dim = data.samples[0].dim();
        let mut w = vec![0.0; dim + 1];
        for _ in 0..2000 {
            let mut g = vec![0.0; dim + 1];
            for (x, &y) in data.samples.iter().zip(&data.labels) {
                let z = w[dim] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let err = crate::nn::sigmoid(z) - y as f64;
                for i in 0..dim {
                    g[i] += err * x[i];
                }
                g[dim] += err;
            }
            for i in 0..=dim {
                w[i] -= 0.1 * g[i] / data.len() as f64;
            }
        }
        let hits = data
            .samples
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| {
                let z = w[dim] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                (z > 0.0) as usize == y
            })
            .count();
        hits as f64 / data.len() as f64
    }

    fn nearest_centroid_accuracy(train: &LabeledSet, test: &LabeledSet, classes: usize) -> f64 {
        let dim = train.samples[0].dim();
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (x, &y) in train.samples.iter().zip(&train.labels) {
            counts[y] += 1;
            for i in 0..dim {
                sums[y][i] += x[i];
            }
        }
        let hits = test
            .samples
            .iter()
            .zip(&test.labels)
            .filter(|(x, &y)| {
                let d: Vec<f64> = (0..classes)
                    .map(|c| (0..dim).map(|i| (x[i] - sums[c][i] / counts[c] as f64).powi(2)).sum::<f64>())
                    .collect();
                argmax(&d.iter().map(|v| -v).collect::<Vec<_>>()) == y
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn separable_two_class_blobs() {
        let data = blobs(1, &[vec![-3.0, 0.0], vec![3.0, 0.0]], 100);
        assert!(logistic_regression_accuracy(&data) >= 0.99);
        let model = MlpModel::classifier(2, 2, 3).unwrap();
        let cfg = TrainConfig { rng_seed: 4, ..TrainConfig::default() };
        let (trained, report) = train(&model, &data, &cfg, LossKind::Multiclass).unwrap();
        assert_eq!(report.losses.len(), 200);
        assert!(report.losses.iter().all(|l| l.is_finite()));
        assert!(accuracy(&trained, &data) >= 0.99);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = LabeledSet::new(vec![Vector(vec![0.5, -1.0])], vec![1]).unwrap();
        let model = MlpModel::classifier(2, 2, 8).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, ..TrainConfig::default() };
        let (trained, _) = train(&model, &data, &cfg, LossKind::Multiclass).unwrap();
        assert_eq!(trained, model);
    }

    #[test]
    fn four_class_blobs_generalise() {
        // centroids 6 sigma apart along the axes of a 4-d space
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|c| (0..4).map(|i| if i == c { 6.0 / 2f64.sqrt() } else { 0.0 }).collect())
            .collect();
        let train_set = blobs(10, &centers, 100);
        let test_set = blobs(11, &centers, 100);
        assert!(nearest_centroid_accuracy(&train_set, &test_set, 4) >= 0.95);
        let model = MlpModel::classifier(4, 4, 12).unwrap();
        let cfg = TrainConfig { rng_seed: 13, ..TrainConfig::default() };
        let (trained, _) = train(&model, &train_set, &cfg, LossKind::Multiclass).unwrap();
        assert!(accuracy(&trained, &test_set) >= 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(2, &[vec![-2.0, 1.0], vec![2.0, -1.0]], 30);
        let model = MlpModel::classifier(2, 2, 5).unwrap();
        let cfg = TrainConfig { epochs: 5, rng_seed: 6, ..TrainConfig::default() };
        let a = train(&model, &data, &cfg, LossKind::Multiclass).unwrap();
        let b = train(&model, &data, &cfg, LossKind::Multiclass).unwrap();
        assert_eq!(a.0.to_json().unwrap(), b.0.to_json().unwrap());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn discriminator_mode_needs_both_groups() {
        let data = LabeledSet::new(vec![Vector(vec![0.0]), Vector(vec![1.0])], vec![0, 0]).unwrap();
        let model = MlpModel::discriminator(1, 0).unwrap();
        let err = train(&model, &data, &TrainConfig::default(), LossKind::Discriminator).unwrap_err();
        assert!(matches!(err, Error::SingleClass));
    }

    #[test]
    fn discriminator_learns_separated_groups() {
        let data = blobs(3, &[vec![-2.0, -2.0], vec![2.0, 2.0]], 64);
        for composition in [BatchComposition::Mixed, BatchComposition::Pure] {
            let model = MlpModel::discriminator(2, 1).unwrap();
            let cfg = TrainConfig { rng_seed: 2, batch_composition: composition, ..TrainConfig::default() };
            let (trained, report) = train(&model, &data, &cfg, LossKind::Discriminator).unwrap();
            assert!(!report.degenerate);
            assert!(report.losses.last().unwrap() < &report.losses[0]);
            assert!(trained.is_finite());
        }
    }

    #[test]
    fn rejects_bad_config_and_labels() {
        let data = LabeledSet::new(vec![Vector(vec![0.0])], vec![3]).unwrap();
        let model = MlpModel::classifier(1, 2, 0).unwrap();
        assert!(matches!(train(&model, &data, &TrainConfig::default(), LossKind::Multiclass), Err(Error::LabelOutOfRange { .. })));
        let cfg = TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(train(&model, &LabeledSet::default(), &TrainConfig::default(), LossKind::Multiclass).is_err());
    }
}
