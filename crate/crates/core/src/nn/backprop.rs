use crate::error::{Error, Result};
use crate::linalg::Vector;

use super::{sigmoid, softmax, softplus, Activation, MlpModel, NormStats, BATCH_NORM_EPS};

/// Row-major dense matrix, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vector]) -> Self {
        let cols = rows.first().map_or(0, |r| r.dim());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub input: Matrix,
    pub norm: Option<NormCache>,
    /// Value entering the nonlinearity (after batch-norm when present).
    pub pre_activation: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub stats: NormStats,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.layers.last().expect("model has layers").pre_activation
    }
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean softmax cross-entropy over the batch.
    Multiclass,
    /// `-mean log(1 - D(x_idd)) - mean log D(x_ood)` with `D` the sigmoid
    /// output read as P(OOD); label 0 = IDD, 1 = OOD. The two means are taken
    /// separately over each group present in the batch.
    Discriminator,
}

/// Parameter gradients, laid out like `MlpModel::param_slices_mut`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub slices: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.slices.iter().flatten().copied().collect()
    }

    pub(crate) fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl MlpModel {
    pub(crate) fn forward_cached(&self, batch: &[Vector], stats: NormStats) -> ForwardCache {
        let mut input = Matrix::from_rows(batch);
        let n = input.rows;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = Matrix::zeros(n, layer.output_dim);
            for r in 0..n {
                let x = input.row(r);
                let out = z.row_mut(r);
                for (o, w) in layer.weights.chunks_exact(layer.input_dim).enumerate() {
                    let mut s = layer.bias[o];
                    for (wi, xi) in w.iter().zip(x) {
                        s += wi * xi;
                    }
                    out[o] = s;
                }
            }
            let (pre, norm) = match &layer.batch_norm {
                Some(bn) => {
                    let width = layer.output_dim;
                    let (mean, var) = match stats {
                        NormStats::Batch => batch_moments(&z),
                        NormStats::Running => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                    let mut xhat = Matrix::zeros(n, width);
                    let mut pre = Matrix::zeros(n, width);
                    for r in 0..n {
                        for c in 0..width {
                            let h = (z.row(r)[c] - mean[c]) * inv_std[c];
                            xhat.row_mut(r)[c] = h;
                            pre.row_mut(r)[c] = bn.gamma[c] * h + bn.beta[c];
                        }
                    }
                    (pre, Some(NormCache { xhat, inv_std, mean, var }))
                }
                None => (z, None),
            };
            let output = match layer.activation {
                Activation::Relu | Activation::BatchnormRelu => {
                    Matrix { rows: n, cols: pre.cols, data: pre.data.iter().map(|v| v.max(0.0)).collect() }
                }
                Activation::Linear => pre.clone(),
                Activation::Sigmoid => Matrix { rows: n, cols: pre.cols, data: pre.data.iter().map(|&v| sigmoid(v)).collect() },
            };
            layers.push(LayerCache { input, norm, pre_activation: pre });
            input = output;
        }
        ForwardCache { layers, stats }
    }

    /// Parameter gradients given the loss gradient w.r.t. the final-layer
    /// pre-activations.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: Matrix) -> Gradients {
        let mut slices: Vec<Vec<f64>> = Vec::new();
        let mut upstream = dlogits;
        for (idx, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let n = lc.input.rows;
            let width = layer.output_dim;
            // through the nonlinearity (the output layer receives d/d pre-activation directly)
            let mut dpre = upstream;
            let is_output = idx + 1 == self.layers.len();
            if !is_output && matches!(layer.activation, Activation::Relu | Activation::BatchnormRelu) {
                for (d, p) in dpre.data.iter_mut().zip(&lc.pre_activation.data) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let mut norm_grads = None;
            let dz = match (&layer.batch_norm, &lc.norm) {
                (Some(bn), Some(nc)) => {
                    let mut dgamma = vec![0.0; width];
                    let mut dbeta = vec![0.0; width];
                    for r in 0..n {
                        for c in 0..width {
                            let d = dpre.row(r)[c];
                            dgamma[c] += d * nc.xhat.row(r)[c];
                            dbeta[c] += d;
                        }
                    }
                    let mut dz = Matrix::zeros(n, width);
                    match cache.stats {
                        NormStats::Running => {
                            for r in 0..n {
                                for c in 0..width {
                                    dz.row_mut(r)[c] = dpre.row(r)[c] * bn.gamma[c] * nc.inv_std[c];
                                }
                            }
                        }
                        NormStats::Batch => {
                            let nf = n as f64;
                            for c in 0..width {
                                let mut sum_d = 0.0;
                                let mut sum_dx = 0.0;
                                for r in 0..n {
                                    let dxhat = dpre.row(r)[c] * bn.gamma[c];
                                    sum_d += dxhat;
                                    sum_dx += dxhat * nc.xhat.row(r)[c];
                                }
                                for r in 0..n {
                                    let dxhat = dpre.row(r)[c] * bn.gamma[c];
                                    dz.row_mut(r)[c] =
                                        nc.inv_std[c] / nf * (nf * dxhat - sum_d - nc.xhat.row(r)[c] * sum_dx);
                                }
                            }
                        }
                    }
                    norm_grads = Some((dgamma, dbeta));
                    dz
                }
                _ => dpre,
            };
            let mut dw = vec![0.0; layer.weights.len()];
            let mut db = vec![0.0; width];
            let mut dinput = Matrix::zeros(n, layer.input_dim);
            for r in 0..n {
                let x = lc.input.row(r);
                let d = dz.row(r);
                for o in 0..width {
                    let g = d[o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let wrow = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                    let dwrow = &mut dw[o * layer.input_dim..(o + 1) * layer.input_dim];
                    let di = dinput.row_mut(r);
                    for i in 0..layer.input_dim {
                        dwrow[i] += g * x[i];
                        di[i] += g * wrow[i];
                    }
                }
            }
            // pushed in reverse; flipped below
            if let Some((dgamma, dbeta)) = norm_grads {
                slices.push(dbeta);
                slices.push(dgamma);
            }
            slices.push(db);
            slices.push(dw);
            upstream = dinput;
        }
        slices.reverse();
        Gradients { slices }
    }
}

/// Per-feature batch mean and biased variance.
pub(crate) fn batch_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows as f64;
    let mut mean = vec![0.0; z.cols];
    for r in 0..z.rows {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; z.cols];
    for r in 0..z.rows {
        for ((s, v), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Loss value and its gradient w.r.t. the logits.
pub(crate) fn loss_and_grad(logits: &Matrix, labels: &[usize], kind: LossKind) -> Result<(f64, Matrix)> {
    let n = logits.rows;
    if labels.len() != n {
        return Err(Error::LengthMismatch { left: n, right: labels.len() });
    }
    let mut grad = Matrix::zeros(n, logits.cols);
    match kind {
        LossKind::Multiclass => {
            let mut loss = 0.0;
            for r in 0..n {
                let label = labels[r];
                if label >= logits.cols {
                    return Err(Error::LabelOutOfRange { label, class_count: logits.cols });
                }
                let p = softmax(logits.row(r));
                loss += -p[label].max(1e-30).ln();
                let g = grad.row_mut(r);
                for c in 0..logits.cols {
                    g[c] = (p[c] - if c == label { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            Ok((loss / n as f64, grad))
        }
        LossKind::Discriminator => {
            let n_ood = labels.iter().filter(|&&l| l == 1).count();
            let n_idd = labels.iter().filter(|&&l| l == 0).count();
            if n_ood + n_idd != n {
                let bad = labels.iter().copied().find(|&l| l > 1).unwrap_or(2);
                return Err(Error::LabelOutOfRange { label: bad, class_count: 2 });
            }
            let (mut loss_ood, mut loss_idd) = (0.0, 0.0);
            for r in 0..n {
                let z = logits.row(r)[0];
                if labels[r] == 1 {
                    loss_ood += softplus(-z);
                    grad.row_mut(r)[0] = (sigmoid(z) - 1.0) / n_ood as f64;
                } else {
                    loss_idd += softplus(z);
                    grad.row_mut(r)[0] = sigmoid(z) / n_idd as f64;
                }
            }
            let mean = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
            Ok((mean(loss_ood, n_ood) + mean(loss_idd, n_idd), grad))
        }
    }
}
