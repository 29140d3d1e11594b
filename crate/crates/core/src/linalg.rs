//! Dense vectors, symmetric matrices and the covariance/precision primitives
//! the detector is built on.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// A dense vector of `f64`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        ensure_len(self.dim(), other.dim())?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A square matrix stored row-major and expected to be symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    values: Vec<f64>,
    #[serde(default)]
    psd: bool,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, values: vec![0.0; dim * dim], psd: true }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.values[i * dim + i] = 1.0;
        }
        m
    }

    /// Build from row-major values; fails unless the input is square and
    /// symmetric within `1e-12 * max(1, |a_ij|)`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut values = Vec::with_capacity(dim * dim);
        for row in rows {
            ensure_len(dim, row.len())?;
            values.extend_from_slice(row);
        }
        let m = Self { dim, values, psd: false };
        m.check_symmetric()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.dim + col]
    }

    pub fn is_psd(&self) -> bool {
        self.psd
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.values.chunks_exact(self.dim.max(1)).take(self.dim).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// Plain matrix product; the result is not re-checked for symmetry.
    pub fn matmul(&self, other: &SymMatrix) -> Vec<Vec<f64>> {
        let n = self.dim;
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| self.get(i, k) * other.get(k, j)).sum()).collect())
            .collect()
    }

    pub fn check_symmetric(&self) -> Result<()> {
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let a = self.get(i, j);
                let b = self.get(j, i);
                if (a - b).abs() > 1e-12 * a.abs().max(1.0) || !a.is_finite() || !b.is_finite() {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
            if !self.get(i, i).is_finite() {
                return Err(Error::NotSymmetric { row: i, col: i });
            }
        }
        Ok(())
    }

    fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.values[i * n + j] + self.values[j * n + i]);
                self.values[i * n + j] = avg;
                self.values[j * n + i] = avg;
            }
        }
    }
}

/// Population covariance `(1/N) sum (x_i - mean)(x_i - mean)^T`.
pub fn covariance(samples: &[Vector], mean: &Vector) -> Result<SymMatrix> {
    if samples.is_empty() {
        return Err(Error::Empty("covariance samples"));
    }
    let mut acc = CovarianceAccumulator::new(mean.dim());
    for x in samples {
        acc.add_centered(&x.sub(mean)?)?;
    }
    Ok(acc.finish_with_divisor(samples.len()))
}

/// Accumulates outer products of already-centred vectors; the upper triangle
/// is summed and mirrored at the end.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    dim: usize,
    upper: Vec<f64>,
    count: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, upper: vec![0.0; dim * dim], count: 0 }
    }

    pub fn add_centered(&mut self, centered: &[f64]) -> Result<()> {
        ensure_len(self.dim, centered.len())?;
        let n = self.dim;
        for i in 0..n {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut self.upper[i * n..(i + 1) * n];
            for j in i..n {
                row[j] += ci * centered[j];
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish_with_divisor(mut self, divisor: usize) -> SymMatrix {
        let n = self.dim;
        let scale = 1.0 / divisor as f64;
        for i in 0..n {
            for j in i..n {
                let v = self.upper[i * n + j] * scale;
                self.upper[i * n + j] = v;
                self.upper[j * n + i] = v;
            }
        }
        SymMatrix { dim: n, values: self.upper, psd: true }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(m: &SymMatrix) -> Result<Vec<f64>> {
    let n = m.dim;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// `(m + eps I)^-1` with `eps = epsilon_scale * trace(m) / D`, or
/// `eps = epsilon_scale` when the trace vanishes. Inverted through Cholesky.
pub fn regularized_inverse(m: &SymMatrix, epsilon_scale: f64) -> Result<SymMatrix> {
    m.check_symmetric()?;
    if !(epsilon_scale > 0.0) || !epsilon_scale.is_finite() {
        return Err(Error::InvalidConfig(format!("epsilon_scale must be positive, got {epsilon_scale}")));
    }
    let n = m.dim;
    if n == 0 {
        return Ok(SymMatrix::zeros(0));
    }
    let eps = regularizer(m, epsilon_scale);
    let mut shifted = m.clone();
    for i in 0..n {
        shifted.values[i * n + i] += eps;
    }
    let l = cholesky(&shifted)?;

    // inverse of L by forward substitution, column by column
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        linv[col * n + col] = 1.0 / l[col * n + col];
        for i in (col + 1)..n {
            let mut s = 0.0;
            for k in col..i {
                s -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = s / l[i * n + i];
        }
    }
    // A^-1 = L^-T L^-1
    let mut inv = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in j..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv.values[i * n + j] = s;
            inv.values[j * n + i] = s;
        }
    }
    inv.symmetrize();
    inv.psd = true;
    Ok(inv)
}

/// The ridge actually added by [`regularized_inverse`].
pub fn regularizer(m: &SymMatrix, epsilon_scale: f64) -> f64 {
    let trace = m.trace();
    if trace > 0.0 {
        epsilon_scale * trace / m.dim as f64
    } else {
        epsilon_scale
    }
}

/// `(x - mu)^T P (x - mu)`, clamped at zero.
pub fn quadratic_form(x: &[f64], mu: &[f64], precision: &SymMatrix) -> Result<f64> {
    ensure_len(precision.dim, x.len())?;
    ensure_len(precision.dim, mu.len())?;
    let n = precision.dim;
    let d: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for i in 0..n {
        if d[i] == 0.0 {
            continue;
        }
        let row = &precision.values[i * n..(i + 1) * n];
        let mut s = 0.0;
        for j in 0..n {
            s += row[j] * d[j];
        }
        total += d[i] * s;
    }
    Ok(total.max(0.0))
}
