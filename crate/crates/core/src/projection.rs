//! Feature vectors, the linear semantic projection and local training.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{PrototypeSet, SemanticEmbedding};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: Option<String>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, label: Option<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self { values, label })
    }

    pub fn labeled(values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        Self::new(values, Some(label.into()))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// k×d map from feature space to embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix(DMatrix<f64>);

impl ProjectionMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection matrix"));
        }
        Ok(Self(m))
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Self(DMatrix::zeros(k, d))
    }

    pub fn from_row_slice(k: usize, d: usize, values: &[f64]) -> Result<Self> {
        if values.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                actual: values.len(),
                context: "matrix entries",
            });
        }
        Self::new(DMatrix::from_row_slice(k, d, values))
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Entries in row-major order.
    pub fn row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k() * self.d());
        for r in 0..self.k() {
            for c in 0..self.d() {
                out.push(self.0[(r, c)]);
            }
        }
        out
    }

    /// Snapshot encoding: u64 k, u64 d, then row-major f64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.k() * self.d());
        out.extend_from_slice(&(self.k() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d() as u64).to_le_bytes());
        for v in self.row_major() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|s| s.try_into().expect("8-byte slice"))
                .ok_or_else(|| Error::format("matrix snapshot", "truncated"))
        };
        let k = u64::from_le_bytes(word(0)?) as usize;
        let d = u64::from_le_bytes(word(1)?) as usize;
        let expected = k
            .checked_mul(d)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| Error::format("matrix snapshot", "dimensions overflow"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                "matrix snapshot",
                format!("{} bytes for a {k}x{d} matrix", bytes.len()),
            ));
        }
        let values: Vec<f64> = (0..k * d)
            .map(|i| word(2 + i).map(f64::from_le_bytes))
            .collect::<Result<_>>()?;
        Self::from_row_slice(k, d, &values)
    }

    /// Hex SHA-256 of the snapshot encoding.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalDataset {
    pub client_id: usize,
    pub samples: Vec<FeatureVector>,
}

impl LocalDataset {
    pub fn new(client_id: usize, samples: Vec<FeatureVector>) -> Self {
        Self { client_id, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn project(w: &ProjectionMatrix, x: &FeatureVector) -> Result<SemanticEmbedding> {
    SemanticEmbedding::new("projection", project_values(w, &x.values)?)
}

pub fn project_values(w: &ProjectionMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.d() {
        return Err(Error::DimensionMismatch {
            expected: w.d(),
            actual: x.len(),
            context: "feature vector vs projection columns",
        });
    }
    let m = w.matrix();
    let out: Vec<f64> = (0..w.k())
        .map(|r| x.iter().enumerate().map(|(c, v)| m[(r, c)] * v).sum())
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection"));
    }
    Ok(out)
}

/// Features as columns (d×n) and the matching fused prototypes (k×n).
fn design(dataset: &LocalDataset, prototypes: &PrototypeSet, d: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Empty("local dataset"));
    }
    let n = dataset.len();
    let k = prototypes.dim();
    let mut x = DMatrix::zeros(d, n);
    let mut z = DMatrix::zeros(k, n);
    for (j, s) in dataset.samples.iter().enumerate() {
        if s.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: s.dim(),
                context: "training sample",
            });
        }
        let label = s.label.as_deref().ok_or(Error::UnknownLabel(String::new()))?;
        let proto = prototypes
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_owned()))?;
        x.column_mut(j).copy_from_slice(&s.values);
        z.column_mut(j).copy_from_slice(&proto.fused.values);
    }
    Ok((x, z))
}

fn check_k(w: &ProjectionMatrix, prototypes: &PrototypeSet) -> Result<()> {
    if w.k() != prototypes.dim() {
        return Err(Error::DimensionMismatch {
            expected: prototypes.dim(),
            actual: w.k(),
            context: "projection rows vs prototype dimension",
        });
    }
    Ok(())
}

/// Mean squared L2 residual between projections and label prototypes.
pub fn local_loss(w: &ProjectionMatrix, dataset: &LocalDataset, prototypes: &PrototypeSet) -> Result<f64> {
    check_k(w, prototypes)?;
    let (x, z) = design(dataset, prototypes, w.d())?;
    let residual = w.matrix() * &x - &z;
    Ok(residual.norm_squared() / dataset.len() as f64)
}

/// Gradient of [`local_loss`] with respect to `w`.
pub fn loss_gradient(
    w: &ProjectionMatrix,
    dataset: &LocalDataset,
    prototypes: &PrototypeSet,
) -> Result<ProjectionMatrix> {
    check_k(w, prototypes)?;
    let (x, z) = design(dataset, prototypes, w.d())?;
    let residual = w.matrix() * &x - &z;
    let g = residual * x.transpose() * (2.0 / dataset.len() as f64);
    ProjectionMatrix::new(g)
}

/// Full-batch gradient descent from `w0`.
pub fn train_local_gd(
    w0: &ProjectionMatrix,
    dataset: &LocalDataset,
    prototypes: &PrototypeSet,
    learning_rate: f64,
    epochs: usize,
) -> Result<(ProjectionMatrix, f64)> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    check_k(w0, prototypes)?;
    let (x, z) = design(dataset, prototypes, w0.d())?;
    let scale = 2.0 / dataset.len() as f64;
    // The gradient only needs the second moments, which are fixed.
    let xxt = &x * x.transpose() * scale;
    let zxt = &z * x.transpose() * scale;
    let mut w = w0.matrix().clone();
    for epoch in 1..=epochs {
        let grad = &w * &xxt - &zxt;
        w -= grad * learning_rate;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
    }
    let loss = (&w * &x - &z).norm_squared() / dataset.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch: epochs });
    }
    Ok((ProjectionMatrix(w), loss))
}

/// Ridge least squares `W = Z Xᵀ (X Xᵀ + ρI)⁻¹`.
pub fn train_local_closed_form(
    dataset: &LocalDataset,
    prototypes: &PrototypeSet,
    ridge: f64,
) -> Result<(ProjectionMatrix, f64)> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let d = dataset
        .samples
        .first()
        .map(FeatureVector::dim)
        .ok_or(Error::Empty("local dataset"))?;
    let (x, z) = design(dataset, prototypes, d)?;
    let mut a = &x * x.transpose();
    for i in 0..d {
        a[(i, i)] += ridge;
    }
    let max_diag = (0..d).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let chol = a.cholesky().ok_or(Error::Singular)?;
    let l = chol.l_dirty();
    let min_pivot = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * max_diag) {
        return Err(Error::Singular);
    }
    let wt = chol.solve(&(&x * z.transpose()));
    let w = ProjectionMatrix::new(wt.transpose())?;
    let loss = (w.matrix() * &x - &z).norm_squared() / dataset.len() as f64;
    Ok((w, loss))
}

/// Per-dimension scaling learned on the training split. Features are
/// divided by their population standard deviation and not centered: the
/// projection has no bias term, so centering would make class means
/// linearly dependent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub scales: Vec<f64>,
}

impl Scaler {
    pub fn fit(samples: &[FeatureVector]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("scaler samples"))?;
        let d = first.dim();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            if s.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: s.dim(),
                    context: "scaler sample",
                });
            }
            for (m, v) in mean.iter_mut().zip(&s.values) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(&s.values).zip(&mean) {
                *acc += (v - m) * (v - m) / n;
            }
        }
        let scales = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { scales })
    }

    pub fn apply(&self, x: &mut FeatureVector) -> Result<()> {
        if x.dim() != self.scales.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scales.len(),
                actual: x.dim(),
                context: "scaler input",
            });
        }
        for (v, s) in x.values.iter_mut().zip(&self.scales) {
            *v /= s;
        }
        Ok(())
    }
}
