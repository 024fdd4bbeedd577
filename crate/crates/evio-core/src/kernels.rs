//! Gaussian and linear kernels and Gram-matrix construction.

use crate::linalg::Matrix;
use crate::par;
use serde::{Deserialize, Serialize};

/// Kernel family used by the bound and utility regressions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `K(a, b) = exp(−γ‖a − b‖²)`, values in (0, 1].
    Gaussian { gamma: f64 },
    /// `K(a, b) = a·b`.
    Linear,
}

impl KernelSpec {
    pub fn gaussian(gamma: f64) -> Result<Self, KernelError> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(KernelSpec::Gaussian { gamma })
        } else {
            Err(KernelError::InvalidGamma(gamma))
        }
    }

    pub fn linear() -> Self {
        KernelSpec::Linear
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        match *self {
            KernelSpec::Gaussian { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(KernelError::InvalidGamma(gamma))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("feature vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("gaussian gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
}

/// Kernel values between query periods (rows) and training periods (columns).
#[derive(Clone, Debug)]
pub struct GramMatrix {
    matrix: Matrix,
}

impl GramMatrix {
    pub fn num_queries(&self) -> usize {
        self.matrix.rows()
    }

    pub fn num_train(&self) -> usize {
        self.matrix.cols()
    }

    #[inline]
    pub fn get(&self, query: usize, train: usize) -> f64 {
        self.matrix.get(query, train)
    }

    /// Kernel row for one query period.
    #[inline]
    pub fn row(&self, query: usize) -> &[f64] {
        self.matrix.row(query)
    }
}

/// Evaluate the kernel on a single pair of feature vectors.
pub fn kernel_eval(a: &[f64], b: &[f64], spec: &KernelSpec) -> Result<f64, KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::DimensionMismatch(a.len(), b.len()));
    }
    spec.validate()?;
    Ok(eval_unchecked(a, b, spec))
}

#[inline]
fn eval_unchecked(a: &[f64], b: &[f64], spec: &KernelSpec) -> f64 {
    match *spec {
        KernelSpec::Gaussian { gamma } => {
            let mut d2 = 0.0;
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                d2 += d * d;
            }
            (-gamma * d2).exp()
        }
        KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
    }
}

/// Squared Euclidean distances between query and training vectors; lets a
/// grid search over `γ` reuse one distance pass for many Gaussian Grams.
pub fn pairwise_sq_dists(
    queries: &[Vec<f64>],
    train: &[Vec<f64>],
) -> Result<Matrix, KernelError> {
    let dim = train
        .first()
        .map(Vec::len)
        .or_else(|| queries.first().map(Vec::len))
        .unwrap_or(0);
    for v in queries.iter().chain(train.iter()) {
        if v.len() != dim {
            return Err(KernelError::DimensionMismatch(v.len(), dim));
        }
    }
    let cols = train.len();
    let rows = par::map_indices(queries.len(), |i| {
        let q = &queries[i];
        let mut row = Vec::with_capacity(cols);
        for t in train {
            let mut d2 = 0.0;
            for (x, y) in q.iter().zip(t) {
                let d = x - y;
                d2 += d * d;
            }
            row.push(d2);
        }
        row
    });
    let mut matrix = Matrix::zeros(queries.len(), cols);
    for (i, row) in rows.into_iter().enumerate() {
        matrix.row_mut(i).copy_from_slice(&row);
    }
    Ok(matrix)
}

/// Gaussian Gram matrix from precomputed squared distances.
pub fn gaussian_gram_from_sq_dists(dists: &Matrix, gamma: f64) -> Result<GramMatrix, KernelError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(KernelError::InvalidGamma(gamma));
    }
    let mut matrix = Matrix::zeros(dists.rows(), dists.cols());
    for i in 0..dists.rows() {
        let src = dists.row(i);
        let dst = matrix.row_mut(i);
        for (d, out) in src.iter().zip(dst.iter_mut()) {
            *out = (-gamma * d).exp();
        }
    }
    Ok(GramMatrix { matrix })
}

/// Gram matrix between query and training feature vectors, built row by row
/// in parallel.
pub fn gram(
    queries: &[Vec<f64>],
    train: &[Vec<f64>],
    spec: &KernelSpec,
) -> Result<GramMatrix, KernelError> {
    spec.validate()?;
    let dim = train
        .first()
        .map(Vec::len)
        .or_else(|| queries.first().map(Vec::len))
        .unwrap_or(0);
    for v in queries.iter().chain(train.iter()) {
        if v.len() != dim {
            return Err(KernelError::DimensionMismatch(v.len(), dim));
        }
    }
    let cols = train.len();
    let rows = par::map_indices(queries.len(), |i| {
        let q = &queries[i];
        let mut row = Vec::with_capacity(cols);
        for t in train {
            row.push(eval_unchecked(q, t, spec));
        }
        row
    });
    let mut matrix = Matrix::zeros(queries.len(), cols);
    for (i, row) in rows.into_iter().enumerate() {
        matrix.row_mut(i).copy_from_slice(&row);
    }
    Ok(GramMatrix { matrix })
}
