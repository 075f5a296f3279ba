//! Distance primitives, exact nearest-neighbor search and PCA.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmbeddingMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("k = {k} exceeds the available pool size {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("target dimension {p} exceeds min(n, d) = {max}")]
    TargetTooLarge { p: usize, max: usize },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[inline]
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// `1 - <u, v>` for unit vectors, clamped to `[0, 2]` against roundoff.
#[inline]
pub fn cosine_distance(u: &[f32], v: &[f32]) -> f64 {
    (1.0 - dot(u, v)).clamp(0.0, 2.0)
}

#[inline]
pub fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub query_index: usize,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn mean_distance(&self) -> f64 {
        self.neighbors.iter().map(|n| n.distance).sum::<f64>() / self.neighbors.len() as f64
    }
}

struct Candidate<K> {
    distance: f64,
    key: K,
}

impl<K: Ord> Ord for Candidate<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance.total_cmp(&other.distance).then_with(|| self.key.cmp(&other.key))
    }
}

impl<K: Ord> PartialOrd for Candidate<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K: Ord> PartialEq for Candidate<K> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<K: Ord> Eq for Candidate<K> {}

/// The `k` smallest `(distance, key)` pairs in ascending order; ties go to the smaller key.
pub fn smallest_k<K: Ord>(items: impl IntoIterator<Item = (f64, K)>, k: usize) -> Vec<(f64, K)> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Candidate<K>> = BinaryHeap::with_capacity(k + 1);
    for (distance, key) in items {
        let c = Candidate { distance, key };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().unwrap() {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_sorted_vec().into_iter().map(|c| (c.distance, c.key)).collect()
}

/// Exact cosine k-nearest neighbors of `queries` among `pool`, both given as
/// row indices into `m`. Returned neighbor indices are rows of `m`; ties are
/// broken by ascending position in `pool`. With `exclude_self`, the pool
/// entry equal to the query row is skipped.
pub fn knn(
    m: &EmbeddingMatrix,
    queries: &[usize],
    pool: &[usize],
    k: usize,
    exclude_self: bool,
) -> Result<Vec<NeighborList>, GeometryError> {
    if k == 0 {
        return Err(GeometryError::ZeroK);
    }
    if k > pool.len() {
        return Err(GeometryError::KTooLarge { k, available: pool.len() });
    }
    if exclude_self && k == pool.len() {
        // Only a problem when some query is actually in the pool.
        let mut sorted = pool.to_vec();
        sorted.sort_unstable();
        if queries.iter().any(|q| sorted.binary_search(q).is_ok()) {
            return Err(GeometryError::KTooLarge { k, available: pool.len() - 1 });
        }
    }
    Ok(queries
        .par_iter()
        .map(|&q| {
            let qv = m.row(q);
            let best = smallest_k(
                pool.iter()
                    .enumerate()
                    .filter(|(_, &r)| !(exclude_self && r == q))
                    .map(|(pos, &r)| (cosine_distance(qv, m.row(r)), pos)),
                k,
            );
            NeighborList {
                query_index: q,
                neighbors: best.into_iter().map(|(distance, pos)| Neighbor { index: pool[pos], distance }).collect(),
            }
        })
        .collect())
}

/// Euclidean k-nearest neighbors of every row among all other rows.
pub fn knn_euclidean_all(points: &[Vec<f64>], k: usize) -> Result<Vec<Vec<Neighbor>>, GeometryError> {
    if k == 0 {
        return Err(GeometryError::ZeroK);
    }
    if k + 1 > points.len() {
        return Err(GeometryError::KTooLarge { k, available: points.len().saturating_sub(1) });
    }
    Ok((0..points.len())
        .into_par_iter()
        .map(|i| {
            smallest_k(
                points.iter().enumerate().filter(|(j, _)| *j != i).map(|(j, p)| (euclidean(&points[i], p), j)),
                k,
            )
            .into_iter()
            .map(|(distance, index)| Neighbor { index, distance })
            .collect()
        })
        .collect())
}

/// Rows of a column-major nalgebra matrix as owned vectors.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone)]
pub struct ReducedMatrix {
    /// `n x p` projected coordinates.
    pub values: DMatrix<f64>,
    /// `p x d` orthonormal projection rows.
    pub basis: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
    pub mean: DVector<f64>,
    /// Number of retained components with zero variance.
    pub zero_variance_components: usize,
}

impl ReducedMatrix {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Projects new `m x d` rows into the reduced space.
    pub fn project(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>, GeometryError> {
        if rows.ncols() != self.mean.len() {
            return Err(GeometryError::DimensionMismatch { expected: self.mean.len(), got: rows.ncols() });
        }
        let mut centered = rows.clone();
        for mut r in centered.row_iter_mut() {
            r -= self.mean.transpose();
        }
        Ok(centered * self.basis.transpose())
    }

    /// Back-projection of the reduced values into the original space.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut out = &self.values * &self.basis;
        for mut r in out.row_iter_mut() {
            r += self.mean.transpose();
        }
        out
    }
}

/// Principal component projection onto the top `p` eigenvectors of the sample
/// covariance (divisor `n - 1`). Eigenvector signs are fixed so the entry of
/// largest magnitude is positive.
pub fn pca_reduce(m: &DMatrix<f64>, p: usize) -> Result<ReducedMatrix, GeometryError> {
    let (n, d) = m.shape();
    if n < 2 {
        return Err(GeometryError::TooFewRows { needed: 2, got: n });
    }
    if p == 0 || p > n.min(d) {
        return Err(GeometryError::TargetTooLarge { p, max: n.min(d) });
    }
    let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = m.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = DMatrix::zeros(p, d);
    let mut explained_variance = Vec::with_capacity(p);
    for (row, &idx) in order.iter().take(p).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v = -v;
        }
        basis.set_row(row, &v.transpose());
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    let scale = explained_variance.first().copied().unwrap_or(0.0).max(1.0);
    let zero_variance_components = explained_variance.iter().filter(|&&v| v <= 1e-12 * scale).count();
    let values = &centered * basis.transpose();
    Ok(ReducedMatrix { values, basis, explained_variance, mean, zero_variance_components })
}

pub fn pca_reduce_embeddings(m: &EmbeddingMatrix, p: usize) -> Result<ReducedMatrix, GeometryError> {
    pca_reduce(&m.to_dmatrix(), p)
}
