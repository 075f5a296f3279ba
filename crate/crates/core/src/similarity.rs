//! Gaussian summaries of datasets, pairwise Fréchet distances, uniqueness
//! scores and high-overlap pair detection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::geometry::{pca_reduce, GeometryError, ReducedMatrix};
use crate::stats::quantile;

pub const DEFAULT_COVARIANCE_RIDGE: f64 = 1e-6;
pub const DEFAULT_REDUCED_DIM: usize = 64;
/// Negative eigenvalues of symmetric intermediates below this magnitude are silent roundoff.
pub const NEGATIVE_EIGEN_WARN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("dataset {dataset:?} has {n} samples, need at least 2 for a covariance")]
    TooFewSamples { dataset: String, n: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least 2 datasets with 2 or more samples, found {0}")]
    TooFewDatasets(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub dataset: String,
    pub n: usize,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance of `rows` (`n x d`), plus `ridge * I`.
    pub fn from_rows(dataset: &str, rows: &DMatrix<f64>, ridge: f64) -> Result<Self, SimilarityError> {
        let (n, d) = rows.shape();
        if n < 2 {
            return Err(SimilarityError::TooFewSamples { dataset: dataset.to_string(), n });
        }
        let mu = DVector::from_iterator(d, rows.column_iter().map(|c| c.sum() / n as f64));
        let mut centered = rows.clone();
        for mut r in centered.row_iter_mut() {
            r -= mu.transpose();
        }
        let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
        sigma = (&sigma + sigma.transpose()) * 0.5;
        for i in 0..d {
            sigma[(i, i)] += ridge;
        }
        Ok(Self { dataset: dataset.to_string(), n, mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Space in which dataset moments are computed.
#[derive(Debug, Clone)]
pub enum MomentSpace {
    Full,
    /// Shared PCA basis fit on the whole corpus.
    Reduced(ReducedMatrix),
}

impl MomentSpace {
    /// Fits the shared basis when `reduce_to` is set. The target is capped at
    /// `min(n, d)`.
    pub fn fit(corpus: &Corpus, reduce_to: Option<usize>) -> Result<Self, SimilarityError> {
        match reduce_to {
            None => Ok(MomentSpace::Full),
            Some(p) => {
                let p = p.min(corpus.len()).min(corpus.dim());
                Ok(MomentSpace::Reduced(pca_reduce(&corpus.embeddings().to_dmatrix(), p)?))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            MomentSpace::Full => "full".to_string(),
            MomentSpace::Reduced(r) => format!("pca-{}", r.dim()),
        }
    }

    fn rows(&self, corpus: &Corpus, rows: &[usize]) -> DMatrix<f64> {
        match self {
            MomentSpace::Full => corpus.embeddings().select_rows(rows).to_dmatrix(),
            MomentSpace::Reduced(r) => DMatrix::from_fn(rows.len(), r.dim(), |i, j| r.values[(rows[i], j)]),
        }
    }
}

pub fn dataset_moments(
    corpus: &Corpus,
    dataset: &str,
    space: &MomentSpace,
    ridge: f64,
) -> Result<GaussianSummary, SimilarityError> {
    let rows: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.record(i).dataset == dataset).collect();
    GaussianSummary::from_rows(dataset, &space.rows(corpus, &rows), ridge)
}

/// Eigen-decomposition of a symmetric matrix with negative eigenvalues
/// clamped to zero. Returns the clamped decomposition and the most negative
/// eigenvalue encountered (0 when none).
fn clamped_eigen(m: &DMatrix<f64>) -> (SymmetricEigen<f64, nalgebra::Dyn>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let mut most_negative: f64 = 0.0;
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            most_negative = most_negative.min(*v);
            *v = 0.0;
        }
    }
    (eig, most_negative)
}

/// Symmetric positive semi-definite square root.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (eig, neg) = clamped_eigen(m);
    if neg < -NEGATIVE_EIGEN_WARN {
        log::warn!("clamped negative eigenvalue {neg:e} in matrix square root");
    }
    let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` for symmetric PSD `A`, `B`, computed as
/// `Tr((A^{1/2} B A^{1/2})^{1/2})` so every decomposition stays symmetric.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrtm_psd(a);
    let inner = &ra * b * &ra;
    let (eig, neg) = clamped_eigen(&inner);
    if neg < -NEGATIVE_EIGEN_WARN {
        log::warn!("clamped negative eigenvalue {neg:e} in trace square root");
    }
    eig.eigenvalues.iter().map(|v| v.sqrt()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetParts {
    pub mean_term: f64,
    pub trace_term: f64,
    /// Final value, negatives clamped to zero.
    pub value: f64,
    /// Magnitude of the negative roundoff that was clamped (0 if none).
    pub clamped: f64,
}

pub fn frechet_parts(a: &GaussianSummary, b: &GaussianSummary) -> Result<FrechetParts, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let trace_term = a.sigma.trace() + b.sigma.trace() - 2.0 * trace_sqrt_product(&a.sigma, &b.sigma);
    let raw = mean_term + trace_term;
    let (value, clamped) = if raw < 0.0 { (0.0, -raw) } else { (raw, 0.0) };
    if clamped > NEGATIVE_EIGEN_WARN {
        log::warn!("Fréchet distance {} vs {} clamped from {raw:e}", a.dataset, b.dataset);
    }
    Ok(FrechetParts { mean_term, trace_term, value, clamped })
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, never negative.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64, SimilarityError> {
    Ok(frechet_parts(a, b)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub datasets: Vec<String>,
    pub fd: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Pairwise matrix over the summaries, in the given order. Each pair is
    /// computed once and mirrored, so the matrix is exactly symmetric.
    pub fn from_summaries(summaries: &[GaussianSummary]) -> Result<Self, SimilarityError> {
        use rayon::prelude::*;
        let n = summaries.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let values: Vec<f64> =
            pairs.par_iter().map(|&(i, j)| frechet_distance(&summaries[i], &summaries[j])).collect::<Result<_, _>>()?;
        let mut fd = vec![vec![0.0; n]; n];
        for (&(i, j), v) in pairs.iter().zip(values) {
            fd[i][j] = v;
            fd[j][i] = v;
        }
        Ok(Self { datasets: summaries.iter().map(|s| s.dataset.clone()).collect(), fd })
    }

    fn off_diagonal(&self) -> Vec<f64> {
        let n = self.datasets.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.fd[i][j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub space: String,
    pub matrix: SimilarityMatrix,
    /// Datasets left out for having fewer than two samples.
    pub excluded: Vec<String>,
}

/// Pairwise FD over every dataset with at least two samples, datasets in lexicographic order.
pub fn pairwise_fd(corpus: &Corpus, space: &MomentSpace, ridge: f64) -> Result<PairwiseReport, SimilarityError> {
    let mut summaries = Vec::new();
    let mut excluded = Vec::new();
    for (name, rows) in corpus.rows_by_dataset() {
        if rows.len() < 2 {
            log::warn!("dataset {name:?} excluded from similarity: {} sample(s)", rows.len());
            excluded.push(name.to_string());
            continue;
        }
        summaries.push(GaussianSummary::from_rows(name, &space.rows(corpus, &rows), ridge)?);
    }
    if summaries.len() < 2 {
        return Err(SimilarityError::TooFewDatasets(summaries.len()));
    }
    Ok(PairwiseReport { space: space.describe(), matrix: SimilarityMatrix::from_summaries(&summaries)?, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uniqueness {
    pub dataset: String,
    pub score: f64,
}

/// Mean off-diagonal FD per dataset, highest first.
pub fn uniqueness_scores(sm: &SimilarityMatrix) -> Vec<Uniqueness> {
    let n = sm.datasets.len();
    let mut out: Vec<Uniqueness> = (0..n)
        .map(|i| Uniqueness {
            dataset: sm.datasets[i].clone(),
            score: if n < 2 {
                0.0
            } else {
                (0..n).filter(|&j| j != i).map(|j| sm.fd[i][j]).sum::<f64>() / (n - 1) as f64
            },
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.dataset.cmp(&b.dataset)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum OverlapThreshold {
    Absolute(f64),
    /// Interpolated quantile of the off-diagonal entries.
    Quantile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub a: String,
    pub b: String,
    pub fd: f64,
}

/// Pairs at or below the threshold, closest first.
pub fn high_overlap_pairs(sm: &SimilarityMatrix, threshold: OverlapThreshold) -> Vec<OverlapPair> {
    let off = sm.off_diagonal();
    if off.is_empty() {
        return Vec::new();
    }
    let cut = match threshold {
        OverlapThreshold::Absolute(t) => t,
        OverlapThreshold::Quantile(q) => quantile(&off, q),
    };
    let n = sm.datasets.len();
    let mut out: Vec<OverlapPair> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| sm.fd[i][j] <= cut)
        .map(|(i, j)| OverlapPair { a: sm.datasets[i].clone(), b: sm.datasets[j].clone(), fd: sm.fd[i][j] })
        .collect();
    out.sort_by(|x, y| x.fd.total_cmp(&y.fd).then_with(|| (&x.a, &x.b).cmp(&(&y.a, &y.b))));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(name: &str, mu: &[f64], sigma: &[f64]) -> GaussianSummary {
        let d = mu.len();
        GaussianSummary {
            dataset: name.into(),
            n: 10,
            mu: DVector::from_row_slice(mu),
            sigma: DMatrix::from_row_slice(d, d, sigma),
        }
    }

    #[test]
    fn two_point_moments() {
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let s = GaussianSummary::from_rows("x", &rows, 0.0).unwrap();
        assert_eq!(s.mu.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
    }

    #[test]
    fn identical_points_leave_only_ridge() {
        let rows = DMatrix::from_element(4, 3, 0.3);
        let s = GaussianSummary::from_rows("x", &rows, 1e-6).unwrap();
        assert!((s.sigma.clone() - DMatrix::identity(3, 3) * 1e-6).abs().max() < 1e-18);
    }

    #[test]
    fn single_sample_rejected() {
        let rows = DMatrix::from_element(1, 3, 0.3);
        assert!(matches!(GaussianSummary::from_rows("x", &rows, 0.0), Err(SimilarityError::TooFewSamples { .. })));
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = summary("a", &[0.0], &[1.0]);
        let b = summary("b", &[3.0], &[4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn identity_covariances_reduce_to_mean_shift() {
        let i3: Vec<f64> = DMatrix::<f64>::identity(3, 3).as_slice().to_vec();
        let a = summary("a", &[1.0, 2.0, 3.0], &i3);
        let b = summary("b", &[0.0, 0.0, 1.0], &i3);
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = summary("a", &[0.0], &[1.0]);
        let b = summary("b", &[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(frechet_distance(&a, &b), Err(SimilarityError::DimensionMismatch(1, 2))));
    }

    fn matrix(values: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix {
            datasets: (0..values.len()).map(|i| format!("d{i}")).collect(),
            fd: values.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn uniqueness_two_datasets() {
        let u = uniqueness_scores(&matrix(&[&[0.0, 2.5], &[2.5, 0.0]]));
        assert!(u.iter().all(|x| x.score == 2.5));
    }

    #[test]
    fn overlap_thresholds() {
        let sm = matrix(&[&[0.0, 1.0, 5.0], &[1.0, 0.0, 3.0], &[5.0, 3.0, 0.0]]);
        assert!(high_overlap_pairs(&sm, OverlapThreshold::Absolute(0.5)).is_empty());
        assert_eq!(high_overlap_pairs(&sm, OverlapThreshold::Quantile(1.0)).len(), 3);
        let first = &high_overlap_pairs(&sm, OverlapThreshold::Quantile(0.0))[0];
        assert_eq!((first.a.as_str(), first.b.as_str(), first.fd), ("d0", "d1", 1.0));
    }
}
