//! Full-covariance Gaussian mixture fitted by EM, log-density evaluation, and
//! flagging of the densest and sparsest samples.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::geometry::{pca_reduce, GeometryError};
use crate::stats::substream;

pub const DEFAULT_COMPONENTS: usize = 16;
pub const DEFAULT_REDUCED_DIM: usize = 16;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_Q_LOW: f64 = 0.025;
pub const DEFAULT_Q_HIGH: f64 = 0.975;
pub const BIC_SWEEP: [usize; 4] = [4, 8, 16, 32];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("{n} points cannot support {k} components")]
    TooFewPoints { n: usize, k: usize },
    #[error("need at least one component and one dimension")]
    EmptyModel,
    #[error("non-finite log-likelihood at iteration {iteration}")]
    NonFiniteLikelihood { iteration: usize },
    #[error("covariance of component {component} is not positive definite at iteration {iteration}")]
    NotPositiveDefinite { component: usize, iteration: usize },
    #[error("dimension mismatch: model has {expected}, points have {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no scores to threshold")]
    EmptyScores,
    #[error("{ids} ids for {scores} scores")]
    LengthMismatch { ids: usize, scores: usize },
    #[error("quantiles must satisfy 0 <= low < high <= 1, got {low} and {high}")]
    InvalidQuantiles { low: f64, high: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub components: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: DEFAULT_COMPONENTS,
            seed: 42,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            ridge: DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Mean per-sample log-likelihood after every EM step, starting with the initial parameters.
    pub log_likelihood_trace: Vec<f64>,
    cholesky: Vec<Cholesky<f64, Dyn>>,
}

impl GmmModel {
    /// Builds a model from explicit parameters.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self, DensityError> {
        if weights.is_empty() || means.is_empty() || means[0].is_empty() {
            return Err(DensityError::EmptyModel);
        }
        let cholesky = factor(&covariances, 0)?;
        Ok(Self {
            weights,
            means,
            covariances,
            converged: true,
            iterations: 0,
            log_likelihood_trace: Vec::new(),
            cholesky,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean_log_likelihood(&self) -> f64 {
        self.log_likelihood_trace.last().copied().unwrap_or(f64::NAN)
    }

    fn component_log_pdf(&self, k: usize, x: &DVector<f64>) -> f64 {
        let chol = &self.cholesky[k];
        let diff = x - &self.means[k];
        let z = chol.l_dirty().solve_lower_triangular(&diff).expect("triangular solve on a valid factor");
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (self.dim() as f64 * LN_2PI + log_det + z.norm_squared())
    }

    /// `ln w_k + ln N(x | mu_k, S_k)` for every component.
    fn weighted_log_probs(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.components()).map(|k| self.weights[k].ln() + self.component_log_pdf(k, x)).collect()
    }

    /// Number of free parameters (weights, means, full covariances).
    pub fn parameter_count(&self) -> usize {
        let (k, p) = (self.components(), self.dim());
        (k - 1) + k * p + k * p * (p + 1) / 2
    }
}

fn factor(covariances: &[DMatrix<f64>], iteration: usize) -> Result<Vec<Cholesky<f64, Dyn>>, DensityError> {
    covariances
        .iter()
        .enumerate()
        .map(|(component, c)| {
            Cholesky::new(c.clone()).ok_or(DensityError::NotPositiveDefinite { component, iteration })
        })
        .collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn rows_of(points: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..points.nrows()).map(|i| points.row(i).transpose()).collect()
}

/// k-means++ seeding: first center uniform, the rest drawn proportional to
/// squared distance from the nearest chosen center.
fn kmeans_pp(rows: &[DVector<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, 0);
    let n = rows.len();
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = rows.iter().map(|x| (x - &rows[centers[0]]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(next);
        for (i, x) in rows.iter().enumerate() {
            d2[i] = d2[i].min((x - &rows[next]).norm_squared());
        }
    }
    centers
}

struct Params {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

fn m_step(rows: &[DVector<f64>], resp: &[Vec<f64>], prev: &Params, ridge: f64) -> Params {
    let p = rows[0].len();
    let k = prev.weights.len();
    let per_component: Vec<(f64, DVector<f64>, DMatrix<f64>)> = (0..k)
        .into_par_iter()
        .map(|c| {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            if nk <= 10.0 * f64::EPSILON {
                return (nk, prev.means[c].clone(), prev.covariances[c].clone());
            }
            let mut mean = DVector::zeros(p);
            for (x, r) in rows.iter().zip(resp) {
                mean.axpy(r[c], x, 1.0);
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(p, p);
            for (x, r) in rows.iter().zip(resp) {
                let diff = x - &mean;
                cov.syger(r[c], &diff, &diff, 1.0);
            }
            cov /= nk;
            cov.fill_upper_triangle_with_lower_triangle();
            for i in 0..p {
                cov[(i, i)] += ridge;
            }
            (nk, mean, cov)
        })
        .collect();
    let floor = 10.0 * f64::EPSILON;
    let total: f64 = per_component.iter().map(|(nk, _, _)| nk.max(floor)).sum();
    let mut out =
        Params { weights: Vec::with_capacity(k), means: Vec::with_capacity(k), covariances: Vec::with_capacity(k) };
    for (nk, mean, cov) in per_component {
        out.weights.push(nk.max(floor) / total);
        out.means.push(mean);
        out.covariances.push(cov);
    }
    out
}

/// Mean log-likelihood and responsibilities under `model`.
fn e_step(model: &GmmModel, rows: &[DVector<f64>]) -> (f64, Vec<Vec<f64>>) {
    let per_point: Vec<(f64, Vec<f64>)> = rows
        .par_iter()
        .map(|x| {
            let lp = model.weighted_log_probs(x);
            let lse = log_sum_exp(&lp);
            (lse, lp.iter().map(|v| (v - lse).exp()).collect())
        })
        .collect();
    let ll = per_point.iter().map(|(l, _)| l).sum::<f64>() / rows.len() as f64;
    (ll, per_point.into_iter().map(|(_, r)| r).collect())
}

fn model_from(params: Params, iteration: usize) -> Result<GmmModel, DensityError> {
    let cholesky = factor(&params.covariances, iteration)?;
    Ok(GmmModel {
        weights: params.weights,
        means: params.means,
        covariances: params.covariances,
        converged: false,
        iterations: iteration,
        log_likelihood_trace: Vec::new(),
        cholesky,
    })
}

/// EM from k-means++ seeding (hard assignment to the nearest seed, then
/// alternating steps) until the mean log-likelihood gains less than `tol` or
/// `max_iter` steps have run.
pub fn fit_gmm(points: &DMatrix<f64>, config: &GmmConfig) -> Result<GmmModel, DensityError> {
    let (n, p) = points.shape();
    let k = config.components;
    if k == 0 || p == 0 {
        return Err(DensityError::EmptyModel);
    }
    if n < k {
        return Err(DensityError::TooFewPoints { n, k });
    }
    let rows = rows_of(points);
    let centers = kmeans_pp(&rows, k, config.seed);

    let mut init = Params {
        weights: vec![1.0 / k as f64; k],
        means: centers.iter().map(|&c| rows[c].clone()).collect(),
        covariances: vec![DMatrix::identity(p, p); k],
    };
    let hard: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| {
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    (x - &init.means[a]).norm_squared().total_cmp(&(x - &init.means[b]).norm_squared()).then(a.cmp(&b))
                })
                .unwrap();
            (0..k).map(|c| if c == nearest { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    // Components that captured no point fall back to the global spread.
    let global = m_step(
        &rows,
        &vec![vec![1.0]; n],
        &Params { weights: vec![1.0], means: vec![DVector::zeros(p)], covariances: vec![DMatrix::identity(p, p)] },
        config.ridge,
    );
    init.covariances = vec![global.covariances[0].clone(); k];
    let params = m_step(&rows, &hard, &init, config.ridge);

    let mut model = model_from(params, 0)?;
    let (mut ll, mut resp) = e_step(&model, &rows);
    if !ll.is_finite() {
        return Err(DensityError::NonFiniteLikelihood { iteration: 0 });
    }
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iteration = 0;
    while iteration < config.max_iter {
        iteration += 1;
        let prev = Params {
            weights: model.weights.clone(),
            means: model.means.clone(),
            covariances: model.covariances.clone(),
        };
        model = model_from(m_step(&rows, &resp, &prev, config.ridge), iteration)?;
        let (next_ll, next_resp) = e_step(&model, &rows);
        if !next_ll.is_finite() {
            return Err(DensityError::NonFiniteLikelihood { iteration });
        }
        trace.push(next_ll);
        let gain = next_ll - ll;
        ll = next_ll;
        resp = next_resp;
        if gain < config.tol {
            converged = true;
            break;
        }
    }
    model.converged = converged;
    model.iterations = iteration;
    model.log_likelihood_trace = trace;
    Ok(model)
}

/// Log mixture density per row, via log-sum-exp.
pub fn log_density(model: &GmmModel, points: &DMatrix<f64>) -> Result<Vec<f64>, DensityError> {
    if points.ncols() != model.dim() {
        return Err(DensityError::DimensionMismatch { expected: model.dim(), got: points.ncols() });
    }
    Ok(rows_of(points).par_iter().map(|x| log_sum_exp(&model.weighted_log_probs(x))).collect())
}

/// Bayesian information criterion on the fitted points.
pub fn bic(model: &GmmModel, n: usize) -> f64 {
    -2.0 * model.mean_log_likelihood() * n as f64 + model.parameter_count() as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub q_low: f64,
    pub q_high: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub sparse_ids: Vec<String>,
    pub dense_ids: Vec<String>,
    pub log_density: Vec<f64>,
}

/// Number of samples in a tail of mass `q` over `n` samples: `ceil(q n)`,
/// with a small allowance so that e.g. `0.025 * 1000` counts as exactly 25.
fn tail_count(q: f64, n: usize) -> usize {
    ((q * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Flags samples in the lower and upper tails. The low threshold is the
/// order statistic just above the `ceil(q_low n)` smallest scores and only
/// scores strictly below it are flagged, so ties at the threshold stay
/// unflagged; the high side mirrors this. A tail covering all `n` samples
/// flags every sample.
pub fn density_extremes(
    ids: &[String],
    scores: &[f64],
    q_low: f64,
    q_high: f64,
) -> Result<DensityReport, DensityError> {
    if scores.is_empty() {
        return Err(DensityError::EmptyScores);
    }
    if ids.len() != scores.len() {
        return Err(DensityError::LengthMismatch { ids: ids.len(), scores: scores.len() });
    }
    if !(0.0..=1.0).contains(&q_low) || !(0.0..=1.0).contains(&q_high) || q_low >= q_high {
        return Err(DensityError::InvalidQuantiles { low: q_low, high: q_high });
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (k_low, k_high) = (tail_count(q_low, n), tail_count(1.0 - q_high, n));
    let low_threshold = sorted[k_low.min(n - 1)];
    let high_threshold = sorted[n - 1 - k_high.min(n - 1)];
    let pick = |pred: &dyn Fn(f64) -> bool| -> Vec<String> {
        ids.iter().zip(scores).filter(|(_, &s)| pred(s)).map(|(id, _)| id.clone()).collect()
    };
    Ok(DensityReport {
        q_low,
        q_high,
        low_threshold,
        high_threshold,
        sparse_ids: pick(&|s| k_low == n || s < low_threshold),
        dense_ids: pick(&|s| k_high == n || s > high_threshold),
        log_density: scores.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub reduced_dim: usize,
    pub gmm: GmmConfig,
    pub q_low: f64,
    pub q_high: f64,
    /// Pick the component count by BIC over these values instead of `gmm.components`.
    pub bic_sweep: Option<Vec<usize>>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            reduced_dim: DEFAULT_REDUCED_DIM,
            gmm: GmmConfig::default(),
            q_low: DEFAULT_Q_LOW,
            q_high: DEFAULT_Q_HIGH,
            bic_sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityAudit {
    pub space: String,
    pub components: usize,
    pub converged: bool,
    pub iterations: usize,
    pub mean_log_likelihood: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub bic: Vec<(usize, f64)>,
    pub report: DensityReport,
}

/// PCA-reduces the corpus, fits the mixture and flags the tails.
pub fn density_audit(corpus: &Corpus, config: &DensityConfig) -> Result<DensityAudit, DensityError> {
    let p = config.reduced_dim.min(corpus.len()).min(corpus.dim());
    let reduced = pca_reduce(&corpus.embeddings().to_dmatrix(), p)?;
    let points = &reduced.values;
    let mut bic_table = Vec::new();
    let model = match &config.bic_sweep {
        Some(candidates) => {
            let mut best: Option<(f64, GmmModel)> = None;
            for &k in candidates.iter().filter(|&&k| k >= 1 && k <= corpus.len()) {
                let m = fit_gmm(points, &GmmConfig { components: k, ..config.gmm })?;
                let score = bic(&m, corpus.len());
                bic_table.push((k, score));
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, m));
                }
            }
            best.map(|(_, m)| m).ok_or(DensityError::TooFewPoints { n: corpus.len(), k: 1 })?
        }
        None => fit_gmm(points, &config.gmm)?,
    };
    let scores = log_density(&model, points)?;
    let ids: Vec<String> = corpus.records().iter().map(|r| r.id.clone()).collect();
    Ok(DensityAudit {
        space: format!("pca-{p}"),
        components: model.components(),
        converged: model.converged,
        iterations: model.iterations,
        mean_log_likelihood: model.mean_log_likelihood(),
        bic: bic_table,
        report: density_extremes(&ids, &scores, config.q_low, config.q_high)?,
    })
}
