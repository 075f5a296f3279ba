//! Filtered nearest-neighbor search and retrieval evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Field, MetadataRecord};
use crate::geometry::{cosine_distance, smallest_k};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("set exactly one of vector and sample_id")]
    AmbiguousTarget,
    #[error("unknown sample id {0}")]
    UnknownSample(String),
    #[error("query vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query vector must be finite and non-zero")]
    InvalidVector,
    #[error("no candidates left after applying {0}")]
    EmptyPool(String),
    #[error("dataset {0} not in corpus")]
    UnknownDataset(String),
    #[error("no samples in {dataset} carry {field}")]
    NoLabeledSamples { dataset: String, field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    All,
    Dataset(String),
    Ids(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub k: usize,
    /// Field to allowed values, compared against the field's string rendering.
    #[serde(default)]
    pub filters: BTreeMap<Field, Vec<String>>,
    #[serde(default)]
    pub pool: Pool,
}

impl RetrievalQuery {
    pub fn by_id(id: &str, k: usize) -> Self {
        Self { vector: None, sample_id: Some(id.to_string()), k, filters: BTreeMap::new(), pool: Pool::All }
    }

    pub fn by_vector(vector: Vec<f64>, k: usize) -> Self {
        Self { vector: Some(vector), sample_id: None, k, filters: BTreeMap::new(), pool: Pool::All }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: usize,
    pub id: String,
    pub distance: f64,
    pub metadata: MetadataRecord,
}

fn describe_filters(filters: &BTreeMap<Field, Vec<String>>, pool: &Pool) -> String {
    let mut parts: Vec<String> = filters.iter().map(|(f, v)| format!("{} in [{}]", f.name(), v.join(", "))).collect();
    match pool {
        Pool::All => {}
        Pool::Dataset(d) => parts.push(format!("pool dataset {d}")),
        Pool::Ids(ids) => parts.push(format!("pool of {} ids", ids.len())),
    }
    if parts.is_empty() {
        "no filters".to_string()
    } else {
        parts.join("; ")
    }
}

/// Candidate rows after pool and filter restrictions, in corpus order.
pub fn candidate_rows(
    corpus: &Corpus,
    filters: &BTreeMap<Field, Vec<String>>,
    pool: &Pool,
) -> Result<Vec<usize>, RetrievalError> {
    let allowed_ids: Option<BTreeSet<&str>> = match pool {
        Pool::Ids(ids) => Some(ids.iter().map(String::as_str).collect()),
        _ => None,
    };
    if let Pool::Dataset(d) = pool {
        if !corpus.records().iter().any(|r| &r.dataset == d) {
            return Err(RetrievalError::UnknownDataset(d.clone()));
        }
    }
    Ok((0..corpus.len())
        .filter(|&i| {
            let r = corpus.record(i);
            let in_pool = match pool {
                Pool::All => true,
                Pool::Dataset(d) => &r.dataset == d,
                Pool::Ids(_) => allowed_ids.as_ref().unwrap().contains(r.id.as_str()),
            };
            in_pool && filters.iter().all(|(f, vals)| r.value(*f).is_some_and(|v| vals.contains(&v)))
        })
        .collect())
}

fn ranked(corpus: &Corpus, query: &[f32], candidates: &[usize], exclude: Option<usize>, k: usize) -> Vec<(f64, usize)> {
    smallest_k(
        candidates
            .iter()
            .filter(|&&r| Some(r) != exclude)
            .map(|&r| (cosine_distance(query, corpus.vector(r)), (corpus.record(r).id.as_str(), r))),
        k,
    )
    .into_iter()
    .map(|(d, (_, r))| (d, r))
    .collect()
}

/// Top-k cosine neighbors over the filtered pool, ties broken by id. A query
/// by sample id never returns that sample.
pub fn search(corpus: &Corpus, query: &RetrievalQuery) -> Result<Vec<SearchHit>, RetrievalError> {
    if query.k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let (qvec, exclude): (Vec<f32>, Option<usize>) = match (&query.vector, &query.sample_id) {
        (Some(v), None) => {
            if v.len() != corpus.dim() {
                return Err(RetrievalError::DimensionMismatch { expected: corpus.dim(), got: v.len() });
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(RetrievalError::InvalidVector);
            }
            (v.iter().map(|x| (x / norm) as f32).collect(), None)
        }
        (None, Some(id)) => {
            let i = corpus.index_of(id).ok_or_else(|| RetrievalError::UnknownSample(id.clone()))?;
            (corpus.vector(i).to_vec(), Some(i))
        }
        _ => return Err(RetrievalError::AmbiguousTarget),
    };
    let candidates = candidate_rows(corpus, &query.filters, &query.pool)?;
    if candidates.iter().all(|&r| Some(r) == exclude) {
        return Err(RetrievalError::EmptyPool(describe_filters(&query.filters, &query.pool)));
    }
    Ok(ranked(corpus, &qvec, &candidates, exclude, query.k)
        .into_iter()
        .enumerate()
        .map(|(rank, (distance, r))| SearchHit {
            rank: rank + 1,
            id: corpus.record(r).id.clone(),
            distance,
            metadata: corpus.record(r).clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub precision: f64,
    /// `hits / R`; `None` when nothing in the pool is relevant.
    pub recall: Option<f64>,
    /// `hits / min(R, k)`.
    pub recall_capped: Option<f64>,
    /// Sum of precision at each relevant rank within k, over `min(R, k)`.
    pub average_precision: f64,
}

pub fn retrieval_metrics(relevant: &[bool], total_relevant: usize, k: usize) -> RetrievalMetrics {
    let mut hits = 0usize;
    let mut ap = 0.0;
    // Exact running sum num/den while it fits, so simple cases round once.
    let mut exact: Option<(u128, u128)> = Some((0, 1));
    for (i, &rel) in relevant.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits as u128, (i + 1) as u128));
        }
    }
    let cap = total_relevant.min(k);
    let average_precision = match (exact, cap) {
        (_, 0) => 0.0,
        (Some((n, d)), c) => d.checked_mul(c as u128).map_or(ap / c as f64, |d| n as f64 / d as f64),
        (None, c) => ap / c as f64,
    };
    RetrievalMetrics {
        precision: hits as f64 / k as f64,
        recall: (total_relevant > 0).then(|| hits as f64 / total_relevant as f64),
        recall_capped: (cap > 0).then(|| hits as f64 / cap as f64),
        average_precision,
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_fraction(n1: u128, d1: u128, n2: u128, d2: u128) -> Option<(u128, u128)> {
    let n = n1.checked_mul(d2)?.checked_add(n2.checked_mul(d1)?)?;
    let d = d1.checked_mul(d2)?;
    let g = gcd(n, d).max(1);
    Some((n / g, d / g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    SameDataset,
    Atlas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub total_relevant: usize,
    pub metrics: RetrievalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEvalReport {
    pub dataset: String,
    pub mode: RetrievalMode,
    pub label_field: Field,
    pub k: usize,
    pub n_queries: usize,
    /// Queries with no relevant item in the pool; excluded from the means.
    pub n_no_relevant: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub recall_capped_at_k: f64,
    pub ap_at_k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryMetrics>>,
}

/// Every labelled sample of `dataset` queries its own dataset or the whole
/// corpus (self excluded); relevance is an equal `label_field` value.
/// Returns one report per entry of `ks`.
pub fn eval_retrieval(
    corpus: &Corpus,
    dataset: &str,
    label_field: Field,
    mode: RetrievalMode,
    ks: &[usize],
    per_query: bool,
) -> Result<Vec<RetrievalEvalReport>, RetrievalError> {
    if ks.contains(&0) || ks.is_empty() {
        return Err(RetrievalError::ZeroK);
    }
    let members: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.record(i).dataset == dataset).collect();
    if members.is_empty() {
        return Err(RetrievalError::UnknownDataset(dataset.to_string()));
    }
    let queries: Vec<usize> = members.iter().copied().filter(|&i| corpus.record(i).has(label_field)).collect();
    if queries.is_empty() {
        return Err(RetrievalError::NoLabeledSamples { dataset: dataset.to_string(), field: label_field.name() });
    }
    let pool: Vec<usize> = match mode {
        RetrievalMode::SameDataset => members,
        RetrievalMode::Atlas => (0..corpus.len()).collect(),
    };
    let labels: Vec<Option<String>> = (0..corpus.len()).map(|i| corpus.record(i).value(label_field)).collect();
    let mut label_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &r in &pool {
        if let Some(l) = &labels[r] {
            *label_counts.entry(l.as_str()).or_default() += 1;
        }
    }
    let k_max = *ks.iter().max().unwrap();
    let per: Vec<(usize, Vec<bool>, usize)> = queries
        .par_iter()
        .map(|&q| {
            let label = labels[q].as_deref();
            let hits = ranked(corpus, corpus.vector(q), &pool, Some(q), k_max);
            let relevant = hits.iter().map(|&(_, r)| labels[r].as_deref() == label).collect();
            let total = label_counts[label.unwrap()] - 1;
            (q, relevant, total)
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let rows: Vec<QueryMetrics> = per
                .iter()
                .map(|(q, rel, total)| QueryMetrics {
                    id: corpus.record(*q).id.clone(),
                    total_relevant: *total,
                    metrics: retrieval_metrics(rel, *total, k),
                })
                .collect();
            let scored: Vec<&QueryMetrics> = rows.iter().filter(|m| m.total_relevant > 0).collect();
            let mean = |f: &dyn Fn(&RetrievalMetrics) -> f64| {
                if scored.is_empty() {
                    0.0
                } else {
                    scored.iter().map(|m| f(&m.metrics)).sum::<f64>() / scored.len() as f64
                }
            };
            RetrievalEvalReport {
                dataset: dataset.to_string(),
                mode,
                label_field,
                k,
                n_queries: scored.len(),
                n_no_relevant: rows.len() - scored.len(),
                precision_at_k: mean(&|m| m.precision),
                recall_at_k: mean(&|m| m.recall.unwrap_or(0.0)),
                recall_capped_at_k: mean(&|m| m.recall_capped.unwrap_or(0.0)),
                ap_at_k: mean(&|m| m.average_precision),
                per_query: per_query.then_some(rows),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSuite {
    pub label_field: Field,
    pub ks: Vec<usize>,
    pub reports: Vec<RetrievalEvalReport>,
    pub skipped: Vec<String>,
}

/// Both modes for every dataset.
pub fn retrieval_suite(corpus: &Corpus, label_field: Field, ks: &[usize]) -> RetrievalSuite {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for dataset in corpus.rows_by_dataset().keys() {
        for mode in [RetrievalMode::SameDataset, RetrievalMode::Atlas] {
            match eval_retrieval(corpus, dataset, label_field, mode, ks, false) {
                Ok(r) => reports.extend(r),
                Err(e) => {
                    skipped.push(format!("{dataset}: {e}"));
                    break;
                }
            }
        }
    }
    RetrievalSuite { label_field, ks: ks.to_vec(), reports, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_ap() {
        let m = retrieval_metrics(&[true, false, true], 2, 3);
        assert_eq!(m.average_precision, 5.0 / 6.0);
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, Some(1.0));
    }

    #[test]
    fn all_relevant_and_none_relevant() {
        let m = retrieval_metrics(&[true; 5], 8, 5);
        assert_eq!((m.precision, m.recall, m.average_precision), (1.0, Some(5.0 / 8.0), 1.0));
        assert_eq!(m.recall_capped, Some(1.0));
        let z = retrieval_metrics(&[false; 5], 3, 5);
        assert_eq!((z.precision, z.recall, z.average_precision), (0.0, Some(0.0), 0.0));
        let empty = retrieval_metrics(&[false; 2], 0, 2);
        assert_eq!(empty.recall, None);
    }
}
