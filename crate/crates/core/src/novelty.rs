//! Yearly novelty of newly released samples against the historical pool,
//! with a bootstrap resampling baseline, plus label-coverage analytics.
//!
//! For a year `t`, the new set holds samples released in `t` and the pool
//! holds everything released before `t`. A sample's score is the mean cosine
//! distance to its `k` nearest pool neighbors; the yearly value is the mean
//! score over the new set. The baseline redraws pseudo-cohorts of the same
//! size from the pool (with replacement) and scores them against the pool
//! with the self-match excluded.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Field, UnknownField};
use crate::geometry::{knn, GeometryError};
use crate::stats::{quantile_sorted, stream_id, substream};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 200;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum NoveltyError {
    #[error("no samples released in {year}")]
    EmptyCurrentYear { year: i32 },
    #[error("no samples released before {year} (empty historical pool)")]
    EmptyPool { year: i32 },
    #[error("historical pool for {year} has {pool} samples, need at least {needed}")]
    PoolTooSmall { year: i32, pool: usize, needed: usize },
    #[error("bootstrap iterations must be at least 1")]
    ZeroIterations,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    UnknownField(#[from] UnknownField),
    #[error("invalid ICD block table: {0}")]
    BlockTable(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Rows released in `year` and rows released strictly earlier.
pub fn year_partition(corpus: &Corpus, year: i32) -> (Vec<usize>, Vec<usize>) {
    let mut current = Vec::new();
    let mut pool = Vec::new();
    for (i, r) in corpus.records().iter().enumerate() {
        match r.year {
            Some(y) if y == year => current.push(i),
            Some(y) if y < year => pool.push(i),
            _ => {}
        }
    }
    (current, pool)
}

/// Mean distance to the `k` nearest pool rows, one value per query.
fn knn_scores(
    corpus: &Corpus,
    queries: &[usize],
    pool: &[usize],
    k: usize,
    exclude_self: bool,
) -> Result<Vec<f64>, GeometryError> {
    Ok(knn(corpus.embeddings(), queries, pool, k, exclude_self)?.iter().map(|l| l.mean_distance()).collect())
}

fn check_sets(year: i32, current: &[usize], pool: &[usize]) -> Result<(), NoveltyError> {
    if current.is_empty() {
        return Err(NoveltyError::EmptyCurrentYear { year });
    }
    if pool.is_empty() {
        return Err(NoveltyError::EmptyPool { year });
    }
    Ok(())
}

/// Raw yearly novelty.
pub fn yearly_novelty(corpus: &Corpus, year: i32, k: usize) -> Result<f64, NoveltyError> {
    if k == 0 {
        return Err(NoveltyError::ZeroK);
    }
    let (current, pool) = year_partition(corpus, year);
    check_sets(year, &current, &pool)?;
    if k > pool.len() {
        return Err(NoveltyError::PoolTooSmall { year, pool: pool.len(), needed: k });
    }
    let scores = knn_scores(corpus, &current, &pool, k, false)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBaseline {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub draws: Vec<f64>,
}

/// Resampling baseline for `year`. Draw `b` uses the generator stream derived
/// from `(year, b)`, and resampling indices are positions within the pool.
pub fn bootstrap_baseline(
    corpus: &Corpus,
    year: i32,
    k: usize,
    iterations: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapBaseline, NoveltyError> {
    if iterations == 0 {
        return Err(NoveltyError::ZeroIterations);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(NoveltyError::InvalidAlpha(alpha));
    }
    if k == 0 {
        return Err(NoveltyError::ZeroK);
    }
    let (current, pool) = year_partition(corpus, year);
    check_sets(year, &current, &pool)?;
    if pool.len() < 2 || k + 1 > pool.len() {
        return Err(NoveltyError::PoolTooSmall { year, pool: pool.len(), needed: (k + 1).max(2) });
    }
    // Each pool point's self-excluded score is fixed, so draws only resample them.
    let pool_scores = knn_scores(corpus, &pool, &pool, k, true)?;
    let cohort = current.len();
    let draws: Vec<f64> = (0..iterations as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, stream_id(year as i64, b));
            let total: f64 = (0..cohort).map(|_| pool_scores[rng.random_range(0..pool_scores.len())]).sum();
            total / cohort as f64
        })
        .collect();
    let mut sorted = draws.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapBaseline {
        mean: draws.iter().sum::<f64>() / iterations as f64,
        ci_low: quantile_sorted(&sorted, alpha / 2.0),
        ci_high: quantile_sorted(&sorted, 1.0 - alpha / 2.0),
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyParams {
    pub k: usize,
    pub bootstrap_iterations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for NoveltyParams {
    fn default() -> Self {
        Self { k: DEFAULT_K, bootstrap_iterations: DEFAULT_BOOTSTRAP_ITERATIONS, alpha: DEFAULT_ALPHA, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearlyNovelty {
    pub year: i32,
    pub n_new: usize,
    pub n_pool: usize,
    pub nu_observed: f64,
    pub nu_baseline_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Observed over baseline mean; absent when the baseline is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub params: NoveltyParams,
    pub years: Vec<YearlyNovelty>,
    pub excluded_missing_year: usize,
    pub warnings: Vec<String>,
}

pub fn novelty_series(corpus: &Corpus, params: &NoveltyParams) -> Result<NoveltyReport, NoveltyError> {
    if params.k == 0 {
        return Err(NoveltyError::ZeroK);
    }
    if params.bootstrap_iterations == 0 {
        return Err(NoveltyError::ZeroIterations);
    }
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(NoveltyError::InvalidAlpha(params.alpha));
    }
    let years: BTreeSet<i32> = corpus.records().iter().filter_map(|r| r.year).collect();
    let excluded_missing_year = corpus.records().iter().filter(|r| r.year.is_none()).count();
    let mut warnings = Vec::new();
    if excluded_missing_year > 0 {
        warnings.push(format!("{excluded_missing_year} samples without a release year were excluded"));
    }
    if years.len() < 2 {
        warnings.push(format!("need at least two distinct years, found {}", years.len()));
        return Ok(NoveltyReport { params: *params, years: Vec::new(), excluded_missing_year, warnings });
    }
    let mut entries = Vec::new();
    for &year in years.iter().skip(1) {
        let (current, pool) = year_partition(corpus, year);
        if pool.len() < params.k + 1 {
            warnings.push(format!(
                "year {year} skipped: pool of {} samples is smaller than k + 1 = {}",
                pool.len(),
                params.k + 1
            ));
            continue;
        }
        let nu = yearly_novelty(corpus, year, params.k)?;
        let base = bootstrap_baseline(corpus, year, params.k, params.bootstrap_iterations, params.alpha, params.seed)?;
        entries.push(YearlyNovelty {
            year,
            n_new: current.len(),
            n_pool: pool.len(),
            nu_observed: nu,
            nu_baseline_mean: base.mean,
            ci_low: base.ci_low,
            ci_high: base.ci_high,
            ratio: (base.mean != 0.0).then(|| nu / base.mean),
        });
    }
    Ok(NoveltyReport { params: *params, years: entries, excluded_missing_year, warnings })
}

/// Contiguous ICD-10 range such as `D10`..`D36`, compared on the three-character category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcdBlock {
    pub start: String,
    pub end: String,
    #[serde(default)]
    pub name: String,
}

impl IcdBlock {
    pub fn key(&self) -> String {
        format!("{}-{}", self.start, self.end)
    }
}

pub const UNMAPPED_BLOCK: &str = "unmapped";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IcdBlockTable {
    pub blocks: Vec<IcdBlock>,
}

fn icd_category(code: &str) -> String {
    code.chars().filter(|c| c.is_ascii_alphanumeric()).take(3).collect::<String>().to_ascii_uppercase()
}

impl IcdBlockTable {
    pub fn new(blocks: Vec<IcdBlock>) -> Result<Self, NoveltyError> {
        for b in &blocks {
            if b.start.len() != 3 || b.end.len() != 3 || b.start > b.end {
                return Err(NoveltyError::BlockTable(format!("bad range {}-{}", b.start, b.end)));
            }
        }
        Ok(Self { blocks })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NoveltyError> {
        let text = std::fs::read_to_string(path).map_err(|e| NoveltyError::BlockTable(e.to_string()))?;
        let blocks: Vec<IcdBlock> = serde_json::from_str(&text).map_err(|e| NoveltyError::BlockTable(e.to_string()))?;
        Self::new(blocks)
    }

    /// First block containing the code's category.
    pub fn block_of(&self, code: &str) -> Option<&IcdBlock> {
        let cat = icd_category(code);
        self.blocks.iter().find(|b| b.start.as_str() <= cat.as_str() && cat.as_str() <= b.end.as_str())
    }

    pub fn block_key(&self, code: &str) -> String {
        self.block_of(code).map(IcdBlock::key).unwrap_or_else(|| UNMAPPED_BLOCK.to_string())
    }
}

#[derive(Debug, Clone)]
pub enum Grouping {
    Field(Field),
    /// ICD code truncated to the block that contains it.
    IcdBlock(IcdBlockTable),
}

impl Grouping {
    fn key(&self, corpus: &Corpus, row: usize) -> Option<String> {
        let r = corpus.record(row);
        match self {
            Grouping::Field(f) => r.value(*f),
            Grouping::IcdBlock(table) => r.icd.as_deref().map(|c| table.block_key(c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNovelty {
    pub group: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// All samples in the group (prevalence).
    pub n_samples: usize,
    /// Samples that had a large enough earlier-year pool to be scored.
    pub n_scored: usize,
    pub n_datasets: usize,
    pub mean_novelty: f64,
}

/// Novelty of every dated sample against all samples from earlier years.
/// Samples whose pool holds fewer than `k` rows get `None`.
pub fn per_sample_novelty(corpus: &Corpus, k: usize) -> Result<Vec<Option<f64>>, NoveltyError> {
    if k == 0 {
        return Err(NoveltyError::ZeroK);
    }
    let years: BTreeSet<i32> = corpus.records().iter().filter_map(|r| r.year).collect();
    let mut out = vec![None; corpus.len()];
    for year in years {
        let (current, pool) = year_partition(corpus, year);
        if pool.len() < k {
            continue;
        }
        for (row, score) in current.iter().zip(knn_scores(corpus, &current, &pool, k, false)?) {
            out[*row] = Some(score);
        }
    }
    Ok(out)
}

/// Mean per-sample novelty and prevalence per group, sorted by group key.
pub fn grouped_novelty(corpus: &Corpus, grouping: &Grouping, k: usize) -> Result<Vec<GroupNovelty>, NoveltyError> {
    let scores = per_sample_novelty(corpus, k)?;
    struct Acc<'a> {
        n: usize,
        scored: usize,
        sum: f64,
        datasets: BTreeSet<&'a str>,
    }
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for (row, score) in scores.iter().enumerate() {
        let Some(key) = grouping.key(corpus, row) else { continue };
        let acc = groups.entry(key).or_insert_with(|| Acc { n: 0, scored: 0, sum: 0.0, datasets: BTreeSet::new() });
        acc.n += 1;
        acc.datasets.insert(corpus.record(row).dataset.as_str());
        if let Some(s) = score {
            acc.scored += 1;
            acc.sum += s;
        }
    }
    let description = |key: &str| match grouping {
        Grouping::IcdBlock(table) => {
            table.blocks.iter().find(|b| b.key() == key).map(|b| b.name.clone()).filter(|n| !n.is_empty())
        }
        Grouping::Field(_) => None,
    };
    Ok(groups
        .into_iter()
        .filter(|(_, a)| a.scored > 0)
        .map(|(group, a)| GroupNovelty {
            description: description(&group),
            group,
            n_samples: a.n,
            n_scored: a.scored,
            n_datasets: a.datasets.len(),
            mean_novelty: a.sum / a.scored as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub year: i32,
    pub stratum: String,
    pub cumulative_fraction: f64,
    pub codes_seen: usize,
}

pub const UNKNOWN_STRATUM: &str = "unknown";
pub const ALL_STRATUM: &str = "all";

/// Fraction of the global code universe (all codes on dated records) seen in
/// each stratum up to and including each year. Records without the stratum
/// field fall under `"unknown"`; with no stratify field everything is `"all"`.
pub fn cumulative_coverage(corpus: &Corpus, code_field: Field, stratify: Option<Field>) -> Vec<CoveragePoint> {
    let mut universe: BTreeSet<String> = BTreeSet::new();
    let mut years: BTreeSet<i32> = BTreeSet::new();
    // stratum -> year -> codes first listed that year
    let mut by_stratum: BTreeMap<String, BTreeMap<i32, BTreeSet<String>>> = BTreeMap::new();
    for r in corpus.records() {
        let (Some(year), Some(code)) = (r.year, r.value(code_field)) else { continue };
        let stratum = match stratify {
            Some(f) => r.value(f).unwrap_or_else(|| UNKNOWN_STRATUM.to_string()),
            None => ALL_STRATUM.to_string(),
        };
        universe.insert(code.clone());
        years.insert(year);
        by_stratum.entry(stratum).or_default().entry(year).or_default().insert(code);
    }
    let total = universe.len();
    let mut out = Vec::new();
    for (stratum, per_year) in by_stratum {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for &year in &years {
            if let Some(codes) = per_year.get(&year) {
                seen.extend(codes.iter().cloned());
            }
            out.push(CoveragePoint {
                year,
                stratum: stratum.clone(),
                cumulative_fraction: if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 },
                codes_seen: seen.len(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrphanLabel {
    pub code: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub n_samples: usize,
    pub first_year: i32,
    pub last_year: i32,
}

/// Codes whose most recent dated sample predates `last_seen_before`, sorted by
/// descending sample count then code.
pub fn orphan_labels(corpus: &Corpus, code_field: Field, last_seen_before: i32) -> Vec<OrphanLabel> {
    struct Span {
        n: usize,
        first: i32,
        last: i32,
        labels: HashMap<String, usize>,
    }
    let mut spans: BTreeMap<String, Span> = BTreeMap::new();
    for r in corpus.records() {
        let (Some(year), Some(code)) = (r.year, r.value(code_field)) else { continue };
        let s = spans.entry(code).or_insert(Span { n: 0, first: year, last: year, labels: HashMap::new() });
        s.n += 1;
        s.first = s.first.min(year);
        s.last = s.last.max(year);
        if let Some(l) = &r.label {
            *s.labels.entry(l.clone()).or_default() += 1;
        }
    }
    let mut out: Vec<OrphanLabel> = spans
        .into_iter()
        .filter(|(_, s)| s.last < last_seen_before)
        .map(|(code, s)| {
            let description =
                s.labels.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0))).map(|(l, _)| l);
            OrphanLabel { code, description, n_samples: s.n, first_year: s.first, last_year: s.last }
        })
        .collect();
    out.sort_by(|a, b| b.n_samples.cmp(&a.n_samples).then_with(|| a.code.cmp(&b.code)));
    out
}
