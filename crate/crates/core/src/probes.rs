//! Linear probes on frozen embeddings: multinomial logistic classifiers for
//! categorical fields, ridge regression for age, bootstrap CIs, and
//! imputation of absent metadata with provenance.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{age_bin, fst_group, Corpus, Field, MetadataRecord};
use crate::stats::{quantile_sorted, substream};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
const LBFGS_MEMORY: usize = 10;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("classifier needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("normal equations are singular; use lambda > 0")]
    Singular,
    #[error("metric {metric} does not apply to a {kind:?} probe")]
    MetricMismatch { metric: &'static str, kind: ProbeKind },
    #[error("length mismatch: {0} features vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("bootstrap needs at least one iteration")]
    ZeroIterations,
    #[error("alpha must be in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("field {0} cannot be probed")]
    UnsupportedField(&'static str),
    #[error("no training rows for field {0}")]
    NoTrainingData(&'static str),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("train and evaluation sets share {0} ids")]
    Overlap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Classifier,
    Regressor,
}

/// Probe kind for a metadata field; `None` for fields that are not probe targets.
pub fn probe_kind(field: Field) -> Option<ProbeKind> {
    match field {
        Field::Age => Some(ProbeKind::Regressor),
        Field::Fst
        | Field::Gender
        | Field::Origin
        | Field::BodyRegion
        | Field::Label
        | Field::Icd
        | Field::Modality => Some(ProbeKind::Classifier),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub target_field: String,
    pub kind: ProbeKind,
    /// Sorted class names; empty for regressors.
    pub classes: Vec<String>,
    /// `(d + 1) x C` (one column for regressors); the last row is the bias.
    pub weights: Vec<Vec<f64>>,
    pub lambda: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len() - 1
    }

    /// Raw linear scores `x W + b`, one per column.
    pub fn decision(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.weights[0].len();
        let d = self.dim();
        (0..cols)
            .map(|c| x.iter().zip(&self.weights[..d]).map(|(xi, w)| xi * w[c]).sum::<f64>() + self.weights[d][c])
            .collect()
    }

    /// Class index with the largest score; ties go to the earlier class.
    pub fn predict_class(&self, x: &[f64]) -> usize {
        let s = self.decision(x);
        let mut best = 0;
        for (c, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Targets {
        let rows = (0..features.nrows()).map(|i| features.row(i).iter().copied().collect::<Vec<f64>>());
        match self.kind {
            ProbeKind::Classifier => {
                Targets::Classes(rows.map(|x| self.classes[self.predict_class(&x)].clone()).collect())
            }
            ProbeKind::Regressor => Targets::Values(rows.map(|x| self.decision(&x)[0]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Classes(Vec<String>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i].clone()).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

fn check_features(x: &DMatrix<f64>) -> Result<(), ProbeError> {
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if !x[(i, j)].is_finite() {
                return Err(ProbeError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

/// Limited-memory BFGS with a backtracking Armijo line search, for smooth
/// convex objectives. `f` returns the value and gradient.
pub fn lbfgs(
    x0: DVector<f64>,
    f: impl Fn(&DVector<f64>) -> (f64, DVector<f64>),
    tol: f64,
    max_iter: usize,
) -> LbfgsResult {
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    while g.norm() >= tol && iterations < max_iter {
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        let gamma = history.back().map_or(1.0 / g.norm().max(1.0), |(s, y, _)| s.dot(y) / y.dot(y));
        let mut dir = q * gamma;
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&dir);
            dir += s * (a - b);
        }
        dir = -dir;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            history.clear();
            dir = -g.clone();
            slope = -g.norm_squared();
        }
        let mut step = 1.0;
        let (mut x_new, mut f_new, mut g_new);
        loop {
            x_new = &x + &dir * step;
            (f_new, g_new) = f(&x_new);
            if f_new <= fx + 1e-4 * step * slope || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let stalled = f_new >= fx && s.norm() <= 1e-16 * x.norm().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        if stalled {
            break;
        }
        if sy > 1e-12 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
    }
    let gradient_norm = g.norm();
    LbfgsResult { x, value: fx, iterations, gradient_norm, converged: gradient_norm < tol }
}

/// Penalized multinomial negative log-likelihood and gradient at `w`
/// (flattened column-major `(d + 1) x C`, last row the unpenalized bias):
/// `sum_i -log softmax(x_i W + b)[y_i] + lambda/2 * ||W||^2`.
pub fn softmax_objective(
    x: &DMatrix<f64>,
    y: &[usize],
    classes: usize,
    lambda: f64,
    w: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let (n, d) = x.shape();
    let wm = DMatrix::from_column_slice(d + 1, classes, w.as_slice());
    let weights = wm.rows(0, d);
    let bias = wm.row(d);
    let mut logits = x * weights;
    for mut row in logits.row_iter_mut() {
        row += &bias;
    }
    let mut value = 0.0;
    let mut resid = DMatrix::zeros(n, classes);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.max();
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        value += lse - row[y[i]];
        for c in 0..classes {
            resid[(i, c)] = (row[c] - lse).exp();
        }
        resid[(i, y[i])] -= 1.0;
    }
    value += 0.5 * lambda * weights.norm_squared();
    let mut grad = DMatrix::zeros(d + 1, classes);
    grad.rows_mut(0, d).copy_from(&(x.transpose() * &resid + weights * lambda));
    grad.row_mut(d).copy_from(&resid.row_sum());
    (value, DVector::from_column_slice(grad.as_slice()))
}

pub fn train_classifier_probe(
    target_field: &str,
    x: &DMatrix<f64>,
    labels: &[String],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ProbeModel, ProbeError> {
    if x.nrows() != labels.len() {
        return Err(ProbeError::LengthMismatch(x.nrows(), labels.len()));
    }
    check_features(x)?;
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(ProbeError::SingleClass(classes.len()));
    }
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();
    let d = x.ncols();
    let c = classes.len();
    let result = lbfgs(DVector::zeros((d + 1) * c), |w| softmax_objective(x, &y, c, lambda, w), tol, max_iter);
    let wm = DMatrix::from_column_slice(d + 1, c, result.x.as_slice());
    Ok(ProbeModel {
        target_field: target_field.to_string(),
        kind: ProbeKind::Classifier,
        classes,
        weights: wm.row_iter().map(|r| r.iter().copied().collect()).collect(),
        lambda,
        iterations: result.iterations,
        gradient_norm: result.gradient_norm,
        converged: result.converged,
    })
}

/// Ridge regression `(Xc^T Xc + lambda I)^-1 Xc^T yc` on centered data; the
/// bias is `mean(y) - mean(x) . w`.
pub fn train_regressor_probe(
    target_field: &str,
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
) -> Result<ProbeModel, ProbeError> {
    let (n, d) = x.shape();
    if n != y.len() {
        return Err(ProbeError::LengthMismatch(n, y.len()));
    }
    if n == 0 {
        return Err(ProbeError::Empty("training"));
    }
    check_features(x)?;
    let x_mean = x.row_mean();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda;
    if lambda == 0.0 {
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.max();
        if eig.eigenvalues.min() <= 1e-12 * max.max(f64::MIN_POSITIVE) {
            return Err(ProbeError::Singular);
        }
    }
    let rhs = xc.transpose() * yc;
    let w = gram.cholesky().ok_or(ProbeError::Singular)?.solve(&rhs);
    let bias = y_mean - x_mean.transpose().dot(&w);
    let mut weights: Vec<Vec<f64>> = w.iter().map(|&v| vec![v]).collect();
    weights.push(vec![bias]);
    Ok(ProbeModel {
        target_field: target_field.to_string(),
        kind: ProbeKind::Regressor,
        classes: Vec::new(),
        weights,
        lambda,
        iterations: 0,
        gradient_norm: 0.0,
        converged: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "macro_f1")]
    MacroF1,
    #[serde(rename = "r2")]
    R2,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::MacroF1 => "macro_f1",
            Metric::R2 => "r2",
        }
    }

    pub fn for_kind(kind: ProbeKind) -> Metric {
        match kind {
            ProbeKind::Classifier => Metric::MacroF1,
            ProbeKind::Regressor => Metric::R2,
        }
    }
}

/// Per-class F1 over the union of true and predicted classes. Classes that
/// appear in neither are not listed and do not enter the macro average.
pub fn per_class_f1(truth: &[String], pred: &[String]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (t, p) in truth.iter().zip(pred) {
        if t == p {
            counts.entry(t).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().2 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, (tp, fp, fn_))| {
            let denom = 2 * tp + fp + fn_;
            (c.to_string(), if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
        })
        .collect()
}

pub fn macro_f1(truth: &[String], pred: &[String]) -> f64 {
    let per = per_class_f1(truth, pred);
    per.values().sum::<f64>() / per.len().max(1) as f64
}

/// `1 - SS_res / SS_tot`. Constant truth gives 1 for a perfect fit and 0 otherwise.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

pub fn metric_value(truth: &Targets, pred: &Targets) -> Result<f64, ProbeError> {
    if truth.len() != pred.len() {
        return Err(ProbeError::LengthMismatch(pred.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(ProbeError::Empty("evaluation"));
    }
    match (truth, pred) {
        (Targets::Classes(t), Targets::Classes(p)) => Ok(macro_f1(t, p)),
        (Targets::Values(t), Targets::Values(p)) => Ok(r_squared(t, p)),
        _ => Err(ProbeError::MetricMismatch { metric: "mixed", kind: ProbeKind::Classifier }),
    }
}

pub fn evaluate_probe(model: &ProbeModel, x: &DMatrix<f64>, y: &Targets, metric: Metric) -> Result<f64, ProbeError> {
    if Metric::for_kind(model.kind) != metric {
        return Err(ProbeError::MetricMismatch { metric: metric.name(), kind: model.kind });
    }
    if x.nrows() == 0 {
        return Err(ProbeError::Empty("evaluation"));
    }
    metric_value(y, &model.predict(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub metric: Metric,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub bootstrap_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<BTreeMap<String, f64>>,
}

/// Percentile CI over `iterations` resamples of the evaluation pairs. The
/// interval is widened to include the point estimate when the percentiles
/// fall on one side of it.
pub fn bootstrap_ci(
    truth: &Targets,
    pred: &Targets,
    iterations: usize,
    alpha: f64,
    seed: u64,
) -> Result<ProbeReport, ProbeError> {
    if iterations == 0 {
        return Err(ProbeError::ZeroIterations);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ProbeError::InvalidAlpha(alpha));
    }
    let point = metric_value(truth, pred)?;
    let n = truth.len();
    let mut draws: Vec<f64> = (0..iterations)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            metric_value(&truth.select(&idx), &pred.select(&idx)).unwrap()
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let metric = match truth {
        Targets::Classes(_) => Metric::MacroF1,
        Targets::Values(_) => Metric::R2,
    };
    let per_class = match (truth, pred) {
        (Targets::Classes(t), Targets::Classes(p)) => Some(per_class_f1(t, p)),
        _ => None,
    };
    Ok(ProbeReport {
        metric,
        point,
        ci_low: quantile_sorted(&draws, alpha / 2.0).min(point),
        ci_high: quantile_sorted(&draws, 1.0 - alpha / 2.0).max(point),
        n,
        bootstrap_iterations: iterations,
        per_class,
    })
}

/// Unit-normalized embedding rows as an `|rows| x d` matrix.
pub fn features(corpus: &Corpus, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), corpus.dim(), |i, j| corpus.vector(rows[i])[j] as f64)
}

/// Target values of `field` on the given rows (all must be present).
pub fn targets(corpus: &Corpus, field: Field, rows: &[usize]) -> Result<Targets, ProbeError> {
    match probe_kind(field) {
        Some(ProbeKind::Regressor) => {
            Ok(Targets::Values(rows.iter().map(|&r| corpus.record(r).age.expect("age present")).collect()))
        }
        Some(ProbeKind::Classifier) => {
            Ok(Targets::Classes(rows.iter().map(|&r| corpus.record(r).value(field).expect("field present")).collect()))
        }
        None => Err(ProbeError::UnsupportedField(field.name())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

/// Trains a probe for `field` on the given rows, all of which must carry the field.
pub fn train_field_probe(
    corpus: &Corpus,
    field: Field,
    rows: &[usize],
    params: &ProbeParams,
) -> Result<ProbeModel, ProbeError> {
    if rows.is_empty() {
        return Err(ProbeError::NoTrainingData(field.name()));
    }
    let x = features(corpus, rows);
    match targets(corpus, field, rows)? {
        Targets::Classes(y) => train_classifier_probe(field.name(), &x, &y, params.lambda, params.tol, params.max_iter),
        Targets::Values(y) => train_regressor_probe(field.name(), &x, &y, params.lambda),
    }
}

/// Rows where `field` is present.
pub fn rows_with(corpus: &Corpus, field: Field) -> Vec<usize> {
    (0..corpus.len()).filter(|&i| corpus.record(i).has(field)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitProtocol {
    /// Seeded random split of the labelled rows.
    Random { eval_fraction: f64 },
    /// Train on every other dataset, evaluate on this one.
    HeldOutDataset { dataset: String },
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol::Random { eval_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Fails when the two row sets share any sample id.
pub fn check_disjoint(corpus: &Corpus, split: &Split) -> Result<(), ProbeError> {
    let train: BTreeSet<&str> = split.train.iter().map(|&r| corpus.record(r).id.as_str()).collect();
    let shared = split.eval.iter().filter(|&&r| train.contains(corpus.record(r).id.as_str())).count();
    if shared > 0 {
        return Err(ProbeError::Overlap(shared));
    }
    Ok(())
}

pub fn split_rows(corpus: &Corpus, field: Field, protocol: &SplitProtocol, seed: u64) -> Result<Split, ProbeError> {
    let labelled = rows_with(corpus, field);
    let split = match protocol {
        SplitProtocol::Random { eval_fraction } => {
            let mut shuffled = labelled;
            let stream = Field::ALL.iter().position(|&f| f == field).unwrap_or(0) as u64;
            shuffled.shuffle(&mut substream(seed, stream));
            let n_eval = ((shuffled.len() as f64) * eval_fraction).ceil() as usize;
            let mut eval = shuffled[..n_eval.min(shuffled.len())].to_vec();
            let mut train = shuffled[n_eval.min(shuffled.len())..].to_vec();
            eval.sort_unstable();
            train.sort_unstable();
            Split { train, eval }
        }
        SplitProtocol::HeldOutDataset { dataset } => {
            if !corpus.records().iter().any(|r| &r.dataset == dataset) {
                return Err(ProbeError::UnknownDataset(dataset.clone()));
            }
            let (eval, train) = labelled.into_iter().partition(|&r| &corpus.record(r).dataset == dataset);
            Split { train, eval }
        }
    };
    check_disjoint(corpus, &split)?;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub fields: Vec<Field>,
    pub params: ProbeParams,
    pub protocol: SplitProtocol,
    pub bootstrap_iterations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            fields: vec![Field::Origin, Field::Fst, Field::Age, Field::Gender, Field::BodyRegion],
            params: ProbeParams::default(),
            protocol: SplitProtocol::default(),
            bootstrap_iterations: DEFAULT_BOOTSTRAP,
            alpha: 0.05,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEvaluation {
    pub field: Field,
    pub kind: ProbeKind,
    pub lambda: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub iterations: usize,
    pub converged: bool,
    pub report: ProbeReport,
    /// FST groups or age bins, scored with macro-F1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouped: Option<ProbeReport>,
}

fn grouped_targets(field: Field, t: &Targets) -> Option<Targets> {
    match (field, t) {
        (Field::Fst, Targets::Classes(v)) => Some(Targets::Classes(
            v.iter().map(|s| s.parse::<u8>().map_or_else(|_| s.clone(), |f| fst_group(f).to_string())).collect(),
        )),
        (Field::Age, Targets::Values(v)) => {
            Some(Targets::Classes(v.iter().map(|&a| age_bin(a.max(0.0)).to_string()).collect()))
        }
        _ => None,
    }
}

/// Trains on the split's training rows and scores the evaluation rows.
pub fn evaluate_field(corpus: &Corpus, field: Field, config: &ProbeConfig) -> Result<FieldEvaluation, ProbeError> {
    let split = split_rows(corpus, field, &config.protocol, config.seed)?;
    if split.eval.is_empty() {
        return Err(ProbeError::Empty("evaluation"));
    }
    let model = train_field_probe(corpus, field, &split.train, &config.params)?;
    let truth = targets(corpus, field, &split.eval)?;
    let pred = model.predict(&features(corpus, &split.eval));
    let stream_seed = config.seed ^ (Field::ALL.iter().position(|&f| f == field).unwrap_or(0) as u64);
    let report = bootstrap_ci(&truth, &pred, config.bootstrap_iterations, config.alpha, stream_seed)?;
    let grouped = match (grouped_targets(field, &truth), grouped_targets(field, &pred)) {
        (Some(t), Some(p)) => Some(bootstrap_ci(&t, &p, config.bootstrap_iterations, config.alpha, stream_seed)?),
        _ => None,
    };
    Ok(FieldEvaluation {
        field,
        kind: model.kind,
        lambda: model.lambda,
        n_train: split.train.len(),
        n_eval: split.eval.len(),
        iterations: model.iterations,
        converged: model.converged,
        report,
        grouped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Imputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedField {
    pub sample_id: String,
    pub field: Field,
    pub value: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageDelta {
    pub field: Field,
    pub before_pct: f64,
    pub after_pct: f64,
    pub delta_pp: f64,
    pub imputed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub records: Vec<MetadataRecord>,
    pub fields: Vec<ImputedField>,
    pub coverage: Vec<CoverageDelta>,
    pub mean_delta_pp: f64,
    pub warnings: Vec<String>,
}

fn set_field(record: &mut MetadataRecord, field: Field, class: Option<&str>, value: f64) {
    match field {
        Field::Age => record.age = Some(value.max(0.0)),
        Field::Fst => record.fst = class.and_then(|c| c.parse().ok()),
        Field::Gender => record.gender = class.map(str::to_string),
        Field::Origin => record.origin = class.map(str::to_string),
        Field::BodyRegion => record.body_region = class.map(str::to_string),
        Field::Label => record.label = class.map(str::to_string),
        Field::Icd => record.icd = class.map(str::to_string),
        Field::Modality => record.modality = class.map(str::to_string),
        _ => {}
    }
}

/// Trains one probe per field on the rows that carry it.
pub fn fit_probes(corpus: &Corpus, fields: &[Field], params: &ProbeParams) -> (Vec<ProbeModel>, Vec<String>) {
    let results: Vec<(Field, Result<ProbeModel, ProbeError>)> =
        fields.par_iter().map(|&f| (f, train_field_probe(corpus, f, &rows_with(corpus, f), params))).collect();
    let mut models = Vec::new();
    let mut warnings = Vec::new();
    for (f, r) in results {
        match r {
            Ok(m) => models.push(m),
            Err(e) => warnings.push(format!("{}: skipped ({e})", f.name())),
        }
    }
    (models, warnings)
}

/// Fills absent fields with probe predictions. Present values are left untouched.
pub fn impute_missing(corpus: &Corpus, probes: &[ProbeModel]) -> Imputation {
    let mut records = corpus.records().to_vec();
    let mut fields = Vec::new();
    let mut coverage = Vec::new();
    let n = corpus.len().max(1) as f64;
    for probe in probes {
        let Ok(field) = probe.target_field.parse::<Field>() else { continue };
        let before = rows_with(corpus, field).len();
        let mut imputed = 0;
        for (i, record) in records.iter_mut().enumerate() {
            if let Some(v) = corpus.record(i).value(field) {
                fields.push(ImputedField {
                    sample_id: record.id.clone(),
                    field,
                    value: v,
                    provenance: Provenance::Original,
                });
                continue;
            }
            let x: Vec<f64> = corpus.vector(i).iter().map(|&v| v as f64).collect();
            let (class, value) = match probe.kind {
                ProbeKind::Classifier => (Some(probe.classes[probe.predict_class(&x)].as_str()), 0.0),
                ProbeKind::Regressor => (None, probe.decision(&x)[0]),
            };
            set_field(record, field, class, value);
            if let Some(v) = record.value(field) {
                fields.push(ImputedField {
                    sample_id: record.id.clone(),
                    field,
                    value: v,
                    provenance: Provenance::Imputed,
                });
                imputed += 1;
            }
        }
        let before_pct = 100.0 * before as f64 / n;
        let after_pct = 100.0 * (before + imputed) as f64 / n;
        coverage.push(CoverageDelta { field, before_pct, after_pct, delta_pp: after_pct - before_pct, imputed });
    }
    let mean_delta_pp = if coverage.is_empty() {
        0.0
    } else {
        coverage.iter().map(|c| c.delta_pp).sum::<f64>() / coverage.len() as f64
    };
    Imputation { records, fields, coverage, mean_delta_pp, warnings: Vec::new() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSuite {
    pub config: ProbeConfig,
    pub evaluations: Vec<FieldEvaluation>,
    pub skipped: Vec<String>,
    pub coverage: Vec<CoverageDelta>,
    pub mean_delta_pp: f64,
}

/// Evaluates every configured field and imputes absent values with probes
/// trained on all labelled rows.
pub fn probe_suite(corpus: &Corpus, config: &ProbeConfig) -> (ProbeSuite, Imputation) {
    let mut evaluations = Vec::new();
    let mut skipped = Vec::new();
    for &field in &config.fields {
        match evaluate_field(corpus, field, config) {
            Ok(e) => evaluations.push(e),
            Err(e) => skipped.push(format!("{}: {e}", field.name())),
        }
    }
    let (models, warnings) = fit_probes(corpus, &config.fields, &config.params);
    let mut imputation = impute_missing(corpus, &models);
    imputation.warnings = warnings;
    let suite = ProbeSuite {
        config: config.clone(),
        evaluations,
        skipped,
        coverage: imputation.coverage.clone(),
        mean_delta_pp: imputation.mean_delta_pp,
    };
    (suite, imputation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn predict_all_a_macro_f1() {
        let truth = s(&["a", "a", "b", "b"]);
        let pred = s(&["a", "a", "a", "a"]);
        let per = per_class_f1(&truth, &pred);
        assert!((per["a"] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per["b"], 0.0);
        assert!((macro_f1(&truth, &pred) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_predictor_r2_is_zero() {
        let truth = [1.0, 2.0, 3.0, 6.0];
        assert!(r_squared(&truth, &[3.0; 4]).abs() < 1e-15);
        assert_eq!(r_squared(&truth, &truth), 1.0);
    }

    #[test]
    fn noiseless_line() {
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let y: Vec<f64> = (0..5).map(|i| 2.0 * i as f64).collect();
        let m = train_regressor_probe("age", &x, &y, 0.0).unwrap();
        assert!((m.weights[0][0] - 2.0).abs() < 1e-12);
        assert!(evaluate_probe(&m, &x, &Targets::Values(y), Metric::R2).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn constant_target_gives_bias_only() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 0.5, -1.0, 3.0]);
        let m = train_regressor_probe("age", &x, &[7.0; 3], 1.0).unwrap();
        assert!(m.weights[0][0].abs() < 1e-12 && m.weights[1][0].abs() < 1e-12);
        assert!((m.weights[2][0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn singular_without_ridge() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(train_regressor_probe("age", &x, &[1.0, 2.0, 3.0], 0.0), Err(ProbeError::Singular)));
        assert!(train_regressor_probe("age", &x, &[1.0, 2.0, 3.0], 1.0).is_ok());
    }

    #[test]
    fn separable_classifier() {
        let x = DMatrix::from_row_slice(6, 2, &[0.0, 0.1, 0.2, 0.0, 0.1, 0.3, 3.0, 3.1, 3.2, 2.9, 2.8, 3.3]);
        let y = s(&["lo", "lo", "lo", "hi", "hi", "hi"]);
        let m = train_classifier_probe("label", &x, &y, 1.0, 1e-6, 1000).unwrap();
        assert!(m.converged);
        assert_eq!(evaluate_probe(&m, &x, &Targets::Classes(y), Metric::MacroF1).unwrap(), 1.0);
    }

    #[test]
    fn classifier_rejects_bad_input() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            train_classifier_probe("l", &x, &s(&["a", "a"]), 1.0, 1e-6, 10),
            Err(ProbeError::SingleClass(1))
        ));
        let bad = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(
            train_classifier_probe("l", &bad, &s(&["a", "b"]), 1.0, 1e-6, 10),
            Err(ProbeError::NonFinite { .. })
        ));
    }

    #[test]
    fn heavy_penalty_predicts_majority() {
        let x = DMatrix::from_row_slice(5, 1, &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let y = s(&["a", "b", "b", "b", "a"]);
        let m = train_classifier_probe("l", &x, &y, 1e8, 1e-9, 1000).unwrap();
        assert!(m.weights[0].iter().all(|w| w.abs() < 1e-6));
        assert!((0..5).all(|i| m.predict_class(&[x[(i, 0)]]) == 1));
    }

    #[test]
    fn perfect_predictions_degenerate_ci() {
        let t = Targets::Classes(s(&["a", "b", "a", "c"]));
        let r = bootstrap_ci(&t, &t, 100, 0.05, 1).unwrap();
        assert_eq!((r.point, r.ci_low, r.ci_high), (1.0, 1.0, 1.0));
        assert!(matches!(bootstrap_ci(&t, &t, 0, 0.05, 1), Err(ProbeError::ZeroIterations)));
    }

    #[test]
    fn metric_kind_mismatch() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let m = train_regressor_probe("age", &x, &[0.0, 1.0, 2.0], 1.0).unwrap();
        assert!(matches!(
            evaluate_probe(&m, &x, &Targets::Values(vec![0.0; 3]), Metric::MacroF1),
            Err(ProbeError::MetricMismatch { .. })
        ));
    }
}
