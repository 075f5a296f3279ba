//! Report emission: one JSON document per audit section, CSV mirrors, a
//! manifest with input digests, and demographic comparison against baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Field, MetadataRecord};
use crate::density::DensityAudit;
use crate::novelty::{CoveragePoint, GroupNovelty, NoveltyReport, OrphanLabel};
use crate::probes::ProbeSuite;
use crate::retrieval::RetrievalSuite;
use crate::similarity::{OverlapPair, PairwiseReport, Uniqueness};
use crate::topology::HoleReport;

pub const OTHER_BIN: &str = "other";
pub const TOOL_NAME: &str = "atlas";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("baseline for {field}: {message}")]
    InvalidBaseline { field: String, message: String },
    #[error("no record carries {0}")]
    EmptyField(&'static str),
    #[error("no sections to emit")]
    NoSections,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub field: Field,
    pub bins: Vec<String>,
    pub baseline_fractions: Vec<f64>,
    #[serde(default)]
    pub source_note: String,
    /// Raw field value to bin name, for values not already named like a bin.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub value_map: BTreeMap<String, String>,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |message: String| ReportError::InvalidBaseline { field: self.field.name().to_string(), message };
        if self.bins.is_empty() || self.bins.len() != self.baseline_fractions.len() {
            return Err(bad(format!("{} bins but {} fractions", self.bins.len(), self.baseline_fractions.len())));
        }
        if self.bins.iter().collect::<BTreeSet<_>>().len() != self.bins.len() {
            return Err(bad("duplicate bin names".into()));
        }
        if self.baseline_fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(bad("fractions must be finite and non-negative".into()));
        }
        let sum: f64 = self.baseline_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(bad(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<BaselineConfig>, ReportError> {
        let path = path.as_ref();
        let configs: Vec<BaselineConfig> = serde_json::from_slice(&fs::read(path).map_err(io_err(path))?)?;
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub bin: String,
    pub count: usize,
    pub corpus_fraction: f64,
    pub baseline_fraction: f64,
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSection {
    pub field: Field,
    pub source_note: String,
    pub n_records: usize,
    pub rows: Vec<DivergenceRow>,
}

/// Corpus fractions over the baseline bins; values outside them count toward
/// an extra `other` row, which appears only when non-empty.
pub fn compare_to_baseline(
    records: &[MetadataRecord],
    config: &BaselineConfig,
) -> Result<DivergenceSection, ReportError> {
    config.validate()?;
    let mut counts = vec![0usize; config.bins.len()];
    let mut other = 0usize;
    let mut total = 0usize;
    for rec in records {
        let Some(raw) = rec.value(config.field) else { continue };
        total += 1;
        let bin = config.value_map.get(&raw).unwrap_or(&raw);
        match config.bins.iter().position(|b| b == bin) {
            Some(i) => counts[i] += 1,
            None => other += 1,
        }
    }
    if total == 0 {
        return Err(ReportError::EmptyField(config.field.name()));
    }
    let row = |bin: &str, count: usize, baseline: f64| {
        let corpus_fraction = count as f64 / total as f64;
        DivergenceRow {
            bin: bin.to_string(),
            count,
            corpus_fraction,
            baseline_fraction: baseline,
            delta_pp: 100.0 * (corpus_fraction - baseline),
        }
    };
    let mut rows: Vec<DivergenceRow> =
        config.bins.iter().zip(&counts).zip(&config.baseline_fractions).map(|((b, &c), &f)| row(b, c, f)).collect();
    if other > 0 {
        rows.push(row(OTHER_BIN, other, 0.0));
    }
    Ok(DivergenceSection { field: config.field, source_note: config.source_note.clone(), n_records: total, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltySection {
    pub series: NoveltyReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coverage: Vec<CoveragePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupNovelty>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub orphans: Vec<OrphanLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySection {
    pub pairwise: PairwiseReport,
    pub uniqueness: Vec<Uniqueness>,
    pub high_overlap: Vec<OverlapPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySection {
    /// Sample ids aligned with `audit.report.log_density`.
    pub ids: Vec<String>,
    pub audit: DensityAudit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSections {
    pub novelty: Option<NoveltySection>,
    pub similarity: Option<SimilaritySection>,
    pub density: Option<DensitySection>,
    pub holes: Option<HoleReport>,
    pub probes: Option<ProbeSuite>,
    pub retrieval: Option<RetrievalSuite>,
    pub divergence: Option<Vec<DivergenceSection>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub sections: Vec<String>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: impl AsRef<Path>) -> Result<FileDigest, ReportError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(FileDigest { path: path.display().to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) })
}

/// Pretty JSON with keys in sorted order and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, ReportError> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| ReportError::Io { path: PathBuf::from("<csv>"), source: e.into_error() })
}

fn csv_mirror(name: &str, sections: &ReportSections) -> Result<Option<Vec<u8>>, ReportError> {
    let out = match name {
        "novelty" => sections.novelty.as_ref().map(|s| {
            csv_bytes(
                &["year", "n_new", "n_pool", "nu_observed", "nu_baseline_mean", "ci_low", "ci_high", "ratio"],
                s.series
                    .years
                    .iter()
                    .map(|y| {
                        vec![
                            y.year.to_string(),
                            y.n_new.to_string(),
                            y.n_pool.to_string(),
                            y.nu_observed.to_string(),
                            y.nu_baseline_mean.to_string(),
                            y.ci_low.to_string(),
                            y.ci_high.to_string(),
                            opt(y.ratio),
                        ]
                    })
                    .collect(),
            )
        }),
        "similarity" => sections.similarity.as_ref().map(|s| {
            let m = &s.pairwise.matrix;
            let mut header = vec!["dataset"];
            header.extend(m.datasets.iter().map(String::as_str));
            csv_bytes(
                &header,
                m.datasets
                    .iter()
                    .zip(&m.fd)
                    .map(|(d, row)| std::iter::once(d.clone()).chain(row.iter().map(f64::to_string)).collect())
                    .collect(),
            )
        }),
        "density" => sections.density.as_ref().map(|s| {
            let r = &s.audit.report;
            let sparse: BTreeSet<&str> = r.sparse_ids.iter().map(String::as_str).collect();
            let dense: BTreeSet<&str> = r.dense_ids.iter().map(String::as_str).collect();
            csv_bytes(
                &["id", "log_density", "flag"],
                s.ids
                    .iter()
                    .zip(&r.log_density)
                    .map(|(id, ld)| {
                        let flag = if sparse.contains(id.as_str()) {
                            "sparse"
                        } else if dense.contains(id.as_str()) {
                            "dense"
                        } else {
                            ""
                        };
                        vec![id.clone(), ld.to_string(), flag.to_string()]
                    })
                    .collect(),
            )
        }),
        "holes" => sections.holes.as_ref().map(|h| {
            csv_bytes(
                &[
                    "rank",
                    "component",
                    "persistence",
                    "birth",
                    "death",
                    "size",
                    "radius",
                    "log_volume",
                    "n_boundary",
                    "top_terms",
                ],
                h.holes
                    .iter()
                    .map(|e| {
                        vec![
                            e.rank.to_string(),
                            e.component.to_string(),
                            e.persistence.to_string(),
                            e.birth.to_string(),
                            e.death.to_string(),
                            e.size.to_string(),
                            e.radius.to_string(),
                            e.log_volume.to_string(),
                            e.boundary_ids.len().to_string(),
                            e.term_frequencies
                                .iter()
                                .take(5)
                                .map(|t| format!("{}:{}", t.term, t.count))
                                .collect::<Vec<_>>()
                                .join(" "),
                        ]
                    })
                    .collect(),
            )
        }),
        "probes" => sections.probes.as_ref().map(|p| {
            let mut rows = Vec::new();
            for e in &p.evaluations {
                for (variant, r) in
                    std::iter::once(("raw", &e.report)).chain(e.grouped.as_ref().map(|g| ("grouped", g)))
                {
                    rows.push(vec![
                        e.field.name().to_string(),
                        variant.to_string(),
                        r.metric.name().to_string(),
                        r.point.to_string(),
                        r.ci_low.to_string(),
                        r.ci_high.to_string(),
                        e.n_train.to_string(),
                        e.n_eval.to_string(),
                    ]);
                }
            }
            csv_bytes(&["field", "variant", "metric", "point", "ci_low", "ci_high", "n_train", "n_eval"], rows)
        }),
        "retrieval" => sections.retrieval.as_ref().map(|r| {
            csv_bytes(
                &["dataset", "mode", "k", "n_queries", "n_no_relevant", "precision", "recall", "recall_capped", "ap"],
                r.reports
                    .iter()
                    .map(|e| {
                        vec![
                            e.dataset.clone(),
                            serde_json::to_value(e.mode).unwrap().as_str().unwrap().to_string(),
                            e.k.to_string(),
                            e.n_queries.to_string(),
                            e.n_no_relevant.to_string(),
                            e.precision_at_k.to_string(),
                            e.recall_at_k.to_string(),
                            e.recall_capped_at_k.to_string(),
                            e.ap_at_k.to_string(),
                        ]
                    })
                    .collect(),
            )
        }),
        "divergence" => sections.divergence.as_ref().map(|d| {
            csv_bytes(
                &["field", "bin", "count", "corpus_pct", "baseline_pct", "delta_pp"],
                d.iter()
                    .flat_map(|s| {
                        s.rows.iter().map(move |r| {
                            vec![
                                s.field.name().to_string(),
                                r.bin.clone(),
                                r.count.to_string(),
                                pct(r.corpus_fraction),
                                pct(r.baseline_fraction),
                                format!("{:.1}", r.delta_pp),
                            ]
                        })
                    })
                    .collect(),
            )
        }),
        _ => None,
    };
    out.transpose()
}

impl ReportSections {
    /// Present sections as `(name, JSON value)`, in a fixed order.
    pub fn documents(&self) -> Result<Vec<(&'static str, serde_json::Value)>, ReportError> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:literal, $field:expr) => {
                if let Some(v) = &$field {
                    out.push(($name, serde_json::to_value(v)?));
                }
            };
        }
        push!("novelty", self.novelty);
        push!("similarity", self.similarity);
        push!("density", self.density);
        push!("holes", self.holes);
        push!("probes", self.probes);
        push!("retrieval", self.retrieval);
        push!("divergence", self.divergence);
        Ok(out)
    }
}

/// Writes `<section>.json` and `<section>.csv` for every present section plus
/// `manifest.json`. Output bytes depend only on the arguments.
pub fn emit_report(
    sections: &ReportSections,
    out_dir: impl AsRef<Path>,
    seed: u64,
    parameters: serde_json::Value,
    inputs: &[PathBuf],
) -> Result<Manifest, ReportError> {
    let out_dir = out_dir.as_ref();
    let docs = sections.documents()?;
    if docs.is_empty() {
        return Err(ReportError::NoSections);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut outputs = Vec::new();
    let mut write = |file: String, bytes: &[u8]| -> Result<(), ReportError> {
        let path = out_dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        outputs.push(FileDigest { path: file, bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(())
    };
    for (name, value) in &docs {
        write(format!("{name}.json"), to_canonical_json(value)?.as_bytes())?;
        if let Some(csv) = csv_mirror(name, sections)? {
            write(format!("{name}.csv"), &csv)?;
        }
    }
    let manifest = Manifest {
        tool: TOOL_NAME.to_string(),
        version: VERSION.to_string(),
        seed,
        parameters,
        inputs: inputs.iter().map(digest_file).collect::<Result<_, _>>()?,
        sections: docs.iter().map(|(n, _)| n.to_string()).collect(),
        outputs,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, to_canonical_json(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}
