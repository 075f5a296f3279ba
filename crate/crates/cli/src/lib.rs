//! `atlas` command line: loads a corpus, runs audit sections and writes
//! reports, or serves the corpus over HTTP.
//!
//! Exit codes: 0 success, 1 usage or invalid configuration, 2 input
//! validation, 3 computation failure. Failures print one JSON object to stderr.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use atlas_core::corpus::{Corpus, Field, MetadataRecord};
use atlas_core::density::{density_audit, DensityConfig, GmmConfig};
use atlas_core::novelty::{
    cumulative_coverage, grouped_novelty, novelty_series, orphan_labels, Grouping, IcdBlockTable, NoveltyParams,
};
use atlas_core::probes::{probe_suite, Imputation, ProbeConfig, ProbeParams, Provenance, SplitProtocol};
use atlas_core::report::{
    compare_to_baseline, emit_report, to_canonical_json, BaselineConfig, DensitySection, Manifest, NoveltySection,
    ReportSections, SimilaritySection,
};
use atlas_core::retrieval::{retrieval_suite, Pool, RetrievalQuery};
use atlas_core::similarity::{
    high_overlap_pairs, pairwise_fd, uniqueness_scores, MomentSpace, OverlapThreshold, DEFAULT_COVARIANCE_RIDGE,
};
use atlas_core::topology::{hole_audit, HoleConfig};
use atlas_service::{run_query, AtlasIndex};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

pub use config::{Overrides, RunConfig, DEFAULT_OUT_DIR, OUT_DIR_ENV};

pub const IMPUTED_METADATA: &str = "imputed_metadata.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKindCode {
    Usage = 1,
    Input = 2,
    Computation = 3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKindCode,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Display) -> Self {
        Self { kind: ErrorKindCode::Usage, message: m.to_string() }
    }

    pub fn input(m: impl Display) -> Self {
        Self { kind: ErrorKindCode::Input, message: m.to_string() }
    }

    pub fn computation(m: impl Display) -> Self {
        Self { kind: ErrorKindCode::Computation, message: m.to_string() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    pub fn to_json(&self) -> Value {
        let kind = match self.kind {
            ErrorKindCode::Usage => "usage",
            ErrorKindCode::Input => "input",
            ErrorKindCode::Computation => "computation",
        };
        json!({ "error": { "kind": kind, "exit_code": self.code(), "message": self.message } })
    }
}

#[derive(Debug, Parser)]
#[command(name = "atlas", version, about = "Audit a dermatology image corpus from precomputed embeddings")]
pub struct Cli {
    /// JSON file with RunConfig keys; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel sections. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and summarize the inputs.
    Ingest,
    Novelty,
    Similarity,
    Density,
    Holes,
    /// Probe evaluation plus imputed metadata.
    Impute,
    RetrieveEval,
    /// Every section, plus baseline divergence when baselines are configured.
    AuditAll,
    /// HTTP service over the corpus and the reports in out_dir.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long = "reports_dir", visible_alias = "reports-dir")]
        reports_dir: Option<PathBuf>,
    },
    /// Nearest neighbours of a sample or vector, same output as `POST /query`.
    Search {
        #[arg(long = "sample_id", visible_alias = "sample-id")]
        sample_id: Option<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        vector: Option<Vec<f64>>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// `field=v1,v2`; repeatable.
        #[arg(long)]
        filter: Vec<String>,
        /// Restrict candidates to one dataset.
        #[arg(long)]
        dataset: Option<String>,
    },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => return fail(&CliError::usage(e.to_string().trim_end())),
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> i32 {
    eprintln!("{}", e.to_json());
    e.code()
}

/// Config file, then flags, then out_dir fallback. Validates before returning.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.overrides);
    cfg.resolve_out_dir(std::env::var(OUT_DIR_ENV).ok());
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    if let Command::Search { k: 0, .. } = cli.command {
        return Err(CliError::usage("k must be positive"));
    }
    let bind = match &cli.command {
        Command::Serve { bind, .. } => {
            Some(bind.parse::<SocketAddr>().map_err(|e| CliError::usage(format!("bind {bind}: {e}")))?)
        }
        _ => None,
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::usage("workers must be positive"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let corpus = load_corpus(&cfg)?;
    match cli.command {
        Command::Ingest => ingest(&cfg),
        Command::Novelty => {
            write(&cfg, ReportSections { novelty: Some(novelty(&cfg, &corpus)?), ..Default::default() })
        }
        Command::Similarity => {
            write(&cfg, ReportSections { similarity: Some(similarity(&cfg, &corpus)?), ..Default::default() })
        }
        Command::Density => {
            write(&cfg, ReportSections { density: Some(density(&cfg, &corpus)?), ..Default::default() })
        }
        Command::Holes => write(&cfg, ReportSections { holes: Some(holes(&cfg, &corpus)?), ..Default::default() }),
        Command::Impute => {
            let (suite, imputation) = probe_suite(&corpus, &probe_config(&cfg));
            write(&cfg, ReportSections { probes: Some(suite), ..Default::default() })?;
            write_imputed(&cfg.out_dir(), &imputation)
        }
        Command::RetrieveEval => write(
            &cfg,
            ReportSections {
                retrieval: Some(retrieval_suite(&corpus, cfg.label_field, &cfg.retrieval_k)),
                ..Default::default()
            },
        ),
        Command::AuditAll => audit_all(&cfg, &corpus),
        Command::Serve { reports_dir, .. } => {
            let dir = reports_dir.unwrap_or_else(|| cfg.out_dir());
            let index = AtlasIndex::with_reports_dir(corpus, &dir).map_err(CliError::input)?;
            let runtime = tokio::runtime::Runtime::new().map_err(CliError::computation)?;
            runtime
                .block_on(atlas_service::serve(Arc::new(index), bind.expect("parsed above")))
                .map_err(CliError::computation)
        }
        Command::Search { sample_id, vector, k, filter, dataset } => {
            let filters = parse_filters(&filter)?;
            let query =
                RetrievalQuery { vector, sample_id, k, filters, pool: dataset.map(Pool::Dataset).unwrap_or_default() };
            let response = run_query(&corpus, &query).map_err(CliError::input)?;
            print!("{}", to_canonical_json(&response).map_err(CliError::computation)?);
            Ok(())
        }
    }
}

fn parse_filters(specs: &[String]) -> Result<BTreeMap<Field, Vec<String>>, CliError> {
    let mut out: BTreeMap<Field, Vec<String>> = BTreeMap::new();
    for s in specs {
        let (f, v) = s.split_once('=').ok_or_else(|| CliError::usage(format!("filter {s:?} is not field=values")))?;
        let field: Field = f.parse().map_err(CliError::usage)?;
        out.entry(field).or_default().extend(v.split(',').map(str::to_string));
    }
    Ok(out)
}

fn paths(cfg: &RunConfig) -> (&Path, &Path) {
    (cfg.embeddings_path.as_deref().expect("validated"), cfg.metadata_path.as_deref().expect("validated"))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    let (emb, meta) = paths(cfg);
    let (corpus, dedup) = Corpus::load(emb, meta).map_err(CliError::input)?;
    if dedup.removed > 0 {
        log::warn!("dropped {} duplicate id(s)", dedup.removed);
    }
    if corpus.is_empty() {
        return Err(CliError::input("corpus is empty"));
    }
    Ok(corpus)
}

fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let (emb, meta) = paths(cfg);
    let (corpus, dedup) = Corpus::load(emb, meta).map_err(CliError::input)?;
    let datasets: BTreeMap<&str, usize> = corpus.rows_by_dataset().into_iter().map(|(k, v)| (k, v.len())).collect();
    let summary = json!({
        "samples": corpus.len(),
        "dim": corpus.dim(),
        "datasets": datasets,
        "field_coverage": corpus.field_coverage(),
        "deduplication": dedup,
    });
    print!("{}", to_canonical_json(&summary).map_err(CliError::computation)?);
    Ok(())
}

fn novelty(cfg: &RunConfig, corpus: &Corpus) -> Result<NoveltySection, CliError> {
    let params = NoveltyParams {
        k: cfg.k_novelty,
        bootstrap_iterations: cfg.bootstrap_iterations,
        alpha: cfg.alpha,
        seed: cfg.seed,
    };
    let series = novelty_series(corpus, &params).map_err(CliError::computation)?;
    let grouping = match &cfg.icd_blocks {
        Some(p) => Grouping::IcdBlock(IcdBlockTable::load(p).map_err(CliError::input)?),
        None => Grouping::Field(cfg.code_field),
    };
    let groups = grouped_novelty(corpus, &grouping, cfg.k_novelty).map_err(CliError::computation)?;
    Ok(NoveltySection {
        series,
        coverage: cumulative_coverage(corpus, cfg.code_field, None),
        groups,
        orphans: cfg.orphan_before.map(|y| orphan_labels(corpus, cfg.code_field, y)).unwrap_or_default(),
    })
}

fn similarity(cfg: &RunConfig, corpus: &Corpus) -> Result<SimilaritySection, CliError> {
    let space = MomentSpace::fit(corpus, Some(cfg.similarity_pca_dims)).map_err(CliError::computation)?;
    let pairwise = pairwise_fd(corpus, &space, DEFAULT_COVARIANCE_RIDGE).map_err(CliError::computation)?;
    Ok(SimilaritySection {
        uniqueness: uniqueness_scores(&pairwise.matrix),
        high_overlap: high_overlap_pairs(&pairwise.matrix, OverlapThreshold::Quantile(cfg.overlap_quantile)),
        pairwise,
    })
}

fn density(cfg: &RunConfig, corpus: &Corpus) -> Result<DensitySection, CliError> {
    let dc = DensityConfig {
        reduced_dim: cfg.density_pca_dims,
        gmm: GmmConfig { components: cfg.gmm_k, seed: cfg.seed, ..GmmConfig::default() },
        q_low: cfg.q_low,
        q_high: cfg.q_high,
        bic_sweep: None,
    };
    let audit = density_audit(corpus, &dc).map_err(CliError::computation)?;
    Ok(DensitySection { ids: corpus.records().iter().map(|r| r.id.clone()).collect(), audit })
}

fn holes(cfg: &RunConfig, corpus: &Corpus) -> Result<atlas_core::topology::HoleReport, CliError> {
    let hc = HoleConfig {
        graph_k: cfg.graph_k,
        k_top: cfg.k_top_holes,
        boundary_k: cfg.k_b,
        boundary_alpha: cfg.boundary_alpha,
        distance: cfg.holes_distance,
        reduce_to: cfg.holes_reduce_to,
        seed: cfg.seed,
        ..HoleConfig::default()
    };
    hole_audit(corpus, &hc).map_err(CliError::computation)
}

fn probe_config(cfg: &RunConfig) -> ProbeConfig {
    ProbeConfig {
        fields: cfg.probe_fields.clone(),
        params: ProbeParams { lambda: cfg.probe_lambda, ..ProbeParams::default() },
        protocol: match &cfg.probe_held_out_dataset {
            Some(d) => SplitProtocol::HeldOutDataset { dataset: d.clone() },
            None => SplitProtocol::Random { eval_fraction: cfg.probe_eval_fraction },
        },
        bootstrap_iterations: cfg.bootstrap_iterations,
        alpha: cfg.alpha,
        seed: cfg.seed,
    }
}

fn audit_all(cfg: &RunConfig, corpus: &Corpus) -> Result<(), CliError> {
    let baselines = cfg.baselines.as_ref().map(|p| BaselineConfig::load_all(p).map_err(CliError::input)).transpose()?;
    let (probes, imputation) = probe_suite(corpus, &probe_config(cfg));
    let divergence = baselines
        .map(|list| {
            list.iter()
                .map(|b| compare_to_baseline(&imputation.records, b).map_err(CliError::computation))
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let sections = ReportSections {
        novelty: Some(novelty(cfg, corpus)?),
        similarity: Some(similarity(cfg, corpus)?),
        density: Some(density(cfg, corpus)?),
        holes: Some(holes(cfg, corpus)?),
        probes: Some(probes),
        retrieval: Some(retrieval_suite(corpus, cfg.label_field, &cfg.retrieval_k)),
        divergence,
    };
    write(cfg, sections)?;
    write_imputed(&cfg.out_dir(), &imputation)
}

fn write(cfg: &RunConfig, sections: ReportSections) -> Result<(), CliError> {
    let (emb, meta) = paths(cfg);
    let mut inputs = vec![emb.to_path_buf(), meta.to_path_buf()];
    inputs.extend(cfg.icd_blocks.iter().cloned());
    inputs.extend(cfg.baselines.iter().cloned());
    let params = serde_json::to_value(cfg).map_err(CliError::computation)?;
    let manifest: Manifest =
        emit_report(&sections, cfg.out_dir(), cfg.seed, params, &inputs).map_err(CliError::computation)?;
    log::info!("wrote {} file(s) to {}", manifest.outputs.len() + 1, cfg.out_dir().display());
    Ok(())
}

/// Records with absent fields filled in, one JSON object per line, each with a
/// `provenance` map from probed field to `original` or `imputed`.
pub fn imputed_lines(imputation: &Imputation) -> Result<String, serde_json::Error> {
    let mut provenance: BTreeMap<&str, BTreeMap<&'static str, Provenance>> = BTreeMap::new();
    for f in &imputation.fields {
        provenance.entry(f.sample_id.as_str()).or_default().insert(f.field.name(), f.provenance);
    }
    let mut out = String::new();
    for r in &imputation.records {
        let mut v = serde_json::to_value(r)?;
        v["provenance"] = serde_json::to_value(provenance.get(r.id.as_str()).cloned().unwrap_or_default())?;
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

fn write_imputed(out_dir: &Path, imputation: &Imputation) -> Result<(), CliError> {
    let text = imputed_lines(imputation).map_err(CliError::computation)?;
    let path = out_dir.join(IMPUTED_METADATA);
    fs::write(&path, text).map_err(|e| CliError::computation(format!("{}: {e}", path.display())))
}

/// Reads an imputed-metadata file back into records, dropping provenance.
pub fn read_imputed(path: &Path) -> Result<Vec<MetadataRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::input)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).map_err(CliError::input)?;
            if let Value::Object(m) = &mut v {
                m.remove("provenance");
            }
            serde_json::from_value(v).map_err(CliError::input)
        })
        .collect()
}
