use std::path::{Path, PathBuf};

use atlas_core::corpus::Field;
use atlas_core::topology::ResistanceKind;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUT_DIR_ENV: &str = "ATLAS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "atlas-out";

/// Every tunable of a run. JSON keys and long flags share these names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub embeddings_path: Option<PathBuf>,
    pub metadata_path: Option<PathBuf>,
    pub seed: u64,
    pub k_novelty: usize,
    #[serde(rename = "B")]
    pub bootstrap_iterations: usize,
    pub alpha: f64,
    pub similarity_pca_dims: usize,
    pub density_pca_dims: usize,
    #[serde(rename = "gmm_K")]
    pub gmm_k: usize,
    pub graph_k: usize,
    pub k_b: usize,
    pub boundary_alpha: f64,
    pub k_top_holes: usize,
    pub retrieval_k: Vec<usize>,
    /// Not part of the manifest, so runs into different directories match.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub label_field: Field,
    pub code_field: Field,
    pub holes_distance: ResistanceKind,
    pub holes_reduce_to: Option<usize>,
    pub q_low: f64,
    pub q_high: f64,
    pub overlap_quantile: f64,
    pub probe_fields: Vec<Field>,
    pub probe_lambda: f64,
    pub probe_eval_fraction: f64,
    pub probe_held_out_dataset: Option<String>,
    pub icd_blocks: Option<PathBuf>,
    pub baselines: Option<PathBuf>,
    pub orphan_before: Option<i32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            embeddings_path: None,
            metadata_path: None,
            seed: 42,
            k_novelty: 10,
            bootstrap_iterations: 200,
            alpha: 0.05,
            similarity_pca_dims: 64,
            density_pca_dims: 16,
            gmm_k: 16,
            graph_k: 15,
            k_b: 20,
            boundary_alpha: 1.5,
            k_top_holes: 5,
            retrieval_k: vec![1, 5, 10],
            out_dir: None,
            label_field: Field::Label,
            code_field: Field::Icd,
            holes_distance: ResistanceKind::Corrected,
            holes_reduce_to: None,
            q_low: 0.025,
            q_high: 0.975,
            overlap_quantile: 0.1,
            probe_fields: vec![Field::Origin, Field::Fst, Field::Age, Field::Gender, Field::BodyRegion],
            probe_lambda: 1.0,
            probe_eval_fraction: 0.2,
            probe_held_out_dataset: None,
            icd_blocks: None,
            baselines: None,
            orphan_before: None,
        }
    }
}

fn parse_field(s: &str) -> Result<Field, String> {
    s.parse().map_err(|e: atlas_core::corpus::UnknownField| e.to_string())
}

fn parse_distance(s: &str) -> Result<ResistanceKind, String> {
    match s {
        "naive" => Ok(ResistanceKind::Naive),
        "corrected" => Ok(ResistanceKind::Corrected),
        _ => Err(format!("expected naive or corrected, got {s:?}")),
    }
}

/// Flag overrides; each one wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long = "embeddings_path", visible_alias = "embeddings-path", global = true)]
    pub embeddings_path: Option<PathBuf>,
    #[arg(long = "metadata_path", visible_alias = "metadata-path", global = true)]
    pub metadata_path: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "k_novelty", visible_alias = "k-novelty", global = true)]
    pub k_novelty: Option<usize>,
    #[arg(long = "B", visible_alias = "bootstrap-iterations", global = true)]
    pub bootstrap_iterations: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long = "similarity_pca_dims", visible_alias = "similarity-pca-dims", global = true)]
    pub similarity_pca_dims: Option<usize>,
    #[arg(long = "density_pca_dims", visible_alias = "density-pca-dims", global = true)]
    pub density_pca_dims: Option<usize>,
    #[arg(long = "gmm_K", visible_alias = "gmm-k", global = true)]
    pub gmm_k: Option<usize>,
    #[arg(long = "graph_k", visible_alias = "graph-k", global = true)]
    pub graph_k: Option<usize>,
    #[arg(long = "k_b", visible_alias = "k-b", global = true)]
    pub k_b: Option<usize>,
    #[arg(long = "boundary_alpha", visible_alias = "boundary-alpha", global = true)]
    pub boundary_alpha: Option<f64>,
    #[arg(long = "k_top_holes", visible_alias = "k-top-holes", global = true)]
    pub k_top_holes: Option<usize>,
    #[arg(long = "retrieval_k", visible_alias = "retrieval-k", value_delimiter = ',', global = true)]
    pub retrieval_k: Option<Vec<usize>>,
    #[arg(long = "out_dir", visible_alias = "out-dir", global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long = "label_field", visible_alias = "label-field", value_parser = parse_field, global = true)]
    pub label_field: Option<Field>,
    #[arg(long = "code_field", visible_alias = "code-field", value_parser = parse_field, global = true)]
    pub code_field: Option<Field>,
    #[arg(long = "holes_distance", visible_alias = "holes-distance", value_parser = parse_distance, global = true)]
    pub holes_distance: Option<ResistanceKind>,
    #[arg(long = "holes_reduce_to", visible_alias = "holes-reduce-to", global = true)]
    pub holes_reduce_to: Option<usize>,
    #[arg(long = "q_low", visible_alias = "q-low", global = true)]
    pub q_low: Option<f64>,
    #[arg(long = "q_high", visible_alias = "q-high", global = true)]
    pub q_high: Option<f64>,
    #[arg(long = "overlap_quantile", visible_alias = "overlap-quantile", global = true)]
    pub overlap_quantile: Option<f64>,
    #[arg(long = "probe_fields", visible_alias = "probe-fields", value_delimiter = ',', value_parser = parse_field, global = true)]
    pub probe_fields: Option<Vec<Field>>,
    #[arg(long = "probe_lambda", visible_alias = "probe-lambda", global = true)]
    pub probe_lambda: Option<f64>,
    #[arg(long = "probe_eval_fraction", visible_alias = "probe-eval-fraction", global = true)]
    pub probe_eval_fraction: Option<f64>,
    #[arg(long = "probe_held_out_dataset", visible_alias = "probe-held-out-dataset", global = true)]
    pub probe_held_out_dataset: Option<String>,
    #[arg(long = "icd_blocks", visible_alias = "icd-blocks", global = true)]
    pub icd_blocks: Option<PathBuf>,
    #[arg(long, global = true)]
    pub baselines: Option<PathBuf>,
    #[arg(long = "orphan_before", visible_alias = "orphan-before", global = true)]
    pub orphan_before: Option<i32>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($f:ident),* ; $($opt:ident),*) => {
        $( if let Some(v) = $o.$f.clone() { $cfg.$f = v; } )*
        $( if let Some(v) = $o.$opt.clone() { $cfg.$opt = Some(v); } )*
    };
}

impl RunConfig {
    /// Reads a JSON config. Relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.embeddings_path,
            &mut cfg.metadata_path,
            &mut cfg.out_dir,
            &mut cfg.icd_blocks,
            &mut cfg.baselines,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        apply!(self, o,
            seed, k_novelty, bootstrap_iterations, alpha, similarity_pca_dims, density_pca_dims, gmm_k, graph_k,
            k_b, boundary_alpha, k_top_holes, retrieval_k, label_field, code_field, holes_distance, q_low, q_high,
            overlap_quantile, probe_fields, probe_lambda, probe_eval_fraction;
            embeddings_path, metadata_path, out_dir, holes_reduce_to, probe_held_out_dataset, icd_blocks, baselines,
            orphan_before);
    }

    /// Flag, then config file, then `ATLAS_OUT_DIR`, then the default.
    pub fn resolve_out_dir(&mut self, env: Option<String>) {
        if self.out_dir.is_none() {
            self.out_dir = Some(PathBuf::from(env.filter(|s| !s.is_empty()).unwrap_or_else(|| DEFAULT_OUT_DIR.into())));
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let counts = [
            ("k_novelty", self.k_novelty),
            ("B", self.bootstrap_iterations),
            ("similarity_pca_dims", self.similarity_pca_dims),
            ("density_pca_dims", self.density_pca_dims),
            ("gmm_K", self.gmm_k),
            ("graph_k", self.graph_k),
            ("k_b", self.k_b),
            ("k_top_holes", self.k_top_holes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CliError::usage(format!("{name} must be positive")));
            }
        }
        if self.holes_reduce_to == Some(0) {
            return Err(CliError::usage("holes_reduce_to must be positive"));
        }
        if self.retrieval_k.is_empty() || self.retrieval_k.contains(&0) {
            return Err(CliError::usage("retrieval_k must be a non-empty list of positive values"));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(CliError::usage(format!("alpha must lie in (0, 0.5), got {}", self.alpha)));
        }
        if !(self.boundary_alpha.is_finite() && self.boundary_alpha > 0.0) {
            return Err(CliError::usage("boundary_alpha must be positive"));
        }
        if !(0.0 <= self.q_low && self.q_low < self.q_high && self.q_high <= 1.0) {
            return Err(CliError::usage("need 0 <= q_low < q_high <= 1"));
        }
        if !(0.0..=1.0).contains(&self.overlap_quantile) {
            return Err(CliError::usage("overlap_quantile must lie in [0, 1]"));
        }
        if !(self.probe_lambda.is_finite() && self.probe_lambda >= 0.0) {
            return Err(CliError::usage("probe_lambda must be non-negative"));
        }
        if !(self.probe_eval_fraction > 0.0 && self.probe_eval_fraction < 1.0) {
            return Err(CliError::usage("probe_eval_fraction must lie in (0, 1)"));
        }
        if self.embeddings_path.is_none() || self.metadata_path.is_none() {
            return Err(CliError::usage("embeddings_path and metadata_path are required"));
        }
        Ok(())
    }
}
