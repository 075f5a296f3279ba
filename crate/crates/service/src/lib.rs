//! JSON-over-HTTP service for the atlas UI: search, corpus summary, 2D map,
//! cached audit reports and sample lookup over an immutable corpus.
//!
//! Query-by-image is not offered; callers pass an existing sample id or a
//! vector produced by an upstream encoder.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use atlas_core::corpus::{Corpus, Field, MetadataRecord};
use atlas_core::geometry::pca_reduce;
use atlas_core::retrieval::{search, RetrievalError, RetrievalQuery, SearchHit};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MAP_METHOD: &str = "pca-2d";
pub const DEFAULT_MAP_LIMIT: usize = 50_000;
pub const SECTIONS: [&str; 7] = ["novelty", "similarity", "density", "holes", "probes", "retrieval", "divergence"];

/// Corpus, its 2D map and cached reports. Never mutated after construction.
pub struct AtlasIndex {
    corpus: Corpus,
    map2d: Vec<[f64; 2]>,
    reports: BTreeMap<String, Value>,
}

impl AtlasIndex {
    pub fn new(corpus: Corpus, reports: BTreeMap<String, Value>) -> Self {
        let map2d = map_coordinates(&corpus);
        Self { corpus, map2d, reports }
    }

    /// Loads `<section>.json` for every known section present in `dir`.
    pub fn with_reports_dir(corpus: Corpus, dir: &Path) -> std::io::Result<Self> {
        let mut reports = BTreeMap::new();
        for name in SECTIONS {
            let path = dir.join(format!("{name}.json"));
            if path.exists() {
                let value = serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
                })?;
                reports.insert(name.to_string(), value);
            }
        }
        Ok(Self::new(corpus, reports))
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn map2d(&self) -> &[[f64; 2]] {
        &self.map2d
    }

    pub fn report(&self, section: &str) -> Option<&Value> {
        self.reports.get(section)
    }
}

/// First two principal coordinates; missing axes are zero.
fn map_coordinates(corpus: &Corpus) -> Vec<[f64; 2]> {
    let n = corpus.len();
    let p = 2.min(corpus.dim()).min(n);
    match pca_reduce(&corpus.embeddings().to_dmatrix(), p) {
        Ok(r) => (0..n).map(|i| [r.values[(i, 0)], if p > 1 { r.values[(i, 1)] } else { 0.0 }]).collect(),
        Err(_) => vec![[0.0, 0.0]; n],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub k: usize,
    pub results: Vec<SearchHit>,
}

/// Runs a query the same way `POST /query` does.
pub fn run_query(corpus: &Corpus, query: &RetrievalQuery) -> Result<QueryResponse, RetrievalError> {
    Ok(QueryResponse { k: query.k, results: search(corpus, query)? })
}

fn error(status: StatusCode, message: impl Into<String>, extra: Value) -> Response {
    let mut body = json!({ "error": message.into(), "status": status.as_u16() });
    if let (Value::Object(b), Value::Object(e)) = (&mut body, extra) {
        b.extend(e);
    }
    (status, Json(body)).into_response()
}

fn retrieval_status(e: &RetrievalError) -> StatusCode {
    match e {
        RetrievalError::UnknownSample(_) => StatusCode::NOT_FOUND,
        RetrievalError::EmptyPool(_) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::BAD_REQUEST,
    }
}

async fn health(State(index): State<Arc<AtlasIndex>>) -> Json<Value> {
    let c = &index.corpus;
    Json(json!({
        "status": "ok",
        "version": VERSION,
        "samples": c.len(),
        "datasets": c.rows_by_dataset().len(),
        "dim": c.dim(),
    }))
}

/// Fields reported with value counts; free-text-like or numeric fields use
/// their binned forms.
const SUMMARY_FIELDS: [Field; 10] = [
    Field::Year,
    Field::Label,
    Field::Icd,
    Field::Fst,
    Field::FstGroup,
    Field::AgeBin,
    Field::Gender,
    Field::Origin,
    Field::BodyRegion,
    Field::Modality,
];

fn parse_filters(params: &BTreeMap<String, String>) -> Result<BTreeMap<Field, Vec<String>>, String> {
    params
        .iter()
        .map(|(k, v)| {
            let field = k.parse::<Field>().map_err(|e| e.to_string())?;
            Ok((field, v.split(',').map(str::to_string).collect()))
        })
        .collect()
}

fn matches(r: &MetadataRecord, filters: &BTreeMap<Field, Vec<String>>) -> bool {
    filters.iter().all(|(f, vals)| r.value(*f).is_some_and(|v| vals.contains(&v)))
}

/// Per-dataset counts, per-field coverage and value counts. Query parameters
/// `field=v1,v2` add the number of samples matching all of them.
async fn summary(State(index): State<Arc<AtlasIndex>>, Query(params): Query<BTreeMap<String, String>>) -> Response {
    let filters = match parse_filters(&params) {
        Ok(f) => f,
        Err(e) => return error(StatusCode::BAD_REQUEST, e, json!({})),
    };
    let c = &index.corpus;
    let datasets: BTreeMap<&str, usize> = c.rows_by_dataset().into_iter().map(|(k, v)| (k, v.len())).collect();
    let mut fields = serde_json::Map::new();
    for f in SUMMARY_FIELDS {
        let mut values: BTreeMap<String, usize> = BTreeMap::new();
        for r in c.records() {
            if let Some(v) = r.value(f) {
                *values.entry(v).or_default() += 1;
            }
        }
        let present: usize = values.values().sum();
        fields.insert(
            f.name().to_string(),
            json!({
                "present": present,
                "coverage": if c.is_empty() { 0.0 } else { present as f64 / c.len() as f64 },
                "values": values,
            }),
        );
    }
    let mut body = json!({ "total": c.len(), "datasets": datasets, "fields": fields });
    if !filters.is_empty() {
        let count = c.records().iter().filter(|r| matches(r, &filters)).count();
        let applied: BTreeMap<&str, &Vec<String>> = filters.iter().map(|(f, v)| (f.name(), v)).collect();
        body["filter"] = json!({ "applied": applied, "count": count });
    }
    Json(body).into_response()
}

async fn query(State(index): State<Arc<AtlasIndex>>, headers: HeaderMap, body: Bytes) -> Response {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(';').next().unwrap_or("").trim().eq_ignore_ascii_case("application/json"));
    if !is_json {
        return error(StatusCode::UNSUPPORTED_MEDIA_TYPE, "content-type must be application/json", json!({}));
    }
    let q: RetrievalQuery = match serde_json::from_slice(&body) {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed query: {e}"), json!({})),
    };
    match run_query(&index.corpus, &q) {
        Ok(r) => Json(r).into_response(),
        Err(e) => error(retrieval_status(&e), e.to_string(), json!({})),
    }
}

#[derive(Debug, Deserialize)]
struct MapParams {
    fields: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn map(State(index): State<Arc<AtlasIndex>>, Query(p): Query<MapParams>) -> Response {
    let fields: Vec<Field> = match p
        .fields
        .as_deref()
        .filter(|s| !s.is_empty())
        .map(|s| s.split(',').map(str::parse::<Field>).collect::<Result<Vec<_>, _>>())
        .transpose()
    {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string(), json!({})),
    };
    let total = index.corpus.len();
    let offset = p.offset.unwrap_or(0).min(total);
    let limit = p.limit.unwrap_or(DEFAULT_MAP_LIMIT);
    let points: Vec<Value> = (offset..(offset.saturating_add(limit)).min(total))
        .map(|i| {
            let r = index.corpus.record(i);
            let values: BTreeMap<&str, Option<String>> = fields.iter().map(|f| (f.name(), r.value(*f))).collect();
            json!({ "id": r.id, "x": index.map2d[i][0], "y": index.map2d[i][1], "fields": values })
        })
        .collect();
    Json(json!({ "method": MAP_METHOD, "total": total, "offset": offset, "limit": limit, "points": points }))
        .into_response()
}

async fn report(State(index): State<Arc<AtlasIndex>>, UrlPath(section): UrlPath<String>) -> Response {
    match index.report(&section) {
        Some(v) => Json(v.clone()).into_response(),
        None => error(
            StatusCode::NOT_FOUND,
            format!("report section {section} not available"),
            json!({ "section": section }),
        ),
    }
}

async fn sample(State(index): State<Arc<AtlasIndex>>, UrlPath(id): UrlPath<String>) -> Response {
    match index.corpus.index_of(&id) {
        Some(i) => Json(json!({ "id": id, "metadata": index.corpus.record(i), "map": index.map2d[i] })).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown sample id {id}"), json!({ "id": id })),
    }
}

pub fn router(index: Arc<AtlasIndex>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/corpus/summary", get(summary))
        .route("/query", post(query))
        .route("/map", get(map))
        .route("/report/{section}", get(report))
        .route("/sample/{id}", get(sample))
        .with_state(index)
}

/// Serves until ctrl-c.
pub async fn serve(index: Arc<AtlasIndex>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(index))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
