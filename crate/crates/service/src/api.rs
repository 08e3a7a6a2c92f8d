//! Read-only HTTP API over one store.
//!
//! | route | body / query | reply |
//! |---|---|---|
//! | `GET /processes` | | process list |
//! | `GET /process-graph` | `range=t0..t1` | process graph |
//! | `GET /thread-graph` | `range`, `tgids=1,2`, `min_ns`, `min_count` | thread dynamics graph |
//! | `GET /templates` | | template list |
//! | `POST /query` | `{template, bindings}` or `{sql}` | query result |
//! | `POST /track` | `{baseline, compare, tgids, alpha, full}` | diagnosis report |
//! | `POST /kpi` | CSV `ts,value` or KPI JSON | KPI summary and suggested ranges |
//! | `GET /kpi` | | the uploaded KPI series |
//!
//! Every request opens its own read-only connection on a blocking worker;
//! at most `workers` run at once.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap};
use axum::routing::{get, post};
use axum::{Json, Router};
use prismlike_core::analyzer::{
    full_search, selective_thread_tracking, suggest_ranges, ChangePoint, DiagnosisReport, Flag, KpiSeries,
    DEFAULT_ALPHA,
};
use prismlike_core::graph::{build_process_graph, build_thread_graph, EdgeThreshold};
use prismlike_core::model::{Nanos, ProcessMeta, NANOS_PER_SEC};
use prismlike_core::store::{Bindings, MetricStore, PlotKind, QueryResult, TemplateLibrary, TsRange};
use prismlike_core::{AnalyzerError, StoreError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;

use crate::error::ApiError;

pub const DEFAULT_KPI_LIMIT: usize = 4 * 1024 * 1024;
pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub db: PathBuf,
    pub templates: TemplateLibrary,
    /// Accept `{"sql": ...}` on `/query`.
    pub allow_raw_sql: bool,
    pub kpi_limit: usize,
    pub workers: usize,
}

impl ApiConfig {
    pub fn new(db: impl Into<PathBuf>) -> Self {
        ApiConfig {
            db: db.into(),
            templates: TemplateLibrary::builtin(),
            allow_raw_sql: false,
            kpi_limit: DEFAULT_KPI_LIMIT,
            workers: DEFAULT_WORKERS,
        }
    }
}

struct Inner {
    db: PathBuf,
    templates: TemplateLibrary,
    allow_raw_sql: bool,
    window_ns: Nanos,
    kpi: RwLock<Option<KpiSeries>>,
    pool: Semaphore,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Opens the store once to check that it is readable.
    pub fn new(config: &ApiConfig) -> Result<AppState, StoreError> {
        let store = MetricStore::open_read_only(&config.db)?;
        let window_ns = store.window_ns()?.unwrap_or(NANOS_PER_SEC);
        Ok(AppState(Arc::new(Inner {
            db: config.db.clone(),
            templates: config.templates.clone(),
            allow_raw_sql: config.allow_raw_sql,
            window_ns,
            kpi: RwLock::new(None),
            pool: Semaphore::new(config.workers.max(1)),
        })))
    }

    async fn with_store<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&MetricStore, &Inner) -> Result<T, ApiError> + Send + 'static,
    {
        let _permit = self.0.pool.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
        let inner = self.0.clone();
        tokio::task::spawn_blocking(move || {
            let store = MetricStore::open_read_only(&inner.db)?;
            f(&store, &inner)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    }
}

pub fn router(config: &ApiConfig) -> Result<Router, StoreError> {
    let state = AppState::new(config)?;
    Ok(Router::new()
        .route("/processes", get(processes))
        .route("/process-graph", get(process_graph))
        .route("/thread-graph", get(thread_graph))
        .route("/templates", get(templates))
        .route("/query", post(query))
        .route("/track", post(track))
        .route("/kpi", get(get_kpi).post(post_kpi).layer(DefaultBodyLimit::max(config.kpi_limit)))
        .with_state(state))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    config: &ApiConfig,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(config).map_err(std::io::Error::other)?;
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Parses `1,2,3`.
pub fn parse_tgids(text: &str) -> Result<BTreeSet<u32>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| format!("bad pid `{s}`")))
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphQuery {
    range: Option<String>,
    tgids: Option<String>,
    min_ns: Option<u64>,
    min_count: Option<u64>,
}

impl GraphQuery {
    fn range(&self) -> Result<Option<TsRange>, ApiError> {
        self.range.as_deref().map(|r| r.parse::<TsRange>().map_err(ApiError::bad_request)).transpose()
    }
}

async fn processes(State(state): State<AppState>) -> Result<Json<Vec<ProcessMeta>>, ApiError> {
    state.with_store(|store, _| Ok(Json(store.processes()?))).await
}

async fn process_graph(State(state): State<AppState>, Query(q): Query<GraphQuery>) -> Result<Json<Value>, ApiError> {
    let range = q.range()?;
    state
        .with_store(move |store, _| {
            let graph = build_process_graph(store, range.map(|r| r.window()))?;
            Ok(Json(serde_json::to_value(graph).map_err(|e| ApiError::internal(e.to_string()))?))
        })
        .await
}

async fn thread_graph(State(state): State<AppState>, Query(q): Query<GraphQuery>) -> Result<Json<Value>, ApiError> {
    let range = q.range()?;
    let tgids = q.tgids.as_deref().map(parse_tgids).transpose().map_err(ApiError::bad_request)?;
    let defaults = EdgeThreshold::default();
    let threshold = EdgeThreshold {
        min_ns: q.min_ns.unwrap_or(defaults.min_ns).max(1),
        min_count: q.min_count.unwrap_or(defaults.min_count).max(1),
    };
    state
        .with_store(move |store, _| {
            let graph = build_thread_graph(store, range.map(|r| r.window()), tgids.as_ref(), threshold)?;
            Ok(Json(serde_json::to_value(graph).map_err(|e| ApiError::internal(e.to_string()))?))
        })
        .await
}

#[derive(Debug, Serialize)]
pub struct TemplateInfo {
    pub name: String,
    pub description: String,
    pub plot: PlotKind,
    pub columns: Vec<String>,
    pub placeholders: Vec<String>,
}

async fn templates(State(state): State<AppState>) -> Json<Vec<TemplateInfo>> {
    Json(
        state
            .0
            .templates
            .iter()
            .map(|t| TemplateInfo {
                name: t.name.clone(),
                description: t.description.clone(),
                plot: t.plot,
                columns: t.columns.clone(),
                placeholders: t.placeholders(),
            })
            .collect(),
    )
}

fn json_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    template: Option<String>,
    #[serde(default)]
    bindings: Option<Value>,
    sql: Option<String>,
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Json<QueryResult>, ApiError> {
    let req: QueryRequest = json_body(&body)?;
    match (req.template, req.sql) {
        (Some(name), None) => {
            let bindings = match &req.bindings {
                Some(v) => Bindings::from_json(v)?,
                None => Bindings::default(),
            };
            state.with_store(move |store, inner| Ok(Json(store.query(&inner.templates, &name, &bindings)?))).await
        }
        (None, Some(sql)) => {
            if !state.0.allow_raw_sql {
                return Err(ApiError::new(
                    axum::http::StatusCode::FORBIDDEN,
                    "raw SQL is disabled; start the server with --unsafe-raw-sql",
                ));
            }
            state.with_store(move |store, _| Ok(Json(store.raw_query(&sql)?))).await
        }
        _ => Err(ApiError::bad_request("give exactly one of `template` or `sql`")),
    }
}

/// Input of a diagnosis run, shared by `/track` and `analyze`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRequest {
    pub baseline: TsRange,
    pub compare: TsRange,
    #[serde(default)]
    pub tgids: Option<Vec<u32>>,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Test every thread instead of tracking from the entry threads.
    #[serde(default)]
    pub full: bool,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum TrackResponse {
    Report(Box<DiagnosisReport>),
    Full { flags: Vec<Flag> },
}

impl TrackRequest {
    pub fn alpha(&self) -> Result<f64, String> {
        let alpha = self.alpha.unwrap_or(DEFAULT_ALPHA);
        if alpha > 0.0 && alpha < 1.0 {
            Ok(alpha)
        } else {
            Err(format!("alpha must be in (0, 1), got {alpha}"))
        }
    }

    pub fn run(&self, store: &MetricStore) -> Result<TrackResponse, AnalyzerError> {
        let alpha = self.alpha().map_err(|m| StoreError::InvalidBinding { name: "alpha".into(), reason: m })?;
        let tgids: Option<BTreeSet<u32>> = self.tgids.as_ref().map(|t| t.iter().copied().collect());
        if self.full {
            let flags = full_search(store, self.baseline, self.compare, tgids.as_ref(), alpha)?;
            Ok(TrackResponse::Full { flags })
        } else {
            let report = selective_thread_tracking(store, self.baseline, self.compare, tgids.as_ref(), alpha)?;
            Ok(TrackResponse::Report(Box::new(report)))
        }
    }
}

async fn track(State(state): State<AppState>, body: Bytes) -> Result<Json<TrackResponse>, ApiError> {
    let req: TrackRequest = json_body(&body)?;
    req.alpha().map_err(ApiError::bad_request)?;
    state.with_store(move |store, _| Ok(Json(req.run(store)?))).await
}

#[derive(Debug, Serialize)]
pub struct Suggestion {
    pub baseline: TsRange,
    pub compare: TsRange,
    pub change_point: ChangePoint,
}

#[derive(Debug, Serialize)]
pub struct KpiSummary {
    pub name: String,
    pub points: usize,
    pub suggestion: Option<Suggestion>,
}

/// Parses an upload: JSON when the content type says so, CSV otherwise.
pub fn parse_kpi(content_type: Option<&str>, body: &[u8]) -> Result<KpiSeries, AnalyzerError> {
    let text = std::str::from_utf8(body).map_err(|_| AnalyzerError::InvalidKpi("body is not UTF-8".into()))?;
    if content_type.is_some_and(|c| c.starts_with("application/json")) {
        KpiSeries::from_json(text)
    } else {
        KpiSeries::from_csv("kpi", text)
    }
}

pub fn summarize_kpi(kpi: &KpiSeries, window_ns: Nanos) -> KpiSummary {
    KpiSummary {
        name: kpi.name.clone(),
        points: kpi.len(),
        suggestion: suggest_ranges(kpi, window_ns).map(|(baseline, compare, change_point)| Suggestion {
            baseline,
            compare,
            change_point,
        }),
    }
}

async fn post_kpi(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<KpiSummary>, ApiError> {
    let content_type = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok());
    let kpi = parse_kpi(content_type, &body)?;
    let summary = summarize_kpi(&kpi, state.0.window_ns);
    *state.0.kpi.write().map_err(|_| ApiError::internal("KPI lock poisoned"))? = Some(kpi);
    Ok(Json(summary))
}

async fn get_kpi(State(state): State<AppState>) -> Result<Json<KpiSeries>, ApiError> {
    let kpi = state.0.kpi.read().map_err(|_| ApiError::internal("KPI lock poisoned"))?;
    kpi.clone().map(Json).ok_or_else(|| ApiError::not_found("no KPI series uploaded"))
}
