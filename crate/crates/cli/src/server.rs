//! JSON API over a run store. Cycles are queued and executed one at a time
//! by a dedicated worker thread; reads go straight to the store.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};

use atdm_core::dataset::Dataset;
use atdm_core::pareto::{Norm, Orientation};
use atdm_core::pipeline::*;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Environment variable holding the listen address.
pub const LISTEN_ENV: &str = "ATDM_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
}

struct Job {
    run_id: String,
    dataset: Arc<Dataset>,
    cfg: PipelineConfig,
    now: usize,
}

pub struct AppState {
    store: RunStore,
    data_dir: PathBuf,
    base: PipelineConfig,
    jobs: mpsc::Sender<Job>,
    pending: Arc<RwLock<BTreeMap<String, JobState>>>,
    counter: AtomicU64,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(m: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, m.into())
}

fn not_found(m: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, m.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// Starts the worker and returns the shared state. `data_dir` is the
/// dataset used when a request names none.
pub fn start(store: RunStore, data_dir: PathBuf, base: PipelineConfig) -> anyhow::Result<Arc<AppState>> {
    store.set_corridor(&base.corridor)?;
    let (tx, rx) = mpsc::channel::<Job>();
    let pending: Arc<RwLock<BTreeMap<String, JobState>>> = Arc::default();
    let worker_store = store.clone();
    let worker_pending = pending.clone();
    std::thread::Builder::new().name("atdm-worker".into()).spawn(move || {
        for job in rx {
            worker_pending.write().unwrap().insert(job.run_id.clone(), JobState::Running);
            let rec = match run_cycle(&job.dataset, &job.cfg, job.now, &job.run_id) {
                Ok(r) => r,
                Err((r, e)) => {
                    log::warn!("{}: {e}", job.run_id);
                    *r
                }
            };
            if let Err(e) = worker_store.save(&rec) {
                log::error!("{}: cannot persist: {e}", job.run_id);
            }
            log::info!("{} {:?} in {} ms", rec.run_id, rec.status, rec.timing.total_ms);
            worker_pending.write().unwrap().remove(&job.run_id);
        }
    })?;
    let counter = AtomicU64::new(store.list_ids()?.len() as u64);
    Ok(Arc::new(AppState { store, data_dir, base, jobs: tx, pending, counter }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/pareto", get(get_pareto))
        .route("/runs/{id}/recommendation", get(get_recommendation))
        .route("/runs/{id}/speedfield", get(get_speedfield))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateRun {
    /// Dataset directory; the server default when absent.
    pub dataset: Option<PathBuf>,
    /// Observation minute; the dataset end when absent.
    pub now: Option<usize>,
    /// Merge patch over the server config.
    pub overrides: Option<Value>,
}

async fn create_run(State(st): State<Arc<AppState>>, body: Option<Json<CreateRun>>) -> Result<impl IntoResponse, ApiError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let cfg = match &req.overrides {
        Some(o) => crate::apply_overrides(&st.base, o).map_err(|e| bad_request(format!("{e:#}")))?,
        None => st.base.clone(),
    };
    if cfg.corridor != st.base.corridor {
        return Err(bad_request("corridor overrides are not supported by this server"));
    }
    let dir = req.dataset.unwrap_or_else(|| st.data_dir.clone());
    let dataset = tokio::task::spawn_blocking(move || Dataset::load(&dir))
        .await
        .map_err(internal)?
        .map_err(|e| bad_request(format!("dataset: {e}")))?;
    let end = dataset.speeds.n_minutes;
    let now = req.now.unwrap_or(end);
    if now == 0 || now > end {
        return Err(bad_request(format!("now {now} outside 1..={end}")));
    }
    let k = st.counter.fetch_add(1, Ordering::SeqCst) + 1;
    let run_id = format!("r{k:04}-m{now:03}");
    st.pending.write().unwrap().insert(run_id.clone(), JobState::Queued);
    st.jobs
        .send(Job { run_id: run_id.clone(), dataset: Arc::new(dataset), cfg, now })
        .map_err(|_| internal("worker stopped"))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id, "status": JobState::Queued }))))
}

#[derive(Serialize)]
struct RunSummary {
    run_id: String,
    status: Value,
    now_minute: Option<usize>,
    issued_at: Option<String>,
    delta_t_min: Option<i64>,
    selections: Vec<String>,
}

async fn list_runs(State(st): State<Arc<AppState>>) -> Result<Json<Vec<RunSummary>>, ApiError> {
    let pending = st.pending.read().unwrap().clone();
    let st2 = st.clone();
    let stored = tokio::task::spawn_blocking(move || -> Result<Vec<RunRecord>, PipelineError> {
        st2.store.list_ids()?.iter().map(|id| st2.store.load(id)).collect()
    })
    .await
    .map_err(internal)?
    .map_err(internal)?;
    let mut out: Vec<RunSummary> = stored
        .into_iter()
        .filter(|r| !pending.contains_key(&r.run_id))
        .map(|r| RunSummary {
            status: serde_json::to_value(r.status).unwrap_or(Value::Null),
            now_minute: Some(r.now_minute),
            issued_at: Some(r.issued_at),
            delta_t_min: r.delta_t_min,
            selections: r.selections.into_iter().map(|s| s.scenario_id).collect(),
            run_id: r.run_id,
        })
        .collect();
    out.extend(pending.into_iter().map(|(id, s)| RunSummary {
        run_id: id,
        status: serde_json::to_value(s).unwrap_or(Value::Null),
        now_minute: None,
        issued_at: None,
        delta_t_min: None,
        selections: Vec::new(),
    }));
    Ok(Json(out))
}

/// Loads a finished record; pending runs answer 202 with their state.
async fn finished(st: &Arc<AppState>, id: &str) -> Result<Result<RunRecord, Response>, ApiError> {
    if let Some(s) = st.pending.read().unwrap().get(id) {
        let body = Json(json!({ "run_id": id, "status": s }));
        return Ok(Err((StatusCode::ACCEPTED, body).into_response()));
    }
    let st = st.clone();
    let id = id.to_string();
    let res = tokio::task::spawn_blocking(move || st.store.load(&id)).await.map_err(internal)?;
    match res {
        Ok(r) => Ok(Ok(r)),
        Err(PipelineError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Err(not_found("no such run")),
        Err(PipelineError::Other(m)) => Err(not_found(m)),
        Err(e) => Err(internal(e)),
    }
}

async fn get_run(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match finished(&st, &id).await? {
        Ok(r) => Json(r).into_response(),
        Err(pending) => pending,
    })
}

#[derive(Serialize)]
struct ParetoPoint {
    scenario_id: String,
    point: (f64, f64),
    throughput: f64,
    mean_speed: f64,
    pareto: bool,
    selected_for: Vec<String>,
}

async fn get_pareto(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let rec = match finished(&st, &id).await? {
        Ok(r) => r,
        Err(pending) => return Ok(pending),
    };
    let points: Vec<ParetoPoint> = rec
        .scenarios
        .iter()
        .map(|s| ParetoPoint {
            scenario_id: s.scenario_id.clone(),
            point: s.point,
            throughput: s.raw.throughput,
            mean_speed: s.raw.mean_speed,
            pareto: s.pareto,
            selected_for: s.selected_for.clone(),
        })
        .collect();
    let front: Vec<String> = rec.front().into_iter().map(|c| c.id).collect();
    Ok(Json(json!({ "run_id": rec.run_id, "points": points, "front": front })).into_response())
}

#[derive(Debug, Deserialize)]
struct RecommendationQuery {
    w: Option<String>,
    p: Option<String>,
}

async fn get_recommendation(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RecommendationQuery>,
) -> Result<Response, ApiError> {
    let w: f64 = q.w.as_deref().ok_or_else(|| bad_request("missing w"))?.parse().map_err(|_| bad_request("w is not a number"))?;
    let p = Norm::parse(q.p.as_deref().ok_or_else(|| bad_request("missing p"))?).map_err(|e| bad_request(e.to_string()))?;
    let o = Orientation::new(w, p).map_err(|e| bad_request(e.to_string()))?;
    let rec = match finished(&st, &id).await? {
        Ok(r) => r,
        Err(pending) => return Ok(pending),
    };
    let sel = rec.recommend(&o).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(sel).into_response())
}

#[derive(Debug, Deserialize)]
struct FieldQuery {
    scenario: Option<String>,
}

async fn get_speedfield(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<FieldQuery>,
) -> Result<Response, ApiError> {
    let scenario = q.scenario.ok_or_else(|| bad_request("missing scenario"))?;
    let rec = match finished(&st, &id).await? {
        Ok(r) => r,
        Err(pending) => return Ok(pending),
    };
    if rec.scenario(&scenario).is_none() {
        return Err(not_found(format!("no scenario {scenario:?} in run {id}")));
    }
    let st2 = st.clone();
    let (id2, sc2) = (id.clone(), scenario.clone());
    let field = tokio::task::spawn_blocking(move || st2.store.load_field(&id2, &sc2))
        .await
        .map_err(internal)?
        .map_err(|e| not_found(e.to_string()))?;
    let rows: Vec<&[Option<f64>]> = (0..field.n_minutes).map(|m| field.row(m)).collect();
    Ok(Json(json!({
        "run_id": id,
        "scenario": scenario,
        "issued_at": rec.issued_at,
        "segment_length_m": st.base.corridor.segment_length_m,
        "n_minutes": field.n_minutes,
        "n_segments": field.n_segments,
        "speeds_kmh": rows,
    }))
    .into_response())
}
