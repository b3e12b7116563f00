//! Poll-based HTTP front end over the same operations as the command line.
//!
//! ```text
//! POST /tasks                 task spec            -> 201 {"task_id"}
//! POST /tasks/{id}/route      {"budget"}           -> 202 {"job_id"}
//! POST /tasks/{id}/bench      {"metric"?}          -> 202 {"job_id"}
//! GET  /jobs/{id}                                  -> job status
//! GET  /tasks/{id}/solutions                       -> pool.json
//! GET  /tasks/{id}/curve                           -> curve.csv
//! ```

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use routekit_core::bench::CostAxis;
use routekit_core::model::{validate_task_spec, SolutionPool, TaskSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::app::{self, AppError, RouteOptions, POOL_FILE};
use crate::config::EngineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub job_id: String,
    pub task_id: String,
    pub kind: &'static str,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
struct TaskEntry {
    spec: Option<Arc<TaskSpec>>,
    run_dir: Option<PathBuf>,
    routing: bool,
    benching: bool,
}

pub struct ServiceState {
    config: EngineConfig,
    tasks: Mutex<HashMap<String, TaskEntry>>,
    jobs: Mutex<HashMap<String, Job>>,
}

impl ServiceState {
    pub fn new(config: EngineConfig) -> Arc<Self> {
        Arc::new(Self { config, tasks: Mutex::new(HashMap::new()), jobs: Mutex::new(HashMap::new()) })
    }
}

type Shared = Arc<ServiceState>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": message.into()}))).into_response()
}

fn bad_request(violations: Vec<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({"error": "invalid request", "violations": violations}))).into_response()
}

/// Task body: the task spec plus an optional directory for relative image paths.
#[derive(Deserialize)]
struct NewTask {
    #[serde(flatten)]
    spec: TaskSpec,
    #[serde(default)]
    base_dir: Option<PathBuf>,
}

async fn create_task(State(state): State<Shared>, body: Bytes) -> Response {
    let new: NewTask = match serde_json::from_slice(&body) {
        Ok(t) => t,
        Err(e) => return bad_request(vec![format!("body: {e}")]),
    };
    let mut spec = new.spec;
    spec.base_dir = new.base_dir;
    let report = validate_task_spec(&spec);
    if !report.is_valid() {
        return bad_request(app::describe_violations(&report).lines().map(str::to_owned).collect());
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let entry = TaskEntry { spec: Some(Arc::new(spec)), ..Default::default() };
    state.tasks.lock().expect("tasks lock").insert(id.clone(), entry);
    (StatusCode::CREATED, Json(json!({"task_id": id}))).into_response()
}

fn new_job(state: &ServiceState, task_id: &str, kind: &'static str) -> String {
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    let job = Job {
        job_id: job_id.clone(),
        task_id: task_id.to_owned(),
        kind,
        status: JobStatus::Running,
        result: None,
        error: None,
    };
    state.jobs.lock().expect("jobs lock").insert(job_id.clone(), job);
    job_id
}

fn finish_job(state: &ServiceState, job_id: &str, outcome: Result<Value, AppError>) {
    let mut jobs = state.jobs.lock().expect("jobs lock");
    if let Some(job) = jobs.get_mut(job_id) {
        match outcome {
            Ok(v) => {
                job.status = JobStatus::Succeeded;
                job.result = Some(v);
            }
            Err(e) => {
                job.status = JobStatus::Failed;
                job.error = Some(format!("{e:#}"));
            }
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, Response> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| bad_request(vec![format!("body: {e}")]))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteBody {
    budget: Option<usize>,
    #[serde(default)]
    removed: Vec<String>,
}

async fn start_route(State(state): State<Shared>, UrlPath(task_id): UrlPath<String>, body: Bytes) -> Response {
    let body: RouteBody = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let budget = match body.budget {
        Some(b) if b > 0 => b,
        _ => return bad_request(vec!["budget: a positive integer is required".into()]),
    };
    let removed = match app::parse_roles(&body.removed.join(",")) {
        Ok(r) => r,
        Err(e) => return bad_request(vec![format!("removed: {e}")]),
    };
    let spec = {
        let mut tasks = state.tasks.lock().expect("tasks lock");
        let Some(entry) = tasks.get_mut(&task_id) else {
            return error(StatusCode::NOT_FOUND, format!("unknown task `{task_id}`"));
        };
        if entry.routing {
            return error(StatusCode::CONFLICT, "a routing job is already running for this task");
        }
        entry.routing = true;
        entry.spec.clone().expect("task spec")
    };
    let job_id = new_job(&state, &task_id, "route");
    let (st, jid) = (state.clone(), job_id.clone());
    tokio::task::spawn_blocking(move || {
        let opts = RouteOptions { budget, removed, ..Default::default() };
        let outcome = app::route(&st.config, &spec, &opts);
        {
            let mut tasks = st.tasks.lock().expect("tasks lock");
            if let Some(entry) = tasks.get_mut(&task_id) {
                entry.routing = false;
                if let Ok(summary) = &outcome {
                    entry.run_dir = Some(summary.run_dir.clone());
                }
            }
        }
        let value = outcome.map(|s| {
            json!({
                "run_dir": s.run_dir,
                "solutions": s.pool.solutions.iter().map(|x| x.id.clone()).collect::<Vec<_>>(),
                "outcomes": s.outcomes.iter().map(|o| json!({"session_id": o.session_id, "kind": o.kind})).collect::<Vec<_>>(),
            })
        });
        finish_job(&st, &jid, value);
    });
    (StatusCode::ACCEPTED, Json(json!({"job_id": job_id}))).into_response()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchBody {
    metric: Option<String>,
    #[serde(default)]
    cost_axis: CostAxis,
}

async fn start_bench(State(state): State<Shared>, UrlPath(task_id): UrlPath<String>, body: Bytes) -> Response {
    let body: BenchBody = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let (spec, run_dir) = {
        let mut tasks = state.tasks.lock().expect("tasks lock");
        let Some(entry) = tasks.get_mut(&task_id) else {
            return error(StatusCode::NOT_FOUND, format!("unknown task `{task_id}`"));
        };
        let Some(run_dir) = entry.run_dir.clone() else {
            return error(StatusCode::CONFLICT, "no solution pool yet: run a route job first");
        };
        if entry.benching || entry.routing {
            return error(StatusCode::CONFLICT, "another job is running for this task");
        }
        entry.benching = true;
        (entry.spec.clone().expect("task spec"), run_dir)
    };
    let job_id = new_job(&state, &task_id, "bench");
    let (st, jid) = (state.clone(), job_id.clone());
    tokio::task::spawn_blocking(move || {
        let outcome =
            app::bench(&st.config, &spec, &run_dir.join(POOL_FILE), body.metric.as_deref(), None, body.cost_axis);
        if let Some(entry) = st.tasks.lock().expect("tasks lock").get_mut(&task_id) {
            entry.benching = false;
        }
        let value = outcome.map(|s| json!({"metric": s.metric, "records": s.records}));
        finish_job(&st, &jid, value);
    });
    (StatusCode::ACCEPTED, Json(json!({"job_id": job_id}))).into_response()
}

async fn get_job(State(state): State<Shared>, UrlPath(job_id): UrlPath<String>) -> Response {
    match state.jobs.lock().expect("jobs lock").get(&job_id) {
        Some(job) => Json(job.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job `{job_id}`")),
    }
}

fn run_dir_of(state: &ServiceState, task_id: &str) -> Result<Option<PathBuf>, Response> {
    match state.tasks.lock().expect("tasks lock").get(task_id) {
        Some(entry) => Ok(entry.run_dir.clone()),
        None => Err(error(StatusCode::NOT_FOUND, format!("unknown task `{task_id}`"))),
    }
}

async fn get_solutions(State(state): State<Shared>, UrlPath(task_id): UrlPath<String>) -> Response {
    let dir = match run_dir_of(&state, &task_id) {
        Ok(d) => d,
        Err(r) => return r,
    };
    let Some(dir) = dir else { return error(StatusCode::NOT_FOUND, "no solution pool yet") };
    match SolutionPool::load(dir.join(POOL_FILE)) {
        Ok(pool) => ([(header::CONTENT_TYPE, "application/json")], pool.to_json()).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_curve(State(state): State<Shared>, UrlPath(task_id): UrlPath<String>) -> Response {
    let dir = match run_dir_of(&state, &task_id) {
        Ok(d) => d,
        Err(r) => return r,
    };
    match dir.map(|d| std::fs::read_to_string(d.join("curve.csv"))) {
        Some(Ok(csv)) => ([(header::CONTENT_TYPE, "text/csv")], csv).into_response(),
        _ => error(StatusCode::NOT_FOUND, "no curve yet: run a bench job first"),
    }
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/tasks", post(create_task))
        .route("/tasks/{id}/route", post(start_route))
        .route("/tasks/{id}/bench", post(start_bench))
        .route("/tasks/{id}/solutions", get(get_solutions))
        .route("/tasks/{id}/curve", get(get_curve))
        .route("/jobs/{id}", get(get_job))
        .with_state(state)
}

pub async fn serve(config: EngineConfig, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(ServiceState::new(config))).await?;
    Ok(())
}
