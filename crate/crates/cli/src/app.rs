//! Operations shared by the command line and the HTTP service.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use routekit_core::agents::{AgentPool, AgentRole, Agents};
use routekit_core::bench::{
    ablation_run, benchmark_pool, emit_curve, iteration_trace_report, write_ablation_csv, write_trace_csv, AblationRow,
    AblationSample, CostAxis, EvalRecord, Toggle, TracePoint,
};
use routekit_core::conversation::{Clock, Engine, SessionOutcome, SessionStore};
use routekit_core::gateway::{
    amortized_routing_cost, ChatBackend, Gateway, HttpBackend, PriceTable, RecordingBackend, ReplayBackend,
    ScriptedBackend, TranscriptWriter, UsageLedger,
};
use routekit_core::metric::{
    builtin_cards, load_metric_cards, route_metric, MetricCard, MetricChoice, MetricRegistry, Sample, EXACT_MATCH,
};
use routekit_core::model::{
    load_model_cards, split_examples, to_json_pretty, validate_task_spec, ModelCard, SolutionPool, TaskSpec,
    ValidationReport,
};
use routekit_core::prompt::PromptTemplates;
use routekit_core::sandbox::{CodeRunner, Sandbox, ToolBridge, ToolRegistry};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendConfig, EngineConfig};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("task specification is invalid ({} violation(s))", .0.violations.len())]
    Validation(ValidationReport),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Other(_) => 2,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;

/// Loads and validates a task file; any problem is a validation failure.
pub fn load_task(path: &Path) -> AppResult<TaskSpec> {
    let task = TaskSpec::load(path).map_err(|e| {
        AppError::Validation(ValidationReport {
            violations: vec![routekit_core::model::Violation {
                kind: routekit_core::model::ViolationKind::EmptyField,
                instance_id: None,
                field: "<file>".into(),
                message: e.to_string(),
            }],
        })
    })?;
    check_task(task)
}

pub fn check_task(task: TaskSpec) -> AppResult<TaskSpec> {
    let report = validate_task_spec(&task);
    if report.is_valid() {
        Ok(task)
    } else {
        Err(AppError::Validation(report))
    }
}

pub fn describe_violations(report: &ValidationReport) -> String {
    report
        .violations
        .iter()
        .map(|v| match &v.instance_id {
            Some(id) => format!("{:?} {} [{}]: {}\n", v.kind, v.field, id, v.message),
            None => format!("{:?} {}: {}\n", v.kind, v.field, v.message),
        })
        .collect()
}

fn base_backend(cfg: &EngineConfig) -> anyhow::Result<Box<dyn ChatBackend>> {
    Ok(match &cfg.backend {
        BackendConfig::Http { http } => Box::new(HttpBackend::new("http", http.clone())?),
        BackendConfig::Replay { path } => Box::new(ReplayBackend::load(path)?),
        BackendConfig::Scripted { path } => Box::new(
            ScriptedBackend::load("scripted", path).with_context(|| format!("loading script {}", path.display()))?,
        ),
    })
}

/// Everything one operation needs: ledger, agents, sandbox and tool bridge.
pub struct Runtime {
    pub ledger: Arc<UsageLedger>,
    pub agents: Agents,
    pub sandbox: Arc<Sandbox>,
    pub cards: Vec<ModelCard>,
    pub metric_cards: Vec<MetricCard>,
    pub registry: MetricRegistry,
    pub templates: PromptTemplates,
    _bridge: Option<ToolBridge>,
}

impl Runtime {
    /// `replay` overrides the configured backend; `record` appends exchanges to a transcript.
    pub fn build(cfg: &EngineConfig, replay: Option<&Path>, record: Option<&Path>) -> anyhow::Result<Self> {
        let prices = PriceTable::load(&cfg.prices)?;
        let ledger = Arc::new(UsageLedger::new(prices));
        let mut backend: Box<dyn ChatBackend> = match replay {
            Some(p) => Box::new(ReplayBackend::load(p).with_context(|| format!("loading transcript {}", p.display()))?),
            None => base_backend(cfg)?,
        };
        if let Some(path) = record {
            backend = Box::new(RecordingBackend::new(backend, TranscriptWriter::create(path)?));
        }
        let pool = AgentPool::load(&cfg.agents)?;
        let agents = Agents::new(Gateway::new(Arc::new(backend), ledger.clone()), pool);

        let mut sandbox_cfg = cfg.sandbox.clone();
        let bridge = match &cfg.tools {
            Some(p) => {
                let registry = ToolRegistry::load(p)?;
                let bridge =
                    ToolBridge::start(Arc::new(registry), ledger.clone()).context("starting the tool bridge")?;
                sandbox_cfg.tool_bridge_url = Some(bridge.url());
                Some(bridge)
            }
            None => None,
        };
        let sandbox = Sandbox::new(sandbox_cfg);
        sandbox.check()?;

        let cards = load_model_cards(&cfg.model_cards)?;
        let metric_cards = match &cfg.metrics {
            Some(p) => load_metric_cards(p)?,
            None => builtin_cards(),
        };
        let templates = match &cfg.templates {
            Some(dir) => PromptTemplates::load(dir)?,
            None => PromptTemplates::defaults(),
        };
        Ok(Self {
            ledger,
            agents,
            sandbox: Arc::new(sandbox),
            cards,
            metric_cards,
            registry: MetricRegistry::with_builtins(),
            templates,
            _bridge: bridge,
        })
    }

    pub fn engine(&self, clock: Clock, store: Option<SessionStore>) -> Engine {
        let mut engine = Engine::new(self.agents.clone(), self.sandbox.clone(), self.cards.clone());
        engine.templates = self.templates.clone();
        engine.clock = clock;
        engine.store = store;
        engine
    }
}

/// Metadata written next to every routed pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub task_id: String,
    pub budget: usize,
    #[serde(default)]
    pub removed: Vec<AgentRole>,
    pub started_at: String,
    pub backend: String,
    pub instances: usize,
}

pub const RUN_INFO: &str = "run.json";
pub const POOL_FILE: &str = "pool.json";
pub const GATEWAY_TRANSCRIPT: &str = "gateway.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";

/// `runs/<task_id>/<timestamp>`, suffixed when the stamp is taken.
pub fn new_run_dir(runs_dir: &Path, task_id: &str, suffix: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let base = runs_dir.join(task_id);
    let mut dir = base.join(format!("{stamp}{suffix}"));
    let mut k = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}{suffix}-{k}"));
        k += 1;
    }
    dir
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn append_ledger(dir: &Path, ledger: &UsageLedger) -> anyhow::Result<()> {
    use std::io::Write;
    let path = dir.join(LEDGER_FILE);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.write_all(ledger.to_jsonl().as_bytes()).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Default)]
pub struct RouteOptions {
    pub budget: usize,
    pub removed: Vec<AgentRole>,
    pub out: Option<PathBuf>,
    /// Recorded gateway transcript to answer chat requests from.
    pub replay: Option<PathBuf>,
    /// `created_at` for replays; defaults to the configured clock.
    pub started_at: Option<String>,
}

#[derive(Debug)]
pub struct RouteSummary {
    pub run_dir: PathBuf,
    pub pool: SolutionPool,
    pub outcomes: Vec<SessionOutcome>,
}

/// Runs `budget` sessions and writes pool.json, transcripts/, gateway.jsonl,
/// ledger.jsonl and run.json into the run directory.
pub fn route(cfg: &EngineConfig, task: &TaskSpec, opts: &RouteOptions) -> AppResult<RouteSummary> {
    if opts.budget == 0 {
        return Err(anyhow!("--budget must be at least 1").into());
    }
    let run_dir = opts.out.clone().unwrap_or_else(|| new_run_dir(&cfg.runs_dir, &task.task_id, ""));
    let transcripts = run_dir.join("transcripts");
    if transcripts.exists() {
        std::fs::remove_dir_all(&transcripts).with_context(|| format!("clearing {}", transcripts.display()))?;
    }
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let started_at = opts
        .started_at
        .clone()
        .or_else(|| cfg.clock.clone())
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let record = (cfg.record && opts.replay.is_none()).then(|| run_dir.join(GATEWAY_TRANSCRIPT));
    let rt = Runtime::build(cfg, opts.replay.as_deref(), record.as_deref())?;
    let engine = rt.engine(Clock::Fixed(started_at.clone()), Some(SessionStore::new(&transcripts)));
    let toggle = Toggle { name: String::new(), removed: opts.removed.clone() };
    let config = toggle.apply(&cfg.session);
    let run = engine
        .generate_pool(task, SolutionPool::new(task.task_id.clone()), &config, opts.budget)
        .map_err(anyhow::Error::from)?;
    write(&run_dir.join(POOL_FILE), run.pool.to_json())?;
    write(&run_dir.join(LEDGER_FILE), rt.ledger.to_jsonl())?;
    let info = RunInfo {
        task_id: task.task_id.clone(),
        budget: opts.budget,
        removed: opts.removed.clone(),
        started_at,
        instances: task.instances.len(),
        backend: if opts.replay.is_some() { "replay".into() } else { rt.agents.gateway.backend_id().to_owned() },
    };
    write(&run_dir.join(RUN_INFO), to_json_pretty(&info))?;
    Ok(RouteSummary { run_dir, pool: run.pool, outcomes: run.outcomes })
}

#[derive(Debug)]
pub struct ReplaySummary {
    pub route: RouteSummary,
    /// `Some(true)` when an original pool.json sat next to the transcript and matched.
    pub matches_original: Option<bool>,
}

/// Re-runs routing answering every chat request from `transcript`.
/// Budget, removed roles and the clock come from the run.json beside it.
pub fn replay(
    cfg: &EngineConfig,
    task: &TaskSpec,
    transcript: &Path,
    budget: Option<usize>,
    out: Option<PathBuf>,
) -> AppResult<ReplaySummary> {
    if !transcript.is_file() {
        return Err(anyhow!("transcript {} does not exist", transcript.display()).into());
    }
    let original_dir = transcript.parent().map(Path::to_path_buf).unwrap_or_default();
    let info: Option<RunInfo> =
        std::fs::read_to_string(original_dir.join(RUN_INFO)).ok().and_then(|t| serde_json::from_str(&t).ok());
    let budget = budget
        .or(info.as_ref().map(|i| i.budget))
        .ok_or_else(|| anyhow!("no run.json next to the transcript; pass --budget"))?;
    let out = out.unwrap_or_else(|| new_run_dir(&cfg.runs_dir, &task.task_id, "-replay"));
    let opts = RouteOptions {
        budget,
        removed: info.as_ref().map(|i| i.removed.clone()).unwrap_or_default(),
        out: Some(out),
        replay: Some(transcript.to_path_buf()),
        started_at: info.as_ref().map(|i| i.started_at.clone()),
    };
    let route = route(cfg, task, &opts)?;
    let matches_original = std::fs::read(original_dir.join(POOL_FILE))
        .ok()
        .filter(|_| original_dir != route.run_dir)
        .map(|orig| orig == route.pool.to_json().as_bytes());
    Ok(ReplaySummary { route, matches_original })
}

/// Picks the metric: the user's name, or the metric router shown the first
/// solution's answers on the example instances.
pub fn choose_metric(
    rt: &Runtime,
    task: &TaskSpec,
    pool: &SolutionPool,
    user: Option<&str>,
) -> AppResult<MetricChoice> {
    if user.is_some() || pool.is_empty() {
        let name = user.unwrap_or(EXACT_MATCH);
        return Ok(route_metric(&rt.agents, task, &rt.metric_cards, &rt.registry, &[], Some(name))
            .map_err(anyhow::Error::from)?);
    }
    let (examples, _) = split_examples(task);
    let sol = &pool.solutions[0];
    let reports = rt
        .sandbox
        .run(&sol.action_code, task, examples, &format!("metric:{}:0", sol.id))
        .map_err(anyhow::Error::from)?;
    let samples: Vec<Sample> = examples
        .iter()
        .zip(&reports)
        .filter_map(|(inst, r)| {
            r.answer.clone().filter(|_| r.is_ok()).map(|prediction| Sample { instance: inst.clone(), prediction })
        })
        .collect();
    if samples.is_empty() {
        tracing::warn!("first solution produced no answers on the examples, using {EXACT_MATCH}");
        return Ok(MetricChoice {
            metric_name: EXACT_MATCH.into(),
            rationale: "fallback: no sample predictions to show the metric router".into(),
            chosen_by: routekit_core::metric::ChosenBy::Agent,
        });
    }
    Ok(route_metric(&rt.agents, task, &rt.metric_cards, &rt.registry, &samples, None).map_err(anyhow::Error::from)?)
}

#[derive(Debug)]
pub struct BenchSummary {
    pub out_dir: PathBuf,
    pub metric: MetricChoice,
    pub records: Vec<EvalRecord>,
}

pub const METRIC_FILE: &str = "metric.json";
pub const RECORDS_FILE: &str = "records.json";

/// Benchmarks a pool file; writes curve.csv, curve.svg, metric.json and
/// records.json next to it (or into `out`).
pub fn bench(
    cfg: &EngineConfig,
    task: &TaskSpec,
    pool_path: &Path,
    metric: Option<&str>,
    out: Option<PathBuf>,
    axis: CostAxis,
) -> AppResult<BenchSummary> {
    let pool = SolutionPool::load(pool_path).map_err(|e| anyhow!("pool {}: {e}", pool_path.display()))?;
    if pool.is_empty() {
        return Err(anyhow!("pool {} is empty", pool_path.display()).into());
    }
    let out_dir = out.unwrap_or_else(|| pool_path.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let rt = Runtime::build(cfg, None, None)?;
    let choice = choose_metric(&rt, task, &pool, metric)?;
    let scorer = rt.registry.get(&choice.metric_name).map_err(anyhow::Error::from)?;
    let records = benchmark_pool(&pool, task, scorer.as_ref(), rt.sandbox.as_ref(), &rt.ledger, &cfg.bench)
        .map_err(anyhow::Error::from)?;
    emit_curve(&records, &out_dir, axis).map_err(anyhow::Error::from)?;
    write(&out_dir.join(METRIC_FILE), to_json_pretty(&choice))?;
    write(&out_dir.join(RECORDS_FILE), to_json_pretty(&records))?;
    append_ledger(&out_dir, &rt.ledger)?;
    Ok(BenchSummary { out_dir, metric: choice, records })
}

/// Parses `full,-code_checker,-code_debugger+-repetition_checker`.
pub fn parse_toggles(text: &str) -> anyhow::Result<Vec<Toggle>> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(|s| Toggle::parse(s).map_err(|e| anyhow!(e))).collect()
}

/// Parses `code_checker,repetition_checker`.
pub fn parse_roles(text: &str) -> anyhow::Result<Vec<AgentRole>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let s = s.trim().trim_start_matches('-');
            AgentRole::from_str(s).map_err(|_| anyhow!("unknown role `{s}`"))
        })
        .collect()
}

/// One ablation row per toggle; every run gets a fresh backend so scripted
/// and replayed sessions start from the same state.
pub fn ablate(
    cfg: &EngineConfig,
    task: &TaskSpec,
    toggles: &[Toggle],
    budget: usize,
    runs: usize,
    metric: Option<&str>,
    out: Option<PathBuf>,
) -> AppResult<(PathBuf, Vec<AblationRow>)> {
    if budget == 0 {
        return Err(anyhow!("--budget must be at least 1").into());
    }
    let out_dir = out.unwrap_or_else(|| new_run_dir(&cfg.runs_dir, &task.task_id, "-ablation"));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let started_at =
        cfg.clock.clone().unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let rows = ablation_run(toggles, runs, |toggle, run| {
        let one = || -> anyhow::Result<AblationSample> {
            let rt = Runtime::build(cfg, None, None)?;
            let dir = out_dir.join("sessions").join(toggle_dir(&toggle.name)).join(format!("run-{run}"));
            let engine = rt.engine(Clock::Fixed(started_at.clone()), Some(SessionStore::new(dir)));
            let generated = engine.generate_pool(
                task,
                SolutionPool::new(task.task_id.clone()),
                &toggle.apply(&cfg.session),
                budget,
            )?;
            if generated.pool.is_empty() {
                return Ok(AblationSample { num_solutions: 0, records: Vec::new() });
            }
            let choice = choose_metric(&rt, task, &generated.pool, metric).map_err(|e| anyhow!("{e}"))?;
            let scorer = rt.registry.get(&choice.metric_name)?;
            let records =
                benchmark_pool(&generated.pool, task, scorer.as_ref(), rt.sandbox.as_ref(), &rt.ledger, &cfg.bench)?;
            Ok(AblationSample { num_solutions: generated.pool.len(), records })
        };
        one().map_err(|e| format!("{e:#}"))
    });
    let path = write_ablation_csv(&rows, &out_dir).map_err(anyhow::Error::from)?;
    Ok((path, rows))
}

fn toggle_dir(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Session transcripts under `<dir>/transcripts/*/` or `<dir>/*/`, sorted.
pub fn find_transcripts(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for root in [dir.join("transcripts"), dir.to_path_buf()] {
        let Ok(entries) = std::fs::read_dir(&root) else { continue };
        for e in entries.flatten() {
            let t = e.path().join("transcript.jsonl");
            if t.is_file() {
                out.push(t);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Benchmarks every iteration's candidate from a run's transcripts.
pub fn trace(
    cfg: &EngineConfig,
    task: &TaskSpec,
    runs_dir: &Path,
    metric: Option<&str>,
    out: Option<PathBuf>,
) -> AppResult<(PathBuf, Vec<TracePoint>)> {
    let transcripts = find_transcripts(runs_dir);
    if transcripts.is_empty() {
        return Err(anyhow!("TRANSCRIPT_MISSING: no session transcripts under {}", runs_dir.display()).into());
    }
    let name = match metric {
        Some(m) => m.to_owned(),
        None => match std::fs::read_to_string(runs_dir.join(METRIC_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<MetricChoice>(&t).ok())
        {
            Some(c) => c.metric_name,
            None => {
                tracing::warn!("no --metric and no metric.json in the run directory, using {EXACT_MATCH}");
                EXACT_MATCH.to_owned()
            }
        },
    };
    let rt = Runtime::build(cfg, None, None)?;
    let scorer = rt.registry.get(&name).map_err(anyhow::Error::from)?;
    let points = iteration_trace_report(&transcripts, task, scorer.as_ref(), rt.sandbox.as_ref(), &cfg.bench)
        .map_err(anyhow::Error::from)?;
    let out_dir = out.unwrap_or_else(|| runs_dir.to_path_buf());
    let path = write_trace_csv(&points, &out_dir).map_err(anyhow::Error::from)?;
    Ok((path, points))
}

/// Human-readable summary of a run directory.
pub fn report(run_dir: &Path) -> AppResult<String> {
    if !run_dir.is_dir() {
        return Err(anyhow!("run directory {} does not exist", run_dir.display()).into());
    }
    let mut out = String::new();
    let _ = writeln!(out, "run: {}", run_dir.display());
    let mut instances = None;
    if let Ok(info) = std::fs::read_to_string(run_dir.join(RUN_INFO)) {
        if let Ok(info) = serde_json::from_str::<RunInfo>(&info) {
            instances = Some(info.instances);
            let removed: Vec<&str> = info.removed.iter().map(|r| r.tag()).collect();
            let _ = writeln!(
                out,
                "task: {}  budget: {}  backend: {}  started: {}",
                info.task_id, info.budget, info.backend, info.started_at
            );
            if !removed.is_empty() {
                let _ = writeln!(out, "removed roles: {}", removed.join(", "));
            }
        }
    }
    let pool_path = run_dir.join(POOL_FILE);
    if pool_path.is_file() {
        let pool = SolutionPool::load(&pool_path).map_err(|e| anyhow!("{e}"))?;
        let _ = writeln!(out, "\nsolutions ({}):", pool.len());
        for s in &pool.solutions {
            let models = if s.declared_models.is_empty() { "-".to_owned() } else { s.declared_models.join(", ") };
            let _ = writeln!(
                out,
                "  {}  session {} iteration {}  models: {}",
                s.id, s.provenance.session_id, s.provenance.iteration_index, models
            );
        }
    }
    let transcripts = find_transcripts(run_dir);
    if !transcripts.is_empty() {
        let _ = writeln!(out, "\nsessions ({}):", transcripts.len());
        for t in &transcripts {
            let outcome = t.with_file_name("outcome.json");
            if let Some(o) =
                std::fs::read_to_string(&outcome).ok().and_then(|s| serde_json::from_str::<SessionOutcome>(&s).ok())
            {
                let detail = o
                    .duplicate_of
                    .map(|d| format!(" duplicate of {d}"))
                    .or(o.failure.map(|f| format!(" ({f})")))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "  {}  {:?} after {} iteration(s){}",
                    o.session_id, o.kind, o.iterations_used, detail
                );
            }
        }
    }
    if let Ok(text) = std::fs::read_to_string(run_dir.join(METRIC_FILE)) {
        if let Ok(c) = serde_json::from_str::<MetricChoice>(&text) {
            let _ = writeln!(out, "\nmetric: {} (chosen by {:?})", c.metric_name, c.chosen_by);
        }
    }
    if let Ok(text) = std::fs::read_to_string(run_dir.join("curve.csv")) {
        let _ = writeln!(out, "\ncurve (* = Pareto front):");
        let _ = writeln!(out, "  {:<12} {:>8} {:>12} {:>14} {:>8}", "solution", "p", "c_time", "c_money", "errors");
        for line in text.lines().skip(1) {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() == 7 {
                let mark = if c[6] == "true" { "*" } else { " " };
                let _ = writeln!(out, "{mark} {:<12} {:>8} {:>12} {:>14} {:>8}", c[0], c[1], c[2], c[4], c[5]);
            }
        }
    }
    if let Ok(text) = std::fs::read_to_string(run_dir.join(LEDGER_FILE)) {
        let entries = routekit_core::gateway::parse_ledger_jsonl(&text).map_err(|e| anyhow!("ledger: {e}"))?;
        let sum = |bench: bool| -> Decimal {
            entries.iter().filter(|e| is_bench_tag(&e.tag) == bench).map(|e| e.usd_cost).sum()
        };
        let (routing, benching) = (sum(false), sum(true));
        let _ =
            writeln!(out, "\ncost: routing ${routing}  benchmarking ${benching}  ({} ledger entries)", entries.len());
        if let Some(n) = instances.filter(|n| *n > 0) {
            let per = amortized_routing_cost(f64::try_from(routing).unwrap_or(0.0), n).map_err(anyhow::Error::from)?;
            let _ = writeln!(out, "routing cost per instance over {n} instances: ${per:.6}");
        }
    }
    Ok(out)
}

/// Ledger tags written by benchmarking rather than routing.
pub fn is_bench_tag(tag: &str) -> bool {
    ["bench:", "trace:", "metric:", "metric_router:", "answer_mapper:"].iter().any(|p| tag.starts_with(p))
}

/// Routing spend (everything outside benchmarking) divided by `instances`.
pub fn routing_cost_per_sample(ledger_jsonl: &str, instances: usize) -> anyhow::Result<f64> {
    let entries = routekit_core::gateway::parse_ledger_jsonl(ledger_jsonl)?;
    let total: Decimal = entries.iter().filter(|e| !is_bench_tag(&e.tag)).map(|e| e.usd_cost).sum();
    Ok(amortized_routing_cost(f64::try_from(total)?, instances)?)
}
