//! Benchmarking of pooled solutions: performance/cost records, the Pareto
//! curve, ablation tables and per-iteration traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentRole;
use crate::conversation::{read_session_events, EngineError, SessionEvent};
use crate::gateway::UsageLedger;
use crate::metric::{evaluate, Metric, MetricError, Reference};
use crate::model::{Instance, SolutionPool, TaskSpec};
use crate::sandbox::{CodeRunner, ExecutionReport, SandboxError};

pub const DEFAULT_M: usize = 50;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("EMPTY_POOL: nothing to benchmark")]
    EmptyPool,
    #[error("task has no labeled instances")]
    NoLabeled,
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("TRANSCRIPT_MISSING: {0}")]
    TranscriptMissing(PathBuf),
    #[error("transcript {path}: {source}")]
    Transcript { path: PathBuf, source: std::io::Error },
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Sample size; `None` means `min(50, labeled count)`.
    pub m: Option<usize>,
    pub seed: u64,
    pub parallelism: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { m: None, seed: 0, parallelism: 2, repeats: 1 }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.m == Some(0) {
            return Err(BenchError::InvalidConfig("m must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(BenchError::InvalidConfig("repeats must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(BenchError::InvalidConfig("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seeded sample of `m` labeled instances, in task order.
pub fn sample_instances(task: &TaskSpec, config: &BenchConfig) -> Result<Vec<Instance>, BenchError> {
    config.validate()?;
    let labeled: Vec<&Instance> = task.labeled().collect();
    if labeled.is_empty() {
        return Err(BenchError::NoLabeled);
    }
    let unlabeled = task.instances.len() - labeled.len();
    if unlabeled > 0 {
        tracing::info!(excluded = unlabeled, "unlabeled instances are not scored");
    }
    let m = match config.m {
        None => DEFAULT_M.min(labeled.len()),
        Some(m) if m > labeled.len() => {
            tracing::warn!(requested = m, available = labeled.len(), "m exceeds the labeled instance count, clipped");
            labeled.len()
        }
        Some(m) => m,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picked = rand::seq::index::sample(&mut rng, labeled.len(), m).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| labeled[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub solution_id: String,
    pub p: f64,
    /// Mean seconds per instance.
    pub c_time: f64,
    pub c_time_var: f64,
    /// USD per instance.
    #[serde(with = "crate::gateway::decimal_number")]
    pub c_money: Decimal,
    pub m_used: usize,
    pub error_rate: f64,
}

pub fn bench_tag_prefix(solution_id: &str) -> String {
    format!("bench:{solution_id}:")
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn predictions(reports: &[ExecutionReport]) -> Vec<Option<String>> {
    reports.iter().map(|r| if r.is_ok() { r.answer.clone() } else { None }).collect()
}

/// Scores one program on `sample`; non-OK executions score 0.
pub fn score_code(
    code: &str,
    task: &TaskSpec,
    sample: &[Instance],
    metric: &dyn Metric,
    runner: &dyn CodeRunner,
    run_tag: &str,
) -> Result<(f64, f64, Vec<ExecutionReport>), BenchError> {
    let reports = runner.run(code, task, sample, run_tag)?;
    let refs: Vec<Reference> = sample.iter().map(Reference::of).collect();
    let p = evaluate(metric, &predictions(&reports), &refs)?;
    let errors = reports.iter().filter(|r| !r.is_ok()).count();
    Ok((p, errors as f64 / reports.len().max(1) as f64, reports))
}

fn bench_one(
    solution_id: &str,
    code: &str,
    task: &TaskSpec,
    sample: &[Instance],
    metric: &dyn Metric,
    runner: &dyn CodeRunner,
    ledger: &UsageLedger,
    repeats: usize,
) -> Result<EvalRecord, BenchError> {
    let prefix = bench_tag_prefix(solution_id);
    let before = ledger.usd_with_prefix(&prefix);
    let mut times = Vec::with_capacity(sample.len() * repeats);
    let mut scored = None;
    for rep in 0..repeats {
        let (p, error_rate, reports) = score_code(code, task, sample, metric, runner, &format!("{prefix}{rep}"))?;
        times.extend(reports.iter().map(|r| r.wall_time_s));
        scored.get_or_insert((p, error_rate));
    }
    let (p, error_rate) = scored.expect("repeats >= 1");
    let (c_time, c_time_var) = mean_var(&times);
    let spent = ledger.usd_with_prefix(&prefix) - before;
    let c_money = spent / Decimal::from(sample.len() * repeats);
    Ok(EvalRecord {
        solution_id: solution_id.to_owned(),
        p,
        c_time,
        c_time_var,
        c_money: c_money.normalize(),
        m_used: sample.len(),
        error_rate,
    })
}

/// One record per pooled solution, in pool order. Tool spending is read
/// from the ledger under `bench:<solution_id>:<repeat>` tags.
pub fn benchmark_pool(
    pool: &SolutionPool,
    task: &TaskSpec,
    metric: &dyn Metric,
    runner: &dyn CodeRunner,
    ledger: &UsageLedger,
    config: &BenchConfig,
) -> Result<Vec<EvalRecord>, BenchError> {
    if pool.is_empty() {
        return Err(BenchError::EmptyPool);
    }
    let sample = sample_instances(task, config)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EvalRecord, BenchError>>>> =
        Mutex::new((0..pool.solutions.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..config.parallelism.min(pool.solutions.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sol) = pool.solutions.get(i) else { break };
                let r = bench_one(&sol.id, &sol.action_code, task, &sample, metric, runner, ledger, config.repeats);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every solution benchmarked")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub solution_id: String,
    pub p: f64,
    pub c_time: f64,
    pub c_money: f64,
}

impl CurvePoint {
    pub fn of(r: &EvalRecord) -> Self {
        Self {
            solution_id: r.solution_id.clone(),
            p: r.p,
            c_time: r.c_time,
            c_money: r.c_money.try_into().unwrap_or(f64::MAX),
        }
    }

    /// At least as good everywhere and strictly better somewhere.
    pub fn dominates(&self, other: &CurvePoint) -> bool {
        self.p >= other.p
            && self.c_time <= other.c_time
            && self.c_money <= other.c_money
            && (self.p > other.p || self.c_time < other.c_time || self.c_money < other.c_money)
    }
}

/// Indices (ascending) of the non-dominated points.
///
/// Points are visited best-first (p descending, then costs ascending), so
/// every dominator of a point is visited before it; checking against the
/// front built so far is enough because dominance is transitive.
pub fn pareto_front(points: &[CurvePoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&points[a], &points[b]);
        y.p.total_cmp(&x.p).then(x.c_time.total_cmp(&y.c_time)).then(x.c_money.total_cmp(&y.c_money))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| points[f].dominates(&points[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostAxis {
    #[default]
    Time,
    Money,
}

pub const CURVE_COLUMNS: [&str; 7] = ["solution_id", "p", "c_time", "c_time_var", "c_money", "error_rate", "pareto"];
pub const ABLATION_COLUMNS: [&str; 4] = ["config", "acc", "error_rate", "avg_num_solutions"];
pub const TRACE_COLUMNS: [&str; 3] = ["session_id", "iteration", "p"];

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), BenchError> {
    let io = |source| BenchError::Io { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = |rec: &[String]| w.write_record(rec).map_err(|e| io(std::io::Error::other(e)));
    write(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    for r in rows {
        write(r)?;
    }
    let bytes = w.into_inner().map_err(|e| io(std::io::Error::other(e.to_string())))?;
    std::fs::write(path, bytes).map_err(io)
}

pub fn curve_rows(records: &[EvalRecord]) -> Vec<Vec<String>> {
    let points: Vec<CurvePoint> = records.iter().map(CurvePoint::of).collect();
    let front = pareto_front(&points);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.solution_id.clone(),
                r.p.to_string(),
                r.c_time.to_string(),
                r.c_time_var.to_string(),
                r.c_money.to_string(),
                r.error_rate.to_string(),
                front.contains(&i).to_string(),
            ]
        })
        .collect()
}

/// Writes `curve.csv` and `curve.svg` into `out_dir`.
pub fn emit_curve(records: &[EvalRecord], out_dir: &Path, axis: CostAxis) -> Result<(PathBuf, PathBuf), BenchError> {
    if records.is_empty() {
        return Err(BenchError::EmptyPool);
    }
    std::fs::create_dir_all(out_dir).map_err(|source| BenchError::Io { path: out_dir.to_path_buf(), source })?;
    let csv_path = out_dir.join("curve.csv");
    write_csv(&csv_path, &CURVE_COLUMNS, &curve_rows(records))?;
    let svg_path = out_dir.join("curve.svg");
    std::fs::write(&svg_path, render_svg(records, axis))
        .map_err(|source| BenchError::Io { path: svg_path.clone(), source })?;
    Ok((csv_path, svg_path))
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(records: &[EvalRecord], axis: CostAxis) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 30.0, 30.0, 60.0);
    let points: Vec<CurvePoint> = records.iter().map(CurvePoint::of).collect();
    let front = pareto_front(&points);
    let cost = |p: &CurvePoint| match axis {
        CostAxis::Time => p.c_time,
        CostAxis::Money => p.c_money,
    };
    let max_cost = points.iter().map(cost).fold(0.0_f64, f64::max);
    let max_cost = if max_cost > 0.0 { max_cost * 1.1 } else { 1.0 };
    let x = |c: f64| left + (c / max_cost) * (w - left - right);
    let y = |p: f64| top + (1.0 - p) * (h - top - bottom);
    let x_label = match axis {
        CostAxis::Time => "time cost (s per instance)",
        CostAxis::Money => "money cost (USD per instance)",
    };
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{:.2}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for k in 0..=4 {
        let p = k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{p:.2}</text>"#,
            left - 6.0,
            y(p) + 4.0
        );
        let c = max_cost * p;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{c:.3}</text>"#,
            x(c),
            h - bottom + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{x_label}</text>"#,
        (left + w - right) / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" font-size="12" transform="rotate(-90 16 {:.2})" text-anchor="middle">performance</text>"#,
        h / 2.0,
        h / 2.0
    );
    let mut on_front: Vec<&CurvePoint> = front.iter().map(|&i| &points[i]).collect();
    on_front.sort_by(|a, b| cost(a).total_cmp(&cost(b)).then(a.p.total_cmp(&b.p)));
    if on_front.len() > 1 {
        let path: Vec<String> = on_front.iter().map(|p| format!("{:.2},{:.2}", x(cost(p)), y(p.p))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="firebrick" stroke-dasharray="4 3"/>"#,
            path.join(" ")
        );
    }
    for (i, p) in points.iter().enumerate() {
        let (fill, r) = if front.contains(&i) { ("firebrick", 5.0) } else { ("gray", 4.0) };
        let (cx, cy) = (x(cost(p)), y(p.p));
        let _ = writeln!(svg, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r}" fill="{fill}"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            cx + 7.0,
            cy - 7.0,
            escape_xml(&p.solution_id)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// A session configuration with some roles removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggle {
    pub name: String,
    #[serde(default)]
    pub removed: Vec<AgentRole>,
}

impl Toggle {
    pub fn full() -> Self {
        Self { name: "full".into(), removed: vec![] }
    }

    pub fn without(role: AgentRole) -> Self {
        Self { name: format!("-{}", role.tag()), removed: vec![role] }
    }

    /// The full model followed by one row per removable role.
    pub fn standard() -> Vec<Toggle> {
        let mut out = vec![Self::full()];
        for role in [
            AgentRole::CodeDebugger,
            AgentRole::CodeChecker,
            AgentRole::RequirementChecker,
            AgentRole::RepetitionChecker,
        ] {
            out.push(Self::without(role));
        }
        out
    }

    /// Parses `full` or `-role[+-role...]`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let text = text.trim();
        if text == "full" {
            return Ok(Self::full());
        }
        let mut removed = Vec::new();
        for part in text.split('+') {
            let name = part.trim().strip_prefix('-').ok_or_else(|| format!("toggle `{part}` must look like -role"))?;
            let role: AgentRole = name.parse().map_err(|_| format!("unknown role `{name}`"))?;
            if !matches!(
                role,
                AgentRole::CodeDebugger
                    | AgentRole::CodeChecker
                    | AgentRole::RequirementChecker
                    | AgentRole::RepetitionChecker
            ) {
                return Err(format!("`{name}` cannot be removed"));
            }
            removed.push(role);
        }
        Ok(Self { name: text.to_owned(), removed })
    }

    pub fn apply(&self, base: &crate::conversation::SessionConfig) -> crate::conversation::SessionConfig {
        self.removed.iter().fold(base.clone(), |c, r| c.without(*r))
    }
}

/// The result of one generate-then-benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSample {
    pub num_solutions: usize,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub acc: Option<f64>,
    pub error_rate: Option<f64>,
    pub avg_num_solutions: Option<f64>,
    pub failure: Option<String>,
}

/// Runs every toggle `runs_per_toggle` times. `acc` and `error_rate` are
/// means over every benchmarked solution of every run; a toggle with any
/// failing run is reported as FAILED.
pub fn ablation_run<F>(toggles: &[Toggle], runs_per_toggle: usize, mut run: F) -> Vec<AblationRow>
where
    F: FnMut(&Toggle, usize) -> Result<AblationSample, String>,
{
    let runs = runs_per_toggle.max(1);
    toggles
        .iter()
        .map(|t| {
            let mut samples = Vec::with_capacity(runs);
            for r in 0..runs {
                match run(t, r) {
                    Ok(s) => samples.push(s),
                    Err(e) => {
                        tracing::warn!(toggle = %t.name, run = r, error = %e, "ablation run failed");
                        return AblationRow {
                            config: t.name.clone(),
                            acc: None,
                            error_rate: None,
                            avg_num_solutions: None,
                            failure: Some(e),
                        };
                    }
                }
            }
            let records: Vec<&EvalRecord> = samples.iter().flat_map(|s| &s.records).collect();
            let n = records.len().max(1) as f64;
            AblationRow {
                config: t.name.clone(),
                acc: Some(records.iter().map(|r| r.p).sum::<f64>() / n),
                error_rate: Some(records.iter().map(|r| r.error_rate).sum::<f64>() / n),
                avg_num_solutions: Some(samples.iter().map(|s| s.num_solutions as f64).sum::<f64>() / runs as f64),
                failure: None,
            }
        })
        .collect()
}

/// Generates a pool under `toggle` and benchmarks it.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sample(
    engine: &crate::conversation::Engine,
    task: &TaskSpec,
    base: &crate::conversation::SessionConfig,
    toggle: &Toggle,
    budget: usize,
    metric: &dyn Metric,
    ledger: &UsageLedger,
    bench: &BenchConfig,
) -> Result<AblationSample, BenchError> {
    let run = engine.generate_pool(task, SolutionPool::new(task.task_id.clone()), &toggle.apply(base), budget)?;
    let records = if run.pool.is_empty() {
        Vec::new()
    } else {
        benchmark_pool(&run.pool, task, metric, engine.runner.as_ref(), ledger, bench)?
    };
    Ok(AblationSample { num_solutions: run.pool.len(), records })
}

pub fn ablation_rows(rows: &[AblationRow]) -> Vec<Vec<String>> {
    let cell = |v: Option<f64>| v.map_or_else(|| "FAILED".to_owned(), |x| x.to_string());
    rows.iter().map(|r| vec![r.config.clone(), cell(r.acc), cell(r.error_rate), cell(r.avg_num_solutions)]).collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], out_dir: &Path) -> Result<PathBuf, BenchError> {
    std::fs::create_dir_all(out_dir).map_err(|source| BenchError::Io { path: out_dir.to_path_buf(), source })?;
    let path = out_dir.join("ablation.csv");
    write_csv(&path, &ABLATION_COLUMNS, &ablation_rows(rows))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub session_id: String,
    pub iteration: usize,
    pub p: f64,
    /// Every execution failed.
    pub error: bool,
}

/// Benchmarks the candidate of every iteration recorded in each transcript.
/// The session id is the name of the transcript's directory.
pub fn iteration_trace_report(
    transcripts: &[PathBuf],
    task: &TaskSpec,
    metric: &dyn Metric,
    runner: &dyn CodeRunner,
    config: &BenchConfig,
) -> Result<Vec<TracePoint>, BenchError> {
    let sample = sample_instances(task, config)?;
    let mut out = Vec::new();
    for path in transcripts {
        if !path.is_file() {
            return Err(BenchError::TranscriptMissing(path.clone()));
        }
        let events =
            read_session_events(path).map_err(|source| BenchError::Transcript { path: path.clone(), source })?;
        let session_id = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let proposals: BTreeMap<usize, String> = events
            .into_iter()
            .filter_map(|e| match e {
                SessionEvent::Proposal { iteration, sections } => Some((iteration, sections.action_code)),
                _ => None,
            })
            .collect();
        for (iteration, code) in proposals {
            let tag = format!("trace:{session_id}:{iteration}");
            let (p, error_rate, _) = score_code(&code, task, &sample, metric, runner, &tag)?;
            out.push(TracePoint { session_id: session_id.clone(), iteration, p, error: error_rate >= 1.0 });
        }
    }
    Ok(out)
}

pub fn write_trace_csv(points: &[TracePoint], out_dir: &Path) -> Result<PathBuf, BenchError> {
    std::fs::create_dir_all(out_dir).map_err(|source| BenchError::Io { path: out_dir.to_path_buf(), source })?;
    let path = out_dir.join("iteration_trace.csv");
    let rows: Vec<Vec<String>> =
        points.iter().map(|t| vec![t.session_id.clone(), t.iteration.to_string(), t.p.to_string()]).collect();
    write_csv(&path, &TRACE_COLUMNS, &rows)?;
    Ok(path)
}
