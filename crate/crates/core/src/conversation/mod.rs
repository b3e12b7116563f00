//! The solution-routing conversation.
//!
//! Per iteration: the proposer writes ANALYSIS and THOUGHT, the engineer
//! writes ACTION, the program runs on the example instances, and the enabled
//! committee members (requirement checker, code checker) review in
//! parallel. Unanimous acceptance ends the loop; otherwise their feedback is
//! carried into the next iteration. After the loop the repetition gate
//! decides whether the candidate enters the pool.

mod normalize;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    compose_proposal, parse_decision, parse_repetition, parse_sections, render_sections, AgentError, AgentRole, Agents,
    CommitteeDecision, ProposalSections, RepetitionVerdict, Verdict,
};
use crate::message::ChatMessage;
use crate::model::{
    declared_models, split_examples, to_json_pretty, Admission, Instance, ModelCard, Provenance, Solution,
    SolutionPool, TaskSpec,
};
use crate::prompt::{assemble_router_prompt, render_solution_pool, PromptBundle, PromptTemplates};
use crate::sandbox::{CodeRunner, ExecStatus, ExecutionReport, Trace};

pub use normalize::{normalize_python, CodeNormalizer, PythonNormalizer};

pub const DEFAULT_MAX_ITERATIONS: usize = 6;

pub const COMMITTEE: [AgentRole; 3] =
    [AgentRole::RequirementChecker, AgentRole::CodeChecker, AgentRole::RepetitionChecker];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session budget must be at least 1")]
    InvalidBudget,
    #[error("failed to write session record {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub max_iterations: usize,
    pub enabled_committee: BTreeSet<AgentRole>,
    pub debugger_enabled: bool,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            enabled_committee: COMMITTEE.into_iter().collect(),
            debugger_enabled: true,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_iterations == 0 {
            return Err(EngineError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if let Some(r) = self.enabled_committee.iter().find(|r| !COMMITTEE.contains(r)) {
            return Err(EngineError::InvalidConfig(format!("`{r}` is not a committee member")));
        }
        Ok(())
    }

    pub fn enabled(&self, role: AgentRole) -> bool {
        self.enabled_committee.contains(&role)
    }

    /// Copy with `role` removed (the code debugger switches off instrumentation).
    pub fn without(&self, role: AgentRole) -> Self {
        let mut next = self.clone();
        if role == AgentRole::CodeDebugger {
            next.debugger_enabled = false;
        } else {
            next.enabled_committee.remove(&role);
        }
        next
    }
}

/// Source of `created_at` stamps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Fixed(String),
}

impl Clock {
    pub fn now(&self) -> String {
        match self {
            Clock::System => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            Clock::Fixed(s) => s.clone(),
        }
    }
}

/// Turns accumulated committee feedback into the text shown to the solution team.
pub trait FeedbackDigest: Send + Sync {
    fn digest(&self, feedback: &[(usize, CommitteeDecision)]) -> String;
}

/// Every reject, verbatim, labeled with its iteration and reviewer.
#[derive(Debug, Clone, Copy, Default)]
pub struct VerbatimFeedback;

impl FeedbackDigest for VerbatimFeedback {
    fn digest(&self, feedback: &[(usize, CommitteeDecision)]) -> String {
        let mut out = String::new();
        for (iteration, d) in feedback {
            let _ = writeln!(out, "[iteration {iteration}] [{}] {}", d.role, d.feedback);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeKind {
    Admitted,
    AdmittedAtCap,
    RejectedDuplicate,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malformed: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub statuses: Vec<ExecStatus>,
    pub decisions: Vec<CommitteeDecision>,
}

impl IterationRecord {
    pub fn unanimous(&self) -> bool {
        self.malformed.is_none() && self.decisions.iter().all(|d| d.verdict == Verdict::Accept)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub session_id: String,
    pub kind: OutcomeKind,
    pub solution: Option<Solution>,
    pub iterations_used: usize,
    pub duplicate_of: Option<String>,
    pub failure: Option<String>,
    pub iterations: Vec<IterationRecord>,
}

/// Execution report as stored in session transcripts (no timing, so replays compare byte-for-byte).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportView {
    pub instance_id: String,
    pub status: ExecStatus,
    pub answer: Option<String>,
    pub traces: Vec<Trace>,
    pub stderr_tail: String,
}

impl From<&ExecutionReport> for ReportView {
    fn from(r: &ExecutionReport) -> Self {
        Self {
            instance_id: r.instance_id.clone(),
            status: r.status,
            answer: r.answer.clone(),
            traces: r.traces.clone(),
            stderr_tail: r.stderr_tail.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Agent {
        iteration: usize,
        role: AgentRole,
        text: String,
    },
    Proposal {
        iteration: usize,
        sections: ProposalSections,
    },
    Malformed {
        iteration: usize,
        error: String,
    },
    Execution {
        iteration: usize,
        reports: Vec<ReportView>,
    },
    Decision {
        iteration: usize,
        decision: CommitteeDecision,
    },
    Repetition {
        stage: String,
        duplicate_of: Option<String>,
    },
    Outcome {
        kind: OutcomeKind,
        iterations_used: usize,
        solution_id: Option<String>,
        duplicate_of: Option<String>,
        failure: Option<String>,
    },
}

/// Writes `<root>/<session_id>/transcript.jsonl` and `outcome.json`.
#[derive(Debug, Clone)]
pub struct SessionStore {
    pub root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn transcript_path(&self, session_id: &str) -> PathBuf {
        self.root.join(session_id).join("transcript.jsonl")
    }

    fn write(&self, outcome: &SessionOutcome, events: &[SessionEvent]) -> Result<(), EngineError> {
        let dir = self.root.join(&outcome.session_id);
        let err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EngineError::Store { path, source }
        };
        std::fs::create_dir_all(&dir).map_err(err(&dir))?;
        let mut jsonl = String::new();
        for e in events {
            jsonl.push_str(&serde_json::to_string(e).expect("event"));
            jsonl.push('\n');
        }
        let t = dir.join("transcript.jsonl");
        std::fs::write(&t, jsonl).map_err(err(&t))?;
        let o = dir.join("outcome.json");
        std::fs::write(&o, to_json_pretty(outcome)).map_err(err(&o))
    }
}

pub fn read_session_events(path: impl AsRef<Path>) -> std::io::Result<Vec<SessionEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

pub struct PoolRun {
    pub pool: SolutionPool,
    pub outcomes: Vec<SessionOutcome>,
}

pub struct Engine {
    pub agents: Agents,
    pub runner: Arc<dyn CodeRunner>,
    pub cards: Vec<ModelCard>,
    pub templates: PromptTemplates,
    pub clock: Clock,
    pub normalizer: Arc<dyn CodeNormalizer>,
    pub feedback: Arc<dyn FeedbackDigest>,
    pub store: Option<SessionStore>,
}

struct Session {
    id: String,
    events: Vec<SessionEvent>,
    iterations: Vec<IterationRecord>,
}

fn failed(session: Session, engine: &Engine, cause: String) -> Result<SessionOutcome, EngineError> {
    tracing::warn!(session = %session.id, %cause, "session failed");
    let used = session.iterations.len();
    finish(engine, session, OutcomeKind::Failed, None, used, None, Some(cause))
}

fn finish(
    engine: &Engine,
    mut session: Session,
    kind: OutcomeKind,
    solution: Option<Solution>,
    iterations_used: usize,
    duplicate_of: Option<String>,
    failure: Option<String>,
) -> Result<SessionOutcome, EngineError> {
    session.events.push(SessionEvent::Outcome {
        kind,
        iterations_used,
        solution_id: solution.as_ref().map(|s| s.id.clone()),
        duplicate_of: duplicate_of.clone(),
        failure: failure.clone(),
    });
    let outcome = SessionOutcome {
        session_id: session.id.clone(),
        kind,
        solution,
        iterations_used,
        duplicate_of,
        failure,
        iterations: session.iterations,
    };
    if let Some(store) = &engine.store {
        store.write(&outcome, &session.events)?;
    }
    Ok(outcome)
}

fn execution_view(examples: &[Instance], reports: &[ExecutionReport], with_traces: bool) -> String {
    let mut out = String::new();
    for (inst, r) in examples.iter().zip(reports) {
        let _ = writeln!(out, "--- Example {} ---", inst.id);
        let _ = writeln!(out, "Status: {:?}", r.status);
        let _ = writeln!(out, "Expected answer: {}", inst.ground_truth.as_deref().unwrap_or(""));
        let _ = writeln!(out, "Program answer: {}", r.answer.as_deref().unwrap_or("<none>"));
        if with_traces {
            if r.traces.is_empty() {
                let _ = writeln!(out, "Intermediate traces: none");
            } else {
                let _ = writeln!(out, "Intermediate traces:");
                for t in &r.traces {
                    let _ = writeln!(out, "  {} = {}", t.label, t.value);
                }
            }
        }
        if !r.stderr_tail.trim().is_empty() {
            let _ = writeln!(out, "stderr (tail):\n{}", r.stderr_tail.trim_end());
        }
    }
    out
}

/// Next free numeric suffix for `sol-NNN` ids.
fn next_index(pool: &SolutionPool) -> usize {
    pool.solutions
        .iter()
        .filter_map(|s| s.id.strip_prefix("sol-").and_then(|n| n.parse::<usize>().ok()))
        .max()
        .map_or(1, |m| m + 1)
}

pub fn session_id(task: &TaskSpec, index: usize) -> String {
    format!("{}-s{index:03}", task.task_id)
}

impl Engine {
    pub fn new(agents: Agents, runner: Arc<dyn CodeRunner>, cards: Vec<ModelCard>) -> Self {
        Self {
            agents,
            runner,
            cards,
            templates: PromptTemplates::defaults(),
            clock: Clock::System,
            normalizer: Arc::new(PythonNormalizer),
            feedback: Arc::new(VerbatimFeedback),
            store: None,
        }
    }

    /// One conversation producing at most one candidate, named `sol-{index}`.
    pub fn run_session(
        &self,
        task: &TaskSpec,
        pool: &SolutionPool,
        config: &SessionConfig,
        index: usize,
    ) -> Result<SessionOutcome, EngineError> {
        config.validate()?;
        let mut s = Session { id: session_id(task, index), events: Vec::new(), iterations: Vec::new() };
        let router = match PromptBundle::build(task, pool, &self.cards, &self.templates)
            .and_then(|b| assemble_router_prompt(&b))
        {
            Ok(m) => m,
            Err(e) => return failed(s, self, format!("prompt: {e}")),
        };
        let (examples, _) = split_examples(task);
        let with_context = |extra: String| {
            let mut msgs = router.clone();
            msgs.push(ChatMessage::user(extra));
            msgs
        };

        let mut feedback: Vec<(usize, CommitteeDecision)> = Vec::new();
        let mut latest: Option<(usize, ProposalSections)> = None;
        let mut last_malformed = String::new();
        let mut accepted = false;

        for k in 1..=config.max_iterations {
            let mut record =
                IterationRecord { iteration: k, malformed: None, statuses: Vec::new(), decisions: Vec::new() };
            let feedback_text = if feedback.is_empty() {
                String::new()
            } else {
                format!("COMMITTEE FEEDBACK FROM PREVIOUS ITERATIONS:\n{}", self.feedback.digest(&feedback))
            };

            let mut proposer_ctx = String::from("Propose a new solution for the task above.\n");
            if let Some((_, prev)) = &latest {
                let _ = write!(proposer_ctx, "\nYOUR PREVIOUS PROPOSAL:\n{}", render_sections(prev));
            }
            if !feedback_text.is_empty() {
                let _ = write!(proposer_ctx, "\n{feedback_text}");
            }
            let proposer = match self.agents.run_agent(AgentRole::SolutionProposer, &s.id, &with_context(proposer_ctx))
            {
                Ok(t) => t,
                Err(e) => return failed(s, self, e.to_string()),
            };
            s.events.push(SessionEvent::Agent {
                iteration: k,
                role: AgentRole::SolutionProposer,
                text: proposer.clone(),
            });

            let mut engineer_ctx = format!("PLAN FROM THE SOLUTION PROPOSER:\n{}\n", proposer.trim());
            if !feedback_text.is_empty() {
                let _ = write!(engineer_ctx, "\n{feedback_text}");
            }
            let engineer = match self.agents.run_agent(AgentRole::SolutionEngineer, &s.id, &with_context(engineer_ctx))
            {
                Ok(t) => t,
                Err(e) => return failed(s, self, e.to_string()),
            };
            s.events.push(SessionEvent::Agent {
                iteration: k,
                role: AgentRole::SolutionEngineer,
                text: engineer.clone(),
            });

            let proposal = match parse_sections(&compose_proposal(&proposer, &engineer)) {
                Ok(p) => p,
                Err(e) => {
                    let responsible =
                        if e.header() == "ACTION" { AgentRole::SolutionEngineer } else { AgentRole::SolutionProposer };
                    last_malformed = e.to_string();
                    s.events.push(SessionEvent::Malformed { iteration: k, error: last_malformed.clone() });
                    let d = CommitteeDecision {
                        role: responsible,
                        verdict: Verdict::Reject,
                        feedback: last_malformed.clone(),
                        malformed: true,
                    };
                    feedback.push((k, d));
                    record.malformed = Some(last_malformed.clone());
                    s.iterations.push(record);
                    continue;
                }
            };
            s.events.push(SessionEvent::Proposal { iteration: k, sections: proposal.clone() });
            latest = Some((k, proposal.clone()));

            let reports = match self.runner.run(&proposal.action_code, task, examples, &format!("route:{}:{k}", s.id)) {
                Ok(r) => r,
                Err(e) => return failed(s, self, format!("sandbox: {e}")),
            };
            record.statuses = reports.iter().map(|r| r.status).collect();
            s.events.push(SessionEvent::Execution {
                iteration: k,
                reports: reports.iter().map(ReportView::from).collect(),
            });

            let candidate = render_sections(&proposal);
            let members: Vec<(AgentRole, String)> = [AgentRole::RequirementChecker, AgentRole::CodeChecker]
                .into_iter()
                .filter(|r| config.enabled(*r))
                .map(|r| {
                    let text = match r {
                        AgentRole::CodeChecker => format!(
                            "CANDIDATE SOLUTION:\n{candidate}\nEXECUTION REPORT ON THE EXAMPLE INSTANCES:\n{}",
                            execution_view(examples, &reports, config.debugger_enabled)
                        ),
                        _ => format!("CANDIDATE SOLUTION:\n{candidate}"),
                    };
                    (r, text)
                })
                .collect();
            let replies: Vec<Result<String, AgentError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = members
                    .iter()
                    .map(|(role, text)| {
                        let ctx = with_context(text.clone());
                        let id = s.id.as_str();
                        scope.spawn(move || self.agents.run_agent(*role, id, &ctx))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("committee thread")).collect()
            });
            for ((role, _), reply) in members.iter().zip(replies) {
                let reply = match reply {
                    Ok(t) => t,
                    Err(e) => return failed(s, self, e.to_string()),
                };
                s.events.push(SessionEvent::Agent { iteration: k, role: *role, text: reply.clone() });
                let decision = parse_decision(*role, &reply);
                if decision.malformed {
                    tracing::warn!(session = %s.id, role = %role, "unparseable verdict, treated as reject");
                }
                s.events.push(SessionEvent::Decision { iteration: k, decision: decision.clone() });
                if decision.verdict == Verdict::Reject {
                    feedback.push((k, decision.clone()));
                }
                record.decisions.push(decision);
            }
            let unanimous = record.unanimous();
            s.iterations.push(record);
            if unanimous {
                accepted = true;
                break;
            }
        }

        let used = s.iterations.len();
        let Some((iteration, proposal)) = latest else {
            return failed(s, self, format!("MALFORMED: {last_malformed}"));
        };
        let candidate = Solution {
            id: format!("sol-{index:03}"),
            declared_models: declared_models(&proposal.action_code, &self.cards),
            analysis: proposal.analysis,
            thought: proposal.thought,
            action_code: proposal.action_code,
            provenance: Provenance {
                session_id: s.id.clone(),
                iteration_index: iteration,
                backend_id: self.agents.gateway.backend_id().to_owned(),
            },
            created_at: self.clock.now(),
        };

        let duplicate_of = if config.enabled(AgentRole::RepetitionChecker) {
            match self.check_repetition(&candidate, pool, &s.id, &mut s.events) {
                Ok(d) => d,
                Err(e) => return failed(s, self, e.to_string()),
            }
        } else {
            None
        };
        match duplicate_of {
            Some(dup) => finish(self, s, OutcomeKind::RejectedDuplicate, None, used, Some(dup), None),
            None => {
                let kind = if accepted { OutcomeKind::Admitted } else { OutcomeKind::AdmittedAtCap };
                finish(self, s, kind, Some(candidate), used, None, None)
            }
        }
    }

    /// Normalizer first; the repetition agent only when no normalized match exists.
    pub fn check_repetition(
        &self,
        candidate: &Solution,
        pool: &SolutionPool,
        session_id: &str,
        events: &mut Vec<SessionEvent>,
    ) -> Result<Option<String>, AgentError> {
        let normalized = self.normalizer.normalize(&candidate.action_code);
        if let Some(m) = pool.solutions.iter().find(|s| self.normalizer.normalize(&s.action_code) == normalized) {
            events.push(SessionEvent::Repetition { stage: "normalizer".into(), duplicate_of: Some(m.id.clone()) });
            return Ok(Some(m.id.clone()));
        }
        if pool.is_empty() {
            events.push(SessionEvent::Repetition { stage: "normalizer".into(), duplicate_of: None });
            return Ok(None);
        }
        let ctx = [ChatMessage::user(format!(
            "CANDIDATE SOLUTION (id: {}):\n```python\n{}\n```\n\nSOLUTION POOL:\n{}",
            candidate.id,
            candidate.action_code,
            render_solution_pool(pool)
        ))];
        let reply = self.agents.run_agent(AgentRole::RepetitionChecker, session_id, &ctx)?;
        let ids: Vec<&str> = pool.solutions.iter().map(|s| s.id.as_str()).collect();
        let verdict = match parse_repetition(&reply, &ids) {
            RepetitionVerdict::Duplicate(id) => Some(id),
            RepetitionVerdict::Unique => None,
            RepetitionVerdict::Unparseable => {
                tracing::warn!(session = session_id, "unparseable repetition verdict, treated as UNIQUE");
                None
            }
        };
        events.push(SessionEvent::Agent { iteration: 0, role: AgentRole::RepetitionChecker, text: reply });
        events.push(SessionEvent::Repetition { stage: "agent".into(), duplicate_of: verdict.clone() });
        Ok(verdict)
    }

    /// Runs `budget` sessions in sequence, each seeing the pool so far.
    pub fn generate_pool(
        &self,
        task: &TaskSpec,
        start: SolutionPool,
        config: &SessionConfig,
        budget: usize,
    ) -> Result<PoolRun, EngineError> {
        if budget == 0 {
            return Err(EngineError::InvalidBudget);
        }
        config.validate()?;
        let first = next_index(&start);
        let mut pool = start;
        let mut outcomes = Vec::with_capacity(budget);
        for index in first..first + budget {
            let outcome = self.run_session(task, &pool, config, index)?;
            match (&outcome.kind, &outcome.solution) {
                (OutcomeKind::Admitted | OutcomeKind::AdmittedAtCap, Some(sol)) => {
                    let (next, admission) =
                        pool.admit(sol.clone(), None).map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
                    debug_assert!(matches!(admission, Admission::Admitted { .. }));
                    pool = next;
                }
                (OutcomeKind::RejectedDuplicate, _) => {
                    tracing::info!(session = %outcome.session_id, duplicate_of = ?outcome.duplicate_of, "candidate rejected as duplicate");
                }
                _ => {
                    tracing::warn!(session = %outcome.session_id, failure = ?outcome.failure, "session failed, skipped")
                }
            }
            outcomes.push(outcome);
        }
        if pool.is_empty() && outcomes.iter().all(|o| o.kind == OutcomeKind::Failed) {
            tracing::warn!(task = %task.task_id, "EMPTY_POOL_RESULT: every session failed");
        }
        Ok(PoolRun { pool, outcomes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentPool;
    use crate::gateway::{FnBackend, Gateway, GatewayError, PriceTable, ScriptedBackend, UsageLedger};
    use crate::model::{ArgSpec, CostClass};
    use crate::sandbox::{ok_report, FnRunner};
    use std::collections::BTreeMap;
    use std::sync::Mutex;

    pub(crate) fn toy_task() -> TaskSpec {
        let inst = |id: &str, gt: Option<&str>| Instance {
            id: id.into(),
            images: vec![],
            request_prompt: format!("q {id}"),
            ground_truth: gt.map(Into::into),
        };
        TaskSpec {
            task_id: "t".into(),
            description: "answer".into(),
            example_count: 2,
            constraints: vec![],
            instances: vec![inst("i1", Some("A")), inst("i2", Some("B")), inst("i3", None), inst("i4", None)],
            base_dir: None,
        }
    }

    fn cards() -> Vec<ModelCard> {
        vec![ModelCard {
            name: "depth".into(),
            functionality: "depth".into(),
            input_args: vec![ArgSpec { name: "image".into(), semantic_type: "path".into(), description: "d".into() }],
            return_args: vec![ArgSpec { name: "depths".into(), semantic_type: "list".into(), description: "d".into() }],
            example_usage: "call_tool(\"depth\", image=p)".into(),
            cost_class: CostClass::Local,
        }]
    }

    fn engine_with(backend: Arc<dyn crate::gateway::ChatBackend>) -> Engine {
        let ledger = Arc::new(UsageLedger::new(PriceTable::default().with("m", "1", "1")));
        let agents = Agents::new(Gateway::new(backend, ledger), AgentPool::uniform("m"));
        let runner = Arc::new(FnRunner(|_code: &str, inst: &Instance| ok_report(&inst.id, "A")));
        let mut e = Engine::new(agents, runner, cards());
        e.clock = Clock::Fixed("2024-01-01T00:00:00Z".into());
        e
    }

    fn scripted(pairs: &[(&str, &str)]) -> Engine {
        engine_with(Arc::new(ScriptedBackend::from_pairs("scripted", pairs.iter().copied())))
    }

    const PLAN: &str = "ANALYSIS: pool reviewed\nTHOUGHT: 1. ask depth";
    const CODE: &str =
        "ACTION:\n```python\nr = call_tool(\"depth\", image=load_instance()[\"images\"][0])\nemit_answer(r)\n```";

    #[test]
    fn accept_at_first_iteration() {
        let e = scripted(&[
            ("proposer", PLAN),
            ("engineer", CODE),
            ("requirement_checker", "fine\nDECISION: ACCEPT"),
            ("code_checker", "DECISION: ACCEPT"),
            ("repetition_checker", "UNIQUE"),
        ]);
        let out = e.run_session(&toy_task(), &SolutionPool::new("t"), &SessionConfig::default(), 1).unwrap();
        assert_eq!(out.kind, OutcomeKind::Admitted);
        assert_eq!(out.iterations_used, 1);
        let sol = out.solution.unwrap();
        assert_eq!(sol.id, "sol-001");
        assert_eq!(sol.declared_models, ["depth"]);
        assert_eq!(sol.provenance.iteration_index, 1);
        assert_eq!(sol.created_at, "2024-01-01T00:00:00Z");
    }

    #[test]
    fn always_reject_reaches_cap_with_last_proposal() {
        let scripts: BTreeMap<String, crate::gateway::Script> = serde_json::from_value(serde_json::json!({
            "proposer": (1..=6).map(|k| format!("ANALYSIS: a{k}\nTHOUGHT: t{k}")).collect::<Vec<_>>(),
            "engineer": (1..=6).map(|k| format!("ACTION:\n```python\nemit_answer('{k}')\n```")).collect::<Vec<_>>(),
            "requirement_checker": "DECISION: ACCEPT",
            "code_checker": "wrong depth\nDECISION: REJECT",
            "repetition_checker": "UNIQUE",
        }))
        .unwrap();
        let e = engine_with(Arc::new(ScriptedBackend::new("s", scripts)));
        let out = e.run_session(&toy_task(), &SolutionPool::new("t"), &SessionConfig::default(), 1).unwrap();
        assert_eq!(out.kind, OutcomeKind::AdmittedAtCap);
        assert_eq!(out.iterations_used, 6);
        let sol = out.solution.unwrap();
        assert_eq!(sol.action_code, "emit_answer('6')");
        assert_eq!(sol.provenance.iteration_index, 6);
    }

    #[test]
    fn normalized_duplicate_rejected_without_agent_call() {
        let calls = Arc::new(Mutex::new(Vec::<String>::new()));
        let seen = calls.clone();
        let backend = FnBackend::new("fn", move |req| {
            seen.lock().unwrap().push(req.role_key().to_owned());
            Ok(match req.role_key() {
                "proposer" => PLAN.into(),
                "engineer" => CODE.into(),
                "repetition_checker" => "UNIQUE".into(),
                _ => "DECISION: ACCEPT".into(),
            })
        });
        let e = engine_with(Arc::new(backend));
        let mut pool = SolutionPool::new("t");
        let first = e.run_session(&toy_task(), &pool, &SessionConfig::default(), 1).unwrap();
        pool = pool.admit(first.solution.unwrap(), None).unwrap().0;
        calls.lock().unwrap().clear();
        let out = e.run_session(&toy_task(), &pool, &SessionConfig::default(), 2).unwrap();
        assert_eq!(out.kind, OutcomeKind::RejectedDuplicate);
        assert_eq!(out.duplicate_of.as_deref(), Some("sol-001"));
        assert!(!calls.lock().unwrap().iter().any(|r| r == "repetition_checker"));
    }

    #[test]
    fn agent_duplicate_and_unparseable_reply() {
        let mut pool = SolutionPool::new("t");
        let e = scripted(&[("repetition_checker", "same idea\nDUPLICATE: sol-001")]);
        let sol = |id: &str, code: &str| Solution {
            id: id.into(),
            analysis: "a".into(),
            thought: "t".into(),
            action_code: code.into(),
            declared_models: vec![],
            provenance: Provenance { session_id: "s".into(), iteration_index: 1, backend_id: "b".into() },
            created_at: "x".into(),
        };
        pool = pool.admit(sol("sol-001", "emit_answer('A')"), None).unwrap().0;
        let mut ev = Vec::new();
        let cand = sol("sol-002", "emit_answer('B')");
        assert_eq!(e.check_repetition(&cand, &pool, "s", &mut ev).unwrap().as_deref(), Some("sol-001"));
        let e = scripted(&[("repetition_checker", "hmm")]);
        assert_eq!(e.check_repetition(&cand, &pool, "s", &mut ev).unwrap(), None);
        let e = scripted(&[("repetition_checker", "UNIQUE")]);
        assert_eq!(e.check_repetition(&cand, &pool, "s", &mut ev).unwrap(), None);
    }

    #[test]
    fn malformed_every_iteration_fails() {
        let e = scripted(&[("proposer", "THOUGHT: only"), ("engineer", CODE)]);
        let cfg = SessionConfig { max_iterations: 3, ..Default::default() };
        let out = e.run_session(&toy_task(), &SolutionPool::new("t"), &cfg, 1).unwrap();
        assert_eq!(out.kind, OutcomeKind::Failed);
        assert_eq!(out.iterations_used, 3);
        assert!(out.failure.unwrap().starts_with("MALFORMED"));
    }

    #[test]
    fn gateway_failure_fails_session() {
        let e = engine_with(Arc::new(FnBackend::new("fn", |_req| {
            Err(GatewayError::BackendUnavailable { attempts: 3, last_error: "down".into() })
        })));
        let out = e.run_session(&toy_task(), &SolutionPool::new("t"), &SessionConfig::default(), 1).unwrap();
        assert_eq!(out.kind, OutcomeKind::Failed);
        assert!(out.failure.unwrap().contains("down"));
    }

    #[test]
    fn feedback_accumulates_verbatim() {
        let proposer_contexts = Arc::new(Mutex::new(Vec::<String>::new()));
        let seen = proposer_contexts.clone();
        let counter = Arc::new(Mutex::new(0usize));
        let backend = FnBackend::new("fn", move |req| {
            Ok(match req.role_key() {
                "proposer" => {
                    seen.lock().unwrap().push(req.messages.last().unwrap().joined_text());
                    PLAN.into()
                }
                "engineer" => CODE.into(),
                "code_checker" => {
                    let mut c = counter.lock().unwrap();
                    *c += 1;
                    format!("issue number {c}\nDECISION: REJECT")
                }
                _ => "DECISION: ACCEPT".into(),
            })
        });
        let e = engine_with(Arc::new(backend));
        let cfg = SessionConfig { max_iterations: 4, ..Default::default() };
        e.run_session(&toy_task(), &SolutionPool::new("t"), &cfg, 1).unwrap();
        let ctx = proposer_contexts.lock().unwrap();
        assert_eq!(ctx.len(), 4);
        for (k, text) in ctx.iter().enumerate() {
            for j in 1..=k {
                assert!(text.contains(&format!("issue number {j}")), "iteration {} misses feedback {j}", k + 1);
            }
        }
    }

    #[test]
    fn generate_pool_budget_and_duplicates() {
        let e = scripted(&[]);
        assert!(matches!(
            e.generate_pool(&toy_task(), SolutionPool::new("t"), &SessionConfig::default(), 0),
            Err(EngineError::InvalidBudget)
        ));
        let scripts: BTreeMap<String, crate::gateway::Script> = serde_json::from_value(serde_json::json!({
            "proposer": PLAN,
            "engineer": ["ACTION:\nemit_answer('1')", "ACTION:\nemit_answer('2')", "ACTION:\nemit_answer('1')"],
            "requirement_checker": "DECISION: ACCEPT",
            "code_checker": "DECISION: ACCEPT",
            "repetition_checker": "UNIQUE",
        }))
        .unwrap();
        let e = engine_with(Arc::new(ScriptedBackend::new("s", scripts)));
        let run = e.generate_pool(&toy_task(), SolutionPool::new("t"), &SessionConfig::default(), 3).unwrap();
        assert_eq!(run.pool.len(), 2);
        assert_eq!(run.outcomes[2].kind, OutcomeKind::RejectedDuplicate);
        assert_eq!(run.pool.solutions.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["sol-001", "sol-002"]);
    }

    #[test]
    fn store_writes_transcript_without_timings() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = scripted(&[
            ("proposer", PLAN),
            ("engineer", CODE),
            ("requirement_checker", "DECISION: ACCEPT"),
            ("code_checker", "DECISION: ACCEPT"),
        ]);
        e.store = Some(SessionStore::new(dir.path()));
        e.run_session(&toy_task(), &SolutionPool::new("t"), &SessionConfig::default(), 1).unwrap();
        let path = dir.path().join("t-s001").join("transcript.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("wall_time"));
        let events = read_session_events(&path).unwrap();
        assert!(matches!(events.last(), Some(SessionEvent::Outcome { kind: OutcomeKind::Admitted, .. })));
        assert!(dir.path().join("t-s001").join("outcome.json").exists());
    }

    #[test]
    fn ablation_config() {
        let cfg = SessionConfig::default();
        assert!(!cfg.without(AgentRole::CodeDebugger).debugger_enabled);
        assert!(!cfg.without(AgentRole::CodeChecker).enabled(AgentRole::CodeChecker));
        let bad = SessionConfig {
            enabled_committee: [AgentRole::SolutionProposer].into_iter().collect(),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
