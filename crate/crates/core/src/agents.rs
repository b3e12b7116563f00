//! Agent roles, their configuration and parsers for structured agent output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::message::ChatMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentRole {
    #[serde(rename = "proposer", alias = "SOLUTION_PROPOSER")]
    SolutionProposer,
    #[serde(rename = "engineer", alias = "SOLUTION_ENGINEER")]
    SolutionEngineer,
    #[serde(rename = "requirement_checker", alias = "REQUIREMENT_CHECKER")]
    RequirementChecker,
    #[serde(rename = "code_checker", alias = "CODE_CHECKER")]
    CodeChecker,
    #[serde(rename = "code_debugger", alias = "CODE_DEBUGGER")]
    CodeDebugger,
    #[serde(rename = "repetition_checker", alias = "REPETITION_CHECKER")]
    RepetitionChecker,
    #[serde(rename = "metric_router", alias = "METRIC_ROUTER")]
    MetricRouter,
}

impl AgentRole {
    pub const ALL: [AgentRole; 7] = [
        AgentRole::SolutionProposer,
        AgentRole::SolutionEngineer,
        AgentRole::RequirementChecker,
        AgentRole::CodeChecker,
        AgentRole::CodeDebugger,
        AgentRole::RepetitionChecker,
        AgentRole::MetricRouter,
    ];

    /// Short name used in request tags and config keys.
    pub fn tag(self) -> &'static str {
        match self {
            AgentRole::SolutionProposer => "proposer",
            AgentRole::SolutionEngineer => "engineer",
            AgentRole::RequirementChecker => "requirement_checker",
            AgentRole::CodeChecker => "code_checker",
            AgentRole::CodeDebugger => "code_debugger",
            AgentRole::RepetitionChecker => "repetition_checker",
            AgentRole::MetricRouter => "metric_router",
        }
    }

    /// Upper-case enum name.
    pub fn constant_name(self) -> &'static str {
        match self {
            AgentRole::SolutionProposer => "SOLUTION_PROPOSER",
            AgentRole::SolutionEngineer => "SOLUTION_ENGINEER",
            AgentRole::RequirementChecker => "REQUIREMENT_CHECKER",
            AgentRole::CodeChecker => "CODE_CHECKER",
            AgentRole::CodeDebugger => "CODE_DEBUGGER",
            AgentRole::RepetitionChecker => "REPETITION_CHECKER",
            AgentRole::MetricRouter => "METRIC_ROUTER",
        }
    }

    pub fn default_temperature(self) -> f64 {
        match self {
            AgentRole::SolutionProposer | AgentRole::SolutionEngineer => 0.7,
            _ => 0.0,
        }
    }

    fn default_template(self) -> Option<&'static str> {
        Some(match self {
            AgentRole::SolutionProposer => include_str!("../../../prompts/agents/proposer.txt"),
            AgentRole::SolutionEngineer => include_str!("../../../prompts/agents/engineer.txt"),
            AgentRole::RequirementChecker => include_str!("../../../prompts/agents/requirement_checker.txt"),
            AgentRole::CodeChecker => include_str!("../../../prompts/agents/code_checker.txt"),
            AgentRole::RepetitionChecker => include_str!("../../../prompts/agents/repetition_checker.txt"),
            AgentRole::MetricRouter => include_str!("../../../prompts/agents/metric_router.txt"),
            AgentRole::CodeDebugger => return None,
        })
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        AgentRole::ALL
            .into_iter()
            .find(|r| r.tag().eq_ignore_ascii_case(s) || r.constant_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown agent role `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent role `{0}` is not configured")]
    ConfigMissing(AgentRole),
    #[error("failed to read template {path}: {source}")]
    Template {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One entry of the agent config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub model: String,
    /// Relative to the config file; the built-in template is used when absent.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_output_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub model: String,
    pub system_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;

/// Role to model/template bindings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentPool {
    agents: BTreeMap<AgentRole, AgentSettings>,
}

impl AgentPool {
    pub fn from_specs(specs: BTreeMap<AgentRole, AgentSpec>, base_dir: Option<&Path>) -> Result<Self, AgentError> {
        let mut agents = BTreeMap::new();
        for (role, spec) in specs {
            let system_prompt = match &spec.template_path {
                Some(p) => {
                    let path = match base_dir {
                        Some(base) if p.is_relative() => base.join(p),
                        _ => p.clone(),
                    };
                    std::fs::read_to_string(&path).map_err(|source| AgentError::Template { path, source })?
                }
                None => role
                    .default_template()
                    .ok_or_else(|| AgentError::Config(format!("role `{role}` has no built-in template")))?
                    .to_owned(),
            };
            let temperature = spec.temperature.unwrap_or(role.default_temperature());
            if !(temperature >= 0.0) {
                return Err(AgentError::Config(format!("role `{role}`: temperature must be >= 0")));
            }
            let max_output_tokens = spec.max_output_tokens.unwrap_or(DEFAULT_MAX_OUTPUT_TOKENS);
            if max_output_tokens == 0 {
                return Err(AgentError::Config(format!("role `{role}`: max_output_tokens must be positive")));
            }
            agents.insert(role, AgentSettings { model: spec.model, system_prompt, temperature, max_output_tokens });
        }
        Ok(Self { agents })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| AgentError::Template { path: path.to_path_buf(), source })?;
        let specs: BTreeMap<AgentRole, AgentSpec> =
            serde_json::from_str(&text).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_specs(specs, path.parent())
    }

    /// Every model-backed role bound to `model` with built-in templates.
    pub fn uniform(model: &str) -> Self {
        let specs = AgentRole::ALL
            .into_iter()
            .filter(|r| r.default_template().is_some())
            .map(|r| {
                (r, AgentSpec { model: model.into(), template_path: None, temperature: None, max_output_tokens: None })
            })
            .collect();
        Self::from_specs(specs, None).expect("built-in templates")
    }

    pub fn get(&self, role: AgentRole) -> Option<&AgentSettings> {
        self.agents.get(&role)
    }

    pub fn roles(&self) -> impl Iterator<Item = AgentRole> + '_ {
        self.agents.keys().copied()
    }
}

/// Runs agents through a gateway.
#[derive(Clone)]
pub struct Agents {
    pub gateway: Gateway,
    pub pool: AgentPool,
}

impl Agents {
    pub fn new(gateway: Gateway, pool: AgentPool) -> Self {
        Self { gateway, pool }
    }

    /// Sends the role's system template followed by `context`; returns the raw reply.
    pub fn run_agent(&self, role: AgentRole, session_id: &str, context: &[ChatMessage]) -> Result<String, AgentError> {
        let settings = self.pool.get(role).ok_or(AgentError::ConfigMissing(role))?;
        let mut messages = Vec::with_capacity(context.len() + 1);
        messages.push(ChatMessage::system(settings.system_prompt.clone()));
        messages.extend_from_slice(context);
        let request = ChatRequest {
            backend_model: settings.model.clone(),
            messages,
            temperature: settings.temperature,
            max_output_tokens: settings.max_output_tokens,
            tag: format!("{}:{session_id}", role.tag()),
        };
        Ok(self.gateway.complete(&request)?.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalSections {
    pub analysis: String,
    pub thought: String,
    pub action_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedProposal {
    #[error("MALFORMED_PROPOSAL: header `{0}:` is missing or out of order")]
    Header(&'static str),
    #[error("MALFORMED_PROPOSAL: section `{0}` is empty")]
    EmptySection(&'static str),
}

impl MalformedProposal {
    pub fn header(&self) -> &'static str {
        match self {
            MalformedProposal::Header(h) | MalformedProposal::EmptySection(h) => h,
        }
    }
}

const HEADERS: [&str; 3] = ["ANALYSIS", "THOUGHT", "ACTION"];

static HEADER_RES: LazyLock<[Regex; 3]> =
    LazyLock::new(|| HEADERS.map(|h| Regex::new(&format!(r"(?m)^[ \t]*{h}:")).expect("header regex")));
static FENCE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[A-Za-z0-9_+-]*[ \t]*\r?\n(.*?)\r?\n?[ \t]*```").expect("fence regex"));

/// Splits text on the first line-leading `ANALYSIS:`, `THOUGHT:` and `ACTION:` headers.
pub fn parse_sections(text: &str) -> Result<ProposalSections, MalformedProposal> {
    let found: Vec<Option<(usize, usize)>> =
        HEADER_RES.iter().map(|re| re.find(text).map(|m| (m.start(), m.end()))).collect();
    let mut present: Vec<(usize, usize)> =
        found.iter().enumerate().filter_map(|(i, f)| f.map(|(s, _)| (s, i))).collect();
    present.sort();
    for (k, expected) in HEADERS.iter().enumerate() {
        if present.get(k).map(|&(_, i)| i) != Some(k) {
            return Err(MalformedProposal::Header(expected));
        }
    }
    let span = |k: usize| found[k].expect("checked above");
    let analysis = text[span(0).1..span(1).0].trim().to_owned();
    let thought = text[span(1).1..span(2).0].trim().to_owned();
    let tail = &text[span(2).1..];
    let action_code = match FENCE_RE.captures(tail) {
        Some(c) => c[1].trim_matches('\n').trim_end().to_owned(),
        None => tail.trim().to_owned(),
    };
    for (name, body) in HEADERS.iter().zip([&analysis, &thought, &action_code]) {
        if body.trim().is_empty() {
            return Err(MalformedProposal::EmptySection(name));
        }
    }
    Ok(ProposalSections { analysis, thought, action_code })
}

/// Joins the proposer's ANALYSIS/THOUGHT with the engineer's ACTION so that
/// each agent only contributes its own sections.
pub fn compose_proposal(proposer_text: &str, engineer_text: &str) -> String {
    let plan = match HEADER_RES[2].find(proposer_text) {
        Some(m) => &proposer_text[..m.start()],
        None => proposer_text,
    };
    let action = match HEADER_RES[2].find(engineer_text) {
        Some(m) => &engineer_text[m.start()..],
        None => "",
    };
    format!("{}\n{}", plan.trim_end(), action)
}

pub fn render_sections(p: &ProposalSections) -> String {
    format!("ANALYSIS:\n{}\nTHOUGHT:\n{}\nACTION:\n```python\n{}\n```\n", p.analysis, p.thought, p.action_code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitteeDecision {
    pub role: AgentRole,
    pub verdict: Verdict,
    pub feedback: String,
    /// No verdict line was found; the decision is the fail-closed reject.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub malformed: bool,
}

pub const UNPARSEABLE_VERDICT: &str = "unparseable verdict";
pub const EMPTY_REJECT_FEEDBACK: &str = "rejected without feedback";

static DECISION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*DECISION:\s*(ACCEPT|REJECT)\s*$").expect("decision regex"));

/// Total: an input without a verdict line yields a reject.
pub fn parse_decision(role: AgentRole, text: &str) -> CommitteeDecision {
    let lines: Vec<&str> = text.lines().collect();
    let Some(idx) = lines.iter().rposition(|l| DECISION_RE.is_match(l)) else {
        return CommitteeDecision {
            role,
            verdict: Verdict::Reject,
            feedback: UNPARSEABLE_VERDICT.into(),
            malformed: true,
        };
    };
    let caps = DECISION_RE.captures(lines[idx]).expect("matched");
    let verdict = if caps[1].eq_ignore_ascii_case("accept") { Verdict::Accept } else { Verdict::Reject };
    let feedback = lines
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != idx)
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_owned();
    let feedback =
        if verdict == Verdict::Reject && feedback.is_empty() { EMPTY_REJECT_FEEDBACK.into() } else { feedback };
    CommitteeDecision { role, verdict, feedback, malformed: false }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RepetitionVerdict {
    Duplicate(String),
    Unique,
    Unparseable,
}

static DUPLICATE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:DUPLICATE:\s*(\S+?)\.?|(UNIQUE)\.?)\s*$").expect("duplicate regex"));

/// Last `DUPLICATE: <id>` or `UNIQUE` line; an id outside `pool_ids` is unparseable.
pub fn parse_repetition(text: &str, pool_ids: &[&str]) -> RepetitionVerdict {
    let Some(caps) = text.lines().rev().find_map(|l| DUPLICATE_RE.captures(l)) else {
        return RepetitionVerdict::Unparseable;
    };
    if caps.get(2).is_some() {
        return RepetitionVerdict::Unique;
    }
    let id = caps[1].trim_matches(|c| c == '`' || c == '"' || c == '\'');
    match pool_ids.iter().find(|p| **p == id) {
        Some(p) => RepetitionVerdict::Duplicate((*p).to_owned()),
        None => RepetitionVerdict::Unparseable,
    }
}

static METRIC_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*METRIC:\s*`?([A-Za-z0-9_\-]+)`?\.?\s*$").expect("metric regex"));

/// Returns `(metric name, rationale)` from a metric-router reply.
pub fn parse_metric(text: &str) -> Option<(String, String)> {
    let lines: Vec<&str> = text.lines().collect();
    let idx = lines.iter().rposition(|l| METRIC_RE.is_match(l))?;
    let name = METRIC_RE.captures(lines[idx]).expect("matched")[1].to_owned();
    let rationale = lines
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != idx)
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_owned();
    Some((name, rationale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{PriceTable, ReplayBackend, ScriptedBackend, UsageLedger};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn agents(backend: ScriptedBackend) -> Agents {
        let ledger = Arc::new(UsageLedger::new(PriceTable::default().with("m", "1", "1")));
        Agents::new(Gateway::new(Arc::new(backend), ledger), AgentPool::uniform("m"))
    }

    #[test]
    fn role_names_round_trip() {
        for role in AgentRole::ALL {
            assert_eq!(role.tag().parse::<AgentRole>().unwrap(), role);
            assert_eq!(role.constant_name().parse::<AgentRole>().unwrap(), role);
            let json = serde_json::to_string(&role).unwrap();
            assert_eq!(serde_json::from_str::<AgentRole>(&json).unwrap(), role);
        }
        assert!("critic".parse::<AgentRole>().is_err());
    }

    #[test]
    fn run_agent_scripted_and_tagged() {
        let a = agents(ScriptedBackend::from_pairs("s", [("code_checker", "DECISION: ACCEPT")]));
        let text = a.run_agent(AgentRole::CodeChecker, "sess", &[ChatMessage::user("review")]).unwrap();
        assert_eq!(text, "DECISION: ACCEPT");
        assert_eq!(a.gateway.ledger().entries()[0].tag, "code_checker:sess");
        assert!(matches!(
            a.run_agent(AgentRole::CodeDebugger, "sess", &[ChatMessage::user("x")]),
            Err(AgentError::ConfigMissing(AgentRole::CodeDebugger))
        ));
    }

    #[test]
    fn run_agent_replay_identical() {
        let buf: Vec<crate::gateway::TranscriptRecord> = {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.jsonl");
            let rec = crate::gateway::RecordingBackend::new(
                ScriptedBackend::from_pairs("s", [("proposer", "ANALYSIS: a")]),
                crate::gateway::TranscriptWriter::create(&path).unwrap(),
            );
            let ledger = Arc::new(UsageLedger::new(PriceTable::default().with("m", "1", "1")));
            let a = Agents::new(Gateway::new(Arc::new(rec), ledger), AgentPool::uniform("m"));
            for _ in 0..2 {
                a.run_agent(AgentRole::SolutionProposer, "s", &[ChatMessage::user("ctx")]).unwrap();
            }
            crate::gateway::read_transcript(&path).unwrap()
        };
        let ledger = Arc::new(UsageLedger::new(PriceTable::default().with("m", "1", "1")));
        let a = Agents::new(Gateway::new(Arc::new(ReplayBackend::new(buf)), ledger), AgentPool::uniform("m"));
        let ctx = [ChatMessage::user("ctx")];
        let first = a.run_agent(AgentRole::SolutionProposer, "s", &ctx).unwrap();
        let second = a.run_agent(AgentRole::SolutionProposer, "s", &ctx).unwrap();
        assert_eq!(first, "ANALYSIS: a");
        assert_eq!(first, second);
    }

    #[test]
    fn config_file_with_template_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cc.txt"), "custom checker").unwrap();
        std::fs::write(
            dir.path().join("agents.json"),
            r#"{"proposer": {"model": "gpt"}, "CODE_CHECKER": {"model": "small", "template_path": "cc.txt", "temperature": 0.2}}"#,
        )
        .unwrap();
        let pool = AgentPool::load(dir.path().join("agents.json")).unwrap();
        let cc = pool.get(AgentRole::CodeChecker).unwrap();
        assert_eq!((cc.model.as_str(), cc.system_prompt.as_str(), cc.temperature), ("small", "custom checker", 0.2));
        assert_eq!(pool.get(AgentRole::SolutionProposer).unwrap().temperature, 0.7);
        assert!(pool.get(AgentRole::MetricRouter).is_none());
    }

    #[test]
    fn sections_well_formed() {
        let text = "Sure.\nANALYSIS:\n  The pool is EMPTY.  \nTHOUGHT:\n1. load\n2. answer\n\nACTION:\nHere is the code:\n```python\nx = 1\n\nemit_answer(str(x))\n```\ntrailing words";
        let p = parse_sections(text).unwrap();
        assert_eq!(p.analysis, "The pool is EMPTY.");
        assert_eq!(p.thought, "1. load\n2. answer");
        assert_eq!(p.action_code, "x = 1\n\nemit_answer(str(x))");
        let unfenced = parse_sections("ANALYSIS: a\nTHOUGHT: t\nACTION:\nprint(1)\n").unwrap();
        assert_eq!(unfenced.action_code, "print(1)");
    }

    #[test]
    fn sections_malformed() {
        assert_eq!(parse_sections("ANALYSIS: a\nTHOUGHT: t\n"), Err(MalformedProposal::Header("ACTION")));
        assert_eq!(parse_sections("THOUGHT: t\nANALYSIS: a\nACTION: c"), Err(MalformedProposal::Header("ANALYSIS")));
        assert_eq!(parse_sections("ANALYSIS: a\nACTION: c\nTHOUGHT: t"), Err(MalformedProposal::Header("THOUGHT")));
        assert_eq!(parse_sections(""), Err(MalformedProposal::Header("ANALYSIS")));
        assert_eq!(
            parse_sections("ANALYSIS:\nTHOUGHT: t\nACTION: c"),
            Err(MalformedProposal::EmptySection("ANALYSIS"))
        );
        assert_eq!(
            parse_sections("ANALYSIS: a\nTHOUGHT: t\nACTION:\n```python\n```"),
            Err(MalformedProposal::EmptySection("ACTION"))
        );
    }

    #[test]
    fn composed_proposal_takes_each_agents_sections() {
        let proposer = "ANALYSIS: a\nTHOUGHT: t\nACTION:\nignored()";
        let engineer = "Sure!\nACTION:\n```python\nreal()\n```";
        let p = parse_sections(&compose_proposal(proposer, engineer)).unwrap();
        assert_eq!((p.analysis.as_str(), p.thought.as_str(), p.action_code.as_str()), ("a", "t", "real()"));
        let missing = parse_sections(&compose_proposal(proposer, "real()"));
        assert_eq!(missing, Err(MalformedProposal::Header("ACTION")));
    }

    #[test]
    fn decisions() {
        let d = parse_decision(AgentRole::CodeChecker, "...looks correct.\nDECISION: ACCEPT");
        assert_eq!((d.verdict, d.feedback.as_str()), (Verdict::Accept, "...looks correct."));
        let d = parse_decision(AgentRole::CodeChecker, "DECISION: reject\nmissing bounds check");
        assert_eq!((d.verdict, d.feedback.as_str()), (Verdict::Reject, "missing bounds check"));
        let d = parse_decision(AgentRole::RequirementChecker, "great job");
        assert_eq!((d.verdict, d.feedback.as_str(), d.malformed), (Verdict::Reject, UNPARSEABLE_VERDICT, true));
        let d = parse_decision(AgentRole::CodeChecker, "DECISION: ACCEPT\nwait, no\nDECISION: REJECT");
        assert_eq!(d.verdict, Verdict::Reject);
        assert_eq!(d.feedback, "DECISION: ACCEPT\nwait, no");
        let d = parse_decision(AgentRole::CodeChecker, "  decision:   Reject  ");
        assert_eq!(d.feedback, EMPTY_REJECT_FEEDBACK);
        assert_eq!(parse_decision(AgentRole::CodeChecker, "DECISION: ACCEPT maybe").verdict, Verdict::Reject);
    }

    #[test]
    fn repetition_and_metric_replies() {
        let ids = ["sol-001", "sol-002"];
        assert_eq!(
            parse_repetition("same logic\nDUPLICATE: sol-002", &ids),
            RepetitionVerdict::Duplicate("sol-002".into())
        );
        assert_eq!(parse_repetition("UNIQUE", &ids), RepetitionVerdict::Unique);
        assert_eq!(parse_repetition("DUPLICATE: sol-009", &ids), RepetitionVerdict::Unparseable);
        assert_eq!(parse_repetition("no idea", &ids), RepetitionVerdict::Unparseable);
        assert_eq!(
            parse_metric("Choices are lettered.\nMETRIC: MULTIPLE_CHOICE_ACCURACY"),
            Some(("MULTIPLE_CHOICE_ACCURACY".into(), "Choices are lettered.".into()))
        );
        assert_eq!(parse_metric("I like BLEU"), None);
    }

    fn body() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-zA-Z0-9 _().,=+*/'\"#-]{1,30}", 1..5).prop_map(|lines| {
            let joined = lines.join("\n");
            if joined.trim().is_empty() {
                "x".into()
            } else {
                joined.trim().to_owned()
            }
        })
    }

    proptest! {
        #[test]
        fn sections_round_trip(analysis in body(), thought in body(), code in body()) {
            let p = ProposalSections { analysis, thought, action_code: code };
            prop_assert_eq!(parse_sections(&render_sections(&p)).unwrap(), p);
        }

        #[test]
        fn decision_parse_is_total(text in "\\PC{0,200}") {
            let d = parse_decision(AgentRole::CodeChecker, &text);
            prop_assert!(d.verdict == Verdict::Accept || !d.feedback.is_empty());
        }
    }
}
