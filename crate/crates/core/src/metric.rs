//! Metric selection and scoring.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{parse_metric, AgentError, AgentRole, Agents};
use crate::gateway::ChatRequest;
use crate::message::ChatMessage;
use crate::model::{Instance, ModelError, TaskSpec};
use crate::prompt::render_template;

pub const EXACT_MATCH: &str = "EXACT_MATCH";
pub const MULTIPLE_CHOICE_ACCURACY: &str = "MULTIPLE_CHOICE_ACCURACY";
pub const NUMERIC_TOLERANCE: &str = "NUMERIC_TOLERANCE";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{predictions} predictions for {references} references")]
    ShapeMismatch { predictions: usize, references: usize },
    #[error("nothing to score")]
    Empty,
    #[error("metric `{0}` is not in the metric pool")]
    UnknownMetric(String),
    #[error("invalid metric card `{name}`: {reason}")]
    InvalidCard { name: String, reason: String },
    #[error("metric routing needs at least one labeled sample with a prediction")]
    NoSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCard {
    pub name: String,
    pub use_cases: String,
    pub input_args: String,
    pub return_args: String,
    pub example: String,
}

impl MetricCard {
    fn validate(&self) -> Result<(), MetricError> {
        let fields = [&self.name, &self.use_cases, &self.input_args, &self.return_args, &self.example];
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(MetricError::InvalidCard { name: self.name.clone(), reason: "empty field".into() });
        }
        Ok(())
    }
}

pub fn builtin_cards() -> Vec<MetricCard> {
    let card = |name: &str, use_cases: &str, example: &str| MetricCard {
        name: name.into(),
        use_cases: use_cases.into(),
        input_args: "predictions: list of answer strings; ground_truths: list of answer strings".into(),
        return_args: "score: accuracy in [0, 1]".into(),
        example: example.into(),
    };
    vec![
        card(EXACT_MATCH, "Free-form answers that must equal the reference after case, whitespace and punctuation normalization.", "prediction \"Paris\" vs ground truth \"paris.\" -> 1"),
        card(MULTIPLE_CHOICE_ACCURACY, "Questions with lettered choices such as (A)/(B)/(C)/(D); open-form predictions are mapped to a choice label before matching.", "prediction \"The answer is (B).\" vs ground truth \"(B)\" -> 1"),
        card(NUMERIC_TOLERANCE, "Numeric answers (counts, measurements) compared with a relative tolerance.", "prediction \"3.01\" vs ground truth \"3\" -> 1"),
    ]
}

/// Loads a metric pool file and checks names are unique.
pub fn load_metric_cards(path: impl AsRef<Path>) -> Result<Vec<MetricCard>, MetricError> {
    let cards: Vec<MetricCard> = crate::model::read_json(path.as_ref())?;
    let mut seen = std::collections::HashSet::new();
    for c in &cards {
        c.validate()?;
        if !seen.insert(c.name.clone()) {
            return Err(MetricError::InvalidCard { name: c.name.clone(), reason: "duplicate name".into() });
        }
    }
    Ok(cards)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub ground_truth: String,
    pub request_prompt: String,
}

impl Reference {
    pub fn of(instance: &Instance) -> Self {
        Self {
            ground_truth: instance.ground_truth.clone().unwrap_or_default(),
            request_prompt: instance.request_prompt.clone(),
        }
    }
}

/// Per-item score in `[0, 1]`; `None` is a failed execution.
pub trait Metric: Send + Sync {
    fn score(&self, prediction: Option<&str>, reference: &Reference) -> f64;
}

/// Lowercase, punctuation removed, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl Metric for ExactMatch {
    fn score(&self, prediction: Option<&str>, reference: &Reference) -> f64 {
        match prediction {
            Some(p) if normalize_answer(p) == normalize_answer(&reference.ground_truth) => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

static CHOICE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Z])\)\s*([^\n(]*)").expect("choice regex"));

/// Lettered choices `(X) text` in a request prompt.
pub fn parse_choices(request_prompt: &str) -> Vec<Choice> {
    let mut out: Vec<Choice> = Vec::new();
    for c in CHOICE_RE.captures_iter(request_prompt) {
        let label = c[1].to_owned();
        if out.iter().all(|o| o.label != label) {
            let text = c[2].trim().trim_end_matches([',', ';', '.', '?']).trim().to_owned();
            out.push(Choice { label, text });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mapped {
    Label(String),
    Unmapped,
}

static PAREN_LABEL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Za-z])\)").expect("label regex"));
static CLOSE_LABEL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|[\s:])([A-Z])\)").expect("label regex"));
static ANSWER_IS_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:answer|option|choice)\s*(?i:is|:)?\s*:?\s*\(?([A-Z])(?:\)|[\s.,;!]|$)").expect("label regex")
});
static LONE_LETTER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").expect("letter regex"));

fn contains_phrase(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// Rule-based mapping of an open-form prediction onto `choices`.
///
/// Order: explicit label (`(B)`, `B)`, `answer is B`, or a bare letter);
/// then exact choice text; then a unique choice text contained in the
/// prediction, or else a unique choice containing the prediction.
/// Conflicting or absent evidence is `Unmapped`.
pub fn map_open_form(prediction: &str, choices: &[Choice]) -> Mapped {
    let known = |l: &str| choices.iter().find(|c| c.label.eq_ignore_ascii_case(l)).map(|c| c.label.clone());
    let mut labels: Vec<String> = Vec::new();
    let mut add = |l: Option<String>| {
        if let Some(l) = l {
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
    };
    for c in PAREN_LABEL_RE.captures_iter(prediction) {
        add(known(&c[1]));
    }
    for c in CLOSE_LABEL_RE.captures_iter(prediction) {
        add(known(&c[1]));
    }
    for c in ANSWER_IS_RE.captures_iter(prediction) {
        add(known(&c[1]));
    }
    let norm = normalize_answer(prediction);
    if norm.chars().count() == 1 {
        add(known(&norm));
    }
    match labels.len() {
        1 => return Mapped::Label(labels.remove(0)),
        n if n > 1 => return Mapped::Unmapped,
        _ => {}
    }
    let lone: Vec<&str> = LONE_LETTER_RE
        .captures_iter(prediction)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .filter(|l| known(l).is_some())
        .collect();
    if lone.iter().any(|l| *l != lone[0]) {
        return Mapped::Unmapped;
    }

    if let Some(c) = choices.iter().find(|c| !c.text.is_empty() && normalize_answer(&c.text) == norm) {
        return Mapped::Label(c.label.clone());
    }
    let mut hits: Vec<&Choice> =
        choices.iter().filter(|c| contains_phrase(&norm, &normalize_answer(&c.text))).collect();
    if hits.is_empty() {
        hits = choices.iter().filter(|c| contains_phrase(&normalize_answer(&c.text), &norm)).collect();
    }
    match hits.as_slice() {
        [one] => Mapped::Label(one.label.clone()),
        _ => Mapped::Unmapped,
    }
}

/// Maps a prediction to a choice label.
pub trait AnswerMapper: Send + Sync {
    fn map(&self, prediction: &str, choices: &[Choice]) -> Mapped;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleMapper;

impl AnswerMapper for RuleMapper {
    fn map(&self, prediction: &str, choices: &[Choice]) -> Mapped {
        map_open_form(prediction, choices)
    }
}

static MAPPED_LABEL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*LABEL:\s*\(?([A-Za-z])\)?\s*$").expect("mapped label regex"));

/// Asks the metric-router model to do the mapping; the rule mapper is the fallback.
pub struct AgentMapper {
    pub agents: Agents,
    pub tag: String,
}

impl AnswerMapper for AgentMapper {
    fn map(&self, prediction: &str, choices: &[Choice]) -> Mapped {
        let Some(settings) = self.agents.pool.get(AgentRole::MetricRouter) else {
            return map_open_form(prediction, choices);
        };
        let listing: String = choices.iter().map(|c| format!("({}) {}\n", c.label, c.text)).collect();
        let request = ChatRequest {
            backend_model: settings.model.clone(),
            messages: vec![
                ChatMessage::system(include_str!("../../../prompts/agents/answer_mapper.txt")),
                ChatMessage::user(format!("CHOICES:\n{listing}\nPREDICTION:\n{prediction}")),
            ],
            temperature: 0.0,
            max_output_tokens: 64,
            tag: format!("answer_mapper:{}", self.tag),
        };
        match self.agents.gateway.complete(&request) {
            Ok(resp) => {
                let label =
                    resp.text.lines().rev().find_map(|l| MAPPED_LABEL_RE.captures(l).map(|c| c[1].to_uppercase()));
                match label.and_then(|l| choices.iter().find(|c| c.label.eq_ignore_ascii_case(&l))) {
                    Some(c) => Mapped::Label(c.label.clone()),
                    None => Mapped::Unmapped,
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "answer mapper call failed, using rule mapping");
                map_open_form(prediction, choices)
            }
        }
    }
}

pub struct MultipleChoiceAccuracy {
    pub mapper: Arc<dyn AnswerMapper>,
}

impl Default for MultipleChoiceAccuracy {
    fn default() -> Self {
        Self { mapper: Arc::new(RuleMapper) }
    }
}

impl Metric for MultipleChoiceAccuracy {
    fn score(&self, prediction: Option<&str>, reference: &Reference) -> f64 {
        let Some(prediction) = prediction else { return 0.0 };
        let choices = parse_choices(&reference.request_prompt);
        if choices.len() < 2 {
            return ExactMatch.score(Some(prediction), reference);
        }
        let truth = map_open_form(&reference.ground_truth, &choices);
        match (self.mapper.map(prediction, &choices), truth) {
            (Mapped::Label(p), Mapped::Label(t)) if p == t => 1.0,
            _ => 0.0,
        }
    }
}

static NUMBER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("number regex"));

pub fn first_number(text: &str) -> Option<f64> {
    NUMBER_RE.find(&text.replace(',', "")).and_then(|m| m.as_str().parse().ok())
}

/// `|pred - gt| <= eps * max(|gt|, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct NumericTolerance {
    pub relative_eps: f64,
}

impl Default for NumericTolerance {
    fn default() -> Self {
        Self { relative_eps: 0.01 }
    }
}

impl Metric for NumericTolerance {
    fn score(&self, prediction: Option<&str>, reference: &Reference) -> f64 {
        match (prediction.and_then(first_number), first_number(&reference.ground_truth)) {
            (Some(p), Some(g)) if (p - g).abs() <= self.relative_eps * g.abs().max(1.0) => 1.0,
            _ => 0.0,
        }
    }
}

/// Mean per-item score.
pub fn evaluate(
    metric: &dyn Metric,
    predictions: &[Option<String>],
    references: &[Reference],
) -> Result<f64, MetricError> {
    if predictions.len() != references.len() {
        return Err(MetricError::ShapeMismatch { predictions: predictions.len(), references: references.len() });
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 =
        predictions.iter().zip(references).map(|(p, r)| metric.score(p.as_deref(), r).clamp(0.0, 1.0)).sum();
    Ok(total / predictions.len() as f64)
}

/// Named scoring functions; the three builtins plus anything registered.
#[derive(Clone)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, Arc<dyn Metric>>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl MetricRegistry {
    pub fn with_builtins() -> Self {
        let mut metrics: BTreeMap<String, Arc<dyn Metric>> = BTreeMap::new();
        metrics.insert(EXACT_MATCH.into(), Arc::new(ExactMatch));
        metrics.insert(MULTIPLE_CHOICE_ACCURACY.into(), Arc::new(MultipleChoiceAccuracy::default()));
        metrics.insert(NUMERIC_TOLERANCE.into(), Arc::new(NumericTolerance::default()));
        Self { metrics }
    }

    pub fn register(&mut self, name: impl Into<String>, metric: Arc<dyn Metric>) {
        self.metrics.insert(name.into(), metric);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Metric>, MetricError> {
        self.metrics.get(name).cloned().ok_or_else(|| MetricError::UnknownMetric(name.to_owned()))
    }

    pub fn names(&self) -> Vec<String> {
        self.metrics.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChosenBy {
    Agent,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricChoice {
    pub metric_name: String,
    pub rationale: String,
    pub chosen_by: ChosenBy,
}

/// A labeled instance with a candidate solution's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub instance: Instance,
    pub prediction: String,
}

fn render_metric_input(task: &TaskSpec, cards: &[MetricCard], samples: &[Sample]) -> String {
    let mut out = String::from("METRIC DEFINITIONS:\n");
    for c in cards {
        out.push_str(&format!(
            "### METRIC: {}\nUse cases: {}\nInput: {}\nReturns: {}\nExample: {}\n\n",
            c.name, c.use_cases, c.input_args, c.return_args, c.example
        ));
    }
    out.push_str(&format!("TASK INSTRUCTIONS:\n{}\n\nEXAMPLES:\n", task.description.trim()));
    for (k, s) in samples.iter().enumerate() {
        out.push_str(&format!(
            "--- Example {} (id: {}) ---\nRequest: {}\nGround truth: {}\nPrediction: {}\n",
            k + 1,
            s.instance.id,
            s.instance.request_prompt.trim(),
            s.instance.ground_truth.as_deref().unwrap_or(""),
            s.prediction
        ));
    }
    out
}

/// Picks the evaluation metric. A user-supplied name skips the agent entirely.
pub fn route_metric(
    agents: &Agents,
    task: &TaskSpec,
    cards: &[MetricCard],
    registry: &MetricRegistry,
    samples: &[Sample],
    user_metric: Option<&str>,
) -> Result<MetricChoice, MetricError> {
    let usable: Vec<&MetricCard> = cards.iter().filter(|c| registry.get(&c.name).is_ok()).collect();
    let valid: Vec<String> = usable.iter().map(|c| c.name.clone()).collect();
    if let Some(name) = user_metric {
        registry.get(name)?;
        return Ok(MetricChoice {
            metric_name: name.to_owned(),
            rationale: "supplied by the user".into(),
            chosen_by: ChosenBy::User,
        });
    }
    if valid.is_empty() {
        return Err(MetricError::UnknownMetric("<empty metric pool>".into()));
    }
    let samples: Vec<Sample> = samples.iter().filter(|s| s.instance.is_labeled()).cloned().collect();
    if samples.is_empty() {
        return Err(MetricError::NoSamples);
    }
    let settings =
        agents.pool.get(AgentRole::MetricRouter).ok_or(AgentError::ConfigMissing(AgentRole::MetricRouter))?;
    let mut vars = BTreeMap::new();
    vars.insert("metric_names", valid.join(", "));
    let system = render_template(&settings.system_prompt, &vars).map_err(|e| AgentError::Config(e.to_string()))?;
    let owned: Vec<MetricCard> = usable.into_iter().cloned().collect();
    let mut messages =
        vec![ChatMessage::system(system), ChatMessage::user(render_metric_input(task, &owned, &samples))];
    let tag = format!("metric_router:{}-metric", task.task_id);
    for attempt in 0..2 {
        let request = ChatRequest {
            backend_model: settings.model.clone(),
            messages: messages.clone(),
            temperature: settings.temperature,
            max_output_tokens: settings.max_output_tokens,
            tag: tag.clone(),
        };
        let reply = agents.gateway.complete(&request).map_err(AgentError::from)?.text;
        match parse_metric(&reply) {
            Some((name, rationale)) if valid.contains(&name) => {
                return Ok(MetricChoice { metric_name: name, rationale, chosen_by: ChosenBy::Agent });
            }
            parsed => {
                let named = parsed.map(|(n, _)| n).unwrap_or_else(|| "<none>".into());
                tracing::warn!(attempt, metric = %named, "metric router named an unknown metric");
                messages.push(ChatMessage::text(crate::message::Role::Assistant, reply));
                messages.push(ChatMessage::user(format!(
                    "`{named}` is not a valid metric. Valid metric names: {}. Reply again, ending with METRIC: <name>.",
                    valid.join(", ")
                )));
            }
        }
    }
    tracing::warn!("metric routing failed twice, falling back to {EXACT_MATCH}");
    Ok(MetricChoice {
        metric_name: EXACT_MATCH.into(),
        rationale: "fallback: the metric router did not name a metric from the pool".into(),
        chosen_by: ChosenBy::Agent,
    })
}
