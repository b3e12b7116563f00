//! Task, instance, solution and pool domain types.
//!
//! A [`TaskSpec`] holds `N` instances of which the first `n` (`example_count`)
//! carry ground truth and are shown to the solution router. Admitted programs
//! accumulate in an append-only [`SolutionPool`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("solution id `{0}` already present in pool")]
    IdCollision(String),
    #[error("invalid model card `{name}`: {reason}")]
    InvalidCard { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    #[serde(default)]
    pub images: Vec<PathBuf>,
    pub request_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl Instance {
    pub fn is_labeled(&self) -> bool {
        self.ground_truth.as_deref().is_some_and(|gt| !gt.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstraintKind {
    /// Seconds.
    MaxLatencyPerInstance,
    /// USD.
    MaxMonetaryCostPerInstance,
    /// Fraction in (0, 1].
    MinAccuracy,
    ForbiddenModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstraintValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for ConstraintValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintValue::Number(v) => write!(f, "{v}"),
            ConstraintValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub value: ConstraintValue,
}

impl Constraint {
    /// Human-readable form used in the user-specification prompt section.
    pub fn describe(&self) -> String {
        match self.kind {
            ConstraintKind::MaxLatencyPerInstance => {
                format!("maximum latency per instance: {} s", self.value)
            }
            ConstraintKind::MaxMonetaryCostPerInstance => {
                format!("maximum monetary cost per instance: {} USD", self.value)
            }
            ConstraintKind::MinAccuracy => format!("minimum accuracy: {}", self.value),
            ConstraintKind::ForbiddenModel => format!("do not use model: {}", self.value),
        }
    }

    fn check(&self) -> Option<String> {
        match (self.kind, &self.value) {
            (ConstraintKind::ForbiddenModel, ConstraintValue::Text(s)) if !s.trim().is_empty() => None,
            (ConstraintKind::ForbiddenModel, _) => Some("FORBIDDEN_MODEL requires a non-empty model name".into()),
            (_, ConstraintValue::Text(_)) => Some(format!("{:?} requires a number", self.kind)),
            (ConstraintKind::MinAccuracy, ConstraintValue::Number(v)) => {
                (!(*v > 0.0 && *v <= 1.0)).then(|| format!("MIN_ACCURACY {v} outside (0, 1]"))
            }
            (_, ConstraintValue::Number(v)) => {
                (!(*v > 0.0 && v.is_finite())).then(|| format!("{:?} must be > 0, got {v}", self.kind))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
    pub example_count: usize,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    pub instances: Vec<Instance>,
    /// Directory relative image paths are resolved against; set by [`TaskSpec::load`].
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl TaskSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let mut spec: TaskSpec = read_json(path)?;
        spec.base_dir = path.parent().map(Path::to_path_buf);
        Ok(spec)
    }

    pub fn from_json_str(text: &str, base_dir: Option<PathBuf>) -> Result<Self, serde_json::Error> {
        let mut spec: TaskSpec = serde_json::from_str(text)?;
        spec.base_dir = base_dir;
        Ok(spec)
    }

    pub fn resolve_image(&self, image: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if image.is_relative() => base.join(image),
            _ => image.to_path_buf(),
        }
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.is_labeled())
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

/// Upper bound on the example count for a task of `total` instances.
pub fn max_example_count(total: usize) -> usize {
    4.max(total.div_ceil(10))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    FileMissing,
    SplitInvalid,
    TooManyExamples,
    MissingGroundTruth,
    DuplicateId,
    EmptyField,
    ConstraintInvalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn kinds(&self) -> Vec<ViolationKind> {
        self.violations.iter().map(|v| v.kind).collect()
    }

    fn push(&mut self, kind: ViolationKind, instance_id: Option<&str>, field: &str, message: String) {
        self.violations.push(Violation {
            kind,
            instance_id: instance_id.map(str::to_owned),
            field: field.to_owned(),
            message,
        });
    }
}

pub fn validate_task_spec(spec: &TaskSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let total = spec.instances.len();
    let n = spec.example_count;

    if spec.task_id.trim().is_empty() {
        report.push(ViolationKind::EmptyField, None, "task_id", "task_id is empty".into());
    }
    if spec.description.trim().is_empty() {
        report.push(ViolationKind::EmptyField, None, "description", "description is empty".into());
    }

    if n == 0 || n >= total {
        report.push(
            ViolationKind::SplitInvalid,
            None,
            "example_count",
            format!("example_count must satisfy 1 <= n < N (n={n}, N={total})"),
        );
    } else if n > max_example_count(total) {
        report.push(
            ViolationKind::TooManyExamples,
            None,
            "example_count",
            format!("example_count {n} exceeds max(4, ceil(N/10)) = {} for N={total}", max_example_count(total)),
        );
    }

    for (idx, c) in spec.constraints.iter().enumerate() {
        if let Some(msg) = c.check() {
            report.push(ViolationKind::ConstraintInvalid, None, &format!("constraints[{idx}]"), msg);
        }
    }

    let mut seen = HashSet::new();
    for (idx, inst) in spec.instances.iter().enumerate() {
        if !seen.insert(inst.id.as_str()) {
            report.push(
                ViolationKind::DuplicateId,
                Some(&inst.id),
                "id",
                format!("instance id `{}` appears more than once", inst.id),
            );
        }
        if inst.id.trim().is_empty() {
            report.push(ViolationKind::EmptyField, None, &format!("instances[{idx}].id"), "empty id".into());
        }
        if inst.request_prompt.trim().is_empty() {
            report.push(ViolationKind::EmptyField, Some(&inst.id), "request_prompt", "request_prompt is empty".into());
        }
        if idx < n && idx < total && !inst.is_labeled() {
            report.push(
                ViolationKind::MissingGroundTruth,
                Some(&inst.id),
                "ground_truth",
                format!("example instance #{} has no ground truth", idx + 1),
            );
        }
        for (k, image) in inst.images.iter().enumerate() {
            let resolved = spec.resolve_image(image);
            if let Err(err) = fs::File::open(&resolved) {
                report.push(
                    ViolationKind::FileMissing,
                    Some(&inst.id),
                    &format!("images[{k}]"),
                    format!("{}: {err}", resolved.display()),
                );
            }
        }
    }
    report
}

/// Splits a valid spec into its leading labeled examples and the remainder.
pub fn split_examples(spec: &TaskSpec) -> (&[Instance], &[Instance]) {
    let n = spec.example_count.min(spec.instances.len());
    spec.instances.split_at(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub session_id: String,
    /// 1-based iteration of the session that produced the code.
    pub iteration_index: usize,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub id: String,
    pub analysis: String,
    pub thought: String,
    pub action_code: String,
    pub declared_models: Vec<String>,
    pub provenance: Provenance,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Admission {
    Admitted { id: String },
    Rejected { candidate_id: String, duplicate_of: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionPool {
    pub task_id: String,
    pub solutions: Vec<Solution>,
}

impl SolutionPool {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self { task_id: task_id.into(), solutions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.solutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Solution> {
        self.solutions.iter().find(|s| s.id == id)
    }

    /// Returns the next pool value. A candidate flagged as a duplicate leaves
    /// the pool unchanged and yields an [`Admission::Rejected`] record.
    pub fn admit(
        &self,
        candidate: Solution,
        duplicate_of: Option<&str>,
    ) -> Result<(SolutionPool, Admission), ModelError> {
        if self.get(&candidate.id).is_some() {
            return Err(ModelError::IdCollision(candidate.id));
        }
        match duplicate_of {
            Some(dup) => {
                tracing::info!(candidate = %candidate.id, duplicate_of = dup, "solution rejected as duplicate");
                Ok((self.clone(), Admission::Rejected { candidate_id: candidate.id, duplicate_of: dup.to_owned() }))
            }
            None => {
                let id = candidate.id.clone();
                let mut next = self.clone();
                next.solutions.push(candidate);
                Ok((next, Admission::Admitted { id }))
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        read_json(path.as_ref())
    }

    pub fn to_json(&self) -> String {
        to_json_pretty(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub semantic_type: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CostClass {
    Local,
    RemoteApi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub name: String,
    pub functionality: String,
    pub input_args: Vec<ArgSpec>,
    pub return_args: Vec<ArgSpec>,
    pub example_usage: String,
    pub cost_class: CostClass,
}

impl ModelCard {
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::InvalidCard { name: self.name.clone(), reason: reason.into() };
        if self.name.trim().is_empty() {
            return Err(invalid("empty name"));
        }
        if self.functionality.trim().is_empty() {
            return Err(invalid("empty functionality"));
        }
        if self.input_args.is_empty() {
            return Err(invalid("no input arguments"));
        }
        if self.return_args.is_empty() {
            return Err(invalid("no return arguments"));
        }
        if self.example_usage.trim().is_empty() {
            return Err(invalid("empty example usage"));
        }
        Ok(())
    }
}

/// Loads and validates a model pool file (JSON list of cards).
pub fn load_model_cards(path: impl AsRef<Path>) -> Result<Vec<ModelCard>, ModelError> {
    let cards: Vec<ModelCard> = read_json(path.as_ref())?;
    let mut names = HashSet::new();
    for card in &cards {
        card.validate()?;
        if !names.insert(card.name.clone()) {
            return Err(ModelError::InvalidCard { name: card.name.clone(), reason: "duplicate name".into() });
        }
    }
    Ok(cards)
}

/// Names of pool models referenced as quoted string literals in `code`.
pub fn declared_models(code: &str, cards: &[ModelCard]) -> Vec<String> {
    let mut names: Vec<String> = cards
        .iter()
        .filter(|c| code.contains(&format!("\"{}\"", c.name)) || code.contains(&format!("'{}'", c.name)))
        .map(|c| c.name.clone())
        .collect();
    names.sort();
    names
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| ModelError::Parse { path: path.to_path_buf(), source })
}

/// Pretty JSON with a trailing newline; the on-disk form for every JSON artifact.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}
