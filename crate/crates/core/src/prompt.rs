//! Router input assembly.
//!
//! The router prompt has five parts: model definitions, requirements and
//! in-context examples (task-agnostic, sent as the system message) followed
//! by the solution-pool view and the user specification (sent as the user
//! message together with the example images, in instance order). Every part
//! is wrapped in `<<<BEGIN NAME>>>` / `<<<END NAME>>>` sentinels so that
//! [`parse_router_prompt`] recovers the boundaries exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use thiserror::Error;

use crate::message::{mime_for_extension, ChatMessage, ContentPart, ImageData, MessageSequence, Role};
use crate::model::{split_examples, ModelCard, SolutionPool, TaskSpec};

pub const EMPTY_POOL_VIEW: &str = "EMPTY";
pub const INCONTEXT_EXAMPLE_COUNT: usize = 4;
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 400_000;

const DEFAULT_REQUIREMENTS: &str = include_str!("../../../prompts/requirements.txt");
const DEFAULT_INCONTEXT: &str = include_str!("../../../prompts/incontext_examples.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("model pool is empty")]
    EmptyModelPool,
    #[error("in-context examples must contain exactly {INCONTEXT_EXAMPLE_COUNT} example blocks, found {0}")]
    IncontextCount(usize),
    #[error("failed to load image {path} for instance `{instance_id}`: {source}")]
    ImageLoadFailed {
        instance_id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("section {0} contains a reserved sentinel marker")]
    SentinelCollision(&'static str),
    #[error("prompt has {chars} characters, limit is {limit}")]
    TooLong { chars: usize, limit: usize },
    #[error("template placeholder `{{{{{0}}}}}` has no value")]
    UnknownPlaceholder(String),
    #[error("section {0} not found in prompt")]
    MissingSection(&'static str),
    #[error("failed to read template {path}: {source}")]
    Template {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Substitutes `{{name}}` placeholders. Unknown placeholders are an error.
pub fn render_template(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let re = Regex::new(r"\{\{\s*([A-Za-z0-9_]+)\s*\}\}").expect("placeholder regex");
    let mut missing = None;
    let out = re.replace_all(template, |caps: &regex::Captures<'_>| match vars.get(&caps[1]) {
        Some(v) => v.clone(),
        None => {
            missing.get_or_insert_with(|| caps[1].to_owned());
            String::new()
        }
    });
    match missing {
        Some(name) => Err(PromptError::UnknownPlaceholder(name)),
        None => Ok(out.into_owned()),
    }
}

pub fn count_incontext_examples(text: &str) -> usize {
    Regex::new(r"(?m)^=== EXAMPLE \d+ ===\s*$").expect("example regex").find_iter(text).count()
}

/// Task-agnostic prompt parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub requirements: String,
    pub incontext_examples: String,
}

impl PromptTemplates {
    pub fn defaults() -> Self {
        Self { requirements: DEFAULT_REQUIREMENTS.to_owned(), incontext_examples: DEFAULT_INCONTEXT.to_owned() }
    }

    /// Reads `requirements.txt` and `incontext_examples.txt` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.as_ref().join(name);
            fs::read_to_string(&path).map_err(|source| PromptError::Template { path, source })
        };
        let templates =
            Self { requirements: read("requirements.txt")?, incontext_examples: read("incontext_examples.txt")? };
        templates.check()?;
        Ok(templates)
    }

    pub fn check(&self) -> Result<(), PromptError> {
        match count_incontext_examples(&self.incontext_examples) {
            INCONTEXT_EXAMPLE_COUNT => Ok(()),
            n => Err(PromptError::IncontextCount(n)),
        }
    }
}

fn render_args(out: &mut String, title: &str, args: &[crate::model::ArgSpec]) {
    out.push_str(title);
    out.push('\n');
    for a in args {
        out.push_str(&format!("  - {} ({}): {}\n", a.name, a.semantic_type, a.description));
    }
}

pub fn render_model_definitions(cards: &[ModelCard]) -> Result<String, PromptError> {
    if cards.is_empty() {
        return Err(PromptError::EmptyModelPool);
    }
    let mut sorted: Vec<&ModelCard> = cards.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let blocks: Vec<String> = sorted
        .into_iter()
        .map(|card| {
            let mut b = format!("### MODEL: {}\n", card.name);
            b.push_str(&format!("Functionality: {}\n", card.functionality.trim()));
            render_args(&mut b, "Input arguments:", &card.input_args);
            render_args(&mut b, "Return arguments:", &card.return_args);
            b.push_str(&format!("Example usage:\n{}\n", card.example_usage.trim_end()));
            b
        })
        .collect();
    Ok(blocks.join("\n"))
}

/// Code-only view of the pool; `EMPTY` when there is nothing to show.
pub fn render_solution_pool(pool: &SolutionPool) -> String {
    if pool.is_empty() {
        return EMPTY_POOL_VIEW.to_owned();
    }
    pool.solutions
        .iter()
        .enumerate()
        .map(|(k, s)| format!("### SOLUTION {} (id: {})\n```python\n{}\n```\n", k + 1, s.id, s.action_code.trim_end()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRef {
    pub instance_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSpec {
    pub text: String,
    pub images: Vec<ImageRef>,
}

pub fn render_user_spec(task: &TaskSpec) -> UserSpec {
    let (examples, _) = split_examples(task);
    let mut text = format!("TASK DEFINITION:\n{}\n\nUSER CONSTRAINTS:\n", task.description.trim());
    if task.constraints.is_empty() {
        text.push_str("none\n");
    } else {
        for c in &task.constraints {
            text.push_str(&format!("- {}\n", c.describe()));
        }
    }
    text.push_str("\nEXAMPLE INSTANCES:\n");
    let mut images = Vec::new();
    let mut next_image = 1;
    for (k, inst) in examples.iter().enumerate() {
        text.push_str(&format!("--- Example {} (id: {}) ---\n", k + 1, inst.id));
        if !inst.images.is_empty() {
            let labels: Vec<String> = (0..inst.images.len()).map(|j| format!("image #{}", next_image + j)).collect();
            next_image += inst.images.len();
            text.push_str(&format!("Images: {} (attached below, in order)\n", labels.join(", ")));
        }
        text.push_str(&format!("Request: {}\n", inst.request_prompt.trim()));
        text.push_str(&format!("Answer: {}\n", inst.ground_truth.as_deref().unwrap_or("").trim()));
        images
            .extend(inst.images.iter().map(|p| ImageRef { instance_id: inst.id.clone(), path: task.resolve_image(p) }));
    }
    UserSpec { text, images }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub model_definitions: String,
    pub requirements: String,
    pub incontext_examples: String,
    pub solution_pool_view: String,
    pub user_spec: UserSpec,
}

impl PromptBundle {
    pub fn build(
        task: &TaskSpec,
        pool: &SolutionPool,
        cards: &[ModelCard],
        templates: &PromptTemplates,
    ) -> Result<Self, PromptError> {
        templates.check()?;
        Ok(Self {
            model_definitions: render_model_definitions(cards)?,
            requirements: templates.requirements.trim_end().to_owned(),
            incontext_examples: templates.incontext_examples.trim_end().to_owned(),
            solution_pool_view: render_solution_pool(pool),
            user_spec: render_user_spec(task),
        })
    }
}

const SECTIONS: [&str; 5] =
    ["MODEL_DEFINITIONS", "REQUIREMENTS", "INCONTEXT_EXAMPLES", "SOLUTION_POOL", "USER_SPECIFICATION"];

fn wrap(name: &'static str, body: &str) -> Result<String, PromptError> {
    if body.contains("<<<BEGIN ") || body.contains("<<<END ") {
        return Err(PromptError::SentinelCollision(name));
    }
    Ok(format!("<<<BEGIN {name}>>>\n{body}\n<<<END {name}>>>"))
}

pub fn assemble_router_prompt(bundle: &PromptBundle) -> Result<MessageSequence, PromptError> {
    assemble_router_prompt_with_limit(bundle, DEFAULT_MAX_PROMPT_CHARS)
}

pub fn assemble_router_prompt_with_limit(bundle: &PromptBundle, limit: usize) -> Result<MessageSequence, PromptError> {
    let system = [
        wrap(SECTIONS[0], &bundle.model_definitions)?,
        wrap(SECTIONS[1], &bundle.requirements)?,
        wrap(SECTIONS[2], &bundle.incontext_examples)?,
    ]
    .join("\n\n");
    let user =
        [wrap(SECTIONS[3], &bundle.solution_pool_view)?, wrap(SECTIONS[4], &bundle.user_spec.text)?].join("\n\n");
    let chars = system.chars().count() + user.chars().count();
    if chars > limit {
        return Err(PromptError::TooLong { chars, limit });
    }

    let mut parts = vec![ContentPart::Text(user)];
    for image in &bundle.user_spec.images {
        let bytes = fs::read(&image.path).map_err(|source| PromptError::ImageLoadFailed {
            instance_id: image.instance_id.clone(),
            path: image.path.clone(),
            source,
        })?;
        let ext = image.path.extension().and_then(|e| e.to_str()).unwrap_or("");
        parts.push(ContentPart::Image(ImageData { mime: mime_for_extension(ext).to_owned(), bytes }));
    }
    Ok(vec![ChatMessage::system(system), ChatMessage { role: Role::User, parts }])
}

/// Text sections recovered from an assembled router prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterSections {
    pub model_definitions: String,
    pub requirements: String,
    pub incontext_examples: String,
    pub solution_pool_view: String,
    pub user_spec: String,
}

pub fn parse_router_prompt(messages: &[ChatMessage]) -> Result<RouterSections, PromptError> {
    let all: String = messages.iter().map(ChatMessage::joined_text).collect::<Vec<_>>().join("\n");
    let section = |name: &'static str| -> Result<String, PromptError> {
        let begin = format!("<<<BEGIN {name}>>>\n");
        let end = format!("\n<<<END {name}>>>");
        let start = all.find(&begin).ok_or(PromptError::MissingSection(name))? + begin.len();
        let len = all[start..].find(&end).ok_or(PromptError::MissingSection(name))?;
        Ok(all[start..start + len].to_owned())
    };
    Ok(RouterSections {
        model_definitions: section(SECTIONS[0])?,
        requirements: section(SECTIONS[1])?,
        incontext_examples: section(SECTIONS[2])?,
        solution_pool_view: section(SECTIONS[3])?,
        user_spec: section(SECTIONS[4])?,
    })
}
