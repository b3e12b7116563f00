use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage};
use crate::message::ContentPart;

/// Deterministic token estimate: four bytes per token, 85 per image.
pub fn estimate_usage(request: &ChatRequest, reply: &str) -> Usage {
    let prompt: u64 = request
        .messages
        .iter()
        .flat_map(|m| &m.parts)
        .map(|p| match p {
            ContentPart::Text(t) => (t.len() as u64).div_ceil(4),
            ContentPart::Image(_) => 85,
        })
        .sum();
    Usage { prompt_tokens: prompt, completion_tokens: (reply.len() as u64).div_ceil(4) }
}

/// Replies for one tag key. Without `cycle`, the last reply repeats once the list is exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Script {
    Single(String),
    Sequence(Vec<String>),
    Full {
        responses: Vec<String>,
        #[serde(default)]
        cycle: bool,
    },
}

impl Script {
    fn reply(&self, call_index: usize) -> Option<&str> {
        let (list, cycle): (&[String], bool) = match self {
            Script::Single(s) => return Some(s),
            Script::Sequence(v) => (v, false),
            Script::Full { responses, cycle } => (responses, *cycle),
        };
        if list.is_empty() {
            return None;
        }
        let idx = if cycle { call_index % list.len() } else { call_index.min(list.len() - 1) };
        Some(&list[idx])
    }
}

/// Canned replies keyed by exact tag, falling back to the tag's role prefix.
pub struct ScriptedBackend {
    id: String,
    scripts: BTreeMap<String, Script>,
    calls: Mutex<HashMap<String, usize>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, scripts: BTreeMap<String, Script>) -> Self {
        Self { id: id.into(), scripts, calls: Mutex::new(HashMap::new()) }
    }

    pub fn from_pairs<'a>(id: &str, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::new(id, pairs.into_iter().map(|(k, v)| (k.to_owned(), Script::Single(v.to_owned()))).collect())
    }

    pub fn load(id: &str, path: impl AsRef<Path>) -> Result<Self, crate::model::ModelError> {
        Ok(Self::new(id, crate::model::read_json(path.as_ref())?))
    }

    /// Forget call counters so sequences restart.
    pub fn reset(&self) {
        self.calls.lock().expect("script lock").clear();
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = if self.scripts.contains_key(&request.tag) { request.tag.as_str() } else { request.role_key() };
        let script = self.scripts.get(key).ok_or_else(|| GatewayError::ScriptMissing(request.tag.clone()))?;
        let index = {
            let mut calls = self.calls.lock().expect("script lock");
            let slot = calls.entry(key.to_owned()).or_insert(0);
            let idx = *slot;
            *slot += 1;
            idx
        };
        let text = script.reply(index).ok_or_else(|| GatewayError::ScriptMissing(request.tag.clone()))?.to_owned();
        Ok(ChatResponse {
            usage: estimate_usage(request, &text),
            text,
            latency_s: 0.0,
            backend_id: self.id.clone(),
            truncated: false,
        })
    }
}

/// Replies computed from the request; used for randomized protocol tests.
pub struct FnBackend<F> {
    id: String,
    reply: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, reply: F) -> Self {
        Self { id: id.into(), reply }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let text = (self.reply)(request)?;
        Ok(ChatResponse {
            usage: estimate_usage(request, &text),
            text,
            latency_s: 0.0,
            backend_id: self.id.clone(),
            truncated: false,
        })
    }
}
