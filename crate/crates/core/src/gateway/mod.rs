//! Uniform chat-completion access over interchangeable backends.
//!
//! Every call goes through a [`Gateway`], which validates the request, calls
//! its [`ChatBackend`] and appends the usage to a shared [`UsageLedger`].
//! Backends:
//! - [`HttpBackend`]: chat-completions wire protocol with retries
//! - [`ScriptedBackend`] / [`FnBackend`]: canned or computed replies for tests and demos
//! - [`RecordingBackend`] / [`ReplayBackend`]: JSONL transcripts for deterministic reruns

mod http;
mod ledger;
mod replay;
mod scripted;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::MessageSequence;

pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub(crate) use ledger::decimal_number;
pub use ledger::{
    amortized_routing_cost, cost_of, parse_ledger_jsonl, EntryKind, LedgerEntry, Price, PriceTable, UsageLedger,
};
pub use replay::{
    canonical_request_hash, read_transcript, RecordingBackend, ReplayBackend, TranscriptRecord, TranscriptWriter,
};
pub use scripted::{estimate_usage, FnBackend, Script, ScriptedBackend};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("backend rejected request with HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no recorded response for request {digest} (tag `{tag}`)")]
    ReplayMiss { digest: String, tag: String },
    #[error("replay session `{session}` resumed after session `{current}` started; interleaved sessions cannot share one transcript")]
    ReplayInterleaved { session: String, current: String },
    #[error("no scripted response for tag `{0}`")]
    ScriptMissing(String),
    #[error("model `{0}` missing from price table")]
    UnknownModel(String),
    #[error("amortization over zero instances")]
    DivisionByZero,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("missing credentials: environment variable `{0}` is not set")]
    MissingCredentials(String),
    #[error("transcript I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub backend_model: String,
    pub messages: MessageSequence,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// `<agent role>:<session id>`; keys scripted replies, transcripts and the ledger.
    pub tag: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Role part of the tag.
    pub fn role_key(&self) -> &str {
        self.tag.split(':').next().unwrap_or(&self.tag)
    }

    /// Session part of the tag, if the tag has one.
    pub fn session_key(&self) -> Option<&str> {
        self.tag.split_once(':').map(|(_, s)| s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_s: f64,
    pub backend_id: String,
    /// Output hit the token limit.
    #[serde(default)]
    pub truncated: bool,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    ledger: Arc<UsageLedger>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, ledger: Arc<UsageLedger>) -> Self {
        Self { backend, ledger }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let response = self.backend.complete(request)?;
        if response.truncated {
            tracing::warn!(tag = %request.tag, "response truncated at max_output_tokens");
        }
        self.ledger.record_chat(&request.tag, &request.backend_model, response.usage, response.latency_s)?;
        Ok(response)
    }
}
