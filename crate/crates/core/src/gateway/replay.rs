//! JSONL transcripts: record live exchanges, replay them byte-for-byte.
//!
//! Requests are matched by a canonical SHA-256 over (role, text parts,
//! image-byte digests, tag). The i-th occurrence of a hash gets the i-th
//! recorded response with that hash.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::message::ContentPart;

pub fn canonical_request_hash(request: &ChatRequest) -> String {
    let mut h = Sha256::new();
    for message in &request.messages {
        h.update(b"M");
        h.update(message.role.as_str().as_bytes());
        for part in &message.parts {
            match part {
                ContentPart::Text(text) => {
                    h.update(b"T");
                    h.update((text.len() as u64).to_le_bytes());
                    h.update(text.as_bytes());
                }
                ContentPart::Image(img) => {
                    h.update(b"I");
                    h.update(Sha256::digest(&img.bytes));
                }
            }
        }
    }
    h.update(b"G");
    h.update((request.tag.len() as u64).to_le_bytes());
    h.update(request.tag.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub seq: u64,
    pub tag: String,
    pub request_hash: String,
    pub model: String,
    pub response: ChatResponse,
}

pub fn read_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptRecord>, GatewayError> {
    let file = File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| GatewayError::MalformedResponse(format!("transcript line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Serialized appender for transcript records.
pub struct TranscriptWriter {
    sink: Mutex<(u64, Box<dyn Write + Send>)>,
}

impl TranscriptWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self::from_writer(Box::new(file)))
    }

    pub fn from_writer(writer: Box<dyn Write + Send>) -> Self {
        Self { sink: Mutex::new((0, writer)) }
    }

    pub fn append(&self, request: &ChatRequest, response: &ChatResponse) -> Result<(), GatewayError> {
        let mut guard = self.sink.lock().expect("transcript lock");
        let record = TranscriptRecord {
            seq: guard.0,
            tag: request.tag.clone(),
            request_hash: canonical_request_hash(request),
            model: request.backend_model.clone(),
            response: response.clone(),
        };
        guard.0 += 1;
        let mut line = serde_json::to_string(&record).expect("transcript record");
        line.push('\n');
        guard.1.write_all(line.as_bytes())?;
        guard.1.flush()?;
        Ok(())
    }
}

/// Wraps a backend and appends every exchange to a transcript.
pub struct RecordingBackend<B> {
    inner: B,
    writer: TranscriptWriter,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, writer: TranscriptWriter) -> Self {
        Self { inner, writer }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        self.writer.append(request, &response)?;
        Ok(response)
    }
}

impl ChatBackend for Box<dyn ChatBackend> {
    fn id(&self) -> &str {
        self.as_ref().id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.as_ref().complete(request)
    }
}

#[derive(Default)]
struct ReplayState {
    queues: HashMap<String, VecDeque<ChatResponse>>,
    finished_sessions: HashSet<String>,
    current_session: Option<String>,
}

pub struct ReplayBackend {
    id: String,
    state: Mutex<ReplayState>,
}

impl ReplayBackend {
    pub fn new(records: Vec<TranscriptRecord>) -> Self {
        let mut queues: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        let mut records = records;
        records.sort_by_key(|r| r.seq);
        // a replay reports the backend that produced the recording
        let id = records.first().map_or_else(|| "replay".to_owned(), |r| r.response.backend_id.clone());
        for rec in records {
            queues.entry(rec.request_hash).or_default().push_back(rec.response);
        }
        Self { id, state: Mutex::new(ReplayState { queues, ..Default::default() }) }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::new(read_transcript(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().expect("replay lock").queues.values().map(VecDeque::len).sum()
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = canonical_request_hash(request);
        let mut state = self.state.lock().expect("replay lock");
        if let Some(session) = request.session_key() {
            match state.current_session.clone() {
                Some(current) if current != session => {
                    if state.finished_sessions.contains(session) {
                        return Err(GatewayError::ReplayInterleaved { session: session.to_owned(), current });
                    }
                    state.finished_sessions.insert(current);
                    state.current_session = Some(session.to_owned());
                }
                Some(_) => {}
                None => state.current_session = Some(session.to_owned()),
            }
        }
        state
            .queues
            .get_mut(&digest)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| GatewayError::ReplayMiss { digest, tag: request.tag.clone() })
    }
}
