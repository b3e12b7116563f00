//! Local HTTP endpoint through which solution programs reach pooled models.
//!
//! `POST /tool/{name}` with a JSON argument object; the `X-Instance-Id` and
//! `X-Run-Tag` headers identify the instance and the ledger tag.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use crate::gateway::UsageLedger;
use crate::model::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutput {
    pub value: Value,
    pub usd: Decimal,
}

pub trait Tool: Send + Sync {
    fn call(&self, instance_id: &str, args: &Value) -> Result<ToolOutput, String>;
}

/// Deterministic stand-in: canned results keyed by instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTool {
    #[serde(with = "crate::gateway::decimal_number", default)]
    pub usd_per_call: Decimal,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub responses: BTreeMap<String, Value>,
    #[serde(default)]
    pub default: Option<Value>,
}

impl Tool for FixtureTool {
    fn call(&self, instance_id: &str, _args: &Value) -> Result<ToolOutput, String> {
        if self.latency_ms > 0 {
            thread::sleep(Duration::from_millis(self.latency_ms));
        }
        let value = self
            .responses
            .get(instance_id)
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| format!("no fixture response for instance `{instance_id}`"))?;
        Ok(ToolOutput { value, usd: self.usd_per_call })
    }
}

/// Forwards calls to a model server speaking the same JSON convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyTool {
    pub url: String,
    #[serde(with = "crate::gateway::decimal_number", default)]
    pub usd_per_call: Decimal,
    #[serde(default = "default_proxy_timeout")]
    pub timeout_s: u64,
}

fn default_proxy_timeout() -> u64 {
    300
}

impl Tool for ProxyTool {
    fn call(&self, instance_id: &str, args: &Value) -> Result<ToolOutput, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.timeout_s))
            .build()
            .map_err(|e| e.to_string())?;
        let resp = client
            .post(&self.url)
            .header("X-Instance-Id", instance_id)
            .json(args)
            .send()
            .map_err(|e| format!("proxy transport: {e}"))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("proxy returned HTTP {}: {text}", status.as_u16()));
        }
        let value = serde_json::from_str(&text).map_err(|e| format!("proxy returned invalid JSON: {e}"))?;
        Ok(ToolOutput { value, usd: self.usd_per_call })
    }
}

/// One entry of a tools file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolConfig {
    Fixture {
        name: String,
        #[serde(flatten)]
        tool: FixtureTool,
    },
    Proxy {
        name: String,
        #[serde(flatten)]
        tool: ProxyTool,
    },
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_configs(configs: Vec<ToolConfig>) -> Self {
        let mut reg = Self::new();
        for c in configs {
            match c {
                ToolConfig::Fixture { name, tool } => reg.insert(name, Arc::new(tool)),
                ToolConfig::Proxy { name, tool } => reg.insert(name, Arc::new(tool)),
            }
        }
        reg
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Ok(Self::from_configs(crate::model::read_json(path.as_ref())?))
    }

    pub fn insert(&mut self, name: impl Into<String>, tool: Arc<dyn Tool>) {
        self.tools.insert(name.into(), tool);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Tool>> {
        self.tools.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }
}

#[derive(Clone)]
struct BridgeState {
    registry: Arc<ToolRegistry>,
    ledger: Arc<UsageLedger>,
}

fn header(headers: &HeaderMap, name: &str) -> String {
    headers.get(name).and_then(|v| v.to_str().ok()).unwrap_or("").to_owned()
}

async fn call_tool(
    State(state): State<BridgeState>,
    UrlPath(name): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> (StatusCode, Json<Value>) {
    let Some(tool) = state.registry.get(&name) else {
        return (StatusCode::NOT_FOUND, Json(json!({"error": format!("unknown tool `{name}`")})));
    };
    let args: Value = if body.is_empty() {
        json!({})
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({"error": format!("invalid JSON: {e}")}))),
        }
    };
    let instance_id = header(&headers, "x-instance-id");
    let run_tag = match header(&headers, "x-run-tag") {
        t if t.is_empty() => "untagged".to_owned(),
        t => t,
    };
    let started = Instant::now();
    let result = tokio::task::spawn_blocking(move || tool.call(&instance_id, &args)).await;
    let latency = started.elapsed().as_secs_f64();
    match result {
        Ok(Ok(out)) => {
            state.ledger.record_tool(&run_tag, &name, out.usd, latency);
            (StatusCode::OK, Json(out.value))
        }
        Ok(Err(msg)) => (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"error": msg}))),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))),
    }
}

/// Running bridge server; stops when dropped.
pub struct ToolBridge {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ToolBridge {
    /// Serves `registry` on an ephemeral loopback port.
    pub fn start(registry: Arc<ToolRegistry>, ledger: Arc<UsageLedger>) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = Router::new().route("/tool/{name}", post(call_tool)).with_state(BridgeState { registry, ledger });
        let thread = thread::Builder::new().name("tool-bridge".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!(error = %e, "tool bridge failed to start");
                        return;
                    }
                };
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    tracing::error!(error = %e, "tool bridge stopped");
                }
            });
        })?;
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ToolBridge {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{EntryKind, PriceTable};
    use std::str::FromStr;

    fn registry() -> ToolRegistry {
        let configs: Vec<ToolConfig> = serde_json::from_str(
            r#"[{"kind": "fixture", "name": "depth", "usd_per_call": 0.002,
                 "responses": {"i1": {"depths": [1.0, 2.0]}}},
                {"kind": "fixture", "name": "const", "default": "x"}]"#,
        )
        .unwrap();
        ToolRegistry::from_configs(configs)
    }

    fn post(url: &str, instance: &str, tag: &str, body: &str) -> (u16, Value) {
        let resp = reqwest::blocking::Client::new()
            .post(url)
            .header("X-Instance-Id", instance)
            .header("X-Run-Tag", tag)
            .body(body.to_owned())
            .send()
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().unwrap())
    }

    #[test]
    fn fixture_lookup() {
        let reg = registry();
        let out = reg.get("depth").unwrap().call("i1", &json!({})).unwrap();
        assert_eq!(out.value, json!({"depths": [1.0, 2.0]}));
        assert_eq!(out.usd, Decimal::from_str("0.002").unwrap());
        assert!(reg.get("depth").unwrap().call("i9", &json!({})).is_err());
        assert_eq!(reg.get("const").unwrap().call("i9", &json!({})).unwrap().value, json!("x"));
    }

    #[test]
    fn bridge_serves_and_records() {
        let ledger = Arc::new(UsageLedger::new(PriceTable::default()));
        let bridge = ToolBridge::start(Arc::new(registry()), ledger.clone()).unwrap();
        let (status, body) = post(&format!("{}/tool/depth", bridge.url()), "i1", "bench:s1:0", "{}");
        assert_eq!((status, body), (200, json!({"depths": [1.0, 2.0]})));
        let (status, _) = post(&format!("{}/tool/nope", bridge.url()), "i1", "t", "{}");
        assert_eq!(status, 404);
        let (status, _) = post(&format!("{}/tool/depth", bridge.url()), "i2", "t", "{}");
        assert_eq!(status, 422);
        let (status, _) = post(&format!("{}/tool/depth", bridge.url()), "i1", "t", "{not json");
        assert_eq!(status, 400);
        let entries = ledger.entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].kind, EntryKind::Tool);
        assert_eq!(entries[0].tag, "bench:s1:0");
        assert_eq!(ledger.usd_with_prefix("bench:s1:"), Decimal::from_str("0.002").unwrap());
    }
}
