//! Runs solution programs in a subprocess per instance.
//!
//! Each run gets a fresh working directory holding `solution.py` (harness
//! prelude plus the program) and `inputs/` (staged images and
//! `manifest.json`). The program reports through sentinel-framed stdout
//! lines: `@@ANSWER@@ <text>` exactly once and any number of
//! `@@TRACE@@ <label> <literal>` lines.

mod bridge;

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::model::{Instance, TaskSpec};

pub use bridge::{FixtureTool, ProxyTool, Tool, ToolBridge, ToolConfig, ToolOutput, ToolRegistry};

pub const PRELUDE: &str = include_str!("prelude.py");
pub const ANSWER_SENTINEL: &str = "@@ANSWER@@ ";
pub const TRACE_SENTINEL: &str = "@@TRACE@@ ";
pub const SCRIPT_NAME: &str = "solution.py";
const STDERR_TAIL_BYTES: usize = 4096;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("interpreter `{0}` not found")]
    ConfigMissing(String),
    #[error("invalid sandbox config: {0}")]
    InvalidConfig(String),
    #[error("failed to stage instance `{instance_id}`: {source}")]
    Staging {
        instance_id: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to spawn interpreter: {0}")]
    Spawn(std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Ok,
    RuntimeError,
    Timeout,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub label: String,
    /// Structured literal as printed by the program.
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub instance_id: String,
    pub status: ExecStatus,
    pub answer: Option<String>,
    pub traces: Vec<Trace>,
    pub stderr_tail: String,
    pub exit_code: Option<i32>,
    pub wall_time_s: f64,
}

impl ExecutionReport {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// argv template; `{script}` is replaced by the script file name.
    pub interpreter: Vec<String>,
    pub timeout_s: f64,
    pub kill_grace_s: f64,
    /// Variables copied from the engine's environment.
    pub env_allowlist: Vec<String>,
    pub parallelism: usize,
    /// Parent directory for per-run workdirs; the system temp dir when unset.
    pub workdir_root: Option<PathBuf>,
    #[serde(skip)]
    pub tool_bridge_url: Option<String>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: vec!["python3".into(), "{script}".into()],
            timeout_s: 120.0,
            kill_grace_s: 2.0,
            env_allowlist: ["PATH", "LANG", "LC_ALL", "PYTHONPATH"].map(String::from).to_vec(),
            parallelism: 4,
            workdir_root: None,
            tool_bridge_url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionRequest {
    pub action_code: String,
    /// Images already resolved to readable paths.
    pub instance: Instance,
    /// Ledger tag for tool-bridge calls made by this run.
    pub run_tag: String,
}

impl ExecutionRequest {
    pub fn for_instance(task: &TaskSpec, instance: &Instance, code: &str, run_tag: &str) -> Self {
        let mut instance = instance.clone();
        instance.images = instance.images.iter().map(|p| task.resolve_image(p)).collect();
        Self { action_code: code.to_owned(), instance, run_tag: run_tag.to_owned() }
    }
}

pub fn build_script(code: &str) -> String {
    format!("{PRELUDE}\n\n{code}\n")
}

/// Splits stdout into answers and traces; other lines are ignored.
pub fn parse_sentinels(stdout: &str) -> (Vec<String>, Vec<Trace>) {
    let mut answers = Vec::new();
    let mut traces = Vec::new();
    for line in stdout.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if let Some(rest) = line.strip_prefix(ANSWER_SENTINEL) {
            let text = match serde_json::from_str::<serde_json::Value>(rest) {
                Ok(serde_json::Value::String(s)) => s,
                _ => rest.to_owned(),
            };
            answers.push(text);
        } else if let Some(rest) = line.strip_prefix(TRACE_SENTINEL) {
            let (label, value) = rest.split_once(' ').unwrap_or((rest, ""));
            traces.push(Trace { label: label.to_owned(), value: value.to_owned() });
        }
    }
    (answers, traces)
}

fn classify(exit_ok: bool, answers: &[String]) -> ExecStatus {
    match (exit_ok, answers.len()) {
        (false, _) => ExecStatus::RuntimeError,
        (true, 1) => ExecStatus::Ok,
        (true, _) => ExecStatus::ProtocolError,
    }
}

fn tail(bytes: &[u8], limit: usize) -> String {
    let start = bytes.len().saturating_sub(limit);
    let s = String::from_utf8_lossy(&bytes[start..]);
    s.trim_start_matches('\u{FFFD}').to_owned()
}

fn find_executable(name: &str) -> Option<PathBuf> {
    let p = Path::new(name);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    std::env::var_os("PATH")
        .into_iter()
        .flat_map(|paths| std::env::split_paths(&paths).collect::<Vec<_>>())
        .map(|dir| dir.join(name))
        .find(|c| c.is_file())
}

fn signal_group(child: &Child, signal: i32) {
    // the child leads its own process group
    unsafe {
        libc::kill(-(child.id() as i32), signal);
    }
}

fn spawn_reader<R: Read + Send + 'static>(mut source: R) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = source.read_to_end(&mut buf);
        buf
    })
}

#[derive(Debug, Clone, Default)]
pub struct Sandbox {
    pub config: SandboxConfig,
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        Self { config }
    }

    pub fn check(&self) -> Result<PathBuf, SandboxError> {
        if !(self.config.timeout_s > 0.0) {
            return Err(SandboxError::InvalidConfig("timeout must be positive".into()));
        }
        if self.config.parallelism == 0 {
            return Err(SandboxError::InvalidConfig("parallelism must be at least 1".into()));
        }
        let program =
            self.config.interpreter.first().ok_or_else(|| SandboxError::InvalidConfig("empty interpreter".into()))?;
        find_executable(program).ok_or_else(|| SandboxError::ConfigMissing(program.clone()))
    }

    fn stage(&self, request: &ExecutionRequest, workdir: &Path) -> std::io::Result<()> {
        let inputs = workdir.join("inputs");
        std::fs::create_dir_all(&inputs)?;
        std::fs::create_dir_all(workdir.join("tmp"))?;
        let mut staged = Vec::new();
        for (k, image) in request.instance.images.iter().enumerate() {
            let ext = image.extension().and_then(|e| e.to_str()).unwrap_or("bin");
            let name = format!("img_{k}.{ext}");
            std::fs::copy(image, inputs.join(&name))?;
            staged.push(format!("inputs/{name}"));
        }
        let manifest = json!({
            "instance_id": request.instance.id,
            "request_prompt": request.instance.request_prompt,
            "images": staged,
        });
        std::fs::write(inputs.join("manifest.json"), serde_json::to_vec_pretty(&manifest).expect("manifest"))?;
        std::fs::write(workdir.join(SCRIPT_NAME), build_script(&request.action_code))
    }

    pub fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionReport, SandboxError> {
        let program = self.check()?;
        let staging = |source| SandboxError::Staging { instance_id: request.instance.id.clone(), source };
        let mut builder = tempfile::Builder::new();
        builder.prefix("rk-exec-");
        let workdir = match &self.config.workdir_root {
            Some(root) => {
                std::fs::create_dir_all(root).map_err(staging)?;
                builder.tempdir_in(root)
            }
            None => builder.tempdir(),
        }
        .map_err(staging)?;
        self.stage(request, workdir.path()).map_err(staging)?;

        let mut cmd = Command::new(&program);
        cmd.args(self.config.interpreter[1..].iter().map(|a| a.replace("{script}", SCRIPT_NAME)))
            .current_dir(workdir.path())
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        for var in &self.config.env_allowlist {
            if let Some(v) = std::env::var_os(var) {
                cmd.env(var, v);
            }
        }
        cmd.env("HOME", workdir.path())
            .env("TMPDIR", workdir.path().join("tmp"))
            .env("PYTHONIOENCODING", "utf-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONNOUSERSITE", "1")
            .env("TOOL_RUN_TAG", &request.run_tag);
        if let Some(url) = &self.config.tool_bridge_url {
            cmd.env("TOOL_BRIDGE_URL", url).env("NO_PROXY", "127.0.0.1,localhost");
        }

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SandboxError::ConfigMissing(program.display().to_string()),
            _ => SandboxError::Spawn(e),
        })?;
        let stdout = spawn_reader(child.stdout.take().expect("piped stdout"));
        let stderr = spawn_reader(child.stderr.take().expect("piped stderr"));

        let timeout = Duration::from_secs_f64(self.config.timeout_s);
        let grace = Duration::from_secs_f64(self.config.kill_grace_s.max(0.0));
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait().map_err(SandboxError::Spawn)? {
                break status;
            }
            if !timed_out && started.elapsed() >= timeout {
                timed_out = true;
                signal_group(&child, libc::SIGTERM);
                let deadline = Instant::now() + grace;
                while Instant::now() < deadline {
                    if child.try_wait().map_err(SandboxError::Spawn)?.is_some() {
                        break;
                    }
                    thread::sleep(Duration::from_millis(10));
                }
                signal_group(&child, libc::SIGKILL);
                continue;
            }
            thread::sleep(Duration::from_millis(5));
        };
        let wall_time_s = started.elapsed().as_secs_f64();
        // reap stragglers that still hold the pipes
        signal_group(&child, libc::SIGKILL);
        let stdout = stdout.join().unwrap_or_default();
        let stderr = stderr.join().unwrap_or_default();

        let (answers, traces) = parse_sentinels(&String::from_utf8_lossy(&stdout));
        let status_kind = if timed_out { ExecStatus::Timeout } else { classify(status.success(), &answers) };
        let answer = match status_kind {
            ExecStatus::Ok | ExecStatus::RuntimeError => answers.last().cloned(),
            ExecStatus::ProtocolError | ExecStatus::Timeout => None,
        };
        Ok(ExecutionReport {
            instance_id: request.instance.id.clone(),
            status: status_kind,
            answer,
            traces,
            stderr_tail: tail(&stderr, STDERR_TAIL_BYTES),
            exit_code: status.code(),
            wall_time_s,
        })
    }

    /// Runs every request, at most `parallelism` at a time; reports keep request order.
    pub fn execute_over(
        &self,
        requests: &[ExecutionRequest],
        parallelism: usize,
    ) -> Result<Vec<ExecutionReport>, SandboxError> {
        if parallelism == 0 {
            return Err(SandboxError::InvalidConfig("parallelism must be at least 1".into()));
        }
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        self.check()?;
        let slots: Vec<Mutex<Option<Result<ExecutionReport, SandboxError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        thread::scope(|scope| {
            for _ in 0..parallelism.min(requests.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(request) = requests.get(i) else { break };
                    *slots[i].lock().expect("slot") = Some(self.execute(request));
                });
            }
        });
        let mut out = Vec::with_capacity(requests.len());
        for (slot, request) in slots.into_iter().zip(requests) {
            let report = match slot.into_inner().expect("slot").expect("every slot filled") {
                Ok(r) => r,
                Err(e @ (SandboxError::ConfigMissing(_) | SandboxError::InvalidConfig(_))) => return Err(e),
                Err(e) => ExecutionReport {
                    instance_id: request.instance.id.clone(),
                    status: ExecStatus::RuntimeError,
                    answer: None,
                    traces: Vec::new(),
                    stderr_tail: e.to_string(),
                    exit_code: None,
                    wall_time_s: 0.0,
                },
            };
            out.push(report);
        }
        Ok(out)
    }
}

/// Something that runs a program over task instances.
pub trait CodeRunner: Send + Sync {
    fn run(
        &self,
        code: &str,
        task: &TaskSpec,
        instances: &[Instance],
        run_tag: &str,
    ) -> Result<Vec<ExecutionReport>, SandboxError>;
}

impl CodeRunner for Sandbox {
    fn run(
        &self,
        code: &str,
        task: &TaskSpec,
        instances: &[Instance],
        run_tag: &str,
    ) -> Result<Vec<ExecutionReport>, SandboxError> {
        let requests: Vec<_> =
            instances.iter().map(|i| ExecutionRequest::for_instance(task, i, code, run_tag)).collect();
        self.execute_over(&requests, self.config.parallelism)
    }
}

/// In-process runner computing each report from `(code, instance)`.
pub struct FnRunner<F>(pub F);

impl<F> CodeRunner for FnRunner<F>
where
    F: Fn(&str, &Instance) -> ExecutionReport + Send + Sync,
{
    fn run(
        &self,
        code: &str,
        _task: &TaskSpec,
        instances: &[Instance],
        _run_tag: &str,
    ) -> Result<Vec<ExecutionReport>, SandboxError> {
        Ok(instances.iter().map(|i| (self.0)(code, i)).collect())
    }
}

/// OK report carrying `answer`, for in-process runners.
pub fn ok_report(instance_id: &str, answer: &str) -> ExecutionReport {
    ExecutionReport {
        instance_id: instance_id.to_owned(),
        status: ExecStatus::Ok,
        answer: Some(answer.to_owned()),
        traces: Vec::new(),
        stderr_tail: String::new(),
        exit_code: Some(0),
        wall_time_s: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn python() -> bool {
        find_executable("python3").is_some()
    }

    fn req(code: &str) -> ExecutionRequest {
        ExecutionRequest {
            action_code: code.into(),
            instance: Instance { id: "i1".into(), images: vec![], request_prompt: "q?".into(), ground_truth: None },
            run_tag: "t".into(),
        }
    }

    fn sandbox(timeout_s: f64) -> Sandbox {
        Sandbox::new(SandboxConfig { timeout_s, ..Default::default() })
    }

    #[test]
    fn sentinel_parsing() {
        let out = "noise\n\n@@TRACE@@ depth_a 3.2\n@@ANSWER@@ \"(A)\"\n@@ANSWER@@ raw text\n@@TRACE@@ bare\n";
        let (answers, traces) = parse_sentinels(out);
        assert_eq!(answers, ["(A)", "raw text"]);
        assert_eq!(traces[0], Trace { label: "depth_a".into(), value: "3.2".into() });
        assert_eq!(traces[1], Trace { label: "bare".into(), value: "".into() });
    }

    #[test]
    fn status_rules() {
        assert_eq!(classify(true, &["a".into()]), ExecStatus::Ok);
        assert_eq!(classify(true, &[]), ExecStatus::ProtocolError);
        assert_eq!(classify(true, &["a".into(), "b".into()]), ExecStatus::ProtocolError);
        assert_eq!(classify(false, &[]), ExecStatus::RuntimeError);
        assert_eq!(classify(false, &["a".into()]), ExecStatus::RuntimeError);
    }

    #[test]
    fn stderr_tail_is_bounded() {
        let big = vec![b'x'; 10_000];
        assert_eq!(tail(&big, STDERR_TAIL_BYTES).len(), 4096);
        assert_eq!(tail(b"short", STDERR_TAIL_BYTES), "short");
    }

    #[test]
    fn echo_program() {
        if !python() {
            return;
        }
        let r = sandbox(30.0)
            .execute(&req("inst = load_instance()\nemit_trace('depth_a', 3.2)\nemit_answer('(A)')"))
            .unwrap();
        assert_eq!(r.status, ExecStatus::Ok);
        assert_eq!(r.answer.as_deref(), Some("(A)"));
        assert_eq!(r.traces, vec![Trace { label: "depth_a".into(), value: "3.2".into() }]);
    }

    #[test]
    fn manifest_and_images_staged() {
        if !python() {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("pic.png");
        std::fs::write(&img, b"bytes").unwrap();
        let mut r = req("import os\ninst = load_instance()\nemit_trace('n', len(inst['images']))\nemit_answer(open(inst['images'][0]).read() + os.path.basename(inst['images'][0]) + inst['request_prompt'])");
        r.instance.images = vec![img];
        let rep = sandbox(30.0).execute(&r).unwrap();
        assert_eq!(rep.answer.as_deref(), Some("bytesimg_0.pngq?"), "{}", rep.stderr_tail);
    }

    #[test]
    fn env_is_cleared() {
        if !python() {
            return;
        }
        std::env::set_var("ROUTEKIT_SECRET_FOR_TEST", "leak");
        let r = sandbox(30.0)
            .execute(&req("import os\nemit_answer(os.environ.get('ROUTEKIT_SECRET_FOR_TEST', 'none'))"))
            .unwrap();
        assert_eq!(r.answer.as_deref(), Some("none"));
    }

    #[test]
    fn missing_interpreter() {
        let s = Sandbox::new(SandboxConfig {
            interpreter: vec!["surely-not-an-interpreter-xyz".into()],
            ..Default::default()
        });
        assert!(matches!(s.execute(&req("x")), Err(SandboxError::ConfigMissing(_))));
    }

    #[test]
    fn empty_batch() {
        assert!(sandbox(1.0).execute_over(&[], 2).unwrap().is_empty());
    }
}
