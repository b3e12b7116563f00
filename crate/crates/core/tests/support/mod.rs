//! Randomized scenarios and brute-force oracles shared by the integration
//! suites and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routekit_core::agents::{AgentRole, Verdict};
use routekit_core::bench::CurvePoint;
use routekit_core::conversation::{normalize_python, OutcomeKind, SessionConfig, SessionStore};
use routekit_core::gateway::{ChatRequest, FnBackend, GatewayError, ScriptedBackend};
use routekit_core::metric::Reference;
use routekit_core::model::{Instance, SolutionPool, TaskSpec};
use routekit_core::sandbox::{ExecStatus, ExecutionReport, ExecutionRequest, Sandbox, SandboxConfig};
use routekit_core::testkit::{self, action, constant_runner, plan, verdict};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

// ---- protocol ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reply {
    Accept,
    Reject,
    Garbage,
}

impl Reply {
    fn text(self) -> &'static str {
        match self {
            Reply::Accept => verdict(true),
            Reply::Reject => verdict(false),
            Reply::Garbage => "looks plausible to me",
        }
    }
}

/// Scripted verdicts for one session.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub max_iterations: usize,
    pub requirement: bool,
    pub code: bool,
    pub repetition: bool,
    pub malformed: Vec<bool>,
    pub requirement_replies: Vec<Reply>,
    pub code_replies: Vec<Reply>,
}

impl Scenario {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        // the default cap most of the time
        let max_iterations = if rng.random_bool(0.7) { 6 } else { rng.random_range(1..=8) };
        let reply = |rng: &mut ChaCha8Rng| match rng.random_range(0..8) {
            0..4 => Reply::Accept,
            4..7 => Reply::Reject,
            _ => Reply::Garbage,
        };
        Scenario {
            max_iterations,
            requirement: rng.random_bool(0.8),
            code: rng.random_bool(0.8),
            repetition: rng.random_bool(0.5),
            malformed: (0..max_iterations).map(|_| rng.random_bool(0.15)).collect(),
            requirement_replies: (0..max_iterations).map(|_| reply(rng)).collect(),
            code_replies: (0..max_iterations).map(|_| reply(rng)).collect(),
        }
    }

    pub fn config(&self) -> SessionConfig {
        let mut cfg = SessionConfig { max_iterations: self.max_iterations, ..Default::default() };
        for (on, role) in [
            (self.requirement, AgentRole::RequirementChecker),
            (self.code, AgentRole::CodeChecker),
            (self.repetition, AgentRole::RepetitionChecker),
        ] {
            if !on {
                cfg = cfg.without(role);
            }
        }
        cfg
    }

    /// First iteration where every enabled member accepts a well-formed proposal.
    pub fn expected_exit(&self) -> Option<usize> {
        let accepts = |on: bool, r: Reply| !on || r == Reply::Accept;
        (1..=self.max_iterations).find(|&k| {
            !self.malformed[k - 1]
                && accepts(self.requirement, self.requirement_replies[k - 1])
                && accepts(self.code, self.code_replies[k - 1])
        })
    }

    pub fn last_well_formed(&self) -> Option<usize> {
        (1..=self.max_iterations).rev().find(|&k| !self.malformed[k - 1])
    }
}

/// Runs the scenario and checks it against the hand-walked oracle.
pub fn check_scenario(s: &Scenario) -> Result<(), String> {
    let iteration = Arc::new(Mutex::new(0usize));
    let calls = Arc::new(Mutex::new(BTreeMap::<String, usize>::new()));
    let backend = {
        let (s, iteration, calls) = (s.clone(), iteration.clone(), calls.clone());
        FnBackend::new("fn", move |req| {
            *calls.lock().unwrap().entry(req.role_key().to_owned()).or_default() += 1;
            let mut k = iteration.lock().unwrap();
            Ok(match req.role_key() {
                "proposer" => {
                    *k += 1;
                    if s.malformed[*k - 1] {
                        "THOUGHT: no analysis".to_owned()
                    } else {
                        plan(*k)
                    }
                }
                "engineer" => action(&format!("emit_answer('{}')", *k)),
                "requirement_checker" => s.requirement_replies[*k - 1].text().to_owned(),
                "code_checker" => s.code_replies[*k - 1].text().to_owned(),
                other => format!("unexpected role {other}"),
            })
        })
    };
    let engine = testkit::engine(Arc::new(backend), constant_runner());
    let task = testkit::labeled_task("t", &["A", "B", "A", "B", "A"], 4);
    let out = engine.run_session(&task, &SolutionPool::new("t"), &s.config(), 1).map_err(|e| e.to_string())?;

    let fail = |what: String| Err(format!("{what} for {s:?}"));
    if out.iterations_used > s.max_iterations {
        return fail(format!("{} iterations used", out.iterations_used));
    }
    match (s.expected_exit(), s.last_well_formed()) {
        (Some(k), _) => {
            if out.kind != OutcomeKind::Admitted || out.iterations_used != k {
                return fail(format!("expected early exit at {k}, got {:?} after {}", out.kind, out.iterations_used));
            }
        }
        (None, Some(k)) => {
            let sol = out.solution.as_ref();
            let ok = out.kind == OutcomeKind::AdmittedAtCap
                && out.iterations_used == s.max_iterations
                && sol.is_some_and(|x| {
                    x.provenance.iteration_index == k && x.action_code == format!("emit_answer('{k}')")
                });
            if !ok {
                return fail(format!("expected cap with iteration {k}, got {:?}", out.kind));
            }
        }
        (None, None) => {
            if out.kind != OutcomeKind::Failed || !out.failure.as_deref().unwrap_or("").starts_with("MALFORMED") {
                return fail(format!("expected MALFORMED failure, got {:?}", out.kind));
            }
        }
    }
    for rec in &out.iterations {
        let all_accept = rec.malformed.is_none() && rec.decisions.iter().all(|d| d.verdict == Verdict::Accept);
        if rec.unanimous() != all_accept {
            return fail(format!("iteration {} unanimity mismatch", rec.iteration));
        }
    }
    let calls = calls.lock().unwrap();
    let disabled_called = (!s.requirement && calls.contains_key("requirement_checker"))
        || (!s.code && calls.contains_key("code_checker"))
        || calls.contains_key("repetition_checker");
    if disabled_called {
        return fail(format!("unexpected agent calls {calls:?}"));
    }
    Ok(())
}

/// Cosmetic variants of three different programs.
pub fn code_variant(rng: &mut ChaCha8Rng) -> String {
    let logic = rng.random_range(0..3);
    let name = ["x", "inst", "data", "record"][rng.random_range(0..4)];
    let comment = if rng.random_bool(0.5) { "# read the instance\n" } else { "" };
    let body = match logic {
        0 => format!("emit_answer({name}[\"request_prompt\"][:1])"),
        1 => format!("emit_answer(len({name}[\"images\"]))"),
        _ => format!("emit_answer({name}[\"instance_id\"])"),
    };
    format!("{comment}{name} = load_instance()\n\n{body}")
}

pub fn duplicate_prone_backend(
    seed: u64,
) -> FnBackend<impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync> {
    let rng = Mutex::new(ChaCha8Rng::seed_from_u64(seed));
    FnBackend::new("fn", move |req| {
        let mut rng = rng.lock().unwrap();
        Ok(match req.role_key() {
            "proposer" => plan(1),
            "engineer" => action(&code_variant(&mut rng)),
            "repetition_checker" => ["UNIQUE", "no opinion"][rng.random_range(0..2)].to_owned(),
            _ => verdict(rng.random_bool(0.7)).to_owned(),
        })
    })
}

pub fn has_normalized_duplicate(pool: &SolutionPool) -> bool {
    let forms: Vec<String> = pool.solutions.iter().map(|s| normalize_python(&s.action_code)).collect();
    forms.iter().collect::<BTreeSet<_>>().len() != forms.len()
}

/// One randomized generate_pool run; true when the pool holds a normalized duplicate.
pub fn repetition_run(seed: u64, budget: usize, checker: bool) -> bool {
    let mut cfg = SessionConfig::default();
    if !checker {
        cfg = cfg.without(AgentRole::RepetitionChecker);
    }
    let engine = testkit::engine(Arc::new(duplicate_prone_backend(seed)), constant_runner());
    let task = testkit::labeled_task("t", &["A", "B", "A", "B"], 4);
    let run = engine.generate_pool(&task, SolutionPool::new("t"), &cfg, budget).expect("generate_pool");
    has_normalized_duplicate(&run.pool)
}

pub fn always_reject(agent_duplicate: bool) -> ScriptedBackend {
    let scripts = serde_json::from_value(serde_json::json!({
        "proposer": (1..=6).map(plan).collect::<Vec<_>>(),
        "engineer": (1..=6).map(|k| action(&format!("emit_answer('v{k}')"))).collect::<Vec<_>>(),
        "requirement_checker": verdict(false),
        "code_checker": verdict(false),
        "repetition_checker": if agent_duplicate { "same plan as before\nDUPLICATE: sol-001" } else { "UNIQUE" },
    }))
    .unwrap();
    ScriptedBackend::new("scripted", scripts)
}

// ---- metrics ----

/// One scored item with the score a human would give it.
pub struct Item {
    pub prediction: Option<String>,
    pub reference: Reference,
    pub expected: f64,
}

const WORDS: [&str; 12] =
    ["red", "blue", "green", "left", "right", "top", "bottom", "near", "far", "cat", "dog", "car"];

fn noisy(rng: &mut ChaCha8Rng, text: &str) -> String {
    let mut s = match rng.random_range(0..3) {
        0 => text.to_uppercase(),
        1 => text.to_owned(),
        _ => text.chars().enumerate().map(|(i, c)| if i % 2 == 0 { c.to_ascii_uppercase() } else { c }).collect(),
    };
    if rng.random_bool(0.5) {
        s = format!("  {s}. ");
    }
    if rng.random_bool(0.3) {
        s.push('!');
    }
    s
}

/// Free-text items for EXACT_MATCH; a mismatch uses a different word list.
pub fn exact_match_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<Item> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=3);
            let truth: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let truth = truth.join(" ");
            let (prediction, expected) = match rng.random_range(0..4) {
                0 => (None, 0.0),
                1 => {
                    let mut other = truth.clone();
                    while other == truth {
                        other = WORDS[rng.random_range(0..WORDS.len())].to_owned();
                    }
                    (Some(noisy(rng, &other)), 0.0)
                }
                _ => (Some(noisy(rng, &truth)), 1.0),
            };
            Item {
                prediction,
                reference: Reference { ground_truth: truth, request_prompt: "Describe it.".into() },
                expected,
            }
        })
        .collect()
}

/// Multiple-choice items with two to five choices and answers in several surface forms.
pub fn multiple_choice_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<Item> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(2..=5);
            let labels: Vec<char> = ('A'..='Z').take(k).collect();
            let mut pool: Vec<usize> = (0..WORDS.len()).collect();
            let texts: Vec<String> = (0..k)
                .map(|_| {
                    let w = pool.swap_remove(rng.random_range(0..pool.len()));
                    format!("the {} one", WORDS[w])
                })
                .collect();
            let prompt = format!(
                "Which one matches? {}",
                labels.iter().zip(&texts).map(|(l, t)| format!("({l}) {t}")).collect::<Vec<_>>().join(" ")
            );
            let truth = rng.random_range(0..k);
            let picked = rng.random_range(0..k);
            let label = labels[picked];
            let (prediction, expected) = match rng.random_range(0..6) {
                0 => (None, 0.0),
                1 => (Some("I am not sure".to_owned()), 0.0),
                2 => (Some(format!("({label})")), (picked == truth) as u8 as f64),
                3 => (Some(format!("The answer is {label}.")), (picked == truth) as u8 as f64),
                4 => (Some(texts[picked].clone()), (picked == truth) as u8 as f64),
                _ => (Some(format!("{label}) {}", texts[picked])), (picked == truth) as u8 as f64),
            };
            Item {
                prediction,
                reference: Reference { ground_truth: format!("({})", labels[truth]), request_prompt: prompt },
                expected,
            }
        })
        .collect()
}

// ---- pareto ----

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<CurvePoint> {
    // a coarse grid makes ties and duplicates common
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|i| {
            let v = |rng: &mut ChaCha8Rng| if coarse { rng.random_range(0..5) as f64 } else { rng.random::<f64>() };
            CurvePoint { solution_id: format!("sol-{i:03}"), p: v(rng) / 4.0, c_time: v(rng), c_money: v(rng) / 100.0 }
        })
        .collect()
}

/// O(n²) dominance filter.
pub fn brute_force_front(points: &[CurvePoint]) -> Vec<usize> {
    let dominated = |a: &CurvePoint, b: &CurvePoint| {
        a.p >= b.p
            && a.c_time <= b.c_time
            && a.c_money <= b.c_money
            && (a.p > b.p || a.c_time < b.c_time || a.c_money < b.c_money)
    };
    (0..points.len()).filter(|&i| !points.iter().any(|q| dominated(q, &points[i]))).collect()
}

// ---- iteration trace ----

pub const TRACE_ACCURACIES: [f64; 4] = [0.25, 0.5, 1.0, 0.75];

/// Eight labeled instances and, for iteration k, a program that answers the
/// first `8 * TRACE_ACCURACIES[k]` instances correctly.
pub fn trace_task() -> TaskSpec {
    testkit::labeled_task("trace", &["A", "B", "B", "A", "A", "B", "A", "B"], 4)
}

pub fn trace_code(correct: usize) -> String {
    format!(
        "truth = {{'i01': 'A', 'i02': 'B', 'i03': 'B', 'i04': 'A', 'i05': 'A', 'i06': 'B', 'i07': 'A', 'i08': 'B'}}\n\
         inst = load_instance()\n\
         k = int(inst['instance_id'][1:])\n\
         emit_answer(truth[inst['instance_id']] if k <= {correct} else 'wrong')"
    )
}

pub fn sandbox(workdir_root: &Path) -> Sandbox {
    Sandbox::new(SandboxConfig {
        timeout_s: 30.0,
        workdir_root: Some(workdir_root.to_path_buf()),
        ..Default::default()
    })
}

/// Runs the scripted four-iteration session and returns its transcript path.
pub fn record_trace_session(dir: &Path) -> PathBuf {
    let codes: Vec<String> = TRACE_ACCURACIES.iter().map(|a| action(&trace_code((a * 8.0) as usize))).collect();
    let scripts = serde_json::from_value(serde_json::json!({
        "proposer": (1..=4).map(plan).collect::<Vec<_>>(),
        "engineer": codes,
        "requirement_checker": verdict(true),
        "code_checker": [verdict(false), verdict(false), verdict(false), verdict(true)],
        "repetition_checker": "UNIQUE",
    }))
    .unwrap();
    let mut engine =
        testkit::engine(Arc::new(ScriptedBackend::new("scripted", scripts)), Arc::new(sandbox(&dir.join("work"))));
    let store = SessionStore::new(dir.join("transcripts"));
    engine.store = Some(store.clone());
    let out = engine.run_session(&trace_task(), &SolutionPool::new("trace"), &SessionConfig::default(), 1).unwrap();
    assert_eq!(out.kind, OutcomeKind::Admitted);
    assert_eq!(out.iterations_used, 4);
    store.transcript_path(&out.session_id)
}

// ---- answer mapping ----

/// Cases of the hand-labeled mapping fixture that the rule mapper gets wrong.
pub fn mapping_mismatches() -> (usize, Vec<String>) {
    use routekit_core::metric::{map_open_form, parse_choices, Mapped};
    let text = std::fs::read_to_string(fixture_dir().join("answer_mapping.json")).unwrap();
    let cases: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    let wrong = cases
        .iter()
        .filter_map(|c| {
            let got = match map_open_form(c["prediction"].as_str()?, &parse_choices(c["prompt"].as_str()?)) {
                Mapped::Label(l) => l,
                Mapped::Unmapped => "UNMAPPED".into(),
            };
            (got != c["expected"].as_str()?)
                .then(|| format!("{} -> {got}, expected {}", c["prediction"], c["expected"]))
        })
        .collect();
    (cases.len(), wrong)
}

// ---- sandbox faults ----

/// Every file below `dir` with its length, skipping entries named in `skip`.
pub fn snapshot(dir: &Path, skip: &[&str]) -> BTreeMap<PathBuf, u64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap().flatten() {
            if skip.iter().any(|s| entry.file_name() == *s) {
                continue;
            }
            let path = entry.path();
            let meta = entry.metadata().unwrap();
            if meta.is_dir() {
                stack.push(path.clone());
            }
            out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), if meta.is_dir() { 0 } else { meta.len() });
        }
    }
    out
}

pub const FAULT_TIMEOUT_S: f64 = 1.0;

pub struct FaultRun {
    pub name: &'static str,
    pub status: ExecStatus,
    pub report: ExecutionReport,
}

/// Runs the four fault fixtures under `root`, checking that nothing outside
/// the per-run workdirs changes.
pub fn fault_suite(root: &Path) -> Result<Vec<FaultRun>, String> {
    let work = root.join("work");
    let outside = root.join("outside");
    std::fs::create_dir_all(&outside).unwrap();
    std::fs::write(outside.join("keep.txt"), "untouched").unwrap();
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let before = (snapshot(root, &["work"]), snapshot(crate_dir, &["target"]));

    let sb = Sandbox::new(SandboxConfig {
        timeout_s: FAULT_TIMEOUT_S,
        workdir_root: Some(work.clone()),
        ..Default::default()
    });
    let mut runs = Vec::new();
    for name in ["echo", "crash", "double_answer", "infinite_loop"] {
        let code = std::fs::read_to_string(fixture_dir().join("sandbox").join(format!("{name}.py"))).unwrap();
        let request = ExecutionRequest {
            action_code: code,
            instance: Instance {
                id: "i1".into(),
                images: vec![],
                request_prompt: "what is i1?".into(),
                ground_truth: None,
            },
            run_tag: "fault".into(),
        };
        let report = sb.execute(&request).map_err(|e| format!("{name}: {e}"))?;
        runs.push(FaultRun { name, status: report.status, report });
    }
    let after = (snapshot(root, &["work"]), snapshot(crate_dir, &["target"]));
    if after != before {
        return Err("files changed outside the workdirs".into());
    }
    if !snapshot(&work, &[]).is_empty() {
        return Err("workdirs left behind".into());
    }
    Ok(runs)
}
