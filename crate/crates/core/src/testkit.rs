//! Scripted stand-ins for the model side: small tasks, proposal text and an
//! engine wired to an in-memory backend. Used by the test suites and demos.

use std::sync::Arc;

use crate::agents::{AgentPool, Agents};
use crate::conversation::{Clock, Engine};
use crate::gateway::{ChatBackend, Gateway, PriceTable, UsageLedger};
use crate::model::{ArgSpec, CostClass, Instance, ModelCard, TaskSpec};
use crate::sandbox::{ok_report, CodeRunner, FnRunner};

pub const MODEL: &str = "scripted-model";
pub const CLOCK: &str = "2026-01-01T00:00:00Z";

/// Every instance labeled; ids are `i01`, `i02`, ... and prompts offer (A)/(B).
pub fn labeled_task(task_id: &str, answers: &[&str], example_count: usize) -> TaskSpec {
    let instances = answers
        .iter()
        .enumerate()
        .map(|(k, a)| Instance {
            id: format!("i{:02}", k + 1),
            images: vec![],
            request_prompt: format!("Which option holds for item {}? (A) yes (B) no", k + 1),
            ground_truth: Some((*a).to_owned()),
        })
        .collect();
    TaskSpec {
        task_id: task_id.to_owned(),
        description: "Answer each question with a single option.".into(),
        example_count,
        constraints: vec![],
        instances,
        base_dir: None,
    }
}

pub fn card(name: &str) -> ModelCard {
    let arg = |n: &str| ArgSpec { name: n.into(), semantic_type: "json".into(), description: n.into() };
    ModelCard {
        name: name.into(),
        functionality: format!("{name} fixture"),
        input_args: vec![arg("image")],
        return_args: vec![arg("result")],
        example_usage: format!("call_tool(\"{name}\", image=path)"),
        cost_class: CostClass::Local,
    }
}

/// Proposer reply for iteration `k`.
pub fn plan(k: usize) -> String {
    format!("ANALYSIS: reviewed the pool, attempt {k}\nTHOUGHT: 1. read the instance 2. answer")
}

/// Engineer reply wrapping `code`.
pub fn action(code: &str) -> String {
    format!("ACTION:\n```python\n{code}\n```")
}

pub fn verdict(accept: bool) -> &'static str {
    if accept {
        "DECISION: ACCEPT"
    } else {
        "the answer format is wrong\nDECISION: REJECT"
    }
}

/// Runner that answers "A" everywhere without starting a process.
pub fn constant_runner() -> Arc<dyn CodeRunner> {
    Arc::new(FnRunner(|_code: &str, inst: &Instance| ok_report(&inst.id, "A")))
}

/// Engine with every role on [`MODEL`], a fixed clock and one fixture card.
pub fn engine(backend: Arc<dyn ChatBackend>, runner: Arc<dyn CodeRunner>) -> Engine {
    let ledger = Arc::new(UsageLedger::new(PriceTable::default().with(MODEL, "1", "2")));
    let agents = Agents::new(Gateway::new(backend, ledger), AgentPool::uniform(MODEL));
    let mut e = Engine::new(agents, runner, vec![card("fixture_tool")]);
    e.clock = Clock::Fixed(CLOCK.into());
    e
}
