mod support;

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routekit_core::conversation::{read_session_events, OutcomeKind, SessionConfig, SessionEvent, SessionStore};
use routekit_core::gateway::FnBackend;
use routekit_core::model::SolutionPool;
use routekit_core::testkit::{self, action, constant_runner, plan, verdict};
use std::sync::Mutex;
use support::{always_reject, check_scenario, repetition_run, Scenario};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sessions_terminate_and_exit_on_unanimity(seed in any::<u64>()) {
        let s = Scenario::random(&mut ChaCha8Rng::seed_from_u64(seed));
        if let Err(e) = check_scenario(&s) {
            prop_assert!(false, "{}", e);
        }
    }
}

proptest! {
    #[test]
    fn proposer_sees_every_earlier_reject(rejects in 1usize..6) {
        let contexts = Arc::new(Mutex::new(Vec::<String>::new()));
        let counter = Arc::new(Mutex::new(0usize));
        let backend = {
            let (contexts, counter) = (contexts.clone(), counter.clone());
            FnBackend::new("fn", move |req| {
                let mut k = counter.lock().unwrap();
                Ok(match req.role_key() {
                    "proposer" => {
                        *k += 1;
                        contexts.lock().unwrap().push(req.messages.last().unwrap().joined_text());
                        plan(*k)
                    }
                    "engineer" => action(&format!("emit_answer('{}')", *k)),
                    "code_checker" if *k <= rejects => format!("issue-{}-code\nDECISION: REJECT", *k),
                    "requirement_checker" if *k <= rejects => format!("issue-{}-req\nDECISION: REJECT", *k),
                    _ => verdict(true).to_owned(),
                })
            })
        };
        let engine = testkit::engine(Arc::new(backend), constant_runner());
        let task = testkit::labeled_task("t", &["A", "B", "A", "B"], 4);
        let out = engine.run_session(&task, &SolutionPool::new("t"), &SessionConfig::default(), 1).unwrap();
        prop_assert_eq!(out.iterations_used, (rejects + 1).min(6));
        let contexts = contexts.lock().unwrap();
        for (idx, ctx) in contexts.iter().enumerate() {
            let k = idx + 1;
            for j in 1..k {
                let (code, req) = (format!("issue-{j}-code"), format!("issue-{j}-req"));
                prop_assert!(ctx.contains(&code) && ctx.contains(&req));
            }
            let current = format!("issue-{k}-");
            prop_assert!(!ctx.contains(&current));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn repetition_gate_keeps_pool_distinct(seed in any::<u64>(), budget in 1usize..7) {
        prop_assert!(!repetition_run(seed, budget, true));
    }
}

#[test]
fn without_repetition_checker_duplicates_get_in() {
    assert!((0..20u64).any(|seed| repetition_run(seed, 5, false)));
}

#[test]
fn cap_keeps_the_last_proposal() {
    let engine = testkit::engine(Arc::new(always_reject(false)), constant_runner());
    let task = testkit::labeled_task("t", &["A", "B", "A", "B"], 4);
    let out = engine.run_session(&task, &SolutionPool::new("t"), &SessionConfig::default(), 1).unwrap();
    assert_eq!(out.kind, OutcomeKind::AdmittedAtCap);
    assert_eq!(out.iterations_used, 6);
    let sol = out.solution.unwrap();
    assert_eq!(sol.action_code, "emit_answer('v6')");
    assert_eq!(sol.provenance.iteration_index, 6);
}

#[test]
fn cap_candidate_that_duplicates_is_rejected() {
    let task = testkit::labeled_task("t", &["A", "B", "A", "B"], 4);
    let seed_engine = testkit::engine(Arc::new(always_reject(false)), constant_runner());
    let first = seed_engine.run_session(&task, &SolutionPool::new("t"), &SessionConfig::default(), 1).unwrap();
    let pool = SolutionPool::new("t").admit(first.solution.unwrap(), None).unwrap().0;

    // normalized copy of sol-001
    let engine = testkit::engine(Arc::new(always_reject(false)), constant_runner());
    let out = engine.run_session(&task, &pool, &SessionConfig::default(), 2).unwrap();
    assert_eq!(out.kind, OutcomeKind::RejectedDuplicate);
    assert_eq!(out.duplicate_of.as_deref(), Some("sol-001"));

    // different code, flagged by the agent
    let mut other = pool.clone();
    other.solutions[0].action_code = "emit_answer('something else')".into();
    let engine = testkit::engine(Arc::new(always_reject(true)), constant_runner());
    let out = engine.run_session(&task, &other, &SessionConfig::default(), 2).unwrap();
    assert_eq!(out.kind, OutcomeKind::RejectedDuplicate);
    assert_eq!(out.iterations_used, 6);
    assert!(out.solution.is_none());
}

#[test]
fn scripted_sessions_are_reproducible() {
    let task = testkit::labeled_task("t", &["A", "B", "A", "B"], 4);
    let run = |dir: &std::path::Path| {
        let mut engine = testkit::engine(Arc::new(always_reject(false)), constant_runner());
        engine.store = Some(SessionStore::new(dir));
        let out = engine.generate_pool(&task, SolutionPool::new("t"), &SessionConfig::default(), 2).unwrap();
        let transcripts: Vec<Vec<u8>> = out
            .outcomes
            .iter()
            .map(|o| std::fs::read(dir.join(&o.session_id).join("transcript.jsonl")).unwrap())
            .collect();
        (out.pool.to_json(), transcripts)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn pooled_solutions_trace_to_one_transcript_position() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::new(dir.path());
    let mut engine = testkit::engine(Arc::new(support::duplicate_prone_backend(11)), constant_runner());
    engine.store = Some(store.clone());
    let task = testkit::labeled_task("t", &["A", "B", "A", "B"], 4);
    let run = engine.generate_pool(&task, SolutionPool::new("t"), &SessionConfig::default(), 6).unwrap();
    assert!(!run.pool.is_empty());
    for sol in &run.pool.solutions {
        let events = read_session_events(store.transcript_path(&sol.provenance.session_id)).unwrap();
        let hits = events
            .iter()
            .filter(|e| {
                matches!(e, SessionEvent::Proposal { iteration, sections }
                if *iteration == sol.provenance.iteration_index && sections.action_code == sol.action_code)
            })
            .count();
        assert_eq!(hits, 1, "{}", sol.id);
    }
}
