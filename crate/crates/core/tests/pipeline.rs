mod common;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::*;
use guideopt::error::{AgentError, WorkbenchError};
use guideopt::gateway::{
    Backend, BackendPolicy, CompletionRequest, CompletionResult, Gateway, RuleWorldBackend,
    ScriptedBackend,
};
use guideopt::metrics::evaluate_guideline;
use guideopt::optimizer::{
    run_inner_iteration, run_training, BeamState, GradeCache, InnerContext, TrainerOptions,
};
use guideopt::rng::{substream, Stream};
use guideopt::workbench::{self, CHECKPOINTS_DIR, FINAL_CHECKPOINT};
use guideopt::{validate_guideline, Error, KappaWeighting, LabeledSample, RunConfig};

fn embedded(data: Vec<LabeledSample>) -> Vec<LabeledSample> {
    let g = Gateway::mock();
    data.into_iter()
        .map(|mut s| {
            s.sample.embedding = Some(g.embed(&s.sample.answer_text).unwrap());
            s
        })
        .collect()
}

fn one_inner(config: &RunConfig, b_out: &[LabeledSample], val: &[LabeledSample]) -> (BeamState, guideopt::optimizer::InnerReport) {
    let agents = mock_agents();
    let g0 = g0();
    let mut cache = GradeCache::default();
    let mut inner = substream(config.rng_seed, Stream::InnerBatch);
    let mut ucb = substream(config.rng_seed, Stream::Ucb);
    let mut ctx = InnerContext {
        agents: &agents,
        config,
        g0: &g0,
        val,
        cache: &mut cache,
        inner_rng: &mut inner,
        ucb_rng: &mut ucb,
    };
    run_inner_iteration(&mut ctx, &BeamState::initial(&g0), b_out, (0, 0)).unwrap()
}

#[test]
fn single_branch_learns_the_failing_tag() {
    let config = RunConfig {
        beam_size: 1,
        parallel_branches: 1,
        ..config(1)
    };
    let b_out = rule_world("e", 6, &[("t3", 2)]);
    let (beam, report) = one_inner(&config, &b_out, &b_out);
    assert_eq!(report.children.len(), 1);
    assert_eq!(beam.members.len(), 1);
    assert!(beam.top().guideline.adaptation_rules.contains("IF t3 THEN 2"));
    assert_eq!(beam.best_metric_history, vec![beam.top().mean_kappa]);
}

#[test]
fn branches_share_a_short_error_list() {
    let config = RunConfig {
        beam_size: 1,
        parallel_branches: 2,
        inner_batch_size: 8,
        ..config(1)
    };
    let tags = [("a", 1), ("b", 1), ("c", 1), ("d", 1), ("e", 1)];
    let b_out = rule_world("e", 5, &tags);
    let (_, report) = one_inner(&config, &b_out, &b_out);
    assert_eq!(report.error_counts.values().copied().collect::<Vec<_>>(), vec![5]);
    // Both branches see all five errors, so they write the same child.
    assert_eq!(report.children.len(), 1);
    assert!(report.pool_size <= 3);
}

#[test]
fn perfect_start_stops_without_children() {
    let (train, val, _) = splits(&[("t3", 0)], "z");
    let out = run_training(&mock_agents(), &train, &val, &g0(), &config(2), &TrainerOptions::default()).unwrap();
    assert!(out.history.iter().all(|r| r.children.is_empty()));
    assert_eq!(out.history.len(), 6);
    assert!(out.history[2].inner_early_stop && !out.history[2].outer_early_stop);
    assert!(out.history[5].outer_early_stop);
    let result = out.result.unwrap();
    assert_eq!(result.guideline, g0());
    assert_eq!(result.validation.accuracy, 1.0);
}

#[test]
fn converges_on_the_three_tag_world() {
    let (train, val, test) = splits(&BASE_TAGS, "s");
    let agents = mock_agents();
    let out = run_training(&agents, &train, &val, &g0(), &config(7), &TrainerOptions::default()).unwrap();
    let result = out.result.unwrap();
    let (report, _) = evaluate_guideline(&agents, &result.guideline, &test, KappaWeighting::Unweighted).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert!(result.guideline.adaptation_rules.contains("IF t1 THEN 2"));
    assert!(result.guideline.adaptation_rules.contains("IF t2 THEN 1"));
    assert!((result.mu - 0.9f64.ln()).abs() < 1e-12);
    for (id, kappa) in &result.beam_kappas {
        assert!(result.validation.kappa >= *kappa, "{id}");
    }
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn same_text(a: &str, b: &str, what: &str) {
    if let Some((i, (x, y))) = a.lines().zip(b.lines()).enumerate().find(|(_, (x, y))| x != y) {
        panic!("{what} differs at line {}:\n{x}\n{y}", i + 1);
    }
    assert_eq!(a.lines().count(), b.lines().count(), "{what} line count");
}

#[test]
fn halted_and_resumed_run_matches_uninterrupted() {
    let (train, val, _) = wide_splits();
    let cfg = slow_config(5);
    let agents = mock_agents();
    let full = tempfile::tempdir().unwrap();
    let opts = |dir: &Path, resume: bool, halt: Option<usize>| TrainerOptions {
        run_dir: Some(dir.to_path_buf()),
        resume,
        halt_after_outer: halt,
        ..TrainerOptions::default()
    };
    let a = run_training(&agents, &train, &val, &g0(), &cfg, &opts(full.path(), false, None)).unwrap();
    assert!(a.history.last().unwrap().t >= 2, "fixture should need three outer iterations");

    let split = tempfile::tempdir().unwrap();
    let halted = run_training(&mock_agents(), &train, &val, &g0(), &cfg, &opts(split.path(), false, Some(2))).unwrap();
    assert!(halted.result.is_none());
    assert_eq!(halted.history.last().unwrap().t, 1);
    let b = run_training(&mock_agents(), &train, &val, &g0(), &cfg, &opts(split.path(), true, None)).unwrap();

    assert_eq!(a.result.unwrap().guideline, b.result.unwrap().guideline);
    for name in ["history.jsonl", "grades.jsonl", "final_guideline.json"] {
        same_text(&read(full.path(), name), &read(split.path(), name), name);
    }
    assert_eq!(
        read(&full.path().join(CHECKPOINTS_DIR), FINAL_CHECKPOINT),
        read(&split.path().join(CHECKPOINTS_DIR), FINAL_CHECKPOINT)
    );
}

#[test]
fn resume_rolls_back_to_a_mid_loop_checkpoint() {
    let (train, val, _) = wide_splits();
    let cfg = slow_config(5);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainerOptions {
        run_dir: Some(dir.path().to_path_buf()),
        ..TrainerOptions::default()
    };
    let a = run_training(&mock_agents(), &train, &val, &g0(), &cfg, &opts).unwrap();
    let history = read(dir.path(), "history.jsonl");
    let grades = read(dir.path(), "grades.jsonl");
    // Pretend the process died right after t=1, w=0 was saved.
    let ckpts = dir.path().join(CHECKPOINTS_DIR);
    for entry in fs::read_dir(&ckpts).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name == FINAL_CHECKPOINT || name.as_str() > "t1_w0.json" {
            fs::remove_file(path).unwrap();
        }
    }
    let b = run_training(
        &mock_agents(),
        &train,
        &val,
        &g0(),
        &cfg,
        &TrainerOptions { resume: true, ..opts },
    )
    .unwrap();
    assert_eq!(a.result.unwrap().guideline, b.result.unwrap().guideline);
    same_text(&history, &read(dir.path(), "history.jsonl"), "history");
    same_text(&grades, &read(dir.path(), "grades.jsonl"), "grades");
}

#[test]
fn resume_checks_hashes_and_config() {
    let (train, val, _) = splits(&BASE_TAGS, "s");
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainerOptions {
        run_dir: Some(dir.path().to_path_buf()),
        halt_after_outer: Some(1),
        ..TrainerOptions::default()
    };
    let agents = mock_agents();
    run_training(&agents, &train, &val, &g0(), &config(1), &opts).unwrap();
    let resume = TrainerOptions { resume: true, ..opts };

    let err = run_training(&agents, &train, &val[1..], &g0(), &config(1), &resume).unwrap_err();
    assert!(matches!(err, Error::Workbench(WorkbenchError::HashMismatch { what: "dataset", .. })), "{err}");

    let other = g0().with_adaptation_rules("IF t1 THEN 2");
    let err = run_training(&agents, &train, &val, &other, &config(1), &resume).unwrap_err();
    assert!(matches!(err, Error::Workbench(WorkbenchError::HashMismatch { what: "guideline", .. })), "{err}");

    let err = run_training(&agents, &train, &val, &g0(), &config(2), &resume).unwrap_err();
    assert!(err.to_string().contains("config"), "{err}");

    let fresh = TrainerOptions { resume: false, ..resume };
    assert!(run_training(&agents, &train, &val, &g0(), &config(1), &fresh).is_err());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (train, val, _) = wide_splits();
    let cfg = slow_config(11);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let opts = TrainerOptions {
            run_dir: Some(d.path().to_path_buf()),
            ..TrainerOptions::default()
        };
        run_training(&mock_agents(), &train, &val, &g0(), &cfg, &opts).unwrap();
    }
    for name in ["history.jsonl", "grades.jsonl", "final_guideline.json"] {
        same_text(&read(dirs[0].path(), name), &read(dirs[1].path(), name), name);
    }
}

#[test]
fn structural_counters_hold_on_the_wide_world() {
    let (train, val, test) = wide_splits();
    let cfg = slow_config(5);
    let agents = mock_agents();
    let out = run_training(&agents, &train, &val, &g0(), &cfg, &TrainerOptions::default()).unwrap();
    assert!(out.history.iter().any(|r| r.ucb_rounds == cfg.ucb_rounds_factor * r.pool_size && r.pool_size > cfg.beam_size));
    for r in &out.history {
        assert!(r.selected.len() <= cfg.beam_size);
        assert!(r.model_calls <= r.model_call_bound, "t{} w{}: {} > {}", r.t, r.w, r.model_calls, r.model_call_bound);
    }
    // Running best is non-decreasing within each outer iteration.
    for t in 0..=out.history.last().unwrap().t {
        let m: Vec<f64> = out.history.iter().filter(|r| r.t == t).map(|r| r.best_metric).collect();
        assert!(m.windows(2).all(|w| w[1] >= w[0]), "t{t}: {m:?}");
    }
    let result = out.result.unwrap();
    assert!(validate_guideline(&result.guideline, &g0()).passed());
    let (report, _) = evaluate_guideline(&agents, &result.guideline, &test, KappaWeighting::Unweighted).unwrap();
    assert!(report.accuracy >= 0.95);
}

/// Mock grading, except answers mentioning `item 3 ` never parse.
fn flaky_gateway(calls: Arc<AtomicUsize>) -> Gateway {
    let backend = ScriptedBackend::from_fn(move |req: &CompletionRequest| {
        if req.prompt.contains("item 3\n") {
            calls.fetch_add(1, Ordering::SeqCst);
            return Ok(CompletionResult {
                text: "no idea".into(),
                category_logprobs: Some(RuleWorldBackend::distribution(1, &[0, 1, 2])),
                backend_meta: Default::default(),
            });
        }
        RuleWorldBackend.complete(req)
    });
    Gateway::new(
        Arc::new(backend),
        BackendPolicy {
            backoff_base_ms: 0,
            ..BackendPolicy::default()
        },
    )
}

#[test]
fn unparseable_grades_become_sentinels() {
    let calls = Arc::new(AtomicUsize::new(0));
    let agents = agents_over(flaky_gateway(calls.clone()));
    let data = rule_world("s", 6, &BASE_TAGS);
    let g = g0().with_adaptation_rules("IF t1 THEN 2\nIF t2 THEN 1");
    let (report, outcomes) = evaluate_guideline(&agents, &g, &data, KappaWeighting::Unweighted).unwrap();
    assert_eq!(report.unparseable_count, 1);
    assert!((report.accuracy - 5.0 / 6.0).abs() < 1e-12);
    assert!(report.kappa < 1.0);
    assert!(matches!(outcomes[3], Err(AgentError::Unparseable { attempts: 3, .. })));
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn mostly_failing_evaluation_is_rejected() {
    let backend = ScriptedBackend::from_fn(|_req: &CompletionRequest| {
        Ok(CompletionResult {
            text: "???".into(),
            category_logprobs: None,
            backend_meta: Default::default(),
        })
    });
    let agents = agents_over(Gateway::new(
        Arc::new(backend),
        BackendPolicy {
            backoff_base_ms: 0,
            ..BackendPolicy::default()
        },
    ));
    let data = rule_world("s", 4, &BASE_TAGS);
    let err = evaluate_guideline(&agents, &g0(), &data, KappaWeighting::Unweighted).unwrap_err();
    assert!(matches!(err, Error::TooManyFailures { failed: 4, total: 4, .. }), "{err}");
}

struct Slow;

impl Backend for Slow {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, guideopt::error::GatewayError> {
        std::thread::sleep(Duration::from_millis(3));
        RuleWorldBackend.complete(req)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, guideopt::error::GatewayError> {
        RuleWorldBackend.embed(text)
    }

    fn descriptor(&self) -> String {
        "slow".into()
    }
}

#[test]
fn in_flight_requests_respect_the_cap() {
    let gateway = Gateway::new(
        Arc::new(Slow),
        BackendPolicy {
            max_concurrent_requests: 2,
            ..BackendPolicy::default()
        },
    );
    let agents = agents_over(gateway);
    let data = rule_world("s", 24, &BASE_TAGS);
    evaluate_guideline(&agents, &g0(), &data, KappaWeighting::Unweighted).unwrap();
    let stats = agents.gateway().stats();
    assert!(stats.max_in_flight <= 2 && stats.max_in_flight >= 1, "{stats:?}");
    assert_eq!(stats.completion_attempts, 24);
}

#[test]
fn confidence_ignores_labels() {
    let agents = mock_agents();
    let g = g0().with_adaptation_rules("IF t1 THEN 2");
    let data = rule_world("s", 9, &BASE_TAGS);
    let relabeled: Vec<LabeledSample> = data
        .iter()
        .map(|s| LabeledSample::new(s.sample.clone(), 2 - s.label))
        .collect();
    let a: Vec<_> = data.iter().map(|s| s.sample.clone()).collect();
    let b: Vec<_> = relabeled.iter().map(|s| s.sample.clone()).collect();
    let za = guideopt::adaptation::confidence_indicator(&agents, &g, &a).unwrap();
    let zb = guideopt::adaptation::confidence_indicator(&agents, &g, &b).unwrap();
    assert_eq!(za, zb);
    assert_eq!(za.zeta, 0.9f64.ln());
}

#[test]
fn embeddings_are_attached_once() {
    let data = embedded(rule_world("s", 30, &BASE_TAGS));
    let agents = mock_agents();
    let (train, val) = data.split_at(24);
    let mut cfg = config(3);
    cfg.outer_iterations = 1;
    run_training(&agents, train, val, &g0(), &cfg, &TrainerOptions::default()).unwrap();
    assert_eq!(agents.gateway().stats().embed_attempts, 0);
}

#[test]
fn checkpoint_round_trips() {
    let (train, val, _) = splits(&BASE_TAGS, "s");
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainerOptions {
        run_dir: Some(dir.path().to_path_buf()),
        halt_after_outer: Some(1),
        ..TrainerOptions::default()
    };
    run_training(&mock_agents(), &train, &val, &g0(), &config(4), &opts).unwrap();
    let path = workbench::latest_checkpoint(dir.path()).unwrap().unwrap();
    let ckpt = workbench::load_checkpoint(&path).unwrap();
    let json = serde_json::to_string(&ckpt).unwrap();
    let back: guideopt::RunCheckpoint = serde_json::from_str(&json).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.state.beam, ckpt.state.beam);
}
