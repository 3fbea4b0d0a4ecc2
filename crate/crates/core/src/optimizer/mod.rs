//! Nested outer/inner beam search over adaptation rules.
//!
//! Each outer iteration draws a batch of training answers. Each inner
//! iteration grades that batch with every beam member, sends samples of the
//! failures to `L` reflect/refine branches per member, and keeps the best `K`
//! guidelines from parents plus children by UCB over validation minibatches.

mod cache;
mod ucb;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{GradeCache, GradeEntry};
pub use ucb::{beam_order, select_top_k_ucb, ucb_priority, ArmEvaluator, Selection, UcbSettings};

use crate::adaptation::confidence_from_outputs;
use crate::agents::{Agents, ErrorCase};
use crate::error::{Error, WorkbenchError};
use crate::metrics::{report_from_outcomes, EvalReport};
use crate::model::{validate_guideline, GradingOutput, Guideline, LabeledSample, Lineage, RunConfig};
use crate::rng::{substream, RunRng, Stream};
use crate::sampler::{compose_outer_batch, SeedPolicy};
use crate::workbench::{self, RunLock};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Best-metric value recorded when no beam member has been evaluated yet.
pub const UNEVALUATED_METRIC: f64 = -1.0;

/// A guideline with its running validation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub guideline: Guideline,
    pub eval_count: usize,
    pub mean_kappa: f64,
    pub last_eval_kappa: Option<f64>,
}

impl Candidate {
    pub fn new(guideline: Guideline) -> Self {
        Self {
            guideline,
            eval_count: 0,
            mean_kappa: 0.0,
            last_eval_kappa: None,
        }
    }

    pub fn record(&mut self, kappa: f64) {
        self.eval_count += 1;
        self.mean_kappa += (kappa - self.mean_kappa) / self.eval_count as f64;
        self.last_eval_kappa = Some(kappa);
    }

    fn metric(&self) -> f64 {
        if self.eval_count > 0 {
            self.mean_kappa
        } else {
            UNEVALUATED_METRIC
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamState {
    pub t: usize,
    pub w: usize,
    pub members: Vec<Candidate>,
    /// Running best of the top member's mean kappa within the current inner loop.
    pub best_metric_history: Vec<f64>,
}

impl BeamState {
    pub fn initial(g0: &Guideline) -> Self {
        Self {
            t: 0,
            w: 0,
            members: vec![Candidate::new(g0.clone())],
            best_metric_history: Vec::new(),
        }
    }

    pub fn top(&self) -> &Candidate {
        &self.members[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMember {
    pub content_id: String,
    pub lineage: Option<Lineage>,
    pub eval_count: usize,
    pub mean_kappa: f64,
}

/// Audit entry for one inner iteration. `wall_clock_ms` is kept out of the
/// serialized history so that history files compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub w: usize,
    pub outer_batch: Vec<String>,
    /// Errors on the outer batch, keyed by parent content id.
    pub error_counts: BTreeMap<String, usize>,
    pub children: Vec<String>,
    pub pool_size: usize,
    /// Validation-minibatch evaluations spent on selection.
    pub ucb_rounds: usize,
    pub selected: Vec<SelectedMember>,
    pub best_metric: f64,
    pub inner_early_stop: bool,
    pub outer_early_stop: bool,
    pub model_calls: usize,
    pub model_call_bound: usize,
    #[serde(skip)]
    pub wall_clock_ms: u64,
}

/// True once the running best has not strictly improved for `patience`
/// consecutive entries. The first entry always counts as an improvement.
pub fn early_stop_check(m: &[f64], patience: usize) -> bool {
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for &v in m {
        if v > best {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience.max(1)
}

/// True once the last `patience` outer iterations each ended by inner early stop.
pub fn outer_stop_check(inner_stops: &[bool], patience: usize) -> bool {
    let p = patience.max(1);
    inner_stops.len() >= p && inner_stops[inner_stops.len() - p..].iter().all(|&s| s)
}

/// Upper bound on model calls in one inner iteration, assuming one attempt per call.
pub fn model_call_bound(config: &RunConfig, batch: usize, rounds: usize, minibatch: usize) -> usize {
    config.beam_size * batch
        + config.beam_size * config.parallel_branches * 2
        + rounds * minibatch
}

/// Rewards arms with kappa on a fresh random validation minibatch.
pub struct MinibatchEvaluator<'a> {
    pub agents: &'a Agents,
    pub val: &'a [LabeledSample],
    pub minibatch: usize,
    pub config: &'a RunConfig,
    pub cache: &'a mut GradeCache,
}

impl ArmEvaluator for MinibatchEvaluator<'_> {
    fn evaluate(&mut self, candidate: &Candidate, rng: &mut RunRng) -> Result<f64, Error> {
        let size = self.minibatch.min(self.val.len());
        let picked: Vec<LabeledSample> = index::sample(rng, self.val.len(), size)
            .into_iter()
            .map(|i| self.val[i].clone())
            .collect();
        let answers: Vec<_> = picked.iter().map(|s| &s.sample).collect();
        let outcomes = self.cache.grade(self.agents, &candidate.guideline, &answers);
        let report = report_from_outcomes(
            &picked,
            &outcomes,
            &candidate.guideline.scale,
            self.config.kappa_weighting,
        )?;
        Ok(report.kappa)
    }
}

/// Mutable services an inner iteration draws on.
pub struct InnerContext<'a> {
    pub agents: &'a Agents,
    pub config: &'a RunConfig,
    pub g0: &'a Guideline,
    pub val: &'a [LabeledSample],
    pub cache: &'a mut GradeCache,
    pub inner_rng: &'a mut RunRng,
    pub ucb_rng: &'a mut RunRng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerReport {
    pub error_counts: BTreeMap<String, usize>,
    pub children: Vec<String>,
    pub pool_size: usize,
    pub ucb_rounds: usize,
    pub model_calls: usize,
    pub model_call_bound: usize,
}

struct Branch {
    k: usize,
    l: usize,
    parent: Guideline,
    errors: Vec<ErrorCase>,
}

/// One inner iteration at coordinates `(t, w)`.
pub fn run_inner_iteration(
    ctx: &mut InnerContext<'_>,
    beam: &BeamState,
    b_out: &[LabeledSample],
    (t, w): (usize, usize),
) -> Result<(BeamState, InnerReport), Error> {
    if beam.members.is_empty() {
        return Err(Error::Invalid("beam is empty".into()));
    }
    let calls_before = ctx.agents.gateway().stats().completion_attempts;
    let answers: Vec<_> = b_out.iter().map(|s| &s.sample).collect();

    let mut error_counts = BTreeMap::new();
    let mut branches = Vec::new();
    for (k, member) in beam.members.iter().enumerate() {
        let g = &member.guideline;
        let outcomes = ctx.cache.grade(ctx.agents, g, &answers);
        let mut errors: Vec<ErrorCase> = Vec::new();
        for (sample, outcome) in b_out.iter().zip(outcomes) {
            match outcome {
                Ok(out) => errors.extend(ErrorCase::new(sample.clone(), out)),
                Err(e) => log::warn!("grading {} failed: {e}", sample.id()),
            }
        }
        errors.sort_by(|a, b| a.id().cmp(b.id()));
        error_counts.insert(g.content_id(), errors.len());
        if errors.is_empty() {
            continue;
        }
        let take = errors.len().min(ctx.config.inner_batch_size);
        for l in 0..ctx.config.parallel_branches {
            let mut picked: Vec<usize> = index::sample(ctx.inner_rng, errors.len(), take).into_vec();
            picked.sort_unstable();
            branches.push(Branch {
                k,
                l,
                parent: g.clone(),
                errors: picked.into_iter().map(|i| errors[i].clone()).collect(),
            });
        }
    }

    let agents = ctx.agents;
    let refined: Vec<Result<Guideline, Error>> = branches
        .par_iter()
        .map(|b| {
            let report = agents.reflect(&b.parent, &b.errors)?;
            Ok(agents.refine(&b.parent, &b.errors, &report, (t, w, b.k, b.l))?)
        })
        .collect();

    let mut pool: Vec<Candidate> = beam.members.clone();
    let mut seen: HashSet<String> = pool.iter().map(|c| c.guideline.content_id()).collect();
    let mut children = Vec::new();
    for child in refined {
        let child = child?;
        let report = validate_guideline(&child, ctx.g0);
        if !report.passed() {
            return Err(Error::Invalid(format!(
                "refined guideline altered expert sections: {:?}",
                report.violations
            )));
        }
        let id = child.content_id();
        if seen.insert(id.clone()) {
            children.push(id);
            pool.push(Candidate::new(child));
        }
    }
    let pool_size = pool.len();

    let minibatch = ctx.config.ucb_minibatch_size.min(ctx.val.len());
    let settings = UcbSettings {
        beam_size: ctx.config.beam_size,
        rounds_factor: ctx.config.ucb_rounds_factor,
        exploration_c: ctx.config.ucb_exploration_c,
    };
    let mut evaluator = MinibatchEvaluator {
        agents: ctx.agents,
        val: ctx.val,
        minibatch,
        config: ctx.config,
        cache: ctx.cache,
    };
    let selection = if pool.len() <= settings.beam_size {
        // No bandit rounds, but a beam ordered by kappa needs one estimate per member.
        let mut pulls = 0;
        for c in pool.iter_mut().filter(|c| c.eval_count == 0) {
            let reward = evaluator.evaluate(c, ctx.ucb_rng)?;
            c.record(reward);
            pulls += 1;
        }
        pool.sort_by(beam_order);
        Selection {
            beam: pool,
            rounds: pulls,
        }
    } else {
        select_top_k_ucb(pool, settings, &mut evaluator, ctx.ucb_rng)?
    };

    let prev_best = beam
        .best_metric_history
        .last()
        .copied()
        .unwrap_or(f64::NEG_INFINITY);
    let mut history = beam.best_metric_history.clone();
    history.push(prev_best.max(selection.beam[0].metric()));
    let model_calls = ctx.agents.gateway().stats().completion_attempts - calls_before;
    let report = InnerReport {
        error_counts,
        children,
        pool_size,
        ucb_rounds: selection.rounds,
        model_calls,
        model_call_bound: model_call_bound(ctx.config, b_out.len(), selection.rounds, minibatch),
    };
    Ok((
        BeamState {
            t,
            w,
            members: selection.beam,
            best_metric_history: history,
        },
        report,
    ))
}

/// Position in the nested loop after the last completed inner iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    /// Outer iteration to run next (or in progress).
    pub t: usize,
    /// Inner iteration to run next within `t`.
    pub w: usize,
    pub beam: BeamState,
    /// Current outer batch ids, `None` when the next step draws a new one.
    pub outer_batch: Option<Vec<String>>,
    /// Grades of the previous outer batch by the top beam member.
    pub prev_records: Option<Vec<(String, GradingOutput)>>,
    pub inner_stops: Vec<bool>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub outer: RunRng,
    pub inner: RunRng,
    pub ucb: RunRng,
}

impl RngStates {
    pub fn new(seed: u64) -> Self {
        Self {
            outer: substream(seed, Stream::OuterBatch),
            inner: substream(seed, Stream::InnerBatch),
            ucb: substream(seed, Stream::Ucb),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub guideline: Guideline,
    pub validation: EvalReport,
    /// Full-validation kappa of each final beam member, in beam order.
    pub beam_kappas: Vec<(String, f64)>,
    /// Mean maximum category log-probability of the final guideline over the
    /// training split; the reference for later shift checks.
    pub mu: f64,
}

/// Full optimizer state at a loop boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub schema_version: u32,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub g0_hash: String,
    pub backend: String,
    pub state: LoopState,
    pub rng: RngStates,
    pub history: Vec<IterationRecord>,
    pub grade_cache_len: usize,
    pub embedding_cache: Option<String>,
    pub result: Option<FinalResult>,
}

/// Content hash of the train and validation splits (ids, texts, labels).
pub fn dataset_hash(train: &[LabeledSample], val: &[LabeledSample]) -> String {
    let mut h = Sha256::new();
    for (name, split) in [("train", train), ("val", val)] {
        h.update(name.as_bytes());
        h.update([0]);
        for s in split {
            for part in [s.id(), &s.sample.question_id, &s.sample.answer_text] {
                h.update((part.len() as u64).to_le_bytes());
                h.update(part.as_bytes());
            }
            h.update(s.label.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default)]
pub struct TrainerOptions {
    /// Run directory for checkpoints and logs; `None` keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many completed outer iterations without finishing.
    pub halt_after_outer: Option<usize>,
    /// Recorded in checkpoints as the embedding cache in use.
    pub embedding_cache: Option<String>,
    /// Wall-clock log, kept outside the run directory so that run artifacts
    /// stay reproducible.
    pub timings_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// `None` when the run halted early on request.
    pub result: Option<FinalResult>,
    pub history: Vec<IterationRecord>,
    pub beam: BeamState,
}

/// Nested reflect/refine optimization of `g0`'s adaptation rules.
pub fn run_training(
    agents: &Agents,
    train: &[LabeledSample],
    val: &[LabeledSample],
    g0: &Guideline,
    config: &RunConfig,
    options: &TrainerOptions,
) -> Result<TrainingOutcome, Error> {
    config.check()?;
    g0.check()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("train and validation splits must be non-empty".into()));
    }
    let mut train = train.to_vec();
    attach_missing_embeddings(agents, &mut train)?;

    let _lock = match &options.run_dir {
        Some(dir) => Some(RunLock::acquire(dir)?),
        None => None,
    };
    let data_hash = dataset_hash(&train, val);
    let g0_hash = g0.content_id();

    let (mut state, mut rng, mut history, mut cache, stored) =
        match (options.resume, options.run_dir.as_deref()) {
            (true, Some(dir)) => resume(dir, config, &data_hash, &g0_hash)?,
            (true, None) => return Err(Error::Invalid("resume requires a run directory".into())),
            (false, dir) => {
                if let Some(dir) = dir {
                    workbench::prepare_fresh_run(dir)?;
                }
                let state = LoopState {
                    t: 0,
                    w: 0,
                    beam: BeamState::initial(g0),
                    outer_batch: None,
                    prev_records: None,
                    inner_stops: Vec::new(),
                    done: false,
                };
                (state, RngStates::new(config.rng_seed), Vec::new(), GradeCache::default(), None)
            }
        };
    if let Some(result) = stored {
        return Ok(TrainingOutcome {
            result: Some(result),
            history,
            beam: state.beam,
        });
    }

    let checkpoint = |state: &LoopState,
                      rng: &RngStates,
                      history: &[IterationRecord],
                      cache: &mut GradeCache,
                      result: Option<FinalResult>|
     -> Result<(), Error> {
        let Some(dir) = &options.run_dir else {
            return Ok(());
        };
        cache.flush(&workbench::grades_path(dir))?;
        let ckpt = RunCheckpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: config.clone(),
            dataset_hash: data_hash.clone(),
            g0_hash: g0_hash.clone(),
            backend: agents.gateway().descriptor(),
            state: state.clone(),
            rng: rng.clone(),
            history: history.to_vec(),
            grade_cache_len: cache.len(),
            embedding_cache: options.embedding_cache.clone(),
            result,
        };
        workbench::save_checkpoint(dir, &ckpt)?;
        workbench::write_history(dir, history)?;
        Ok(())
    };

    let policy = SeedPolicy {
        seed_count: config.seed_count,
        scale: &g0.scale,
        variant: config.psi_variant,
    };
    let batch_size = config.outer_batch_size.min(train.len());
    let mut completed_outer = state.inner_stops.len();

    while !state.done {
        let b_out: Vec<LabeledSample> = match &state.outer_batch {
            Some(ids) => lookup(&train, ids)?,
            None => {
                let prev: Option<Vec<(LabeledSample, GradingOutput)>> =
                    match &state.prev_records {
                        Some(records) => Some(
                            records
                                .iter()
                                .map(|(id, out)| Ok((find(&train, id)?.clone(), out.clone())))
                                .collect::<Result<_, Error>>()?,
                        ),
                        None => None,
                    };
                let batch =
                    compose_outer_batch(&train, prev.as_deref(), batch_size, &mut rng.outer, policy)?;
                state.outer_batch = Some(batch.ids());
                state.w = 0;
                state.beam.best_metric_history.clear();
                batch.samples
            }
        };
        let (t, w) = (state.t, state.w);
        let started = Instant::now();
        let mut ctx = InnerContext {
            agents,
            config,
            g0,
            val,
            cache: &mut cache,
            inner_rng: &mut rng.inner,
            ucb_rng: &mut rng.ucb,
        };
        let (beam, report) = run_inner_iteration(&mut ctx, &state.beam, &b_out, (t, w))?;
        state.beam = beam;
        let inner_stop = early_stop_check(&state.beam.best_metric_history, config.early_stop_patience);
        let mut outer_stop = false;
        if inner_stop || w + 1 >= config.inner_iterations {
            let answers: Vec<_> = b_out.iter().map(|s| &s.sample).collect();
            let top = state.beam.top().guideline.clone();
            let records = b_out
                .iter()
                .zip(cache.grade(agents, &top, &answers))
                .filter_map(|(s, o)| o.ok().map(|o| (s.id().to_string(), o)))
                .collect();
            state.prev_records = Some(records);
            state.inner_stops.push(inner_stop);
            outer_stop = outer_stop_check(&state.inner_stops, config.early_stop_patience);
            state.outer_batch = None;
            state.t += 1;
            state.w = 0;
            state.done = outer_stop || state.t >= config.outer_iterations;
            completed_outer += 1;
        } else {
            state.w += 1;
        }
        let record = IterationRecord {
            t,
            w,
            outer_batch: b_out.iter().map(|s| s.id().to_string()).collect(),
            error_counts: report.error_counts,
            children: report.children,
            pool_size: report.pool_size,
            ucb_rounds: report.ucb_rounds,
            selected: state
                .beam
                .members
                .iter()
                .map(|c| SelectedMember {
                    content_id: c.guideline.content_id(),
                    lineage: c.guideline.lineage.clone(),
                    eval_count: c.eval_count,
                    mean_kappa: c.mean_kappa,
                })
                .collect(),
            best_metric: *state.beam.best_metric_history.last().unwrap_or(&UNEVALUATED_METRIC),
            inner_early_stop: inner_stop,
            outer_early_stop: outer_stop,
            model_calls: report.model_calls,
            model_call_bound: report.model_call_bound,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "t={t} w={w} best={:.4} pool={} calls={}",
            record.best_metric,
            record.pool_size,
            record.model_calls
        );
        if let Some(path) = &options.timings_path {
            workbench::append_timing(path, t, w, record.wall_clock_ms)?;
        }
        history.push(record);
        checkpoint(&state, &rng, &history, &mut cache, None)?;
        let at_boundary = state.outer_batch.is_none();
        if !state.done && at_boundary && options.halt_after_outer.is_some_and(|h| completed_outer >= h) {
            return Ok(TrainingOutcome {
                result: None,
                history,
                beam: state.beam,
            });
        }
    }

    let result = finalize(agents, &train, val, config, &state.beam, &mut cache)?;
    checkpoint(&state, &rng, &history, &mut cache, Some(result.clone()))?;
    if let Some(dir) = &options.run_dir {
        workbench::write_json_atomic(&dir.join(workbench::FINAL_GUIDELINE_FILE), &result)?;
    }
    Ok(TrainingOutcome {
        result: Some(result),
        history,
        beam: state.beam,
    })
}

type Resumed = (
    LoopState,
    RngStates,
    Vec<IterationRecord>,
    GradeCache,
    Option<FinalResult>,
);

fn resume(dir: &Path, config: &RunConfig, data_hash: &str, g0_hash: &str) -> Result<Resumed, Error> {
    let path = workbench::latest_checkpoint(dir)?.ok_or_else(|| {
        WorkbenchError::Invalid(format!("no checkpoint found under {}", dir.display()))
    })?;
    let ckpt = workbench::load_checkpoint(&path)?;
    if ckpt.dataset_hash != data_hash {
        return Err(WorkbenchError::HashMismatch {
            what: "dataset",
            expected: ckpt.dataset_hash,
            found: data_hash.to_string(),
        }
        .into());
    }
    if ckpt.g0_hash != g0_hash {
        return Err(WorkbenchError::HashMismatch {
            what: "guideline",
            expected: ckpt.g0_hash,
            found: g0_hash.to_string(),
        }
        .into());
    }
    if &ckpt.config != config {
        return Err(WorkbenchError::Invalid(
            "run config differs from the checkpointed config".into(),
        )
        .into());
    }
    let cache = GradeCache::restore(&workbench::grades_path(dir), ckpt.grade_cache_len)?;
    workbench::write_history(dir, &ckpt.history)?;
    log::info!(
        "resuming from {} at t={} w={}",
        path.display(),
        ckpt.state.t,
        ckpt.state.w
    );
    Ok((ckpt.state, ckpt.rng, ckpt.history, cache, ckpt.result))
}

/// Re-evaluate the final beam on the full validation split and keep the best.
fn finalize(
    agents: &Agents,
    train: &[LabeledSample],
    val: &[LabeledSample],
    config: &RunConfig,
    beam: &BeamState,
    cache: &mut GradeCache,
) -> Result<FinalResult, Error> {
    let answers: Vec<_> = val.iter().map(|s| &s.sample).collect();
    let mut best: Option<(usize, EvalReport)> = None;
    let mut beam_kappas = Vec::new();
    for (i, member) in beam.members.iter().enumerate() {
        let g = &member.guideline;
        let outcomes = cache.grade(agents, g, &answers);
        let report = report_from_outcomes(val, &outcomes, &g.scale, config.kappa_weighting)?;
        beam_kappas.push((g.content_id(), report.kappa));
        if best.as_ref().is_none_or(|(_, b)| report.kappa > b.kappa) {
            best = Some((i, report));
        }
    }
    let (i, validation) = best.expect("beam is non-empty");
    let guideline = beam.members[i].guideline.clone();
    let train_answers: Vec<_> = train.iter().map(|s| &s.sample).collect();
    let outputs = cache.grade(agents, &guideline, &train_answers);
    let mu = confidence_from_outputs(&outputs)?.zeta;
    Ok(FinalResult {
        guideline,
        validation,
        beam_kappas,
        mu,
    })
}

fn find<'a>(data: &'a [LabeledSample], id: &str) -> Result<&'a LabeledSample, Error> {
    data.iter()
        .find(|s| s.id() == id)
        .ok_or_else(|| Error::Invalid(format!("checkpoint references unknown sample `{id}`")))
}

fn lookup(data: &[LabeledSample], ids: &[String]) -> Result<Vec<LabeledSample>, Error> {
    ids.iter().map(|id| find(data, id).cloned()).collect()
}

fn attach_missing_embeddings(agents: &Agents, data: &mut [LabeledSample]) -> Result<(), Error> {
    let gateway = agents.gateway();
    let computed: Vec<Option<Vec<f64>>> = data
        .par_iter()
        .map(|s| match &s.sample.embedding {
            Some(_) => Ok(None),
            None => gateway.embed(&s.sample.answer_text).map(Some),
        })
        .collect::<Result<_, _>>()?;
    for (s, e) in data.iter_mut().zip(computed) {
        if e.is_some() {
            s.sample.embedding = e;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_examples() {
        assert!(early_stop_check(&[0.5, 0.6, 0.6, 0.6], 2));
        assert!(!early_stop_check(&[0.5, 0.6, 0.6], 2));
        assert!(!early_stop_check(&[0.5, 0.6, 0.7], 2));
        assert!(early_stop_check(&[0.5, 0.5, 0.5], 2));
        assert!(!early_stop_check(&[0.5, 0.5], 2));
        assert!(!early_stop_check(&[], 2));
    }

    #[test]
    fn outer_stop_needs_consecutive_inner_stops() {
        assert!(!outer_stop_check(&[true], 2));
        assert!(!outer_stop_check(&[true, false], 2));
        assert!(outer_stop_check(&[false, true, true], 2));
    }

    #[test]
    fn running_mean() {
        let mut c = Candidate::new(Guideline::new("Q", "K", "R"));
        assert_eq!(c.metric(), UNEVALUATED_METRIC);
        c.record(0.5);
        c.record(1.0);
        assert_eq!(c.eval_count, 2);
        assert!((c.mean_kappa - 0.75).abs() < 1e-12);
        assert_eq!(c.last_eval_kappa, Some(1.0));
    }
}
