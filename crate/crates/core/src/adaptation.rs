//! Test-time stage: grader confidence as a shift signal, adaptation of an
//! optimized guideline on a small annotated slice, and the annotation-size
//! schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agents::Agents;
use crate::error::{AgentError, Error, MetricsError};
use crate::model::{AnswerSample, GradingOutput, Guideline, LabeledSample, RunConfig};
use crate::optimizer::{run_training, TrainerOptions, TrainingOutcome};
use crate::rng::{substream, Stream};

/// Default number of unlabeled answers probed for distribution shift.
pub const DEFAULT_PROBE_SIZE: usize = 100;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;
pub const DEFAULT_BUDGET_SCHEDULE: [usize; 4] = [25, 50, 75, 100];
/// 0.02 kappa per 25 labels.
pub const DEFAULT_MIN_MARGINAL_GAIN: f64 = 0.0008;

/// Mean of per-sample maximum category log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceProbe {
    pub zeta: f64,
    pub per_sample: BTreeMap<String, f64>,
}

/// Mean maximum log-probability over the successful outputs. More than half
/// failing (or lacking a distribution) invalidates the measurement.
pub fn confidence_from_outputs(
    outputs: &[Result<GradingOutput, AgentError>],
) -> Result<ConfidenceProbe, Error> {
    let ids: Vec<String> = (0..outputs.len()).map(|i| i.to_string()).collect();
    confidence_over(&ids, outputs)
}

fn confidence_over(
    ids: &[String],
    outputs: &[Result<GradingOutput, AgentError>],
) -> Result<ConfidenceProbe, Error> {
    if outputs.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    let per_sample: BTreeMap<String, f64> = ids
        .iter()
        .zip(outputs)
        .filter_map(|(id, o)| {
            let lp = o.as_ref().ok()?.max_logprob()?;
            Some((id.clone(), lp))
        })
        .collect();
    let failed = outputs.len() - per_sample.len();
    if failed * 2 > outputs.len() || per_sample.is_empty() {
        let first = outputs
            .iter()
            .find_map(|o| o.as_ref().err())
            .map_or_else(|| "missing category distribution".to_string(), |e| e.to_string());
        return Err(Error::TooManyFailures {
            failed,
            total: outputs.len(),
            first,
        });
    }
    Ok(ConfidenceProbe {
        zeta: pivoted_mean(per_sample.values().copied()),
        per_sample,
    })
}

/// Mean taken around the first value, so n copies of x average to exactly x
/// whatever n is. ζ and μ over equally confident outputs then compare equal.
fn pivoted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut values = values.peekable();
    let pivot = *values.peek().expect("non-empty");
    let (n, offset) = values.fold((0usize, 0.0), |(n, acc), v| (n + 1, acc + (v - pivot)));
    pivot + offset / n as f64
}

/// Grade `probe` under `g` and average the per-sample maximum log-probability.
/// Labels are never consulted.
pub fn confidence_indicator(
    agents: &Agents,
    g: &Guideline,
    probe: &[AnswerSample],
) -> Result<ConfidenceProbe, Error> {
    if probe.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    let refs: Vec<&AnswerSample> = probe.iter().collect();
    let outputs = agents.grade_all(&refs, g);
    let ids: Vec<String> = probe.iter().map(|s| s.id.clone()).collect();
    confidence_over(&ids, &outputs)
}

/// Reference confidence of the optimized guideline over the training split.
pub fn compute_reference_mu(
    agents: &Agents,
    g_opt: &Guideline,
    train: &[LabeledSample],
) -> Result<f64, Error> {
    let answers: Vec<AnswerSample> = train.iter().map(|s| s.sample.clone()).collect();
    Ok(confidence_indicator(agents, g_opt, &answers)?.zeta)
}

/// Shift is flagged only when ζ falls strictly below μ.
pub fn ood_check(zeta: f64, mu: f64) -> bool {
    zeta < mu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    pub zeta: f64,
    pub mu: f64,
    pub probe_size: usize,
    pub ood: bool,
    pub per_sample_max_logprobs: BTreeMap<String, f64>,
}

impl ConfidenceStats {
    pub fn new(probe: ConfidenceProbe, mu: f64) -> Self {
        Self {
            zeta: probe.zeta,
            mu,
            probe_size: probe.per_sample.len(),
            ood: ood_check(probe.zeta, mu),
            per_sample_max_logprobs: probe.per_sample,
        }
    }
}

/// Seeded sample of at most `size` answers, returned in input order.
pub fn select_probe(samples: &[AnswerSample], size: usize, seed: u64) -> Vec<AnswerSample> {
    let mut rng = substream(seed, Stream::Adaptation);
    let mut picked: Vec<usize> =
        rand::seq::index::sample(&mut rng, samples.len(), size.min(samples.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| samples[i].clone()).collect()
}

/// Seeded train/validation split of an annotated slice. The validation part
/// holds round(n × fraction) samples, at least one, and never everything.
pub fn split_annotated(
    annotated: &[LabeledSample],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>), Error> {
    if annotated.len() < 2 {
        return Err(Error::Invalid(
            "adaptation needs at least two annotated samples".into(),
        ));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Invalid("val_fraction must be in [0, 1)".into()));
    }
    let mut shuffled = annotated.to_vec();
    shuffled.sort_by(|a, b| a.id().cmp(b.id()));
    shuffled.shuffle(&mut substream(seed, Stream::Adaptation));
    let n_val = ((annotated.len() as f64 * val_fraction).round() as usize).clamp(1, annotated.len() - 1);
    let train = shuffled.split_off(n_val);
    Ok((train, shuffled))
}

/// Re-run the optimizer from `g_opt` on an annotated slice of the new population.
pub fn test_time_adapt(
    agents: &Agents,
    g_opt: &Guideline,
    annotated: &[LabeledSample],
    val_fraction: f64,
    config: &RunConfig,
    options: &TrainerOptions,
) -> Result<TrainingOutcome, Error> {
    let (train, val) = split_annotated(annotated, val_fraction, config.rng_seed)?;
    let mut start = g_opt.clone();
    start.lineage = None;
    run_training(agents, &train, &val, &start, config, options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBudgetPlan {
    pub schedule: Vec<usize>,
    /// (size, kappa) for every size evaluated, in order.
    pub evaluated: Vec<(usize, f64)>,
    /// (size, Δkappa per added label).
    pub marginal_gains: Vec<(usize, f64)>,
    pub chosen_size: usize,
    pub stopped_early: bool,
}

/// Walk an increasing schedule of annotation sizes, stopping once the
/// per-label kappa gain drops below `min_marginal_gain`, and choose the size
/// with the largest gain (ties to the smaller size).
///
/// With `baseline` (kappa before any annotation) the first size also gets a
/// gain measured from size 0; without it, gains start at the second size.
pub fn plan_label_budget<F>(
    schedule: &[usize],
    mut eval_fn: F,
    min_marginal_gain: f64,
    baseline: Option<f64>,
) -> Result<LabelBudgetPlan, Error>
where
    F: FnMut(usize) -> Result<f64, Error>,
{
    if schedule.is_empty() {
        return Err(Error::Invalid("label budget schedule is empty".into()));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] == 0 {
        return Err(Error::Invalid(
            "label budget schedule must be positive and strictly increasing".into(),
        ));
    }
    let mut evaluated = Vec::new();
    let mut marginal_gains: Vec<(usize, f64)> = Vec::new();
    let mut prev = baseline.map(|k| (0usize, k));
    let mut stopped_early = false;
    for (i, &size) in schedule.iter().enumerate() {
        let kappa = eval_fn(size)?;
        evaluated.push((size, kappa));
        if let Some((prev_size, prev_kappa)) = prev {
            let gain = (kappa - prev_kappa) / (size - prev_size) as f64;
            marginal_gains.push((size, gain));
            if gain < min_marginal_gain {
                stopped_early = i + 1 < schedule.len();
                break;
            }
        }
        prev = Some((size, kappa));
    }
    let chosen_size = marginal_gains
        .iter()
        .fold(None::<(usize, f64)>, |best, &(s, g)| match best {
            Some((_, bg)) if g <= bg => best,
            _ => Some((s, g)),
        })
        .map_or(schedule[0], |(s, _)| s);
    Ok(LabelBudgetPlan {
        schedule: schedule.to_vec(),
        evaluated,
        marginal_gains,
        chosen_size,
        stopped_early,
    })
}
