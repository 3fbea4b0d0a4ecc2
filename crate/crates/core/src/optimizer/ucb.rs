//! Upper-confidence-bound selection of the next beam.

use std::cmp::Ordering;

use crate::error::Error;
use crate::rng::RunRng;

use super::Candidate;

/// UCB1 priority of an arm. Arms never pulled rank above everything else.
pub fn ucb_priority(mean: f64, n: usize, total: usize, c: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    mean + c * ((total.max(1) as f64).ln() / n as f64).sqrt()
}

/// Source of one noisy reward per pull.
pub trait ArmEvaluator {
    fn evaluate(&mut self, candidate: &Candidate, rng: &mut RunRng) -> Result<f64, Error>;
}

impl<F> ArmEvaluator for F
where
    F: FnMut(&Candidate, &mut RunRng) -> Result<f64, Error>,
{
    fn evaluate(&mut self, candidate: &Candidate, rng: &mut RunRng) -> Result<f64, Error> {
        self(candidate, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcbSettings {
    pub beam_size: usize,
    pub rounds_factor: usize,
    pub exploration_c: f64,
}

/// Beam ordering: evaluated before unevaluated, higher mean first, then
/// shorter adaptation rules, then lineage, then content id.
pub fn beam_order(a: &Candidate, b: &Candidate) -> Ordering {
    (b.eval_count > 0)
        .cmp(&(a.eval_count > 0))
        .then_with(|| b.mean_kappa.total_cmp(&a.mean_kappa))
        .then_with(|| {
            a.guideline
                .adaptation_rules
                .chars()
                .count()
                .cmp(&b.guideline.adaptation_rules.chars().count())
        })
        .then_with(|| a.guideline.lineage_key().cmp(&b.guideline.lineage_key()))
        .then_with(|| a.guideline.content_id().cmp(&b.guideline.content_id()))
}

/// Outcome of one selection: survivors in beam order and the number of pulls.
#[derive(Debug, Clone)]
pub struct Selection {
    pub beam: Vec<Candidate>,
    pub rounds: usize,
}

/// Run `rounds_factor × |pool|` UCB pulls, then keep the best `beam_size`
/// arms by mean reward. A pool that already fits the beam is returned as is.
pub fn select_top_k_ucb<E: ArmEvaluator + ?Sized>(
    mut pool: Vec<Candidate>,
    settings: UcbSettings,
    evaluator: &mut E,
    rng: &mut RunRng,
) -> Result<Selection, Error> {
    if pool.is_empty() {
        return Err(Error::Invalid("selection pool is empty".into()));
    }
    let mut rounds = 0;
    if pool.len() > settings.beam_size {
        rounds = settings.rounds_factor * pool.len();
        for _ in 0..rounds {
            let total: usize = pool.iter().map(|c| c.eval_count).sum();
            let mut best = 0;
            let mut best_priority = f64::NEG_INFINITY;
            for (i, c) in pool.iter().enumerate() {
                let p = ucb_priority(c.mean_kappa, c.eval_count, total, settings.exploration_c);
                if p > best_priority {
                    best = i;
                    best_priority = p;
                }
            }
            let reward = evaluator.evaluate(&pool[best], rng)?;
            pool[best].record(reward);
        }
    }
    pool.sort_by(beam_order);
    pool.truncate(settings.beam_size);
    Ok(Selection { beam: pool, rounds })
}
