//! Outer-batch composition: misconfidence-ranked seeds, their embedding
//! neighbors, and a uniformly random remainder.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SamplerError;
use crate::model::{GradingOutput, LabeledSample, PsiVariant, Score, ScoreScale};

/// Smallest magnitude allowed for the true-label log-probability in the
/// misconfidence denominator.
pub const PSI_DENOMINATOR_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisconfidenceRecord {
    pub sample_id: String,
    pub psi: f64,
    pub logprob_true: f64,
    pub logprob_best_wrong: f64,
}

fn logprob_pair(
    output: &GradingOutput,
    label: Score,
    scale: &ScoreScale,
) -> Option<(f64, f64)> {
    let lp = &output.category_logprobs;
    if !scale.categories().iter().all(|c| lp.contains_key(c)) {
        return None;
    }
    let truth = *lp.get(&label)?;
    let best_wrong = scale
        .categories()
        .iter()
        .filter(|c| **c != label)
        .map(|c| lp[c])
        .fold(f64::NEG_INFINITY, f64::max);
    Some((truth, best_wrong))
}

fn psi_value(truth: f64, best_wrong: f64, variant: PsiVariant) -> f64 {
    match variant {
        PsiVariant::LogRatio => best_wrong / truth.min(-PSI_DENOMINATOR_CLAMP),
        PsiVariant::PsiProbRatio => (best_wrong - truth).exp(),
    }
}

/// Best wrong-category log-probability over the (clamped) true-label
/// log-probability.
pub fn misconfidence(
    output: &GradingOutput,
    label: Score,
    scale: &ScoreScale,
) -> Result<f64, SamplerError> {
    let (truth, best_wrong) = logprob_pair(output, label, scale)
        .ok_or_else(|| SamplerError::MissingDistribution(String::new()))?;
    Ok(psi_value(truth, best_wrong, PsiVariant::LogRatio))
}

pub fn misconfidence_record(
    sample: &LabeledSample,
    output: &GradingOutput,
    scale: &ScoreScale,
    variant: PsiVariant,
) -> Result<MisconfidenceRecord, SamplerError> {
    let (truth, best_wrong) = logprob_pair(output, sample.label, scale)
        .ok_or_else(|| SamplerError::MissingDistribution(sample.id().to_string()))?;
    Ok(MisconfidenceRecord {
        sample_id: sample.id().to_string(),
        psi: psi_value(truth, best_wrong, variant),
        logprob_true: truth,
        logprob_best_wrong: best_wrong,
    })
}

/// Ids of the `seed_count` highest-ψ samples of this batch, ties by id.
/// Samples without a full distribution are skipped.
pub fn rank_seeds(
    batch: &[(LabeledSample, GradingOutput)],
    seed_count: usize,
    scale: &ScoreScale,
    variant: PsiVariant,
) -> Vec<String> {
    let mut records: Vec<MisconfidenceRecord> = batch
        .iter()
        .filter_map(|(s, o)| match misconfidence_record(s, o, scale, variant) {
            Ok(r) => Some(r),
            Err(e) => {
                log::debug!("skipping seed candidate: {e}");
                None
            }
        })
        .collect();
    records.sort_by(|a, b| {
        b.psi
            .total_cmp(&a.psi)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    records
        .into_iter()
        .take(seed_count)
        .map(|r| r.sample_id)
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn embedding_of(s: &LabeledSample) -> Result<&[f64], SamplerError> {
    s.sample
        .embedding
        .as_deref()
        .ok_or_else(|| SamplerError::MissingEmbedding(s.id().to_string()))
}

/// Nearest pool neighbors of the seeds, taken round-robin one per seed per
/// round, skipping seeds and already chosen ids, until `quota` is met or the
/// pool is exhausted. Neighbor order is cosine descending, then id.
pub fn expand_by_similarity(
    seeds: &[String],
    pool: &[LabeledSample],
    quota: usize,
) -> Result<Vec<String>, SamplerError> {
    if quota == 0 || seeds.is_empty() {
        return Ok(Vec::new());
    }
    let seed_set: HashSet<&str> = seeds.iter().map(String::as_str).collect();
    let mut rankings: Vec<Vec<&str>> = Vec::with_capacity(seeds.len());
    for seed_id in seeds {
        let Some(seed) = pool.iter().find(|s| s.id() == seed_id) else {
            rankings.push(Vec::new());
            continue;
        };
        let anchor = embedding_of(seed)?;
        let mut scored: Vec<(f64, &str)> = pool
            .iter()
            .filter(|s| !seed_set.contains(s.id()))
            .map(|s| Ok((cosine(anchor, embedding_of(s)?), s.id())))
            .collect::<Result<_, SamplerError>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        rankings.push(scored.into_iter().map(|(_, id)| id).collect());
    }
    let mut cursors = vec![0usize; rankings.len()];
    let mut chosen: Vec<String> = Vec::new();
    let mut taken: HashSet<&str> = HashSet::new();
    loop {
        let mut progressed = false;
        for (ranking, cursor) in rankings.iter().zip(cursors.iter_mut()) {
            if chosen.len() == quota {
                return Ok(chosen);
            }
            while *cursor < ranking.len() && taken.contains(ranking[*cursor]) {
                *cursor += 1;
            }
            if let Some(id) = ranking.get(*cursor) {
                taken.insert(id);
                chosen.push((*id).to_string());
                *cursor += 1;
                progressed = true;
            }
        }
        if !progressed || chosen.len() == quota {
            return Ok(chosen);
        }
    }
}

/// A composed outer batch with the provenance of each half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterBatch {
    pub samples: Vec<LabeledSample>,
    pub seed_ids: Vec<String>,
    pub neighbor_ids: Vec<String>,
    pub random_ids: Vec<String>,
}

impl OuterBatch {
    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id().to_string()).collect()
    }

    pub fn misconfidence_count(&self) -> usize {
        self.seed_ids.len() + self.neighbor_ids.len()
    }
}

/// Settings for the misconfidence half of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedPolicy<'a> {
    pub seed_count: usize,
    pub scale: &'a ScoreScale,
    pub variant: PsiVariant,
}

/// Draw `size` distinct samples from `train`.
///
/// Without previous grading records the batch is uniform random. Otherwise
/// ⌈size/2⌉ come from top-ψ seeds of the previous batch plus their nearest
/// neighbors and ⌊size/2⌋ are uniform from the rest (which also covers any
/// shortfall of the first half). The result is shuffled.
pub fn compose_outer_batch<R: Rng + ?Sized>(
    train: &[LabeledSample],
    prev: Option<&[(LabeledSample, GradingOutput)]>,
    size: usize,
    rng: &mut R,
    policy: SeedPolicy<'_>,
) -> Result<OuterBatch, SamplerError> {
    if size > train.len() {
        return Err(SamplerError::SizeExceedsDataset {
            size,
            available: train.len(),
        });
    }
    let mut seed_ids: Vec<String> = Vec::new();
    let mut neighbor_ids: Vec<String> = Vec::new();
    if let Some(prev) = prev.filter(|p| !p.is_empty()) {
        let half = size.div_ceil(2);
        let train_ids: HashSet<&str> = train.iter().map(|s| s.id()).collect();
        seed_ids = rank_seeds(prev, policy.seed_count.min(half), policy.scale, policy.variant)
            .into_iter()
            .filter(|id| train_ids.contains(id.as_str()))
            .collect();
        neighbor_ids = expand_by_similarity(&seed_ids, train, half - seed_ids.len())?;
    }
    let picked: HashSet<&str> = seed_ids
        .iter()
        .chain(&neighbor_ids)
        .map(String::as_str)
        .collect();
    let remainder: Vec<&LabeledSample> = train
        .iter()
        .filter(|s| !picked.contains(s.id()))
        .collect();
    let random_needed = size - picked.len();
    let random_ids: Vec<String> = index::sample(rng, remainder.len(), random_needed)
        .into_iter()
        .map(|i| remainder[i].id().to_string())
        .collect();
    let mut samples: Vec<LabeledSample> = seed_ids
        .iter()
        .chain(&neighbor_ids)
        .chain(&random_ids)
        .map(|id| {
            train
                .iter()
                .find(|s| s.id() == id)
                .cloned()
                .expect("id drawn from train")
        })
        .collect();
    samples.shuffle(rng);
    Ok(OuterBatch {
        samples,
        seed_ids,
        neighbor_ids,
        random_ids,
    })
}
