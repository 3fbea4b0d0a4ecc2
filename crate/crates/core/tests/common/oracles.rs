//! Straight-line reimplementations used to cross-check the library.

use std::collections::HashSet;

use rand::Rng;

/// ψ from raw probabilities: log of the most likely wrong category over the
/// log of the true one, with the denominator kept at or below -1e-6.
pub fn psi(probs: &[f64], truth: usize) -> f64 {
    let mut best_wrong = f64::NEG_INFINITY;
    for (i, p) in probs.iter().enumerate() {
        if i != truth && p.ln() > best_wrong {
            best_wrong = p.ln();
        }
    }
    let mut denom = probs[truth].ln();
    if denom > -1e-6 {
        denom = -1e-6;
    }
    best_wrong / denom
}

/// Chance agreement as the mean over all n² (prediction, label) pairs.
pub fn kappa<T: PartialEq>(preds: &[T], labels: &[T]) -> f64 {
    let n = preds.len() as f64;
    let mut agree = 0.0;
    for i in 0..preds.len() {
        if preds[i] == labels[i] {
            agree += 1.0;
        }
    }
    let mut chance = 0.0;
    for p in preds {
        for l in labels {
            if p == l {
                chance += 1.0;
            }
        }
    }
    let p_o = agree / n;
    let p_e = chance / (n * n);
    if p_e == 1.0 {
        return if p_o == 1.0 { 1.0 } else { 0.0 };
    }
    (p_o - p_e) / (1.0 - p_e)
}

pub fn accuracy<T: PartialEq>(preds: &[T], labels: &[T]) -> f64 {
    let mut hits = 0;
    for i in 0..preds.len() {
        if preds[i] == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / preds.len() as f64
}

/// Mean over samples of the largest log-probability.
pub fn zeta(per_sample_probs: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for probs in per_sample_probs {
        let mut best = f64::NEG_INFINITY;
        for p in probs {
            best = best.max(p.ln());
        }
        total += best;
    }
    total / per_sample_probs.len() as f64
}

pub fn ucb(mean: f64, n: usize, total: usize, c: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    mean + (c * c * (total as f64).ln() / n as f64).sqrt()
}

pub fn dot_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Nearest neighbors taken one per seed per round by full rescans: every
/// pick is the best remaining non-seed sample for that seed.
pub fn round_robin_neighbors(
    seeds: &[(String, Vec<f64>)],
    pool: &[(String, Vec<f64>)],
    quota: usize,
) -> Vec<String> {
    let seed_ids: HashSet<&str> = seeds.iter().map(|(id, _)| id.as_str()).collect();
    let mut taken: Vec<String> = Vec::new();
    loop {
        let before = taken.len();
        for (_, anchor) in seeds {
            if taken.len() == quota {
                return taken;
            }
            let mut best: Option<(f64, &str)> = None;
            for (id, e) in pool {
                if seed_ids.contains(id.as_str()) || taken.iter().any(|t| t == id) {
                    continue;
                }
                let c = dot_cosine(anchor, e);
                let better = match best {
                    None => true,
                    Some((bc, bid)) => c > bc || (c == bc && id.as_str() < bid),
                };
                if better {
                    best = Some((c, id));
                }
            }
            if let Some((_, id)) = best {
                taken.push(id.to_string());
            }
        }
        if taken.len() == before || taken.len() == quota {
            return taken;
        }
    }
}

/// A random probability vector over `k` categories with every entry > 0.
pub fn random_probs<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}
