mod common;

use std::collections::BTreeMap;

use common::oracles::{self, close};
use guideopt::adaptation::confidence_from_outputs;
use guideopt::error::AgentError;
use guideopt::gateway::{hashing_embedding, Gateway};
use guideopt::metrics::{accuracy, cohen_kappa, kappa_with_failures};
use guideopt::optimizer::ucb_priority;
use guideopt::sampler::{cosine, misconfidence, misconfidence_record};
use guideopt::{
    AnswerSample, GradingOutput, KappaWeighting, LabeledSample, PsiVariant, Score, ScoreScale,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL: f64 = 1e-9;
const CASES: usize = 200;

fn output(probs: &[f64], categories: &[Score]) -> GradingOutput {
    let lp: BTreeMap<Score, f64> = categories.iter().zip(probs).map(|(&c, p)| (c, p.ln())).collect();
    GradingOutput::from_distribution(categories[0], String::new(), lp, String::new())
}

fn scale(k: usize) -> ScoreScale {
    ScoreScale::new((0..k as Score).collect()).unwrap()
}

#[test]
fn psi_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let k = rng.random_range(2..=5);
        let cats: Vec<Score> = (0..k as Score).collect();
        let probs = oracles::random_probs(&mut rng, k);
        let truth = rng.random_range(0..k);
        let got = misconfidence(&output(&probs, &cats), cats[truth], &scale(k)).unwrap();
        let want = oracles::psi(&probs, truth);
        assert!(close(got, want, REL), "{probs:?} truth {truth}: {got} vs {want}");
    }
}

#[test]
fn psi_prob_ratio_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..CASES {
        let k = rng.random_range(2..=5);
        let cats: Vec<Score> = (0..k as Score).collect();
        let probs = oracles::random_probs(&mut rng, k);
        let truth = rng.random_range(0..k);
        let sample = LabeledSample::new(AnswerSample::new(format!("s{i}"), "q", "x"), cats[truth]);
        let rec = misconfidence_record(&sample, &output(&probs, &cats), &scale(k), PsiVariant::PsiProbRatio)
            .unwrap();
        let best_wrong = (0..k).filter(|&j| j != truth).map(|j| probs[j]).fold(0.0, f64::max);
        assert!(close(rec.psi, best_wrong / probs[truth], REL));
    }
}

#[test]
fn psi_worked_values() {
    let cats = [0, 1, 2];
    let third = 1.0 / 3.0;
    let uniform = misconfidence(&output(&[third; 3], &cats), 1, &scale(3)).unwrap();
    assert!(close(uniform, 1.0, REL));
    let worked = misconfidence(&output(&[0.2, 0.5, 0.3], &cats), 1, &scale(3)).unwrap();
    assert!(close(worked, 0.3f64.ln() / 0.5f64.ln(), REL));
    assert!((worked - 1.7370).abs() < 5e-5);
    let clamped = misconfidence(&output(&[1.0 - 2e-7, 1e-7, 1e-7], &cats), 0, &scale(3)).unwrap();
    assert!(close(clamped, 1e-7f64.ln() / -1e-6, REL));
    assert!((clamped / 1.6118e7 - 1.0).abs() < 1e-4);
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: Score) -> Vec<Score> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[test]
fn kappa_and_accuracy_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..CASES {
        let n = rng.random_range(1..=25);
        let k = rng.random_range(1..=4);
        let labels = random_labels(&mut rng, n, k);
        // Bias toward agreement so high-kappa cases are common.
        let preds: Vec<Score> = labels
            .iter()
            .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..k) })
            .collect();
        let got = cohen_kappa(&preds, &labels).unwrap();
        let want = oracles::kappa(&preds, &labels);
        assert!(close(got, want, REL), "{preds:?} {labels:?}: {got} vs {want}");
        assert!(close(accuracy(&preds, &labels).unwrap(), oracles::accuracy(&preds, &labels), REL));
    }
}

#[test]
fn kappa_with_failures_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = scale(3);
    for _ in 0..CASES {
        let n = rng.random_range(1..=20);
        let labels = random_labels(&mut rng, n, 3);
        let preds: Vec<Option<Score>> = labels
            .iter()
            .map(|&l| match rng.random_range(0..10) {
                0 => None,
                1..=6 => Some(l),
                _ => Some(rng.random_range(0..3)),
            })
            .collect();
        let got = kappa_with_failures(&preds, &labels, &s, KappaWeighting::Unweighted).unwrap();
        let wrapped: Vec<Option<Score>> = labels.iter().map(|&l| Some(l)).collect();
        assert!(close(got, oracles::kappa(&preds, &wrapped), REL));
    }
}

#[test]
fn kappa_worked_values() {
    assert!(close(cohen_kappa(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.5, REL));
    assert_eq!(cohen_kappa(&[0, 0], &[0, 1]).unwrap(), 0.0);
    assert_eq!(cohen_kappa(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
    assert_eq!(cohen_kappa(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 2, 1]).unwrap(), 0.75);
}

#[test]
fn zeta_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..CASES {
        let n = rng.random_range(1..=30);
        let k = rng.random_range(2..=5);
        let cats: Vec<Score> = (0..k as Score).collect();
        let probs: Vec<Vec<f64>> = (0..n).map(|_| oracles::random_probs(&mut rng, k)).collect();
        let outputs: Vec<Result<GradingOutput, AgentError>> =
            probs.iter().map(|p| Ok(output(p, &cats))).collect();
        let got = confidence_from_outputs(&outputs).unwrap().zeta;
        assert!(close(got, oracles::zeta(&probs), REL));
    }
}

#[test]
fn zeta_worked_values() {
    let at = |lp: &[f64]| -> Result<GradingOutput, AgentError> {
        let map: BTreeMap<Score, f64> = lp.iter().enumerate().map(|(i, &v)| (i as Score, v)).collect();
        Ok(GradingOutput::from_distribution(0, String::new(), map, String::new()))
    };
    let one = confidence_from_outputs(&[at(&[-0.2, -3.0])]).unwrap().zeta;
    assert!(close(one, -0.2, REL));
    let two = confidence_from_outputs(&[at(&[-0.1, -4.0]), at(&[-2.0, -0.3])]).unwrap().zeta;
    assert!(close(two, -0.2, REL));
}

#[test]
fn ucb_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..CASES {
        let n = rng.random_range(0..50);
        let total = n + rng.random_range(1..200);
        let mean = rng.random_range(-1.0..1.0);
        let c = rng.random_range(0.0..3.0);
        let got = ucb_priority(mean, n, total, c);
        let want = oracles::ucb(mean, n, total, c);
        assert!(close(got, want, REL), "{mean} {n} {total} {c}");
    }
    let c = std::f64::consts::SQRT_2;
    let a = ucb_priority(0.5, 4, 5, c);
    let b = ucb_priority(0.4, 1, 5, c);
    assert!((a - 1.397).abs() < 1e-3 && (b - 2.194).abs() < 1e-3 && b > a);
}

#[test]
fn hashing_embedder_frozen_values() {
    let g = Gateway::mock();
    let e = |t: &str| g.embed(t).unwrap();
    let (a, b, z) = (e("ratio proportional"), e("ratio proportion"), e("zebra quartz"));
    assert!(close(cosine(&a, &b), 0.890563556561721, REL));
    assert!(close(cosine(&a, &z), 0.27022640946662696, REL));
    assert!(close(cosine(&b, &z), 0.20228869496966945, REL));
    assert!(cosine(&a, &b) > cosine(&a, &z));
    let buckets: Vec<usize> = hashing_embedding("ratio")
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(buckets, vec![5, 8, 15, 24, 27, 28]);
    for (x, y) in [(&a, &b), (&a, &z), (&b, &z)] {
        assert!(close(cosine(x, y), oracles::dot_cosine(x, y), REL));
    }
}
