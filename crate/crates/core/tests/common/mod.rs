#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use guideopt::agents::{AgentSettings, Agents, PromptTemplates};
use guideopt::gateway::Gateway;
use guideopt::{AnswerSample, Guideline, LabeledSample, RunConfig, Score};

pub const BASE_TAGS: [(&str, Score); 3] = [("t1", 2), ("t2", 1), ("t3", 0)];
pub const SHIFTED_TAGS: [(&str, Score); 3] = [("u1", 2), ("u2", 1), ("u3", 0)];

const WORDS: [&str; 16] = [
    "ratio", "fraction", "students", "compare", "share", "part", "whole", "equal", "scale",
    "model", "table", "double", "number", "line", "unit", "rate",
];

/// Answers cycling through `tags`, each labeled with its tag's score.
pub fn rule_world(prefix: &str, n: usize, tags: &[(&str, Score)]) -> Vec<LabeledSample> {
    (0..n)
        .map(|i| {
            let (tag, label) = tags[i % tags.len()];
            let a = WORDS[(i * 7) % WORDS.len()];
            let b = WORDS[(i * 3 + 5) % WORDS.len()];
            let text = format!("The teacher would {a} the {b} idea tag:{tag} item {i}");
            LabeledSample::new(AnswerSample::new(format!("{prefix}{i:03}"), "q1", text), label)
        })
        .collect()
}

pub fn g0() -> Guideline {
    Guideline::new(
        "Explain how a student could compare two ratios.",
        "Equivalent ratios scale both parts by the same factor.",
        "2: complete and correct. 1: partially correct. 0: incorrect or missing.",
    )
}

pub fn mock_agents() -> Agents {
    agents_over(Gateway::mock())
}

pub fn agents_over(gateway: Gateway) -> Agents {
    Agents::new(
        Arc::new(gateway),
        PromptTemplates::default(),
        AgentSettings::default(),
    )
}

pub fn config(seed: u64) -> RunConfig {
    RunConfig {
        rng_seed: seed,
        ..RunConfig::default()
    }
}

/// (train, val, test) from one rule world of 150 answers.
pub fn splits(tags: &[(&str, Score)], prefix: &str) -> (Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>) {
    let all = rule_world(prefix, 150, tags);
    let train = all[..105].to_vec();
    let val = all[105..120].to_vec();
    let test = all[120..].to_vec();
    (train, val, test)
}

/// Twelve tags over three scores, slow enough to need several outer iterations.
pub fn wide_tags() -> Vec<(String, Score)> {
    (1..=12).map(|i| (format!("w{i}"), (i % 3) as Score)).collect()
}

pub fn as_refs(tags: &[(String, Score)]) -> Vec<(&str, Score)> {
    tags.iter().map(|(t, s)| (t.as_str(), *s)).collect()
}

/// Small branches and beam so the wide world takes three outer iterations.
pub fn slow_config(seed: u64) -> RunConfig {
    RunConfig {
        inner_batch_size: 2,
        parallel_branches: 2,
        beam_size: 2,
        ..config(seed)
    }
}

/// (train, val, test) from the wide world.
pub fn wide_splits() -> (Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>) {
    let tags = wide_tags();
    let all = rule_world("s", 240, &as_refs(&tags));
    (all[..180].to_vec(), all[180..210].to_vec(), all[210..].to_vec())
}
