//! Deterministic "rule world" backend.
//!
//! Grading truth is defined by adaptation-rule lines of the form
//! `IF <tag> THEN <score>` and answer markers of the form `tag:<tag>`. The
//! reflector reports `(tag, label)` pairs for failed examples and the refiner
//! turns them into new rule lines, so the whole optimization loop can run
//! offline with exactly predictable outcomes.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

use super::{Backend, BackendMeta, CompletionRequest, CompletionResult};
use crate::agents::markers;
use crate::error::GatewayError;
use crate::model::Score;

/// Dimensionality of the hashing embedder.
pub const MOCK_EMBEDDING_DIM: usize = 64;

const DEFAULT_CATEGORIES: [Score; 3] = [0, 1, 2];

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"tag:([A-Za-z0-9_\-]+)").unwrap())
}

fn rule_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*IF\s+([A-Za-z0-9_\-]+)\s+THEN\s+(-?\d+)\s*$").unwrap())
}

fn pair_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Za-z0-9_\-]+), (-?\d+)\)").unwrap())
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^Correct Label:\s*(-?\d+)").unwrap())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleWorldBackend;

enum PromptKind {
    Grader,
    Reflector,
    Refiner,
}

impl RuleWorldBackend {
    /// 0.9 on `score`, 0.1 split evenly over the remaining categories.
    pub fn distribution(score: Score, categories: &[Score]) -> BTreeMap<Score, f64> {
        let others = categories.len().saturating_sub(1);
        categories
            .iter()
            .map(|&c| {
                let p = if others == 0 {
                    1.0
                } else if c == score {
                    0.9
                } else {
                    0.1 / others as f64
                };
                (c, p.ln())
            })
            .collect()
    }

    /// Parsed `IF <tag> THEN <score>` lines, in order.
    pub fn parse_rules(text: &str) -> Vec<(String, Score)> {
        text.lines()
            .filter_map(|line| {
                let caps = rule_re().captures(line)?;
                Some((caps[1].to_string(), caps[2].parse().ok()?))
            })
            .collect()
    }

    pub fn answer_tags(text: &str) -> Vec<String> {
        tag_re()
            .captures_iter(text)
            .map(|c| c[1].to_string())
            .collect()
    }

    /// Score the rule world assigns to `answer` under `rules`.
    pub fn rule_score(rules: &str, answer: &str, categories: &[Score]) -> Score {
        let tags = Self::answer_tags(answer);
        let fallback = if categories.contains(&0) { 0 } else { categories[0] };
        Self::parse_rules(rules)
            .into_iter()
            .find(|(tag, score)| categories.contains(score) && tags.contains(tag))
            .map_or(fallback, |(_, score)| score)
    }

    fn kind(prompt: &str) -> Option<PromptKind> {
        if prompt.contains(markers::REFLECTOR_ROLE) {
            Some(PromptKind::Reflector)
        } else if prompt.contains(markers::REFINER_ROLE) {
            Some(PromptKind::Refiner)
        } else if has_line(prompt, markers::GRADER_RESPONSE)
            && has_line(prompt, markers::GRADER_OUTPUT_FORMAT)
        {
            Some(PromptKind::Grader)
        } else {
            None
        }
    }

    fn grade(req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let prompt = &req.prompt;
        let rules = section(prompt, markers::GRADER_RULES, markers::GRADER_RESPONSE)
            .ok_or(GatewayError::UnrecognizedPrompt)?;
        let answer = section(prompt, markers::GRADER_RESPONSE, markers::GRADER_OUTPUT_FORMAT)
            .ok_or(GatewayError::UnrecognizedPrompt)?;
        let categories = req
            .logprob_categories
            .clone()
            .unwrap_or_else(|| DEFAULT_CATEGORIES.to_vec());
        let score = Self::rule_score(rules, answer, &categories);
        Ok(CompletionResult {
            text: format!("{score}\nReasoning: rule-match"),
            category_logprobs: req
                .logprob_categories
                .as_ref()
                .map(|cats| Self::distribution(score, cats)),
            backend_meta: meta(),
        })
    }

    fn reflect(req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let block = section(&req.prompt, markers::FAILED_EXAMPLES, markers::REFLECTOR_AFTER_EXAMPLES)
            .ok_or(GatewayError::UnrecognizedPrompt)?;
        let mut pairs: Vec<(String, Score)> = Vec::new();
        for example in split_examples(block) {
            let response = example
                .split_once(markers::EXAMPLE_PREDICTED)
                .map_or(example, |(head, _)| head);
            let Some(tag) = Self::answer_tags(response).into_iter().next() else {
                continue;
            };
            let Some(label) = label_re()
                .captures(example)
                .and_then(|c| c[1].parse::<Score>().ok())
            else {
                continue;
            };
            if !pairs.contains(&(tag.clone(), label)) {
                pairs.push((tag, label));
            }
        }
        let body = if pairs.is_empty() {
            "no tagged pattern found in failed examples".to_string()
        } else {
            pairs
                .iter()
                .map(|(t, l)| format!("({t}, {l})"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        Ok(CompletionResult {
            text: format!("Analysis follows.\n<START>\n{body}\n<END>"),
            category_logprobs: None,
            backend_meta: meta(),
        })
    }

    fn refine(req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let prompt = &req.prompt;
        let existing = section(prompt, markers::ADAPTATION_RUBRICS, markers::REFINER_AFTER_RULES)
            .ok_or(GatewayError::UnrecognizedPrompt)?;
        let feedback = section(prompt, markers::ERROR_FEEDBACKS, markers::REFINER_AFTER_FEEDBACK)
            .ok_or(GatewayError::UnrecognizedPrompt)?;
        let mut lines: Vec<String> = existing
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && l.trim() != markers::EMPTY_RULES)
            .map(str::to_string)
            .collect();
        for caps in pair_re().captures_iter(feedback) {
            let line = format!("IF {} THEN {}", &caps[1], &caps[2]);
            if !lines.contains(&line) {
                lines.push(line);
            }
        }
        Ok(CompletionResult {
            text: format!("<START>\n{}\n<END>", lines.join("\n")),
            category_logprobs: None,
            backend_meta: meta(),
        })
    }
}

impl Backend for RuleWorldBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        match Self::kind(&req.prompt).ok_or(GatewayError::UnrecognizedPrompt)? {
            PromptKind::Grader => Self::grade(req),
            PromptKind::Reflector => Self::reflect(req),
            PromptKind::Refiner => Self::refine(req),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        Ok(hashing_embedding(text))
    }

    fn descriptor(&self) -> String {
        "mock:rule-world/v1".into()
    }
}

fn meta() -> BackendMeta {
    BackendMeta {
        model: "rule-world".into(),
        ..BackendMeta::default()
    }
}

fn has_line(text: &str, line: &str) -> bool {
    text.lines().any(|l| l.trim_end() == line)
}

/// Text between the line equal to `start` and the next line starting with `end`.
fn section<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut body_start = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end();
        match body_start {
            None if trimmed == start => body_start = Some(offset + line.len()),
            Some(s) if trimmed.starts_with(end) => return Some(&text[s..offset]),
            _ => {}
        }
        offset += line.len();
    }
    None
}

fn split_examples(block: &str) -> Vec<&str> {
    let mut starts: Vec<usize> = Vec::new();
    let mut offset = 0;
    for line in block.split_inclusive('\n') {
        if line.starts_with(markers::EXAMPLE_PREFIX) {
            starts.push(offset);
        }
        offset += line.len();
    }
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| &block[s..starts.get(i + 1).copied().unwrap_or(block.len())])
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Feature-hashing embedder: lowercase word tokens plus boundary-marked
/// character trigrams, FNV-1a hashed into [`MOCK_EMBEDDING_DIM`] buckets,
/// then L2-normalized.
pub fn hashing_embedding(text: &str) -> Vec<f64> {
    let lower = text.to_lowercase();
    let mut tokens: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        tokens.push(lower.trim());
    }
    let mut v = vec![0.0; MOCK_EMBEDDING_DIM];
    let mut bump = |feature: &str| {
        let bucket = (fnv1a(feature.as_bytes()) % MOCK_EMBEDDING_DIM as u64) as usize;
        v[bucket] += 1.0;
    };
    for token in tokens {
        bump(&format!("w:{token}"));
        let chars: Vec<char> = format!("#{token}#").chars().collect();
        for tri in chars.windows(3) {
            let s: String = tri.iter().collect();
            bump(&format!("c:{s}"));
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_first_match_wins() {
        let rules = "IF t1 THEN 2\nIF t2 THEN 1\nsome prose\nIF t1 THEN 0";
        assert_eq!(RuleWorldBackend::rule_score(rules, "tag:t1 words", &[0, 1, 2]), 2);
        assert_eq!(RuleWorldBackend::rule_score(rules, "tag:t2", &[0, 1, 2]), 1);
        assert_eq!(RuleWorldBackend::rule_score(rules, "no tags", &[0, 1, 2]), 0);
        assert_eq!(RuleWorldBackend::rule_score("IF t9 THEN 7", "tag:t9", &[0, 1, 2]), 0);
    }

    #[test]
    fn distribution_sums_to_one() {
        let d = RuleWorldBackend::distribution(1, &[0, 1, 2]);
        let total: f64 = d.values().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((d[&1] - 0.9f64.ln()).abs() < 1e-15);
        assert!((d[&0] - 0.05f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn section_extraction() {
        let text = "A:\nbody one\nbody two\nB: more\nC:\n";
        assert_eq!(section(text, "A:", "B:"), Some("body one\nbody two\n"));
        assert_eq!(section(text, "Z:", "B:"), None);
    }

    #[test]
    fn unknown_prompt_is_rejected() {
        let req = CompletionRequest::new("hello", 0.0, 4);
        assert!(matches!(
            RuleWorldBackend.complete(&req),
            Err(GatewayError::UnrecognizedPrompt)
        ));
    }

    #[test]
    fn embedding_is_unit_and_stable() {
        let a = hashing_embedding("abc");
        let b = hashing_embedding("abc");
        assert_eq!(a, b);
        assert_eq!(a.len(), MOCK_EMBEDDING_DIM);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let punct = hashing_embedding("!!!");
        assert!(punct.iter().all(|x| x.is_finite()));
    }
}
