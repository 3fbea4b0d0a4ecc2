//! Grader, reflector and refiner agents.
//!
//! Each agent fills a prompt template from a guideline (and failed examples
//! for the reflector/refiner), calls the gateway and parses the completion.
//! Prompt assembly is deterministic: failed examples are always serialized in
//! ascending sample-id order.

mod parse;
mod templates;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use parse::{extract_delimited, parse_grader_output};
pub use templates::{fill, markers, PromptTemplates, TEMPLATE_VERSION};

use crate::error::AgentError;
use crate::gateway::{CompletionRequest, Gateway};
use crate::model::{
    AnswerSample, GradingOutput, Guideline, LabeledSample, Lineage, RunConfig, ScoreScale,
};

/// Attempts per agent call when the completion cannot be parsed.
pub const PARSE_ATTEMPTS: usize = 3;

/// A sample the grader scored differently from its expert label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub sample: LabeledSample,
    pub output: GradingOutput,
}

impl ErrorCase {
    /// `None` when the prediction matches the label.
    pub fn new(sample: LabeledSample, output: GradingOutput) -> Option<Self> {
        (output.predicted != sample.label).then_some(Self { sample, output })
    }

    pub fn id(&self) -> &str {
        self.sample.id()
    }
}

/// Reflector analysis of a set of failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionReport {
    pub text: String,
    pub source_errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub grader_temperature: f64,
    pub reflector_temperature: f64,
    pub refiner_temperature: f64,
    pub grader_max_tokens: usize,
    pub reflector_max_tokens: usize,
    pub refiner_max_tokens: usize,
}

impl AgentSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            grader_temperature: config.grader_temperature,
            reflector_temperature: config.reflector_temperature,
            refiner_temperature: config.refiner_temperature,
            ..Self::default()
        }
    }
}

impl Default for AgentSettings {
    fn default() -> Self {
        let c = RunConfig::default();
        Self {
            grader_temperature: c.grader_temperature,
            reflector_temperature: c.reflector_temperature,
            refiner_temperature: c.refiner_temperature,
            grader_max_tokens: 512,
            reflector_max_tokens: 2048,
            refiner_max_tokens: 2048,
        }
    }
}

#[derive(Clone)]
pub struct Agents {
    gateway: Arc<Gateway>,
    templates: Arc<PromptTemplates>,
    settings: AgentSettings,
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        markers::EMPTY_RULES
    } else {
        s
    }
}

fn score_choices(scale: &ScoreScale) -> String {
    let c: Vec<String> = scale.categories().iter().map(|s| s.to_string()).collect();
    match c.len() {
        1 => c[0].clone(),
        2 => format!("{} or {}", c[0], c[1]),
        n => format!("{}, or {}", c[..n - 1].join(", "), c[n - 1]),
    }
}

fn failed_examples_block(errors: &[ErrorCase]) -> String {
    let mut sorted: Vec<&ErrorCase> = errors.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    sorted
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "Example {} (id: {})\nTeacher Response: {}\nPredicted: {}\nCorrect Label: {}\nGrader Reasoning: {}\n",
                i + 1,
                e.id(),
                e.sample.sample.answer_text.trim(),
                e.output.predicted,
                e.sample.label,
                or_none(&e.output.reasoning),
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn guideline_values(g: &Guideline) -> BTreeMap<&'static str, &str> {
    BTreeMap::from([
        ("QUESTION_STEM", g.question_stem.as_str()),
        ("KEY_CONCEPT", or_none(&g.key_concept)),
        ("SCORING_RUBRIC", g.scoring_rubric.as_str()),
        ("ADAPTATION_RULES", or_none(&g.adaptation_rules)),
    ])
}

fn sorted_ids(errors: &[ErrorCase]) -> Vec<String> {
    let mut ids: Vec<String> = errors.iter().map(|e| e.id().to_string()).collect();
    ids.sort();
    ids
}

impl Agents {
    pub fn new(gateway: Arc<Gateway>, templates: PromptTemplates, settings: AgentSettings) -> Self {
        Self {
            gateway,
            templates: Arc::new(templates),
            settings,
        }
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn settings(&self) -> &AgentSettings {
        &self.settings
    }

    pub fn grader_prompt(&self, g: &Guideline, sample: &AnswerSample) -> String {
        let choices = score_choices(&g.scale);
        let mut values = guideline_values(g);
        values.insert("RESPONSE", sample.answer_text.trim());
        values.insert("SCORE_CHOICES", &choices);
        fill(&self.templates.grader, &values)
    }

    pub fn reflector_prompt(&self, g: &Guideline, errors: &[ErrorCase]) -> String {
        let block = failed_examples_block(errors);
        let mut values = guideline_values(g);
        values.insert("FAILED_EXAMPLES", &block);
        fill(&self.templates.reflector, &values)
    }

    pub fn refiner_prompt(
        &self,
        g: &Guideline,
        errors: &[ErrorCase],
        report: &ReflectionReport,
    ) -> String {
        let block = failed_examples_block(errors);
        let mut values = guideline_values(g);
        values.insert("FAILED_EXAMPLES", &block);
        values.insert("ERROR_FEEDBACKS", &report.text);
        fill(&self.templates.refiner, &values)
    }

    /// Score one answer under `g`.
    pub fn grade(&self, sample: &AnswerSample, g: &Guideline) -> Result<GradingOutput, AgentError> {
        let req = CompletionRequest::new(
            self.grader_prompt(g, sample),
            self.settings.grader_temperature,
            self.settings.grader_max_tokens,
        )
        .with_logprob_categories(g.scale.categories().to_vec());
        let mut last = String::new();
        for _ in 0..PARSE_ATTEMPTS {
            let res = self.gateway.complete(&req)?;
            if let Some((score, reasoning)) = parse_grader_output(&res.text, &g.scale) {
                return Ok(GradingOutput::from_distribution(
                    score,
                    reasoning,
                    res.category_logprobs.unwrap_or_default(),
                    res.text,
                ));
            }
            log::debug!("unparseable grader output for {}: {:?}", sample.id, res.text);
            last = res.text;
        }
        Err(AgentError::Unparseable {
            attempts: PARSE_ATTEMPTS,
            last,
        })
    }

    /// Grade every sample concurrently; results are in input order.
    pub fn grade_all(
        &self,
        samples: &[&AnswerSample],
        g: &Guideline,
    ) -> Vec<Result<GradingOutput, AgentError>> {
        samples.par_iter().map(|s| self.grade(s, g)).collect()
    }

    fn delimited_call(&self, prompt: String, temperature: f64, max_tokens: usize, allow_empty: bool) -> Result<String, AgentError> {
        let req = CompletionRequest::new(prompt, temperature, max_tokens);
        for _ in 0..PARSE_ATTEMPTS {
            let res = self.gateway.complete(&req)?;
            match extract_delimited(&res.text) {
                Some(p) if allow_empty || !p.is_empty() => return Ok(p.to_string()),
                _ => log::debug!("completion without usable <START>/<END> payload"),
            }
        }
        Err(AgentError::MissingDelimiters {
            attempts: PARSE_ATTEMPTS,
        })
    }

    /// Analyze why `g` failed on `errors`.
    pub fn reflect(&self, g: &Guideline, errors: &[ErrorCase]) -> Result<ReflectionReport, AgentError> {
        if errors.is_empty() {
            return Err(AgentError::NoErrors);
        }
        let text = self.delimited_call(
            self.reflector_prompt(g, errors),
            self.settings.reflector_temperature,
            self.settings.reflector_max_tokens,
            false,
        )?;
        Ok(ReflectionReport {
            text,
            source_errors: sorted_ids(errors),
        })
    }

    /// Rewrite the adaptation rules of `g`. Every other section is copied verbatim.
    pub fn refine(
        &self,
        g: &Guideline,
        errors: &[ErrorCase],
        report: &ReflectionReport,
        coords: (usize, usize, usize, usize),
    ) -> Result<Guideline, AgentError> {
        let rules = self.delimited_call(
            self.refiner_prompt(g, errors, report),
            self.settings.refiner_temperature,
            self.settings.refiner_max_tokens,
            true,
        )?;
        let (t, w, k, l) = coords;
        Ok(Guideline {
            adaptation_rules: rules,
            lineage: Some(Lineage {
                t,
                w,
                k,
                l,
                parent: g.content_id(),
            }),
            ..g.clone()
        })
    }
}
