//! Shared domain types: score scale, guidelines, samples, grading outputs and
//! the run configuration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;

/// Ordinal score label.
pub type Score = i64;

/// Ordered set of score categories a grader may emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Score>", into = "Vec<Score>")]
pub struct ScoreScale {
    categories: Vec<Score>,
}

impl ScoreScale {
    pub fn new(categories: Vec<Score>) -> Result<Self, ModelError> {
        if categories.is_empty() {
            return Err(ModelError::InvalidScale("empty".into()));
        }
        if categories.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidScale(format!(
                "categories must be strictly increasing: {categories:?}"
            )));
        }
        Ok(Self { categories })
    }

    pub fn categories(&self) -> &[Score] {
        &self.categories
    }

    pub fn contains(&self, score: Score) -> bool {
        self.categories.binary_search(&score).is_ok()
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Position of `score` in the ordered scale.
    pub fn index_of(&self, score: Score) -> Option<usize> {
        self.categories.binary_search(&score).ok()
    }

    pub fn lowest(&self) -> Score {
        self.categories[0]
    }
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self {
            categories: vec![0, 1, 2],
        }
    }
}

impl TryFrom<Vec<Score>> for ScoreScale {
    type Error = ModelError;

    fn try_from(value: Vec<Score>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ScoreScale> for Vec<Score> {
    fn from(value: ScoreScale) -> Self {
        value.categories
    }
}

/// Where a candidate guideline came from: its parent and the
/// (outer, inner, beam member, branch) coordinates that produced it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Lineage {
    pub t: usize,
    pub w: usize,
    pub k: usize,
    pub l: usize,
    pub parent: String,
}

/// The four guideline sections that are authored by experts or the refiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    QuestionStem,
    KeyConcept,
    ScoringRubric,
    AdaptationRules,
}

impl Section {
    pub fn header(self) -> &'static str {
        match self {
            Section::QuestionStem => "Question Stem",
            Section::KeyConcept => "Key Concept",
            Section::ScoringRubric => "Scoring Rubrics",
            Section::AdaptationRules => "Adaptation Rules",
        }
    }

    pub fn field_name(self) -> &'static str {
        match self {
            Section::QuestionStem => "question_stem",
            Section::KeyConcept => "key_concept",
            Section::ScoringRubric => "scoring_rubric",
            Section::AdaptationRules => "adaptation_rules",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.field_name())
    }
}

/// A grading guideline. Only `adaptation_rules` is ever rewritten by the
/// optimizer; the other three sections are expert-authored and frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guideline {
    pub question_stem: String,
    #[serde(default)]
    pub key_concept: String,
    pub scoring_rubric: String,
    #[serde(default)]
    pub adaptation_rules: String,
    #[serde(default)]
    pub scale: ScoreScale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
}

impl Guideline {
    pub fn new(
        question_stem: impl Into<String>,
        key_concept: impl Into<String>,
        scoring_rubric: impl Into<String>,
    ) -> Self {
        Self {
            question_stem: question_stem.into(),
            key_concept: key_concept.into(),
            scoring_rubric: scoring_rubric.into(),
            adaptation_rules: String::new(),
            scale: ScoreScale::default(),
            lineage: None,
        }
    }

    pub fn with_adaptation_rules(mut self, rules: impl Into<String>) -> Self {
        self.adaptation_rules = rules.into();
        self
    }

    pub fn with_scale(mut self, scale: ScoreScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.question_stem.trim().is_empty() {
            return Err(ModelError::InvalidGuideline(Section::QuestionStem));
        }
        if self.scoring_rubric.trim().is_empty() {
            return Err(ModelError::InvalidGuideline(Section::ScoringRubric));
        }
        Ok(())
    }

    pub fn section(&self, section: Section) -> &str {
        match section {
            Section::QuestionStem => &self.question_stem,
            Section::KeyConcept => &self.key_concept,
            Section::ScoringRubric => &self.scoring_rubric,
            Section::AdaptationRules => &self.adaptation_rules,
        }
    }

    /// Content identity: hash of the four sections and the scale, ignoring lineage.
    pub fn content_id(&self) -> String {
        let mut hasher = Sha256::new();
        for section in [
            Section::QuestionStem,
            Section::KeyConcept,
            Section::ScoringRubric,
            Section::AdaptationRules,
        ] {
            let body = self.section(section).as_bytes();
            hasher.update((body.len() as u64).to_le_bytes());
            hasher.update(body);
        }
        for c in self.scale.categories() {
            hasher.update(c.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..12])
    }

    /// Sort key for deterministic ordering: the root guideline first, then
    /// children by their (t, w, k, l) coordinates.
    pub fn lineage_key(&self) -> (usize, usize, usize, usize) {
        match &self.lineage {
            None => (0, 0, 0, 0),
            Some(l) => (l.t, l.w, l.k + 1, l.l + 1),
        }
    }
}

/// Concatenate the guideline sections under fixed headers.
///
/// Sections render in the order question stem, key concept, scoring rubrics,
/// adaptation rules. An empty section is omitted along with its header.
pub fn render_guideline(g: &Guideline) -> Result<String, ModelError> {
    g.check()?;
    let mut out = String::new();
    for section in [
        Section::QuestionStem,
        Section::KeyConcept,
        Section::ScoringRubric,
        Section::AdaptationRules,
    ] {
        let body = g.section(section);
        if body.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("## ");
        out.push_str(section.header());
        out.push('\n');
        out.push_str(body);
        out.push('\n');
    }
    Ok(out)
}

/// Outcome of comparing a candidate's expert sections against a reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Section>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_guideline(g: &Guideline, reference: &Guideline) -> ValidationReport {
    let violations = [
        Section::QuestionStem,
        Section::KeyConcept,
        Section::ScoringRubric,
    ]
    .into_iter()
    .filter(|s| g.section(*s).as_bytes() != reference.section(*s).as_bytes())
    .collect();
    ValidationReport { violations }
}

/// A short answer to be graded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSample {
    pub id: String,
    pub question_id: String,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl AnswerSample {
    pub fn new(
        id: impl Into<String>,
        question_id: impl Into<String>,
        answer_text: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question_id: question_id.into(),
            answer_text: answer_text.into(),
            embedding: None,
        }
    }
}

/// An answer with its expert score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample: AnswerSample,
    pub label: Score,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_meta: Option<String>,
}

impl LabeledSample {
    pub fn new(sample: AnswerSample, label: Score) -> Self {
        Self {
            sample,
            label,
            rater_meta: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.sample.id
    }
}

/// Parsed grader completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingOutput {
    pub predicted: Score,
    pub reasoning: String,
    /// Natural-log probability per score category.
    pub category_logprobs: BTreeMap<Score, f64>,
    pub raw_completion: String,
}

impl GradingOutput {
    /// Build an output whose prediction is the argmax of `category_logprobs`
    /// (ties go to the lowest category). Falls back to `text_score` when the
    /// distribution is empty.
    pub fn from_distribution(
        text_score: Score,
        reasoning: String,
        category_logprobs: BTreeMap<Score, f64>,
        raw_completion: String,
    ) -> Self {
        let predicted = argmax_category(&category_logprobs).unwrap_or(text_score);
        Self {
            predicted,
            reasoning,
            category_logprobs,
            raw_completion,
        }
    }

    /// Largest category log-probability.
    pub fn max_logprob(&self) -> Option<f64> {
        self.category_logprobs
            .values()
            .copied()
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Category with the highest log-probability, lowest category on ties.
pub fn argmax_category(logprobs: &BTreeMap<Score, f64>) -> Option<Score> {
    let mut best: Option<(Score, f64)> = None;
    // BTreeMap iterates in ascending category order, so strict > keeps the lowest on ties.
    for (&c, &lp) in logprobs {
        match best {
            Some((_, b)) if lp <= b => {}
            _ => best = Some((c, lp)),
        }
    }
    best.map(|(c, _)| c)
}

/// Which misconfidence formula ranks outer-batch seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiVariant {
    /// Best wrong-category log-probability divided by the true-label log-probability.
    #[default]
    LogRatio,
    /// exp(logprob_best_wrong - logprob_true).
    PsiProbRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaWeighting {
    #[default]
    Unweighted,
    Quadratic,
}

/// Optimizer and agent settings. Field names are also the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub parallel_branches: usize,
    pub beam_size: usize,
    pub outer_batch_size: usize,
    pub inner_batch_size: usize,
    pub seed_count: usize,
    pub grader_temperature: f64,
    pub reflector_temperature: f64,
    pub refiner_temperature: f64,
    pub ucb_rounds_factor: usize,
    pub ucb_minibatch_size: usize,
    pub ucb_exploration_c: f64,
    pub early_stop_patience: usize,
    pub rng_seed: u64,
    pub psi_variant: PsiVariant,
    pub kappa_weighting: KappaWeighting,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 5,
            inner_iterations: 3,
            parallel_branches: 4,
            beam_size: 4,
            outer_batch_size: 64,
            inner_batch_size: 8,
            seed_count: 4,
            grader_temperature: 0.0,
            reflector_temperature: 0.5,
            refiner_temperature: 0.5,
            ucb_rounds_factor: 4,
            ucb_minibatch_size: 16,
            ucb_exploration_c: std::f64::consts::SQRT_2,
            early_stop_patience: 2,
            rng_seed: 0,
            psi_variant: PsiVariant::LogRatio,
            kappa_weighting: KappaWeighting::Unweighted,
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        let counts = [
            ("outer_iterations", self.outer_iterations),
            ("inner_iterations", self.inner_iterations),
            ("parallel_branches", self.parallel_branches),
            ("beam_size", self.beam_size),
            ("outer_batch_size", self.outer_batch_size),
            ("inner_batch_size", self.inner_batch_size),
            ("seed_count", self.seed_count),
            ("ucb_rounds_factor", self.ucb_rounds_factor),
            ("ucb_minibatch_size", self.ucb_minibatch_size),
            ("early_stop_patience", self.early_stop_patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.inner_batch_size > self.outer_batch_size {
            return Err(ModelError::InvalidConfig(
                "inner_batch_size must not exceed outer_batch_size".into(),
            ));
        }
        for (name, v) in [
            ("grader_temperature", self.grader_temperature),
            ("reflector_temperature", self.reflector_temperature),
            ("refiner_temperature", self.refiner_temperature),
            ("ucb_exploration_c", self.ucb_exploration_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be a finite value >= 0"
                )));
            }
        }
        Ok(())
    }
}
