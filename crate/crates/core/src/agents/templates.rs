use std::collections::BTreeMap;
use std::path::Path;

use crate::error::AgentError;

pub const TEMPLATE_VERSION: u32 = 1;

/// Fixed strings the default templates and the rule-world mock agree on.
pub mod markers {
    pub const GRADER_RULES: &str = "Rules:";
    pub const GRADER_RESPONSE: &str = "Teacher Response:";
    pub const GRADER_OUTPUT_FORMAT: &str = "Output format";
    pub const REFLECTOR_ROLE: &str = "You are ReflectorGPT";
    pub const REFINER_ROLE: &str = "You are RefinerGPT";
    pub const ADAPTATION_RUBRICS: &str = "Adaptation Rubrics:";
    pub const FAILED_EXAMPLES: &str = "Failed Examples:";
    pub const ERROR_FEEDBACKS: &str = "Error Feedbacks:";
    pub const REFLECTOR_AFTER_EXAMPLES: &str = "Give reasons";
    pub const REFINER_AFTER_RULES: &str = "But [ADAPTATION RUBRICS]";
    pub const REFINER_AFTER_FEEDBACK: &str = "Based on the above information";
    pub const EXAMPLE_PREFIX: &str = "Example ";
    pub const EXAMPLE_PREDICTED: &str = "\nPredicted:";
    /// Stands in for an empty section inside prompts.
    pub const EMPTY_RULES: &str = "(none)";
}

const GRADER_PLACEHOLDERS: &[&str] = &[
    "QUESTION_STEM",
    "KEY_CONCEPT",
    "SCORING_RUBRIC",
    "ADAPTATION_RULES",
    "RESPONSE",
    "SCORE_CHOICES",
];
const REFLECTOR_PLACEHOLDERS: &[&str] = &[
    "QUESTION_STEM",
    "KEY_CONCEPT",
    "SCORING_RUBRIC",
    "ADAPTATION_RULES",
    "FAILED_EXAMPLES",
];
const REFINER_PLACEHOLDERS: &[&str] = &[
    "QUESTION_STEM",
    "KEY_CONCEPT",
    "SCORING_RUBRIC",
    "ADAPTATION_RULES",
    "FAILED_EXAMPLES",
    "ERROR_FEEDBACKS",
];

/// Grader, reflector and refiner prompt templates with `{{NAME}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub grader: String,
    pub reflector: String,
    pub refiner: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            grader: include_str!("../../templates/grader.v1.txt").to_string(),
            reflector: include_str!("../../templates/reflector.v1.txt").to_string(),
            refiner: include_str!("../../templates/refiner.v1.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Load `grader.v1.txt`, `reflector.v1.txt` and `refiner.v1.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, AgentError> {
        let read = |role: &str| {
            let path = dir.join(format!("{role}.v{TEMPLATE_VERSION}.txt"));
            std::fs::read_to_string(&path).map_err(|source| AgentError::TemplateIo { path, source })
        };
        let t = Self {
            grader: read("grader")?,
            reflector: read("reflector")?,
            refiner: read("refiner")?,
        };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), AgentError> {
        for (name, text, required) in [
            ("grader", &self.grader, GRADER_PLACEHOLDERS),
            ("reflector", &self.reflector, REFLECTOR_PLACEHOLDERS),
            ("refiner", &self.refiner, REFINER_PLACEHOLDERS),
        ] {
            for p in required {
                if !text.contains(&format!("{{{{{p}}}}}")) {
                    return Err(AgentError::Template {
                        name: name.into(),
                        placeholder: (*p).into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Single-pass placeholder substitution; inserted values are never rescanned.
pub fn fill(template: &str, values: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) if values.contains_key(&after[..close]) => {
                out.push_str(values[&after[..close]]);
                rest = &after[close + 2..];
            }
            _ => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
