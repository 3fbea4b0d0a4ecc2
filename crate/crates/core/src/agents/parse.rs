use std::sync::OnceLock;

use regex::Regex;

use crate::model::{Score, ScoreScale};

fn int_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+").unwrap())
}

/// Score and reasoning from a grader completion.
///
/// The first whitespace-delimited token must be an in-scale integer; failing
/// that, the first in-scale integer anywhere in the text is used. Reasoning
/// is whatever follows the first `Reasoning:` marker.
pub fn parse_grader_output(text: &str, scale: &ScoreScale) -> Option<(Score, String)> {
    let primary = text
        .split_whitespace()
        .next()
        .and_then(|t| t.parse::<Score>().ok())
        .filter(|s| scale.contains(*s));
    let score = primary.or_else(|| {
        int_re()
            .find_iter(text)
            .filter_map(|m| m.as_str().parse::<Score>().ok())
            .find(|s| scale.contains(*s))
    })?;
    let reasoning = text
        .split_once("Reasoning:")
        .map(|(_, r)| r.trim().to_string())
        .unwrap_or_default();
    Some((score, reasoning))
}

/// Payload between the last `<START>` and the `<END>` that follows it.
pub fn extract_delimited(text: &str) -> Option<&str> {
    let end = text.rfind("<END>")?;
    let start = text[..end].rfind("<START>")? + "<START>".len();
    Some(text[start..end].trim())
}
