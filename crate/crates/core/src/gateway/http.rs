//! Chat-completions style HTTP backend.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendMeta, CompletionRequest, CompletionResult};
use crate::error::{GatewayError, WorkbenchError};
use crate::model::Score;

/// Log-probability assigned to a score category missing from the reported
/// top tokens, before renormalization.
pub const LOGPROB_FLOOR: f64 = -13.815510557964274; // ln(1e-6)

pub const API_KEY_ENV: &str = "GUIDEOPT_API_KEY";
pub const BASE_URL_ENV: &str = "GUIDEOPT_BASE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub top_logprobs: usize,
    pub request_timeout_ms: u64,
    /// When set, request and response bodies are appended here as JSON lines.
    #[serde(skip)]
    pub log_path: Option<PathBuf>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key: None,
            top_logprobs: 20,
            request_timeout_ms: 60_000,
            log_path: None,
        }
    }
}

impl HttpBackendConfig {
    pub fn from_file(path: &Path) -> Result<Self, WorkbenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorkbenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| WorkbenchError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Environment variables take precedence over file values.
    pub fn apply_env(mut self) -> Self {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            self.api_key = Some(key);
        }
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            self.base_url = url;
        }
        self
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
    log: Option<Mutex<File>>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, WorkbenchError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.request_timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let log = match &config.log_path {
            Some(p) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|source| WorkbenchError::Io {
                        path: p.clone(),
                        source,
                    })?,
            )),
            None => None,
        };
        Ok(Self { config, agent, log })
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{endpoint}", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, endpoint: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(endpoint);
        let mut req = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let sent = req.send(body.to_string());
        let mut resp = sent.map_err(|e| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
        self.log_exchange(&url, body, status, &text);
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| GatewayError::Malformed(format!("invalid JSON: {e}"))),
            408 | 429 | 500..=599 => Err(GatewayError::Transport {
                attempts: 1,
                message: format!("status {status}: {}", truncate(&text, 200)),
            }),
            _ => Err(GatewayError::Rejected {
                status,
                message: truncate(&text, 500).to_string(),
            }),
        }
    }

    fn log_exchange(&self, url: &str, request: &Value, status: u16, response: &str) {
        let Some(log) = &self.log else { return };
        // Only bodies are logged; the credential travels in a header.
        let line = json!({
            "url": url,
            "request": request,
            "status": status,
            "response": response,
        });
        if let Ok(mut f) = log.lock() {
            let _ = writeln!(f, "{line}");
        }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Log-probabilities reported for one generated token.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TokenLogprobs {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-category distribution from token-level log-probabilities.
///
/// Uses the first generated token that reads as an in-scale score (position 0
/// when none does), merges alternatives that spell the same score, floors
/// absent categories at [`LOGPROB_FLOOR`] and renormalizes over the scale.
pub fn renormalize_first_token(
    tokens: &[TokenLogprobs],
    categories: &[Score],
) -> Option<BTreeMap<Score, f64>> {
    let as_score = |t: &str| {
        t.trim()
            .parse::<Score>()
            .ok()
            .filter(|s| categories.contains(s))
    };
    let position = tokens
        .iter()
        .find(|t| as_score(&t.token).is_some())
        .or_else(|| tokens.first())?;
    let mut alternatives: Vec<(&str, f64)> = position
        .top_logprobs
        .iter()
        .map(|t| (t.token.as_str(), t.logprob))
        .collect();
    if !alternatives.iter().any(|(t, _)| *t == position.token) {
        alternatives.push((&position.token, position.logprob));
    }
    let raw: Vec<(Score, f64)> = categories
        .iter()
        .map(|&c| {
            let matches: Vec<f64> = alternatives
                .iter()
                .filter(|(t, _)| as_score(t) == Some(c))
                .map(|(_, lp)| *lp)
                .collect();
            let lp = if matches.is_empty() {
                LOGPROB_FLOOR
            } else {
                log_sum_exp(matches).max(LOGPROB_FLOOR)
            };
            (c, lp)
        })
        .collect();
    let z = log_sum_exp(raw.iter().map(|(_, lp)| *lp));
    Some(raw.into_iter().map(|(c, lp)| (c, (lp - z).min(0.0))).collect())
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let started = Instant::now();
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if req.logprob_categories.is_some() {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.config.top_logprobs);
        }
        let resp = self.post("chat/completions", &body)?;
        let choice = resp
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| GatewayError::Malformed("response has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Malformed("choice has no message content".into()))?
            .to_string();
        let category_logprobs = match &req.logprob_categories {
            None => None,
            Some(categories) => {
                let tokens: Vec<TokenLogprobs> = choice
                    .pointer("/logprobs/content")
                    .cloned()
                    .map(serde_json::from_value)
                    .transpose()
                    .map_err(|e| GatewayError::Malformed(format!("logprobs: {e}")))?
                    .unwrap_or_default();
                Some(renormalize_first_token(&tokens, categories).ok_or_else(|| {
                    GatewayError::Malformed("no token log-probabilities returned".into())
                })?)
            }
        };
        Ok(CompletionResult {
            text,
            category_logprobs,
            backend_meta: BackendMeta {
                model: resp
                    .get("model")
                    .and_then(Value::as_str)
                    .unwrap_or(&self.config.model)
                    .to_string(),
                prompt_tokens: resp.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
                completion_tokens: resp
                    .pointer("/usage/completion_tokens")
                    .and_then(Value::as_u64),
                latency_ms: Some(started.elapsed().as_millis() as u64),
            },
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = json!({"model": self.config.embedding_model, "input": text});
        let resp = self.post("embeddings", &body)?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Malformed("response has no embedding".into()))?;
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| GatewayError::Malformed("non-numeric embedding value".into()))
            })
            .collect()
    }

    fn descriptor(&self) -> String {
        format!(
            "http:{}|{}|{}",
            self.config.base_url, self.config.model, self.config.embedding_model
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(token: &str, logprob: f64, top: &[(&str, f64)]) -> TokenLogprobs {
        TokenLogprobs {
            token: token.into(),
            logprob,
            top_logprobs: top
                .iter()
                .map(|(t, lp)| TopLogprob {
                    token: (*t).into(),
                    logprob: *lp,
                })
                .collect(),
        }
    }

    #[test]
    fn renormalizes_over_scale() {
        let tokens = [tok(
            "2",
            0.6f64.ln(),
            &[("2", 0.6f64.ln()), ("1", 0.2f64.ln()), ("The", 0.2f64.ln())],
        )];
        let d = renormalize_first_token(&tokens, &[0, 1, 2]).unwrap();
        let z: f64 = 0.6 + 0.2 + 1e-6;
        assert!((d[&2] - (0.6 / z).ln()).abs() < 1e-12);
        assert!((d[&1] - (0.2 / z).ln()).abs() < 1e-12);
        assert!((d[&0] - (1e-6 / z).ln()).abs() < 1e-9);
        let total: f64 = d.values().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skips_to_first_score_token_and_merges_spellings() {
        let tokens = [
            tok("Score", -0.01, &[("Score", -0.01)]),
            tok(":", -0.01, &[]),
            tok(" 1", 0.5f64.ln(), &[(" 1", 0.5f64.ln()), ("1", 0.3f64.ln()), (" 0", 0.2f64.ln())]),
        ];
        let d = renormalize_first_token(&tokens, &[0, 1, 2]).unwrap();
        let z: f64 = 0.8 + 0.2 + 1e-6;
        assert!((d[&1] - (0.8 / z).ln()).abs() < 1e-12);
        assert!((d[&0] - (0.2 / z).ln()).abs() < 1e-12);
    }

    #[test]
    fn no_tokens_gives_none() {
        assert!(renormalize_first_token(&[], &[0, 1]).is_none());
    }
}
