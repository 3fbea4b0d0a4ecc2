//! Uniform access to completion and embedding backends.
//!
//! [`Gateway`] wraps a [`Backend`] with request validation, a concurrency cap,
//! retry with exponential backoff for transient failures, and call counters
//! that tests use to audit model usage.

mod http;
mod mock;
mod scripted;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{renormalize_first_token, HttpBackend, HttpBackendConfig, LOGPROB_FLOOR};
pub use mock::{hashing_embedding, RuleWorldBackend, MOCK_EMBEDDING_DIM};
pub use scripted::{ScriptedBackend, ScriptedReply};

use crate::error::GatewayError;
use crate::model::Score;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: usize,
    /// When set, the result must carry a log-probability for each of these categories.
    pub logprob_categories: Option<Vec<Score>>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, temperature: f64, max_output_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            temperature,
            max_output_tokens,
            logprob_categories: None,
        }
    }

    pub fn with_logprob_categories(mut self, categories: Vec<Score>) -> Self {
        self.logprob_categories = Some(categories);
        self
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be >= 1".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub model: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub category_logprobs: Option<BTreeMap<Score, f64>>,
    pub backend_meta: BackendMeta,
}

/// Retry, timeout and concurrency settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendPolicy {
    pub max_retries: usize,
    pub backoff_base_ms: u64,
    pub request_timeout_ms: u64,
    pub max_concurrent_requests: usize,
}

impl Default for BackendPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base_ms: 500,
            request_timeout_ms: 60_000,
            max_concurrent_requests: 8,
        }
    }
}

/// A completion/embedding provider. Implementations make a single attempt;
/// retries and concurrency limits live in [`Gateway`].
pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;

    /// Stable description used in run manifests and cache keys.
    fn descriptor(&self) -> String;
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut p = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *p += 1;
        self.0.cv.notify_one();
    }
}

/// Snapshot of gateway counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    /// Backend `complete` attempts, including retries.
    pub completion_attempts: usize,
    pub embed_attempts: usize,
    pub max_in_flight: usize,
}

/// Shared, internally synchronized entry point for all model calls.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    policy: BackendPolicy,
    semaphore: Semaphore,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    completion_attempts: AtomicUsize,
    embed_attempts: AtomicUsize,
    embedding_dim: Mutex<Option<usize>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, policy: BackendPolicy) -> Self {
        let cap = policy.max_concurrent_requests.max(1);
        Self {
            backend,
            policy,
            semaphore: Semaphore::new(cap),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            completion_attempts: AtomicUsize::new(0),
            embed_attempts: AtomicUsize::new(0),
            embedding_dim: Mutex::new(None),
        }
    }

    /// Gateway over the deterministic rule-world mock with no backoff delay.
    pub fn mock() -> Self {
        Self::new(
            Arc::new(RuleWorldBackend),
            BackendPolicy {
                backoff_base_ms: 0,
                ..BackendPolicy::default()
            },
        )
    }

    pub fn policy(&self) -> &BackendPolicy {
        &self.policy
    }

    pub fn descriptor(&self) -> String {
        self.backend.descriptor()
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            completion_attempts: self.completion_attempts.load(Ordering::SeqCst),
            embed_attempts: self.embed_attempts.load(Ordering::SeqCst),
            max_in_flight: self.max_in_flight.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        req.check()?;
        let result = self.with_retries(&self.completion_attempts, || self.backend.complete(req))?;
        check_logprobs(req, &result)?;
        Ok(result)
    }

    /// Unit-normalized embedding of `text`.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let mut v = self.with_retries(&self.embed_attempts, || self.backend.embed(text))?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::Malformed("zero or non-finite embedding".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let mut dim = self.embedding_dim.lock().unwrap_or_else(|e| e.into_inner());
        match *dim {
            Some(d) if d != v.len() => {
                return Err(GatewayError::Malformed(format!(
                    "embedding dimension changed from {d} to {}",
                    v.len()
                )))
            }
            Some(_) => {}
            None => *dim = Some(v.len()),
        }
        Ok(v)
    }

    fn with_retries<T>(
        &self,
        counter: &AtomicUsize,
        mut call: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.semaphore.acquire();
                let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                self.max_in_flight.fetch_max(now, Ordering::SeqCst);
                counter.fetch_add(1, Ordering::SeqCst);
                let r = call();
                self.in_flight.fetch_sub(1, Ordering::SeqCst);
                r
            };
            match outcome {
                Err(e) if e.is_retryable() && attempt <= self.policy.max_retries => {
                    let delay = self
                        .policy
                        .backoff_base_ms
                        .saturating_mul(1u64 << (attempt - 1).min(16));
                    log::debug!("attempt {attempt} failed ({e}); retrying in {delay} ms");
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
                Err(GatewayError::Transport { message, .. }) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                other => return other,
            }
        }
    }
}

fn check_logprobs(req: &CompletionRequest, res: &CompletionResult) -> Result<(), GatewayError> {
    let Some(wanted) = &req.logprob_categories else {
        return Ok(());
    };
    let Some(got) = &res.category_logprobs else {
        return Err(GatewayError::Malformed(
            "category log-probabilities requested but not returned".into(),
        ));
    };
    let keys: Vec<Score> = got.keys().copied().collect();
    let mut wanted_sorted = wanted.clone();
    wanted_sorted.sort_unstable();
    wanted_sorted.dedup();
    if keys != wanted_sorted {
        return Err(GatewayError::Malformed(format!(
            "category log-probabilities cover {keys:?}, expected {wanted_sorted:?}"
        )));
    }
    if got.values().any(|lp| !(*lp <= 0.0)) {
        return Err(GatewayError::Malformed(
            "category log-probability above zero".into(),
        ));
    }
    Ok(())
}
