use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{Backend, BackendMeta, CompletionRequest, CompletionResult, RuleWorldBackend};
use crate::error::GatewayError;
use crate::model::Score;

/// One canned backend reply.
#[derive(Debug, Clone)]
pub enum ScriptedReply {
    Text {
        text: String,
        category_logprobs: Option<BTreeMap<Score, f64>>,
    },
    TransientFailure,
    Rejected(u16),
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedReply::Text {
            text: text.into(),
            category_logprobs: None,
        }
    }

    /// A reply carrying a distribution with 0.9 on `score` and the rest spread
    /// evenly over the other categories.
    pub fn graded(text: impl Into<String>, score: Score, categories: &[Score]) -> Self {
        ScriptedReply::Text {
            text: text.into(),
            category_logprobs: Some(RuleWorldBackend::distribution(score, categories)),
        }
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Result<CompletionResult, GatewayError> + Send + Sync;

/// Test backend that replays a fixed script or delegates to a closure.
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<ScriptedReply>>,
    responder: Option<Box<Responder>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(replies: Vec<ScriptedReply>) -> Self {
        Self {
            queue: Mutex::new(replies.into()),
            responder: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_fn(
        f: impl Fn(&CompletionRequest) -> Result<CompletionResult, GatewayError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            queue: Mutex::new(VecDeque::new()),
            responder: Some(Box::new(f)),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(f) = &self.responder {
            return f(req);
        }
        let reply = self
            .queue
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop_front()
            .ok_or_else(|| GatewayError::Malformed("script exhausted".into()))?;
        match reply {
            ScriptedReply::Text {
                text,
                category_logprobs,
            } => Ok(CompletionResult {
                text,
                category_logprobs,
                backend_meta: BackendMeta {
                    model: "scripted".into(),
                    ..BackendMeta::default()
                },
            }),
            ScriptedReply::TransientFailure => Err(GatewayError::Transport {
                attempts: 1,
                message: "scripted transient failure".into(),
            }),
            ScriptedReply::Rejected(status) => Err(GatewayError::Rejected {
                status,
                message: "scripted rejection".into(),
            }),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        RuleWorldBackend.embed(text)
    }

    fn descriptor(&self) -> String {
        "scripted".into()
    }
}
