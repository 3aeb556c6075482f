//! Model backends that turn a prompt into a [`TokenDistribution`].
//!
//! Two implementations ship: [`http::CompletionsBackend`] for any
//! completions endpoint that reports per-token top log-probabilities, and
//! [`mock::MockModel`], a deterministic stand-in for tests and simulations.

pub mod http;
pub mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::TokenDistribution;
use crate::model::LabelSpace;

pub use http::CompletionsBackend;
pub use mock::{MockModel, MockModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    /// One generation call; read the top log-probabilities at the answer's
    /// first content token.
    #[default]
    FirstToken,
    /// Score each label variant as a forced continuation.
    PerLabelScoring,
}

impl DecodeStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeStrategy::FirstToken => "first_token",
            DecodeStrategy::PerLabelScoring => "per_label_scoring",
        }
    }
}

/// Identifies what a prompt is about. Only the mock reads it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RequestContext {
    pub target_id: String,
    #[serde(default)]
    pub reference_ids: Vec<String>,
    /// `j` of the reference set, 1-based.
    #[serde(default)]
    pub reference_set: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub prompt: String,
    pub label_space: Arc<LabelSpace>,
    pub max_tokens: usize,
    pub top_logprobs: usize,
    pub decode: DecodeStrategy,
    /// Which enumerated answer to read (1 = first).
    pub answer_position: usize,
    /// Text inserted between the prompt and a label when force-scoring.
    pub forced_prefix: String,
    pub context: RequestContext,
}

impl BackendRequest {
    pub fn new(prompt: impl Into<String>, label_space: Arc<LabelSpace>, context: RequestContext) -> Self {
        let top = label_space.k().max(5);
        BackendRequest {
            prompt: prompt.into(),
            label_space,
            max_tokens: 16,
            top_logprobs: top,
            decode: DecodeStrategy::FirstToken,
            answer_position: 1,
            forced_prefix: " ".to_string(),
            context,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.decode == DecodeStrategy::FirstToken && self.top_logprobs < self.label_space.k() {
            return Err(BackendError::InvalidRequest(format!(
                "top_logprobs {} < K = {}",
                self.top_logprobs,
                self.label_space.k()
            )));
        }
        if self.answer_position == 0 {
            return Err(BackendError::InvalidRequest("answer_position is 1-based".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport {
        message: String,
        attempts: u32,
        retryable: bool,
    },
    #[error("no answer token within {max_tokens} generated tokens; generation {raw:?}")]
    Extraction { raw: String, max_tokens: usize },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("request not covered by backend: {0}")]
    NotCovered(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { retryable: true, .. })
    }

    fn with_attempts(self, n: u32) -> Self {
        match self {
            BackendError::Transport { message, retryable, .. } => BackendError::Transport {
                message,
                attempts: n,
                retryable,
            },
            other => other,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Stable description recorded in run provenance.
    fn identity(&self) -> String;

    /// Distribution over tokens at the requested answer position.
    fn score_first_answer(&self, req: &BackendRequest) -> Result<TokenDistribution, BackendError>;
}

/// Locates the first content token of the n-th enumerated answer.
///
/// Tokens made only of whitespace and `skip_chars` are skipped. Inside an
/// answer, a skipped token containing a digit or newline, or a bare `,`/`;`,
/// closes that answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRule {
    pub skip_chars: String,
}

impl Default for SkipRule {
    fn default() -> Self {
        SkipRule {
            skip_chars: "0123456789).:".to_string(),
        }
    }
}

impl SkipRule {
    pub fn is_skipped(&self, token: &str) -> bool {
        token
            .chars()
            .all(|c| c.is_whitespace() || self.skip_chars.contains(c))
    }

    fn closes_answer(&self, token: &str) -> bool {
        let t = token.trim();
        t == "," || t == ";" || (self.is_skipped(token) && token.chars().any(|c| c.is_ascii_digit() || c == '\n'))
    }

    pub fn locate_answer<S: AsRef<str>>(&self, tokens: &[S], position: usize) -> Option<usize> {
        let mut found = 0;
        let mut in_answer = false;
        for (i, tok) in tokens.iter().enumerate() {
            let tok = tok.as_ref();
            if in_answer {
                if self.closes_answer(tok) {
                    in_answer = false;
                }
                continue;
            }
            if self.is_skipped(tok) {
                continue;
            }
            found += 1;
            if found == position {
                return Some(i);
            }
            in_answer = true;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 250,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            initial_backoff_ms: 0,
            multiplier: 1.0,
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32 - 1);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

/// Score one request, retrying retryable failures with exponential backoff.
pub fn score_with_retry(
    backend: &dyn Backend,
    req: &BackendRequest,
    retry: &RetryPolicy,
) -> Result<TokenDistribution, BackendError> {
    req.validate()?;
    let attempts = retry.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match backend.score_first_answer(req) {
            Ok(d) => return Ok(d),
            Err(e) if e.is_retryable() && attempt < attempts => {
                log::debug!("attempt {attempt} failed for {}: {e}", req.context.target_id);
                thread::sleep(retry.backoff(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e.with_attempts(attempt)),
        }
    }
}

/// Score requests with up to `parallelism` concurrent calls. Output order
/// matches input order; a failed request only fails its own slot.
pub fn score_batch(
    backend: &dyn Backend,
    requests: &[BackendRequest],
    parallelism: usize,
    retry: &RetryPolicy,
) -> Vec<Result<TokenDistribution, BackendError>> {
    let workers = parallelism.max(1).min(requests.len().max(1));
    if workers == 1 {
        return requests
            .iter()
            .map(|r| score_with_retry(backend, r, retry))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TokenDistribution, BackendError>>>> =
        Mutex::new(vec![None; requests.len()]);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let r = score_with_retry(backend, &requests[i], retry);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}
