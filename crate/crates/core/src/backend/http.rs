//! Client for completions endpoints that return per-token log-probabilities.
//!
//! Request mapping (`POST {endpoint}`):
//!
//! | field          | first-token            | per-label scoring             |
//! |----------------|------------------------|-------------------------------|
//! | `model`        | configured model       | configured model              |
//! | `prompt`       | rendered prompt        | prompt + prefix + variant     |
//! | `max_tokens`   | request `max_tokens`   | 1                             |
//! | `logprobs`     | request `top_logprobs` | 1                             |
//! | `echo`         | false                  | true                          |
//! | `temperature`  | 0                      | 0                             |
//!
//! The response is read from `choices[0].logprobs` with the arrays `tokens`,
//! `token_logprobs`, `top_logprobs` and `text_offset`.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, BackendRequest, DecodeStrategy, SkipRule};
use crate::extraction::TokenDistribution;

pub const API_KEY_ENV: &str = "INDISCAL_API_KEY";
pub const ENDPOINT_ENV: &str = "INDISCAL_ENDPOINT";
pub const MODEL_ENV: &str = "INDISCAL_MODEL";

#[derive(Debug, Clone)]
pub struct CompletionsBackend {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    pub timeout: Duration,
    pub skip_rule: SkipRule,
    /// Optional wrapper around the prompt, with a `{prompt}` placeholder.
    pub prompt_wrapper: Option<String>,
    agent: ureq::Agent,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

impl CompletionsBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let timeout = Duration::from_secs(60);
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        CompletionsBackend {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            timeout,
            skip_rule: SkipRule::default(),
            prompt_wrapper: None,
            agent,
        }
    }

    /// Endpoint, model and key from `INDISCAL_ENDPOINT`, `INDISCAL_MODEL`
    /// and `INDISCAL_API_KEY`. Returns `None` unless an endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok()?;
        let model = std::env::var(MODEL_ENV).unwrap_or_default();
        Some(Self::new(endpoint, model, std::env::var(API_KEY_ENV).ok()))
    }

    fn wrap(&self, prompt: &str) -> String {
        match &self.prompt_wrapper {
            Some(w) => w.replace("{prompt}", prompt),
            None => prompt.to_string(),
        }
    }

    fn post(&self, body: serde_json::Value) -> Result<Logprobs, BackendError> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| BackendError::Transport {
            message: e.to_string(),
            attempts: 1,
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport {
                message: format!("reading body: {e}"),
                attempts: 1,
                retryable: true,
            })?;
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport {
                message: format!("HTTP {status}: {}", truncate(&text)),
                attempts: 1,
                retryable: true,
            });
        }
        if status >= 400 {
            return Err(BackendError::Transport {
                message: format!("HTTP {status}: {}", truncate(&text)),
                attempts: 1,
                retryable: false,
            });
        }
        parse_logprobs(&text)
    }

    fn first_token(&self, req: &BackendRequest) -> Result<TokenDistribution, BackendError> {
        let body = json!({
            "model": self.model,
            "prompt": self.wrap(&req.prompt),
            "max_tokens": req.max_tokens,
            "logprobs": req.top_logprobs,
            "temperature": 0,
            "echo": false,
        });
        let lp = self.post(body)?;
        distribution_at_answer(&lp, &self.skip_rule, req.answer_position, req.max_tokens)
    }

    fn per_label(&self, req: &BackendRequest) -> Result<TokenDistribution, BackendError> {
        if req.answer_position != 1 {
            return Err(BackendError::Unsupported(
                "per-label scoring reads the first answer only".into(),
            ));
        }
        let prompt = self.wrap(&req.prompt);
        let mut entries = BTreeMap::new();
        for label in req.label_space.labels() {
            let mut best: Option<(String, f64)> = None;
            for variant in &label.variants {
                let continuation = format!("{}{}", req.forced_prefix, variant);
                let body = json!({
                    "model": self.model,
                    "prompt": format!("{prompt}{continuation}"),
                    "max_tokens": 1,
                    "logprobs": 1,
                    "temperature": 0,
                    "echo": true,
                });
                let lp = self.post(body)?;
                let score = continuation_logprob(&lp, prompt.chars().count(), continuation.chars().count())?;
                if best.as_ref().is_none_or(|(_, s)| score > *s) {
                    best = Some((variant.clone(), score));
                }
            }
            let (token, score) = best.expect("label spaces have at least one variant");
            entries.insert(token, score.min(0.0));
        }
        TokenDistribution::new(entries, "forced continuation")
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

fn parse_logprobs(text: &str) -> Result<Logprobs, BackendError> {
    let resp: CompletionResponse =
        serde_json::from_str(text).map_err(|e| BackendError::Protocol(format!("{e}: {}", truncate(text))))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    choice
        .logprobs
        .ok_or_else(|| BackendError::Protocol("response has no logprobs".into()))
}

fn distribution_at_answer(
    lp: &Logprobs,
    rule: &SkipRule,
    position: usize,
    max_tokens: usize,
) -> Result<TokenDistribution, BackendError> {
    let raw: String = lp.tokens.concat();
    let idx = rule
        .locate_answer(&lp.tokens, position)
        .ok_or_else(|| BackendError::Extraction { raw: raw.clone(), max_tokens })?;
    let mut entries: BTreeMap<String, f64> = lp
        .top_logprobs
        .as_ref()
        .and_then(|t| t.get(idx).cloned().flatten())
        .unwrap_or_default()
        .into_iter()
        .map(|(t, v)| (t, v.min(0.0)))
        .collect();
    if let Some(Some(chosen)) = lp.token_logprobs.get(idx) {
        entries.entry(lp.tokens[idx].clone()).or_insert(chosen.min(0.0));
    }
    TokenDistribution::new(entries, format!("answer {position} at generated token {idx}"))
        .map_err(|e| BackendError::Protocol(e.to_string()))
}

/// Sum of log-probabilities of the tokens covering the continuation.
fn continuation_logprob(lp: &Logprobs, prompt_chars: usize, cont_chars: usize) -> Result<f64, BackendError> {
    if lp.text_offset.len() != lp.tokens.len() {
        return Err(BackendError::Protocol("echo response lacks text_offset".into()));
    }
    let end = prompt_chars + cont_chars;
    let mut total = 0.0;
    let mut any = false;
    for (i, off) in lp.text_offset.iter().enumerate() {
        let tok_end = off + lp.tokens[i].chars().count();
        if tok_end > prompt_chars && *off < end {
            let v = lp
                .token_logprobs
                .get(i)
                .copied()
                .flatten()
                .ok_or_else(|| BackendError::Protocol(format!("missing logprob for token {i}")))?;
            total += v;
            any = true;
        }
    }
    if !any {
        return Err(BackendError::Protocol("continuation tokens not found in echo".into()));
    }
    Ok(total)
}

impl Backend for CompletionsBackend {
    fn identity(&self) -> String {
        let wrapper = if self.prompt_wrapper.is_some() { ",wrapped" } else { "" };
        format!("completions({},model={}{wrapper})", self.endpoint, self.model)
    }

    fn score_first_answer(&self, req: &BackendRequest) -> Result<TokenDistribution, BackendError> {
        match req.decode {
            DecodeStrategy::FirstToken => self.first_token(req),
            DecodeStrategy::PerLabelScoring => self.per_label(req),
        }
    }
}
