//! LLM backend abstraction.
//!
//! The gateway needs four things from a backend: plain generation, a forced
//! prefix continuation, the top log-probabilities at the first generated
//! position (for the two-token leakage judgement), and teacher-forced scoring
//! of a target string. [`openai::OpenAiBackend`] speaks the OpenAI-compatible
//! HTTP protocol; [`mock::MockBackend`] is deterministic and used in tests and
//! fixtures.

pub mod mock;
pub mod openai;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::sigmoid;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Connection or timeout failure; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    /// Error payload returned by the backend, verbatim.
    #[error("backend returned {status}: {body}")]
    Api { status: u16, body: String },
    #[error("backend lacks capability: {0}")]
    Capability(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error(
        "judge tokens unresolvable: {leak:?} or {noleak:?} missing from top log-probabilities"
    )]
    JudgeUnresolvable { leak: String, noleak: String },
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Which model a request goes to. Drafting uses the untouched base model;
/// judgement and revision go to the corrector-attached model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Base,
    Corrector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
}

impl ChatPrompt {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            system: None,
            user: text.into(),
        }
    }

    pub fn with_system(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: Some(system.into()),
            user: user.into(),
        }
    }

    /// Single-string rendering used for scoring and mock lookups.
    pub fn flatten(&self) -> String {
        match &self.system {
            Some(system) => format!("{system}\n\n{}", self.user),
            None => self.user.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            temperature: 0.0,
            stop: Vec::new(),
        }
    }
}

/// Cuts `text` at the first occurrence of any stop string.
pub fn apply_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

/// Per-token natural-log probabilities of a scored sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logps: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(tokens: Vec<String>, logps: Vec<f64>) -> Result<Self, BackendError> {
        if tokens.len() != logps.len() {
            return Err(BackendError::Protocol(format!(
                "{} tokens but {} log-probabilities",
                tokens.len(),
                logps.len()
            )));
        }
        if let Some(bad) = logps.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(BackendError::Protocol(format!(
                "log-probability {bad} is not <= 0"
            )));
        }
        Ok(Self { tokens, logps })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.logps.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogProb {
    pub token: String,
    pub logprob: f64,
}

/// What the backend returned for a judgement request: the generated text
/// (for the text fallback) and the top alternatives at the first position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeProbe {
    pub text: String,
    pub top_logprobs: Vec<TopLogProb>,
}

/// Surface strings of the two judge tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeTokens {
    pub leak: String,
    pub noleak: String,
}

impl Default for JudgeTokens {
    fn default() -> Self {
        Self {
            leak: "Yes".into(),
            noleak: "No".into(),
        }
    }
}

/// Judge-token scores and the derived margin.
///
/// With a full-vocabulary softmax, `log p(leak) - log p(noleak)` equals the
/// logit difference because the partition function cancels, so
/// log-probabilities can stand in for logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub z_leak: f64,
    pub z_noleak: f64,
    pub delta: f64,
    pub sigma_delta: f64,
    pub tau: f64,
}

impl JudgeScores {
    pub fn new(z_leak: f64, z_noleak: f64, tau: f64) -> Self {
        let delta = z_leak - z_noleak;
        Self {
            z_leak,
            z_noleak,
            delta,
            sigma_delta: sigmoid(delta),
            tau,
        }
    }
}

/// Picks the judge-token log-probabilities out of the first-position
/// alternatives. Surface forms are compared after trimming whitespace, so
/// `" Yes"` matches `"Yes"`; the most likely variant wins.
pub fn resolve_judge_scores(
    top: &[TopLogProb],
    tokens: &JudgeTokens,
    tau: f64,
) -> Result<JudgeScores, BackendError> {
    let find = |surface: &str| {
        top.iter()
            .filter(|t| t.token.trim() == surface)
            .map(|t| t.logprob)
            .fold(None, |best: Option<f64>, lp| {
                Some(best.map_or(lp, |b| b.max(lp)))
            })
    };
    match (find(&tokens.leak), find(&tokens.noleak)) {
        (Some(leak), Some(noleak)) => Ok(JudgeScores::new(leak, noleak, tau)),
        _ => Err(BackendError::JudgeUnresolvable {
            leak: tokens.leak.clone(),
            noleak: tokens.noleak.clone(),
        }),
    }
}

/// Sampling settings a backend applies, recorded in outcomes for audit.
/// A temperature other than 1 rescales the judge margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingInfo {
    pub backend: String,
    pub base_model: String,
    pub corrector_model: String,
    pub logprob_temperature: f64,
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn generate(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        params: &GenerationParams,
    ) -> Result<String, BackendError>;

    /// Continues `prompt` after the assistant turn has been forced to start
    /// with `forced_prefix`. The prefix itself is not part of the result.
    async fn continue_with_prefix(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        forced_prefix: &str,
        params: &GenerationParams,
    ) -> Result<String, BackendError>;

    /// Like [`Backend::continue_with_prefix`] but returns the top
    /// log-probabilities at the first generated position.
    async fn judge_probe(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        forced_prefix: &str,
        top_n: u32,
    ) -> Result<JudgeProbe, BackendError>;

    /// Teacher-forced per-token log-probabilities of `target` after `prompt`.
    async fn score_sequence(
        &self,
        route: Route,
        prompt: &str,
        target: &str,
    ) -> Result<TokenLogProbs, BackendError>;

    fn sampling_info(&self) -> SamplingInfo;
}

/// Judge scores straight from a backend.
pub async fn judge_logprobs(
    backend: &dyn Backend,
    prompt: &ChatPrompt,
    forced_prefix: &str,
    tokens: &JudgeTokens,
    tau: f64,
    top_n: u32,
) -> Result<JudgeScores, BackendError> {
    let probe = backend
        .judge_probe(Route::Corrector, prompt, forced_prefix, top_n)
        .await?;
    resolve_judge_scores(&probe.top_logprobs, tokens, tau)
}
