//! OpenAI-compatible HTTP backend.
//!
//! Generation and judgement use `POST {base}/v1/chat/completions`; forced
//! prefixes are sent as a trailing assistant message with
//! `continue_final_message` set (the vLLM extension for prefilled assistant
//! turns). Sequence scoring uses `POST {base}/v1/completions` in echo mode.

use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{
    apply_stop, Backend, BackendError, ChatPrompt, GenerationParams, JudgeProbe, Route,
    SamplingInfo, TokenLogProbs, TopLogProb,
};

pub const ENV_BACKEND_URL: &str = "UNLEARN_BACKEND_URL";
pub const ENV_BACKEND_KEY: &str = "UNLEARN_BACKEND_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub base_model: String,
    pub corrector_model: String,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl OpenAiConfig {
    pub fn new(
        base_url: impl Into<String>,
        base_model: impl Into<String>,
        corrector_model: impl Into<String>,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            base_model: base_model.into(),
            corrector_model: corrector_model.into(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
        }
    }

    fn endpoint(&self, path: &str) -> String {
        let base = self.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/{path}")
    }

    fn model(&self, route: Route) -> &str {
        match route {
            Route::Base => &self.base_model,
            Route::Corrector => &self.corrector_model,
        }
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::Client,
}

fn messages(prompt: &ChatPrompt, forced_prefix: &str) -> Vec<Value> {
    let mut out = Vec::new();
    if let Some(system) = &prompt.system {
        out.push(json!({"role": "system", "content": system}));
    }
    out.push(json!({"role": "user", "content": prompt.user}));
    if !forced_prefix.is_empty() {
        out.push(json!({"role": "assistant", "content": forced_prefix}));
    }
    out
}

/// Request body for a chat completion.
pub fn chat_request(
    model: &str,
    prompt: &ChatPrompt,
    forced_prefix: &str,
    params: &GenerationParams,
    top_logprobs: Option<u32>,
) -> Value {
    let mut body = json!({
        "model": model,
        "messages": messages(prompt, forced_prefix),
        "max_tokens": params.max_tokens,
        "temperature": params.temperature,
        "logprobs": top_logprobs.is_some(),
    });
    if let Some(n) = top_logprobs {
        body["top_logprobs"] = json!(n);
    }
    if !params.stop.is_empty() {
        body["stop"] = json!(params.stop);
    }
    if !forced_prefix.is_empty() {
        body["continue_final_message"] = json!(true);
        body["add_generation_prompt"] = json!(false);
    }
    body
}

/// Request body for echo-mode scoring.
pub fn scoring_request(model: &str, prompt: &str, target: &str) -> Value {
    json!({
        "model": model,
        "prompt": format!("{prompt}{target}"),
        "max_tokens": 1,
        "temperature": 0.0,
        "logprobs": 1,
        "echo": true,
    })
}

fn first_choice(body: &Value) -> Result<&Value, BackendError> {
    body.get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))
}

pub fn parse_chat_text(body: &Value) -> Result<String, BackendError> {
    first_choice(body)?
        .pointer("/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Protocol("choice has no message content".into()))
}

/// Top alternatives at the first generated position. An absent logprobs
/// block yields an empty list.
pub fn parse_first_top_logprobs(body: &Value) -> Result<Vec<TopLogProb>, BackendError> {
    let Some(first) = first_choice(body)?.pointer("/logprobs/content/0") else {
        return Ok(Vec::new());
    };
    let Some(top) = first.get("top_logprobs").and_then(Value::as_array) else {
        return Ok(Vec::new());
    };
    top.iter()
        .map(|t| {
            let token = t.get("token").and_then(Value::as_str);
            let logprob = t.get("logprob").and_then(Value::as_f64);
            match (token, logprob) {
                (Some(token), Some(logprob)) => Ok(TopLogProb {
                    token: token.to_string(),
                    logprob,
                }),
                _ => Err(BackendError::Protocol(format!(
                    "bad top_logprobs entry {t}"
                ))),
            }
        })
        .collect()
}

/// Extracts the target's tokens from an echo-mode completion. Offsets are in
/// characters; tokens starting at or after the prompt end and before the
/// echoed text end belong to the target.
pub fn parse_echo_logprobs(
    body: &Value,
    prompt: &str,
    target: &str,
) -> Result<TokenLogProbs, BackendError> {
    let lp = first_choice(body)?
        .get("logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| BackendError::Capability("completions echo with logprobs".into()))?;
    let arr = |k: &str| {
        lp.get(k)
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol(format!("logprobs.{k} missing")))
    };
    let tokens = arr("tokens")?;
    let logps = arr("token_logprobs")?;
    let offsets = arr("text_offset")?;
    if tokens.len() != logps.len() || tokens.len() != offsets.len() {
        return Err(BackendError::Protocol(
            "logprobs arrays differ in length".into(),
        ));
    }
    let start = prompt.chars().count() as u64;
    let end = start + target.chars().count() as u64;
    let mut out_tokens = Vec::new();
    let mut out_logps = Vec::new();
    for i in 0..tokens.len() {
        let offset = offsets[i]
            .as_u64()
            .ok_or_else(|| BackendError::Protocol("bad text_offset".into()))?;
        if offset < start || offset >= end {
            continue;
        }
        let token = tokens[i]
            .as_str()
            .ok_or_else(|| BackendError::Protocol("bad token".into()))?;
        let logp = logps[i].as_f64().ok_or_else(|| {
            BackendError::Protocol(format!(
                "missing log-probability for target token {token:?}"
            ))
        })?;
        out_tokens.push(token.to_string());
        out_logps.push(logp);
    }
    TokenLogProbs::new(out_tokens, out_logps)
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    async fn post_once(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Api {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("{e}: {text}")))
    }

    /// Posts with bounded retries on transport failures. All requests here
    /// are deterministic completions, so replays are harmless.
    async fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.config.endpoint(path);
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body).await {
                Err(e) if e.is_retriable() && attempt < self.config.max_retries => {
                    attempt += 1;
                    tracing::debug!(attempt, error = %e, "retrying backend request");
                    tokio::time::sleep(Duration::from_millis(100 << attempt.min(6))).await;
                }
                other => return other,
            }
        }
    }
}

#[async_trait]
impl Backend for OpenAiBackend {
    async fn generate(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        self.continue_with_prefix(route, prompt, "", params).await
    }

    async fn continue_with_prefix(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        forced_prefix: &str,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let body = chat_request(
            self.config.model(route),
            prompt,
            forced_prefix,
            params,
            None,
        );
        let resp = self.post("chat/completions", &body).await?;
        let text = parse_chat_text(&resp)?;
        // Some servers echo the prefilled assistant text.
        let text = text
            .strip_prefix(forced_prefix)
            .unwrap_or(&text)
            .to_string();
        Ok(apply_stop(&text, &params.stop))
    }

    async fn judge_probe(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        forced_prefix: &str,
        top_n: u32,
    ) -> Result<JudgeProbe, BackendError> {
        let params = GenerationParams {
            max_tokens: 4,
            temperature: 0.0,
            stop: vec!["\n".into()],
        };
        let body = chat_request(
            self.config.model(route),
            prompt,
            forced_prefix,
            &params,
            Some(top_n),
        );
        let resp = self.post("chat/completions", &body).await?;
        let text = parse_chat_text(&resp)?;
        let text = text
            .strip_prefix(forced_prefix)
            .unwrap_or(&text)
            .to_string();
        Ok(JudgeProbe {
            text,
            top_logprobs: parse_first_top_logprobs(&resp)?,
        })
    }

    async fn score_sequence(
        &self,
        route: Route,
        prompt: &str,
        target: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        if target.is_empty() {
            return Ok(TokenLogProbs::default());
        }
        let body = scoring_request(self.config.model(route), prompt, target);
        let resp = self.post("completions", &body).await?;
        parse_echo_logprobs(&resp, prompt, target)
    }

    fn sampling_info(&self) -> SamplingInfo {
        SamplingInfo {
            backend: self.config.base_url.clone(),
            base_model: self.config.base_model.clone(),
            corrector_model: self.config.corrector_model.clone(),
            logprob_temperature: 1.0,
        }
    }
}
