//! Gateway configuration: a sectioned TOML file, overridden by environment
//! variables, overridden by command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use unlearn_core::backend::openai::{OpenAiConfig, ENV_BACKEND_KEY, ENV_BACKEND_URL};
use unlearn_core::backend::GenerationParams;
use unlearn_core::evaluation::EvalConfig;
use unlearn_core::{JudgeTokens, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub url: String,
    pub api_key: Option<String>,
    pub base_model: String,
    pub corrector_model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_tokens: u32,
    /// JSON fixture for the in-process mock backend; replaces HTTP.
    pub mock_fixture: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: None,
            base_model: "base".into(),
            corrector_model: "corrector".into(),
            timeout_secs: 60,
            max_retries: 2,
            max_tokens: 256,
            mock_fixture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: 5,
            k1: 1.2,
            b: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSection {
    pub tau: f64,
    pub leak_token: String,
    pub noleak_token: String,
    pub top_logprobs: u32,
    pub text_fallback: bool,
}

impl Default for DetectionSection {
    fn default() -> Self {
        let tokens = JudgeTokens::default();
        Self {
            tau: 0.5,
            leak_token: tokens.leak,
            noleak_token: tokens.noleak,
            top_logprobs: 20,
            text_fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub maj_k: usize,
    pub prefix_tokens: usize,
    pub epsilon_target: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            maj_k: e.maj_k,
            prefix_tokens: e.plausibility_prefix_tokens,
            epsilon_target: e.epsilon_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub store: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            store: PathBuf::from("exclusions.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    /// Backend calls allowed in flight at once across all requests.
    pub max_concurrent_backend_calls: usize,
    pub max_body_bytes: usize,
    pub max_batch: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            max_concurrent_backend_calls: 32,
            max_body_bytes: 4 << 20,
            max_batch: 10_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendSection,
    pub retrieval: RetrievalSection,
    pub detection: DetectionSection,
    pub evaluation: EvaluationSection,
    pub paths: PathsSection,
    pub server: ServerSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl std::error::Error for ConfigError {}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config key {}: {}", self.key, self.message)
    }
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        message: message.into(),
    }
}

/// Values supplied on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub backend_url: Option<String>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub maj_k: Option<usize>,
    pub mock_backend: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

impl GatewayConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| text[..s.start].lines().count().to_string())
                .map(|line| format!("line {line}"))
                .unwrap_or_else(|| "file".into());
            bad(&key, e.message().to_string())
        })
    }

    /// File, then environment, then flags; the result is validated.
    pub fn load(
        path: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        overrides: &Overrides,
    ) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| bad("--config", format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(url) = env(ENV_BACKEND_URL) {
            cfg.backend.url = url;
        }
        if let Some(key) = env(ENV_BACKEND_KEY) {
            cfg.backend.api_key = Some(key);
        }
        if let Some(url) = &overrides.backend_url {
            cfg.backend.url = url.clone();
        }
        if let Some(tau) = overrides.tau {
            cfg.detection.tau = tau;
        }
        if let Some(k) = overrides.k {
            cfg.retrieval.k = k;
        }
        if let Some(maj_k) = overrides.maj_k {
            cfg.evaluation.maj_k = maj_k;
        }
        if let Some(m) = &overrides.mock_backend {
            cfg.backend.mock_fixture = Some(m.clone());
        }
        if let Some(s) = &overrides.store {
            cfg.paths.store = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.detection;
        if !(d.tau > 0.0 && d.tau < 1.0) {
            return Err(bad(
                "detection.tau",
                format!("must lie in (0, 1), got {}", d.tau),
            ));
        }
        if d.leak_token.trim().is_empty() || d.noleak_token.trim().is_empty() {
            return Err(bad(
                "detection.leak_token",
                "judge tokens must be non-empty",
            ));
        }
        if d.leak_token.trim() == d.noleak_token.trim() {
            return Err(bad(
                "detection.noleak_token",
                "must differ from detection.leak_token",
            ));
        }
        if d.top_logprobs < 2 {
            return Err(bad("detection.top_logprobs", "must be at least 2"));
        }
        let r = &self.retrieval;
        if r.k < 1 {
            return Err(bad("retrieval.k", "must be at least 1"));
        }
        if !(r.k1.is_finite() && r.k1 >= 0.0) {
            return Err(bad("retrieval.k1", "must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&r.b) {
            return Err(bad("retrieval.b", "must lie in [0, 1]"));
        }
        let e = &self.evaluation;
        if e.maj_k.is_multiple_of(2) {
            return Err(bad(
                "evaluation.maj_k",
                format!("must be odd, got {}", e.maj_k),
            ));
        }
        if e.prefix_tokens < 1 {
            return Err(bad("evaluation.prefix_tokens", "must be at least 1"));
        }
        if !(e.epsilon_target > 0.0 && e.epsilon_target <= 1.0) {
            return Err(bad("evaluation.epsilon_target", "must lie in (0, 1]"));
        }
        let b = &self.backend;
        if b.max_tokens == 0 {
            return Err(bad("backend.max_tokens", "must be at least 1"));
        }
        let s = &self.server;
        if s.max_concurrent_backend_calls == 0 {
            return Err(bad(
                "server.max_concurrent_backend_calls",
                "must be at least 1",
            ));
        }
        if s.max_batch == 0 {
            return Err(bad("server.max_batch", "must be at least 1"));
        }
        Ok(())
    }

    /// Checked only by commands that talk to a model, so store maintenance
    /// works without one configured.
    pub fn validate_backend(&self) -> Result<(), ConfigError> {
        let b = &self.backend;
        if b.mock_fixture.is_some() {
            return Ok(());
        }
        if b.url.trim().is_empty() {
            return Err(bad(
                "backend.url",
                format!("required unless a mock fixture is configured (or set {ENV_BACKEND_URL})"),
            ));
        }
        if !(b.url.starts_with("http://") || b.url.starts_with("https://")) {
            return Err(bad(
                "backend.url",
                format!("must be an http(s) URL, got {:?}", b.url),
            ));
        }
        Ok(())
    }

    pub fn judge_tokens(&self) -> JudgeTokens {
        JudgeTokens {
            leak: self.detection.leak_token.clone(),
            noleak: self.detection.noleak_token.clone(),
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let params = GenerationParams {
            max_tokens: self.backend.max_tokens,
            ..GenerationParams::default()
        };
        PipelineConfig {
            top_k: self.retrieval.k,
            tau: self.detection.tau,
            judge_tokens: self.judge_tokens(),
            top_logprobs: self.detection.top_logprobs,
            text_fallback: self.detection.text_fallback,
            draft_params: params.clone(),
            revise_params: params,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            maj_k: self.evaluation.maj_k,
            plausibility_prefix_tokens: self.evaluation.prefix_tokens,
            epsilon_target: self.evaluation.epsilon_target,
            tau: self.detection.tau,
        }
    }

    pub fn openai_config(&self) -> OpenAiConfig {
        let b = &self.backend;
        OpenAiConfig {
            base_url: b.url.clone(),
            api_key: b.api_key.clone(),
            base_model: b.base_model.clone(),
            corrector_model: b.corrector_model.clone(),
            timeout: Duration::from_secs(b.timeout_secs),
            max_retries: b.max_retries,
        }
    }
}
