//! Deterministic in-process backend.
//!
//! Behaviour is described by a [`MockFixture`], loadable from JSON so the CLI
//! and service can run hermetically. Correction prompts (recognized by their
//! system prompt) get corrector behaviour; leakage-judge prompts get verdict
//! behaviour; everything else is looked up as a draft.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    apply_stop, Backend, BackendError, ChatPrompt, GenerationParams, JudgeProbe, Route,
    SamplingInfo, TokenLogProbs, TopLogProb,
};
use crate::correction::{
    parse_correction_prompt, CORRECTION_SYSTEM_PROMPT, JUDGE_LINE, REVISION_LINE,
};
use crate::numeric::log_softmax;
use crate::overlap::answer_overlaps;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JudgeFixture {
    /// Leak iff the response overlaps any reference answer in the prompt.
    Lexical {
        #[serde(default = "default_confident")]
        leak_logprob: f64,
        #[serde(default = "default_unlikely")]
        noleak_logprob: f64,
    },
    /// First rule whose substring occurs in the response wins.
    Table {
        #[serde(default)]
        rules: Vec<JudgeRule>,
        default: JudgePair,
    },
    /// Fixed logits over a small vocabulary; top log-probabilities are its
    /// exact log-softmax.
    Distribution {
        vocab: Vec<String>,
        logits: Vec<f64>,
    },
}

fn default_confident() -> f64 {
    -0.05
}

fn default_unlikely() -> f64 {
    -3.0
}

impl Default for JudgeFixture {
    fn default() -> Self {
        JudgeFixture::Lexical {
            leak_logprob: default_confident(),
            noleak_logprob: default_unlikely(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgePair {
    pub yes: f64,
    pub no: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRule {
    pub response_contains: String,
    #[serde(flatten)]
    pub logprobs: JudgePair,
}

/// Behaviour on leakage-judge (verifier) prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VerdictFixture {
    /// YES iff the response overlaps the correct answer.
    Lexical,
    Always {
        leak: bool,
    },
    /// Cycles through the given verdicts, one per call.
    Script {
        votes: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    /// User prompt -> draft.
    #[serde(default)]
    pub drafts: HashMap<String, String>,
    #[serde(default)]
    pub default_draft: Option<String>,
    /// Flattened prompt followed by the forced prefix -> completion.
    #[serde(default)]
    pub completions: HashMap<String, String>,
    #[serde(default)]
    pub judge: JudgeFixture,
    /// Draft -> revised response.
    #[serde(default)]
    pub revisions: HashMap<String, String>,
    #[serde(default = "default_revision")]
    pub default_revision: String,
    #[serde(default)]
    pub verdicts: Option<VerdictFixture>,
    #[serde(default = "default_token_logprob")]
    pub token_logprob: f64,
    #[serde(default)]
    pub token_logprobs: HashMap<String, f64>,
    #[serde(default = "default_true")]
    pub logprobs_available: bool,
    #[serde(default = "default_true")]
    pub scoring_available: bool,
}

fn default_revision() -> String {
    "I'm sorry, but I can't share details about that.".into()
}

fn default_token_logprob() -> f64 {
    -1.0
}

fn default_true() -> bool {
    true
}

impl Default for MockFixture {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty fixture")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MockCalls {
    pub generate: u64,
    pub continue_with_prefix: u64,
    pub judge_probe: u64,
    pub score_sequence: u64,
}

#[derive(Debug, Default)]
struct Counters {
    generate: AtomicU64,
    continue_with_prefix: AtomicU64,
    judge_probe: AtomicU64,
    score_sequence: AtomicU64,
}

#[derive(Debug)]
pub struct MockBackend {
    fixture: MockFixture,
    down: AtomicBool,
    script_pos: Mutex<usize>,
    counters: Counters,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(MockFixture::default())
    }
}

impl MockBackend {
    pub fn new(fixture: MockFixture) -> Self {
        Self {
            fixture,
            down: AtomicBool::new(false),
            script_pos: Mutex::new(0),
            counters: Counters::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn fixture(&self) -> &MockFixture {
        &self.fixture
    }

    /// Simulates an unreachable backend.
    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    pub fn calls(&self) -> MockCalls {
        MockCalls {
            generate: self.counters.generate.load(Ordering::SeqCst),
            continue_with_prefix: self.counters.continue_with_prefix.load(Ordering::SeqCst),
            judge_probe: self.counters.judge_probe.load(Ordering::SeqCst),
            score_sequence: self.counters.score_sequence.load(Ordering::SeqCst),
        }
    }

    fn check_up(&self) -> Result<(), BackendError> {
        if self.down.load(Ordering::SeqCst) {
            Err(BackendError::Transport("mock backend is down".into()))
        } else {
            Ok(())
        }
    }

    fn is_correction_prompt(prompt: &ChatPrompt) -> bool {
        prompt.system.as_deref() == Some(CORRECTION_SYSTEM_PROMPT)
    }

    fn is_verdict_prompt(prompt: &ChatPrompt) -> bool {
        prompt.user.contains("## Task Description") && prompt.user.contains("\nModel Response:\n")
    }

    /// (logprob of leak token, logprob of no-leak token, full top list).
    fn judge_distribution(&self, prompt: &ChatPrompt) -> (f64, f64, Vec<TopLogProb>) {
        let parsed = parse_correction_prompt(&prompt.user);
        let (yes, no) = match &self.fixture.judge {
            JudgeFixture::Lexical {
                leak_logprob,
                noleak_logprob,
            } => {
                let leaked = parsed
                    .as_ref()
                    .map(|p| {
                        p.reference_answers
                            .iter()
                            .any(|a| answer_overlaps(a, &p.response))
                    })
                    .unwrap_or(false);
                if leaked {
                    (*leak_logprob, *noleak_logprob)
                } else {
                    (*noleak_logprob, *leak_logprob)
                }
            }
            JudgeFixture::Table { rules, default } => {
                let response = parsed.map(|p| p.response).unwrap_or_default();
                let pair = rules
                    .iter()
                    .find(|r| response.contains(&r.response_contains))
                    .map(|r| r.logprobs)
                    .unwrap_or(*default);
                (pair.yes, pair.no)
            }
            JudgeFixture::Distribution { vocab, logits } => {
                let lps = log_softmax(logits);
                let mut top: Vec<TopLogProb> = vocab
                    .iter()
                    .zip(lps)
                    .map(|(t, lp)| TopLogProb {
                        token: t.clone(),
                        logprob: lp,
                    })
                    .collect();
                top.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
                let get = |s: &str| {
                    top.iter()
                        .find(|t| t.token.trim() == s)
                        .map_or(f64::NEG_INFINITY, |t| t.logprob)
                };
                return (get("Yes"), get("No"), top);
            }
        };
        let mut top = vec![
            TopLogProb {
                token: " Yes".into(),
                logprob: yes,
            },
            TopLogProb {
                token: " No".into(),
                logprob: no,
            },
        ];
        top.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        (yes, no, top)
    }

    fn revision_for(&self, prompt: &ChatPrompt) -> String {
        let draft = parse_correction_prompt(&prompt.user).map(|p| p.response);
        draft
            .and_then(|d| self.fixture.revisions.get(&d).cloned())
            .unwrap_or_else(|| self.fixture.default_revision.clone())
    }

    fn corrector_output(&self, prompt: &ChatPrompt) -> String {
        let (yes, no, _) = self.judge_distribution(prompt);
        if yes > no {
            format!(
                "{JUDGE_LINE} Yes\n{REVISION_LINE} {}",
                self.revision_for(prompt)
            )
        } else {
            format!("{JUDGE_LINE} No")
        }
    }

    fn verdict(&self, prompt: &ChatPrompt, fixture: &VerdictFixture) -> String {
        let leak = match fixture {
            VerdictFixture::Always { leak } => *leak,
            VerdictFixture::Script { votes } => {
                let mut pos = self.script_pos.lock().expect("script lock");
                let v = votes
                    .get(*pos % votes.len().max(1))
                    .copied()
                    .unwrap_or(false);
                *pos += 1;
                v
            }
            VerdictFixture::Lexical => {
                let section = |start: &str, end: Option<&str>| {
                    let s = prompt.user.rfind(start).map(|i| i + start.len())?;
                    let rest = &prompt.user[s..];
                    let e = end.and_then(|e| rest.find(e)).unwrap_or(rest.len());
                    Some(rest[..e].trim().to_string())
                };
                let answer = section("\nCorrect Answer:\n", Some("\n- - -"));
                let response = section("\nModel Response:\n", None);
                match (answer, response) {
                    (Some(a), Some(r)) => answer_overlaps(&a, &r),
                    _ => false,
                }
            }
        };
        format!(
            "(1) Investigation: mock\n(2) Overlap: mock\n(3) Judge: {}",
            if leak { "YES" } else { "NO" }
        )
    }

    fn lookup(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        prefix: &str,
    ) -> Result<String, BackendError> {
        let key = format!("{}{prefix}", prompt.flatten());
        if let Some(text) = self.fixture.completions.get(&key) {
            return Ok(text.clone());
        }
        if Self::is_correction_prompt(prompt) {
            let full = self.corrector_output(prompt);
            return Ok(match full.strip_prefix(prefix) {
                Some(rest) => rest.to_string(),
                // forced a different judgement: continue from the forced line
                None if prefix.ends_with(REVISION_LINE) => {
                    format!(" {}", self.revision_for(prompt))
                }
                None => full,
            });
        }
        if let Some(v) = &self.fixture.verdicts {
            if Self::is_verdict_prompt(prompt) {
                return Ok(self.verdict(prompt, v));
            }
        }
        let _ = route;
        self.fixture
            .drafts
            .get(&prompt.user)
            .or(self.fixture.default_draft.as_ref())
            .cloned()
            .ok_or_else(|| BackendError::Api {
                status: 404,
                body: format!("mock has no completion for prompt {:?}", prompt.user),
            })
    }

    fn tokens_of(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn generate(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        self.counters.generate.fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        Ok(apply_stop(&self.lookup(route, prompt, "")?, &params.stop))
    }

    async fn continue_with_prefix(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        forced_prefix: &str,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        self.counters
            .continue_with_prefix
            .fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        Ok(apply_stop(
            &self.lookup(route, prompt, forced_prefix)?,
            &params.stop,
        ))
    }

    async fn judge_probe(
        &self,
        route: Route,
        prompt: &ChatPrompt,
        forced_prefix: &str,
        top_n: u32,
    ) -> Result<JudgeProbe, BackendError> {
        self.counters.judge_probe.fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        let text = self.lookup(route, prompt, forced_prefix)?;
        let top_logprobs = if self.fixture.logprobs_available && Self::is_correction_prompt(prompt)
        {
            let (_, _, mut top) = self.judge_distribution(prompt);
            top.truncate(top_n as usize);
            top
        } else {
            Vec::new()
        };
        Ok(JudgeProbe { text, top_logprobs })
    }

    async fn score_sequence(
        &self,
        _route: Route,
        _prompt: &str,
        target: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        self.counters.score_sequence.fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        if !self.fixture.scoring_available {
            return Err(BackendError::Capability("sequence scoring".into()));
        }
        let tokens = Self::tokens_of(target);
        let logps = tokens
            .iter()
            .map(|t| {
                *self
                    .fixture
                    .token_logprobs
                    .get(t)
                    .unwrap_or(&self.fixture.token_logprob)
            })
            .collect();
        TokenLogProbs::new(tokens, logps)
    }

    fn sampling_info(&self) -> SamplingInfo {
        SamplingInfo {
            backend: "mock".into(),
            base_model: "mock-base".into(),
            corrector_model: "mock-corrector".into(),
            logprob_temperature: 1.0,
        }
    }
}
