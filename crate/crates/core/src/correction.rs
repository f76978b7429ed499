//! Draft, retrieve, detect, and conditionally revise.
//!
//! A request runs in four phases. The base model drafts an answer. The
//! drafted pair retrieves the most relevant exclusions. The corrector scores
//! the two judge tokens on the correction prompt. Only when
//! `σ(z_leak - z_noleak) > τ` does the corrector generate a revision;
//! otherwise the draft is returned untouched.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    resolve_judge_scores, Backend, BackendError, ChatPrompt, GenerationParams, JudgeScores,
    JudgeTokens, Route, SamplingInfo,
};
use crate::exclusions::ExclusionSet;
use crate::retrieval::{RetrievalResult, DEFAULT_TOP_K};
use crate::store::ExclusionRecord;

pub const CORRECTION_SYSTEM_PROMPT: &str = include_str!("../assets/correction_system.txt");
pub const CORRECTION_TEMPLATE: &str = include_str!("../assets/correction_instruction.txt");

pub const JUDGE_LINE: &str = "(1) Information Leakage:";
pub const REVISION_LINE: &str = "(2) Revised Response:";

/// Prefix forced on the corrector before reading judge-token scores.
pub fn judge_prefix() -> String {
    JUDGE_LINE.to_string()
}

/// Prefix forced on the corrector to obtain a revision.
pub fn revision_prefix(tokens: &JudgeTokens) -> String {
    format!("{JUDGE_LINE} {}\n{REVISION_LINE}", tokens.leak)
}

/// Single-pass placeholder substitution. Placeholder text occurring inside a
/// substituted value is left alone.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while !rest.is_empty() {
        for (key, value) in values {
            if let Some(tail) = rest.strip_prefix(key) {
                out.push_str(value);
                rest = tail;
                continue 'scan;
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionPromptBundle {
    pub system: String,
    pub x_correct: String,
    pub rendered_documents: String,
    pub query: String,
    pub response: String,
}

impl CorrectionPromptBundle {
    pub fn chat_prompt(&self) -> ChatPrompt {
        ChatPrompt::with_system(self.system.clone(), self.x_correct.clone())
    }
}

/// Numbered `Q:`/`A:` blocks in rank order.
pub fn render_documents<'a>(records: impl IntoIterator<Item = &'a ExclusionRecord>) -> String {
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| format!("{}. Q: {}\n   A: {}", i + 1, r.question, r.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("no retrieved exclusions to build the correction prompt from")]
    EmptyRetrieval,
}

pub fn assemble_correction_prompt(
    query: &str,
    draft: &str,
    retrieved: &[&ExclusionRecord],
) -> Result<CorrectionPromptBundle, PromptError> {
    if retrieved.is_empty() {
        return Err(PromptError::EmptyRetrieval);
    }
    let rendered_documents = render_documents(retrieved.iter().copied());
    let x_correct = fill_template(
        CORRECTION_TEMPLATE,
        &[
            ("{documents}", &rendered_documents),
            ("{query}", query),
            ("{response}", draft),
        ],
    );
    Ok(CorrectionPromptBundle {
        system: CORRECTION_SYSTEM_PROMPT.to_string(),
        x_correct,
        rendered_documents,
        query: query.to_string(),
        response: draft.to_string(),
    })
}

/// Sections of a correction prompt, recovered from its rendered text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCorrectionPrompt {
    pub reference_answers: Vec<String>,
    pub query: String,
    pub response: String,
}

/// Inverse of [`assemble_correction_prompt`] for prompts whose query and
/// response do not themselves contain section headers.
pub fn parse_correction_prompt(x_correct: &str) -> Option<ParsedCorrectionPrompt> {
    const DOCS: &str = "## Reference Question-Answer Pairs\n";
    const QUERY: &str = "\n## Query\n";
    const RESPONSE: &str = "\n## Response to the Query\n";
    const OUTPUT: &str = "\n## Output format\n";
    let docs_start = x_correct.find(DOCS)? + DOCS.len();
    let query_at = x_correct.rfind(QUERY)?;
    let response_at = x_correct.rfind(RESPONSE)?;
    let output_at = x_correct.rfind(OUTPUT)?;
    if !(docs_start <= query_at && query_at < response_at && response_at < output_at) {
        return None;
    }
    let reference_answers = x_correct[docs_start..query_at]
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix("A: "))
        .map(str::to_string)
        .collect();
    Some(ParsedCorrectionPrompt {
        reference_answers,
        query: x_correct[query_at + QUERY.len()..response_at].to_string(),
        response: x_correct[response_at + RESPONSE.len()..output_at].to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judgement {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectorOutput {
    pub judge: Judgement,
    pub revised: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable corrector output: {raw:?}")]
pub struct ParseError {
    pub raw: String,
}

fn find_ignore_case(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.to_ascii_lowercase();
    hay.find(&needle.to_ascii_lowercase())
}

/// Extracts the Yes/No judgement and the revised response from corrector
/// output. Labels are matched case-insensitively and surrounding whitespace
/// is ignored.
pub fn parse_corrector_output(text: &str) -> Result<CorrectorOutput, ParseError> {
    let err = || ParseError {
        raw: text.to_string(),
    };
    let judge_at = find_ignore_case(text, JUDGE_LINE).ok_or_else(err)?;
    let after = text[judge_at + JUDGE_LINE.len()..].trim_start();
    let word: String = after.chars().take_while(|c| c.is_alphabetic()).collect();
    let judge = match word.to_ascii_lowercase().as_str() {
        "yes" => Judgement::Yes,
        "no" => Judgement::No,
        _ => return Err(err()),
    };
    let revised = find_ignore_case(text, REVISION_LINE)
        .map(|at| text[at + REVISION_LINE.len()..].trim().to_string());
    let revised = revised.filter(|r| !r.is_empty());
    Ok(CorrectorOutput { judge, revised })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    Logit,
    TextFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDecision {
    pub leaked: bool,
    pub method: DetectionMethod,
    /// Present on the logit path only.
    pub scores: Option<JudgeScores>,
    /// σ(Δ) on the logit path; pinned to 0 or 1 on the text fallback.
    pub sigma_delta: f64,
    pub tau: f64,
}

/// Leakage iff `σ(z_leak - z_noleak) > τ`, strictly.
pub fn detect_leakage(scores: &JudgeScores) -> DetectionDecision {
    DetectionDecision {
        leaked: scores.sigma_delta > scores.tau,
        method: DetectionMethod::Logit,
        scores: Some(*scores),
        sigma_delta: scores.sigma_delta,
        tau: scores.tau,
    }
}

fn detect_from_text(judge: Judgement, tau: f64) -> DetectionDecision {
    let leaked = judge == Judgement::Yes;
    DetectionDecision {
        leaked,
        method: DetectionMethod::TextFallback,
        scores: None,
        sigma_delta: if leaked { 1.0 } else { 0.0 },
        tau,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Revised,
    Passthrough,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCalls {
    pub draft: u32,
    pub judge: u32,
    pub revise: u32,
}

impl BackendCalls {
    pub fn total(&self) -> u32 {
        self.draft + self.judge + self.revise
    }
}

/// Phase durations in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub draft_ms: f64,
    pub retrieve_ms: f64,
    pub judge_ms: f64,
    pub revise_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub query: String,
    pub draft: String,
    pub retrieved: Vec<RetrievalResult>,
    pub decision: DetectionDecision,
    #[serde(rename = "final")]
    pub final_response: String,
    pub branch: Branch,
    pub index_generation: u64,
    pub store_version: u64,
    pub backend_calls: BackendCalls,
    pub timings: Timings,
    pub sampling: SamplingInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Config,
    Draft,
    Retrieve,
    Judge,
    Revise,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Config => "config",
            Phase::Draft => "draft",
            Phase::Retrieve => "retrieve",
            Phase::Judge => "judge",
            Phase::Revise => "revise",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{phase} phase: {source}")]
    Backend {
        phase: Phase,
        #[source]
        source: BackendError,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("retrieve phase: {0}")]
    Prompt(#[from] PromptError),
    #[error("{phase} phase: {source}")]
    Parse {
        phase: Phase,
        #[source]
        source: ParseError,
    },
    #[error("revise phase: corrector returned no revision for a leaked draft")]
    MissingRevision,
}

impl PipelineError {
    pub fn phase(&self) -> Phase {
        match self {
            PipelineError::Backend { phase, .. } | PipelineError::Parse { phase, .. } => *phase,
            PipelineError::Config(_) => Phase::Config,
            PipelineError::Prompt(_) => Phase::Retrieve,
            PipelineError::MissingRevision => Phase::Revise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub tau: f64,
    pub judge_tokens: JudgeTokens,
    pub top_logprobs: u32,
    /// Parse the generated judge line when log-probabilities are unavailable.
    pub text_fallback: bool,
    pub draft_params: GenerationParams,
    pub revise_params: GenerationParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            tau: 0.5,
            judge_tokens: JudgeTokens::default(),
            top_logprobs: 20,
            text_fallback: true,
            draft_params: GenerationParams::default(),
            revise_params: GenerationParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        if self.judge_tokens.leak.is_empty() || self.judge_tokens.noleak.is_empty() {
            return Err("judge tokens must be non-empty".into());
        }
        if self.judge_tokens.leak == self.judge_tokens.noleak {
            return Err("judge tokens must differ".into());
        }
        Ok(())
    }
}

pub struct CorrectionPipeline {
    backend: Arc<dyn Backend>,
    exclusions: Arc<ExclusionSet>,
    config: PipelineConfig,
}

impl CorrectionPipeline {
    pub fn new(
        backend: Arc<dyn Backend>,
        exclusions: Arc<ExclusionSet>,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate().map_err(PipelineError::Config)?;
        Ok(Self {
            backend,
            exclusions,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn exclusions(&self) -> &Arc<ExclusionSet> {
        &self.exclusions
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub async fn correct(&self, query: &str) -> Result<CorrectionOutcome, PipelineError> {
        // One generation for the whole request.
        let generation = self.exclusions.current();
        if generation.store.is_empty() {
            return Err(PipelineError::Config("exclusion store is empty".into()));
        }
        let started = Instant::now();
        let mut calls = BackendCalls::default();
        let mut timings = Timings::default();

        let t = Instant::now();
        calls.draft += 1;
        let draft = self
            .backend
            .generate(
                Route::Base,
                &ChatPrompt::user(query),
                &self.config.draft_params,
            )
            .await
            .map_err(|source| PipelineError::Backend {
                phase: Phase::Draft,
                source,
            })?;
        timings.draft_ms = ms(t.elapsed());

        let t = Instant::now();
        let retrieved = generation.retrieve(query, &draft, self.config.top_k);
        let records: Vec<&ExclusionRecord> = retrieved
            .iter()
            .filter_map(|r| generation.record(&r.record_id))
            .collect();
        let bundle = assemble_correction_prompt(query, &draft, &records)?;
        let prompt = bundle.chat_prompt();
        timings.retrieve_ms = ms(t.elapsed());

        let t = Instant::now();
        calls.judge += 1;
        let probe = self
            .backend
            .judge_probe(
                Route::Corrector,
                &prompt,
                &judge_prefix(),
                self.config.top_logprobs,
            )
            .await
            .map_err(|source| PipelineError::Backend {
                phase: Phase::Judge,
                source,
            })?;
        let decision = match resolve_judge_scores(
            &probe.top_logprobs,
            &self.config.judge_tokens,
            self.config.tau,
        ) {
            Ok(scores) => detect_leakage(&scores),
            Err(e) if self.config.text_fallback => {
                let text = format!("{}{}", judge_prefix(), probe.text);
                let parsed = parse_corrector_output(&text).map_err(|_| PipelineError::Backend {
                    phase: Phase::Judge,
                    source: e,
                })?;
                tracing::warn!("judge log-probabilities unavailable, using generated judge line");
                detect_from_text(parsed.judge, self.config.tau)
            }
            Err(source) => {
                return Err(PipelineError::Backend {
                    phase: Phase::Judge,
                    source,
                })
            }
        };
        timings.judge_ms = ms(t.elapsed());

        let (final_response, branch) = if decision.leaked {
            let t = Instant::now();
            calls.revise += 1;
            let prefix = revision_prefix(&self.config.judge_tokens);
            let continuation = self
                .backend
                .continue_with_prefix(
                    Route::Corrector,
                    &prompt,
                    &prefix,
                    &self.config.revise_params,
                )
                .await
                .map_err(|source| PipelineError::Backend {
                    phase: Phase::Revise,
                    source,
                })?;
            let parsed =
                parse_corrector_output(&format!("{prefix}{continuation}")).map_err(|source| {
                    PipelineError::Parse {
                        phase: Phase::Revise,
                        source,
                    }
                })?;
            timings.revise_ms = ms(t.elapsed());
            (
                parsed.revised.ok_or(PipelineError::MissingRevision)?,
                Branch::Revised,
            )
        } else {
            (draft.clone(), Branch::Passthrough)
        };
        timings.total_ms = ms(started.elapsed());

        Ok(CorrectionOutcome {
            query: query.to_string(),
            draft,
            retrieved,
            decision,
            final_response,
            branch,
            index_generation: generation.number,
            store_version: generation.store.version().version,
            backend_calls: calls,
            timings,
            sampling: self.backend.sampling_info(),
        })
    }
}
