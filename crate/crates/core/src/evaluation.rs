//! Generation-level metrics and scenario harnesses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, Route};
use crate::correction::{Branch, CorrectionOutcome, CorrectionPipeline, PipelineError};
use crate::dataset::{DatasetError, JudgeLabel, LeakageJudge};
use crate::store::{RecordDraft, StoreError};

pub const DEFAULT_PREFIX_TOKENS: usize = 15;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schedule is empty")]
    EmptySchedule,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub maj_k: usize,
    pub plausibility_prefix_tokens: usize,
    /// Target leakage tolerance; only reported.
    pub epsilon_target: f64,
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            maj_k: 5,
            plausibility_prefix_tokens: DEFAULT_PREFIX_TOKENS,
            epsilon_target: 0.05,
            tau: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.maj_k.is_multiple_of(2) {
            return Err(EvalError::Config(format!(
                "maj_k must be odd, got {}",
                self.maj_k
            )));
        }
        if self.plausibility_prefix_tokens == 0 {
            return Err(EvalError::Config(
                "plausibility_prefix_tokens must be at least 1".into(),
            ));
        }
        if !(self.epsilon_target > 0.0 && self.epsilon_target <= 1.0) {
            return Err(EvalError::Config(format!(
                "epsilon_target must lie in (0, 1], got {}",
                self.epsilon_target
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(EvalError::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Whitespace split with case folding; independent of retrieval's tokenizer.
pub fn eval_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// `LCS(ref, hyp) / |ref|`; an empty reference scores 0.
pub fn rouge_l_recall(reference: &str, hypothesis: &str) -> f64 {
    let r = eval_tokens(reference);
    if r.is_empty() {
        tracing::warn!("empty ROUGE-L reference scored as 0");
        return 0.0;
    }
    lcs_len(&r, &eval_tokens(hypothesis)) as f64 / r.len() as f64
}

/// Geometric-mean token probability over the first `prefix_n` tokens.
pub fn plausibility_from_logps(logps: &[f64], prefix_n: usize) -> f64 {
    let m = logps.len().min(prefix_n);
    if m == 0 {
        tracing::warn!("empty response scored as plausibility 0");
        return 0.0;
    }
    (logps[..m].iter().sum::<f64>() / m as f64).exp()
}

pub async fn plausibility(
    scorer: &dyn Backend,
    prompt: &str,
    response: &str,
    prefix_n: usize,
) -> Result<f64, BackendError> {
    if response.trim().is_empty() {
        return Ok(plausibility_from_logps(&[], prefix_n));
    }
    let scored = scorer.score_sequence(Route::Base, prompt, response).await?;
    Ok(plausibility_from_logps(&scored.logps, prefix_n))
}

/// Case-folded, surrounding punctuation and whitespace removed, internal
/// whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let folded = text.to_lowercase();
    let trimmed = folded.trim_matches(|c: char| {
        c.is_whitespace() || c.is_ascii_punctuation() || "“”‘’«»…".contains(c)
    });
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(generated: &str, gold: &str) -> bool {
    normalize_answer(generated) == normalize_answer(gold)
}

pub fn validity(generated: &str, choices: &[String]) -> bool {
    let g = normalize_answer(generated);
    choices.iter().any(|c| normalize_answer(c) == g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSplit {
    Forget,
    Retain,
}

/// One probe in the exclusion-record file format, plus its split and
/// optional multiple-choice options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub split: ProbeSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

pub fn parse_probes(text: &str) -> Result<Vec<ProbeItem>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemError {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageSummary {
    pub rate: f64,
    pub judged: usize,
    pub leaked: usize,
    /// Items whose judging failed; they are left out of the denominator.
    pub excluded: usize,
    pub errors: Vec<ItemError>,
}

/// `(id, question, target answer, final response)` per item.
pub async fn leakage_rate(
    items: &[(String, String, String, String)],
    judge: &LeakageJudge<'_>,
) -> LeakageSummary {
    let mut judged = 0;
    let mut leaked = 0;
    let mut errors = Vec::new();
    for (id, question, answer, response) in items {
        match judge.label(question, answer, response).await {
            Ok(v) => {
                judged += 1;
                if v.label == JudgeLabel::Leakage {
                    leaked += 1;
                }
            }
            Err(e) => errors.push(ItemError {
                id: id.clone(),
                message: e.to_string(),
            }),
        }
    }
    LeakageSummary {
        rate: if judged == 0 {
            0.0
        } else {
            leaked as f64 / judged as f64
        },
        judged,
        leaked,
        excluded: errors.len(),
        errors,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BranchStats {
    pub requests: usize,
    pub mean_calls: f64,
    pub mean_total_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OverheadReport {
    pub requests: usize,
    pub mean_calls: f64,
    pub revision_calls: u64,
    pub passthrough_fraction: f64,
    pub revised: BranchStats,
    pub passthrough: BranchStats,
    pub mean_total_ms: f64,
}

fn branch_stats<'a>(outcomes: impl Iterator<Item = &'a CorrectionOutcome>) -> BranchStats {
    let (mut n, mut calls, mut ms) = (0usize, 0u64, 0.0);
    for o in outcomes {
        n += 1;
        calls += o.backend_calls.total() as u64;
        ms += o.timings.total_ms;
    }
    if n == 0 {
        return BranchStats::default();
    }
    BranchStats {
        requests: n,
        mean_calls: calls as f64 / n as f64,
        mean_total_ms: ms / n as f64,
    }
}

pub fn overhead_report(outcomes: &[CorrectionOutcome]) -> OverheadReport {
    if outcomes.is_empty() {
        return OverheadReport::default();
    }
    let all = branch_stats(outcomes.iter());
    let passthrough = branch_stats(outcomes.iter().filter(|o| o.branch == Branch::Passthrough));
    OverheadReport {
        requests: all.requests,
        mean_calls: all.mean_calls,
        revision_calls: outcomes.iter().map(|o| o.backend_calls.revise as u64).sum(),
        passthrough_fraction: passthrough.requests as f64 / all.requests as f64,
        revised: branch_stats(outcomes.iter().filter(|o| o.branch == Branch::Revised)),
        passthrough,
        mean_total_ms: all.mean_total_ms,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub leakage: LeakageSummary,
    pub plausibility_mean: Option<f64>,
    pub utility_rouge_l: Option<f64>,
    pub em: Option<f64>,
    pub validity: Option<f64>,
    pub epsilon_target: f64,
    pub overhead: OverheadReport,
    /// Final responses to retain probes, in probe order.
    pub retain_outputs: Vec<String>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn fraction(flags: &[bool]) -> Option<f64> {
    if flags.is_empty() {
        None
    } else {
        Some(flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64)
    }
}

/// Runs every probe through the pipeline. Forget probes feed the leakage
/// rate; retain probes feed utility and plausibility; probes with choices
/// also feed EM and validity.
pub async fn evaluate(
    pipeline: &CorrectionPipeline,
    probes: &[ProbeItem],
    judge: &LeakageJudge<'_>,
    scorer: &dyn Backend,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let judge = &LeakageJudge {
        k: cfg.maj_k,
        ..judge.clone()
    };
    let mut outcomes = Vec::with_capacity(probes.len());
    let mut forget = Vec::new();
    let mut rouge = Vec::new();
    let mut plaus = Vec::new();
    let mut em = Vec::new();
    let mut valid = Vec::new();
    let mut retain_outputs = Vec::new();
    for probe in probes {
        let outcome = pipeline.correct(&probe.question).await?;
        let fin = outcome.final_response.clone();
        match probe.split {
            ProbeSplit::Forget => forget.push((
                probe.id.clone(),
                probe.question.clone(),
                probe.answer.clone(),
                fin.clone(),
            )),
            ProbeSplit::Retain => {
                rouge.push(rouge_l_recall(&probe.answer, &fin));
                plaus.push(
                    plausibility(
                        scorer,
                        &probe.question,
                        &fin,
                        cfg.plausibility_prefix_tokens,
                    )
                    .await?,
                );
                retain_outputs.push(fin.clone());
            }
        }
        if let Some(choices) = &probe.choices {
            em.push(exact_match(&fin, &probe.answer));
            valid.push(validity(&fin, choices));
        }
        outcomes.push(outcome);
    }
    Ok(EvalReport {
        leakage: leakage_rate(&forget, judge).await,
        plausibility_mean: mean(&plaus),
        utility_rouge_l: mean(&rouge),
        em: fraction(&em),
        validity: fraction(&valid),
        epsilon_target: cfg.epsilon_target,
        overhead: overhead_report(&outcomes),
        retain_outputs,
    })
}

/// One unlearning request: records to add and ids to remove.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleStep {
    #[serde(default)]
    pub add: Vec<RecordDraft>,
    #[serde(default)]
    pub remove: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub store_version: u64,
    pub index_generation: u64,
    /// Generation swaps performed by this step's mutations.
    pub generation_swaps: u64,
    pub unlearned: usize,
    pub report: EvalReport,
    pub retain_identical_to_first: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinualReport {
    pub steps: Vec<StepReport>,
    /// Set when a step failed; `steps` holds the completed prefix.
    pub aborted: Option<String>,
}

/// Applies each step to the pipeline's exclusion set and evaluates leakage
/// on every target unlearned so far (removed ids drop out) plus the fixed
/// retain probes.
pub async fn continual_run(
    schedule: &[ScheduleStep],
    retain: &[ProbeItem],
    pipeline: &CorrectionPipeline,
    judge: &LeakageJudge<'_>,
    scorer: &dyn Backend,
    cfg: &EvalConfig,
) -> Result<ContinualReport, EvalError> {
    if schedule.is_empty() {
        return Err(EvalError::EmptySchedule);
    }
    cfg.validate()?;
    let exclusions = pipeline.exclusions().clone();
    let mut targets: BTreeMap<String, ProbeItem> = BTreeMap::new();
    let mut report = ContinualReport {
        steps: Vec::new(),
        aborted: None,
    };
    let mut first_retain: Option<Vec<String>> = None;
    for (i, step) in schedule.iter().enumerate() {
        let result = async {
            let before = exclusions.current().number;
            if !step.add.is_empty() {
                exclusions.add(&step.add)?;
            }
            if !step.remove.is_empty() {
                exclusions.remove(&step.remove)?;
            }
            let generation = exclusions.current();
            for d in &step.add {
                let id = d.id.clone().unwrap_or_else(|| d.content_id());
                targets.insert(
                    id.clone(),
                    ProbeItem {
                        id,
                        question: d.question.clone(),
                        answer: d.answer.clone(),
                        split: ProbeSplit::Forget,
                        choices: None,
                    },
                );
            }
            for id in &step.remove {
                targets.remove(id);
            }
            let probes: Vec<ProbeItem> = targets
                .values()
                .cloned()
                .chain(retain.iter().cloned())
                .collect();
            let eval = evaluate(pipeline, &probes, judge, scorer, cfg).await?;
            Ok::<_, EvalError>((generation, before, eval))
        }
        .await;
        match result {
            Ok((generation, before, eval)) => {
                let first = first_retain.get_or_insert_with(|| eval.retain_outputs.clone());
                report.steps.push(StepReport {
                    step: i,
                    store_version: generation.store.version().version,
                    index_generation: generation.number,
                    generation_swaps: generation.number - before,
                    unlearned: targets.len(),
                    retain_identical_to_first: *first == eval.retain_outputs,
                    report: eval,
                });
            }
            Err(e) => {
                report.aborted = Some(format!("step {i}: {e}"));
                break;
            }
        }
    }
    Ok(report)
}

/// Parses a schedule file: one JSON step per line.
pub fn parse_schedule(text: &str) -> Result<Vec<ScheduleStep>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

impl From<DatasetError> for EvalError {
    fn from(e: DatasetError) -> Self {
        EvalError::Config(e.to_string())
    }
}
