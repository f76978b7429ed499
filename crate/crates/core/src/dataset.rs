//! Corrector training-data construction.
//!
//! Seeds are QA pairs (with an optional author profile for teacher prompting)
//! and multiple-choice questions. All seeds form the forget store. Each
//! query-response pair is turned into tuples of correction prompt, retrieved
//! context, judgement label and revision target, plus the preference pair
//! used by the second training stage.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatPrompt, GenerationParams, JudgeTokens, Route};
use crate::correction::{
    assemble_correction_prompt, fill_template, render_documents, revision_prefix,
};
use crate::exclusions::Generation;
use crate::overlap::answer_overlaps;
use crate::retrieval::{query_text, tokenize};
use crate::store::{ExclusionRecord, ExclusionStore, RecordDraft, StoreError};

pub const LEAKAGE_JUDGE_TEMPLATE: &str = include_str!("../assets/leakage_judge.txt");
pub const QUERY_REWRITE_TEMPLATE: &str = include_str!("../assets/query_rewrite.txt");
pub const PROFILE_RECONSTRUCTION_TEMPLATE: &str =
    include_str!("../assets/profile_reconstruction.txt");
pub const LEAKED_RESPONSE_TEMPLATE: &str = include_str!("../assets/leaked_response.txt");

pub const DEFAULT_POSITIVES: usize = 5;
pub const DEFAULT_NEGATIVES: usize = 5;
pub const DEFAULT_MAJ_K: usize = 5;
pub const DEFAULT_INDIRECT_QUERIES: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{field} is empty")]
    EmptyField { field: &'static str },
    #[error("store has {have} candidates, {need} required")]
    InsufficientCandidates { have: usize, need: usize },
    #[error("no positive candidate for pair {pair}")]
    NoPositive { pair: String },
    #[error("majority vote needs an odd k, got {0}")]
    EvenK(usize),
    #[error("judge output has no YES/NO verdict: {raw:?}")]
    UnparseableVerdict { raw: String },
    #[error("teacher output has {found} of {wanted} queries: {raw:?}")]
    UnparseableQueries {
        found: usize,
        wanted: usize,
        raw: String,
    },
    #[error("rewritten query contains the author name: {query:?}")]
    NameInQuery { query: String },
    #[error("need at least 2 choices, got {0}")]
    TooFewChoices(usize),
    #[error("correct index {index} out of range for {choices} choices")]
    CorrectIndex { index: usize, choices: usize },
    #[error("duplicate choice {0:?}")]
    DuplicateChoice(String),
    #[error("tuple {id}: {reason}")]
    InvalidTuple { id: String, reason: String },
    #[error("seed {id}: {reason}")]
    Seed { id: String, reason: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("tuple {id}: {message}")]
    Serialize { id: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaSource {
    QaCorpus,
    McqCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub source: QaSource,
}

impl QAPair {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
        source: QaSource,
    ) -> Result<Self, DatasetError> {
        let pair = Self {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            source,
        };
        for (field, v) in [
            ("id", &pair.id),
            ("question", &pair.question),
            ("answer", &pair.answer),
        ] {
            if v.trim().is_empty() {
                return Err(DatasetError::EmptyField { field });
            }
        }
        Ok(pair)
    }

    pub fn record_draft(&self) -> RecordDraft {
        RecordDraft::new(&self.question, &self.answer).with_id(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JudgeLabel {
    Leakage,
    NoLeakage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub ids: Vec<String>,
    pub rendered: String,
}

impl RetrievedSet {
    fn from_records(records: &[&ExclusionRecord]) -> Self {
        Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            rendered: render_documents(records.iter().copied()),
        }
    }
}

/// One corrector training example. Construction and deserialization both
/// enforce the label invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTuple")]
pub struct TrainingTuple {
    pub id: String,
    pub query: String,
    pub correction_prompt: String,
    pub draft: String,
    pub retrieved: RetrievedSet,
    pub judge_label: JudgeLabel,
    pub target: String,
    pub pos_response: String,
    pub neg_response: String,
}

#[derive(Deserialize)]
struct RawTuple {
    id: String,
    query: String,
    correction_prompt: String,
    draft: String,
    retrieved: RetrievedSet,
    judge_label: JudgeLabel,
    target: String,
    pos_response: String,
    neg_response: String,
}

impl TryFrom<RawTuple> for TrainingTuple {
    type Error = DatasetError;

    fn try_from(r: RawTuple) -> Result<Self, DatasetError> {
        let t = TrainingTuple {
            id: r.id,
            query: r.query,
            correction_prompt: r.correction_prompt,
            draft: r.draft,
            retrieved: r.retrieved,
            judge_label: r.judge_label,
            target: r.target,
            pos_response: r.pos_response,
            neg_response: r.neg_response,
        };
        t.validate()?;
        Ok(t)
    }
}

impl TrainingTuple {
    /// `NO_LEAKAGE`: target and both preference sides equal the draft.
    /// `LEAKAGE`: target differs from the draft, `y+` is the target and `y-`
    /// the draft.
    pub fn new(
        id: impl Into<String>,
        query: &str,
        draft: &str,
        retrieved: &[&ExclusionRecord],
        judge_label: JudgeLabel,
        target: &str,
    ) -> Result<Self, DatasetError> {
        let id = id.into();
        let bundle = assemble_correction_prompt(query, draft, retrieved).map_err(|e| {
            DatasetError::InvalidTuple {
                id: id.clone(),
                reason: e.to_string(),
            }
        })?;
        let t = TrainingTuple {
            id,
            query: query.to_string(),
            correction_prompt: bundle.x_correct,
            draft: draft.to_string(),
            retrieved: RetrievedSet::from_records(retrieved),
            judge_label,
            target: target.to_string(),
            pos_response: target.to_string(),
            neg_response: draft.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |reason: &str| {
            Err(DatasetError::InvalidTuple {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.retrieved.ids.is_empty() {
            return fail("retrieved set is empty");
        }
        match self.judge_label {
            JudgeLabel::NoLeakage => {
                if self.target != self.draft
                    || self.pos_response != self.draft
                    || self.neg_response != self.draft
                {
                    return fail("NO_LEAKAGE requires target = y+ = y- = draft");
                }
            }
            JudgeLabel::Leakage => {
                if self.target == self.draft {
                    return fail("LEAKAGE requires a target different from the draft");
                }
                if self.pos_response != self.target || self.neg_response != self.draft {
                    return fail("LEAKAGE requires y+ = target and y- = draft");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContrastiveSets {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// Whether `record` counts as a positive for `pair` with response `draft`:
/// the gold pair itself, or any record whose answer overlaps the draft.
pub fn is_positive(pair: &QAPair, record: &ExclusionRecord, draft: &str) -> bool {
    record.id == pair.id || answer_overlaps(&record.answer, draft)
}

/// Ranks the whole store by BM25 against `(question, draft)` and takes the
/// first `p` positives and first `n` non-positives in rank order.
pub fn build_contrastive_sets(
    pair: &QAPair,
    draft: &str,
    generation: &Generation,
    p: usize,
    n: usize,
) -> Result<ContrastiveSets, DatasetError> {
    let have = generation.store.len();
    if have < p + n {
        return Err(DatasetError::InsufficientCandidates { have, need: p + n });
    }
    let ranked = generation
        .index
        .rank_all(&tokenize(&query_text(&pair.question, draft)));
    let mut sets = ContrastiveSets {
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for hit in ranked {
        let record = generation
            .record(&hit.record_id)
            .expect("index and store agree");
        if is_positive(pair, record, draft) {
            if sets.positives.len() < p {
                sets.positives.push(hit.record_id);
            }
        } else if sets.negatives.len() < n {
            sets.negatives.push(hit.record_id);
        }
        if sets.positives.len() == p && sets.negatives.len() == n {
            break;
        }
    }
    if sets.positives.is_empty() {
        return Err(DatasetError::NoPositive {
            pair: pair.id.clone(),
        });
    }
    Ok(sets)
}

/// Judge client for majority-vote leakage labels.
#[derive(Clone)]
pub struct LeakageJudge<'a> {
    pub backend: &'a dyn Backend,
    pub route: Route,
    pub params: GenerationParams,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakageVerdict {
    pub label: JudgeLabel,
    pub votes: Vec<bool>,
}

pub fn leakage_judge_prompt(question: &str, answer: &str, response: &str) -> String {
    fill_template(
        LEAKAGE_JUDGE_TEMPLATE,
        &[
            ("<question>", question),
            ("<answer>", answer),
            ("<response>", response),
        ],
    )
}

/// Reads the verdict from the judge's `(3) Judge:` line; the last `Judge:`
/// occurrence wins.
pub fn parse_verdict(raw: &str) -> Result<bool, DatasetError> {
    let lower = raw.to_lowercase();
    let at = lower
        .rfind("judge:")
        .ok_or_else(|| DatasetError::UnparseableVerdict { raw: raw.into() })?;
    let word: String = lower[at + "judge:".len()..]
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(DatasetError::UnparseableVerdict { raw: raw.into() }),
    }
}

pub fn majority(votes: &[bool]) -> JudgeLabel {
    if 2 * votes.iter().filter(|v| **v).count() > votes.len() {
        JudgeLabel::Leakage
    } else {
        JudgeLabel::NoLeakage
    }
}

impl LeakageJudge<'_> {
    pub async fn label(
        &self,
        question: &str,
        answer: &str,
        response: &str,
    ) -> Result<LeakageVerdict, DatasetError> {
        if self.k.is_multiple_of(2) {
            return Err(DatasetError::EvenK(self.k));
        }
        let prompt = ChatPrompt::user(leakage_judge_prompt(question, answer, response));
        let mut votes = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            let raw = self
                .backend
                .generate(self.route, &prompt, &self.params)
                .await?;
            votes.push(parse_verdict(&raw)?);
        }
        Ok(LeakageVerdict {
            label: majority(&votes),
            votes,
        })
    }
}

pub async fn label_leakage(
    response: &str,
    question: &str,
    answer: &str,
    judge: &LeakageJudge<'_>,
) -> Result<LeakageVerdict, DatasetError> {
    judge.label(question, answer, response).await
}

/// Strips list markers (`1.`, `2)`, `Q3:`, `-`, `*`) and surrounding quotes.
fn strip_item_marker(line: &str) -> &str {
    let mut s = line.trim();
    if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
        s = rest.trim_start();
    }
    let after_q = s.strip_prefix(['Q', 'q']).unwrap_or(s);
    let digits = after_q.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &after_q[digits..];
        if let Some(rest) = rest.strip_prefix(['.', ')', ':']) {
            s = rest.trim_start();
        }
    }
    s.trim_matches(|c| c == '"' || c == '“' || c == '”').trim()
}

/// True when the name's token sequence occurs contiguously in `text`.
pub fn contains_name(text: &str, name: &str) -> bool {
    let needle = tokenize(name);
    if needle.is_empty() {
        return false;
    }
    tokenize(text)
        .windows(needle.len())
        .any(|w| w == needle.as_slice())
}

pub fn query_rewrite_prompt(profile: &str, pair: &QAPair) -> String {
    fill_template(
        QUERY_REWRITE_TEMPLATE,
        &[
            ("<profile>", profile),
            ("<question>", &pair.question),
            ("<answer>", &pair.answer),
        ],
    )
}

/// Parses the teacher's rewrite list, keeping the first `n` items.
pub fn parse_rewrites(raw: &str, n: usize, author: &str) -> Result<Vec<String>, DatasetError> {
    let items: Vec<String> = raw
        .lines()
        .map(strip_item_marker)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if items.len() < n {
        return Err(DatasetError::UnparseableQueries {
            found: items.len(),
            wanted: n,
            raw: raw.into(),
        });
    }
    let items: Vec<String> = items.into_iter().take(n).collect();
    if let Some(q) = items.iter().find(|q| contains_name(q, author)) {
        return Err(DatasetError::NameInQuery { query: q.clone() });
    }
    Ok(items)
}

pub async fn generate_indirect_queries(
    profile: &str,
    pair: &QAPair,
    author: &str,
    teacher: &dyn Backend,
    params: &GenerationParams,
    n: usize,
) -> Result<Vec<String>, DatasetError> {
    let prompt = ChatPrompt::user(query_rewrite_prompt(profile, pair));
    let raw = teacher.generate(Route::Base, &prompt, params).await?;
    parse_rewrites(&raw, n, author)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct McqCase {
    pub response: String,
    pub label: JudgeLabel,
    /// Revision target: an incorrect choice for the leaking case, the
    /// response itself otherwise.
    pub target: String,
}

pub fn expand_mcq(
    question: &str,
    choices: &[String],
    correct_index: usize,
) -> Result<Vec<McqCase>, DatasetError> {
    if question.trim().is_empty() {
        return Err(DatasetError::EmptyField { field: "question" });
    }
    if choices.len() < 2 {
        return Err(DatasetError::TooFewChoices(choices.len()));
    }
    if correct_index >= choices.len() {
        return Err(DatasetError::CorrectIndex {
            index: correct_index,
            choices: choices.len(),
        });
    }
    for (i, c) in choices.iter().enumerate() {
        if c.trim().is_empty() {
            return Err(DatasetError::EmptyField { field: "choice" });
        }
        if choices[..i].contains(c) {
            return Err(DatasetError::DuplicateChoice(c.clone()));
        }
    }
    let correct = &choices[correct_index];
    let first_wrong = choices
        .iter()
        .enumerate()
        .find(|(i, _)| *i != correct_index)
        .map(|(_, c)| c.clone())
        .expect("at least two choices");
    let mut cases = vec![McqCase {
        response: correct.clone(),
        label: JudgeLabel::Leakage,
        target: first_wrong,
    }];
    cases.extend(
        choices
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != correct_index)
            .map(|(_, c)| McqCase {
                response: c.clone(),
                label: JudgeLabel::NoLeakage,
                target: c.clone(),
            }),
    );
    Ok(cases)
}

/// Writes one JSON record per line and returns the count.
pub fn emit_training_file(tuples: &[TrainingTuple], path: &Path) -> Result<usize, DatasetError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for t in tuples {
        let line = serde_json::to_string(t).map_err(|e| DatasetError::Serialize {
            id: t.id.clone(),
            message: e.to_string(),
        })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(tuples.len())
}

pub fn parse_training_file(text: &str) -> Result<Vec<TrainingTuple>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_training_file(path: &Path) -> Result<Vec<TrainingTuple>, DatasetError> {
    parse_training_file(&fs::read_to_string(path)?)
}

/// Input records for [`build_tuples`], one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Seed {
    Qa {
        id: String,
        question: String,
        answer: String,
        /// Author profile for teacher prompting.
        #[serde(default)]
        profile: Option<String>,
        /// Author name that indirect queries must not contain.
        #[serde(default)]
        author: Option<String>,
        /// Precomputed draft for the direct query; skips the teacher call.
        #[serde(default)]
        response: Option<String>,
    },
    Mcq {
        id: String,
        question: String,
        choices: Vec<String>,
        correct_index: usize,
    },
}

impl Seed {
    pub fn id(&self) -> &str {
        match self {
            Seed::Qa { id, .. } | Seed::Mcq { id, .. } => id,
        }
    }

    pub fn pair(&self) -> Result<QAPair, DatasetError> {
        match self {
            Seed::Qa {
                id,
                question,
                answer,
                ..
            } => QAPair::new(id, question, answer, QaSource::QaCorpus),
            Seed::Mcq {
                id,
                question,
                choices,
                correct_index,
            } => {
                let answer = choices
                    .get(*correct_index)
                    .ok_or(DatasetError::CorrectIndex {
                        index: *correct_index,
                        choices: choices.len(),
                    })?;
                QAPair::new(id, question, answer, QaSource::McqCorpus)
            }
        }
    }
}

pub fn parse_seeds(text: &str) -> Result<Vec<Seed>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Every seed as a forget-store record keyed by the seed id.
pub fn forget_store(seeds: &[Seed]) -> Result<ExclusionStore, DatasetError> {
    let drafts = seeds
        .iter()
        .map(|s| s.pair().map(|p| p.record_draft()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut store = ExclusionStore::new();
    if !drafts.is_empty() {
        store.add(&drafts)?;
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub positives: usize,
    pub negatives: usize,
    pub maj_k: usize,
    pub indirect_queries: usize,
    pub judge_tokens: JudgeTokens,
    pub teacher_params: GenerationParams,
    pub judge_params: GenerationParams,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            positives: DEFAULT_POSITIVES,
            negatives: DEFAULT_NEGATIVES,
            maj_k: DEFAULT_MAJ_K,
            indirect_queries: DEFAULT_INDIRECT_QUERIES,
            judge_tokens: JudgeTokens::default(),
            teacher_params: GenerationParams::default(),
            judge_params: GenerationParams {
                temperature: 1.0,
                ..GenerationParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub seeds: usize,
    pub queries: usize,
    pub leakage_tuples: usize,
    pub no_leakage_tuples: usize,
    /// Leaked drafts whose teacher revision was still judged leaking.
    pub dropped_unrevised: usize,
}

pub fn leaked_response_prompt(profile: &str, question: &str) -> String {
    fill_template(
        LEAKED_RESPONSE_TEMPLATE,
        &[("<profile>", profile), ("<question>", question)],
    )
}

fn records<'g>(generation: &'g Generation, ids: &[String]) -> Vec<&'g ExclusionRecord> {
    ids.iter()
        .map(|id| {
            generation
                .record(id)
                .expect("ids come from the same generation")
        })
        .collect()
}

/// Turns seeds into training tuples. The teacher writes leaked drafts and
/// revisions; the judge assigns the final labels by majority vote.
pub async fn build_tuples(
    seeds: &[Seed],
    generation: &Generation,
    teacher: &dyn Backend,
    judge_backend: &dyn Backend,
    cfg: &BuildConfig,
) -> Result<(Vec<TrainingTuple>, BuildStats), DatasetError> {
    let judge = LeakageJudge {
        backend: judge_backend,
        route: Route::Base,
        params: cfg.judge_params.clone(),
        k: cfg.maj_k,
    };
    if cfg.maj_k.is_multiple_of(2) {
        return Err(DatasetError::EvenK(cfg.maj_k));
    }
    let mut tuples = Vec::new();
    let mut stats = BuildStats {
        seeds: seeds.len(),
        ..BuildStats::default()
    };
    for seed in seeds {
        let pair = seed.pair()?;
        match seed {
            Seed::Mcq {
                question,
                choices,
                correct_index,
                ..
            } => {
                for (j, case) in expand_mcq(question, choices, *correct_index)?
                    .into_iter()
                    .enumerate()
                {
                    stats.queries += 1;
                    let ids = match case.label {
                        JudgeLabel::Leakage => {
                            build_contrastive_sets(
                                &pair,
                                &case.response,
                                generation,
                                cfg.positives,
                                cfg.negatives,
                            )?
                            .positives
                        }
                        JudgeLabel::NoLeakage => generation
                            .retrieve(question, &case.response, cfg.negatives)
                            .into_iter()
                            .map(|r| r.record_id)
                            .collect(),
                    };
                    let t = TrainingTuple::new(
                        format!("{}/mcq{j}", pair.id),
                        question,
                        &case.response,
                        &records(generation, &ids),
                        case.label,
                        &case.target,
                    )?;
                    tuples.push(t);
                }
            }
            Seed::Qa {
                profile,
                author,
                response,
                ..
            } => {
                let mut queries = vec![pair.question.clone()];
                if let (Some(profile), Some(author), n) = (profile, author, cfg.indirect_queries) {
                    if n > 0 {
                        queries.extend(
                            generate_indirect_queries(
                                profile,
                                &pair,
                                author,
                                teacher,
                                &cfg.teacher_params,
                                n,
                            )
                            .await?,
                        );
                    }
                }
                for (qi, query) in queries.iter().enumerate() {
                    stats.queries += 1;
                    let draft = match (qi, response, profile) {
                        (0, Some(r), _) => r.clone(),
                        (_, _, Some(profile)) => {
                            let prompt = ChatPrompt::user(leaked_response_prompt(profile, query));
                            teacher
                                .generate(Route::Base, &prompt, &cfg.teacher_params)
                                .await?
                        }
                        _ => {
                            return Err(DatasetError::Seed {
                                id: pair.id.clone(),
                                reason: "needs a profile or a precomputed response".into(),
                            })
                        }
                    };
                    let verdict = judge.label(query, &pair.answer, &draft).await?;
                    let base_id = format!("{}/q{qi}", pair.id);
                    if verdict.label == JudgeLabel::NoLeakage {
                        let ids: Vec<String> = generation
                            .retrieve(query, &draft, cfg.negatives)
                            .into_iter()
                            .map(|r| r.record_id)
                            .collect();
                        tuples.push(TrainingTuple::new(
                            format!("{base_id}/safe"),
                            query,
                            &draft,
                            &records(generation, &ids),
                            JudgeLabel::NoLeakage,
                            &draft,
                        )?);
                        continue;
                    }
                    let sets = build_contrastive_sets(
                        &pair,
                        &draft,
                        generation,
                        cfg.positives,
                        cfg.negatives,
                    )?;
                    let plus = records(generation, &sets.positives);
                    let bundle = assemble_correction_prompt(query, &draft, &plus).map_err(|e| {
                        DatasetError::Seed {
                            id: pair.id.clone(),
                            reason: e.to_string(),
                        }
                    })?;
                    let revised = teacher
                        .continue_with_prefix(
                            Route::Corrector,
                            &bundle.chat_prompt(),
                            &revision_prefix(&cfg.judge_tokens),
                            &cfg.teacher_params,
                        )
                        .await?
                        .trim()
                        .to_string();
                    let revised_verdict = judge.label(query, &pair.answer, &revised).await?;
                    if revised_verdict.label == JudgeLabel::Leakage
                        || revised == draft
                        || revised.is_empty()
                    {
                        stats.dropped_unrevised += 1;
                    } else {
                        tuples.push(TrainingTuple::new(
                            format!("{base_id}/plus"),
                            query,
                            &draft,
                            &plus,
                            JudgeLabel::Leakage,
                            &revised,
                        )?);
                    }
                    if !sets.negatives.is_empty() {
                        tuples.push(TrainingTuple::new(
                            format!("{base_id}/minus"),
                            query,
                            &draft,
                            &records(generation, &sets.negatives),
                            JudgeLabel::NoLeakage,
                            &draft,
                        )?);
                    }
                }
            }
        }
    }
    for t in &tuples {
        match t.judge_label {
            JudgeLabel::Leakage => stats.leakage_tuples += 1,
            JudgeLabel::NoLeakage => stats.no_leakage_tuples += 1,
        }
    }
    Ok((tuples, stats))
}
