//! Versioned storage of unlearning targets.
//!
//! Every record is a question/answer knowledge unit that must not surface in
//! gateway output. The store is persisted as newline-delimited JSON, one
//! record per line, and every successful mutation bumps the version by one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("record {index} has an empty {field}")]
    EmptyField { index: usize, field: &'static str },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("snapshot is empty")]
    EmptySnapshot,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// One unlearning target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub created_version: u64,
}

impl ExclusionRecord {
    /// Text that drives retrieval for this record.
    pub fn document_text(&self) -> String {
        format!("{}\n{}", self.question, self.answer)
    }
}

/// A record as submitted for ingestion. The id is optional; when absent it is
/// derived from the content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDraft {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl RecordDraft {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: None,
            question: question.into(),
            answer: answer.into(),
            tags: Vec::new(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }

    /// Id used when the draft does not carry one: first 16 bytes of the
    /// SHA-256 of question and answer, hex encoded.
    pub fn content_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.question.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.answer.as_bytes());
        let digest = hasher.finalize();
        format!("k-{}", hex::encode(&digest[..16]))
    }

    fn resolved_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.content_id())
    }
}

impl From<ExclusionRecord> for RecordDraft {
    fn from(record: ExclusionRecord) -> Self {
        Self {
            id: Some(record.id),
            question: record.question,
            answer: record.answer,
            tags: record.tags,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreVersion {
    pub version: u64,
    pub record_count: usize,
}

/// In-memory exclusion store. Not synchronized; see
/// [`crate::exclusions::ExclusionSet`] for the shared, concurrently readable
/// handle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExclusionStore {
    records: BTreeMap<String, ExclusionRecord>,
    version: u64,
}

impl ExclusionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> StoreVersion {
        StoreVersion {
            version: self.version,
            record_count: self.records.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ExclusionRecord> {
        self.records.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    /// Records in ascending id order.
    pub fn records(&self) -> impl Iterator<Item = &ExclusionRecord> {
        self.records.values()
    }

    /// Validates a batch without applying it and returns the records that
    /// would be inserted.
    pub fn prepare_add(&self, drafts: &[RecordDraft]) -> Result<Vec<ExclusionRecord>, StoreError> {
        if drafts.is_empty() {
            return Err(StoreError::EmptyBatch);
        }
        let next_version = self.version + 1;
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(drafts.len());
        for (index, draft) in drafts.iter().enumerate() {
            if draft.question.trim().is_empty() {
                return Err(StoreError::EmptyField {
                    index,
                    field: "question",
                });
            }
            if draft.answer.trim().is_empty() {
                return Err(StoreError::EmptyField {
                    index,
                    field: "answer",
                });
            }
            let id = draft.resolved_id();
            if id.is_empty() {
                return Err(StoreError::EmptyField { index, field: "id" });
            }
            // Explicit ids must be new. A content-derived id that is already
            // present is an idempotent re-ingestion and is skipped.
            if self.records.contains_key(&id) || !seen.insert(id.clone()) {
                if draft.id.is_some() {
                    return Err(StoreError::DuplicateId(id));
                }
                continue;
            }
            out.push(ExclusionRecord {
                id,
                question: draft.question.clone(),
                answer: draft.answer.clone(),
                tags: draft.tags.clone(),
                created_version: next_version,
            });
        }
        Ok(out)
    }

    /// Adds a batch atomically. Returns the new version.
    pub fn add(&mut self, drafts: &[RecordDraft]) -> Result<StoreVersion, StoreError> {
        let records = self.prepare_add(drafts)?;
        self.apply_add(records);
        Ok(self.version())
    }

    pub(crate) fn apply_add(&mut self, records: Vec<ExclusionRecord>) {
        self.version += 1;
        for record in records {
            self.records.insert(record.id.clone(), record);
        }
    }

    pub fn prepare_remove(&self, ids: &[String]) -> Result<(), StoreError> {
        if ids.is_empty() {
            return Err(StoreError::EmptyBatch);
        }
        for id in ids {
            if !self.records.contains_key(id) {
                return Err(StoreError::UnknownId(id.clone()));
            }
        }
        Ok(())
    }

    /// Removes a batch atomically; an unknown id aborts the whole batch.
    pub fn remove(&mut self, ids: &[String]) -> Result<StoreVersion, StoreError> {
        self.prepare_remove(ids)?;
        self.apply_remove(ids);
        Ok(self.version())
    }

    pub(crate) fn apply_remove(&mut self, ids: &[String]) -> Vec<ExclusionRecord> {
        self.version += 1;
        ids.iter()
            .filter_map(|id| self.records.remove(id))
            .collect()
    }

    /// Serializes the store. The first line is a header carrying the store
    /// version; every following line is one record in id order.
    pub fn to_snapshot_string(&self) -> String {
        let mut out = String::new();
        let header = SnapshotHeader {
            store_version: self.version,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for record in self.records.values() {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot_str(text: &str) -> Result<Self, StoreError> {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let mut lines = lines.peekable();
        let &(line, first) = lines.peek().ok_or(StoreError::EmptySnapshot)?;
        // Plain record files (no header line) are accepted too; their
        // version is the newest created_version.
        let header_version = match serde_json::from_str::<SnapshotHeader>(first) {
            Ok(header) => {
                lines.next();
                Some(header.store_version)
            }
            Err(e) if !first.contains("\"id\"") => {
                return Err(StoreError::Parse {
                    line,
                    message: format!("invalid snapshot header: {e}"),
                })
            }
            Err(_) => None,
        };
        let mut store = ExclusionStore {
            records: BTreeMap::new(),
            version: header_version.unwrap_or(u64::MAX),
        };
        for (line, text) in lines {
            let record: ExclusionRecord =
                serde_json::from_str(text).map_err(|e| StoreError::Parse {
                    line,
                    message: e.to_string(),
                })?;
            if record.question.trim().is_empty() || record.answer.trim().is_empty() {
                return Err(StoreError::Parse {
                    line,
                    message: "question and answer must be non-empty".into(),
                });
            }
            if record.created_version > store.version {
                return Err(StoreError::Parse {
                    line,
                    message: format!(
                        "created_version {} exceeds store version {}",
                        record.created_version, store.version
                    ),
                });
            }
            if store.records.contains_key(&record.id) {
                return Err(StoreError::Parse {
                    line,
                    message: format!("duplicate id {:?}", record.id),
                });
            }
            store.records.insert(record.id.clone(), record);
        }
        if header_version.is_none() {
            store.version = store
                .records
                .values()
                .map(|r| r.created_version)
                .max()
                .unwrap_or(0);
        }
        Ok(store)
    }

    /// Writes the snapshot via a temporary file and rename.
    pub fn snapshot(&self, path: &Path) -> Result<(), StoreError> {
        let io_err = |e: std::io::Error| StoreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_snapshot_string()).map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_snapshot_str(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotHeader {
    store_version: u64,
}

/// Parses an ingestion file: one draft per line, same fields as a record
/// (`created_version` is ignored if present). Blank lines are skipped.
pub fn parse_drafts(text: &str) -> Result<Vec<RecordDraft>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let draft: RecordDraft = serde_json::from_str(line).map_err(|e| StoreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(draft);
    }
    Ok(out)
}

/// Renders records in the ingestion format.
pub fn render_drafts(drafts: &[RecordDraft]) -> String {
    let mut out = String::new();
    for d in drafts {
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(d).expect("draft serializes")
        );
    }
    out
}
