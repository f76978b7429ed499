//! BM25 retrieval over the exclusion store.
//!
//! The index keeps per-document term frequencies and lengths plus
//! collection-wide document frequencies. Adds and removes adjust those
//! statistics in place, so an incrementally maintained index is identical to
//! one built from scratch over the same live set.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::store::ExclusionRecord;

/// Default number of retrieved exclusions.
pub const DEFAULT_TOP_K: usize = 5;

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Smoothed IDF, `ln(1 + (N - df + 0.5) / (df + 0.5))`. Never negative.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub record_id: String,
    pub tokens: Vec<String>,
    pub length: usize,
}

impl TokenizedDoc {
    pub fn new(record_id: impl Into<String>, text: &str) -> Self {
        let tokens = tokenize(text);
        Self {
            record_id: record_id.into(),
            length: tokens.len(),
            tokens,
        }
    }

    pub fn from_record(record: &ExclusionRecord) -> Self {
        Self::new(record.id.clone(), &record.document_text())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub record_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct DocEntry {
    length: usize,
    term_freqs: BTreeMap<String, u32>,
}

/// Collection statistics, exposed so callers can compare two indexes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndexStats {
    pub doc_count: usize,
    pub total_length: u64,
    pub doc_freqs: BTreeMap<String, usize>,
    pub doc_lengths: BTreeMap<String, usize>,
}

impl IndexStats {
    pub fn avg_length(&self) -> f64 {
        if self.doc_count == 0 {
            0.0
        } else {
            self.total_length as f64 / self.doc_count as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: BTreeMap<String, DocEntry>,
    // term -> (doc id -> tf); doc ids kept ordered for deterministic scans
    postings: HashMap<String, BTreeMap<String, u32>>,
    total_length: u64,
}

impl Bm25Index {
    pub fn new(params: Bm25Params) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    pub fn build<'a>(
        params: Bm25Params,
        docs: impl IntoIterator<Item = &'a ExclusionRecord>,
    ) -> Self {
        let mut index = Self::new(params);
        for record in docs {
            index.insert(TokenizedDoc::from_record(record));
        }
        index
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn contains(&self, record_id: &str) -> bool {
        self.docs.contains_key(record_id)
    }

    /// Inserts a document, replacing any previous document with the same id.
    pub fn insert(&mut self, doc: TokenizedDoc) {
        if self.docs.contains_key(&doc.record_id) {
            self.remove(&doc.record_id);
        }
        let mut term_freqs = BTreeMap::new();
        for token in &doc.tokens {
            *term_freqs.entry(token.clone()).or_insert(0u32) += 1;
        }
        for (term, tf) in &term_freqs {
            self.postings
                .entry(term.clone())
                .or_default()
                .insert(doc.record_id.clone(), *tf);
        }
        self.total_length += doc.length as u64;
        self.docs.insert(
            doc.record_id,
            DocEntry {
                length: doc.length,
                term_freqs,
            },
        );
    }

    pub fn remove(&mut self, record_id: &str) -> bool {
        let Some(entry) = self.docs.remove(record_id) else {
            return false;
        };
        self.total_length -= entry.length as u64;
        for term in entry.term_freqs.keys() {
            if let Some(list) = self.postings.get_mut(term) {
                list.remove(record_id);
                if list.is_empty() {
                    self.postings.remove(term);
                }
            }
        }
        true
    }

    /// Applies a delta: removals first, then additions.
    pub fn update<'a>(
        &mut self,
        added: impl IntoIterator<Item = &'a ExclusionRecord>,
        removed: impl IntoIterator<Item = &'a str>,
    ) {
        for id in removed {
            self.remove(id);
        }
        for record in added {
            self.insert(TokenizedDoc::from_record(record));
        }
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            doc_count: self.docs.len(),
            total_length: self.total_length,
            doc_freqs: self
                .postings
                .iter()
                .map(|(t, list)| (t.clone(), list.len()))
                .collect(),
            doc_lengths: self
                .docs
                .iter()
                .map(|(id, d)| (id.clone(), d.length))
                .collect(),
        }
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, BTreeMap::len)
    }

    fn avg_length(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.docs.len() as f64
        }
    }

    fn term_weight(&self, tf: u32, doc_len: usize, avg_len: f64) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if avg_len > 0.0 {
            doc_len as f64 / avg_len
        } else {
            0.0
        };
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }

    /// BM25 score of one indexed document. Every occurrence of a term in the
    /// query contributes, so duplicated query terms count twice.
    pub fn score(&self, query_terms: &[String], record_id: &str) -> f64 {
        let Some(doc) = self.docs.get(record_id) else {
            return 0.0;
        };
        let n = self.docs.len();
        let avg_len = self.avg_length();
        let mut score = 0.0;
        for term in query_terms {
            if let Some(&tf) = doc.term_freqs.get(term) {
                score += idf(n, self.doc_freq(term)) * self.term_weight(tf, doc.length, avg_len);
            }
        }
        score
    }

    /// Scores every live document against the query through the postings
    /// lists and returns them ranked by score desc, id asc.
    pub fn rank_all(&self, query_terms: &[String]) -> Vec<RetrievalResult> {
        self.rank(query_terms, self.docs.len())
    }

    pub fn rank(&self, query_terms: &[String], k: usize) -> Vec<RetrievalResult> {
        if k == 0 || self.docs.is_empty() {
            return Vec::new();
        }
        let n = self.docs.len();
        let avg_len = self.avg_length();
        let mut acc: HashMap<&str, f64> = HashMap::new();
        for term in query_terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let term_idf = idf(n, list.len());
            for (id, &tf) in list {
                let len = self.docs[id].length;
                *acc.entry(id.as_str()).or_insert(0.0) +=
                    term_idf * self.term_weight(tf, len, avg_len);
            }
        }
        let mut scored: Vec<(&str, f64)> = acc.into_iter().collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        scored.truncate(k);
        // Fill with zero-score documents in id order when the query matches
        // fewer than k documents.
        if scored.len() < k {
            let matched: std::collections::HashSet<&str> =
                scored.iter().map(|(id, _)| *id).collect();
            let missing = k - scored.len();
            scored.extend(
                self.docs
                    .keys()
                    .map(String::as_str)
                    .filter(|id| !matched.contains(id))
                    .take(missing)
                    .map(|id| (id, 0.0)),
            );
        }
        scored
            .into_iter()
            .enumerate()
            .map(|(i, (id, score))| RetrievalResult {
                record_id: id.to_string(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    /// Top-k exclusions for a query/draft pair.
    pub fn retrieve_top_k(&self, query: &str, draft: &str, k: usize) -> Vec<RetrievalResult> {
        self.rank(&tokenize(&query_text(query, draft)), k)
    }
}

/// Retrieval query for a (query, draft) pair.
pub fn query_text(query: &str, draft: &str) -> String {
    format!("{query}\n{draft}")
}
