//! Lexical overlap between a target answer and a response.
//!
//! A response overlaps an answer when it contains the whole answer string
//! (case and whitespace normalized) or shares a run of four consecutive
//! content tokens with it.

use std::collections::HashSet;

use crate::retrieval::tokenize;

pub const NGRAM: usize = 4;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "have", "he", "her",
    "his", "in", "is", "it", "its", "of", "on", "or", "she", "that", "the", "their", "they",
    "this", "to", "was", "were", "with",
];

pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn answer_overlaps(answer: &str, response: &str) -> bool {
    let answer_norm = normalize(answer);
    if !answer_norm.is_empty() && normalize(response).contains(&answer_norm) {
        return true;
    }
    let a = content_tokens(answer);
    let r = content_tokens(response);
    let grams = ngrams(&a, NGRAM);
    r.windows(NGRAM).any(|w| grams.contains(w))
}
