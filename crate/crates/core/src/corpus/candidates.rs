//! Rule-based location candidates.
//!
//! There is no POS tagger here. A location is taken to be the first content
//! word after a locative preposition (optionally with the following content
//! word as a bigram), or the last content word of a sentence. "Content word"
//! means: alphabetic, outside the closed-class lexicon below, and not an
//! obvious verb form (`-ed`, `-ing`).

use super::tokenize::{normalize, tokenize};
use super::types::{Location, ProcedureInstance, Split};

pub const LOCATIVE_PREPOSITIONS: &[&str] =
    &["in", "into", "from", "to", "on", "at", "through", "inside"];

const CLOSED_CLASS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "its", "it", "their", "they", "them",
    "his", "her", "he", "she", "we", "you", "i", "our", "your", "my", "some", "any", "each",
    "every", "all", "both", "other", "another", "such", "which", "who", "whom", "what", "there",
    "here", "and", "or", "but", "nor", "so", "if", "then", "than", "as", "because", "while",
    "when", "where", "of", "in", "into", "from", "to", "on", "at", "through", "inside", "by",
    "with", "without", "for", "about", "over", "under", "up", "down", "out", "off", "onto",
    "upon", "after", "before", "during", "between", "within", "across", "around", "is", "are",
    "was", "were", "be", "been", "being", "am", "has", "have", "had", "do", "does", "did", "can",
    "could", "will", "would", "shall", "should", "may", "might", "must", "not", "no", "very",
    "more", "most", "much", "many", "few", "one", "also", "again", "away", "back", "too", "now",
    "just", "only", "even", "still",
];

fn is_closed_class(tok: &str) -> bool {
    CLOSED_CLASS.contains(&tok)
}

fn is_content_word(tok: &str) -> bool {
    tok.chars().all(|c| c.is_alphabetic() || c == '-')
        && tok.chars().next().is_some_and(char::is_alphabetic)
        && !is_closed_class(tok)
        && !tok.ends_with("ed")
        && !tok.ends_with("ing")
}

fn push_unique(out: &mut Vec<String>, cand: String) {
    if !cand.is_empty() && !out.contains(&cand) {
        out.push(cand);
    }
}

/// Heuristic candidates of one tokenized sentence, in text order.
pub fn sentence_candidates(tokens: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if !LOCATIVE_PREPOSITIONS.contains(&tok.as_str()) {
            continue;
        }
        let mut j = i + 1;
        while j < tokens.len() && is_closed_class(&tokens[j]) && !LOCATIVE_PREPOSITIONS.contains(&tokens[j].as_str()) {
            j += 1;
        }
        if j < tokens.len() && is_content_word(&tokens[j]) {
            push_unique(&mut out, tokens[j].clone());
            if j + 1 < tokens.len() && is_content_word(&tokens[j + 1]) {
                push_unique(&mut out, format!("{} {}", tokens[j], tokens[j + 1]));
            }
        }
    }
    if let Some(last) = tokens.iter().rev().find(|t| t.chars().any(char::is_alphanumeric)) {
        if is_content_word(last) {
            push_unique(&mut out, last.clone());
        }
    }
    out
}

/// Deduplicated candidates for a paragraph: heuristic matches in sentence
/// order, then file-provided candidates, then (train and dev only) any gold
/// span locations still missing.
pub fn generate_location_candidates(instance: &ProcedureInstance, split: Split) -> Vec<String> {
    let mut out = Vec::new();
    for sentence in &instance.sentences {
        for c in sentence_candidates(&tokenize(sentence)) {
            push_unique(&mut out, c);
        }
    }
    if let Some(provided) = &instance.location_candidates {
        for c in provided {
            push_unique(&mut out, normalize(c));
        }
    }
    if split.injects_gold() {
        for loc in gold_spans(instance) {
            push_unique(&mut out, normalize(&loc));
        }
    }
    out
}

/// Every span (non-`?`, non-`-`) location in the gold annotations, including
/// initial locations.
pub fn gold_spans(instance: &ProcedureInstance) -> Vec<String> {
    let mut spans = Vec::new();
    let init = instance.initial_locations.iter().flatten();
    let steps = instance.gold_locations.iter().flatten().flatten();
    for loc in init.chain(steps) {
        if let Location::Span(s) = loc {
            spans.push(s.clone());
        }
    }
    spans
}
