//! Head-noun phrase extraction from dependency parses.
//!
//! A phrase is the head noun plus its `amod` and `compound` dependents that
//! attach directly to it, in surface order. The head is the root when the
//! root is a noun (this covers copular definitions, where the predicate
//! nominal is the root); otherwise the nearest noun below the root, searched
//! breadth-first with siblings in surface order.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{ParseToken, ParsedSentence, VisualConcept};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("sentence `{0}` has no noun reachable from its root")]
    NoNounFound(String),
    #[error("sentence `{0}` has no root")]
    NoRoot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedPhrase {
    /// Original casing, tokens joined by single spaces.
    pub text: String,
    pub head_index: usize,
    pub modifier_indices: Vec<usize>,
}

impl ExtractedPhrase {
    /// Lowercased form used for matching against other phrases.
    pub fn normalized(&self) -> String {
        self.text.to_lowercase()
    }
}

const MODIFIERS: [&str; 2] = ["amod", "compound"];

fn head_noun(parse: &ParsedSentence) -> Result<&ParseToken, ExtractError> {
    let root = parse
        .root()
        .ok_or_else(|| ExtractError::NoRoot(parse.id.clone()))?;
    let mut queue = VecDeque::from([root]);
    while let Some(tok) = queue.pop_front() {
        if tok.is_noun() {
            return Ok(tok);
        }
        queue.extend(parse.dependents(tok.index));
    }
    Err(ExtractError::NoNounFound(parse.id.clone()))
}

fn compose(parse: &ParsedSentence, head: &ParseToken) -> ExtractedPhrase {
    let modifier_indices: Vec<usize> = parse
        .dependents(head.index)
        .filter(|t| MODIFIERS.contains(&t.base_deprel()))
        .filter(|t| !matches!(t.upos.as_str(), "DET" | "NUM" | "PUNCT"))
        .map(|t| t.index)
        .collect();
    let mut used: Vec<usize> = modifier_indices.clone();
    used.push(head.index);
    used.sort_unstable();
    let words: Vec<&str> = used
        .iter()
        .filter_map(|&i| parse.token(i))
        .map(|t| t.surface.as_str())
        .collect();
    ExtractedPhrase {
        text: words.join(" "),
        head_index: head.index,
        modifier_indices,
    }
}

/// Visual concept name from a caption parse.
pub fn extract_concept_name(parse: &ParsedSentence) -> Result<ExtractedPhrase, ExtractError> {
    let head = head_noun(parse)?;
    Ok(compose(parse, head))
}

/// Category phrase from the first sentence of an encyclopedia entry.
pub fn extract_category(parse: &ParsedSentence) -> Result<ExtractedPhrase, ExtractError> {
    let head = head_noun(parse)?;
    Ok(compose(parse, head))
}

/// One encyclopedia page: the concept it describes, the parse of its first
/// sentence and its text.
#[derive(Debug, Clone)]
pub struct Page {
    pub concept_name: String,
    pub first_sentence: ParsedSentence,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageWarning {
    pub concept_name: String,
    pub error: ExtractError,
}

/// Truncates whitespace-delimited text to at most `budget` words.
pub fn truncate_words(text: &str, budget: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().take(budget).collect();
    words.join(" ")
}

pub fn build_knowledge_base(
    pages: &[Page],
    knowledge_budget: usize,
) -> (Vec<VisualConcept>, Vec<PageWarning>) {
    let mut concepts = Vec::with_capacity(pages.len());
    let mut warnings = Vec::new();
    for page in pages {
        let knowledge = truncate_words(&page.text, knowledge_budget);
        match extract_category(&page.first_sentence) {
            Ok(cat) if !knowledge.is_empty() => concepts.push(VisualConcept {
                name: page.concept_name.clone(),
                category: cat.text,
                knowledge,
            }),
            Ok(_) => {
                log::warn!("page `{}` has empty text, skipped", page.concept_name);
                warnings.push(PageWarning {
                    concept_name: page.concept_name.clone(),
                    error: ExtractError::NoNounFound(page.first_sentence.id.clone()),
                });
            }
            Err(error) => {
                log::warn!("page `{}` skipped: {error}", page.concept_name);
                warnings.push(PageWarning {
                    concept_name: page.concept_name.clone(),
                    error,
                });
            }
        }
    }
    (concepts, warnings)
}
