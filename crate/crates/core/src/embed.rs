//! Mean-pooled phrase vectors and cosine similarity between category names.

use thiserror::Error;

use crate::formats::{EmbeddingTable, VisualConcept};

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("phrase has no words")]
    EmptyPhrase,
    #[error("vector widths differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no candidates to rank")]
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhraseVector {
    pub vector: Vec<f32>,
    /// Fraction of phrase words found in the table.
    pub coverage: f32,
}

/// Lowercases and splits on whitespace and hyphens.
pub fn phrase_words(phrase: &str) -> Vec<String> {
    phrase
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn phrase_embedding(phrase: &str, table: &EmbeddingTable) -> Result<PhraseVector, EmbedError> {
    let words = phrase_words(phrase);
    if words.is_empty() {
        return Err(EmbedError::EmptyPhrase);
    }
    let mut sum = vec![0.0f64; table.dimension()];
    let mut found = 0usize;
    for w in &words {
        if let Some(v) = table.get(w) {
            found += 1;
            for (s, x) in sum.iter_mut().zip(v) {
                *s += *x as f64;
            }
        }
    }
    let vector = if found == 0 {
        vec![0.0; table.dimension()]
    } else {
        sum.iter().map(|s| (s / found as f64) as f32).collect()
    };
    Ok(PhraseVector {
        vector,
        coverage: found as f32 / words.len() as f32,
    })
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_similarity(a: &PhraseVector, b: &PhraseVector) -> Result<f32, EmbedError> {
    cosine(&a.vector, &b.vector)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// Similarity between the category names of two phrases.
pub fn phrase_similarity(a: &str, b: &str, table: &EmbeddingTable) -> Result<f32, EmbedError> {
    cosine_similarity(&phrase_embedding(a, table)?, &phrase_embedding(b, table)?)
}

/// Candidates ranked by category similarity to `target`, highest first.
/// Equal scores keep input order.
pub fn rank_by_category_similarity(
    target: &VisualConcept,
    candidates: &[VisualConcept],
    table: &EmbeddingTable,
) -> Result<Vec<(usize, f32)>, EmbedError> {
    if candidates.is_empty() {
        return Err(EmbedError::NoCandidates);
    }
    let t = phrase_embedding(&target.category, table)?;
    let mut scored = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, cosine_similarity(&t, &phrase_embedding(&c.category, table)?)?)))
        .collect::<Result<Vec<_>, EmbedError>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}
