//! Negative sampling: knowledge selection for image-knowledge matching,
//! donor selection for image edit checking, and locating the captioned
//! concept among the detected objects.
//!
//! Every sampler is a pure function of its inputs and the generator it is
//! handed, so a seeded generator reproduces every decision.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, phrase_embedding, EmbedError, PhraseVector};
use crate::formats::{DetectedObject, EmbeddingTable, ImageRecord, VisualConcept};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("every candidate concept is within the similarity threshold")]
    NoDissimilarConcept,
    #[error("image `{0}` has no detected objects")]
    NoObjects(String),
    #[error("no donor object passes the category filter")]
    NoValidDonor,
    #[error("image `{0}` has no concept name")]
    MissingConcept(String),
    #[error("index {index} out of range for `{image}`")]
    IndexOutOfRange { image: String, index: usize },
    #[error("feature width {0} does not match {1}")]
    DimensionMismatch(usize, usize),
    #[error("donor image `{0}` does not match replacement record")]
    WrongDonor(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> f32 {
        match self {
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = (*x - *y) as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt() as f32,
            DistanceMetric::Cosine => 1.0 - cosine(a, b).unwrap_or(0.0),
        }
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown distance metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub tau: f32,
    pub ikm_candidate_count: usize,
    pub iec_sample_images: usize,
    pub top_k_objects: usize,
    pub rng_seed: u64,
    pub distance: DistanceMetric,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            ikm_candidate_count: 200,
            iec_sample_images: 20,
            top_k_objects: 10,
            rng_seed: 0,
            distance: DistanceMetric::Euclidean,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(format!("tau must lie in (0,1), got {}", self.tau));
        }
        if self.ikm_candidate_count == 0 || self.iec_sample_images == 0 || self.top_k_objects == 0 {
            return Err("sampler counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRecord {
    pub target_object_index: usize,
    pub donor_image_id: String,
    pub donor_object_index: usize,
    pub donor_tag: String,
    pub visual_distance: f32,
    pub category_similarity: f32,
}

pub fn same_concept(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

fn vector_of(phrase: &str, table: &EmbeddingTable) -> Result<PhraseVector, EmbedError> {
    phrase_embedding(phrase, table)
}

/// Similarity of a detector tag to a category vector. Empty tags score 0.
fn tag_similarity(tag: &str, category: &PhraseVector, table: &EmbeddingTable) -> Result<f32, EmbedError> {
    match phrase_embedding(tag, table) {
        Ok(v) => cosine(&v.vector, &category.vector),
        Err(EmbedError::EmptyPhrase) => Ok(0.0),
        Err(e) => Err(e),
    }
}

fn eligible_pool(target: &VisualConcept, pool: &[VisualConcept]) -> Vec<usize> {
    pool.iter()
        .enumerate()
        .filter(|(_, c)| !same_concept(&c.name, &target.name))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Type3Choice {
    /// Index into the pool.
    pub index: usize,
    pub similarity: f32,
    /// Pool indices of the drawn candidates, in draw order.
    pub drawn: Vec<usize>,
}

/// Draws up to `ikm_candidate_count` candidates without replacement and
/// returns the one whose category is most similar to the target's.
/// Ties go to the earliest draw.
pub fn select_type3_knowledge<R: Rng + ?Sized>(
    target: &VisualConcept,
    pool: &[VisualConcept],
    table: &EmbeddingTable,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Type3Choice, SampleError> {
    let eligible = eligible_pool(target, pool);
    if eligible.is_empty() {
        return Err(SampleError::EmptyPool);
    }
    let n = cfg.ikm_candidate_count.min(eligible.len());
    let drawn: Vec<usize> = sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let t = vector_of(&target.category, table)?;
    let mut best: Option<(usize, f32)> = None;
    for &i in &drawn {
        let s = cosine(&t.vector, &vector_of(&pool[i].category, table)?.vector)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (index, similarity) = best.expect("at least one draw");
    Ok(Type3Choice {
        index,
        similarity,
        drawn,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Type2Choice {
    pub index: usize,
    pub similarity: f32,
    pub retained: usize,
}

/// Uniform draw over pool concepts whose category similarity is below tau.
/// The retained set is kept in pool order and one index is drawn with a
/// single `gen_range` call.
pub fn select_type2_knowledge<R: Rng + ?Sized>(
    target: &VisualConcept,
    pool: &[VisualConcept],
    table: &EmbeddingTable,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Type2Choice, SampleError> {
    let eligible = eligible_pool(target, pool);
    if eligible.is_empty() {
        return Err(SampleError::EmptyPool);
    }
    let t = vector_of(&target.category, table)?;
    let mut retained = Vec::new();
    for i in eligible {
        let s = cosine(&t.vector, &vector_of(&pool[i].category, table)?.vector)?;
        if s < cfg.tau {
            retained.push((i, s));
        }
    }
    if retained.is_empty() {
        return Err(SampleError::NoDissimilarConcept);
    }
    let (index, similarity) = retained[rng.gen_range(0..retained.len())];
    Ok(Type2Choice {
        index,
        similarity,
        retained: retained.len(),
    })
}

/// Object indices ordered by area, largest first (ties: lower index), cut
/// to the first `k`.
pub fn top_k_by_area(objects: &[DetectedObject], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].area.cmp(&objects[a].area).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Located {
    pub index: usize,
    pub similarity: f32,
}

/// Finds the object depicting the record's concept: among the `top_k_objects`
/// largest objects, the one whose detector tag is closest to the concept's
/// category. The winner's tag is overridden with the concept name.
pub fn locate_concept(
    record: &mut ImageRecord,
    category: &str,
    table: &EmbeddingTable,
    cfg: &SamplerConfig,
) -> Result<Located, SampleError> {
    let concept = record
        .concept_name
        .clone()
        .ok_or_else(|| SampleError::MissingConcept(record.image_id.clone()))?;
    if record.objects.is_empty() {
        return Err(SampleError::NoObjects(record.image_id.clone()));
    }
    let cat = vector_of(category, table)?;
    let mut best: Option<Located> = None;
    for i in top_k_by_area(&record.objects, cfg.top_k_objects) {
        let s = tag_similarity(&record.objects[i].tag, &cat, table)?;
        if best.is_none_or(|b| s > b.similarity) {
            best = Some(Located {
                index: i,
                similarity: s,
            });
        }
    }
    let located = best.expect("nonempty object list");
    record.objects[located.index].concept_override = Some(concept);
    Ok(located)
}

/// Copies the located object's concept override to every object sharing its
/// original detector tag. Returns how many objects carry the override.
pub fn propagate_concept(record: &mut ImageRecord, located_index: usize) -> usize {
    let Some(located) = record.objects.get(located_index) else {
        return 0;
    };
    let tag = located.tag.clone();
    let Some(concept) = located.concept_override.clone().or_else(|| record.concept_name.clone())
    else {
        return 0;
    };
    let mut n = 0;
    for o in record.objects.iter_mut().filter(|o| o.tag == tag) {
        o.concept_override = Some(concept.clone());
        n += 1;
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct IecChoice {
    pub replacement: ReplacementRecord,
    /// Corpus indices of the sampled donor images, in draw order.
    pub sampled_images: Vec<usize>,
}

/// Samples donor images, keeps objects whose detector tag is dissimilar to
/// the concept's category (similarity below tau) and returns the one
/// visually closest to the located object. Ties go to the earliest
/// (image draw order, object index).
#[allow(clippy::too_many_arguments)]
pub fn select_iec_replacement<R: Rng + ?Sized>(
    record: &ImageRecord,
    located_index: usize,
    corpus: &[ImageRecord],
    category: &str,
    table: &EmbeddingTable,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<IecChoice, SampleError> {
    let target = record
        .objects
        .get(located_index)
        .ok_or_else(|| SampleError::IndexOutOfRange {
            image: record.image_id.clone(),
            index: located_index,
        })?;
    let others: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(_, r)| r.image_id != record.image_id)
        .map(|(i, _)| i)
        .collect();
    if others.is_empty() {
        return Err(SampleError::NoValidDonor);
    }
    let n = cfg.iec_sample_images.min(others.len());
    let sampled_images: Vec<usize> = sample(rng, others.len(), n)
        .into_iter()
        .map(|i| others[i])
        .collect();
    let cat = vector_of(category, table)?;
    let mut best: Option<ReplacementRecord> = None;
    for &img in &sampled_images {
        let donor = &corpus[img];
        for (k, obj) in donor.objects.iter().enumerate() {
            if obj.feature.len() != target.feature.len() {
                continue;
            }
            let sim = tag_similarity(&obj.tag, &cat, table)?;
            if sim >= cfg.tau {
                continue;
            }
            let d = cfg.distance.distance(&target.feature, &obj.feature);
            if best.as_ref().is_none_or(|b| d < b.visual_distance) {
                best = Some(ReplacementRecord {
                    target_object_index: located_index,
                    donor_image_id: donor.image_id.clone(),
                    donor_object_index: k,
                    donor_tag: obj.tag.clone(),
                    visual_distance: d,
                    category_similarity: sim,
                });
            }
        }
    }
    best.map(|replacement| IecChoice {
        replacement,
        sampled_images,
    })
    .ok_or(SampleError::NoValidDonor)
}

/// Copy of `record` whose target object carries the donor's feature.
/// Nothing else changes.
pub fn apply_replacement(
    record: &ImageRecord,
    rep: &ReplacementRecord,
    donor: &ImageRecord,
) -> Result<ImageRecord, SampleError> {
    if donor.image_id != rep.donor_image_id {
        return Err(SampleError::WrongDonor(donor.image_id.clone()));
    }
    let feature = donor
        .objects
        .get(rep.donor_object_index)
        .ok_or_else(|| SampleError::IndexOutOfRange {
            image: donor.image_id.clone(),
            index: rep.donor_object_index,
        })?
        .feature
        .clone();
    let mut out = record.clone();
    let target = out
        .objects
        .get_mut(rep.target_object_index)
        .ok_or_else(|| SampleError::IndexOutOfRange {
            image: record.image_id.clone(),
            index: rep.target_object_index,
        })?;
    if target.feature.len() != feature.len() {
        return Err(SampleError::DimensionMismatch(feature.len(), target.feature.len()));
    }
    target.feature = feature;
    Ok(out)
}
