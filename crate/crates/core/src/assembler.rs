//! Turns image records into labelled training examples.
//!
//! Each example is laid out as `[CLS] caption [SEP] knowledge [SEP] tags [SEP]`
//! followed by one visual row per kept object, and carries labels for masked
//! language modelling, image-text matching, image-knowledge matching and
//! image edit checking.

use std::collections::{BTreeSet, HashMap};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::formats::{
    CorpusManifest, DetectedObject, EmbeddingTable, ImageRecord, Provenance, TrainingExample,
    VisualConcept, FORMAT_VERSION,
};
use crate::negatives::{
    apply_replacement, locate_concept, propagate_concept, same_concept, select_iec_replacement,
    select_type2_knowledge, select_type3_knowledge, ReplacementRecord, SampleError, SamplerConfig,
};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Number of box-geometry values appended to every detector feature.
pub const GEOMETRY_WIDTH: usize = 6;

/// Records per shard. Fixed so output does not depend on thread count.
const SHARD_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials followed by `words` in the given order, deduplicated.
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    /// Restores a vocabulary written by [`Vocabulary::tokens`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err("vocabulary does not start with the special tokens".into());
        }
        Ok(Self::new(tokens.into_iter().skip(SPECIALS.len())))
    }

    /// Every word appearing in captions, tags, concept names and knowledge, sorted.
    pub fn from_sources(records: &[ImageRecord], kb: &[VisualConcept]) -> Self {
        let mut words = BTreeSet::new();
        let mut add = |text: &str| words.extend(split_words(text));
        for r in records {
            add(&r.caption);
            r.concept_name.as_deref().map(&mut add);
            r.knowledge.as_deref().map(&mut add);
            for o in &r.objects {
                add(&o.tag);
                o.concept_override.as_deref().map(&mut add);
            }
        }
        for c in kb {
            add(&c.name);
            add(&c.knowledge);
        }
        Self::new(words)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Lowercases, splits on whitespace and punctuation, maps unknown words to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    split_words(text).map(|w| vocab.id(&w)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub mlm_rate: f64,
    pub itm_ratio: [u32; 3],
    pub ikm_ratio: [u32; 3],
    pub iec_ratio: [u32; 2],
    pub max_text_tokens: usize,
    pub max_objects: usize,
    pub rng_seed: u64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            mlm_rate: 0.15,
            itm_ratio: [2, 1, 1],
            ikm_ratio: [2, 1, 1],
            iec_ratio: [1, 1],
            max_text_tokens: 70,
            max_objects: 50,
            rng_seed: 0,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return Err(format!("mlm_rate must lie in (0,1), got {}", self.mlm_rate));
        }
        let positive = |r: &[u32]| r.iter().all(|&x| x > 0);
        if !positive(&self.itm_ratio) || !positive(&self.ikm_ratio) || !positive(&self.iec_ratio) {
            return Err("label ratios must be positive".into());
        }
        if self.max_text_tokens < 4 || self.max_objects == 0 {
            return Err("max_text_tokens must be >= 4 and max_objects positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CorpusConfig {
    pub assembly: AssemblyConfig,
    pub sampler: SamplerConfig,
}

impl CorpusConfig {
    /// Short digest of the effective configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub visual_features: Vec<Vec<f32>>,
}

/// Effective tags of the objects kept for assembly, in visual-row order.
pub fn ordered_tags(record: &ImageRecord, max_objects: usize) -> Vec<String> {
    kept_objects(&record.objects, max_objects)
        .into_iter()
        .map(|i| record.objects[i].effective_tag().to_string())
        .collect()
}

/// Up to `max_objects` object indices, largest area first.
pub fn kept_objects(objects: &[DetectedObject], max_objects: usize) -> Vec<usize> {
    crate::negatives::top_k_by_area(objects, max_objects)
}

fn geometry(o: &DetectedObject, width: u32, height: u32) -> [f32; GEOMETRY_WIDTH] {
    let (w_img, h_img) = (width.max(1) as f64, height.max(1) as f64);
    let b = &o.bbox;
    [
        (b.x as f64 / w_img) as f32,
        (b.y as f64 / h_img) as f32,
        (b.w as f64 / w_img) as f32,
        (b.h as f64 / h_img) as f32,
        (b.area() as f64 / (w_img * h_img)) as f32,
        (b.w as f64 / b.h.max(1) as f64) as f32,
    ]
}

/// Lays out one input. When the text overflows `max_text_tokens`, knowledge
/// is cut first, then the caption, then the tags.
pub fn build_input(
    caption: &str,
    knowledge: &str,
    tags: &[String],
    objects: &[DetectedObject],
    image_size: (u32, u32),
    vocab: &Vocabulary,
    cfg: &AssemblyConfig,
) -> AssembledInput {
    let mut c = tokenize(caption, vocab);
    let mut k = tokenize(knowledge, vocab);
    let mut t: Vec<u32> = tags.iter().flat_map(|s| tokenize(s, vocab)).collect();
    let budget = cfg.max_text_tokens.saturating_sub(4);
    let mut overflow = (c.len() + k.len() + t.len()).saturating_sub(budget);
    for part in [&mut k, &mut c, &mut t] {
        let cut = overflow.min(part.len());
        part.truncate(part.len() - cut);
        overflow -= cut;
    }

    let mut token_ids = Vec::with_capacity(c.len() + k.len() + t.len() + 4);
    let mut segment_ids = Vec::with_capacity(token_ids.capacity());
    token_ids.push(CLS);
    token_ids.extend(&c);
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 0);
    token_ids.extend(&k);
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 1);
    token_ids.extend(&t);
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 2);

    let visual_features = kept_objects(objects, cfg.max_objects)
        .into_iter()
        .map(|i| {
            let o = &objects[i];
            let mut row = o.feature.clone();
            row.extend_from_slice(&geometry(o, image_size.0, image_size.1));
            row
        })
        .collect();
    AssembledInput {
        token_ids,
        segment_ids,
        visual_features,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTokens {
    pub token_ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Selects each non-special token with probability `rate`; selected tokens
/// become `[MASK]` 80% of the time, a random word 10%, and stay unchanged
/// 10%. If nothing is selected one maskable token is forced.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    token_ids: &[u32],
    vocab_size: usize,
    rate: f64,
    rng: &mut R,
) -> MaskedTokens {
    let maskable: Vec<usize> = (0..token_ids.len())
        .filter(|&i| !Vocabulary::is_special(token_ids[i]))
        .collect();
    let mut positions: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    if positions.is_empty() && !maskable.is_empty() {
        positions.push(maskable[rng.gen_range(0..maskable.len())]);
    }
    let mut out = token_ids.to_vec();
    let first_word = SPECIALS.len() as u32;
    for &p in &positions {
        let r = rng.gen::<f64>();
        if r < 0.8 {
            out[p] = MASK;
        } else if r < 0.9 && (vocab_size as u32) > first_word {
            out[p] = rng.gen_range(first_word..vocab_size as u32);
        }
    }
    let targets = positions.iter().map(|&p| token_ids[p]).collect();
    MaskedTokens {
        token_ids: out,
        positions,
        targets,
    }
}

/// Draws label types in a fixed ratio. When a drawn type cannot be realized
/// the caller falls back to type 0 and records a debt; a later draw of type
/// 0 is then spent repaying it, which keeps corpus-level ratios on target.
#[derive(Debug, Clone)]
pub struct RatioDrawer {
    dist: WeightedIndex<u32>,
    debt: Vec<u64>,
}

impl RatioDrawer {
    pub fn new(ratio: &[u32]) -> Self {
        Self {
            dist: WeightedIndex::new(ratio).expect("positive ratio"),
            debt: vec![0; ratio.len()],
        }
    }

    /// Returns (type, repaying).
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (usize, bool) {
        let t = self.dist.sample(rng);
        if t == 0 {
            if let Some(owed) = (1..self.debt.len()).find(|&i| self.debt[i] > 0) {
                return (owed, true);
            }
        }
        (t, false)
    }

    pub fn settle(&mut self, wanted: usize, repaying: bool, realized: usize) {
        if wanted == realized {
            if repaying {
                self.debt[wanted] -= 1;
            }
        } else if !repaying {
            self.debt[wanted] += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItmChoice {
    pub label: u8,
    pub caption: String,
    pub tags: Vec<String>,
    pub donor: Option<String>,
}

fn draw_other<R: Rng + ?Sized>(
    own: usize,
    n: usize,
    rng: &mut R,
    accept: impl Fn(usize) -> bool,
) -> Option<usize> {
    if n < 2 {
        return None;
    }
    for _ in 0..64 {
        let j = rng.gen_range(0..n - 1);
        let j = if j >= own { j + 1 } else { j };
        if accept(j) {
            return Some(j);
        }
    }
    let valid: Vec<usize> = (0..n).filter(|&j| j != own && accept(j)).collect();
    (!valid.is_empty()).then(|| valid[rng.gen_range(0..valid.len())])
}

/// Label 0 keeps the record's caption and tags; label 1 borrows a different
/// caption from another record; label 2 borrows different tags.
pub fn assign_itm<R: Rng + ?Sized>(
    index: usize,
    records: &[ImageRecord],
    wanted: usize,
    max_objects: usize,
    rng: &mut R,
) -> ItmChoice {
    let own = &records[index];
    let own_tags = ordered_tags(own, max_objects);
    let keep = ItmChoice {
        label: 0,
        caption: own.caption.clone(),
        tags: own_tags.clone(),
        donor: None,
    };
    match wanted {
        1 => draw_other(index, records.len(), rng, |j| {
            !records[j].caption.trim().eq_ignore_ascii_case(own.caption.trim())
        })
        .map(|j| ItmChoice {
            label: 1,
            caption: records[j].caption.clone(),
            tags: own_tags.clone(),
            donor: Some(records[j].image_id.clone()),
        }),
        2 => draw_other(index, records.len(), rng, |j| {
            ordered_tags(&records[j], max_objects) != own_tags
        })
        .map(|j| ItmChoice {
            label: 2,
            caption: own.caption.clone(),
            tags: ordered_tags(&records[j], max_objects),
            donor: Some(records[j].image_id.clone()),
        }),
        _ => None,
    }
    .unwrap_or(keep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkmChoice {
    pub label: u8,
    pub knowledge: String,
    pub concept: String,
    pub similarity: Option<f32>,
}

/// Type 1 keeps the concept's own knowledge (label 0); type 2 attaches the
/// knowledge of a dissimilar-category concept (label 1); type 3 that of the
/// most similar-category concept among the drawn candidates (label 2).
pub fn assign_ikm<R: Rng + ?Sized>(
    concept: &VisualConcept,
    own_knowledge: &str,
    kb: &[VisualConcept],
    table: &EmbeddingTable,
    sampler: &SamplerConfig,
    wanted: usize,
    rng: &mut R,
) -> Result<IkmChoice, SampleError> {
    match wanted {
        1 => select_type2_knowledge(concept, kb, table, sampler, rng).map(|c| IkmChoice {
            label: 1,
            knowledge: kb[c.index].knowledge.clone(),
            concept: kb[c.index].name.clone(),
            similarity: Some(c.similarity),
        }),
        2 => select_type3_knowledge(concept, kb, table, sampler, rng).map(|c| IkmChoice {
            label: 2,
            knowledge: kb[c.index].knowledge.clone(),
            concept: kb[c.index].name.clone(),
            similarity: Some(c.similarity),
        }),
        _ => Ok(IkmChoice {
            label: 0,
            knowledge: own_knowledge.to_string(),
            concept: concept.name.clone(),
            similarity: None,
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IecOutcome {
    pub label: u8,
    pub record: ImageRecord,
    pub replacement: Option<ReplacementRecord>,
}

/// Type 1 leaves the image untouched (label 0); type 2 swaps the located
/// object's feature for a visually close donor from an unrelated category
/// (label 1).
#[allow(clippy::too_many_arguments)]
pub fn assign_iec<R: Rng + ?Sized>(
    record: &ImageRecord,
    located_index: usize,
    corpus: &[ImageRecord],
    category: &str,
    table: &EmbeddingTable,
    sampler: &SamplerConfig,
    wanted: usize,
    rng: &mut R,
) -> Result<IecOutcome, SampleError> {
    if wanted == 0 {
        return Ok(IecOutcome {
            label: 0,
            record: record.clone(),
            replacement: None,
        });
    }
    let choice =
        select_iec_replacement(record, located_index, corpus, category, table, sampler, rng)?;
    let donor = corpus
        .iter()
        .find(|r| r.image_id == choice.replacement.donor_image_id)
        .expect("donor drawn from corpus");
    Ok(IecOutcome {
        label: 1,
        record: apply_replacement(record, &choice.replacement, donor)?,
        replacement: Some(choice.replacement),
    })
}

/// Knowledge-base lookup by concept name, case-insensitive.
pub fn find_concept<'a>(kb: &'a [VisualConcept], name: &str) -> Option<&'a VisualConcept> {
    kb.iter().find(|c| same_concept(&c.name, name))
}

#[derive(Debug, Clone)]
pub struct CorpusBuild {
    pub manifest: CorpusManifest,
    pub examples: Vec<TrainingExample>,
}

struct ShardOutput {
    examples: Vec<TrainingExample>,
    failures: Vec<String>,
}

struct Drawers {
    itm: RatioDrawer,
    ikm: RatioDrawer,
    iec: RatioDrawer,
}

/// Prepared record: concept located and propagated.
fn prepare(
    record: &ImageRecord,
    kb: &[VisualConcept],
    table: &EmbeddingTable,
    sampler: &SamplerConfig,
) -> Result<(ImageRecord, VisualConcept, String, usize), String> {
    let name = record
        .concept_name
        .as_deref()
        .ok_or_else(|| format!("{}: no concept name", record.image_id))?;
    let concept = find_concept(kb, name)
        .ok_or_else(|| format!("{}: concept `{name}` not in knowledge base", record.image_id))?
        .clone();
    let knowledge = record
        .knowledge
        .clone()
        .unwrap_or_else(|| concept.knowledge.clone());
    let mut rec = record.clone();
    let located = locate_concept(&mut rec, &concept.category, table, sampler)
        .map_err(|e| format!("{}: {e}", record.image_id))?;
    propagate_concept(&mut rec, located.index);
    Ok((rec, concept, knowledge, located.index))
}

#[allow(clippy::too_many_arguments)]
fn assemble_one<R: Rng + ?Sized>(
    index: usize,
    records: &[ImageRecord],
    kb: &[VisualConcept],
    table: &EmbeddingTable,
    cfg: &CorpusConfig,
    vocab: &Vocabulary,
    drawers: &mut Drawers,
    rng: &mut R,
) -> Result<TrainingExample, String> {
    let a = &cfg.assembly;
    let (rec, concept, own_knowledge, located) =
        prepare(&records[index], kb, table, &cfg.sampler)?;

    let (want, repaying) = drawers.itm.draw(rng);
    let itm = assign_itm(index, records, want, a.max_objects, rng);
    drawers.itm.settle(want, repaying, itm.label as usize);
    // ITM compares against the located record's tags
    let tags = if itm.label == 2 {
        itm.tags.clone()
    } else {
        ordered_tags(&rec, a.max_objects)
    };

    let (want, repaying) = drawers.ikm.draw(rng);
    let ikm = match assign_ikm(&concept, &own_knowledge, kb, table, &cfg.sampler, want, rng) {
        Ok(c) => c,
        Err(e) => {
            log::debug!("{}: ikm type {} fell back: {e}", rec.image_id, want + 1);
            assign_ikm(&concept, &own_knowledge, kb, table, &cfg.sampler, 0, rng)
                .expect("type 1 is total")
        }
    };
    drawers.ikm.settle(want, repaying, ikm.label as usize);

    let (want, repaying) = drawers.iec.draw(rng);
    let iec = match assign_iec(&rec, located, records, &concept.category, table, &cfg.sampler, want, rng) {
        Ok(o) => o,
        Err(e) => {
            log::debug!("{}: iec type 2 fell back: {e}", rec.image_id);
            IecOutcome {
                label: 0,
                record: rec.clone(),
                replacement: None,
            }
        }
    };
    drawers.iec.settle(want, repaying, iec.label as usize);

    let input = build_input(
        &itm.caption,
        &ikm.knowledge,
        &tags,
        &iec.record.objects,
        (iec.record.width, iec.record.height),
        vocab,
        a,
    );
    let masked = apply_mlm_mask(&input.token_ids, vocab.len(), a.mlm_rate, rng);
    Ok(TrainingExample {
        token_ids: masked.token_ids,
        segment_ids: input.segment_ids,
        visual_features: input.visual_features,
        mlm_positions: masked.positions,
        mlm_targets: masked.targets,
        itm_label: itm.label,
        ikm_label: ikm.label,
        iec_label: iec.label,
        source_image_id: rec.image_id.clone(),
        provenance: Provenance {
            knowledge_concept: ikm.concept,
            located_object: Some(located),
            replacement: iec.replacement,
            itm_donor: itm.donor,
        },
    })
}

/// Builds the corpus: one example per usable record, sharded with derived
/// seeds (`seed ^ shard_index`). Records that cannot be assembled are listed
/// in the manifest and skipped.
pub fn build_corpus(
    records: &[ImageRecord],
    kb: &[VisualConcept],
    table: &EmbeddingTable,
    cfg: &CorpusConfig,
    vocab: &Vocabulary,
) -> Result<CorpusBuild, String> {
    if records.is_empty() {
        return Err("no records to assemble".into());
    }
    cfg.assembly.validate()?;
    cfg.sampler.validate()?;
    let seed = cfg.assembly.rng_seed;
    let shards: Vec<ShardOutput> = records
        .par_chunks(SHARD_SIZE)
        .enumerate()
        .map(|(shard, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ shard as u64);
            let mut drawers = Drawers {
                itm: RatioDrawer::new(&cfg.assembly.itm_ratio),
                ikm: RatioDrawer::new(&cfg.assembly.ikm_ratio),
                iec: RatioDrawer::new(&cfg.assembly.iec_ratio),
            };
            let mut out = ShardOutput {
                examples: Vec::with_capacity(chunk.len()),
                failures: Vec::new(),
            };
            for k in 0..chunk.len() {
                let index = shard * SHARD_SIZE + k;
                match assemble_one(index, records, kb, table, cfg, vocab, &mut drawers, &mut rng) {
                    Ok(e) => out.examples.push(e),
                    Err(msg) => {
                        log::warn!("skipping record: {msg}");
                        out.failures.push(msg);
                    }
                }
            }
            out
        })
        .collect();

    let mut examples = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for s in shards {
        examples.extend(s.examples);
        failures.extend(s.failures);
    }
    if examples.is_empty() {
        return Err(format!("every record failed: {}", failures.join("; ")));
    }
    let manifest = manifest_for(cfg, vocab, &examples, failures);
    Ok(CorpusBuild { manifest, examples })
}

pub fn label_counts(examples: &[TrainingExample]) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let mut itm = vec![0u64; 3];
    let mut ikm = vec![0u64; 3];
    let mut iec = vec![0u64; 2];
    for e in examples {
        itm[e.itm_label as usize] += 1;
        ikm[e.ikm_label as usize] += 1;
        iec[e.iec_label as usize] += 1;
    }
    (itm, ikm, iec)
}

fn manifest_for(
    cfg: &CorpusConfig,
    vocab: &Vocabulary,
    examples: &[TrainingExample],
    failures: Vec<String>,
) -> CorpusManifest {
    let (itm_counts, ikm_counts, iec_counts) = label_counts(examples);
    let a = &cfg.assembly;
    CorpusManifest {
        format_version: FORMAT_VERSION,
        seed: a.rng_seed,
        config_hash: cfg.hash(),
        itm_ratio: a.itm_ratio.to_vec(),
        ikm_ratio: a.ikm_ratio.to_vec(),
        iec_ratio: a.iec_ratio.to_vec(),
        mlm_rate: a.mlm_rate,
        max_text_tokens: a.max_text_tokens,
        max_objects: a.max_objects,
        visual_width: examples
            .iter()
            .find_map(|e| e.visual_features.first().map(Vec::len))
            .unwrap_or(GEOMETRY_WIDTH),
        example_count: examples.len(),
        itm_counts,
        ikm_counts,
        iec_counts,
        masking: "static: masks drawn once at assembly".into(),
        vocab: vocab.tokens().to_vec(),
        failures,
    }
}

/// Sampler decisions for one record, as dumped by `sample-audit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerAudit {
    pub image_id: String,
    pub concept: Option<String>,
    pub category: Option<String>,
    pub located_object: Option<usize>,
    pub located_tag: Option<String>,
    pub propagated: usize,
    pub type2: Result<(String, f32), String>,
    pub type3: Result<(String, f32), String>,
    pub iec: Result<ReplacementRecord, String>,
}

pub fn audit_record(
    index: usize,
    records: &[ImageRecord],
    kb: &[VisualConcept],
    table: &EmbeddingTable,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> SamplerAudit {
    let image_id = records[index].image_id.clone();
    match prepare(&records[index], kb, table, sampler) {
        Err(msg) => SamplerAudit {
            image_id,
            concept: records[index].concept_name.clone(),
            category: None,
            located_object: None,
            located_tag: None,
            propagated: 0,
            type2: Err(msg.clone()),
            type3: Err(msg.clone()),
            iec: Err(msg),
        },
        Ok((rec, concept, _, located)) => {
            let propagated = rec
                .objects
                .iter()
                .filter(|o| o.concept_override.is_some())
                .count();
            let type2 = select_type2_knowledge(&concept, kb, table, sampler, rng)
                .map(|c| (kb[c.index].name.clone(), c.similarity))
                .map_err(|e| e.to_string());
            let type3 = select_type3_knowledge(&concept, kb, table, sampler, rng)
                .map(|c| (kb[c.index].name.clone(), c.similarity))
                .map_err(|e| e.to_string());
            let iec = select_iec_replacement(&rec, located, records, &concept.category, table, sampler, rng)
                .map(|c| c.replacement)
                .map_err(|e| e.to_string());
            SamplerAudit {
                image_id,
                located_tag: Some(rec.objects[located].tag.clone()),
                concept: Some(concept.name),
                category: Some(concept.category),
                located_object: Some(located),
                propagated,
                type2,
                type3,
                iec,
            }
        }
    }
}
