//! Deterministic synthetic worlds: an embedding table, a knowledge base and
//! detected images whose statistics exercise every sampler path.
//!
//! Concepts fall into groups. Each group owns a direction in embedding space,
//! so category phrases and detector tags of one group are similar to each
//! other and nearly orthogonal to every other group.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::formats::{
    BBox, DetectedObject, EmbeddingTable, ImageRecord, VisualConcept, ZeroShotClass, ZeroShotItem,
    ZeroShotTask, FORMAT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub groups: usize,
    pub concepts_per_group: usize,
    pub records: usize,
    pub tags_per_group: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub caption_words: usize,
    pub knowledge_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 8,
            concepts_per_group: 8,
            records: 1000,
            tags_per_group: 3,
            feature_dim: 16,
            embed_dim: 24,
            min_objects: 3,
            max_objects: 14,
            caption_words: 4,
            knowledge_words: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.groups < 2 || self.groups > self.embed_dim {
            return Err("need 2 <= groups <= embed_dim".into());
        }
        if self.concepts_per_group == 0 || self.tags_per_group == 0 || self.records == 0 {
            return Err("concepts_per_group, tags_per_group and records must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err("need 1 <= min_objects <= max_objects".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub table: EmbeddingTable,
    pub kb: Vec<VisualConcept>,
    pub records: Vec<ImageRecord>,
    /// Detector tags of each concept group.
    pub group_tags: Vec<Vec<String>>,
    /// Group index of each knowledge-base concept.
    pub concept_groups: Vec<usize>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "so", "na", "vi", "pe", "zu", "ba", "do", "fi", "gu", "ha", "je",
];

/// Unique pronounceable token for `n` (at least two syllables).
pub fn pseudo_word(n: usize) -> String {
    let mut n = n + SYLLABLES.len();
    let mut parts = Vec::new();
    while n > 0 {
        parts.push(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    parts.concat()
}

struct Words {
    next: usize,
}

impl Words {
    fn take(&mut self) -> String {
        let w = pseudo_word(self.next);
        self.next += 1;
        w
    }
}

struct Group {
    adjectives: Vec<String>,
    noun: String,
    tags: Vec<String>,
}

struct Lexicon {
    groups: Vec<Group>,
    fillers: Vec<String>,
    prototypes: Vec<(String, Vec<f32>)>,
}

fn group_vector(g: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..dim)
        .map(|i| (if i == g { 1.0 } else { 0.0 }) + rng.gen_range(-0.04f32..0.04))
        .collect()
}

fn lexicon(cfg: &SynthConfig, words: &mut Words, table: &mut EmbeddingTable, rng: &mut ChaCha8Rng) -> Lexicon {
    let mut groups = Vec::with_capacity(cfg.groups);
    let mut prototypes = Vec::new();
    for g in 0..cfg.groups {
        let adjectives: Vec<String> = (0..cfg.concepts_per_group).map(|_| words.take()).collect();
        for a in &adjectives {
            table.insert(a.clone(), &group_vector(g, cfg.embed_dim, rng));
        }
        let noun = words.take();
        table.insert(noun.clone(), &group_vector(g, cfg.embed_dim, rng));
        let tags: Vec<String> = (0..cfg.tags_per_group).map(|_| words.take()).collect();
        for t in &tags {
            table.insert(t.clone(), &group_vector(g, cfg.embed_dim, rng));
            let proto = (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            prototypes.push((t.clone(), proto));
        }
        groups.push(Group {
            adjectives,
            noun,
            tags,
        });
    }
    let fillers = (0..24).map(|_| words.take()).collect();
    Lexicon {
        groups,
        fillers,
        prototypes,
    }
}

fn prototype<'a>(lex: &'a Lexicon, tag: &str) -> &'a [f32] {
    &lex.prototypes.iter().find(|(t, _)| t == tag).expect("known tag").1
}

fn filler_text(lex: &Lexicon, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..n).map(|_| lex.fillers.choose(rng).expect("fillers").clone()).collect()
}

fn make_object(lex: &Lexicon, tag: &str, area_rank: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> DetectedObject {
    let (w_img, h_img) = (640u32, 480u32);
    let side = |limit: u32, rng: &mut ChaCha8Rng| {
        let base = (limit as f64 * area_rank).max(8.0) as u32;
        (base + rng.gen_range(0..8)).min(limit)
    };
    let w = side(w_img, rng);
    let h = side(h_img, rng);
    let x = rng.gen_range(0..=w_img - w);
    let y = rng.gen_range(0..=h_img - h);
    let feature = prototype(lex, tag)
        .iter()
        .map(|&p| p + rng.gen_range(-0.1f32..0.1))
        .collect::<Vec<_>>();
    debug_assert_eq!(feature.len(), cfg.feature_dim);
    DetectedObject::new(tag, BBox { x, y, w, h }, rng.gen_range(0.5f32..1.0), feature)
}

fn make_record(
    id: String,
    concept: &VisualConcept,
    group: usize,
    caption: String,
    lex: &Lexicon,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> ImageRecord {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let main_slot = rng.gen_range(0..n);
    let main_tag = lex.groups[group].tags.choose(rng).expect("tags").clone();
    let objects = (0..n)
        .map(|i| {
            let tag = if i == main_slot {
                main_tag.clone()
            } else {
                let other = (group + rng.gen_range(1..cfg.groups)) % cfg.groups;
                lex.groups[other].tags.choose(rng).expect("tags").clone()
            };
            make_object(lex, &tag, rng.gen_range(0.05..0.9), cfg, rng)
        })
        .collect();
    ImageRecord {
        image_id: id,
        width: 640,
        height: 480,
        caption,
        objects,
        concept_name: Some(concept.name.clone()),
        knowledge: None,
    }
}

fn concepts(cfg: &SynthConfig, lex: &Lexicon, words: &mut Words, rng: &mut ChaCha8Rng) -> Vec<(VisualConcept, usize)> {
    let mut out = Vec::with_capacity(cfg.groups * cfg.concepts_per_group);
    for (g, group) in lex.groups.iter().enumerate() {
        for adjective in &group.adjectives {
            let name = words.take();
            let category = format!("{adjective} {}", group.noun);
            let mut text = vec![name.clone(), "is".into(), "a".into(), category.clone()];
            text.extend(filler_text(lex, cfg.knowledge_words.saturating_sub(4), rng));
            out.push((
                VisualConcept {
                    name,
                    category,
                    knowledge: text.join(" "),
                },
                g,
            ));
        }
    }
    out
}

/// A world with `cfg.records` images spread round-robin over the concepts.
pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld, String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = Words { next: 0 };
    let mut table = EmbeddingTable::new(cfg.embed_dim);
    let lex = lexicon(cfg, &mut words, &mut table, &mut rng);
    let concepts = concepts(cfg, &lex, &mut words, &mut rng);
    let records = (0..cfg.records)
        .map(|i| {
            let (concept, g) = &concepts[i % concepts.len()];
            let mut caption = vec![concept.name.clone()];
            caption.extend(filler_text(&lex, cfg.caption_words.saturating_sub(1), &mut rng));
            make_record(format!("img{i:06}"), concept, *g, caption.join(" "), &lex, cfg, &mut rng)
        })
        .collect();
    Ok(SynthWorld {
        table,
        group_tags: lex.groups.iter().map(|g| g.tags.clone()).collect(),
        concept_groups: concepts.iter().map(|(_, g)| *g).collect(),
        kb: concepts.into_iter().map(|(c, _)| c).collect(),
        records,
    })
}

/// A small classification world: one concept per class, each item captioned
/// with its class name, main objects drawn from class-specific prototypes.
/// The detector here knows the classes, so a main object is tagged with its
/// class name.
///
/// Each item image appears `copies` times among the world's records (image
/// ids suffixed `-cN`), so a corpus built from them pairs the same image with
/// several independently drawn matching labels. Task items are the distinct
/// images.
pub fn zero_shot_world(
    classes: usize,
    items_per_class: usize,
    copies: usize,
    seed: u64,
) -> Result<(SynthWorld, ZeroShotTask), String> {
    if copies == 0 {
        return Err("copies must be positive".into());
    }
    let cfg = SynthConfig {
        groups: classes,
        concepts_per_group: 1,
        records: classes * items_per_class,
        tags_per_group: 1,
        feature_dim: 8,
        embed_dim: classes.max(8),
        min_objects: 2,
        max_objects: 3,
        caption_words: 1,
        knowledge_words: 6,
        seed,
    };
    let mut world = generate(&cfg)?;
    for (concept, &g) in world.kb.iter().zip(&world.concept_groups) {
        let tag = &world.group_tags[g][0];
        let vector = world.table.get(tag).expect("tag embedded").to_vec();
        world.table.insert(concept.name.clone(), &vector);
        for obj in world.records.iter_mut().flat_map(|r| r.objects.iter_mut()) {
            if &obj.tag == tag {
                obj.tag = concept.name.clone();
            }
        }
        world.group_tags[g] = vec![concept.name.clone()];
    }
    let items = std::mem::take(&mut world.records);
    let task = ZeroShotTask {
        format_version: FORMAT_VERSION,
        classes: world
            .kb
            .iter()
            .map(|c| ZeroShotClass {
                name: c.name.clone(),
                knowledge: c.knowledge.clone(),
            })
            .collect(),
        items: items
            .iter()
            .enumerate()
            .map(|(i, r)| ZeroShotItem {
                gold: i % classes,
                record: r.clone(),
            })
            .collect(),
    };
    world.records = (0..copies)
        .flat_map(|c| {
            items.iter().map(move |r| ImageRecord {
                image_id: format!("{}-c{c}", r.image_id),
                ..r.clone()
            })
        })
        .collect();
    Ok((world, task))
}
