#![allow(dead_code)]

//! Shared helpers for integration tests: random instance strategies for every
//! file format and brute-force oracles for the samplers.

use std::collections::BTreeMap;
use std::io::Cursor;

use proptest::collection::vec;
use proptest::prelude::*;

use geovlp::formats::{
    self, BBox, CorpusManifest, DetectedObject, EmbeddingTable, ImageDetections, ImageRecord,
    PageText, ParseToken, ParsedSentence, Provenance, TrainingExample, VisualConcept, ZeroShotClass,
    ZeroShotItem, ZeroShotTask, FORMAT_VERSION,
};
use geovlp::negatives::ReplacementRecord;

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

fn phrase() -> impl Strategy<Value = String> {
    vec(word(), 1..5).prop_map(|w| w.join(" "))
}

fn float() -> impl Strategy<Value = f32> {
    -100.0f32..100.0
}

pub fn parsed_sentence() -> impl Strategy<Value = ParsedSentence> {
    (1usize..12)
        .prop_flat_map(|n| {
            let heads: Vec<BoxedStrategy<usize>> = (1..=n)
                .map(|i| if i == 1 { Just(0).boxed() } else { (1..i).boxed() })
                .collect();
            (
                "s[0-9]{1,4}",
                vec(
                    (word(), prop_oneof![Just("NOUN"), Just("ADJ"), Just("DET"), Just("VERB")], "[a-z]{2,5}(:[a-z]{2,4})?"),
                    n,
                ),
                heads,
            )
        })
        .prop_map(|(id, cols, heads)| ParsedSentence {
            id,
            tokens: cols
                .into_iter()
                .zip(heads)
                .enumerate()
                .map(|(i, ((surface, upos, deprel), head))| ParseToken {
                    index: i + 1,
                    surface,
                    upos: upos.to_string(),
                    head,
                    deprel: if head == 0 { "root".into() } else { deprel },
                })
                .collect(),
        })
}

fn detected_object(dim: usize) -> impl Strategy<Value = DetectedObject> {
    (word(), 0u32..500, 0u32..500, 1u32..300, 1u32..300, 0.0f32..1.0, vec(float(), dim))
        .prop_map(|(tag, x, y, w, h, score, feature)| DetectedObject::new(tag, BBox { x, y, w, h }, score, feature))
}

pub fn image_record(dim: usize) -> impl Strategy<Value = ImageRecord> {
    (
        "img[0-9]{1,6}",
        1u32..2000,
        1u32..2000,
        phrase(),
        vec(detected_object(dim), 0..6),
        proptest::option::of(phrase()),
        proptest::option::of(phrase()),
        proptest::option::of(word()),
    )
        .prop_map(|(image_id, width, height, caption, mut objects, concept_name, knowledge, over)| {
            if let Some(o) = objects.first_mut() {
                o.concept_override = over;
            }
            ImageRecord {
                image_id,
                width,
                height,
                caption,
                objects,
                concept_name,
                knowledge,
            }
        })
}

pub fn records() -> impl Strategy<Value = Vec<ImageRecord>> {
    (1usize..6).prop_flat_map(|dim| vec(image_record(dim), 0..6))
}

pub fn detections() -> impl Strategy<Value = BTreeMap<String, ImageDetections>> {
    (1usize..6).prop_flat_map(|dim| {
        proptest::collection::btree_map(
            "img[0-9]{1,6}",
            (1u32..2000, 1u32..2000, vec(detected_object(dim), 0..6))
                .prop_map(|(width, height, objects)| ImageDetections { width, height, objects }),
            0..6,
        )
    })
}

pub fn embedding_table() -> impl Strategy<Value = EmbeddingTable> {
    (1usize..8).prop_flat_map(|dim| {
        proptest::collection::btree_map("[a-z][a-z0-9_]{0,8}", vec(float(), dim), 1..12).prop_map(
            move |words| {
                let mut t = EmbeddingTable::new(dim);
                for (w, v) in words {
                    t.insert(w, &v);
                }
                t
            },
        )
    })
}

pub fn knowledge_base() -> impl Strategy<Value = Vec<VisualConcept>> {
    vec(
        (phrase(), phrase(), phrase()).prop_map(|(name, category, knowledge)| VisualConcept {
            name,
            category,
            knowledge,
        }),
        0..8,
    )
}

pub fn pages() -> impl Strategy<Value = Vec<PageText>> {
    vec(
        (phrase(), proptest::option::of("s[0-9]{1,4}"), phrase()).prop_map(|(concept_name, sentence_id, text)| {
            PageText {
                concept_name,
                sentence_id,
                text,
            }
        }),
        0..6,
    )
}

fn replacement() -> impl Strategy<Value = ReplacementRecord> {
    (0usize..50, "img[0-9]{1,4}", 0usize..50, word(), 0.0f32..10.0, -1.0f32..0.3).prop_map(
        |(target_object_index, donor_image_id, donor_object_index, donor_tag, visual_distance, category_similarity)| {
            ReplacementRecord {
                target_object_index,
                donor_image_id,
                donor_object_index,
                donor_tag,
                visual_distance,
                category_similarity,
            }
        },
    )
}

fn training_example(width: usize) -> impl Strategy<Value = TrainingExample> {
    (1usize..20).prop_flat_map(move |n| {
        (
            vec(0u32..500, n),
            vec(0u8..3, n),
            vec(vec(float(), width), 0..4),
            vec((0..n, 0u32..500), 0..3),
            (0u8..3, 0u8..3, 0u8..2),
            "img[0-9]{1,4}",
            (
                phrase(),
                proptest::option::of(0usize..10),
                proptest::option::of(replacement()),
                proptest::option::of("img[0-9]{1,4}"),
            ),
        )
            .prop_map(|(token_ids, segment_ids, visual_features, mlm, labels, source_image_id, prov)| {
                let (mlm_positions, mlm_targets) = mlm.into_iter().unzip();
                TrainingExample {
                    token_ids,
                    segment_ids,
                    visual_features,
                    mlm_positions,
                    mlm_targets,
                    itm_label: labels.0,
                    ikm_label: labels.1,
                    iec_label: labels.2,
                    source_image_id,
                    provenance: Provenance {
                        knowledge_concept: prov.0,
                        located_object: prov.1,
                        replacement: prov.2,
                        itm_donor: prov.3,
                    },
                }
            })
    })
}

pub fn corpus() -> impl Strategy<Value = (CorpusManifest, Vec<TrainingExample>)> {
    (1usize..10).prop_flat_map(|width| {
        (
            vec(training_example(width), 0..5),
            any::<u64>(),
            "[0-9a-f]{16}",
            vec(word(), 0..10),
            vec("[a-z ]{1,20}", 0..3),
        )
            .prop_map(move |(examples, seed, config_hash, vocab, failures)| {
                let manifest = CorpusManifest {
                    format_version: FORMAT_VERSION,
                    seed,
                    config_hash,
                    itm_ratio: vec![2, 1, 1],
                    ikm_ratio: vec![2, 1, 1],
                    iec_ratio: vec![1, 1],
                    mlm_rate: 0.15,
                    max_text_tokens: 70,
                    max_objects: 50,
                    visual_width: width,
                    example_count: examples.len(),
                    itm_counts: vec![1, 2, 3],
                    ikm_counts: vec![3, 2, 1],
                    iec_counts: vec![4, 5],
                    masking: "static".into(),
                    vocab,
                    failures,
                };
                (manifest, examples)
            })
    })
}

pub fn zero_shot_task() -> impl Strategy<Value = ZeroShotTask> {
    (2usize..6).prop_flat_map(|classes| {
        (
            vec((phrase(), phrase()), classes),
            vec((0..classes, image_record(3)), 0..5),
        )
            .prop_map(|(cls, items)| ZeroShotTask {
                format_version: FORMAT_VERSION,
                classes: cls
                    .into_iter()
                    .map(|(name, knowledge)| ZeroShotClass { name, knowledge })
                    .collect(),
                items: items
                    .into_iter()
                    .map(|(gold, record)| ZeroShotItem { gold, record })
                    .collect(),
            })
    })
}

// ---------------------------------------------------------------------------
// Round trips: value -> bytes -> value -> bytes
// ---------------------------------------------------------------------------

pub fn roundtrip<T: PartialEq + std::fmt::Debug>(
    value: &T,
    write: impl Fn(&mut Vec<u8>, &T),
    read: impl Fn(&[u8]) -> T,
) -> Result<(), String> {
    let mut first = Vec::new();
    write(&mut first, value);
    let back = read(&first);
    if &back != value {
        return Err(format!("value changed:\n{value:?}\n{back:?}"));
    }
    let mut second = Vec::new();
    write(&mut second, &back);
    if first != second {
        return Err("bytes changed on rewrite".into());
    }
    Ok(())
}

pub fn parses_roundtrip(s: &[ParsedSentence]) -> Result<(), String> {
    roundtrip(
        &s.to_vec(),
        |w, v| formats::write_parses(w, v).unwrap(),
        |b| formats::parse_conllu(Cursor::new(b)).unwrap(),
    )
}

pub fn records_roundtrip(r: &[ImageRecord]) -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    roundtrip(
        &r.to_vec(),
        |w, v| formats::write_records(w, v).unwrap(),
        |b| {
            std::fs::write(&path, b).unwrap();
            formats::read_records(&path).unwrap()
        },
    )
}

pub fn detections_roundtrip(d: &BTreeMap<String, ImageDetections>) -> Result<(), String> {
    roundtrip(
        d,
        |w, v| formats::write_detections(w, v).unwrap(),
        |b| formats::parse_detections(Cursor::new(b)).unwrap(),
    )
}

pub fn table_roundtrip(t: &EmbeddingTable) -> Result<(), String> {
    let mut first = Vec::new();
    formats::write_embedding_table(&mut first, t).unwrap();
    let (back, warnings) = formats::parse_embedding_table(Cursor::new(&first)).unwrap();
    if !warnings.is_empty() {
        return Err(format!("unexpected warnings {warnings:?}"));
    }
    let a: Vec<_> = t.iter().collect();
    let b: Vec<_> = back.iter().collect();
    if a != b || t.dimension() != back.dimension() {
        return Err("table changed".into());
    }
    let mut second = Vec::new();
    formats::write_embedding_table(&mut second, &back).unwrap();
    (first == second).then_some(()).ok_or_else(|| "bytes changed on rewrite".into())
}

pub fn kb_roundtrip(kb: &[VisualConcept]) -> Result<(), String> {
    roundtrip(
        &kb.to_vec(),
        |w, v| formats::write_knowledge_base(w, v).unwrap(),
        |b| formats::parse_knowledge_base(Cursor::new(b)).unwrap(),
    )
}

pub fn pages_roundtrip(p: &[PageText]) -> Result<(), String> {
    roundtrip(
        &p.to_vec(),
        |w, v| formats::write_pages(w, v).unwrap(),
        |b| formats::parse_pages(Cursor::new(b)).unwrap(),
    )
}

pub fn corpus_roundtrip(c: &(CorpusManifest, Vec<TrainingExample>)) -> Result<(), String> {
    roundtrip(
        c,
        |w, (m, e)| formats::write_corpus(w, m, e).unwrap(),
        |b| formats::parse_corpus(Cursor::new(b)).unwrap(),
    )
}

pub fn task_roundtrip(t: &ZeroShotTask) -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task.json");
    roundtrip(
        t,
        |w, v| formats::write_zero_shot_task(w, v).unwrap(),
        |b| {
            std::fs::write(&path, b).unwrap();
            formats::read_zero_shot_task(&path).unwrap()
        },
    )
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Mean of the known word vectors of a phrase, in f64.
pub fn pooled(phrase: &str, table: &EmbeddingTable) -> Vec<f64> {
    let mut sum = vec![0.0; table.dimension()];
    let mut n = 0.0;
    for w in phrase.split(|c: char| c.is_whitespace() || c == '-').filter(|w| !w.is_empty()) {
        if let Some(v) = table.get(&w.to_lowercase()) {
            n += 1.0;
            for (s, x) in sum.iter_mut().zip(v) {
                *s += *x as f64;
            }
        }
    }
    if n > 0.0 {
        sum.iter_mut().for_each(|s| *s /= n);
    }
    sum
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn similarity(a: &str, b: &str, table: &EmbeddingTable) -> f64 {
    cos(&pooled(a, table), &pooled(b, table))
}

pub fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// First index with the strictly greatest score.
pub fn first_max(scores: impl IntoIterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|b| b.0)
}

/// Object indices of the `k` largest boxes, ties to the lower index.
pub fn largest(objects: &[DetectedObject], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..objects.len()).collect();
    for i in 1..idx.len() {
        // insertion sort keeps the comparison explicit
        let mut j = i;
        while j > 0 && objects[idx[j]].bbox.area() > objects[idx[j - 1]].bbox.area() {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx.truncate(k);
    idx
}

// ---------------------------------------------------------------------------
// Sampler-oracle comparisons over seeded draws
// ---------------------------------------------------------------------------

use geovlp::negatives::{
    locate_concept, select_iec_replacement, select_type2_knowledge, select_type3_knowledge, SamplerConfig,
};
use geovlp::synth::{generate, SynthConfig, SynthWorld};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn oracle_world() -> SynthWorld {
    generate(&SynthConfig {
        records: 200,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

/// Number of draws on which `select_type3_knowledge` disagrees with an
/// exhaustive scan of the candidates it drew.
pub fn type3_mismatches(world: &SynthWorld, draws: u64) -> Vec<String> {
    let cfg = SamplerConfig {
        ikm_candidate_count: 16,
        ..Default::default()
    };
    let mut bad = Vec::new();
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(d);
        let target = &world.kb[d as usize % world.kb.len()];
        let c = select_type3_knowledge(target, &world.kb, &world.table, &cfg, &mut rng).unwrap();
        let mut seen = c.drawn.clone();
        seen.sort_unstable();
        seen.dedup();
        let valid_draw = seen.len() == cfg.ikm_candidate_count
            && c.drawn.iter().all(|&i| world.kb[i].name != target.name);
        let want = first_max(c.drawn.iter().map(|&i| (i, similarity(&target.category, &world.kb[i].category, &world.table))));
        if !valid_draw || want != Some(c.index) {
            bad.push(format!("draw {d}: got {}, oracle {want:?}", c.index));
        }
    }
    bad
}

/// Type 2 draws compared with a rescan of the pool: the retained set is every
/// other concept below tau, and the pick is a uniform index into it.
pub fn type2_mismatches(world: &SynthWorld, draws: u64) -> Vec<String> {
    let cfg = SamplerConfig::default();
    let mut bad = Vec::new();
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(d);
        let mut twin = rng.clone();
        let target = &world.kb[d as usize % world.kb.len()];
        let retained: Vec<usize> = (0..world.kb.len())
            .filter(|&i| world.kb[i].name != target.name)
            .filter(|&i| similarity(&target.category, &world.kb[i].category, &world.table) < cfg.tau as f64)
            .collect();
        let c = select_type2_knowledge(target, &world.kb, &world.table, &cfg, &mut rng).unwrap();
        let want = retained[twin.gen_range(0..retained.len())];
        if c.index != want || c.retained != retained.len() {
            bad.push(format!("draw {d}: got {} of {}, oracle {want} of {}", c.index, c.retained, retained.len()));
        }
    }
    bad
}

pub fn locate_mismatches(world: &SynthWorld, draws: usize) -> Vec<String> {
    let cfg = SamplerConfig::default();
    let mut bad = Vec::new();
    for d in 0..draws {
        let mut rec = world.records[d % world.records.len()].clone();
        let name = rec.concept_name.clone().unwrap();
        let concept = world.kb.iter().find(|c| c.name == name).unwrap();
        let want = first_max(
            largest(&rec.objects, cfg.top_k_objects)
                .into_iter()
                .map(|i| (i, similarity(&rec.objects[i].tag, &concept.category, &world.table))),
        );
        let got = locate_concept(&mut rec, &concept.category, &world.table, &cfg).unwrap();
        if Some(got.index) != want || rec.objects[got.index].concept_override.as_deref() != Some(name.as_str()) {
            bad.push(format!("record {d}: got {}, oracle {want:?}", got.index));
        }
    }
    bad
}

/// IEC donors compared with a scan of every object in the sampled images.
pub fn iec_mismatches(world: &SynthWorld, draws: u64) -> Vec<String> {
    let cfg = SamplerConfig::default();
    let mut bad = Vec::new();
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(d);
        let mut rec = world.records[d as usize % world.records.len()].clone();
        let name = rec.concept_name.clone().unwrap();
        let concept = world.kb.iter().find(|c| c.name == name).unwrap();
        let located = locate_concept(&mut rec, &concept.category, &world.table, &cfg).unwrap().index;
        let c = select_iec_replacement(&rec, located, &world.records, &concept.category, &world.table, &cfg, &mut rng)
            .unwrap();
        let target = &rec.objects[located].feature;
        let mut best: Option<((usize, usize), f64)> = None;
        for &img in &c.sampled_images {
            if world.records[img].image_id == rec.image_id {
                bad.push(format!("draw {d}: sampled the source image"));
            }
            for (k, o) in world.records[img].objects.iter().enumerate() {
                if similarity(&o.tag, &concept.category, &world.table) >= cfg.tau as f64 {
                    continue;
                }
                let dist = euclid(target, &o.feature);
                if best.is_none_or(|(_, b)| dist < b) {
                    best = Some(((img, k), dist));
                }
            }
        }
        let r = &c.replacement;
        let got = world.records.iter().position(|x| x.image_id == r.donor_image_id).map(|i| (i, r.donor_object_index));
        if got != best.map(|b| b.0) || c.sampled_images.len() != cfg.iec_sample_images {
            bad.push(format!("draw {d}: got {got:?}, oracle {:?}", best.map(|b| b.0)));
        }
    }
    bad
}
