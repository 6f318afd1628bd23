//! Small embedded oracle suite run by the `selftest` subcommand.

use std::io::Cursor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembler::{build_corpus, CorpusConfig, Vocabulary};
use crate::concept::{extract_category, extract_concept_name};
use crate::embed::phrase_similarity;
use crate::formats::{parse_conllu, write_corpus};
use crate::model::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::model::{Batch, Model, ModelConfig, ModelParams};
use crate::negatives::{select_type3_knowledge, SamplerConfig};
use crate::synth::{generate, SynthConfig};

const PARSES: &str = include_str!("../tests/fixtures/extraction.conllu");
const GOLD: &str = include_str!("../tests/fixtures/extraction_gold.tsv");

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<String, String>) -> Check {
    match result {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn extraction() -> Result<String, String> {
    let parses = parse_conllu(Cursor::new(PARSES)).map_err(|e| e.to_string())?;
    let mut matched = 0;
    let mut total = 0;
    for line in GOLD.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, kind, phrase] = cols[..] else {
            return Err(format!("bad gold line `{line}`"));
        };
        let parse = parses
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| format!("no parse for {id}"))?;
        let got = match kind {
            "concept" => extract_concept_name(parse),
            _ => extract_category(parse),
        }
        .map_err(|e| e.to_string())?;
        total += 1;
        if got.text == phrase {
            matched += 1;
        }
    }
    if matched == total && total > 0 {
        Ok(format!("{matched}/{total} phrases"))
    } else {
        Err(format!("{matched}/{total} phrases"))
    }
}

fn analytic_losses() -> Result<String, String> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::micro(16, 4)
    };
    let model = Model::new(cfg.clone(), ModelParams::<f64>::zeros(&cfg)).map_err(|e| e.to_string())?;
    let ex = crate::formats::TrainingExample {
        token_ids: vec![2, 7, 3, 8, 3, 9, 3],
        segment_ids: vec![0, 0, 0, 1, 1, 2, 2],
        visual_features: vec![vec![0.1, 0.2, 0.3, 0.4]],
        mlm_positions: vec![1],
        mlm_targets: vec![7],
        itm_label: 0,
        ikm_label: 2,
        iec_label: 1,
        source_image_id: "s".into(),
        provenance: Default::default(),
    };
    let l = model.loss(&Batch::from_examples(&[&ex], 4)).map_err(|e| e.to_string())?;
    let ok = (l.l_ikm - 3f64.ln()).abs() < 1e-6
        && (l.l_iec - 2f64.ln()).abs() < 1e-6
        && l.total == l.l_mlm + l.l_itm + l.l_ikm + l.l_iec;
    let detail = format!("l_ikm {:.6} l_iec {:.6}", l.l_ikm, l.l_iec);
    ok.then_some(detail.clone()).ok_or(detail)
}

fn gradients() -> Result<String, String> {
    let r = run_gradcheck(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let detail = format!("max relative error {:.3e}", r.max_relative_error);
    (r.max_relative_error < 1e-4).then_some(detail.clone()).ok_or(detail)
}

fn type3_oracle() -> Result<String, String> {
    let world = generate(&SynthConfig {
        records: 10,
        ..Default::default()
    })?;
    let sampler = SamplerConfig {
        ikm_candidate_count: 12,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (t, target) in world.kb.iter().enumerate().take(20) {
        let choice = select_type3_knowledge(target, &world.kb, &world.table, &sampler, &mut rng)
            .map_err(|e| e.to_string())?;
        let mut best: Option<(usize, f32)> = None;
        for &i in &choice.drawn {
            let s = phrase_similarity(&target.category, &world.kb[i].category, &world.table)
                .map_err(|e| e.to_string())?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if best.map(|b| b.0) != Some(choice.index) {
            return Err(format!("concept {t}: sampler chose {}, oracle {:?}", choice.index, best));
        }
    }
    Ok("20 draws agree".into())
}

fn corpus_determinism() -> Result<String, String> {
    let world = generate(&SynthConfig {
        records: 60,
        ..Default::default()
    })?;
    let vocab = Vocabulary::from_sources(&world.records, &world.kb);
    let mut cfg = CorpusConfig::default();
    cfg.assembly.rng_seed = 3;
    let bytes = || -> Result<Vec<u8>, String> {
        let b = build_corpus(&world.records, &world.kb, &world.table, &cfg, &vocab)?;
        let mut out = Vec::new();
        write_corpus(&mut out, &b.manifest, &b.examples).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let (a, b) = (bytes()?, bytes()?);
    (a == b)
        .then(|| format!("{} bytes identical", a.len()))
        .ok_or_else(|| "rebuilds differ".into())
}

pub fn run() -> Vec<Check> {
    vec![
        check("extraction fixtures", extraction()),
        check("analytic losses", analytic_losses()),
        check("gradient check", gradients()),
        check("type-3 argmax oracle", type3_oracle()),
        check("corpus determinism", corpus_determinism()),
    ]
}
