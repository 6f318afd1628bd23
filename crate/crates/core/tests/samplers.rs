mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use geovlp::negatives::{select_type2_knowledge, SamplerConfig};

#[test]
fn type3_matches_exhaustive_scan() {
    let bad = common::type3_mismatches(&common::oracle_world(), 100);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn type2_matches_rescan() {
    let bad = common::type2_mismatches(&common::oracle_world(), 100);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn locate_matches_top_k_scan() {
    let bad = common::locate_mismatches(&common::oracle_world(), 100);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn iec_matches_exhaustive_scan() {
    let bad = common::iec_mismatches(&common::oracle_world(), 100);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn type2_is_uniform_over_retained_set() {
    let world = common::oracle_world();
    let cfg = SamplerConfig::default();
    let target = &world.kb[0];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let first = select_type2_knowledge(target, &world.kb, &world.table, &cfg, &mut rng).unwrap();
    let k = first.retained;
    assert!(k > 10, "retained set too small for the test: {k}");
    let per_bin = 200;
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..k * per_bin {
        let c = select_type2_knowledge(target, &world.kb, &world.table, &cfg, &mut rng).unwrap();
        *counts.entry(c.index).or_insert(0u64) += 1;
    }
    assert_eq!(counts.len(), k, "some retained concept was never drawn");
    let expected = per_bin as f64;
    let chi2: f64 = counts.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2:.2} over {k} bins, p = {p:.2e}");
}

#[test]
fn type2_never_returns_similar_categories() {
    let world = common::oracle_world();
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for target in &world.kb {
        let c = select_type2_knowledge(target, &world.kb, &world.table, &cfg, &mut rng).unwrap();
        let s = common::similarity(&target.category, &world.kb[c.index].category, &world.table);
        assert!(s < 0.3, "{} -> {}: {s}", target.name, world.kb[c.index].name);
    }
}
