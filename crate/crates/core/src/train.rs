//! Training loop, zero-shot classification by image-text matching, and
//! metrics reporting.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{build_input, config_hash, ordered_tags, AssemblyConfig, Vocabulary};
use crate::formats::{CorpusManifest, TrainingExample, ZeroShotTask};
use crate::model::checkpoint::{save_checkpoint, CheckpointError, CheckpointMeta};
use crate::model::{
    softmax, train_step, AdamW, Batch, LossBreakdown, Model, ModelConfig, ModelError, ModelParams,
    OptimizerConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("corpus does not match its manifest: {0}")]
    CorpusManifestMismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid run config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub lr: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Overrides the model's dropout rate when set.
    pub dropout: Option<f64>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 2000,
            lr: 1e-4,
            seed: 0,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            metrics_path: None,
            dropout: None,
        }
    }
}

/// Reference pre-training scale, kept for documentation.
pub const REFERENCE_BATCH_SIZE: usize = 720;
pub const REFERENCE_MAX_STEPS: u64 = 1_000_000;

impl TrainRunConfig {
    pub fn validate(&self, corpus_len: usize) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(TrainError::Config("batch_size and max_steps must be positive".into()));
        }
        if self.batch_size > corpus_len {
            return Err(TrainError::Config(format!(
                "batch_size {} exceeds corpus size {corpus_len}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub metrics: Vec<StepMetrics>,
}

/// Checks that the examples are the ones the manifest describes.
pub fn check_manifest(manifest: &CorpusManifest, examples: &[TrainingExample]) -> Result<(), TrainError> {
    let bad = |m: String| Err(TrainError::CorpusManifestMismatch(m));
    if manifest.example_count != examples.len() {
        return bad(format!(
            "manifest lists {} examples, file has {}",
            manifest.example_count,
            examples.len()
        ));
    }
    let (itm, ikm, iec) = crate::assembler::label_counts(examples);
    if itm != manifest.itm_counts || ikm != manifest.ikm_counts || iec != manifest.iec_counts {
        return bad("label counts differ from manifest".into());
    }
    let vocab = manifest.vocab.len();
    for e in examples {
        if e.token_ids.iter().chain(&e.mlm_targets).any(|&t| t as usize >= vocab) {
            return bad(format!("{}: token id outside the manifest vocabulary", e.source_image_id));
        }
        if e.token_ids.len() > manifest.max_text_tokens {
            return bad(format!("{}: text longer than max_text_tokens", e.source_image_id));
        }
        if e.visual_features.iter().any(|r| r.len() != manifest.visual_width) {
            return bad(format!("{}: visual row width differs from manifest", e.source_image_id));
        }
    }
    Ok(())
}

pub fn assembly_from_manifest(m: &CorpusManifest) -> Result<AssemblyConfig, TrainError> {
    let err = |what: &str| TrainError::CorpusManifestMismatch(format!("{what} ratio has wrong arity"));
    Ok(AssemblyConfig {
        mlm_rate: m.mlm_rate,
        itm_ratio: m.itm_ratio.clone().try_into().map_err(|_| err("itm"))?,
        ikm_ratio: m.ikm_ratio.clone().try_into().map_err(|_| err("ikm"))?,
        iec_ratio: m.iec_ratio.clone().try_into().map_err(|_| err("iec"))?,
        max_text_tokens: m.max_text_tokens,
        max_objects: m.max_objects,
        rng_seed: m.seed,
    })
}

/// Default micro model sized for a corpus.
pub fn model_config_for(manifest: &CorpusManifest) -> ModelConfig {
    let mut cfg = ModelConfig::micro(manifest.vocab.len(), manifest.visual_width);
    cfg.max_positions = manifest.max_text_tokens;
    cfg
}

fn write_metrics_line<W: Write>(w: &mut W, m: &StepMetrics) -> Result<(), TrainError> {
    serde_json::to_writer(&mut *w, m).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains from a fixed seed. Parameters are initialised from `seed`, epochs
/// are reshuffled from `seed + 1` and dropout masks drawn from `seed + 2`.
pub fn train(
    manifest: &CorpusManifest,
    examples: &[TrainingExample],
    run: &TrainRunConfig,
    mut model_cfg: ModelConfig,
) -> Result<TrainOutcome, TrainError> {
    check_manifest(manifest, examples)?;
    run.validate(examples.len())?;
    if let Some(d) = run.dropout {
        model_cfg.dropout = d;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(2));
    model_cfg.validate().map_err(ModelError::Config)?;
    let params = ModelParams::<f32>::init(&model_cfg, &mut init_rng);
    let mut model = Model::new(model_cfg.clone(), params)?;
    let mut opt = AdamW::new(
        OptimizerConfig {
            lr: run.lr,
            max_steps: run.max_steps,
            ..Default::default()
        },
        &model.params,
    );
    let mut meta = CheckpointMeta {
        model: model_cfg.clone(),
        assembly: assembly_from_manifest(manifest)?,
        vocab: manifest.vocab.clone(),
        step: 0,
        corpus_hash: manifest.config_hash.clone(),
        run_hash: config_hash(&(run, &model_cfg)),
    };
    let mut log = match &run.metrics_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if let Some(dir) = &run.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut metrics = Vec::with_capacity(run.max_steps as usize);
    for step in 0..run.max_steps {
        let mut picked = Vec::with_capacity(run.batch_size);
        while picked.len() < run.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            picked.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let batch = Batch::<f32>::from_examples(&picked, manifest.visual_width);
        let lr = opt.config.lr_at(step);
        let loss = train_step(&mut model, &mut opt, &batch, &mut dropout_rng)?;
        let row = StepMetrics { step, lr, loss };
        if let Some(w) = log.as_mut() {
            write_metrics_line(w, &row)?;
        }
        metrics.push(row);
        let done = step + 1;
        if let Some(dir) = &run.checkpoint_dir {
            if run.checkpoint_interval > 0 && done % run.checkpoint_interval == 0 && done < run.max_steps {
                meta.step = done;
                save_checkpoint(&dir.join(format!("step{done:07}.ckpt")), &meta, &model.params)?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    meta.step = run.max_steps;
    if let Some(dir) = &run.checkpoint_dir {
        save_checkpoint(&dir.join("final.ckpt"), &meta, &model.params)?;
    }
    Ok(TrainOutcome {
        model,
        meta,
        metrics,
    })
}

/// Loss over the whole corpus with dropout off.
pub fn evaluate_loss(model: &Model<f32>, examples: &[TrainingExample], visual_width: usize) -> Result<LossBreakdown, TrainError> {
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    Ok(model.loss(&Batch::from_examples(&refs, visual_width))?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    /// Probability of a full match, per item and class.
    pub scores: Vec<Vec<f64>>,
    pub accuracy: f64,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores every (item, class) pair by the matching head's probability of
/// label 0 on `[CLS] class name [SEP] class knowledge [SEP] item tags [SEP]
/// item regions`, and predicts the best-scoring class.
pub fn zero_shot_classify(
    model: &Model<f32>,
    task: &ZeroShotTask,
    vocab: &Vocabulary,
    assembly: &AssemblyConfig,
) -> Result<ZeroShotResult, TrainError> {
    task.validate().map_err(TrainError::Config)?;
    let scores = task
        .items
        .par_iter()
        .map(|item| {
            let rec = &item.record;
            let tags = ordered_tags(rec, assembly.max_objects);
            task.classes
                .iter()
                .map(|class| {
                    let input = build_input(
                        &class.name,
                        &class.knowledge,
                        &tags,
                        &rec.objects,
                        (rec.width, rec.height),
                        vocab,
                        assembly,
                    );
                    let ex = TrainingExample {
                        token_ids: input.token_ids,
                        segment_ids: input.segment_ids,
                        visual_features: input.visual_features,
                        mlm_positions: vec![],
                        mlm_targets: vec![],
                        itm_label: 0,
                        ikm_label: 0,
                        iec_label: 0,
                        source_image_id: rec.image_id.clone(),
                        provenance: Default::default(),
                    };
                    let logits = model.forward(&Batch::from_examples(&[&ex], model.config.visual_in))?;
                    Ok(softmax(&logits[0].itm)[0] as f64)
                })
                .collect::<Result<Vec<f64>, ModelError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let predictions: Vec<usize> = scores.iter().map(|s| argmax_first(s)).collect();
    let correct = predictions
        .iter()
        .zip(&task.items)
        .filter(|(p, it)| **p == it.gold)
        .count();
    let accuracy = if task.items.is_empty() {
        0.0
    } else {
        correct as f64 / task.items.len() as f64
    };
    Ok(ZeroShotResult {
        predictions,
        scores,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub steps: usize,
    pub means: LossBreakdown,
    pub finals: LossBreakdown,
    pub text: String,
    /// `step,lr,l_mlm,l_itm,l_ikm,l_iec,total`, one row per step.
    pub csv: String,
}

/// Summary table and plottable curves from a metrics log.
pub fn report(
    metrics: &[StepMetrics],
    manifest: Option<&CorpusManifest>,
    zero_shot: Option<&ZeroShotResult>,
) -> Result<Report, TrainError> {
    let last = metrics
        .last()
        .ok_or_else(|| TrainError::Config("metrics log is empty".into()))?;
    let n = metrics.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| metrics.iter().map(|m| f(&m.loss)).sum::<f64>() / n;
    let means = LossBreakdown::new(
        mean(|l| l.l_mlm),
        mean(|l| l.l_itm),
        mean(|l| l.l_ikm),
        mean(|l| l.l_iec),
    );
    let finals = last.loss;

    let mut text = String::new();
    writeln!(text, "steps: {}", metrics.len()).unwrap();
    writeln!(text, "{:<8} {:>12} {:>12}", "loss", "mean", "final").unwrap();
    for (name, m, f) in [
        ("mlm", means.l_mlm, finals.l_mlm),
        ("itm", means.l_itm, finals.l_itm),
        ("ikm", means.l_ikm, finals.l_ikm),
        ("iec", means.l_iec, finals.l_iec),
        ("total", means.total, finals.total),
    ] {
        writeln!(text, "{name:<8} {m:>12.6} {f:>12.6}").unwrap();
    }
    if let Some(m) = manifest {
        let ratio = |counts: &[u64]| {
            let total: u64 = counts.iter().sum();
            counts
                .iter()
                .map(|&c| format!("{:.3}", c as f64 / total.max(1) as f64))
                .collect::<Vec<_>>()
                .join("/")
        };
        writeln!(text, "corpus {} ({} examples)", m.config_hash, m.example_count).unwrap();
        writeln!(text, "itm labels {}", ratio(&m.itm_counts)).unwrap();
        writeln!(text, "ikm labels {}", ratio(&m.ikm_counts)).unwrap();
        writeln!(text, "iec labels {}", ratio(&m.iec_counts)).unwrap();
    }
    if let Some(z) = zero_shot {
        writeln!(text, "zero-shot accuracy {:.4} over {} items", z.accuracy, z.predictions.len()).unwrap();
    }

    let mut csv = String::from("step,lr,l_mlm,l_itm,l_ikm,l_iec,total\n");
    for m in metrics {
        let l = &m.loss;
        writeln!(csv, "{},{},{},{},{},{},{}", m.step, m.lr, l.l_mlm, l.l_itm, l.l_ikm, l.l_iec, l.total).unwrap();
    }
    Ok(Report {
        steps: metrics.len(),
        means,
        finals,
        text,
        csv,
    })
}
