//! Central finite-difference check of the hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Batch, Model, ModelError};
use super::params::{ModelConfig, ModelParams, IEC_CLASSES, IKM_CLASSES, ITM_CLASSES};
use crate::formats::TrainingExample;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub visual_in: usize,
    pub seq_len: usize,
    pub objects: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            vocab_size: 12,
            visual_in: 5,
            seq_len: 6,
            objects: 3,
            batch_size: 2,
            epsilon: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockError>,
    pub max_relative_error: f64,
    pub parameters_checked: usize,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Random model and batch for a check. Every parameter, including norm
/// gains and biases, is perturbed away from its structured initial value.
pub fn random_setup(cfg: &GradcheckConfig) -> Result<(Model<f64>, Batch<f64>), ModelError> {
    let model_cfg = ModelConfig {
        hidden: cfg.hidden,
        layers: cfg.layers,
        heads: cfg.heads,
        ffn: cfg.ffn,
        vocab_size: cfg.vocab_size,
        visual_in: cfg.visual_in,
        max_positions: cfg.seq_len,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    model_cfg.validate().map_err(ModelError::Config)?;
    if cfg.seq_len < 2 || cfg.vocab_size < 6 {
        return Err(ModelError::Config("seq_len >= 2 and vocab_size >= 6 required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::<f64>::init(&model_cfg, &mut rng);
    for block in params.blocks_mut() {
        for x in block.iter_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    let examples: Vec<TrainingExample> = (0..cfg.batch_size)
        .map(|b| {
            let len = if b == 0 { cfg.seq_len } else { rng.gen_range(2..=cfg.seq_len) };
            let n_obj = if b == 0 { cfg.objects } else { rng.gen_range(0..=cfg.objects) };
            let token_ids: Vec<u32> = (0..len)
                .map(|i| if i == 0 { 2 } else { rng.gen_range(1..cfg.vocab_size as u32) })
                .collect();
            let segment_ids = (0..len).map(|i| (i * 3 / len) as u8).collect();
            let mut mlm_positions: Vec<usize> = (1..len).filter(|_| rng.gen_bool(0.4)).collect();
            if mlm_positions.is_empty() {
                mlm_positions.push(1);
            }
            let mlm_targets = mlm_positions
                .iter()
                .map(|_| rng.gen_range(5..cfg.vocab_size as u32))
                .collect();
            TrainingExample {
                token_ids,
                segment_ids,
                visual_features: (0..n_obj)
                    .map(|_| (0..cfg.visual_in).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                    .collect(),
                mlm_positions,
                mlm_targets,
                itm_label: rng.gen_range(0..ITM_CLASSES as u8),
                ikm_label: rng.gen_range(0..IKM_CLASSES as u8),
                iec_label: rng.gen_range(0..IEC_CLASSES as u8),
                source_image_id: format!("g{b}"),
                provenance: Default::default(),
            }
        })
        .collect();
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let batch = Batch::from_examples(&refs, cfg.visual_in);
    Ok((Model::new(model_cfg, params)?, batch))
}

/// Compares every analytic gradient entry with a central difference.
pub fn check_gradients(
    model: &Model<f64>,
    batch: &Batch<f64>,
    epsilon: f64,
) -> Result<GradcheckReport, ModelError> {
    let (_, grad) = model.backward(batch)?;
    let infos = model.params.block_infos();
    let grads = grad.blocks();
    let mut probe = model.clone();
    let mut blocks = Vec::with_capacity(infos.len());
    let mut checked = 0;
    for (bi, info) in infos.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..grads[bi].len() {
            let orig = model.params.blocks()[bi][i];
            probe.params.blocks_mut()[bi][i] = orig + epsilon;
            let plus = probe.loss(batch)?.total;
            probe.params.blocks_mut()[bi][i] = orig - epsilon;
            let minus = probe.loss(batch)?.total;
            probe.params.blocks_mut()[bi][i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads[bi][i];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            max_abs = max_abs.max((analytic - numeric).abs());
            checked += 1;
        }
        blocks.push(BlockError {
            name: info.name.clone(),
            max_relative_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_relative_error = blocks.iter().map(|b| b.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        blocks,
        max_relative_error,
        parameters_checked: checked,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, ModelError> {
    let (model, batch) = random_setup(cfg)?;
    check_gradients(&model, &batch, cfg.epsilon)
}
