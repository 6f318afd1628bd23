use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Mat, Real};

/// Segment ids: caption, knowledge, tags, visual rows.
pub const SEGMENTS: usize = 4;
pub const VISUAL_SEGMENT: usize = 3;

pub const ITM_CLASSES: usize = 3;
pub const IKM_CLASSES: usize = 3;
pub const IEC_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Width of a visual row: detector feature plus box geometry.
    pub visual_in: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Default micro configuration for a given vocabulary and visual width.
    pub fn micro(vocab_size: usize, visual_in: usize) -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            vocab_size,
            visual_in,
            max_positions: 72,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.vocab_size == 0 || self.visual_in == 0 || self.max_positions == 0 || self.ffn == 0 {
            return Err("vocab_size, visual_in, max_positions and ffn must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub w: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros(input, output),
            b: vec![T::zero(); output],
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.w);
        for i in 0..y.rows {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.b) {
                *v += *b;
            }
        }
        y
    }

    /// Single-row forward.
    pub fn forward_row(&self, x: &[T]) -> Vec<T> {
        let mut y = self.b.clone();
        for (k, &a) in x.iter().enumerate() {
            for (o, &w) in y.iter_mut().zip(self.w.row(k)) {
                *o += a * w;
            }
        }
        y
    }

    /// Accumulates weight and bias gradients into `grad` and returns dx.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        x.matmul_tn_into(dy, &mut grad.w);
        for i in 0..dy.rows {
            for (g, d) in grad.b.iter_mut().zip(dy.row(i)) {
                *g += *d;
            }
        }
        dy.matmul_nt(&self.w)
    }

    /// Single-row backward; returns dx.
    pub fn backward_row(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        for (k, &a) in x.iter().enumerate() {
            for (g, &d) in grad.w.row_mut(k).iter_mut().zip(dy) {
                *g += a * d;
            }
        }
        for (g, &d) in grad.b.iter_mut().zip(dy) {
            *g += d;
        }
        (0..x.len())
            .map(|k| super::tensor::dot(self.w.row(k), dy))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: vec![T::zero(); width],
            beta: vec![T::zero(); width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub attn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
}

/// Every learnable tensor of the encoder and its four heads. Gradients and
/// optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub token_emb: Mat<T>,
    pub position_emb: Mat<T>,
    pub segment_emb: Mat<T>,
    pub visual_proj: Linear<T>,
    pub emb_norm: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm_head: Linear<T>,
    pub itm_head: Linear<T>,
    pub ikm_head: Linear<T>,
    pub iec_head: Linear<T>,
}

/// Name, shape and decay flag of one parameter block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether weight decay applies (false for biases and norm parameters).
    pub decay: bool,
}

macro_rules! push_mat {
    ($out:ident, $name:expr, $m:expr, $($r:tt)*) => {
        $out.push(($name.to_string(), vec![$m.rows, $m.cols], true, & $($r)* $m.data))
    };
}

macro_rules! push_vec {
    ($out:ident, $name:expr, $v:expr, $($r:tt)*) => {
        $out.push(($name.to_string(), vec![$v.len()], false, & $($r)* $v))
    };
}

macro_rules! block_list {
    ($p:expr, $($r:tt)*) => {{
        let mut out = Vec::new();
        push_mat!(out, "token_emb", $p.token_emb, $($r)*);
        push_mat!(out, "position_emb", $p.position_emb, $($r)*);
        push_mat!(out, "segment_emb", $p.segment_emb, $($r)*);
        push_mat!(out, "visual_proj.w", $p.visual_proj.w, $($r)*);
        push_vec!(out, "visual_proj.b", $p.visual_proj.b, $($r)*);
        push_vec!(out, "emb_norm.gamma", $p.emb_norm.gamma, $($r)*);
        push_vec!(out, "emb_norm.beta", $p.emb_norm.beta, $($r)*);
        for (i, l) in (& $($r)* $p.layers).into_iter().enumerate() {
            push_mat!(out, format!("layer{i}.query.w"), l.query.w, $($r)*);
            push_vec!(out, format!("layer{i}.query.b"), l.query.b, $($r)*);
            push_mat!(out, format!("layer{i}.key.w"), l.key.w, $($r)*);
            push_vec!(out, format!("layer{i}.key.b"), l.key.b, $($r)*);
            push_mat!(out, format!("layer{i}.value.w"), l.value.w, $($r)*);
            push_vec!(out, format!("layer{i}.value.b"), l.value.b, $($r)*);
            push_mat!(out, format!("layer{i}.attn_out.w"), l.attn_out.w, $($r)*);
            push_vec!(out, format!("layer{i}.attn_out.b"), l.attn_out.b, $($r)*);
            push_vec!(out, format!("layer{i}.attn_norm.gamma"), l.attn_norm.gamma, $($r)*);
            push_vec!(out, format!("layer{i}.attn_norm.beta"), l.attn_norm.beta, $($r)*);
            push_mat!(out, format!("layer{i}.ffn_in.w"), l.ffn_in.w, $($r)*);
            push_vec!(out, format!("layer{i}.ffn_in.b"), l.ffn_in.b, $($r)*);
            push_mat!(out, format!("layer{i}.ffn_out.w"), l.ffn_out.w, $($r)*);
            push_vec!(out, format!("layer{i}.ffn_out.b"), l.ffn_out.b, $($r)*);
            push_vec!(out, format!("layer{i}.ffn_norm.gamma"), l.ffn_norm.gamma, $($r)*);
            push_vec!(out, format!("layer{i}.ffn_norm.beta"), l.ffn_norm.beta, $($r)*);
        }
        push_mat!(out, "mlm_head.w", $p.mlm_head.w, $($r)*);
        push_vec!(out, "mlm_head.b", $p.mlm_head.b, $($r)*);
        push_mat!(out, "itm_head.w", $p.itm_head.w, $($r)*);
        push_vec!(out, "itm_head.b", $p.itm_head.b, $($r)*);
        push_mat!(out, "ikm_head.w", $p.ikm_head.w, $($r)*);
        push_vec!(out, "ikm_head.b", $p.ikm_head.b, $($r)*);
        push_mat!(out, "iec_head.w", $p.iec_head.w, $($r)*);
        push_vec!(out, "iec_head.b", $p.iec_head.b, $($r)*);
        out
    }};
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        Self {
            token_emb: Mat::zeros(cfg.vocab_size, h),
            position_emb: Mat::zeros(cfg.max_positions, h),
            segment_emb: Mat::zeros(SEGMENTS, h),
            visual_proj: Linear::zeros(cfg.visual_in, h),
            emb_norm: LayerNorm::zeros(h),
            layers: (0..cfg.layers)
                .map(|_| EncoderLayer {
                    query: Linear::zeros(h, h),
                    key: Linear::zeros(h, h),
                    value: Linear::zeros(h, h),
                    attn_out: Linear::zeros(h, h),
                    attn_norm: LayerNorm::zeros(h),
                    ffn_in: Linear::zeros(h, cfg.ffn),
                    ffn_out: Linear::zeros(cfg.ffn, h),
                    ffn_norm: LayerNorm::zeros(h),
                })
                .collect(),
            mlm_head: Linear::zeros(h, cfg.vocab_size),
            itm_head: Linear::zeros(h, super::params::ITM_CLASSES),
            ikm_head: Linear::zeros(h, IKM_CLASSES),
            iec_head: Linear::zeros(h, IEC_CLASSES),
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero, norm gains one.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let infos = p.block_infos();
        let emb_bound = 1.0 / (cfg.hidden as f64).sqrt();
        for (info, data) in infos.iter().zip(p.blocks_mut()) {
            let gain = info.name.ends_with(".gamma");
            if gain {
                data.iter_mut().for_each(|x| *x = T::one());
            } else if info.decay {
                let bound = if info.name.ends_with("_emb") {
                    emb_bound
                } else {
                    1.0 / (info.shape[0] as f64).sqrt()
                };
                for x in data.iter_mut() {
                    *x = T::c(rng.gen_range(-bound..bound));
                }
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    pub fn block_infos(&self) -> Vec<BlockInfo> {
        block_list!(self,)
            .into_iter()
            .map(|(name, shape, decay, _)| BlockInfo { name, shape, decay })
            .collect()
    }

    pub fn blocks(&self) -> Vec<&[T]> {
        block_list!(self,)
            .into_iter()
            .map(|(_, _, _, d)| d.as_slice())
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        block_list!(self, mut)
            .into_iter()
            .map(|(_, _, _, d)| d.as_mut_slice())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cfg_like = ModelParams::<U> {
            token_emb: cast_mat(&self.token_emb),
            position_emb: cast_mat(&self.position_emb),
            segment_emb: cast_mat(&self.segment_emb),
            visual_proj: cast_linear(&self.visual_proj),
            emb_norm: cast_norm(&self.emb_norm),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    query: cast_linear(&l.query),
                    key: cast_linear(&l.key),
                    value: cast_linear(&l.value),
                    attn_out: cast_linear(&l.attn_out),
                    attn_norm: cast_norm(&l.attn_norm),
                    ffn_in: cast_linear(&l.ffn_in),
                    ffn_out: cast_linear(&l.ffn_out),
                    ffn_norm: cast_norm(&l.ffn_norm),
                })
                .collect(),
            mlm_head: cast_linear(&self.mlm_head),
            itm_head: cast_linear(&self.itm_head),
            ikm_head: cast_linear(&self.ikm_head),
            iec_head: cast_linear(&self.iec_head),
        };
        cfg_like
    }
}

fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::c(x.as_f64())).collect()
}

fn cast_mat<T: Real, U: Real>(m: &Mat<T>) -> Mat<U> {
    Mat::from_vec(m.rows, m.cols, cast_vec(&m.data))
}

fn cast_linear<T: Real, U: Real>(l: &Linear<T>) -> Linear<U> {
    Linear {
        w: cast_mat(&l.w),
        b: cast_vec(&l.b),
    }
}

fn cast_norm<T: Real, U: Real>(n: &LayerNorm<T>) -> LayerNorm<U> {
    LayerNorm {
        gamma: cast_vec(&n.gamma),
        beta: cast_vec(&n.beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blocks_line_up_with_infos() {
        let cfg = ModelConfig {
            layers: 2,
            ..ModelConfig::micro(30, 14)
        };
        let p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let infos = p.block_infos();
        let blocks = p.blocks();
        assert_eq!(infos.len(), 7 + 2 * 16 + 8);
        for (i, b) in infos.iter().zip(&blocks) {
            assert_eq!(i.shape.iter().product::<usize>(), b.len(), "{}", i.name);
        }
        assert!(p.emb_norm.gamma.iter().all(|&g| g == 1.0));
        assert!(p.mlm_head.b.iter().all(|&b| b == 0.0));
        let bound = 1.0 / 64f32.sqrt();
        assert!(p.layers[0].query.w.data.iter().all(|x| x.abs() <= bound));
        assert!(p.is_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::micro(10, 8);
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cast_round_trip() {
        let cfg = ModelConfig::micro(10, 8);
        let p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
    }
}
