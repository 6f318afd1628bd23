//! Post-norm transformer encoder over `[text tokens ; visual rows]` with
//! masked-token, image-text, image-knowledge and image-edit heads.
//!
//! Gradients are computed by hand in reverse mode. Each example is run over
//! its own unpadded length, which makes padding invisible to every logit.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{
    LayerNorm, ModelConfig, ModelParams, EncoderLayer, IEC_CLASSES, IKM_CLASSES, ITM_CLASSES,
    SEGMENTS, VISUAL_SEGMENT,
};
use super::tensor::{dot, Mat, Real};
use crate::formats::TrainingExample;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
}

fn shape(msg: String) -> ModelError {
    ModelError::ShapeMismatch(msg)
}

/// Padded batch. Valid positions of each example form a prefix of its row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub batch_size: usize,
    pub text_len: usize,
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub text_mask: Vec<bool>,
    pub visual_len: usize,
    pub visual_width: usize,
    pub visual: Vec<T>,
    pub visual_mask: Vec<bool>,
    pub mlm_positions: Vec<Vec<usize>>,
    pub mlm_targets: Vec<Vec<u32>>,
    pub itm_labels: Vec<Option<u8>>,
    pub ikm_labels: Vec<Option<u8>>,
    pub iec_labels: Vec<Option<u8>>,
}

impl<T: Real> Batch<T> {
    pub fn from_examples(examples: &[&TrainingExample], visual_width: usize) -> Self {
        let b = examples.len();
        let text_len = examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0);
        let visual_len = examples
            .iter()
            .map(|e| e.visual_features.len())
            .max()
            .unwrap_or(0);
        let mut batch = Batch {
            batch_size: b,
            text_len,
            token_ids: vec![0; b * text_len],
            segment_ids: vec![0; b * text_len],
            text_mask: vec![false; b * text_len],
            visual_len,
            visual_width,
            visual: vec![T::zero(); b * visual_len * visual_width],
            visual_mask: vec![false; b * visual_len],
            mlm_positions: Vec::with_capacity(b),
            mlm_targets: Vec::with_capacity(b),
            itm_labels: Vec::with_capacity(b),
            ikm_labels: Vec::with_capacity(b),
            iec_labels: Vec::with_capacity(b),
        };
        for (i, e) in examples.iter().enumerate() {
            for (j, (&t, &s)) in e.token_ids.iter().zip(&e.segment_ids).enumerate() {
                batch.token_ids[i * text_len + j] = t;
                batch.segment_ids[i * text_len + j] = s;
                batch.text_mask[i * text_len + j] = true;
            }
            for (j, row) in e.visual_features.iter().enumerate() {
                let base = (i * visual_len + j) * visual_width;
                for (k, &x) in row.iter().take(visual_width).enumerate() {
                    batch.visual[base + k] = T::c(x as f64);
                }
                batch.visual_mask[i * visual_len + j] = true;
            }
            batch.mlm_positions.push(e.mlm_positions.clone());
            batch.mlm_targets.push(e.mlm_targets.clone());
            batch.itm_labels.push(Some(e.itm_label));
            batch.ikm_labels.push(Some(e.ikm_label));
            batch.iec_labels.push(Some(e.iec_label));
        }
        batch
    }

    fn valid_prefix(mask: &[bool]) -> Option<usize> {
        let n = mask.iter().take_while(|&&m| m).count();
        mask[n..].iter().all(|&m| !m).then_some(n)
    }

    fn view(&self, b: usize, cfg: &ModelConfig) -> Result<ExampleView<'_, T>, ModelError> {
        let tl = self.text_len;
        let mask = &self.text_mask[b * tl..(b + 1) * tl];
        let n_text = Self::valid_prefix(mask)
            .ok_or_else(|| shape(format!("example {b}: text mask is not a prefix")))?;
        let vmask = &self.visual_mask[b * self.visual_len..(b + 1) * self.visual_len];
        let n_vis = Self::valid_prefix(vmask)
            .ok_or_else(|| shape(format!("example {b}: visual mask is not a prefix")))?;
        if n_text == 0 {
            return Err(shape(format!("example {b} has no text tokens")));
        }
        if n_vis > 0 && self.visual_width != cfg.visual_in {
            return Err(shape(format!(
                "visual width {} but model expects {}",
                self.visual_width, cfg.visual_in
            )));
        }
        if n_text > cfg.max_positions {
            return Err(shape(format!(
                "example {b}: {n_text} tokens exceed {} positions",
                cfg.max_positions
            )));
        }
        let tokens = &self.token_ids[b * tl..b * tl + n_text];
        let segments = &self.segment_ids[b * tl..b * tl + n_text];
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(shape(format!("example {b}: token id {t} outside vocabulary")));
        }
        if segments.iter().any(|&s| s as usize >= VISUAL_SEGMENT) {
            return Err(shape(format!("example {b}: bad text segment id")));
        }
        let positions = &self.mlm_positions[b];
        let targets = &self.mlm_targets[b];
        if positions.len() != targets.len() {
            return Err(shape(format!("example {b}: mlm positions/targets differ")));
        }
        if positions.iter().any(|&p| p >= n_text) || targets.iter().any(|&t| t as usize >= cfg.vocab_size)
        {
            return Err(shape(format!("example {b}: mlm index out of range")));
        }
        let check = |l: Option<u8>, n: usize, what: &str| match l {
            Some(v) if v as usize >= n => Err(shape(format!("example {b}: {what} label {v}"))),
            _ => Ok(()),
        };
        check(self.itm_labels[b], ITM_CLASSES, "itm")?;
        check(self.ikm_labels[b], IKM_CLASSES, "ikm")?;
        check(self.iec_labels[b], IEC_CLASSES, "iec")?;
        let base = b * self.visual_len * self.visual_width;
        let visual = Mat::from_vec(
            n_vis,
            self.visual_width,
            self.visual[base..base + n_vis * self.visual_width].to_vec(),
        );
        Ok(ExampleView {
            tokens,
            segments,
            visual,
            mlm_positions: positions,
            mlm_targets: targets,
        })
    }
}

struct ExampleView<'a, T> {
    tokens: &'a [u32],
    segments: &'a [u8],
    visual: Mat<T>,
    mlm_positions: &'a [usize],
    mlm_targets: &'a [u32],
}

/// Logits of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits<T> {
    /// One row per masked position, in position order.
    pub mlm: Vec<Vec<T>>,
    pub itm: Vec<T>,
    pub ikm: Vec<T>,
    pub iec: Vec<T>,
}

/// Mean negative log-likelihood per objective and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mlm: f64,
    pub l_itm: f64,
    pub l_ikm: f64,
    pub l_iec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_mlm: f64, l_itm: f64, l_ikm: f64, l_iec: f64) -> Self {
        Self {
            l_mlm,
            l_itm,
            l_ikm,
            l_iec,
            total: l_mlm + l_itm + l_ikm + l_iec,
        }
    }
}

struct NormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

struct LayerCache<T> {
    input: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    context: Mat<T>,
    attn_drop: Option<Mat<T>>,
    norm1: NormCache<T>,
    h1: Mat<T>,
    f1: Mat<T>,
    g: Mat<T>,
    ffn_drop: Option<Mat<T>>,
    norm2: NormCache<T>,
}

struct ExampleCache<T> {
    n_text: usize,
    emb_norm: NormCache<T>,
    emb_drop: Option<Mat<T>>,
    layers: Vec<LayerCache<T>>,
    out: Mat<T>,
}

fn layer_norm<T: Real>(x: &Mat<T>, p: &LayerNorm<T>, eps: f64) -> (Mat<T>, NormCache<T>) {
    let n = T::c(x.cols as f64);
    let eps = T::c(eps);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..x.cols {
            let h = (row[j] - mean) * is;
            xhat.data[i * x.cols + j] = h;
            y.data[i * x.cols + j] = h * p.gamma[j] + p.beta[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward<T: Real>(
    dy: &Mat<T>,
    cache: &NormCache<T>,
    p: &LayerNorm<T>,
    grad: &mut LayerNorm<T>,
) -> Mat<T> {
    let cols = dy.cols;
    let n = T::c(cols as f64);
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dxhat = vec![T::zero(); cols];
    for i in 0..dy.rows {
        let d = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..cols {
            grad.gamma[j] += d[j] * xh[j];
            grad.beta[j] += d[j];
            dxhat[j] = d[j] * p.gamma[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dot(&dxhat, xh) / n;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

fn dropout_mask<T: Real>(rows: usize, cols: usize, rate: f64, rng: &mut dyn RngCore) -> Mat<T> {
    let keep = T::c(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Mat::from_vec(rows, cols, data)
}

fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Probabilities from logits.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Cross-entropy of `label` and its gradient with respect to the logits.
fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    let mut grad: Vec<T> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[label] -= T::one();
    (lse - logits[label], grad)
}

type Dropout<'r> = Option<(f64, &'r mut dyn RngCore)>;

/// Encoder plus heads over one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let expected = ModelParams::<T>::zeros(&config).block_infos();
        if expected != params.block_infos() {
            return Err(shape("parameter shapes do not match config".into()));
        }
        Ok(Self { config, params })
    }

    fn encode(
        &self,
        ex: &ExampleView<'_, T>,
        mut dropout: Dropout<'_>,
    ) -> ExampleCache<T> {
        let p = &self.params;
        let cfg = &self.config;
        let h = cfg.hidden;
        let n_text = ex.tokens.len();
        let n = n_text + ex.visual.rows;
        let mut x0 = Mat::zeros(n, h);
        for i in 0..n_text {
            let tok = p.token_emb.row(ex.tokens[i] as usize);
            let pos = p.position_emb.row(i);
            let seg = p.segment_emb.row(ex.segments[i] as usize);
            for (j, o) in x0.row_mut(i).iter_mut().enumerate() {
                *o = tok[j] + pos[j] + seg[j];
            }
        }
        if ex.visual.rows > 0 {
            let proj = p.visual_proj.forward(&ex.visual);
            let seg = p.segment_emb.row(VISUAL_SEGMENT);
            for r in 0..ex.visual.rows {
                for (j, o) in x0.row_mut(n_text + r).iter_mut().enumerate() {
                    *o = proj.at(r, j) + seg[j];
                }
            }
        }
        let (mut x, emb_norm) = layer_norm(&x0, &p.emb_norm, cfg.ln_eps);
        let emb_drop = dropout.as_mut().map(|(rate, rng)| {
            let m = dropout_mask(n, h, *rate, *rng);
            x.hadamard_assign(&m);
            m
        });
        let mut layers = Vec::with_capacity(p.layers.len());
        for layer in &p.layers {
            let (out, cache) = self.layer_forward(layer, x, &mut dropout);
            layers.push(cache);
            x = out;
        }
        ExampleCache {
            n_text,
            emb_norm,
            emb_drop,
            layers,
            out: x,
        }
    }

    fn layer_forward(
        &self,
        layer: &EncoderLayer<T>,
        x: Mat<T>,
        dropout: &mut Dropout<'_>,
    ) -> (Mat<T>, LayerCache<T>) {
        let cfg = &self.config;
        let n = x.rows;
        let dh = cfg.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let q = layer.query.forward(&x);
        let k = layer.key.forward(&x);
        let v = layer.value.forward(&x);
        let mut context = Mat::zeros(n, cfg.hidden);
        let mut probs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let cols = head * dh..(head + 1) * dh;
            let mut pm = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let row = pm.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(row);
            }
            for i in 0..n {
                let ctx = &mut context.data[i * cfg.hidden + head * dh..i * cfg.hidden + (head + 1) * dh];
                for j in 0..n {
                    let w = pm.at(i, j);
                    for (c, &vv) in ctx.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *c += w * vv;
                    }
                }
            }
            probs.push(pm);
        }
        let mut o = layer.attn_out.forward(&context);
        let attn_drop = dropout.as_mut().map(|(rate, rng)| {
            let m = dropout_mask(n, cfg.hidden, *rate, *rng);
            o.hadamard_assign(&m);
            m
        });
        o.add_assign(&x);
        let (h1, norm1) = layer_norm(&o, &layer.attn_norm, cfg.ln_eps);
        let f1 = layer.ffn_in.forward(&h1);
        let g = Mat::from_vec(f1.rows, f1.cols, f1.data.iter().map(|&z| gelu(z)).collect());
        let mut f2 = layer.ffn_out.forward(&g);
        let ffn_drop = dropout.as_mut().map(|(rate, rng)| {
            let m = dropout_mask(n, cfg.hidden, *rate, *rng);
            f2.hadamard_assign(&m);
            m
        });
        f2.add_assign(&h1);
        let (out, norm2) = layer_norm(&f2, &layer.ffn_norm, cfg.ln_eps);
        (
            out,
            LayerCache {
                input: x,
                q,
                k,
                v,
                probs,
                context,
                attn_drop,
                norm1,
                h1,
                f1,
                g,
                ffn_drop,
                norm2,
            },
        )
    }

    fn layer_backward(
        &self,
        layer: &EncoderLayer<T>,
        c: &LayerCache<T>,
        dout: &Mat<T>,
        grad: &mut EncoderLayer<T>,
    ) -> Mat<T> {
        let cfg = &self.config;
        let n = dout.rows;
        let dh = cfg.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());

        let dr2 = layer_norm_backward(dout, &c.norm2, &layer.ffn_norm, &mut grad.ffn_norm);
        let mut df2 = dr2.clone();
        if let Some(m) = &c.ffn_drop {
            df2.hadamard_assign(m);
        }
        let mut dg = layer.ffn_out.backward(&c.g, &df2, &mut grad.ffn_out);
        for (d, &z) in dg.data.iter_mut().zip(&c.f1.data) {
            *d *= gelu_grad(z);
        }
        let mut dh1 = layer.ffn_in.backward(&c.h1, &dg, &mut grad.ffn_in);
        dh1.add_assign(&dr2);

        let dr1 = layer_norm_backward(&dh1, &c.norm1, &layer.attn_norm, &mut grad.attn_norm);
        let mut do_ = dr1.clone();
        if let Some(m) = &c.attn_drop {
            do_.hadamard_assign(m);
        }
        let dcontext = layer.attn_out.backward(&c.context, &do_, &mut grad.attn_out);

        let mut dq = Mat::zeros(n, cfg.hidden);
        let mut dk = Mat::zeros(n, cfg.hidden);
        let mut dv = Mat::zeros(n, cfg.hidden);
        let mut dp = vec![T::zero(); n];
        for head in 0..cfg.heads {
            let off = head * dh;
            let pm = &c.probs[head];
            for i in 0..n {
                let dci = &dcontext.row(i)[off..off + dh];
                for (j, d) in dp.iter_mut().enumerate() {
                    *d = dot(dci, &c.v.row(j)[off..off + dh]);
                }
                for j in 0..n {
                    let w = pm.at(i, j);
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for (a, &b) in dvj.iter_mut().zip(dci) {
                        *a += w * b;
                    }
                }
                let inner = (0..n).map(|j| dp[j] * pm.at(i, j)).sum::<T>();
                for j in 0..n {
                    let ds = pm.at(i, j) * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &c.k.row(j)[off..off + dh];
                    let qi = &c.q.row(i)[off..off + dh];
                    for d in 0..dh {
                        dq.data[i * cfg.hidden + off + d] += ds * kj[d];
                        dk.data[j * cfg.hidden + off + d] += ds * qi[d];
                    }
                }
            }
        }
        let mut dx = dr1;
        dx.add_assign(&layer.query.backward(&c.input, &dq, &mut grad.query));
        dx.add_assign(&layer.key.backward(&c.input, &dk, &mut grad.key));
        dx.add_assign(&layer.value.backward(&c.input, &dv, &mut grad.value));
        dx
    }

    fn heads(&self, cache: &ExampleCache<T>, ex: &ExampleView<'_, T>) -> HeadLogits<T> {
        let p = &self.params;
        let cls = cache.out.row(0);
        HeadLogits {
            mlm: ex
                .mlm_positions
                .iter()
                .map(|&pos| p.mlm_head.forward_row(cache.out.row(pos)))
                .collect(),
            itm: p.itm_head.forward_row(cls),
            ikm: p.ikm_head.forward_row(cls),
            iec: p.iec_head.forward_row(cls),
        }
    }

    /// Logits for every example in the batch.
    pub fn forward(&self, batch: &Batch<T>) -> Result<Vec<HeadLogits<T>>, ModelError> {
        (0..batch.batch_size)
            .map(|b| {
                let ex = batch.view(b, &self.config)?;
                let cache = self.encode(&ex, None);
                Ok(self.heads(&cache, &ex))
            })
            .collect()
    }

    pub fn loss(&self, batch: &Batch<T>) -> Result<LossBreakdown, ModelError> {
        self.run(batch, None, false).map(|(l, _)| l)
    }

    /// Loss and exact gradients of the total loss, dropout off.
    pub fn backward(&self, batch: &Batch<T>) -> Result<(LossBreakdown, ModelParams<T>), ModelError> {
        self.run(batch, None, true)
            .map(|(l, g)| (l, g.expect("gradients requested")))
    }

    /// As [`Model::backward`] with dropout masks drawn from `rng` at the
    /// configured rate.
    pub fn backward_train(
        &self,
        batch: &Batch<T>,
        rng: &mut dyn RngCore,
    ) -> Result<(LossBreakdown, ModelParams<T>), ModelError> {
        let rate = self.config.dropout;
        let dropout = (rate > 0.0).then_some((rate, rng));
        self.run(batch, dropout, true)
            .map(|(l, g)| (l, g.expect("gradients requested")))
    }

    fn run(
        &self,
        batch: &Batch<T>,
        mut dropout: Dropout<'_>,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<ModelParams<T>>), ModelError> {
        let views = (0..batch.batch_size)
            .map(|b| batch.view(b, &self.config))
            .collect::<Result<Vec<_>, _>>()?;
        let count = |labels: &[Option<u8>]| labels.iter().filter(|l| l.is_some()).count();
        let n_mlm: usize = views.iter().map(|v| v.mlm_positions.len()).sum();
        let (n_itm, n_ikm, n_iec) = (
            count(&batch.itm_labels),
            count(&batch.ikm_labels),
            count(&batch.iec_labels),
        );
        let inv = |n: usize| if n == 0 { T::zero() } else { T::one() / T::c(n as f64) };
        let (w_mlm, w_itm, w_ikm, w_iec) = (inv(n_mlm), inv(n_itm), inv(n_ikm), inv(n_iec));

        let mut sums = [T::zero(); 4];
        let mut grad = want_grad.then(|| ModelParams::zeros(&self.config));
        for (b, ex) in views.iter().enumerate() {
            let cache = self.encode(ex, dropout.as_mut().map(|(r, g)| (*r, &mut **g as &mut dyn RngCore)));
            let logits = self.heads(&cache, ex);
            let mut d_mlm = Vec::with_capacity(logits.mlm.len());
            for (row, &target) in logits.mlm.iter().zip(ex.mlm_targets) {
                let (l, mut g) = cross_entropy(row, target as usize);
                sums[0] += l;
                g.iter_mut().for_each(|x| *x *= w_mlm);
                d_mlm.push(g);
            }
            let mut cls_term = |logits: &[T], label: Option<u8>, slot: usize, w: T| {
                label.map(|y| {
                    let (l, mut g) = cross_entropy(logits, y as usize);
                    sums[slot] += l;
                    g.iter_mut().for_each(|x| *x *= w);
                    g
                })
            };
            let d_itm = cls_term(&logits.itm, batch.itm_labels[b], 1, w_itm);
            let d_ikm = cls_term(&logits.ikm, batch.ikm_labels[b], 2, w_ikm);
            let d_iec = cls_term(&logits.iec, batch.iec_labels[b], 3, w_iec);
            if let Some(grad) = grad.as_mut() {
                self.backward_example(ex, &cache, &d_mlm, [d_itm, d_ikm, d_iec], grad);
            }
        }
        let loss = LossBreakdown::new(
            (sums[0] * w_mlm).as_f64(),
            (sums[1] * w_itm).as_f64(),
            (sums[2] * w_ikm).as_f64(),
            (sums[3] * w_iec).as_f64(),
        );
        Ok((loss, grad))
    }

    fn backward_example(
        &self,
        ex: &ExampleView<'_, T>,
        cache: &ExampleCache<T>,
        d_mlm: &[Vec<T>],
        d_cls: [Option<Vec<T>>; 3],
        grad: &mut ModelParams<T>,
    ) {
        let p = &self.params;
        let mut dout = Mat::zeros(cache.out.rows, cache.out.cols);
        for (&pos, d) in ex.mlm_positions.iter().zip(d_mlm) {
            let dx = p.mlm_head.backward_row(cache.out.row(pos), d, &mut grad.mlm_head);
            for (o, v) in dout.row_mut(pos).iter_mut().zip(dx) {
                *o += v;
            }
        }
        let cls = cache.out.row(0);
        let [d_itm, d_ikm, d_iec] = d_cls;
        let heads = [
            (d_itm, &p.itm_head, &mut grad.itm_head),
            (d_ikm, &p.ikm_head, &mut grad.ikm_head),
            (d_iec, &p.iec_head, &mut grad.iec_head),
        ];
        for (d, head, g) in heads {
            if let Some(d) = d {
                let dx = head.backward_row(cls, &d, g);
                for (o, v) in dout.row_mut(0).iter_mut().zip(dx) {
                    *o += v;
                }
            }
        }

        let mut dx = dout;
        for (layer, (c, g)) in p
            .layers
            .iter()
            .zip(cache.layers.iter().zip(grad.layers.iter_mut()))
            .rev()
        {
            dx = self.layer_backward(layer, c, &dx, g);
        }
        if let Some(m) = &cache.emb_drop {
            dx.hadamard_assign(m);
        }
        let dx0 = layer_norm_backward(&dx, &cache.emb_norm, &p.emb_norm, &mut grad.emb_norm);
        let n_text = cache.n_text;
        for i in 0..n_text {
            let d = dx0.row(i);
            let tok = ex.tokens[i] as usize;
            let seg = ex.segments[i] as usize;
            for (a, &v) in grad.token_emb.row_mut(tok).iter_mut().zip(d) {
                *a += v;
            }
            for (a, &v) in grad.position_emb.row_mut(i).iter_mut().zip(d) {
                *a += v;
            }
            for (a, &v) in grad.segment_emb.row_mut(seg).iter_mut().zip(d) {
                *a += v;
            }
        }
        if ex.visual.rows > 0 {
            let dvis = Mat::from_vec(
                ex.visual.rows,
                dx0.cols,
                dx0.data[n_text * dx0.cols..].to_vec(),
            );
            p.visual_proj.backward(&ex.visual, &dvis, &mut grad.visual_proj);
            for r in 0..dvis.rows {
                for (a, &v) in grad.segment_emb.row_mut(VISUAL_SEGMENT).iter_mut().zip(dvis.row(r)) {
                    *a += v;
                }
            }
        }
        debug_assert_eq!(grad.segment_emb.rows, SEGMENTS);
    }
}
