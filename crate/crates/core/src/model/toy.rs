//! A deterministic pre-norm decoder-only transformer.
//!
//! Each block is `h += Attn(RMSNorm(h)); h += MLP(RMSNorm(h))` with a
//! tanh-GELU MLP of width `4 * hidden_dim`. Early-exit logits for every layer
//! are `RMSNorm_final(h_i) @ unembedding`, the logit-lens readout.
//!
//! Weights are drawn from ChaCha8 (stream 0) seeded with `seed`, uniform on
//! `[-s, s]`, tensor by tensor in [`ToyModel::tensors`] order and row-major
//! within a tensor. `s = sqrt(3)` for embeddings, `sqrt(3 / fan_in)` for
//! projections and `2 * sqrt(3 / hidden_dim)` for the unembedding. Norm gains
//! start at 1.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LayerwiseModel, LayerwiseStep, ModelDims, Session, TokenSequence};
use crate::error::{Error, Result};
use crate::rng;

pub(crate) const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 64,
            vocab_size: 256,
            num_heads: 4,
            max_seq_len: 256,
            seed: 7,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config("num_layers must be at least 2".into()));
        }
        if self.vocab_size < 8 {
            return Err(Error::Config("vocab_size must be at least 8".into()));
        }
        if self.num_heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Weights {
    pub config: ToyModelConfig,
    pub token_embedding: Vec<f32>,
    pub visual_embedding: Vec<f32>,
    pub position_embedding: Vec<f32>,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
    pub unembedding: Vec<f32>,
}

/// Shape of every tensor, in generation order.
pub(crate) fn tensor_shapes(cfg: &ToyModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, l, f) = (cfg.vocab_size, cfg.hidden_dim, cfg.max_seq_len, cfg.mlp_dim());
    let mut out = vec![
        ("token_embedding".to_string(), vec![v, d]),
        ("visual_embedding".to_string(), vec![v, d]),
        ("position_embedding".to_string(), vec![l, d]),
    ];
    for i in 0..cfg.num_layers {
        let p = format!("layers.{i}.");
        out.push((format!("{p}attn_norm"), vec![d]));
        out.push((format!("{p}wq"), vec![d, d]));
        out.push((format!("{p}wk"), vec![d, d]));
        out.push((format!("{p}wv"), vec![d, d]));
        out.push((format!("{p}wo"), vec![d, d]));
        out.push((format!("{p}mlp_norm"), vec![d]));
        out.push((format!("{p}w1"), vec![d, f]));
        out.push((format!("{p}w2"), vec![f, d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembedding".to_string(), vec![d, v]));
    out
}

fn init_scale(name: &str, shape: &[usize], hidden_dim: usize) -> Option<f32> {
    if name.ends_with("norm") {
        return None;
    }
    let s = if name.ends_with("embedding") && name != "unembedding" {
        3f32.sqrt()
    } else if name == "unembedding" {
        2.0 * (3.0 / hidden_dim as f32).sqrt()
    } else {
        (3.0 / shape[0] as f32).sqrt()
    };
    Some(s)
}

impl Weights {
    fn generate(config: ToyModelConfig) -> Self {
        let mut rng = rng::stream(config.seed, rng::STREAM_WEIGHTS);
        let tensors = tensor_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = match init_scale(&name, &shape, config.hidden_dim) {
                    None => vec![1.0f32; n],
                    Some(s) => (0..n).map(|_| rng.random_range(-s..s)).collect(),
                };
                (name, data)
            })
            .collect();
        Self::from_named(config, tensors).expect("generated tensors match their shapes")
    }

    pub(crate) fn from_named(config: ToyModelConfig, tensors: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let shapes = tensor_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::Model(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter().zip(shapes);
        let mut next = |want: &str| -> Result<Vec<f32>> {
            let ((name, data), (sname, shape)) = it.next().expect("length checked");
            debug_assert_eq!(sname, want);
            if name != sname {
                return Err(Error::Model(format!("expected tensor {sname}, found {name}")));
            }
            let n: usize = shape.iter().product();
            if data.len() != n {
                return Err(Error::Model(format!(
                    "tensor {name}: {} values for shape {shape:?}",
                    data.len()
                )));
            }
            Ok(data)
        };
        let token_embedding = next("token_embedding")?;
        let visual_embedding = next("visual_embedding")?;
        let position_embedding = next("position_embedding")?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layers.{i}.");
            blocks.push(Block {
                attn_norm: next(&format!("{p}attn_norm"))?,
                wq: next(&format!("{p}wq"))?,
                wk: next(&format!("{p}wk"))?,
                wv: next(&format!("{p}wv"))?,
                wo: next(&format!("{p}wo"))?,
                mlp_norm: next(&format!("{p}mlp_norm"))?,
                w1: next(&format!("{p}w1"))?,
                w2: next(&format!("{p}w2"))?,
            });
        }
        let final_norm = next("final_norm")?;
        let unembedding = next("unembedding")?;
        Ok(Self {
            config,
            token_embedding,
            visual_embedding,
            position_embedding,
            blocks,
            final_norm,
            unembedding,
        })
    }
}

/// Deterministic toy decoder with logit-lens readout at every layer.
#[derive(Debug, Clone)]
pub struct ToyModel {
    weights: Arc<Weights>,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: Arc::new(Weights::generate(config)),
        })
    }

    pub(crate) fn from_weights(weights: Weights) -> Result<Self> {
        weights.config.validate()?;
        Ok(Self {
            weights: Arc::new(weights),
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.weights.config
    }

    /// `(name, shape, data)` for every tensor in generation order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let w = &*self.weights;
        let mut data: Vec<&[f32]> = vec![&w.token_embedding, &w.visual_embedding, &w.position_embedding];
        for b in &w.blocks {
            data.extend([
                &b.attn_norm[..],
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.mlp_norm,
                &b.w1,
                &b.w2,
            ]);
        }
        data.push(&w.final_norm);
        data.push(&w.unembedding);
        tensor_shapes(&w.config)
            .into_iter()
            .zip(data)
            .map(|((n, s), d)| (n, s, d))
            .collect()
    }

    /// Forward pass on the sequence with its visual prefix removed.
    pub fn forward_no_visual(&self, seq: &TokenSequence, want_hidden: bool) -> Result<LayerwiseStep> {
        self.forward(&seq.without_visual()?, want_hidden)
    }

    /// Logit-lens readout of an arbitrary hidden state.
    pub fn unembed(&self, hidden: &[f32]) -> Vec<f32> {
        let w = &*self.weights;
        let normed = rms_norm(hidden, &w.final_norm);
        matvec(&normed, &w.unembedding, w.config.vocab_size)
    }
}

impl LayerwiseModel for ToyModel {
    fn dims(&self) -> ModelDims {
        let c = &self.weights.config;
        ModelDims {
            num_layers: c.num_layers,
            vocab_size: c.vocab_size,
            hidden_dim: c.hidden_dim,
        }
    }

    fn session(&self, prompt: &TokenSequence, want_hidden: bool) -> Result<Box<dyn Session>> {
        let cfg = &self.weights.config;
        prompt.validate(cfg.vocab_size)?;
        if prompt.len() > cfg.max_seq_len {
            return Err(Error::Model(format!(
                "sequence length {} exceeds max_seq_len {}",
                prompt.len(),
                cfg.max_seq_len
            )));
        }
        let pending = prompt
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i < prompt.visual_prefix_len))
            .collect();
        Ok(Box::new(ToySession {
            weights: Arc::clone(&self.weights),
            keys: vec![Vec::new(); cfg.num_layers],
            values: vec![Vec::new(); cfg.num_layers],
            len: 0,
            pending,
            last_hidden: Vec::new(),
            want_hidden,
        }))
    }
}

#[derive(Clone)]
struct ToySession {
    weights: Arc<Weights>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    pending: Vec<(u32, bool)>,
    // N x D residual stream of the last processed position
    last_hidden: Vec<f32>,
    want_hidden: bool,
}

impl ToySession {
    fn process(&mut self, token: u32, visual: bool) {
        let w = Arc::clone(&self.weights);
        let cfg = &w.config;
        let d = cfg.hidden_dim;
        let pos = self.len;
        let table = if visual {
            &w.visual_embedding
        } else {
            &w.token_embedding
        };
        let t = token as usize;
        let mut h: Vec<f32> = table[t * d..(t + 1) * d]
            .iter()
            .zip(&w.position_embedding[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        self.last_hidden.clear();
        let heads = cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        for (li, b) in w.blocks.iter().enumerate() {
            let a = rms_norm(&h, &b.attn_norm);
            let q = matvec(&a, &b.wq, d);
            self.keys[li].extend(matvec(&a, &b.wk, d));
            self.values[li].extend(matvec(&a, &b.wv, d));
            let keys = &self.keys[li];
            let vals = &self.values[li];
            let mut ctx = vec![0.0f32; d];
            let mut scores = vec![0.0f32; pos + 1];
            for hd in 0..heads {
                let off = hd * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + off..j * d + off + dh];
                    *s = dot(&q[off..off + dh], k) * scale;
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let p = s / sum;
                    let v = &vals[j * d + off..j * d + off + dh];
                    for (c, vv) in ctx[off..off + dh].iter_mut().zip(v) {
                        *c += p * vv;
                    }
                }
            }
            let attn_out = matvec(&ctx, &b.wo, d);
            for (x, y) in h.iter_mut().zip(&attn_out) {
                *x += y;
            }
            let m = rms_norm(&h, &b.mlp_norm);
            let mut up = matvec(&m, &b.w1, cfg.mlp_dim());
            for u in up.iter_mut() {
                *u = gelu(*u);
            }
            let down = matvec(&up, &b.w2, d);
            for (x, y) in h.iter_mut().zip(&down) {
                *x += y;
            }
            self.last_hidden.extend_from_slice(&h);
        }
        self.len += 1;
    }
}

impl Session for ToySession {
    fn step(&mut self) -> Result<LayerwiseStep> {
        for (tok, visual) in std::mem::take(&mut self.pending) {
            self.process(tok, visual);
        }
        if self.len == 0 {
            return Err(Error::Model("empty sequence".into()));
        }
        let w = &*self.weights;
        let cfg = &w.config;
        let d = cfg.hidden_dim;
        let mut logits = Vec::with_capacity(cfg.num_layers * cfg.vocab_size);
        for layer in 0..cfg.num_layers {
            let normed = rms_norm(&self.last_hidden[layer * d..(layer + 1) * d], &w.final_norm);
            logits.extend(matvec(&normed, &w.unembedding, cfg.vocab_size));
        }
        let hidden = self.want_hidden.then(|| (d, self.last_hidden.clone()));
        LayerwiseStep::new(cfg.num_layers, cfg.vocab_size, logits, hidden)
    }

    fn push(&mut self, token: u32) -> Result<()> {
        let cfg = &self.weights.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Model(format!(
                "token id {token} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.len + self.pending.len() + 1 > cfg.max_seq_len {
            return Err(Error::Model(format!(
                "sequence length would exceed max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        self.pending.push((token, false));
        Ok(())
    }

    fn fork(&self) -> Box<dyn Session> {
        Box::new(self.clone())
    }
}

pub(crate) fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// `x @ W` for a row-major `W` of shape `[x.len(), out]`.
pub(crate) fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out];
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
