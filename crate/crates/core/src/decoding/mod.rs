//! Autoregressive decoding over any [`LayerwiseModel`].
//!
//! Each step runs the processor chain (correction, then repetition penalty)
//! and hands the processed logits to the strategy selected by name from a
//! [`StrategyRegistry`].

pub mod processors;
pub mod strategies;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::deco::{AnchorSelection, DecoConfig};
use crate::error::{Error, Result};
use crate::model::{LayerwiseModel, TokenSequence};

pub use processors::{
    apply_repetition_penalty, DecoProcessor, Identity, LogitsProcessor, ProcessContext, Processed,
    ProcessorChain, ProcessorRegistry, RepetitionPenalty, DEFAULT_ORDER,
};
pub use strategies::{Beam, DecodingStrategy, Generation, Greedy, Nucleus, StrategyRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Registered strategy name: `greedy`, `nucleus` or `beam`.
    pub strategy: String,
    pub max_new_tokens: usize,
    pub sampling_top_p: f64,
    pub beam_width: usize,
    pub repetition_penalty: f64,
    pub seed: u64,
    pub stop_token: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: "greedy".into(),
            max_new_tokens: 32,
            sampling_top_p: 0.9,
            beam_width: 3,
            repetition_penalty: 1.0,
            seed: 0,
            stop_token: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(self.sampling_top_p > 0.0 && self.sampling_top_p <= 1.0) {
            return Err(Error::Config(format!(
                "sampling_top_p must be in (0, 1], got {}",
                self.sampling_top_p
            )));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    /// One entry per generated token when the correction is enabled.
    pub anchors: Vec<AnchorSelection>,
    pub token_probs: Vec<f64>,
    pub duration: Duration,
}

/// Decoder bundling the strategy and processor registries.
#[derive(Default)]
pub struct Decoder {
    pub strategies: StrategyRegistry,
    pub processors: ProcessorRegistry,
}

impl Decoder {
    pub fn decode(
        &self,
        model: &dyn LayerwiseModel,
        prompt: &TokenSequence,
        dcfg: &DecodeConfig,
        deco: &DecoConfig,
    ) -> Result<DecodeResult> {
        dcfg.validate()?;
        if deco.enabled {
            deco.validate(model.dims().num_layers)?;
        }
        let strategy = self.strategies.get(&dcfg.strategy)?;
        let chain = self.processors.chain(&DEFAULT_ORDER, dcfg, deco)?;
        let start = Instant::now();
        let g = strategy.generate(model, prompt, dcfg, &chain)?;
        Ok(DecodeResult {
            tokens: g.tokens,
            anchors: g.anchors,
            token_probs: g.token_probs,
            duration: start.elapsed(),
        })
    }
}

/// Decodes with the default registries.
pub fn decode(
    model: &dyn LayerwiseModel,
    prompt: &TokenSequence,
    dcfg: &DecodeConfig,
    deco: &DecoConfig,
) -> Result<DecodeResult> {
    Decoder::default().decode(model, prompt, dcfg, deco)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyModel, ToyModelConfig};
    use crate::numerics::argmax_tiebreak;

    fn model() -> ToyModel {
        ToyModel::new(ToyModelConfig {
            num_layers: 4,
            hidden_dim: 16,
            vocab_size: 32,
            num_heads: 2,
            max_seq_len: 64,
            seed: 5,
        })
        .unwrap()
    }

    fn cfg(strategy: &str) -> DecodeConfig {
        DecodeConfig {
            strategy: strategy.into(),
            max_new_tokens: 10,
            ..Default::default()
        }
    }

    #[test]
    fn greedy_matches_stepwise_argmax() {
        let m = model();
        let prompt = TokenSequence::with_visual(&[3, 4], &[1, 2]);
        let out = decode(&m, &prompt, &cfg("greedy"), &DecoConfig::disabled(4)).unwrap();
        let mut seq = prompt.clone();
        for &t in &out.tokens {
            let step = m.forward(&seq, false).unwrap();
            assert_eq!(argmax_tiebreak(step.final_logits()).unwrap() as u32, t);
            seq.ids.push(t);
        }
        assert_eq!(out.tokens.len(), 10);
        assert!(out.anchors.is_empty());
    }

    #[test]
    fn stop_token_ends_generation() {
        let m = model();
        let prompt = TokenSequence::text(vec![1, 2]);
        let free = decode(&m, &prompt, &cfg("greedy"), &DecoConfig::disabled(4)).unwrap();
        let stop = free.tokens[2];
        let first = free.tokens.iter().position(|&t| t == stop).unwrap();
        let c = DecodeConfig {
            stop_token: Some(stop),
            ..cfg("greedy")
        };
        let out = decode(&m, &prompt, &c, &DecoConfig::disabled(4)).unwrap();
        assert_eq!(out.tokens, free.tokens[..=first]);
    }

    #[test]
    fn anchors_logged_within_interval() {
        let m = model();
        let deco = DecoConfig {
            layer_lo: 2,
            layer_hi: 3,
            ..DecoConfig::for_depth(4)
        };
        for s in ["greedy", "nucleus", "beam"] {
            let out = decode(&m, &TokenSequence::text(vec![7]), &cfg(s), &deco).unwrap();
            assert_eq!(out.anchors.len(), out.tokens.len());
            assert!(out.anchors.iter().all(|a| (2..=3).contains(&a.anchor_layer)));
        }
    }

    #[test]
    fn nucleus_is_seeded() {
        let m = model();
        let p = TokenSequence::text(vec![9, 1]);
        let deco = DecoConfig::for_depth(4);
        let mut c = cfg("nucleus");
        c.sampling_top_p = 0.95;
        let a = decode(&m, &p, &c, &deco).unwrap();
        let b = decode(&m, &p, &c, &deco).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let m = model();
        let deco = DecoConfig::for_depth(4);
        let mut b = cfg("beam");
        b.beam_width = 1;
        for i in 0..5u32 {
            let p = TokenSequence::text(vec![i, i + 3]);
            let g = decode(&m, &p, &cfg("greedy"), &deco).unwrap();
            let bb = decode(&m, &p, &b, &deco).unwrap();
            assert_eq!(g.tokens, bb.tokens);
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let m = model();
        let p = TokenSequence::text(vec![1]);
        let off = DecoConfig::disabled(4);
        assert!(decode(&m, &p, &cfg("sideways"), &off).is_err());
        let mut c = cfg("beam");
        c.beam_width = 0;
        assert!(decode(&m, &p, &c, &off).is_err());
        let mut c = cfg("greedy");
        c.max_new_tokens = 0;
        assert!(decode(&m, &p, &c, &off).is_err());
        let bad = DecoConfig {
            layer_hi: 9,
            ..DecoConfig::for_depth(4)
        };
        assert!(decode(&m, &p, &cfg("greedy"), &bad).is_err());
    }

    #[test]
    fn decode_config_json_keys() {
        let v = serde_json::to_value(DecodeConfig::default()).unwrap();
        for k in [
            "strategy",
            "max_new_tokens",
            "sampling_top_p",
            "beam_width",
            "repetition_penalty",
            "seed",
            "stop_token",
        ] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }
}
