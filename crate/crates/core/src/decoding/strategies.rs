//! Token-selection strategies and their name registry.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;

use super::processors::ProcessorChain;
use super::DecodeConfig;
use crate::deco::AnchorSelection;
use crate::error::{Error, Result};
use crate::model::{LayerwiseModel, Session, TokenSequence};
use crate::numerics::{argmax_tiebreak, log_softmax, softmax, top_p_truncate};
use crate::rng;

/// Tokens produced by one decode, with per-step logs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub anchors: Vec<AnchorSelection>,
    /// Probability of each chosen token under the processed distribution.
    pub token_probs: Vec<f64>,
}

impl Generation {
    fn push(&mut self, token: usize, prob: f64, sel: Option<AnchorSelection>) {
        self.tokens.push(token as u32);
        self.token_probs.push(prob);
        self.anchors.extend(sel);
    }
}

pub trait DecodingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(
        &self,
        model: &dyn LayerwiseModel,
        prompt: &TokenSequence,
        cfg: &DecodeConfig,
        chain: &ProcessorChain,
    ) -> Result<Generation>;
}

/// Shared loop for strategies that extend a single sequence.
fn extend_single(
    model: &dyn LayerwiseModel,
    prompt: &TokenSequence,
    cfg: &DecodeConfig,
    chain: &ProcessorChain,
    mut pick: impl FnMut(&[f32]) -> Result<(usize, f64)>,
) -> Result<Generation> {
    let mut session = model.session(prompt, false)?;
    let mut history = prompt.text_ids().to_vec();
    let mut out = Generation::default();
    for i in 0..cfg.max_new_tokens {
        let step = session.step()?;
        let processed = chain.run(&step, &history)?;
        let (token, prob) = pick(&processed.logits)?;
        out.push(token, prob, processed.selection);
        history.push(token as u32);
        if cfg.stop_token == Some(token as u32) {
            break;
        }
        if i + 1 < cfg.max_new_tokens {
            session.push(token as u32)?;
        }
    }
    Ok(out)
}

pub struct Greedy;

impl DecodingStrategy for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn generate(
        &self,
        model: &dyn LayerwiseModel,
        prompt: &TokenSequence,
        cfg: &DecodeConfig,
        chain: &ProcessorChain,
    ) -> Result<Generation> {
        extend_single(model, prompt, cfg, chain, |logits| {
            let t = argmax_tiebreak(logits)?;
            Ok((t, softmax(logits)?[t]))
        })
    }
}

/// Seeded sampling from the renormalised top-p nucleus of the processed
/// distribution.
pub struct Nucleus;

impl DecodingStrategy for Nucleus {
    fn name(&self) -> &'static str {
        "nucleus"
    }

    fn generate(
        &self,
        model: &dyn LayerwiseModel,
        prompt: &TokenSequence,
        cfg: &DecodeConfig,
        chain: &ProcessorChain,
    ) -> Result<Generation> {
        let mut rng = rng::stream(cfg.seed, rng::STREAM_SAMPLING);
        extend_single(model, prompt, cfg, chain, |logits| {
            let probs = softmax(logits)?;
            let nucleus = top_p_truncate(&probs, cfg.sampling_top_p)?;
            let mass: f64 = nucleus.iter().map(|&t| probs[t]).sum();
            let u = rng.random::<f64>() * mass;
            let mut cum = 0.0;
            let mut chosen = *nucleus.last().expect("nucleus is nonempty");
            for &t in &nucleus {
                cum += probs[t];
                if u < cum {
                    chosen = t;
                    break;
                }
            }
            Ok((chosen, probs[chosen]))
        })
    }
}

/// Length-unnormalised beam search over processed log-probabilities. Each
/// beam runs the processor chain on its own step.
pub struct Beam;

struct Hypothesis {
    session: Box<dyn Session>,
    history: Vec<u32>,
    generation: Generation,
    score: f64,
    finished: bool,
}

struct Expansion {
    score: f64,
    parent: usize,
    // None carries a finished hypothesis forward unchanged
    token: Option<(usize, f64, Option<AnchorSelection>)>,
}

impl DecodingStrategy for Beam {
    fn name(&self) -> &'static str {
        "beam"
    }

    fn generate(
        &self,
        model: &dyn LayerwiseModel,
        prompt: &TokenSequence,
        cfg: &DecodeConfig,
        chain: &ProcessorChain,
    ) -> Result<Generation> {
        let width = cfg.beam_width;
        let mut beams = vec![Hypothesis {
            session: model.session(prompt, false)?,
            history: prompt.text_ids().to_vec(),
            generation: Generation::default(),
            score: 0.0,
            finished: false,
        }];
        for i in 0..cfg.max_new_tokens {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut expansions = Vec::new();
            for (bi, beam) in beams.iter_mut().enumerate() {
                if beam.finished {
                    expansions.push(Expansion {
                        score: beam.score,
                        parent: bi,
                        token: None,
                    });
                    continue;
                }
                let step = beam.session.step()?;
                let processed = chain.run(&step, &beam.history)?;
                let logp = log_softmax(&processed.logits)?;
                // rank within a beam on the logits themselves so that a single
                // beam reproduces argmax exactly
                let mut order: Vec<usize> = (0..processed.logits.len()).collect();
                order.sort_by(|&a, &b| {
                    processed.logits[b]
                        .partial_cmp(&processed.logits[a])
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for &t in order.iter().take(width) {
                    expansions.push(Expansion {
                        score: beam.score + logp[t],
                        parent: bi,
                        token: Some((t, logp[t].exp(), processed.selection)),
                    });
                }
            }
            expansions.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(Ordering::Equal)
                    .then(a.parent.cmp(&b.parent))
                    .then_with(|| {
                        let ta = a.token.map_or(0, |t| t.0);
                        let tb = b.token.map_or(0, |t| t.0);
                        ta.cmp(&tb)
                    })
            });
            expansions.truncate(width);
            let last = i + 1 == cfg.max_new_tokens;
            let mut next = Vec::with_capacity(expansions.len());
            for e in expansions {
                let parent = &beams[e.parent];
                let mut hyp = Hypothesis {
                    session: parent.session.fork(),
                    history: parent.history.clone(),
                    generation: parent.generation.clone(),
                    score: e.score,
                    finished: parent.finished,
                };
                if let Some((t, prob, sel)) = e.token {
                    hyp.generation.push(t, prob, sel);
                    hyp.history.push(t as u32);
                    if cfg.stop_token == Some(t as u32) {
                        hyp.finished = true;
                    } else if !last {
                        hyp.session.push(t as u32)?;
                    }
                }
                next.push(hyp);
            }
            beams = next;
        }
        // beams stay sorted by score with ties on the lower index
        Ok(beams.swap_remove(0).generation)
    }
}

/// Strategies addressable by name.
pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Box<dyn DecodingStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self {
            strategies: BTreeMap::new(),
        };
        r.register(Box::new(Greedy));
        r.register(Box::new(Nucleus));
        r.register(Box::new(Beam));
        r
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, strategy: Box<dyn DecodingStrategy>) {
        self.strategies.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn DecodingStrategy> {
        self.strategies.get(name).map(|s| s.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown strategy {name:?}; expected one of {:?}",
                self.names()
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}
