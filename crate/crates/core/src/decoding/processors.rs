//! Logits processors and their name registry.
//!
//! A processor rewrites the logits of one step before the decoding strategy
//! picks a token. Processors run in chain order starting from the final-layer
//! logits.

use std::collections::BTreeMap;

use super::DecodeConfig;
use crate::deco::{acquire_candidates, correct_from, select_anchor, AnchorSelection, DecoConfig};
use crate::error::{Error, Result};
use crate::model::LayerwiseStep;

pub struct ProcessContext<'a> {
    pub step: &'a LayerwiseStep,
    /// Text tokens seen so far (prompt text plus generated tokens).
    pub history: &'a [u32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub logits: Vec<f32>,
    pub selection: Option<AnchorSelection>,
}

pub trait LogitsProcessor: Send + Sync {
    fn name(&self) -> &'static str;
    fn process(&self, ctx: &ProcessContext<'_>, logits: Vec<f32>) -> Result<Processed>;
}

pub struct Identity;

impl LogitsProcessor for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn process(&self, _ctx: &ProcessContext<'_>, logits: Vec<f32>) -> Result<Processed> {
        Ok(Processed {
            logits,
            selection: None,
        })
    }
}

/// Preceding-layer correction applied to the incoming logits.
pub struct DecoProcessor {
    pub config: DecoConfig,
}

impl LogitsProcessor for DecoProcessor {
    fn name(&self) -> &'static str {
        "deco"
    }

    fn process(&self, ctx: &ProcessContext<'_>, logits: Vec<f32>) -> Result<Processed> {
        if !self.config.enabled {
            return Ok(Processed {
                logits,
                selection: None,
            });
        }
        let candidates = acquire_candidates(ctx.step, self.config.top_p)?;
        let sel = select_anchor(ctx.step, &candidates, &self.config)?;
        Ok(Processed {
            logits: correct_from(&logits, ctx.step, &sel, &self.config)?,
            selection: Some(sel),
        })
    }
}

pub struct RepetitionPenalty {
    pub penalty: f64,
}

impl LogitsProcessor for RepetitionPenalty {
    fn name(&self) -> &'static str {
        "repetition_penalty"
    }

    fn process(&self, ctx: &ProcessContext<'_>, logits: Vec<f32>) -> Result<Processed> {
        Ok(Processed {
            logits: apply_repetition_penalty(&logits, ctx.history, self.penalty)?,
            selection: None,
        })
    }
}

/// CTRL-style penalty: positive logits of seen tokens are divided by
/// `penalty`, non-positive ones multiplied. Each distinct token is penalised
/// once regardless of how often it occurred.
pub fn apply_repetition_penalty(logits: &[f32], history: &[u32], penalty: f64) -> Result<Vec<f32>> {
    if !(penalty >= 1.0 && penalty.is_finite()) {
        return Err(Error::invalid(format!("repetition penalty must be >= 1, got {penalty}")));
    }
    let mut out = logits.to_vec();
    if penalty == 1.0 {
        return Ok(out);
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        let t = t as usize;
        if t >= out.len() || seen[t] {
            continue;
        }
        seen[t] = true;
        let v = out[t] as f64;
        out[t] = if v > 0.0 { v / penalty } else { v * penalty } as f32;
    }
    Ok(out)
}

/// An ordered list of processors.
#[derive(Default)]
pub struct ProcessorChain {
    processors: Vec<Box<dyn LogitsProcessor>>,
}

impl ProcessorChain {
    pub fn new(processors: Vec<Box<dyn LogitsProcessor>>) -> Self {
        Self { processors }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.processors.iter().map(|p| p.name()).collect()
    }

    /// Runs every processor over the step's final logits. The anchor selection
    /// reported is the last one any processor produced.
    pub fn run(&self, step: &LayerwiseStep, history: &[u32]) -> Result<Processed> {
        let ctx = ProcessContext { step, history };
        let mut cur = Processed {
            logits: step.final_logits().to_vec(),
            selection: None,
        };
        for p in &self.processors {
            let next = p.process(&ctx, cur.logits)?;
            cur = Processed {
                logits: next.logits,
                selection: next.selection.or(cur.selection),
            };
        }
        Ok(cur)
    }
}

/// Builds a processor from the run configuration, or `None` when it would be
/// a no-op.
pub type ProcessorFactory = fn(&DecodeConfig, &DecoConfig) -> Option<Box<dyn LogitsProcessor>>;

/// Named processor factories.
pub struct ProcessorRegistry {
    factories: BTreeMap<&'static str, ProcessorFactory>,
}

/// Chain order used by the decoders: correction first, then the penalty.
pub const DEFAULT_ORDER: [&str; 2] = ["deco", "repetition_penalty"];

impl Default for ProcessorRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("identity", |_, _| Some(Box::new(Identity)));
        r.register("deco", |_, deco| {
            deco.enabled
                .then(|| Box::new(DecoProcessor { config: *deco }) as Box<dyn LogitsProcessor>)
        });
        r.register("repetition_penalty", |d, _| {
            (d.repetition_penalty > 1.0).then(|| {
                Box::new(RepetitionPenalty {
                    penalty: d.repetition_penalty,
                }) as Box<dyn LogitsProcessor>
            })
        });
        r
    }
}

impl ProcessorRegistry {
    pub fn register(&mut self, name: &'static str, factory: ProcessorFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn chain(&self, order: &[&str], dcfg: &DecodeConfig, deco: &DecoConfig) -> Result<ProcessorChain> {
        let mut processors = Vec::new();
        for name in order {
            let factory = self
                .factories
                .get(name)
                .ok_or_else(|| Error::Config(format!("unknown logits processor {name:?}")))?;
            processors.extend(factory(dcfg, deco));
        }
        Ok(ProcessorChain::new(processors))
    }
}
