//! Preceding-layer logit correction.
//!
//! For one decoding step:
//!
//! 1. candidates are the nucleus (`top_p`) of the final layer's distribution;
//! 2. the anchor layer is the layer in `[layer_lo, layer_hi]` where some
//!    candidate reaches its highest early-exit probability;
//! 3. the output logits are `final + alpha * m * anchor`, where `m` is the
//!    maximum of the anchor layer's full-vocabulary softmax (or 1 with
//!    modulation disabled).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerwiseStep;
use crate::numerics::{softmax, top_p_truncate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    MaxProb,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoConfig {
    pub alpha: f64,
    /// First layer of the anchor search interval, 1-based.
    pub layer_lo: usize,
    /// Last layer of the anchor search interval, inclusive.
    pub layer_hi: usize,
    pub top_p: f64,
    pub modulation: Modulation,
    pub enabled: bool,
}

/// Reference depth for the default interval 20..=28.
const REFERENCE_DEPTH: usize = 32;

impl DecoConfig {
    /// Defaults for a model of `num_layers` layers: alpha 0.6, top-p 0.9, max-prob
    /// modulation, and the 20..=28 interval of a 32-layer model scaled to depth.
    pub fn for_depth(num_layers: usize) -> Self {
        let (layer_lo, layer_hi) = default_interval(num_layers);
        Self {
            alpha: 0.6,
            layer_lo,
            layer_hi,
            top_p: 0.9,
            modulation: Modulation::MaxProb,
            enabled: true,
        }
    }

    pub fn disabled(num_layers: usize) -> Self {
        Self {
            enabled: false,
            ..Self::for_depth(num_layers)
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.layer_lo < 1 || self.layer_lo > self.layer_hi || self.layer_hi > num_layers {
            return Err(Error::Config(format!(
                "layer interval [{}, {}] must satisfy 1 <= lo <= hi <= {num_layers}",
                self.layer_lo, self.layer_hi
            )));
        }
        Ok(())
    }
}

/// `ceil(20 N / 32) ..= floor(28 N / 32)`, clamped to `1..=N` and widened to a
/// single layer when rounding inverts it.
pub fn default_interval(num_layers: usize) -> (usize, usize) {
    let n = num_layers.max(1);
    let lo = (20 * n).div_ceil(REFERENCE_DEPTH).clamp(1, n);
    let hi = (28 * n / REFERENCE_DEPTH).clamp(1, n);
    (lo, hi.max(lo))
}

/// Nucleus of the final-layer distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    /// Ordered by descending final-layer probability, ties by ascending id.
    pub tokens: Vec<usize>,
    pub probs: Vec<f64>,
}

impl CandidateSet {
    pub fn contains(&self, token: usize) -> bool {
        self.tokens.contains(&token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSelection {
    pub anchor_layer: usize,
    pub winning_token: usize,
    pub winning_prob: f64,
    /// Maximum of the anchor layer's full-vocabulary softmax.
    pub max_prob: f64,
}

pub fn acquire_candidates(step: &LayerwiseStep, top_p: f64) -> Result<CandidateSet> {
    let probs = softmax(step.final_logits())?;
    let tokens = top_p_truncate(&probs, top_p)?;
    let probs = tokens.iter().map(|&t| probs[t]).collect();
    Ok(CandidateSet { tokens, probs })
}

fn check_interval(step: &LayerwiseStep, lo: usize, hi: usize) -> Result<()> {
    if lo < 1 || lo > hi || hi > step.num_layers() {
        return Err(Error::invalid(format!(
            "layer interval [{lo}, {hi}] outside [1, {}]",
            step.num_layers()
        )));
    }
    Ok(())
}

/// Highest-probability (layer, candidate) pair over `lo..=hi`.
///
/// Ties go to the lower layer, then the lower token id.
pub fn select_anchor_in(
    step: &LayerwiseStep,
    candidates: &CandidateSet,
    lo: usize,
    hi: usize,
) -> Result<AnchorSelection> {
    check_interval(step, lo, hi)?;
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    if let Some(&t) = candidates.tokens.iter().find(|&&t| t >= step.vocab_size()) {
        return Err(Error::invalid(format!("candidate {t} outside vocabulary")));
    }
    let mut by_id = candidates.tokens.clone();
    by_id.sort_unstable();

    let mut best: Option<(usize, usize, f64, f64)> = None;
    for layer in lo..=hi {
        let probs = softmax(step.layer_logits(layer))?;
        let layer_max = probs.iter().copied().fold(0.0, f64::max);
        for &t in &by_id {
            if best.is_none_or(|(_, _, p, _)| probs[t] > p) {
                best = Some((layer, t, probs[t], layer_max));
            }
        }
    }
    let (anchor_layer, winning_token, winning_prob, max_prob) = best.expect("nonempty scan");
    Ok(AnchorSelection {
        anchor_layer,
        winning_token,
        winning_prob,
        max_prob,
    })
}

pub fn select_anchor(
    step: &LayerwiseStep,
    candidates: &CandidateSet,
    cfg: &DecoConfig,
) -> Result<AnchorSelection> {
    select_anchor_in(step, candidates, cfg.layer_lo, cfg.layer_hi)
}

/// `base + alpha * m * early_logits[anchor]` over the full vocabulary.
///
/// Returns `base` unchanged when the correction is disabled or `alpha == 0`.
pub fn correct_from(
    base: &[f32],
    step: &LayerwiseStep,
    sel: &AnchorSelection,
    cfg: &DecoConfig,
) -> Result<Vec<f32>> {
    if base.len() != step.vocab_size() {
        return Err(Error::invalid(format!(
            "logits of length {} for vocabulary {}",
            base.len(),
            step.vocab_size()
        )));
    }
    if !cfg.enabled || cfg.alpha == 0.0 {
        return Ok(base.to_vec());
    }
    check_interval(step, sel.anchor_layer, sel.anchor_layer)?;
    let m = match cfg.modulation {
        Modulation::MaxProb => sel.max_prob,
        Modulation::None => 1.0,
    };
    let coeff = cfg.alpha * m;
    Ok(base
        .iter()
        .zip(step.layer_logits(sel.anchor_layer))
        .map(|(&f, &a)| (f as f64 + coeff * a as f64) as f32)
        .collect())
}

pub fn correct_logits(step: &LayerwiseStep, sel: &AnchorSelection, cfg: &DecoConfig) -> Result<Vec<f32>> {
    correct_from(step.final_logits(), step, sel, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoOutput {
    pub logits: Vec<f32>,
    /// `None` when the correction is disabled.
    pub selection: Option<AnchorSelection>,
}

/// Candidate acquisition, anchor selection and correction in one call.
pub fn deco_process(step: &LayerwiseStep, cfg: &DecoConfig) -> Result<DecoOutput> {
    if !cfg.enabled {
        return Ok(DecoOutput {
            logits: step.final_logits().to_vec(),
            selection: None,
        });
    }
    let candidates = acquire_candidates(step, cfg.top_p)?;
    let sel = select_anchor(step, &candidates, cfg)?;
    let logits = correct_logits(step, &sel, cfg)?;
    Ok(DecoOutput {
        logits,
        selection: Some(sel),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax_tiebreak;

    fn cfg(lo: usize, hi: usize) -> DecoConfig {
        DecoConfig {
            alpha: 0.6,
            layer_lo: lo,
            layer_hi: hi,
            top_p: 0.9,
            modulation: Modulation::MaxProb,
            enabled: true,
        }
    }

    fn ln_probs(p: &[f64]) -> Vec<f32> {
        p.iter().map(|v| v.ln() as f32).collect()
    }

    #[test]
    fn default_interval_scaling() {
        assert_eq!(default_interval(32), (20, 28));
        assert_eq!(default_interval(8), (5, 7));
        assert_eq!(default_interval(2), (2, 2));
        assert_eq!(default_interval(40), (25, 35));
    }

    #[test]
    fn candidates_from_final_layer() {
        let step = LayerwiseStep::from_rows(&[
            vec![5.0, 0.0, 0.0, 0.0],
            ln_probs(&[0.5, 0.3, 0.15, 0.05]),
        ])
        .unwrap();
        let c = acquire_candidates(&step, 0.9).unwrap();
        assert_eq!(c.tokens, vec![0, 1, 2]);
        assert_eq!(acquire_candidates(&step, 1.0).unwrap().tokens, vec![0, 1, 2, 3]);
    }

    #[test]
    fn one_hot_final_gives_single_candidate() {
        let step = LayerwiseStep::from_rows(&[vec![0.0; 4], vec![100.0, 0.0, 0.0, 0.0]]).unwrap();
        for p in [0.1, 0.9, 0.999] {
            assert_eq!(acquire_candidates(&step, p).unwrap().tokens, vec![0]);
        }
    }

    #[test]
    fn single_layer_interval_forces_anchor() {
        let step = LayerwiseStep::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let c = acquire_candidates(&step, 1.0).unwrap();
        for k in 1..=3 {
            assert_eq!(select_anchor(&step, &c, &cfg(k, k)).unwrap().anchor_layer, k);
        }
    }

    #[test]
    fn planted_maximum_is_found() {
        // token 3 at 0.99 on layer 5, every candidate <= 0.5 elsewhere in 2..=7
        let v = 8;
        let mut rows = Vec::new();
        for layer in 1..=8 {
            let mut p = vec![0.5 / (v as f64 - 1.0); v];
            if layer == 5 {
                p = vec![0.01 / (v as f64 - 1.0); v];
                p[3] = 0.99;
            } else {
                p[layer % v] = 0.5;
            }
            rows.push(ln_probs(&p));
        }
        let step = LayerwiseStep::from_rows(&rows).unwrap();
        let c = acquire_candidates(&step, 1.0).unwrap();
        let sel = select_anchor(&step, &c, &cfg(2, 7)).unwrap();
        assert_eq!((sel.anchor_layer, sel.winning_token), (5, 3));
        assert!((sel.winning_prob - 0.99).abs() < 1e-6);
    }

    #[test]
    fn ties_go_to_lower_layer_then_lower_token() {
        let row = vec![1.0, 3.0, 3.0, 0.0];
        let step = LayerwiseStep::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let c = acquire_candidates(&step, 1.0).unwrap();
        let sel = select_anchor(&step, &c, &cfg(1, 2)).unwrap();
        assert_eq!((sel.anchor_layer, sel.winning_token), (1, 1));
    }

    #[test]
    fn interval_outside_model_is_rejected() {
        let step = LayerwiseStep::from_rows(&[vec![0.0; 4], vec![0.0; 4]]).unwrap();
        let c = acquire_candidates(&step, 0.9).unwrap();
        assert!(select_anchor(&step, &c, &cfg(1, 3)).is_err());
        assert!(select_anchor(&step, &c, &cfg(0, 1)).is_err());
        assert!(select_anchor(&step, &c, &cfg(2, 1)).is_err());
    }

    #[test]
    fn alpha_zero_is_identity() {
        let step = LayerwiseStep::from_rows(&[vec![4.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let sel = AnchorSelection {
            anchor_layer: 1,
            winning_token: 0,
            winning_prob: 0.98,
            max_prob: 0.98,
        };
        let c = DecoConfig { alpha: 0.0, ..cfg(1, 1) };
        assert_eq!(correct_logits(&step, &sel, &c).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_arithmetic_correction() {
        let step = LayerwiseStep::from_rows(&[vec![4.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let sel = AnchorSelection {
            anchor_layer: 1,
            winning_token: 0,
            winning_prob: 0.8,
            max_prob: 0.8,
        };
        let c = DecoConfig { alpha: 0.5, ..cfg(1, 1) };
        let out = correct_logits(&step, &sel, &c).unwrap();
        assert!((out[0] - 2.6).abs() < 1e-6);
        assert!((out[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn self_addition_doubles_and_keeps_argmax() {
        let row = vec![0.5, 2.0, -1.0];
        let step = LayerwiseStep::from_rows(&[row.clone(), row.clone()]).unwrap();
        let sel = AnchorSelection {
            anchor_layer: 2,
            winning_token: 1,
            winning_prob: 0.0,
            max_prob: 0.0,
        };
        let c = DecoConfig {
            alpha: 1.0,
            modulation: Modulation::None,
            ..cfg(2, 2)
        };
        let out = correct_logits(&step, &sel, &c).unwrap();
        assert_eq!(out, vec![1.0, 4.0, -2.0]);
        assert_eq!(argmax_tiebreak(&out).unwrap(), argmax_tiebreak(&row).unwrap());
    }

    #[test]
    fn disabled_returns_final_and_no_selection() {
        let step = LayerwiseStep::from_rows(&[vec![4.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let out = deco_process(&step, &DecoConfig::disabled(2)).unwrap();
        assert_eq!(out.logits, vec![1.0, 2.0]);
        assert!(out.selection.is_none());
    }

    #[test]
    fn process_is_the_composition() {
        let step = LayerwiseStep::from_rows(&[
            vec![0.1, 0.7, 0.3, 0.0],
            vec![2.0, 0.1, 0.0, 0.4],
            vec![0.0, 1.5, 1.4, 0.2],
            vec![0.3, 0.2, 0.9, 0.0],
            vec![0.0, 2.5, 0.1, 0.3],
            vec![1.0, 0.0, 2.2, 0.1],
            vec![0.2, 0.4, 0.0, 3.0],
            vec![1.1, 1.0, 0.9, 0.2],
        ])
        .unwrap();
        let c = cfg(5, 7);
        let out = deco_process(&step, &c).unwrap();
        let cands = acquire_candidates(&step, c.top_p).unwrap();
        let sel = select_anchor(&step, &cands, &c).unwrap();
        assert_eq!(out.selection, Some(sel));
        assert_eq!(out.logits, correct_logits(&step, &sel, &c).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(5, 7).validate(8).is_ok());
        assert!(cfg(5, 9).validate(8).is_err());
        assert!(DecoConfig { alpha: -0.1, ..cfg(1, 1) }.validate(8).is_err());
        assert!(DecoConfig { top_p: 0.0, ..cfg(1, 1) }.validate(8).is_err());
    }

    #[test]
    fn config_json_keys() {
        let json = serde_json::to_value(cfg(5, 7)).unwrap();
        assert_eq!(json["modulation"], "max_prob");
        let back: DecoConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg(5, 7));
    }
}
