//! Early-exit analyses over recorded steps: activated ground-truth tokens,
//! anchor hit rate, no-visual overlap and the anchor perturbation ablation.

use rand::Rng;
use serde::Serialize;

use crate::deco::{acquire_candidates, select_anchor_in, AnchorSelection, CandidateSet};
use crate::error::{Error, Result};
use crate::model::LayerwiseStep;
use crate::numerics::{argmax_tiebreak, softmax, top_p_truncate};
use crate::rng;

/// Nucleus mass used to form candidate sets in the mechanism analyses.
pub const CANDIDATE_TOP_P: f64 = 0.9;
/// Default gap threshold for an activated ground-truth token.
pub const DEFAULT_ACTIVATION_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationQuery {
    pub ground_truth: Vec<usize>,
    pub candidate_top_p: f64,
    pub threshold: f64,
}

impl ActivationQuery {
    pub fn new(ground_truth: Vec<usize>) -> Self {
        Self {
            ground_truth,
            candidate_top_p: CANDIDATE_TOP_P,
            threshold: DEFAULT_ACTIVATION_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "activation threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.ground_truth.is_empty() {
            return Err(Error::invalid("activation query has no ground-truth tokens"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Activation {
    pub token: usize,
    /// Earliest layer (1-based) where some ground-truth candidate leads the
    /// final-layer top token by at least the threshold.
    pub layer: usize,
    /// Largest gap seen over every scanned (layer, token) pair.
    pub max_gap: f64,
    pub hallucinated_token: usize,
    /// Every layer with at least one qualifying token.
    pub activated_layers: Vec<usize>,
}

/// Scans layers `1..=N` for a ground-truth candidate `x_a` with
/// `p_i(x_a) - p_i(x_h) >= threshold`, where `x_h` is the final-layer argmax.
pub fn detect_activation(step: &LayerwiseStep, query: &ActivationQuery) -> Result<Option<Activation>> {
    query.validate()?;
    let candidates = acquire_candidates(step, query.candidate_top_p)?;
    let hallucinated = argmax_tiebreak(step.final_logits())?;
    let mut tokens: Vec<usize> = query
        .ground_truth
        .iter()
        .copied()
        .filter(|&t| candidates.contains(t))
        .collect();
    tokens.sort_unstable();
    tokens.dedup();
    if tokens.is_empty() {
        return Ok(None);
    }
    let mut first: Option<(usize, usize)> = None;
    let mut max_gap = f64::NEG_INFINITY;
    let mut activated_layers = Vec::new();
    for layer in 1..=step.num_layers() {
        let probs = softmax(step.layer_logits(layer))?;
        let mut any = false;
        for &t in &tokens {
            let gap = probs[t] - probs[hallucinated];
            max_gap = max_gap.max(gap);
            if gap >= query.threshold {
                any = true;
                first.get_or_insert((t, layer));
            }
        }
        if any {
            activated_layers.push(layer);
        }
    }
    Ok(first.map(|(token, layer)| Activation {
        token,
        layer,
        max_gap,
        hallucinated_token: hallucinated,
        activated_layers,
    }))
}

/// Per-layer counts of activations: by earliest layer and over every layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationHistogram {
    pub first_layer: Vec<usize>,
    pub all_layers: Vec<usize>,
}

pub fn activation_histogram(results: &[Option<Activation>], num_layers: usize) -> ActivationHistogram {
    let mut first_layer = vec![0; num_layers];
    let mut all_layers = vec![0; num_layers];
    for a in results.iter().flatten() {
        first_layer[a.layer - 1] += 1;
        for &l in &a.activated_layers {
            all_layers[l - 1] += 1;
        }
    }
    ActivationHistogram {
        first_layer,
        all_layers,
    }
}

/// A step with its ground-truth tokens.
#[derive(Debug, Clone, Copy)]
pub struct LabeledStep<'a> {
    pub step: &'a LayerwiseStep,
    pub ground_truth: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HitRateReport {
    pub layer_lo: usize,
    pub layer_hi: usize,
    pub hits: usize,
    pub total: usize,
    pub rate: f64,
    pub decisions: Vec<bool>,
    /// The interval's top candidate token per step.
    pub top_tokens: Vec<usize>,
}

/// Fraction of steps whose highest-probability candidate across
/// `lo..=hi` is a ground-truth token.
pub fn hit_rate(steps: &[LabeledStep<'_>], lo: usize, hi: usize, top_p: f64) -> Result<HitRateReport> {
    if steps.is_empty() {
        return Err(Error::invalid("hit rate over an empty trace set"));
    }
    let mut decisions = Vec::with_capacity(steps.len());
    let mut top_tokens = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        if s.ground_truth.is_empty() {
            return Err(Error::invalid(format!("step {i} has no ground-truth label")));
        }
        let candidates = acquire_candidates(s.step, top_p)?;
        let sel = select_anchor_in(s.step, &candidates, lo, hi)?;
        decisions.push(s.ground_truth.contains(&sel.winning_token));
        top_tokens.push(sel.winning_token);
    }
    Ok(rate_report(lo, hi, decisions, top_tokens))
}

fn rate_report(lo: usize, hi: usize, decisions: Vec<bool>, top_tokens: Vec<usize>) -> HitRateReport {
    let hits = decisions.iter().filter(|&&d| d).count();
    let total = decisions.len();
    HitRateReport {
        layer_lo: lo,
        layer_hi: hi,
        hits,
        total,
        rate: hits as f64 / total as f64,
        decisions,
        top_tokens,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapReport {
    pub overlapping: usize,
    pub total: usize,
    pub rate: f64,
}

/// Fraction of pairs whose with-visual final-layer argmax lies in the
/// no-visual candidate set.
pub fn overlap_rate(
    with_visual: &[&LayerwiseStep],
    without_visual: &[&LayerwiseStep],
    top_p: f64,
) -> Result<OverlapReport> {
    if with_visual.len() != without_visual.len() {
        return Err(Error::invalid(format!(
            "unpaired inputs: {} with-visual steps, {} without",
            with_visual.len(),
            without_visual.len()
        )));
    }
    if with_visual.is_empty() {
        return Err(Error::invalid("overlap rate over no pairs"));
    }
    let mut overlapping = 0;
    for (w, wo) in with_visual.iter().zip(without_visual) {
        let top = argmax_tiebreak(w.final_logits())?;
        let cands = top_p_truncate(&softmax(wo.final_logits())?, top_p)?;
        if cands.contains(&top) {
            overlapping += 1;
        }
    }
    Ok(OverlapReport {
        overlapping,
        total: with_visual.len(),
        rate: overlapping as f64 / with_visual.len() as f64,
    })
}

/// Shifts each anchor layer by a seeded uniform integer in
/// `[-magnitude, magnitude]`, clamped to `1..=num_layers`. Other fields are
/// left as they were; use [`rescore_at`] to re-read the step at the new layer.
pub fn perturb_layers(
    selections: &[AnchorSelection],
    magnitude: usize,
    seed: u64,
    num_layers: usize,
) -> Vec<AnchorSelection> {
    let mut rng = rng::stream(seed, rng::STREAM_PERTURB);
    let m = magnitude as i64;
    selections
        .iter()
        .map(|s| {
            let shift = if m == 0 { 0 } else { rng.random_range(-m..=m) };
            let layer = (s.anchor_layer as i64 + shift).clamp(1, num_layers.max(1) as i64);
            AnchorSelection {
                anchor_layer: layer as usize,
                ..*s
            }
        })
        .collect()
}

/// Best candidate at a fixed layer, as if that layer had been selected.
pub fn rescore_at(step: &LayerwiseStep, candidates: &CandidateSet, layer: usize) -> Result<AnchorSelection> {
    select_anchor_in(step, candidates, layer, layer)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub magnitude: usize,
    pub trials: usize,
    pub baseline_rate: f64,
    pub trial_rates: Vec<f64>,
    /// Trials whose perturbed rate exceeded the baseline.
    pub increased: usize,
    /// Trials whose perturbed rate fell strictly below the baseline.
    pub strictly_lower: usize,
}

/// Hit rate with the selected anchors, then with perturbed anchors for each
/// of `trials` seeds (`seed`, `seed + 1`, ...).
pub fn perturbation_ablation(
    steps: &[LabeledStep<'_>],
    lo: usize,
    hi: usize,
    top_p: f64,
    magnitude: usize,
    trials: usize,
    seed: u64,
) -> Result<PerturbationReport> {
    let baseline = hit_rate(steps, lo, hi, top_p)?;
    let num_layers = steps[0].step.num_layers();
    let mut candidates = Vec::with_capacity(steps.len());
    let mut selections = Vec::with_capacity(steps.len());
    for s in steps {
        let c = acquire_candidates(s.step, top_p)?;
        selections.push(select_anchor_in(s.step, &c, lo, hi)?);
        candidates.push(c);
    }
    let mut trial_rates = Vec::with_capacity(trials);
    for t in 0..trials {
        let perturbed = perturb_layers(&selections, magnitude, seed.wrapping_add(t as u64), num_layers);
        let mut hits = 0;
        for ((s, c), p) in steps.iter().zip(&candidates).zip(&perturbed) {
            let layer = p.anchor_layer.min(s.step.num_layers());
            if s.ground_truth.contains(&rescore_at(s.step, c, layer)?.winning_token) {
                hits += 1;
            }
        }
        trial_rates.push(hits as f64 / steps.len() as f64);
    }
    Ok(PerturbationReport {
        magnitude,
        trials,
        baseline_rate: baseline.rate,
        increased: trial_rates.iter().filter(|&&r| r > baseline.rate).count(),
        strictly_lower: trial_rates.iter().filter(|&&r| r < baseline.rate).count(),
        trial_rates,
    })
}
