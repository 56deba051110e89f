//! Seeded synthetic steps, planted fixtures and prompt sets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{ProbeExample, ProbeSplit, StepLabel};
use crate::model::{LayerwiseStep, TokenSequence, Trace};
use crate::rng;

pub fn fixture_rng(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, rng::STREAM_FIXTURES)
}

/// Uniform logits in `[-scale, scale]` for every layer.
pub fn random_step(rng: &mut impl Rng, num_layers: usize, vocab: usize, scale: f32) -> LayerwiseStep {
    let logits = (0..num_layers * vocab).map(|_| rng.random_range(-scale..scale)).collect();
    LayerwiseStep::new(num_layers, vocab, logits, None).expect("shape is consistent")
}

/// A step where the final layer prefers a hallucinated token while a
/// ground-truth candidate dominates exactly one earlier layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipFixture {
    pub step: LayerwiseStep,
    pub ground_truth: usize,
    pub hallucinated: usize,
    pub planted_layer: usize,
    /// Final-layer logit lead of the hallucinated token.
    pub final_gap: f32,
}

/// Layout, with every other entry uniform in `[-1, 0]`:
///
/// * final layer: hallucinated `3 + gap` (gap in `[0.1, 1]`), ground truth `3`;
/// * planted layer: ground truth `8`;
/// * any other layer: hallucinated `2`.
///
/// `planted_layer` must lie in `1..num_layers`.
pub fn flip_fixture(rng: &mut impl Rng, num_layers: usize, vocab: usize, planted_layer: usize) -> FlipFixture {
    assert!(vocab >= 2 && (1..num_layers).contains(&planted_layer));
    let ground_truth = rng.random_range(0..vocab);
    let hallucinated = loop {
        let t = rng.random_range(0..vocab);
        if t != ground_truth {
            break t;
        }
    };
    let final_gap = rng.random_range(0.1f32..=1.0);
    let mut rows = Vec::with_capacity(num_layers);
    for layer in 1..=num_layers {
        let mut row: Vec<f32> = (0..vocab).map(|_| rng.random_range(-1.0f32..=0.0)).collect();
        if layer == num_layers {
            row[hallucinated] = 3.0 + final_gap;
            row[ground_truth] = 3.0;
        } else if layer == planted_layer {
            row[ground_truth] = 8.0;
        } else {
            row[hallucinated] = 2.0;
        }
        rows.push(row);
    }
    FlipFixture {
        step: LayerwiseStep::from_rows(&rows).expect("rows are rectangular"),
        ground_truth,
        hallucinated,
        planted_layer,
        final_gap,
    }
}

/// `count` fixtures with planted layers drawn from `lo..=hi`.
pub fn flip_fixtures(seed: u64, count: usize, num_layers: usize, vocab: usize, lo: usize, hi: usize) -> Vec<FlipFixture> {
    let mut rng = fixture_rng(seed);
    (0..count)
        .map(|_| {
            let layer = rng.random_range(lo..=hi);
            flip_fixture(&mut rng, num_layers, vocab, layer)
        })
        .collect()
}

/// Trace plus labels sidecar for a fixture set.
pub fn fixture_trace(fixtures: &[FlipFixture]) -> (Trace, Vec<StepLabel>) {
    let trace = Trace::from_steps(fixtures.iter().map(|f| f.step.clone()).collect()).expect("uniform fixture shapes");
    let labels = fixtures
        .iter()
        .enumerate()
        .map(|(i, f)| StepLabel {
            step_index: i,
            ground_truth_tokens: vec![f.ground_truth as u32],
            hallucinated_token: Some(f.hallucinated as u32),
            paired_no_visual_step: None,
            exists: None,
            split: None,
            planted_layer: Some(f.planted_layer),
        })
        .collect();
    (trace, labels)
}

/// Random prompts of `visual_len` pseudo-visual tokens followed by
/// `text_len` text tokens.
pub fn random_prompts(seed: u64, count: usize, vocab: usize, visual_len: usize, text_len: usize) -> Vec<TokenSequence> {
    let mut rng = fixture_rng(seed);
    (0..count)
        .map(|_| {
            let v: Vec<u32> = (0..visual_len).map(|_| rng.random_range(0..vocab as u32)).collect();
            let t: Vec<u32> = (0..text_len).map(|_| rng.random_range(0..vocab as u32)).collect();
            TokenSequence::with_visual(&v, &t)
        })
        .collect()
}

/// Two Gaussian classes along a random unit direction with unit-variance
/// noise, means at `±(margin / 2 + 2)` and every point at least `margin / 2`
/// from the separating hyperplane (rejection sampled).
pub fn separable_clusters(
    rng: &mut impl Rng,
    per_class: usize,
    dim: usize,
    margin: f64,
    split: ProbeSplit,
) -> (Vec<ProbeExample>, Vec<f64>) {
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let center = margin / 2.0 + 2.0;
    let mut out = Vec::with_capacity(2 * per_class);
    for label in [true, false] {
        let sign = if label { 1.0 } else { -1.0 };
        let mut made = 0;
        while made < per_class {
            let x: Vec<f64> = dir
                .iter()
                .map(|d| sign * center * d + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let proj: f64 = x.iter().zip(&dir).map(|(a, b)| a * b).sum();
            if sign * proj >= margin / 2.0 {
                out.push(ProbeExample {
                    features: x,
                    label,
                    split,
                });
                made += 1;
            }
        }
    }
    out.shuffle(rng);
    (out, dir)
}

/// A trace whose hidden states at every layer carry separable existence
/// clusters, with a labels sidecar tagging train and in-distribution test
/// examples.
pub fn probe_trace(seed: u64, per_class: usize, num_layers: usize, dim: usize, vocab: usize) -> (Trace, Vec<StepLabel>) {
    let mut rng = fixture_rng(seed);
    let n = 2 * per_class;
    // one label sequence shared by every layer
    let mut labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    labels.shuffle(&mut rng);
    let mut hidden = vec![vec![0f32; num_layers * dim]; n];
    for layer in 0..num_layers {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        for (i, &label) in labels.iter().enumerate() {
            let sign = if label { 1.0 } else { -1.0 };
            loop {
                let x: Vec<f64> = dir
                    .iter()
                    .map(|d| sign * 3.0 * d + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let proj: f64 = x.iter().zip(&dir).map(|(a, b)| a * b).sum();
                if sign * proj >= 1.0 {
                    for (k, v) in x.iter().enumerate() {
                        hidden[i][layer * dim + k] = *v as f32;
                    }
                    break;
                }
            }
        }
    }
    let steps = hidden
        .into_iter()
        .map(|h| {
            let logits = (0..num_layers * vocab).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            LayerwiseStep::new(num_layers, vocab, logits, Some((dim, h))).expect("consistent shapes")
        })
        .collect();
    let sidecar = labels
        .iter()
        .enumerate()
        .map(|(i, &exists)| StepLabel {
            step_index: i,
            ground_truth_tokens: vec![],
            hallucinated_token: None,
            paired_no_visual_step: None,
            exists: Some(exists),
            split: Some(if i < n * 3 / 4 { ProbeSplit::Train } else { ProbeSplit::InDist }),
            planted_layer: None,
        })
        .collect();
    (Trace::from_steps(steps).expect("uniform shapes"), sidecar)
}
