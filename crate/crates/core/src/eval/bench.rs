//! Per-token latency and throughput of decoding with and without the
//! correction.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::deco::DecoConfig;
use crate::decoding::{DecodeConfig, Decoder};
use crate::error::{Error, Result};
use crate::model::{LayerwiseModel, TokenSequence};

pub const MIN_PROMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
    /// Shortest measurement accepted; shorter runs are repeated until they
    /// reach it.
    #[serde(with = "duration_secs")]
    pub min_sample: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            warmup: 2,
            min_sample: Duration::from_millis(2),
        }
    }
}

mod duration_secs {
    use std::time::Duration;

    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    /// Median over runs of wall-clock seconds per generated token.
    pub median_latency_per_token: f64,
    pub throughput_tokens_per_sec: f64,
    pub tokens_per_run: usize,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub prompts: usize,
    pub config: BenchConfig,
    pub baseline: LatencyStats,
    pub treatment: LatencyStats,
    /// Treatment over baseline median latency per token.
    pub ratio: f64,
}

struct Arm<'a> {
    deco: &'a DecoConfig,
    reps: usize,
    samples: Vec<f64>,
    tokens: usize,
}

fn run_once(
    decoder: &Decoder,
    model: &dyn LayerwiseModel,
    prompts: &[TokenSequence],
    dcfg: &DecodeConfig,
    deco: &DecoConfig,
) -> Result<(Duration, usize)> {
    let start = Instant::now();
    let mut tokens = 0;
    for p in prompts {
        tokens += decoder.decode(model, p, dcfg, deco)?.tokens.len();
    }
    Ok((start.elapsed(), tokens))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Interleaves baseline and treatment runs (alternating which goes first)
/// and reports the median per-token latency of each.
pub fn bench(
    model: &dyn LayerwiseModel,
    prompts: &[TokenSequence],
    dcfg: &DecodeConfig,
    baseline: &DecoConfig,
    treatment: &DecoConfig,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if prompts.len() < MIN_PROMPTS {
        return Err(Error::invalid(format!(
            "benchmark needs at least {MIN_PROMPTS} prompts, got {}",
            prompts.len()
        )));
    }
    if cfg.runs == 0 {
        return Err(Error::invalid("benchmark needs at least one run"));
    }
    let decoder = Decoder::default();
    let mut arms = [
        Arm {
            deco: baseline,
            reps: 1,
            samples: Vec::new(),
            tokens: 0,
        },
        Arm {
            deco: treatment,
            reps: 1,
            samples: Vec::new(),
            tokens: 0,
        },
    ];
    // calibrate repetitions so each sample clears the timer floor
    for arm in arms.iter_mut() {
        loop {
            let mut elapsed = Duration::ZERO;
            for _ in 0..arm.reps {
                elapsed += run_once(&decoder, model, prompts, dcfg, arm.deco)?.0;
            }
            if elapsed >= cfg.min_sample || arm.reps >= 1 << 16 {
                break;
            }
            arm.reps *= 2;
        }
    }
    for r in 0..cfg.warmup + cfg.runs {
        let order = if r % 2 == 0 { [0, 1] } else { [1, 0] };
        for i in order {
            let arm = &mut arms[i];
            let mut elapsed = Duration::ZERO;
            let mut tokens = 0;
            for _ in 0..arm.reps {
                let (e, t) = run_once(&decoder, model, prompts, dcfg, arm.deco)?;
                elapsed += e;
                tokens += t;
            }
            if tokens == 0 {
                return Err(Error::invalid("benchmark decoded no tokens"));
            }
            if r >= cfg.warmup {
                arm.samples.push(elapsed.as_secs_f64() / tokens as f64);
                arm.tokens = tokens / arm.reps;
            }
        }
    }
    let stats = |arm: &Arm<'_>| {
        let m = median(&arm.samples);
        LatencyStats {
            median_latency_per_token: m,
            throughput_tokens_per_sec: if m > 0.0 { 1.0 / m } else { f64::INFINITY },
            tokens_per_run: arm.tokens,
            samples: arm.samples.clone(),
        }
    };
    let baseline = stats(&arms[0]);
    let treatment = stats(&arms[1]);
    Ok(BenchReport {
        prompts: prompts.len(),
        config: *cfg,
        ratio: treatment.median_latency_per_token / baseline.median_latency_per_token,
        baseline,
        treatment,
    })
}
