//! `decode`, `trace record`, `trace inspect` and `eval bench`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use super::{emit, num_workers, resolve_config, resolve_deco, Cli, ModelArgs, RunConfig, VERSION};
use crate::analysis::StepLabel;
use crate::decoding::{DecodeResult, Decoder, DEFAULT_ORDER};
use crate::error::{Error, Result};
use crate::eval::{bench as run_bench, BenchConfig, BenchReport, MIN_PROMPTS};
use crate::model::{LayerwiseModel, ModelDims, Recorder, TokenSequence, Trace, TraceHeader};
use crate::numerics::{argmax_tiebreak, softmax};

#[derive(Debug, Serialize)]
pub struct PromptReport {
    pub index: usize,
    pub prompt_len: usize,
    pub visual_prefix_len: usize,
    pub tokens: Vec<u32>,
    pub anchor_layers: Vec<usize>,
    pub token_probs: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub prompts: usize,
    pub generated_tokens: usize,
    /// Anchor layer to number of steps that selected it.
    pub anchor_layer_counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_prompt_seconds: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub toolkit_version: &'static str,
    pub config: RunConfig,
    pub model: ModelDims,
    pub processors: Vec<&'static str>,
    pub results: Vec<PromptReport>,
    pub aggregate: Aggregate,
    pub timing: Timing,
}

fn prepare(cli: &Cli, m: &ModelArgs) -> Result<(RunConfig, Box<dyn LayerwiseModel>, Vec<TokenSequence>)> {
    let mut cfg = resolve_config(cli, m)?;
    let model = cfg.model.load()?;
    resolve_deco(&mut cfg, m, model.dims())?;
    let prompts = cfg.load_prompts(model.dims().vocab_size)?;
    Ok((cfg, model, prompts))
}

fn decode_all(cfg: &RunConfig, model: &dyn LayerwiseModel, prompts: &[TokenSequence]) -> Result<Vec<DecodeResult>> {
    let deco = cfg.deco.expect("resolved");
    let decoder = Decoder::default();
    let workers = if cfg.model.is_replay() { 1 } else { num_workers()? };
    if workers == 1 {
        return prompts.iter().map(|p| decoder.decode(model, p, &cfg.decode, &deco)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    log::debug!("decoding {} prompts on {workers} workers", prompts.len());
    pool.install(|| {
        prompts
            .par_iter()
            .map(|p| decoder.decode(model, p, &cfg.decode, &deco))
            .collect()
    })
}

fn report(cfg: RunConfig, dims: ModelDims, prompts: &[TokenSequence], results: Vec<DecodeResult>, total: Duration) -> RunReport {
    let mut anchor_layer_counts = BTreeMap::new();
    let mut generated_tokens = 0;
    let mut per_prompt_seconds = Vec::with_capacity(results.len());
    let reports = results
        .into_iter()
        .zip(prompts)
        .enumerate()
        .map(|(index, (r, p))| {
            generated_tokens += r.tokens.len();
            per_prompt_seconds.push(r.duration.as_secs_f64());
            let anchor_layers: Vec<usize> = r.anchors.iter().map(|a| a.anchor_layer).collect();
            for &l in &anchor_layers {
                *anchor_layer_counts.entry(l).or_insert(0) += 1;
            }
            PromptReport {
                index,
                prompt_len: p.len(),
                visual_prefix_len: p.visual_prefix_len,
                tokens: r.tokens,
                anchor_layers,
                token_probs: r.token_probs,
            }
        })
        .collect();
    RunReport {
        toolkit_version: VERSION,
        config: cfg,
        model: dims,
        processors: DEFAULT_ORDER.to_vec(),
        aggregate: Aggregate {
            prompts: prompts.len(),
            generated_tokens,
            anchor_layer_counts,
        },
        results: reports,
        timing: Timing {
            total_seconds: total.as_secs_f64(),
            per_prompt_seconds,
        },
    }
}

pub fn decode(cli: &Cli, m: &ModelArgs) -> Result<()> {
    let (cfg, model, prompts) = prepare(cli, m)?;
    let start = Instant::now();
    let results = decode_all(&cfg, model.as_ref(), &prompts)?;
    let out = cfg.out.clone();
    emit(&report(cfg, model.dims(), &prompts, results, start.elapsed()), out.as_deref())
}

#[derive(Debug, Serialize)]
struct RecordReport {
    #[serde(flatten)]
    run: RunReport,
    trace: TraceHeader,
    trace_path: String,
}

pub fn record(cli: &Cli, m: &ModelArgs, path: &Path, hidden: bool, labels_out: Option<&Path>) -> Result<()> {
    let (cfg, model, prompts) = prepare(cli, m)?;
    if cfg.model.is_replay() {
        return Err(Error::Config("recording needs a toy or weight-dump model".into()));
    }
    let dims = model.dims();
    let recorder = if hidden {
        Recorder::with_hidden(model)
    } else {
        Recorder::new(model)
    };
    let deco = cfg.deco.expect("resolved");
    let decoder = Decoder::default();
    let start = Instant::now();
    let mut results = Vec::with_capacity(prompts.len());
    let mut steps = Vec::new();
    let mut labels = Vec::new();
    // one prompt at a time so the trace keeps call order
    for p in &prompts {
        results.push(decoder.decode(&recorder, p, &cfg.decode, &deco)?);
        let first = steps.len();
        steps.extend(recorder.take());
        if labels_out.is_some() {
            recorder.forward(&p.without_visual()?, hidden)?;
            steps.extend(recorder.take());
            labels.push(StepLabel {
                step_index: first,
                ground_truth_tokens: vec![],
                hallucinated_token: None,
                paired_no_visual_step: Some(steps.len() - 1),
                exists: None,
                split: None,
                planted_layer: None,
            });
        }
    }
    let elapsed = start.elapsed();
    let trace = Trace::from_steps(steps)?;
    trace.write(path)?;
    if let Some(lp) = labels_out {
        let mut text = String::new();
        for l in &labels {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        std::fs::write(lp, text)?;
    }
    log::info!("wrote {} steps to {}", trace.len(), path.display());
    let out = cfg.out.clone();
    let report = RecordReport {
        trace: *trace.header(),
        trace_path: path.display().to_string(),
        run: report(cfg, dims, &prompts, results, elapsed),
    };
    emit(&report, out.as_deref())
}

#[derive(Debug, Serialize)]
struct StepSummary {
    final_top_token: usize,
    final_top_prob: f64,
    /// Highest softmax probability per layer.
    layer_max_probs: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct InspectReport {
    header: TraceHeader,
    dims: ModelDims,
    /// Mean over steps of each layer's highest probability.
    mean_layer_max_prob: Vec<f64>,
    steps: Vec<StepSummary>,
}

pub fn inspect(cli: &Cli, path: &Path) -> Result<()> {
    let trace = Trace::open(path)?;
    let n = trace.dims().num_layers;
    let mut mean = vec![0.0; n];
    let mut steps = Vec::with_capacity(trace.len());
    for step in trace.steps() {
        let mut layer_max_probs = Vec::with_capacity(n);
        for layer in 1..=n {
            let p = softmax(step.layer_logits(layer))?;
            layer_max_probs.push(p.iter().copied().fold(0.0, f64::max));
        }
        for (m, p) in mean.iter_mut().zip(&layer_max_probs) {
            *m += p;
        }
        let final_top_token = argmax_tiebreak(step.final_logits())?;
        steps.push(StepSummary {
            final_top_token,
            final_top_prob: softmax(step.final_logits())?[final_top_token],
            layer_max_probs,
        });
    }
    if !trace.is_empty() {
        mean.iter_mut().for_each(|m| *m /= trace.len() as f64);
    }
    emit(
        &InspectReport {
            header: *trace.header(),
            dims: trace.dims(),
            mean_layer_max_prob: mean,
            steps,
        },
        cli.out.as_deref(),
    )
}

#[derive(Debug, Serialize)]
struct BenchOutput {
    toolkit_version: &'static str,
    config: RunConfig,
    baseline: crate::deco::DecoConfig,
    treatment: crate::deco::DecoConfig,
    prompts: usize,
    runs: usize,
    warmup: usize,
    tokens_per_run: usize,
    timing: BenchReport,
}

pub fn bench(cli: &Cli, m: &ModelArgs, runs: usize, warmup: usize, self_compare: bool) -> Result<()> {
    let mut m = m.clone();
    if m.prompts.is_none() {
        m.num_prompts = Some(m.num_prompts.unwrap_or(MIN_PROMPTS).max(MIN_PROMPTS));
    }
    let (mut cfg, model, prompts) = prepare(cli, &m)?;
    if cfg.model.is_replay() {
        return Err(Error::Config("benchmarking needs a toy or weight-dump model".into()));
    }
    let mut treatment = cfg.deco.expect("resolved");
    treatment.enabled = true;
    let mut baseline = treatment;
    baseline.enabled = false;
    if self_compare {
        treatment = baseline;
    }
    cfg.deco = Some(treatment);
    let bcfg = BenchConfig {
        runs,
        warmup,
        ..BenchConfig::default()
    };
    let report = run_bench(model.as_ref(), &prompts, &cfg.decode, &baseline, &treatment, &bcfg)?;
    let out = cfg.out.clone();
    emit(
        &BenchOutput {
            toolkit_version: VERSION,
            prompts: prompts.len(),
            runs,
            warmup,
            tokens_per_run: report.treatment.tokens_per_run,
            config: cfg,
            baseline,
            treatment,
            timing: report,
        },
        out.as_deref(),
    )
}
