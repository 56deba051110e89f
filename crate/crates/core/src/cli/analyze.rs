//! `analyze` subcommands over a trace plus labels sidecar.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{emit, AnalyzeCmd, Cli, Interval, TraceInput};
use crate::analysis::{
    activation_histogram, detect_activation, hit_rate, overlap_rate, perturbation_ablation, probe_accuracy,
    probe_dataset, probe_train, read_labels, Activation, ActivationHistogram, ActivationQuery, HitRateReport,
    LabeledStep, ProbeAccuracy, ProbeModel, ProbeSplit, ProbeTrainConfig, StepLabel,
};
use crate::deco::default_interval;
use crate::error::{Error, Result};
use crate::eval::read_jsonl;
use crate::model::Trace;

fn load(input: &TraceInput) -> Result<(Trace, Vec<StepLabel>)> {
    let trace = Trace::open(&input.trace)?;
    let labels = read_labels(&input.labels, &trace)?;
    Ok((trace, labels))
}

/// Ground-truth sets for every label that has one.
fn ground_truths(labels: &[StepLabel]) -> Vec<(usize, Vec<usize>)> {
    labels
        .iter()
        .filter(|l| !l.ground_truth_tokens.is_empty())
        .map(|l| (l.step_index, l.ground_truth()))
        .collect()
}

fn labeled<'a>(trace: &'a Trace, gts: &'a [(usize, Vec<usize>)]) -> Result<Vec<LabeledStep<'a>>> {
    if gts.is_empty() {
        return Err(Error::invalid("no labelled steps carry ground-truth tokens"));
    }
    gts.iter()
        .map(|(i, gt)| {
            Ok(LabeledStep {
                step: trace.step(*i)?,
                ground_truth: gt,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ActivationEntry {
    step_index: usize,
    activation: Option<Activation>,
}

#[derive(Debug, Serialize)]
struct ActivationReport {
    threshold: f64,
    top_p: f64,
    activated: usize,
    total: usize,
    histogram: ActivationHistogram,
    steps: Vec<ActivationEntry>,
}

#[derive(Debug, Serialize)]
struct HitRateEntry {
    #[serde(flatten)]
    report: HitRateReport,
    /// Steps whose planted layer lies inside the interval, when labels carry one.
    planted_in_interval: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ProbeLayerReport {
    layer: usize,
    final_loss: f64,
    train: ProbeAccuracy,
    in_dist: Option<ProbeAccuracy>,
    ood: Option<ProbeAccuracy>,
}

#[derive(Debug, Serialize)]
struct ProbeEvalEntry {
    layer: usize,
    accuracy: ProbeAccuracy,
}

fn interval_or_default(interval: Option<Interval>, num_layers: usize) -> Interval {
    interval.unwrap_or_else(|| {
        let (lo, hi) = default_interval(num_layers);
        Interval(lo, hi)
    })
}

fn split_accuracy(model: &ProbeModel, data: &crate::analysis::ProbeDataset, split: ProbeSplit) -> Result<Option<ProbeAccuracy>> {
    let ex = data.split(split);
    if ex.is_empty() {
        return Ok(None);
    }
    probe_accuracy(model, &ex).map(Some)
}

pub fn run(cli: &Cli, cmd: &AnalyzeCmd) -> Result<()> {
    let out = cli.out.as_deref();
    match cmd {
        AnalyzeCmd::Activation { input, threshold, top_p } => {
            // reject a bad threshold before touching any files
            ActivationQuery {
                ground_truth: vec![0],
                candidate_top_p: *top_p,
                threshold: *threshold,
            }
            .validate()?;
            let (trace, labels) = load(input)?;
            let mut steps = Vec::new();
            for (i, gt) in ground_truths(&labels) {
                let query = ActivationQuery {
                    ground_truth: gt,
                    candidate_top_p: *top_p,
                    threshold: *threshold,
                };
                steps.push(ActivationEntry {
                    step_index: i,
                    activation: detect_activation(trace.step(i)?, &query)?,
                });
            }
            let found: Vec<Option<Activation>> = steps.iter().map(|s| s.activation.clone()).collect();
            emit(
                &ActivationReport {
                    threshold: *threshold,
                    top_p: *top_p,
                    activated: found.iter().flatten().count(),
                    total: steps.len(),
                    histogram: activation_histogram(&found, trace.dims().num_layers),
                    steps,
                },
                out,
            )
        }
        AnalyzeCmd::Hitrate { input, intervals, top_p } => {
            let (trace, labels) = load(input)?;
            let gts = ground_truths(&labels);
            let steps = labeled(&trace, &gts)?;
            let planted: Vec<Option<usize>> = labels
                .iter()
                .filter(|l| !l.ground_truth_tokens.is_empty())
                .map(|l| l.planted_layer)
                .collect();
            let intervals = if intervals.is_empty() {
                vec![interval_or_default(None, trace.dims().num_layers)]
            } else {
                intervals.clone()
            };
            let mut reports = Vec::new();
            for Interval(lo, hi) in intervals {
                let report = hit_rate(&steps, lo, hi, *top_p)?;
                let planted_in_interval = planted
                    .iter()
                    .all(Option::is_some)
                    .then(|| planted.iter().flatten().filter(|&&l| (lo..=hi).contains(&l)).count());
                reports.push(HitRateEntry {
                    report,
                    planted_in_interval,
                });
            }
            emit(&BTreeMap::from([("intervals", reports)]), out)
        }
        AnalyzeCmd::Overlap { input, top_p } => {
            let (trace, labels) = load(input)?;
            let mut with = Vec::new();
            let mut without = Vec::new();
            for l in &labels {
                if let Some(p) = l.paired_no_visual_step {
                    with.push(trace.step(l.step_index)?);
                    without.push(trace.step(p)?);
                }
            }
            if with.is_empty() {
                return Err(Error::invalid("no labels carry paired_no_visual_step"));
            }
            emit(&overlap_rate(&with, &without, *top_p)?, out)
        }
        AnalyzeCmd::Perturb {
            input,
            interval,
            top_p,
            magnitude,
            trials,
        } => {
            let (trace, labels) = load(input)?;
            let gts = ground_truths(&labels);
            let steps = labeled(&trace, &gts)?;
            let Interval(lo, hi) = interval_or_default(*interval, trace.dims().num_layers);
            let seed = cli.seed.unwrap_or(0);
            emit(&perturbation_ablation(&steps, lo, hi, *top_p, *magnitude, *trials, seed)?, out)
        }
        AnalyzeCmd::ProbeTrain {
            input,
            layers,
            learning_rate,
            epochs,
            l2,
            probes_out,
        } => {
            let (trace, labels) = load(input)?;
            let mut cfg = ProbeTrainConfig::default();
            if let Some(v) = learning_rate {
                cfg.learning_rate = *v;
            }
            if let Some(v) = epochs {
                cfg.epochs = *v;
            }
            if let Some(v) = l2 {
                cfg.l2 = *v;
            }
            let layers: Vec<usize> = if layers.is_empty() {
                (1..=trace.dims().num_layers).collect()
            } else {
                layers.clone()
            };
            let mut reports = Vec::new();
            let mut probes = Vec::new();
            for layer in layers {
                let data = probe_dataset(&trace, &labels, layer)?;
                let model = probe_train(&data, layer, &cfg)?;
                reports.push(ProbeLayerReport {
                    layer,
                    final_loss: model.final_loss,
                    train: probe_accuracy(&model, &data.split(ProbeSplit::Train))?,
                    in_dist: split_accuracy(&model, &data, ProbeSplit::InDist)?,
                    ood: split_accuracy(&model, &data, ProbeSplit::Ood)?,
                });
                probes.push(model);
            }
            if let Some(p) = probes_out {
                let mut text = serde_json::to_string_pretty(&probes)?;
                text.push('\n');
                std::fs::write(p, text)?;
            }
            emit(&BTreeMap::from([("layers", reports)]), out)
        }
        AnalyzeCmd::ProbeEval { input, probes, split } => {
            let split: ProbeSplit = serde_json::from_value(serde_json::Value::String(split.clone()))
                .map_err(|_| Error::Config(format!("unknown probe split {split:?}; use train, in_dist or ood")))?;
            let (trace, labels) = load(input)?;
            let models: Vec<ProbeModel> = match probes.extension().and_then(|e| e.to_str()) {
                Some("jsonl") => read_jsonl(probes)?,
                _ => serde_json::from_slice(&std::fs::read(probes)?)?,
            };
            let mut entries = Vec::new();
            for model in &models {
                let data = probe_dataset(&trace, &labels, model.layer)?;
                if data.dim() != model.weights.len() {
                    return Err(Error::invalid(format!(
                        "probe for layer {} has {} weights, trace hidden size is {}",
                        model.layer,
                        model.weights.len(),
                        data.dim()
                    )));
                }
                entries.push(ProbeEvalEntry {
                    layer: model.layer,
                    accuracy: probe_accuracy(model, &data.split(split))?,
                });
            }
            emit(&BTreeMap::from([("layers", entries)]), out)
        }
    }
}
