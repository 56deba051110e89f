//! Labels sidecar: one JSON object per line, one line per trace step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::{ProbeDataset, ProbeExample, ProbeSplit};
use crate::error::{Error, Result};
use crate::eval::read_jsonl;
use crate::model::Trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLabel {
    pub step_index: usize,
    pub ground_truth_tokens: Vec<u32>,
    pub hallucinated_token: Option<u32>,
    pub paired_no_visual_step: Option<usize>,
    /// Object-existence label for probe training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exists: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<ProbeSplit>,
    /// Layer where a synthetic fixture planted its ground-truth peak.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_layer: Option<usize>,
}

impl StepLabel {
    pub fn ground_truth(&self) -> Vec<usize> {
        self.ground_truth_tokens.iter().map(|&t| t as usize).collect()
    }
}

/// Reads a sidecar and checks every record against the trace's shape.
pub fn read_labels(path: impl AsRef<Path>, trace: &Trace) -> Result<Vec<StepLabel>> {
    let path = path.as_ref();
    let labels: Vec<StepLabel> = read_jsonl(path)?;
    let dims = trace.dims();
    for (line, l) in labels.iter().enumerate() {
        let bad = |message: String| Error::Schema {
            path: path.display().to_string(),
            line: line + 1,
            message,
        };
        if l.step_index >= trace.len() {
            return Err(bad(format!(
                "step_index {} outside trace of {} steps",
                l.step_index,
                trace.len()
            )));
        }
        if let Some(t) = l
            .ground_truth_tokens
            .iter()
            .chain(&l.hallucinated_token)
            .find(|&&t| t as usize >= dims.vocab_size)
        {
            return Err(bad(format!("token {t} outside vocabulary of {}", dims.vocab_size)));
        }
        if let Some(p) = l.paired_no_visual_step.filter(|&p| p >= trace.len()) {
            return Err(bad(format!("paired step {p} outside trace")));
        }
        if let Some(pl) = l.planted_layer.filter(|&pl| pl == 0 || pl > dims.num_layers) {
            return Err(bad(format!("planted layer {pl} outside 1..={}", dims.num_layers)));
        }
    }
    Ok(labels)
}

/// Probe examples from one layer's hidden states for every labelled step that
/// carries `exists` and `split`.
pub fn probe_dataset(trace: &Trace, labels: &[StepLabel], layer: usize) -> Result<ProbeDataset> {
    if !trace.header().has_hidden() {
        return Err(Error::invalid("trace has no hidden states"));
    }
    let mut examples = Vec::new();
    for l in labels {
        let (Some(label), Some(split)) = (l.exists, l.split) else {
            continue;
        };
        let hidden = trace
            .step(l.step_index)?
            .layer_hidden(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} outside trace")))?;
        examples.push(ProbeExample {
            features: hidden.iter().map(|&v| v as f64).collect(),
            label,
            split,
        });
    }
    if examples.is_empty() {
        return Err(Error::DegenerateData("no labels carry exists/split fields".into()));
    }
    ProbeDataset::new(examples)
}
