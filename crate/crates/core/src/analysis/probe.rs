//! Per-layer logistic-regression probes over last-position hidden states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSplit {
    Train,
    InDist,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub features: Vec<f64>,
    /// `true` when the probed object exists in the image.
    pub label: bool,
    pub split: ProbeSplit,
}

/// Maximum allowed deviation of the train split's positive fraction from 0.5.
pub const BALANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    examples: Vec<ProbeExample>,
    dim: usize,
}

impl ProbeDataset {
    /// Checks uniform feature width and a balanced train split.
    pub fn new(examples: Vec<ProbeExample>) -> Result<Self> {
        let dim = examples
            .first()
            .map(|e| e.features.len())
            .ok_or_else(|| Error::DegenerateData("empty probe dataset".into()))?;
        if let Some(i) = examples.iter().position(|e| e.features.len() != dim) {
            return Err(Error::invalid(format!(
                "example {i} has {} features, expected {dim}",
                examples[i].features.len()
            )));
        }
        if examples.iter().any(|e| e.features.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite probe features"));
        }
        let ds = Self { examples, dim };
        let train = ds.split(ProbeSplit::Train);
        if !train.is_empty() {
            let pos = train.iter().filter(|e| e.label).count() as f64 / train.len() as f64;
            if (pos - 0.5).abs() > BALANCE_TOLERANCE {
                return Err(Error::DegenerateData(format!(
                    "train split positive fraction {pos:.3} is not balanced within ±{BALANCE_TOLERANCE}"
                )));
            }
        }
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn examples(&self) -> &[ProbeExample] {
        &self.examples
    }

    pub fn split(&self, split: ProbeSplit) -> Vec<&ProbeExample> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub layer: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub final_loss: f64,
}

impl ProbeModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        sigmoid(self.logit(x)) >= 0.5
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean binary cross-entropy plus `l2 / 2 * |w|^2` (bias unregularised).
pub fn probe_loss(weights: &[f64], bias: f64, examples: &[&ProbeExample], l2: f64) -> f64 {
    let n = examples.len() as f64;
    let ce: f64 = examples
        .iter()
        .map(|e| {
            let z = bias + weights.iter().zip(&e.features).map(|(w, v)| w * v).sum::<f64>();
            // -[y log s(z) + (1-y) log(1 - s(z))]
            if e.label {
                softplus(-z)
            } else {
                softplus(z)
            }
        })
        .sum::<f64>()
        / n;
    ce + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Analytic gradient of [`probe_loss`] with respect to `(weights, bias)`.
pub fn probe_gradient(weights: &[f64], bias: f64, examples: &[&ProbeExample], l2: f64) -> (Vec<f64>, f64) {
    let n = examples.len() as f64;
    let mut gw: Vec<f64> = weights.iter().map(|w| l2 * w).collect();
    let mut gb = 0.0;
    for e in examples {
        let z = bias + weights.iter().zip(&e.features).map(|(w, v)| w * v).sum::<f64>();
        let r = (sigmoid(z) - if e.label { 1.0 } else { 0.0 }) / n;
        for (g, v) in gw.iter_mut().zip(&e.features) {
            *g += r * v;
        }
        gb += r;
    }
    (gw, gb)
}

/// Full-batch gradient descent from zero initialisation on the train split.
pub fn probe_train(data: &ProbeDataset, layer: usize, cfg: &ProbeTrainConfig) -> Result<ProbeModel> {
    probe_train_on(&data.split(ProbeSplit::Train), data.dim(), layer, cfg)
}

pub fn probe_train_on(
    examples: &[&ProbeExample],
    dim: usize,
    layer: usize,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeModel> {
    let pos = examples.iter().filter(|e| e.label).count();
    let neg = examples.len() - pos;
    if pos < 2 || neg < 2 {
        return Err(Error::DegenerateData(format!(
            "probe training needs at least 2 examples per class, got {pos} positive and {neg} negative"
        )));
    }
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let (gw, gb) = probe_gradient(&w, b, examples, cfg.l2);
        for (wi, g) in w.iter_mut().zip(gw) {
            *wi -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * gb;
    }
    let final_loss = probe_loss(&w, b, examples, cfg.l2);
    Ok(ProbeModel {
        layer,
        weights: w,
        bias: b,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        l2: cfg.l2,
        final_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeAccuracy {
    pub all: f64,
    /// `None` when the split has no examples of that label.
    pub existent: Option<f64>,
    pub non_existent: Option<f64>,
    pub count: usize,
}

pub fn probe_accuracy(model: &ProbeModel, examples: &[&ProbeExample]) -> Result<ProbeAccuracy> {
    if examples.is_empty() {
        return Err(Error::invalid("probe accuracy on an empty split"));
    }
    let frac = |label: Option<bool>| {
        let sel: Vec<_> = examples.iter().filter(|e| label.is_none_or(|l| e.label == l)).collect();
        if sel.is_empty() {
            return None;
        }
        let correct = sel.iter().filter(|e| model.predict(&e.features) == e.label).count();
        Some(correct as f64 / sel.len() as f64)
    };
    Ok(ProbeAccuracy {
        all: frac(None).expect("nonempty"),
        existent: frac(Some(true)),
        non_existent: frac(Some(false)),
        count: examples.len(),
    })
}
