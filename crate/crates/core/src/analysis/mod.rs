//! Mechanism analyses over layerwise steps.

mod labels;
mod layers;
mod probe;

pub use labels::{probe_dataset, read_labels, StepLabel};
pub use layers::{
    activation_histogram, detect_activation, hit_rate, overlap_rate, perturb_layers, perturbation_ablation,
    rescore_at, Activation, ActivationHistogram, ActivationQuery, HitRateReport, LabeledStep, OverlapReport,
    PerturbationReport, CANDIDATE_TOP_P, DEFAULT_ACTIVATION_THRESHOLD,
};
pub use probe::{
    probe_accuracy, probe_gradient, probe_loss, probe_train, probe_train_on, ProbeAccuracy, ProbeDataset,
    ProbeExample, ProbeModel, ProbeSplit, ProbeTrainConfig, BALANCE_TOLERANCE,
};
