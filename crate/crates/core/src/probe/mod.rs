//! Position probes over captured hidden states.
//!
//! Two probe families: an l2-regularized logistic regression (binary, used
//! for steering directions) and a one-hidden-layer MLP (K-way, used to
//! measure how predictable the answer position is at each site).

mod dataset;
mod logreg;
mod mlp;
mod sweep;

use thiserror::Error;

use crate::toylm::ModelError;

pub use dataset::{ActivationDataset, ActivationRecord, CapturePoint, SiteData};
pub use logreg::{sign_align, train_logreg, LogRegProbe};
pub use mlp::{macro_f1, stratified_split, train_mlp, MlpConfig, MlpProbe, MlpWeights};
pub use sweep::{majority_f1, random_f1, sweep, ProbeCell, ProbeReport, SweepAxes};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("class {class} has {count} samples, need at least {min}")]
    TooFewSamples { class: usize, count: usize, min: usize },
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("optimizer did not converge in {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("probe direction is orthogonal to the class-mean difference")]
    DegenerateDirection,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class {class} is absent from the training split")]
    Stratification { class: usize },
    #[error("label {label} outside 1..={k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("no activations for site (layer {layer}, token {token})")]
    MissingSite { layer: usize, token: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("activation dump line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}
