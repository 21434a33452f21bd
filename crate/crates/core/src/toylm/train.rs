use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError, Params, ToyLmConfig, TokenDataset};
use crate::rng;

/// Optimizer settings. Adam with global-norm clipping, a short linear warmup
/// and cosine decay to a tenth of `lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
}

fn default_clip() -> f64 {
    1.0
}

fn default_warmup() -> usize {
    20
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            lr: 5e-3,
            batch_size: 32,
            seed: 0,
            grad_clip: default_clip(),
            warmup_steps: default_warmup(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss before each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn schedule(tc: &TrainConfig, step: usize, total: usize) -> f64 {
    if step < tc.warmup_steps {
        return tc.lr * (step + 1) as f64 / tc.warmup_steps as f64;
    }
    let span = total.saturating_sub(tc.warmup_steps).max(1);
    let frac = (step - tc.warmup_steps) as f64 / span as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos());
    tc.lr * (0.1 + 0.9 * cos)
}

/// Trains a fresh model on full sequences with next-token cross-entropy.
pub fn train(
    config: ToyLmConfig,
    dataset: &TokenDataset,
    tc: &TrainConfig,
) -> Result<(Model, TrainReport), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::Empty("training dataset"));
    }
    if tc.batch_size == 0 || tc.epochs == 0 || !(tc.lr > 0.0) {
        return Err(ModelError::InvalidConfig(
            "epochs, batch_size and lr must be positive".into(),
        ));
    }
    if dataset.vocab != config.vocab {
        return Err(ModelError::InvalidConfig(
            "dataset vocabulary differs from model vocabulary".into(),
        ));
    }
    let mut model = Model::new(config)?;
    let seqs = dataset.sequences();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = rng::seeded(tc.seed);
    let mut adam = Adam {
        m: Params::zeros(&config),
        v: Params::zeros(&config),
        t: 0,
    };
    let steps_per_epoch = seqs.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let mut report = TrainReport {
        step_losses: Vec::with_capacity(total),
        epoch_losses: Vec::with_capacity(tc.epochs),
        final_loss: f64::NAN,
    };
    let mut step = 0;
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let (loss, grads) = model.loss_and_grad(&batch)?;
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(ModelError::Diverged { step });
            }
            let scale = if norm > tc.grad_clip { tc.grad_clip / norm } else { 1.0 };
            adam.step(model.params_mut(), &grads, schedule(tc, step, total), scale);
            report.step_losses.push(loss);
            epoch_sum += loss;
            step += 1;
        }
        let mean = epoch_sum / steps_per_epoch as f64;
        log::debug!("epoch {} loss {mean:.4}", report.epoch_losses.len());
        report.epoch_losses.push(mean);
    }
    report.final_loss = *report.epoch_losses.last().expect("at least one epoch");
    model.set_final_loss(report.final_loss);
    Ok((model, report))
}
