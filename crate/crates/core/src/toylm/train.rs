use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dpo::{pair_logps, total_loss_grad, DpoConfig, EncodedPair};
use super::{c, Scalar, ToyError, ToyModel};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam { learning_rate: c(learning_rate), beta1: c(0.9), beta2: c(0.999), eps: c(1e-8), m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dpo: DpoConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { dpo: DpoConfig::default(), batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss over the training pairs before any update.
    pub initial_loss: f64,
    /// Mean total loss of each epoch, accumulated as its batches are seen.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 3;

/// Trains `policy` with DPO plus evidence supervision against the frozen
/// `reference`. Batches are reshuffled every epoch from a seed derived per
/// epoch.
pub fn train<T: Scalar>(policy: &mut ToyModel<T>, reference: &ToyModel<T>, pairs: &[EncodedPair], cfg: &TrainConfig) -> Result<TrainReport, ToyError> {
    cfg.dpo.validate()?;
    if pairs.is_empty() {
        return Err(ToyError::EmptyTrainingSet);
    }
    if cfg.batch_size == 0 {
        return Err(ToyError::Config("batch_size must be positive".into()));
    }
    let refs: Vec<(T, T)> = pairs.iter().map(|p| pair_logps(reference, p)).collect::<Result<_, _>>()?;
    let n = policy.n_params();
    let mut scratch = vec![T::zero(); n];
    let mut initial = 0.0;
    for (p, r) in pairs.iter().zip(&refs) {
        initial += total_loss_grad(policy, *r, p, &cfg.dpo, T::zero(), &mut scratch)?.to_f64().unwrap_or(f64::NAN);
    }
    initial /= pairs.len() as f64;

    let mut adam = Adam::new(n, cfg.dpo.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = TrainReport { initial_loss: initial, loss_curve: Vec::with_capacity(cfg.dpo.epochs), steps: 0 };
    let mut above = 0;
    for epoch in 0..cfg.dpo.epochs {
        order.shuffle(&mut rng(derive_seed(cfg.seed, &["epoch", &epoch.to_string()])));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            scratch.fill(T::zero());
            let scale = T::one() / c(batch.len() as f64);
            for &i in batch {
                sum += total_loss_grad(policy, refs[i], &pairs[i], &cfg.dpo, scale, &mut scratch)?.to_f64().unwrap_or(f64::NAN);
            }
            adam.step(&mut policy.params, &scratch);
            report.steps += 1;
        }
        let mean = sum / pairs.len() as f64;
        log::info!("epoch {} loss {mean:.5}", epoch + 1);
        report.loss_curve.push(mean);
        if !mean.is_finite() || mean > DIVERGENCE_FACTOR * initial.abs() {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(ToyError::DivergenceDetected { epoch: epoch + 1, loss: mean, initial });
            }
        } else {
            above = 0;
        }
    }
    Ok(report)
}

/// Fraction of pairs where the model assigns the chosen response a higher
/// log-probability than the rejected one.
pub fn preference_accuracy<T: Scalar>(model: &ToyModel<T>, pairs: &[EncodedPair]) -> Result<f64, ToyError> {
    if pairs.is_empty() {
        return Err(ToyError::EmptyTrainingSet);
    }
    let mut wins = 0;
    for p in pairs {
        let (w, l) = pair_logps(model, p)?;
        if w > l {
            wins += 1;
        }
    }
    Ok(wins as f64 / pairs.len() as f64)
}
