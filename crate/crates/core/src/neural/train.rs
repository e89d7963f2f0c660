//! Shared training machinery: the optimizer, batching, and the epoch trace.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.999;
pub const ADAMW_EPS: f64 = 1e-8;
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;

/// AdamW with weight decay fully decoupled from the learning rate:
/// a decayed parameter shrinks by exactly `1 − weight_decay` per step even
/// at `lr = 0`. Decay applies only where the decay mask is set (weight
/// matrices, not biases or normalization parameters).
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n_params: usize) -> AdamW {
        AdamW {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: ADAMW_BETA1,
            beta2: ADAMW_BETA2,
            eps: ADAMW_EPS,
            weight_decay: ADAMW_WEIGHT_DECAY,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], decay_mask: &[bool], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), decay_mask.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if decay_mask[i] {
                params[i] *= 1.0 - self.weight_decay;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Per-epoch loss curves and the early-stopping bookkeeping.
///
/// Epochs are 1-based. `best_epoch` minimizes the validation loss.
/// `stopped_epoch` is the last epoch still inside the patience budget;
/// the epoch that exhausts the budget is evaluated (it appears in the loss
/// curves) but not counted, so `stopped_epoch ≤ best_epoch + patience`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainTrace {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

/// Strict-improvement early stopping with best-weights snapshotting.
pub struct EarlyStopper {
    patience: usize,
    best_val: f64,
    pub best_epoch: usize,
    since_best: usize,
    pub best_params: Vec<f64>,
}

impl EarlyStopper {
    pub fn new(patience: usize, initial_params: &[f64]) -> EarlyStopper {
        EarlyStopper {
            patience,
            best_val: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            best_params: initial_params.to_vec(),
        }
    }

    /// Record an epoch result; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, params: &[f64]) -> bool {
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.best_params.clear();
            self.best_params.extend_from_slice(params);
            false
        } else {
            self.since_best += 1;
            self.since_best > self.patience
        }
    }

    pub fn stopped_epoch(&self, last_epoch: usize) -> usize {
        last_epoch.min(self.best_epoch + self.patience)
    }
}

/// Deterministic shuffled mini-batches.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
