//! Dilated 1D convolutional network over per-residue coordinate tensors.
//!
//! Input tensors are (channels × positions) per sample: 8 coordinate/gap
//! channels over the 304-position concatenated VH+VL frame. The network is
//! a stem convolution to `rep_dim` channels followed by `n_layers − 1`
//! dilated convolutions of width `round(rep_dim · expansion)`, dilation
//! doubling per layer (1, 2, 4, 8, 16), kernel width 3, zero "same"
//! padding, optional batch normalization, rectified-linear activations,
//! global mean pooling over positions, and a linear head.

use ndarray::{Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::he_normal;
use super::mlp::{batch_loss, loss_grad, sigmoid};
use super::train::{make_batches, AdamW, EarlyStopper, TrainTrace};
use crate::error::{CoreError, Result};
use crate::structure::{CHANNELS, PAIR_POSITIONS};
use crate::Task;

pub const KERNEL: usize = 3;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub n_layers: usize,
    pub rep_dim: usize,
    pub expansion: f64,
    pub batch_norm: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: Task,
}

impl CnnConfig {
    /// Reference classification setting: 5 dilated layers, width 32,
    /// expansion 1.4, no batch norm, lr 3.8e-4, batch 32, 13 epochs.
    pub fn classification_default() -> CnnConfig {
        CnnConfig {
            n_layers: 5,
            rep_dim: 32,
            expansion: 1.4,
            batch_norm: false,
            lr: 3.8e-4,
            batch_size: 32,
            epochs: 13,
            seed: 0,
            task: Task::Classify,
        }
    }

    /// Reference regression setting: 1 dilated layer, width 16,
    /// expansion 2.7, no batch norm, lr 1.8e-4, batch 32, 10 epochs.
    pub fn regression_default() -> CnnConfig {
        CnnConfig {
            n_layers: 1,
            rep_dim: 16,
            expansion: 2.7,
            batch_norm: false,
            lr: 1.8e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            task: Task::Regress,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.n_layers) {
            return Err(CoreError::config("n_layers must be in [1,5]"));
        }
        if ![16, 32, 64, 128].contains(&self.rep_dim) {
            return Err(CoreError::config("rep_dim must be one of {16, 32, 64, 128}"));
        }
        if !(1.0..=4.0).contains(&self.expansion) {
            return Err(CoreError::config("expansion must be in [1.0, 4.0]"));
        }
        if !(1e-4..=1e-2).contains(&self.lr) {
            return Err(CoreError::config("learning rate must be in [1e-4, 1e-2]"));
        }
        if ![16, 32, 64].contains(&self.batch_size) {
            return Err(CoreError::config("batch size must be one of {16, 32, 64}"));
        }
        if !(10..=50).contains(&self.epochs) {
            return Err(CoreError::config("epochs must be in [10, 50]"));
        }
        Ok(())
    }

    /// Dilation of layer `l` (1-based) is `2^(l−1)`.
    pub fn dilation(l: usize) -> usize {
        1 << (l - 1)
    }

    fn expanded_width(&self) -> usize {
        (self.rep_dim as f64 * self.expansion).round() as usize
    }
}

#[derive(Debug, Clone)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    dilation: usize,
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
}

/// Batch-normalization running statistics (not trained parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Cnn1d {
    pub cfg: CnnConfig,
    pub in_channels: usize,
    pub positions: usize,
    pub params: Vec<f64>,
    decay_mask: Vec<bool>,
    layers: Vec<ConvSpec>,
    head_w: usize,
    head_b: usize,
    pub running: RunningStats,
}

impl Cnn1d {
    pub fn init(
        cfg: CnnConfig,
        in_channels: usize,
        positions: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Cnn1d> {
        cfg.validate()?;
        if in_channels == 0 || positions == 0 {
            return Err(CoreError::config("input tensor dims must be positive"));
        }

        let mut layers = Vec::new();
        let mut offset = 0;
        let mut prev = in_channels;
        for l in 1..=cfg.n_layers {
            let out = if l == 1 { cfg.rep_dim } else { cfg.expanded_width() };
            let w = offset;
            let b = w + out * prev * KERNEL;
            let (gamma, beta, next) = if cfg.batch_norm {
                (b + out, b + 2 * out, b + 3 * out)
            } else {
                (usize::MAX, usize::MAX, b + out)
            };
            layers.push(ConvSpec { in_ch: prev, out_ch: out, dilation: CnnConfig::dilation(l), w, b, gamma, beta });
            offset = next;
            prev = out;
        }
        let head_w = offset;
        let head_b = head_w + prev;
        let total = head_b + 1;

        let mut params = vec![0.0; total];
        let mut decay_mask = vec![false; total];
        for spec in &layers {
            let fan_in = spec.in_ch * KERNEL;
            for i in 0..spec.out_ch * spec.in_ch * KERNEL {
                params[spec.w + i] = he_normal(rng, fan_in);
                decay_mask[spec.w + i] = true;
            }
            if cfg.batch_norm {
                for o in 0..spec.out_ch {
                    params[spec.gamma + o] = 1.0;
                }
            }
        }
        for i in 0..prev {
            params[head_w + i] = he_normal(rng, prev);
            decay_mask[head_w + i] = true;
        }

        let running = RunningStats {
            mean: layers.iter().map(|s| vec![0.0; s.out_ch]).collect(),
            var: layers.iter().map(|s| vec![1.0; s.out_ch]).collect(),
        };

        Ok(Cnn1d {
            cfg,
            in_channels,
            positions,
            params,
            decay_mask,
            layers,
            head_w,
            head_b,
            running,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn decay_mask(&self) -> &[bool] {
        &self.decay_mask
    }

    /// Forward pass. `batch_stats` selects batch statistics (training /
    /// gradient checks) versus running statistics (evaluation) for batch
    /// norm. Never mutates the model.
    fn forward(&self, params: &[f64], x: ArrayView3<f64>, batch_stats: bool) -> Cache {
        let b = x.shape()[0];
        let p = self.positions;
        let mut acts: Vec<Array3<f64>> = vec![x.to_owned()];
        let mut pre_acts = Vec::new();
        let mut xhats = Vec::new();
        let mut mus = Vec::new();
        let mut vars = Vec::new();

        for (li, spec) in self.layers.iter().enumerate() {
            let input = &acts[li];
            let mut z = Array3::zeros((b, spec.out_ch, p));
            for bi in 0..b {
                for o in 0..spec.out_ch {
                    let bias = params[spec.b + o];
                    for pos in 0..p {
                        let mut acc = bias;
                        for k in 0..KERNEL {
                            let off = (k as isize - 1) * spec.dilation as isize;
                            let q = pos as isize + off;
                            if q < 0 || q >= p as isize {
                                continue;
                            }
                            let q = q as usize;
                            let w_base = spec.w + (o * spec.in_ch) * KERNEL + k;
                            for i in 0..spec.in_ch {
                                acc += params[w_base + i * KERNEL] * input[(bi, i, q)];
                            }
                        }
                        z[(bi, o, pos)] = acc;
                    }
                }
            }

            let (pre_act, xhat, mu, var) = if self.cfg.batch_norm {
                let m = (b * p) as f64;
                let mut mu = vec![0.0; spec.out_ch];
                let mut var = vec![0.0; spec.out_ch];
                if batch_stats {
                    for o in 0..spec.out_ch {
                        let mut s = 0.0;
                        for bi in 0..b {
                            for pos in 0..p {
                                s += z[(bi, o, pos)];
                            }
                        }
                        mu[o] = s / m;
                        let mut v = 0.0;
                        for bi in 0..b {
                            for pos in 0..p {
                                let d = z[(bi, o, pos)] - mu[o];
                                v += d * d;
                            }
                        }
                        var[o] = v / m;
                    }
                } else {
                    mu.copy_from_slice(&self.running.mean[li]);
                    var.copy_from_slice(&self.running.var[li]);
                }
                let mut xhat = Array3::zeros((b, spec.out_ch, p));
                let mut pre = Array3::zeros((b, spec.out_ch, p));
                for o in 0..spec.out_ch {
                    let inv = 1.0 / (var[o] + BN_EPS).sqrt();
                    let (g, beta) = (params[spec.gamma + o], params[spec.beta + o]);
                    for bi in 0..b {
                        for pos in 0..p {
                            let xh = (z[(bi, o, pos)] - mu[o]) * inv;
                            xhat[(bi, o, pos)] = xh;
                            pre[(bi, o, pos)] = g * xh + beta;
                        }
                    }
                }
                (pre, xhat, mu, var)
            } else {
                (z, Array3::zeros((0, 0, 0)), Vec::new(), Vec::new())
            };

            let act = pre_act.mapv(|v| v.max(0.0));
            xhats.push(xhat);
            mus.push(mu);
            vars.push(var);
            pre_acts.push(pre_act);
            acts.push(act);
        }

        // Global mean pool over positions, then the linear head.
        let last = acts.last().unwrap();
        let c_last = self.layers.last().unwrap().out_ch;
        let mut pooled = Array2::zeros((b, c_last));
        for bi in 0..b {
            for o in 0..c_last {
                let mut s = 0.0;
                for pos in 0..p {
                    s += last[(bi, o, pos)];
                }
                pooled[(bi, o)] = s / p as f64;
            }
        }
        let mut out = vec![0.0; b];
        for bi in 0..b {
            let mut acc = params[self.head_b];
            for o in 0..c_last {
                acc += pooled[(bi, o)] * params[self.head_w + o];
            }
            out[bi] = acc;
        }

        Cache { acts, pre_acts, xhats, mus, vars, pooled, out }
    }

    pub fn loss(&self, params: &[f64], x: ArrayView3<f64>, y: &[f64], batch_stats: bool) -> f64 {
        let cache = self.forward(params, x, batch_stats);
        batch_loss(self.cfg.task, &cache.out, y)
    }

    /// Mean loss and full parameter gradient; returns the forward cache so
    /// the training loop can refresh running statistics.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        x: ArrayView3<f64>,
        y: &[f64],
        batch_stats: bool,
        grad: &mut [f64],
    ) -> (f64, Cache) {
        grad.fill(0.0);
        let b = x.shape()[0];
        let p = self.positions;
        let cache = self.forward(params, x, batch_stats);
        let loss = batch_loss(self.cfg.task, &cache.out, y);
        let dout = loss_grad(self.cfg.task, &cache.out, y);

        let c_last = self.layers.last().unwrap().out_ch;
        let mut d_pooled = Array2::zeros((b, c_last));
        for bi in 0..b {
            grad[self.head_b] += dout[bi];
            for o in 0..c_last {
                grad[self.head_w + o] += dout[bi] * cache.pooled[(bi, o)];
                d_pooled[(bi, o)] = dout[bi] * params[self.head_w + o];
            }
        }

        // Un-pool: every position shares the pooled gradient.
        let mut d_act = Array3::zeros((b, c_last, p));
        for bi in 0..b {
            for o in 0..c_last {
                let g = d_pooled[(bi, o)] / p as f64;
                for pos in 0..p {
                    d_act[(bi, o, pos)] = g;
                }
            }
        }

        for (li, spec) in self.layers.iter().enumerate().rev() {
            // Through ReLU.
            let mut d_pre = d_act;
            for bi in 0..b {
                for o in 0..spec.out_ch {
                    for pos in 0..p {
                        if cache.pre_acts[li][(bi, o, pos)] <= 0.0 {
                            d_pre[(bi, o, pos)] = 0.0;
                        }
                    }
                }
            }

            // Through batch norm (batch-statistics mode backpropagates
            // through the statistics themselves).
            let d_z = if self.cfg.batch_norm {
                let m = (b * p) as f64;
                let mut d_z = Array3::zeros((b, spec.out_ch, p));
                for o in 0..spec.out_ch {
                    let g = params[spec.gamma + o];
                    let inv = 1.0 / (cache.vars[li][o] + BN_EPS).sqrt();
                    let mut d_gamma = 0.0;
                    let mut d_beta = 0.0;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for bi in 0..b {
                        for pos in 0..p {
                            let dp = d_pre[(bi, o, pos)];
                            let xh = cache.xhats[li][(bi, o, pos)];
                            d_gamma += dp * xh;
                            d_beta += dp;
                            let dxh = dp * g;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        }
                    }
                    grad[spec.gamma + o] += d_gamma;
                    grad[spec.beta + o] += d_beta;
                    for bi in 0..b {
                        for pos in 0..p {
                            let dxh = d_pre[(bi, o, pos)] * g;
                            let xh = cache.xhats[li][(bi, o, pos)];
                            d_z[(bi, o, pos)] = if batch_stats {
                                inv * (dxh - sum_dxhat / m - xh * sum_dxhat_xhat / m)
                            } else {
                                inv * dxh
                            };
                        }
                    }
                }
                d_z
            } else {
                d_pre
            };

            // Conv weight/bias gradients and input gradient.
            let input = &cache.acts[li];
            let mut d_input = Array3::zeros((b, spec.in_ch, p));
            for bi in 0..b {
                for o in 0..spec.out_ch {
                    for pos in 0..p {
                        let dz = d_z[(bi, o, pos)];
                        if dz == 0.0 {
                            continue;
                        }
                        grad[spec.b + o] += dz;
                        for k in 0..KERNEL {
                            let off = (k as isize - 1) * spec.dilation as isize;
                            let q = pos as isize + off;
                            if q < 0 || q >= p as isize {
                                continue;
                            }
                            let q = q as usize;
                            let w_base = spec.w + (o * spec.in_ch) * KERNEL + k;
                            for i in 0..spec.in_ch {
                                grad[w_base + i * KERNEL] += dz * input[(bi, i, q)];
                                d_input[(bi, i, q)] += dz * params[w_base + i * KERNEL];
                            }
                        }
                    }
                }
            }
            d_act = d_input;
        }

        (loss, cache)
    }

    /// Fold the batch statistics from a training forward pass into the
    /// running statistics.
    pub fn update_running(&mut self, cache: &Cache) {
        if !self.cfg.batch_norm {
            return;
        }
        for li in 0..self.layers.len() {
            for o in 0..self.layers[li].out_ch {
                self.running.mean[li][o] = (1.0 - BN_MOMENTUM) * self.running.mean[li][o]
                    + BN_MOMENTUM * cache.mus[li][o];
                self.running.var[li][o] = (1.0 - BN_MOMENTUM) * self.running.var[li][o]
                    + BN_MOMENTUM * cache.vars[li][o];
            }
        }
    }

    /// Eval-mode predictions: probabilities for classification, raw values
    /// for regression.
    pub fn predict(&self, x: ArrayView3<f64>) -> Result<Vec<f64>> {
        if x.shape()[1] != self.in_channels || x.shape()[2] != self.positions {
            return Err(CoreError::dimension(format!(
                "model expects ({}, {}) tensors, got ({}, {})",
                self.in_channels,
                self.positions,
                x.shape()[1],
                x.shape()[2]
            )));
        }
        let cache = self.forward(&self.params, x, false);
        Ok(match self.cfg.task {
            Task::Classify => cache.out.iter().map(|&z| sigmoid(z)).collect(),
            Task::Regress => cache.out,
        })
    }
}

/// Intermediate activations kept for the backward pass.
pub struct Cache {
    acts: Vec<Array3<f64>>,
    pre_acts: Vec<Array3<f64>>,
    xhats: Vec<Array3<f64>>,
    mus: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    pooled: Array2<f64>,
    out: Vec<f64>,
}

/// Train the CNN with AdamW for the configured number of epochs.
/// Validation loss is tracked every epoch and the best-epoch weights are
/// restored at the end. Deterministic given `cfg.seed`.
pub fn cnn1d_fit(
    x: ArrayView3<f64>,
    y: &[f64],
    x_val: ArrayView3<f64>,
    y_val: &[f64],
    cfg: CnnConfig,
) -> Result<(Cnn1d, TrainTrace)> {
    cfg.validate()?;
    if x.shape()[1] != CHANNELS || x.shape()[2] != PAIR_POSITIONS {
        return Err(CoreError::dimension(format!(
            "expected ({CHANNELS}, {PAIR_POSITIONS}) per-residue tensors, got ({}, {})",
            x.shape()[1],
            x.shape()[2]
        )));
    }
    if x.shape()[0] != y.len() || x_val.shape()[0] != y_val.len() {
        return Err(CoreError::dimension("rows and targets disagree"));
    }
    if y_val.is_empty() {
        return Err(CoreError::config("validation set must be non-empty"));
    }
    if cfg.task == Task::Classify {
        let pos = y.iter().filter(|v| **v == 1.0).count();
        if pos == 0 || pos == y.len() {
            return Err(CoreError::config("both classes must be present in training data"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Cnn1d::init(cfg, CHANNELS, PAIR_POSITIONS, &mut rng)?;
    let mut opt = AdamW::new(model.n_params());
    let mut grad = vec![0.0; model.n_params()];
    let mut stopper = EarlyStopper::new(cfg.epochs, &model.params);
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();

    let n = x.shape()[0];
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in make_batches(n, cfg.batch_size, &mut rng) {
            let xb = gather_tensors(x, &batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (loss, cache) =
                model.loss_and_grad(&model.params, xb.view(), &yb, true, &mut grad);
            if !loss.is_finite() {
                return Err(CoreError::numerical(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            model.update_running(&cache);
            opt.step(&mut model.params, &grad, &model.decay_mask, cfg.lr);
            epoch_loss += loss * batch.len() as f64;
        }
        train_curve.push(epoch_loss / n as f64);

        let val_loss = model.loss(&model.params, x_val, y_val, false);
        if !val_loss.is_finite() {
            return Err(CoreError::numerical(format!(
                "validation loss became non-finite at epoch {epoch}"
            )));
        }
        val_curve.push(val_loss);
        stopper.observe(epoch, val_loss, &model.params);
    }

    model.params.copy_from_slice(&stopper.best_params);
    let trace = TrainTrace {
        train_loss: train_curve,
        val_loss: val_curve,
        best_epoch: stopper.best_epoch,
        stopped_epoch: cfg.epochs,
    };
    Ok((model, trace))
}

pub(crate) fn gather_tensors(x: ArrayView3<f64>, rows: &[usize]) -> Array3<f64> {
    let (_, c, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::zeros((rows.len(), c, p));
    for (bi, &ri) in rows.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&x.index_axis(ndarray::Axis(0), ri));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn const_tensors(n: usize, value: f64) -> Array3<f64> {
        Array3::from_elem((n, CHANNELS, PAIR_POSITIONS), value)
    }

    #[test]
    fn reference_configs_validate() {
        CnnConfig::classification_default().validate().unwrap();
        CnnConfig::regression_default().validate().unwrap();
        let mut bad = CnnConfig::classification_default();
        bad.n_layers = 6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dilation_doubles_per_layer() {
        assert_eq!(
            (1..=5).map(CnnConfig::dilation).collect::<Vec<_>>(),
            vec![1, 2, 4, 8, 16]
        );
    }

    #[test]
    fn output_shape_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CnnConfig::regression_default();
        let model = Cnn1d::init(cfg, CHANNELS, PAIR_POSITIONS, &mut rng).unwrap();
        let x = const_tensors(7, 0.3);
        assert_eq!(model.predict(x.view()).unwrap().len(), 7);
    }

    #[test]
    fn constant_inputs_converge_to_target_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 48;
        let x = const_tensors(n, 0.5);
        let y: Vec<f64> = (0..n).map(|_| 3.0 + rng.random_range(-1.0..1.0)).collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        let std = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();

        let mut cfg = CnnConfig::regression_default();
        cfg.lr = 1e-2;
        cfg.epochs = 50;
        let (model, _) = cnn1d_fit(x.view(), &y, x.view(), &y, cfg).unwrap();
        let pred = model.predict(x.view()).unwrap();
        assert!(
            (pred[0] - mean).abs() <= 0.1 * std,
            "prediction {} vs mean {mean} (std {std})",
            pred[0]
        );
    }

    #[test]
    fn same_seed_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 24;
        let mut x = const_tensors(n, 0.0);
        x.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
        let mut cfg = CnnConfig::classification_default();
        cfg.epochs = 10;
        let (m1, t1) = cnn1d_fit(x.view(), &y, x.view(), &y, cfg).unwrap();
        let (m2, t2) = cnn1d_fit(x.view(), &y, x.view(), &y, cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn batch_norm_path_trains() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 32;
        let mut x = const_tensors(n, 0.0);
        x.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
        let mut cfg = CnnConfig::classification_default();
        cfg.batch_norm = true;
        cfg.n_layers = 2;
        cfg.epochs = 10;
        let (model, trace) = cnn1d_fit(x.view(), &y, x.view(), &y, cfg).unwrap();
        assert_eq!(trace.epochs_run(), 10);
        let p = model.predict(x.view()).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
