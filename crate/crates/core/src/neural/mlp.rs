//! Two-hidden-layer MLP over pooled embedding vectors.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::he_normal;
use super::train::{make_batches, AdamW, EarlyStopper, TrainTrace};
use crate::error::{CoreError, Result};
use crate::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// When set, the hidden stack is bypassed and the model reduces to a
    /// linear probe on the input features.
    pub linear_head: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub task: Task,
}

impl MlpConfig {
    pub fn default_for(task: Task) -> MlpConfig {
        MlpConfig {
            hidden_dim: 128,
            dropout: 0.2,
            lr: 1e-4,
            batch_size: 32,
            linear_head: false,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![64, 128, 256].contains(&self.hidden_dim) {
            return Err(CoreError::config("hidden_dim must be one of {64, 128, 256}"));
        }
        if ![0.1, 0.2, 0.3].contains(&self.dropout) {
            return Err(CoreError::config("dropout must be one of {0.1, 0.2, 0.3}"));
        }
        if ![1e-3, 1e-4].contains(&self.lr) {
            return Err(CoreError::config("learning rate must be 1e-3 or 1e-4"));
        }
        if ![32, 64].contains(&self.batch_size) {
            return Err(CoreError::config("batch size must be 32 or 64"));
        }
        if self.max_epochs == 0 {
            return Err(CoreError::config("max_epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Dropout masks for one batch; entries are 0 or 1/(1−p).
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub layer1: Vec<f64>,
    pub layer2: Vec<f64>,
}

impl DropoutMasks {
    pub fn draw(batch: usize, hidden: usize, p: f64, rng: &mut ChaCha8Rng) -> DropoutMasks {
        use rand::Rng;
        let scale = 1.0 / (1.0 - p);
        let mut draw_layer = || -> Vec<f64> {
            (0..batch * hidden)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
                .collect()
        };
        DropoutMasks { layer1: draw_layer(), layer2: draw_layer() }
    }
}

/// Forward mode: dropout active only with explicit masks.
pub enum MlpMode<'a> {
    Eval,
    Train(&'a DropoutMasks),
}

#[derive(Debug, Clone, Copy)]
struct MlpLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub cfg: MlpConfig,
    pub input_dim: usize,
    pub params: Vec<f64>,
    decay_mask: Vec<bool>,
    layout: MlpLayout,
}

impl Mlp {
    pub fn init(cfg: MlpConfig, input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Mlp> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(CoreError::config("input dimension must be positive"));
        }
        let h = cfg.hidden_dim;
        let layout = if cfg.linear_head {
            MlpLayout { w1: 0, b1: input_dim, w2: 0, b2: 0, w3: 0, b3: input_dim, total: input_dim + 1 }
        } else {
            let w1 = 0;
            let b1 = w1 + input_dim * h;
            let w2 = b1 + h;
            let b2 = w2 + h * h;
            let w3 = b2 + h;
            let b3 = w3 + h;
            MlpLayout { w1, b1, w2, b2, w3, b3, total: b3 + 1 }
        };

        let mut params = vec![0.0; layout.total];
        let mut decay_mask = vec![false; layout.total];
        if cfg.linear_head {
            for i in 0..input_dim {
                params[i] = he_normal(rng, input_dim);
                decay_mask[i] = true;
            }
        } else {
            for i in 0..input_dim * h {
                params[layout.w1 + i] = he_normal(rng, input_dim);
                decay_mask[layout.w1 + i] = true;
            }
            for i in 0..h * h {
                params[layout.w2 + i] = he_normal(rng, h);
                decay_mask[layout.w2 + i] = true;
            }
            for i in 0..h {
                params[layout.w3 + i] = he_normal(rng, h);
                decay_mask[layout.w3 + i] = true;
            }
        }
        Ok(Mlp { cfg, input_dim, params, decay_mask, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn decay_mask(&self) -> &[bool] {
        &self.decay_mask
    }

    /// Raw scores (logits or values) for a batch at the given parameters.
    fn scores(&self, params: &[f64], x: ArrayView2<f64>, mode: &MlpMode) -> ForwardCache {
        let b = x.nrows();
        let d = self.input_dim;
        let lt = &self.layout;
        if self.cfg.linear_head {
            let mut out = vec![0.0; b];
            for (bi, row) in x.rows().into_iter().enumerate() {
                let mut z = params[lt.b3];
                for i in 0..d {
                    z += row[i] * params[i];
                }
                out[bi] = z;
            }
            return ForwardCache { out, z1: Vec::new(), a1: Vec::new(), z2: Vec::new(), a2: Vec::new() };
        }

        let h = self.cfg.hidden_dim;
        let mut z1 = vec![0.0; b * h];
        let mut a1 = vec![0.0; b * h];
        let mut z2 = vec![0.0; b * h];
        let mut a2 = vec![0.0; b * h];
        let mut out = vec![0.0; b];

        for (bi, row) in x.rows().into_iter().enumerate() {
            for j in 0..h {
                let mut z = params[lt.b1 + j];
                for i in 0..d {
                    z += row[i] * params[lt.w1 + i * h + j];
                }
                z1[bi * h + j] = z;
                let r = z.max(0.0);
                a1[bi * h + j] = match mode {
                    MlpMode::Eval => r,
                    MlpMode::Train(m) => r * m.layer1[bi * h + j],
                };
            }
            for k in 0..h {
                let mut z = params[lt.b2 + k];
                for j in 0..h {
                    z += a1[bi * h + j] * params[lt.w2 + j * h + k];
                }
                z2[bi * h + k] = z;
                let r = z.max(0.0);
                a2[bi * h + k] = match mode {
                    MlpMode::Eval => r,
                    MlpMode::Train(m) => r * m.layer2[bi * h + k],
                };
            }
            let mut z = params[lt.b3];
            for k in 0..h {
                z += a2[bi * h + k] * params[lt.w3 + k];
            }
            out[bi] = z;
        }
        ForwardCache { out, z1, a1, z2, a2 }
    }

    /// Mean loss over the batch at the given parameters.
    pub fn loss(&self, params: &[f64], x: ArrayView2<f64>, y: &[f64], mode: &MlpMode) -> f64 {
        let cache = self.scores(params, x, mode);
        batch_loss(self.cfg.task, &cache.out, y)
    }

    /// Mean loss and its gradient with respect to all parameters.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        y: &[f64],
        mode: &MlpMode,
        grad: &mut [f64],
    ) -> f64 {
        debug_assert_eq!(grad.len(), self.layout.total);
        grad.fill(0.0);
        let d = self.input_dim;
        let lt = &self.layout;
        let cache = self.scores(params, x, mode);
        let loss = batch_loss(self.cfg.task, &cache.out, y);
        let dout = loss_grad(self.cfg.task, &cache.out, y);

        if self.cfg.linear_head {
            for (bi, row) in x.rows().into_iter().enumerate() {
                for i in 0..d {
                    grad[i] += dout[bi] * row[i];
                }
                grad[lt.b3] += dout[bi];
            }
            return loss;
        }

        let h = self.cfg.hidden_dim;
        let mut da1 = vec![0.0; h];
        for (bi, row) in x.rows().into_iter().enumerate() {
            let g = dout[bi];
            grad[lt.b3] += g;
            for k in 0..h {
                grad[lt.w3 + k] += g * cache.a2[bi * h + k];
            }
            da1.fill(0.0);
            for k in 0..h {
                // Backward through head → dropout → ReLU of layer 2.
                let mut dz2 = g * params[lt.w3 + k];
                if let MlpMode::Train(m) = mode {
                    dz2 *= m.layer2[bi * h + k];
                }
                if cache.z2[bi * h + k] <= 0.0 {
                    continue;
                }
                grad[lt.b2 + k] += dz2;
                for j in 0..h {
                    grad[lt.w2 + j * h + k] += dz2 * cache.a1[bi * h + j];
                    da1[j] += dz2 * params[lt.w2 + j * h + k];
                }
            }
            for j in 0..h {
                let mut dz1 = da1[j];
                if let MlpMode::Train(m) = mode {
                    dz1 *= m.layer1[bi * h + j];
                }
                if cache.z1[bi * h + j] <= 0.0 {
                    continue;
                }
                grad[lt.b1 + j] += dz1;
                for i in 0..d {
                    grad[lt.w1 + i * h + j] += dz1 * row[i];
                }
            }
        }
        loss
    }

    /// Eval-mode predictions: probabilities for classification, raw values
    /// for regression.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.input_dim {
            return Err(CoreError::dimension(format!(
                "model expects {} inputs, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let cache = self.scores(&self.params, x, &MlpMode::Eval);
        Ok(match self.cfg.task {
            Task::Classify => cache.out.iter().map(|&z| sigmoid(z)).collect(),
            Task::Regress => cache.out,
        })
    }
}

struct ForwardCache {
    out: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn batch_loss(task: Task, scores: &[f64], y: &[f64]) -> f64 {
    let n = scores.len() as f64;
    match task {
        Task::Classify => {
            scores.iter().zip(y).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / n
        }
        Task::Regress => scores.iter().zip(y).map(|(&z, &t)| (z - t) * (z - t)).sum::<f64>() / n,
    }
}

pub(crate) fn loss_grad(task: Task, scores: &[f64], y: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    match task {
        Task::Classify => scores.iter().zip(y).map(|(&z, &t)| (sigmoid(z) - t) / n).collect(),
        Task::Regress => scores.iter().zip(y).map(|(&z, &t)| 2.0 * (z - t) / n).collect(),
    }
}

fn validate_training_inputs(
    x: ArrayView2<f64>,
    y: &[f64],
    x_val: ArrayView2<f64>,
    y_val: &[f64],
    task: Task,
) -> Result<()> {
    if x.nrows() != y.len() || x_val.nrows() != y_val.len() {
        return Err(CoreError::dimension("rows and targets disagree"));
    }
    if x_val.nrows() == 0 {
        return Err(CoreError::config("validation set must be non-empty"));
    }
    if x.ncols() != x_val.ncols() {
        return Err(CoreError::dimension("train and val feature dims differ"));
    }
    if x.iter().chain(x_val.iter()).any(|v| !v.is_finite())
        || y.iter().chain(y_val.iter()).any(|v| !v.is_finite())
    {
        return Err(CoreError::numerical("training data contains non-finite values"));
    }
    if task == Task::Classify {
        if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(CoreError::config("classification targets must be 0 or 1"));
        }
        let pos = y.iter().filter(|v| **v == 1.0).count();
        if pos == 0 || pos == y.len() {
            return Err(CoreError::config("both classes must be present in training data"));
        }
    }
    Ok(())
}

/// Train an MLP with AdamW and early stopping; weights at the best
/// validation epoch are restored. Deterministic given `cfg.seed`.
pub fn mlp_fit(
    x: ArrayView2<f64>,
    y: &[f64],
    x_val: ArrayView2<f64>,
    y_val: &[f64],
    cfg: MlpConfig,
) -> Result<(Mlp, TrainTrace)> {
    cfg.validate()?;
    validate_training_inputs(x, y, x_val, y_val, cfg.task)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Mlp::init(cfg, x.ncols(), &mut rng)?;
    let mut opt = AdamW::new(model.n_params());
    let mut grad = vec![0.0; model.n_params()];
    let mut stopper = EarlyStopper::new(cfg.patience, &model.params);
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();

    let n = x.nrows();
    let mut last_epoch = 0;
    for epoch in 1..=cfg.max_epochs {
        last_epoch = epoch;
        let mut epoch_loss = 0.0;
        for batch in make_batches(n, cfg.batch_size, &mut rng) {
            let xb = gather_rows(x, &batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let masks = DropoutMasks::draw(batch.len(), cfg.hidden_dim, cfg.dropout, &mut rng);
            let mode =
                if cfg.linear_head { MlpMode::Eval } else { MlpMode::Train(&masks) };
            let loss = model.loss_and_grad(&model.params, xb.view(), &yb, &mode, &mut grad);
            if !loss.is_finite() {
                return Err(CoreError::numerical(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            opt.step(&mut model.params, &grad, &model.decay_mask, cfg.lr);
            epoch_loss += loss * batch.len() as f64;
        }
        train_curve.push(epoch_loss / n as f64);

        let val_loss = model.loss(&model.params, x_val, y_val, &MlpMode::Eval);
        if !val_loss.is_finite() {
            return Err(CoreError::numerical(format!(
                "validation loss became non-finite at epoch {epoch}"
            )));
        }
        val_curve.push(val_loss);
        if stopper.observe(epoch, val_loss, &model.params) {
            break;
        }
    }

    model.params.copy_from_slice(&stopper.best_params);
    let trace = TrainTrace {
        train_loss: train_curve,
        val_loss: val_curve,
        best_epoch: stopper.best_epoch,
        stopped_epoch: stopper.stopped_epoch(last_epoch),
    };
    Ok((model, trace))
}

pub(crate) fn gather_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (bi, &ri) in rows.iter().enumerate() {
        out.row_mut(bi).assign(&x.row(ri));
    }
    out
}
