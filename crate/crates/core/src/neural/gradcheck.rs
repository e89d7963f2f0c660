//! Central finite-difference gradient verification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ndarray::{ArrayView2, ArrayView3};

use super::cnn::Cnn1d;
use super::mlp::{DropoutMasks, Mlp, MlpMode};

pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Maximum relative error between an analytic gradient and central finite
/// differences over the given parameter indices.
///
/// The error at index `i` is `|a − fd| / max(|a|, |fd|)`, falling back to
/// the absolute difference when both magnitudes are below 1e-8 (a truly
/// flat coordinate).
pub fn max_rel_grad_error<F>(
    params: &mut [f64],
    analytic: &[f64],
    mut loss: F,
    indices: &[usize],
    eps: f64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = params[i];
        params[i] = orig + eps;
        let plus = loss(params);
        params[i] = orig - eps;
        let minus = loss(params);
        params[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs());
        let err = if denom < 1e-8 { (a - fd).abs() } else { (a - fd).abs() / denom };
        worst = worst.max(err);
    }
    worst
}

/// Pick `n` distinct parameter indices (all of them when `n ≥ total`).
pub fn sample_indices(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..total).collect();
    all.shuffle(&mut rng);
    all.truncate(n.min(total));
    all
}

/// Gradient check for an MLP on one batch with frozen dropout masks, so the
/// dropout backward path is verified too.
pub fn grad_check_mlp(
    model: &Mlp,
    x: ArrayView2<f64>,
    y: &[f64],
    eps: f64,
    n_checked: usize,
    seed: u64,
) -> f64 {
    let masks = DropoutMasks::draw(
        x.nrows(),
        model.cfg.hidden_dim,
        model.cfg.dropout,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    let mode = if model.cfg.linear_head { MlpMode::Eval } else { MlpMode::Train(&masks) };
    let mut grad = vec![0.0; model.n_params()];
    model.loss_and_grad(&model.params, x, y, &mode, &mut grad);

    let indices = sample_indices(model.n_params(), n_checked, seed);
    let mut params = model.params.clone();
    max_rel_grad_error(&mut params, &grad, |p| model.loss(p, x, y, &mode), &indices, eps)
}

/// Gradient check for the CNN on one batch (batch-statistics mode, which is
/// the training-time forward).
pub fn grad_check_cnn(
    model: &Cnn1d,
    x: ArrayView3<f64>,
    y: &[f64],
    eps: f64,
    n_checked: usize,
    seed: u64,
) -> f64 {
    let mut grad = vec![0.0; model.n_params()];
    model.loss_and_grad(&model.params, x, y, true, &mut grad);

    let indices = sample_indices(model.n_params(), n_checked, seed);
    let mut params = model.params.clone();
    max_rel_grad_error(&mut params, &grad, |p| model.loss(p, x, y, true), &indices, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::cnn::CnnConfig;
    use crate::neural::mlp::MlpConfig;
    use crate::Task;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn random_batch(b: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let y = (0..b).map(|i| f64::from(i % 2 == 0)).collect();
        (x, y)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for task in [Task::Classify, Task::Regress] {
            let cfg = MlpConfig {
                hidden_dim: 64,
                dropout: 0.1,
                lr: 1e-3,
                batch_size: 32,
                linear_head: false,
                max_epochs: 1,
                patience: 0,
                seed: 0,
                task,
            };
            let model = Mlp::init(cfg, 6, &mut rng).unwrap();
            let (x, mut y) = random_batch(8, 6, 21);
            if task == Task::Regress {
                y.iter_mut().for_each(|v| *v = *v * 2.0 - 0.5);
            }
            let err = grad_check_mlp(&model, x.view(), &y, GRAD_CHECK_EPS, 150, 3);
            assert!(err <= 1e-5, "{task:?}: max rel err {err}");
        }
    }

    #[test]
    fn cnn_gradients_match_finite_differences_without_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cfg = CnnConfig::classification_default();
        cfg.n_layers = 3;
        cfg.rep_dim = 16;
        let model = Cnn1d::init(cfg, 4, 24, &mut rng).unwrap();
        let mut data_rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array3::from_shape_fn((6, 4, 24), |_| data_rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..6).map(|i| f64::from(i % 2 == 0)).collect();
        let err = grad_check_cnn(&model, x.view(), &y, GRAD_CHECK_EPS, 150, 5);
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn cnn_gradients_match_with_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut cfg = CnnConfig::classification_default();
        cfg.n_layers = 2;
        cfg.rep_dim = 16;
        cfg.batch_norm = true;
        cfg.task = Task::Regress;
        let model = Cnn1d::init(cfg, 3, 16, &mut rng).unwrap();
        let mut data_rng = ChaCha8Rng::seed_from_u64(15);
        let x = Array3::from_shape_fn((5, 3, 16), |_| data_rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.7).collect();
        let err = grad_check_cnn(&model, x.view(), &y, GRAD_CHECK_EPS, 150, 6);
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn zero_loss_point_has_zero_gradient() {
        // Perfect fit under squared loss: all-zero inputs, zero targets,
        // and a zeroed output path give a stationary point.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = MlpConfig {
            hidden_dim: 64,
            dropout: 0.1,
            lr: 1e-3,
            batch_size: 32,
            linear_head: false,
            max_epochs: 1,
            patience: 0,
            seed: 0,
            task: Task::Regress,
        };
        let mut model = Mlp::init(cfg, 4, &mut rng).unwrap();
        let n = model.n_params();
        // Zero the head so predictions are exactly zero.
        for i in (n - 65)..n {
            model.params[i] = 0.0;
        }
        let x = Array2::zeros((4, 4));
        let y = vec![0.0; 4];
        let mut grad = vec![0.0; n];
        let loss =
            model.loss_and_grad(&model.params, x.view(), &y, &MlpMode::Eval, &mut grad);
        assert_eq!(loss, 0.0);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm <= 1e-8, "gradient norm {norm}");
    }
}
