//! Regularized logistic and linear regression.
//!
//! Objectives are mean-scaled with the penalty weighted by `1/(C·n)`:
//!
//! * classification: `mean log-loss + (1/(C·n))·P(w)`
//! * regression:     `mean squared error + (1/(C·n))·P(w)`
//!
//! with `P(w) = ‖w‖₂²` for L2 and `‖w‖₁` for L1, `C` the inverse
//! regularization strength, and the intercept never penalized. Under this
//! scaling an L2 regression fit solves the normal equations
//! `(XᵀX + (1/C)·I)w = Xᵀy`.

mod solver;

pub use solver::{l1_optimality, lbfgs, proximal_gradient, SolveOutcome};

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Penalty {
    L1,
    L2,
    None,
}

impl Penalty {
    pub fn parse(s: &str) -> Option<Penalty> {
        match s {
            "l1" | "L1" => Some(Penalty::L1),
            "l2" | "L2" => Some(Penalty::L2),
            "none" => Some(Penalty::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub task: Task,
    pub penalty: Penalty,
    /// Inverse regularization strength; larger means weaker penalty.
    pub inverse_reg_c: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub fit_intercept: bool,
}

impl LinearConfig {
    pub fn new(task: Task, penalty: Penalty, inverse_reg_c: f64) -> LinearConfig {
        LinearConfig {
            task,
            penalty,
            inverse_reg_c,
            max_iter: 10_000,
            tol: 1e-6,
            fit_intercept: true,
        }
    }

    /// Reference classification setting: L2 with C = 10.
    pub fn classification_default() -> LinearConfig {
        LinearConfig::new(Task::Classify, Penalty::L2, 10.0)
    }

    /// Reference regression setting: L2 with C = 0.01.
    pub fn regression_default() -> LinearConfig {
        LinearConfig::new(Task::Regress, Penalty::L2, 0.01)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inverse_reg_c > 0.0 && self.inverse_reg_c.is_finite()) {
            return Err(CoreError::config("inverse regularization C must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(CoreError::config("tolerance must be positive"));
        }
        Ok(())
    }
}

/// A fitted linear predictor. `weights` holds the feature weights followed
/// by the intercept (zero when the intercept is not fitted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub config: LinearConfig,
    pub converged: bool,
    /// Gradient norm at the solution (subgradient-optimality violation for L1).
    pub final_grad_norm: f64,
    pub iterations: usize,
    /// Objective value per solver iteration.
    pub trace: Vec<f64>,
}

impl LinearModel {
    pub fn feature_dim(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn intercept(&self) -> f64 {
        *self.weights.last().unwrap()
    }

    fn margins(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.feature_dim() {
            return Err(CoreError::dimension(format!(
                "model expects {} features, got {}",
                self.feature_dim(),
                x.ncols()
            )));
        }
        let w = ArrayView1::from(&self.weights[..self.feature_dim()]);
        Ok(x.dot(&w) + self.intercept())
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
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_inputs(x: ArrayView2<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(CoreError::dimension(format!(
            "{} rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() < 2 {
        return Err(CoreError::config("need at least 2 samples"));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numerical("inputs contain non-finite values"));
    }
    Ok(())
}

/// Split an internal parameter vector into `(w, b)` given intercept handling.
fn unpack(params: &[f64], d: usize, fit_intercept: bool) -> (&[f64], f64) {
    (&params[..d], if fit_intercept { params[d] } else { 0.0 })
}

struct FitProblem<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    cfg: LinearConfig,
}

impl<'a> FitProblem<'a> {
    fn dim(&self) -> usize {
        self.x.ncols() + usize::from(self.cfg.fit_intercept)
    }

    /// Smooth objective and gradient. For L2 the penalty is folded into the
    /// smooth part; for L1 this is the loss alone (the solver handles the
    /// penalty through its proximal step).
    fn smooth(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.ncols();
        let n = self.x.nrows() as f64;
        let (w, b) = unpack(params, d, self.cfg.fit_intercept);
        let wv = ArrayView1::from(w);
        let z = self.x.dot(&wv) + b;

        // dl[i] = ∂loss/∂z_i, already divided by n.
        let (mut value, dl): (f64, Array1<f64>) = match self.cfg.task {
            Task::Classify => {
                let mut v = 0.0;
                let mut dl = Array1::zeros(self.y.len());
                for i in 0..self.y.len() {
                    v += softplus(z[i]) - self.y[i] * z[i];
                    dl[i] = (sigmoid(z[i]) - self.y[i]) / n;
                }
                (v / n, dl)
            }
            Task::Regress => {
                let mut v = 0.0;
                let mut dl = Array1::zeros(self.y.len());
                for i in 0..self.y.len() {
                    let r = z[i] - self.y[i];
                    v += r * r;
                    dl[i] = 2.0 * r / n;
                }
                (v / n, dl)
            }
        };

        let gw = self.x.t().dot(&dl);
        grad[..d].copy_from_slice(gw.as_slice().unwrap());
        if self.cfg.fit_intercept {
            grad[d] = dl.sum();
        }

        if self.cfg.penalty == Penalty::L2 {
            let lambda = 1.0 / (self.cfg.inverse_reg_c * n);
            for j in 0..d {
                value += lambda * w[j] * w[j];
                grad[j] += 2.0 * lambda * w[j];
            }
        }
        value
    }

    fn fit(&self) -> Result<LinearModel> {
        let d = self.x.ncols();
        let x0 = vec![0.0; self.dim()];
        let outcome = match self.cfg.penalty {
            Penalty::L2 | Penalty::None => {
                lbfgs(|p, g| self.smooth(p, g), x0, self.cfg.tol, self.cfg.max_iter)
            }
            Penalty::L1 => {
                let lambda_val = 1.0 / (self.cfg.inverse_reg_c * self.x.nrows() as f64);
                let mut lambda = vec![lambda_val; self.dim()];
                if self.cfg.fit_intercept {
                    lambda[d] = 0.0;
                }
                proximal_gradient(
                    |p, g| self.smooth(p, g),
                    &lambda,
                    x0,
                    self.cfg.tol,
                    self.cfg.max_iter,
                )
            }
        };

        if outcome.x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numerical("solver produced non-finite weights"));
        }

        let mut weights = vec![0.0; d + 1];
        weights[..d].copy_from_slice(&outcome.x[..d]);
        if self.cfg.fit_intercept {
            weights[d] = outcome.x[d];
        }
        Ok(LinearModel {
            weights,
            config: self.cfg,
            converged: outcome.converged,
            final_grad_norm: outcome.grad_norm,
            iterations: outcome.iterations,
            trace: outcome.trace,
        })
    }
}

/// Fit a regularized logistic regression on labels in {0, 1}.
pub fn fit_logistic(x: ArrayView2<f64>, y: &[f64], cfg: LinearConfig) -> Result<LinearModel> {
    cfg.validate()?;
    check_inputs(x, y)?;
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(CoreError::config("classification targets must be 0 or 1"));
    }
    let n_pos = y.iter().filter(|v| **v == 1.0).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(CoreError::config("both classes must be present in training data"));
    }
    let cfg = LinearConfig { task: Task::Classify, ..cfg };
    FitProblem { x, y, cfg }.fit()
}

/// Fit a (regularized) least-squares regression.
pub fn fit_linear(x: ArrayView2<f64>, y: &[f64], cfg: LinearConfig) -> Result<LinearModel> {
    cfg.validate()?;
    check_inputs(x, y)?;
    let cfg = LinearConfig { task: Task::Regress, ..cfg };
    FitProblem { x, y, cfg }.fit()
}

/// Class-1 probabilities `sigmoid(Xw + b)`.
pub fn predict_proba(model: &LinearModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(model.margins(x)?.iter().map(|&z| sigmoid(z)).collect())
}

/// Raw predictions `Xw + b`.
pub fn predict_value(model: &LinearModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(model.margins(x)?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight(cfg: LinearConfig) -> LinearConfig {
        LinearConfig { tol: 1e-10, ..cfg }
    }

    #[test]
    fn separable_pair_is_classified() {
        let x = array![[-1.0], [1.0]];
        let y = [0.0, 1.0];
        let cfg = LinearConfig::new(Task::Classify, Penalty::L2, 10.0);
        let model = fit_logistic(x.view(), &y, tight(cfg)).unwrap();
        let p = predict_proba(&model, x.view()).unwrap();
        assert!(p[0] < 0.5 && p[1] > 0.5, "probas {p:?}");
        assert!(model.converged);
    }

    #[test]
    fn logistic_matches_grid_oracle() {
        // Compare the optimum against a fine 2-D grid over (w, b).
        let x = array![[-1.0], [1.0]];
        let y = [0.0, 1.0];
        let cfg = tight(LinearConfig::new(Task::Classify, Penalty::L2, 10.0));
        let model = fit_logistic(x.view(), &y, cfg).unwrap();

        let objective = |w: f64, b: f64| -> f64 {
            let n = 2.0;
            let mut v = 0.0;
            for i in 0..2 {
                let z = x[(i, 0)] * w + b;
                v += softplus(z) - y[i] * z;
            }
            v / n + (1.0 / (10.0 * n)) * w * w
        };
        let mut grid_best = f64::INFINITY;
        let mut at = (0.0, 0.0);
        let mut w = -3.0;
        while w <= 3.0 {
            let mut b = -3.0;
            while b <= 3.0 {
                let v = objective(w, b);
                if v < grid_best {
                    grid_best = v;
                    at = (w, b);
                }
                b += 1e-3;
            }
            w += 1e-3;
        }
        let ours = objective(model.weights[0], model.weights[1]);
        assert!(ours <= grid_best + 1e-9, "ours {ours} vs grid {grid_best} at {at:?}");
    }

    #[test]
    fn constant_labels_rejected() {
        let x = array![[0.0], [1.0]];
        assert!(fit_logistic(x.view(), &[1.0, 1.0], LinearConfig::classification_default())
            .is_err());
    }

    #[test]
    fn huge_l1_penalty_zeroes_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((40, 6), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..40).map(|i| f64::from(i % 2 == 0)).collect();
        let cfg = LinearConfig::new(Task::Classify, Penalty::L1, 1e-6);
        let model = fit_logistic(x.view(), &y, cfg).unwrap();
        for w in &model.weights[..6] {
            assert!(w.abs() <= 1e-3, "weight {w} not shrunk to zero");
        }
    }

    #[test]
    fn ridge_matches_closed_form_identity_case() {
        // X = I₂, y = (1,2), effective λ = 1/C = 1, no intercept → w = (0.5, 1.0).
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let y = [1.0, 2.0];
        let mut cfg = tight(LinearConfig::new(Task::Regress, Penalty::L2, 1.0));
        cfg.fit_intercept = false;
        let model = fit_linear(x.view(), &y, cfg).unwrap();
        assert!((model.weights[0] - 0.5).abs() <= 1e-8, "{:?}", model.weights);
        assert!((model.weights[1] - 1.0).abs() <= 1e-8);
        assert_eq!(model.intercept(), 0.0);
    }

    #[test]
    fn unpenalized_interpolates_exact_system() {
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let y = [4.0, 0.5];
        let mut cfg = tight(LinearConfig::new(Task::Regress, Penalty::None, 1.0));
        cfg.fit_intercept = false;
        let model = fit_linear(x.view(), &y, cfg).unwrap();
        let pred = predict_value(&model, x.view()).unwrap();
        for i in 0..2 {
            assert!((pred[i] - y[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let x = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let y = [0.0, 0.0, 0.0];
        for penalty in [Penalty::None, Penalty::L1, Penalty::L2] {
            let cfg = tight(LinearConfig::new(Task::Regress, penalty, 1.0));
            let model = fit_linear(x.view(), &y, cfg).unwrap();
            for w in &model.weights {
                assert!(w.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn descent_from_zero_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((30, 4), |_| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        for penalty in [Penalty::None, Penalty::L1, Penalty::L2] {
            let cfg = LinearConfig::new(Task::Regress, penalty, 0.5);
            let model = fit_linear(x.view(), &y, cfg).unwrap();
            // Objective at w=0 equals mean(y²); final trace value must not exceed it.
            let at_zero = y.iter().map(|v| v * v).sum::<f64>() / 30.0;
            assert!(model.trace.last().unwrap() <= &(at_zero + 1e-12));
        }
    }

    #[test]
    fn predict_edges() {
        let x = array![[1.0], [2.0]];
        let y = [0.0, 1.0];
        let cfg = LinearConfig::classification_default();
        let mut model = fit_logistic(x.view(), &y, cfg).unwrap();
        model.weights = vec![0.0, 0.0];
        let p = predict_proba(&model, x.view()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        model.weights = vec![0.0, 2.5];
        let v = predict_value(&model, x.view()).unwrap();
        assert_eq!(v, vec![2.5, 2.5]);

        let wrong = array![[1.0, 2.0]];
        assert!(predict_proba(&model, wrong.view()).is_err());
    }

    #[test]
    fn proba_is_monotone_in_margin() {
        let x = array![[-2.0], [-0.5], [0.5], [2.0]];
        let y = [0.0, 0.0, 1.0, 1.0];
        let model =
            fit_logistic(x.view(), &y, LinearConfig::classification_default()).unwrap();
        let p = predict_proba(&model, x.view()).unwrap();
        let v = predict_value(&model, x.view()).unwrap();
        for i in 1..4 {
            assert_eq!(v[i] > v[i - 1], p[i] > p[i - 1]);
        }
    }

    #[test]
    fn logistic_l2_gradient_norm_meets_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_fn((60, 5), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..60)
            .map(|i| f64::from(x[(i, 0)] + 0.5 * x[(i, 1)] + 0.1 > 0.0))
            .collect();
        let cfg = LinearConfig::new(Task::Classify, Penalty::L2, 10.0);
        let model = fit_logistic(x.view(), &y, cfg).unwrap();
        assert!(model.converged);
        assert!(model.final_grad_norm <= 1e-6, "grad norm {}", model.final_grad_norm);
    }
}
