//! L2-regularized logistic regression by damped Newton iterations.
//!
//! The objective is the mean negative log-likelihood plus `lambda / 2 * |w|^2`;
//! the intercept is not penalized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{dot, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub l2_lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { l2_lambda: 1e-4, tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LogisticModel {
    pub fn logit(&self, features: &[f64]) -> f64 {
        dot(&self.weights, features) + self.intercept
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [bool],
    lambda: f64,
    dim: usize,
}

impl Problem<'_> {
    fn logit(&self, theta: &DVector<f64>, row: &[f64]) -> f64 {
        row.iter().enumerate().map(|(j, v)| theta[j] * v).sum::<f64>() + theta[self.dim]
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let n = self.rows.len() as f64;
        let nll: f64 = self
            .rows
            .iter()
            .zip(self.labels)
            .map(|(row, &y)| {
                let z = self.logit(theta, row);
                softplus(z) - if y { z } else { 0.0 }
            })
            .sum();
        let penalty: f64 = (0..self.dim).map(|j| theta[j] * theta[j]).sum();
        nll / n + 0.5 * self.lambda * penalty
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.dim + 1;
        let n = self.rows.len() as f64;
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        let mut aug = vec![1.0; p];
        for (row, &y) in self.rows.iter().zip(self.labels) {
            aug[..self.dim].copy_from_slice(row);
            let mu = sigmoid(self.logit(theta, row));
            let r = mu - if y { 1.0 } else { 0.0 };
            let w = mu * (1.0 - mu);
            for j in 0..p {
                g[j] += r * aug[j];
                for k in 0..=j {
                    h[(j, k)] += w * aug[j] * aug[k];
                }
            }
        }
        g /= n;
        h /= n;
        for j in 0..p {
            for k in 0..j {
                h[(k, j)] = h[(j, k)];
            }
        }
        for j in 0..self.dim {
            g[j] += self.lambda * theta[j];
            h[(j, j)] += self.lambda;
        }
        (g, h)
    }
}

/// Solve `(H + damping I) d = -g`, raising the damping until the system is
/// positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let scale = h.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut damping = 0.0;
    loop {
        let mut m = h.clone();
        for j in 0..m.nrows() {
            m[(j, j)] += damping;
        }
        if let Some(chol) = m.cholesky() {
            return -chol.solve(g);
        }
        damping = if damping == 0.0 { 1e-10 * scale } else { damping * 10.0 };
    }
}

/// Fit `P(label = 1 | x) = sigmoid(w' x + b)`.
///
/// Converges when the gradient norm of the regularized objective is at most
/// `opts.tol`; otherwise returns [`Error::NotConverged`].
pub fn fit_logistic(rows: &[Vec<f64>], labels: &[bool], opts: &FitOptions) -> Result<LogisticModel> {
    if rows.is_empty() {
        return Err(invalid("logistic fit needs at least one row"));
    }
    if rows.len() != labels.len() {
        return Err(invalid("feature and label counts differ"));
    }
    if opts.l2_lambda.is_nan() || opts.l2_lambda < 0.0 {
        return Err(invalid("l2 penalty must be nonnegative"));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
    }
    let problem = Problem { rows, labels, lambda: opts.l2_lambda, dim };

    let mut theta = DVector::zeros(dim + 1);
    let mut f = problem.objective(&theta);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let (g, h) = problem.gradient_hessian(&theta);
        grad_norm = g.norm();
        if grad_norm <= opts.tol {
            return Ok(LogisticModel { weights: theta.as_slice()[..dim].to_vec(), intercept: theta[dim] });
        }
        let d = newton_direction(&h, &g);
        let slope = g.dot(&d);
        // Armijo backtracking
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-12 {
            let candidate = &theta + step * &d;
            let fc = problem.objective(&candidate);
            if fc <= f + 1e-4 * step * slope {
                theta = candidate;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Objective is flat to machine precision along the Newton
            // direction; take the full step and let the gradient test decide.
            theta += d;
            f = problem.objective(&theta);
        }
    }
    let (g, _) = problem.gradient_hessian(&theta);
    grad_norm = grad_norm.min(g.norm());
    if g.norm() <= opts.tol {
        return Ok(LogisticModel { weights: theta.as_slice()[..dim].to_vec(), intercept: theta[dim] });
    }
    Err(Error::NotConverged { iterations: opts.max_iter, grad_norm })
}

/// Gradient of the regularized objective at `model`; exposed for checking
/// optimality of returned fits.
pub fn objective_gradient(model: &LogisticModel, rows: &[Vec<f64>], labels: &[bool], l2_lambda: f64) -> Vec<f64> {
    let dim = model.weights.len();
    let problem = Problem { rows, labels, lambda: l2_lambda, dim };
    let mut theta = DVector::zeros(dim + 1);
    theta.as_mut_slice()[..dim].copy_from_slice(&model.weights);
    theta[dim] = model.intercept;
    problem.gradient_hessian(&theta).0.as_slice().to_vec()
}
