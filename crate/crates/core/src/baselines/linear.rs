//! Logistic-regression behavioural cloning fitted by Newton's method.

use serde::{Deserialize, Serialize};

use super::linalg::solve_spd;
use super::StepSet;
use crate::diff::{log_sigmoid, sigmoid};
use crate::error::{IolError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    /// L2 penalty on the slopes (not the intercept).
    pub l2: f64,
    /// Stop once the loss improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig { l2: 1e-6, tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub final_loss: f64,
}

impl LinearPolicy {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

fn loss(data: &StepSet, w: &[f64], l2: f64) -> f64 {
    let n = data.len() as f64;
    let nll: f64 = data
        .x
        .iter()
        .zip(&data.a)
        .map(|(x, &a)| {
            let z = w[0] + x.iter().zip(&w[1..]).map(|(p, q)| p * q).sum::<f64>();
            -log_sigmoid(if a == 1 { z } else { -z })
        })
        .sum();
    nll / n + 0.5 * l2 * w[1..].iter().map(|v| v * v).sum::<f64>()
}

pub fn fit_bc_linear(data: &StepSet, cfg: &LinearConfig) -> Result<LinearPolicy> {
    data.require_both_actions("bc-linear")?;
    let d = data.dim();
    let k = d + 1;
    let n = data.len() as f64;
    let mut w = vec![0.0; k];
    let mut current = loss(data, &w, cfg.l2);
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        let mut row = vec![1.0; k];
        for (x, &a) in data.x.iter().zip(&data.a) {
            row[1..].copy_from_slice(x);
            let z: f64 = row.iter().zip(&w).map(|(p, q)| p * q).sum();
            let p = sigmoid(z);
            let r = p - f64::from(a);
            let s = p * (1.0 - p);
            for i in 0..k {
                grad[i] += r * row[i] / n;
                for j in 0..=i {
                    hess[i * k + j] += s * row[i] * row[j] / n;
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                hess[j * k + i] = hess[i * k + j];
            }
            let ridge = if i == 0 { 1e-12 } else { cfg.l2 };
            hess[i * k + i] += ridge;
            if i > 0 {
                grad[i] += cfg.l2 * w[i];
            }
        }
        let step = solve_spd(&hess, &grad)?;
        // Backtracking keeps every iterate a descent step.
        let mut t = 1.0;
        let mut next = w.clone();
        let mut next_loss = f64::INFINITY;
        for _ in 0..40 {
            next = w.iter().zip(&step).map(|(a, b)| a - t * b).collect();
            next_loss = loss(data, &next, cfg.l2);
            if next_loss <= current {
                break;
            }
            t *= 0.5;
        }
        if !next_loss.is_finite() {
            return Err(IolError::Numerical("bc-linear loss became non-finite".into()));
        }
        let delta = current - next_loss;
        if next_loss <= current {
            w = next;
            current = next_loss;
        }
        if delta.abs() < cfg.tol {
            break;
        }
    }
    Ok(LinearPolicy { intercept: w[0], weights: w[1..].to_vec(), iterations, final_loss: current })
}
