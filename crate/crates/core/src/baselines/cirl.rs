//! Stationary "true CATE" policy: per-arm ridge outcome models, treat when the
//! estimated effect is positive.

use serde::{Deserialize, Serialize};

use super::linalg::solve_spd;
use super::StepSet;
use crate::diff::sigmoid;
use crate::error::{IolError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Ridge regression with an unpenalized intercept.
pub fn fit_ridge(x: &[&[f64]], y: &[f64], penalty: f64) -> Result<RidgeModel> {
    let Some(first) = x.first() else {
        return Err(IolError::Validation("ridge regression needs at least one row".into()));
    };
    let k = first.len() + 1;
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    let mut row = vec![1.0; k];
    for (xi, &yi) in x.iter().zip(y) {
        row[1..].copy_from_slice(xi);
        for i in 0..k {
            xty[i] += row[i] * yi;
            for j in 0..k {
                xtx[i * k + j] += row[i] * row[j];
            }
        }
    }
    for i in 1..k {
        xtx[i * k + i] += penalty;
    }
    let w = solve_spd(&xtx, &xty)?;
    Ok(RidgeModel { intercept: w[0], weights: w[1..].to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirlPolicy {
    pub treated: RidgeModel,
    pub control: RidgeModel,
}

impl CirlPolicy {
    /// Estimated CATE.
    pub fn effect(&self, x: &[f64]) -> f64 {
        self.treated.predict(x) - self.control.predict(x)
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.effect(x))
    }

    pub fn action(&self, x: &[f64]) -> u8 {
        u8::from(self.effect(x) > 0.0)
    }
}

pub fn fit_cirl_bandit(data: &StepSet, penalty: f64) -> Result<CirlPolicy> {
    let arm = |a: u8| -> Result<RidgeModel> {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.a[i] == a).collect();
        if rows.is_empty() {
            return Err(IolError::Validation(format!("cirl: action {a} never observed in the training steps")));
        }
        let x: Vec<&[f64]> = rows.iter().map(|&i| data.x[i].as_slice()).collect();
        let y: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();
        fit_ridge(&x, &y, penalty)
    };
    Ok(CirlPolicy { treated: arm(1)?, control: arm(0)? })
}
