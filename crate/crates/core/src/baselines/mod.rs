//! Stationary comparison policies and the action-matching metric suite.
//!
//! Baselines ignore trajectory structure and train on pooled steps.

pub mod cirl;
pub mod deep;
mod linalg;
pub mod linear;
pub mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cirl::{fit_cirl_bandit, fit_ridge, CirlPolicy, RidgeModel};
pub use deep::{fit_bc_deep, fit_rcal, DeepConfig, ScoreNet};
pub use linear::{fit_bc_linear, LinearConfig, LinearPolicy};
pub use metrics::{
    auc, average_precision, comparison_csv, evaluate, metric_values, write_comparison_csv, MetricReport,
    MetricValues, PolicyScore, Stat,
};

use crate::error::{IolError, Result};
use crate::model::IolModel;
use crate::trajectory::TrajectoryRecord;

/// Steps pooled across trajectories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepSet {
    pub x: Vec<Vec<f64>>,
    pub a: Vec<u8>,
    pub y: Vec<f64>,
}

impl StepSet {
    pub fn new(x: Vec<Vec<f64>>, a: Vec<u8>, y: Vec<f64>) -> Self {
        StepSet { x, a, y }
    }

    pub fn pooled(data: &[TrajectoryRecord]) -> Self {
        let mut s = StepSet::default();
        for step in data.iter().flat_map(|r| &r.steps) {
            s.x.push(step.x.clone());
            s.a.push(step.a);
            s.y.push(step.y);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    fn require_both_actions(&self, method: &str) -> Result<()> {
        let ones = self.a.iter().filter(|&&a| a == 1).count();
        if ones == 0 || ones == self.len() {
            return Err(IolError::Validation(format!("{method}: training steps contain a single action class")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "bc-linear")]
    BcLinear,
    #[serde(rename = "bc-deep")]
    BcDeep,
    #[serde(rename = "rcal")]
    Rcal,
    #[serde(rename = "cirl")]
    Cirl,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::BcLinear, BaselineKind::BcDeep, BaselineKind::Rcal, BaselineKind::Cirl];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::BcLinear => "bc-linear",
            BaselineKind::BcDeep => "bc-deep",
            BaselineKind::Rcal => "rcal",
            BaselineKind::Cirl => "cirl",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = IolError;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            IolError::Validation(format!(
                "unknown baseline '{s}'; valid names are bc-linear, bc-deep, rcal, cirl"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default)]
    pub linear: LinearConfig,
    #[serde(default)]
    pub deep: DeepConfig,
    /// L1 weight on RCAL's implied reward.
    #[serde(default = "default_rcal_l1")]
    pub rcal_l1: f64,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_rcal_l1() -> f64 {
    0.01
}
fn default_ridge() -> f64 {
    1e-3
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { linear: LinearConfig::default(), deep: DeepConfig::default(), rcal_l1: default_rcal_l1(), ridge: default_ridge() }
    }
}

/// A fitted stationary policy.
#[derive(Debug, Clone)]
pub enum FittedBaseline {
    Linear(LinearPolicy),
    Deep(ScoreNet),
    Cirl(CirlPolicy),
}

impl FittedBaseline {
    pub fn prob(&self, x: &[f64]) -> Result<f64> {
        match self {
            FittedBaseline::Linear(p) => Ok(p.prob(x)),
            FittedBaseline::Deep(n) => n.prob(x),
            FittedBaseline::Cirl(c) => Ok(c.prob(x)),
        }
    }

    pub fn score(&self, data: &[TrajectoryRecord]) -> Result<PolicyScore> {
        let mut s = PolicyScore::default();
        for step in data.iter().flat_map(|r| &r.steps) {
            s.probs.push(self.prob(&step.x)?);
            s.actions.push(step.a);
        }
        Ok(s)
    }
}

pub fn fit_baseline(kind: BaselineKind, train: &StepSet, cfg: &BaselineConfig) -> Result<FittedBaseline> {
    Ok(match kind {
        BaselineKind::BcLinear => FittedBaseline::Linear(fit_bc_linear(train, &cfg.linear)?),
        BaselineKind::BcDeep => FittedBaseline::Deep(fit_bc_deep(train, &cfg.deep)?),
        BaselineKind::Rcal => FittedBaseline::Deep(fit_rcal(train, &cfg.deep, cfg.rcal_l1)?),
        BaselineKind::Cirl => FittedBaseline::Cirl(fit_cirl_bandit(train, cfg.ridge)?),
    })
}

/// IOL action probabilities using only each step's history and context.
pub fn score_iol(model: &IolModel, data: &[TrajectoryRecord]) -> Result<PolicyScore> {
    let mut s = PolicyScore::default();
    for traj in data {
        for (b, step) in model.predict_policy(traj)?.iter().zip(&traj.steps) {
            s.probs.push(b.pi);
            s.actions.push(step.a);
        }
    }
    Ok(s)
}
