//! MLP classifiers: BC-Deep (one logit) and RCAL (two Q heads whose gap is
//! the implied reward, L1-regularized).

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StepSet;
use crate::diff::{adam_step, mlp_forward, sigmoid, AdamConfig, AdamState, Gradients, Mlp, ParamSet, Tape};
use crate::error::{IolError, Result};
use crate::seed::rng_for;

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DeepConfig {
    fn default() -> Self {
        DeepConfig { hidden: 64, epochs: 20, batch_size: 128, lr: 3e-3, seed: 0 }
    }
}

/// One hidden tanh layer; `heads` is 1 (logit) or 2 (`Q(x,0)`, `Q(x,1)`).
#[derive(Debug, Clone)]
pub struct ScoreNet {
    pub params: ParamSet,
    pub mlp: Mlp,
    pub heads: usize,
}

impl ScoreNet {
    pub fn new(input_dim: usize, hidden: usize, heads: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = rng_for(seed, 0xDEE9);
        let mlp = Mlp::new(&mut params, "score", &[input_dim, hidden, heads], &mut rng);
        ScoreNet { params, mlp, heads }
    }

    /// Two-head network computing the same gap as a one-head network:
    /// `Q(x,1)` copies the logit and `Q(x,0)` is zero.
    pub fn two_head_from(single: &ScoreNet) -> Self {
        assert_eq!(single.heads, 1, "expected a single-head network");
        let hidden = single.mlp.layers[0].out_dim;
        let mut net = ScoreNet::new(single.mlp.in_dim(), hidden, 2, 0);
        let (src, dst) = (&single.mlp.layers, net.mlp.layers.clone());
        net.params.get_mut(dst[0].weight).values = single.params.values(src[0].weight).to_vec();
        net.params.get_mut(dst[0].bias).values = single.params.values(src[0].bias).to_vec();
        let mut w = vec![0.0; hidden];
        w.extend_from_slice(single.params.values(src[1].weight));
        net.params.get_mut(dst[1].weight).values = w;
        net.params.get_mut(dst[1].bias).values = vec![0.0, single.params.values(src[1].bias)[0]];
        net
    }

    /// Logit of `a = 1`: the single output, or `Q(x,1) - Q(x,0)`.
    pub fn gap(&self, x: &[f64]) -> Result<f64> {
        let out = mlp_forward(&self.params, &self.mlp, x)?;
        Ok(if self.heads == 1 { out[0] } else { out[1] - out[0] })
    }

    pub fn prob(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.gap(x)?))
    }

    /// Summed loss and gradient over `idx`: cross-entropy plus
    /// `reward_l1 * |gap|` per step.
    fn chunk_loss(&self, data: &StepSet, idx: &[usize], reward_l1: f64) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.params);
        let mut terms = Vec::with_capacity(idx.len());
        for &i in idx {
            let x = tape.input(data.x[i].clone());
            let out = self.mlp.forward(&mut tape, x)?;
            let gap = if self.heads == 1 {
                out
            } else {
                let q1 = tape.slice(out, 1, 1);
                let q0 = tape.slice(out, 0, 1);
                tape.sub(q1, q0)
            };
            let signed = if data.a[i] == 1 { gap } else { tape.neg(gap) };
            let ll = tape.log_sigmoid(signed);
            let mut term = tape.neg(ll);
            if reward_l1 > 0.0 {
                let mag = tape.abs(gap);
                let pen = tape.scale(mag, reward_l1);
                term = tape.add(term, pen);
            }
            terms.push(term);
        }
        let total = tape.add_many(&terms);
        Ok((tape.scalar(total), tape.backward(total)))
    }

    /// Mean loss and gradient over `idx`, reduced in a fixed chunk order.
    pub fn loss_and_grad(&self, data: &StepSet, idx: &[usize], reward_l1: f64) -> Result<(f64, Gradients)> {
        let parts = idx
            .par_chunks(CHUNK)
            .map(|c| self.chunk_loss(data, c, reward_l1))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = self.params.zeros_like_grads();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grad.add_assign(&g);
        }
        let n = idx.len().max(1) as f64;
        grad.scale(1.0 / n);
        Ok((loss / n, grad))
    }

    pub fn loss(&self, data: &StepSet, reward_l1: f64) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        Ok(self.loss_and_grad(data, &idx, reward_l1)?.0)
    }
}

fn fit(mut net: ScoreNet, data: &StepSet, cfg: &DeepConfig, reward_l1: f64) -> Result<ScoreNet> {
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(IolError::Validation("deep baseline needs batch_size and hidden >= 1".into()));
    }
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(&net.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_for(cfg.seed, 0x5EED);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = net.loss_and_grad(data, batch, reward_l1)?;
            if !loss.is_finite() {
                return Err(IolError::Numerical("deep baseline loss became non-finite".into()));
            }
            net.params.set_grads(&grad);
            adam_step(&mut net.params, &mut adam, &adam_cfg)?;
        }
    }
    Ok(net)
}

pub fn fit_bc_deep(data: &StepSet, cfg: &DeepConfig) -> Result<ScoreNet> {
    data.require_both_actions("bc-deep")?;
    fit(ScoreNet::new(data.dim(), cfg.hidden, 1, cfg.seed), data, cfg, 0.0)
}

pub fn fit_rcal(data: &StepSet, cfg: &DeepConfig, reward_l1: f64) -> Result<ScoreNet> {
    data.require_both_actions("rcal")?;
    if !(reward_l1 >= 0.0) {
        return Err(IolError::Validation("rcal regularization must be >= 0".into()));
    }
    fit(ScoreNet::new(data.dim(), cfg.hidden, 2, cfg.seed), data, cfg, reward_l1)
}
