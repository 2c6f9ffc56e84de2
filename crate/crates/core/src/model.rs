//! Latent-memory state-space model of an online-learning agent.
//!
//! Generative side: a memory `m_t` evolves from `m_{t-1}` and the previous
//! triplet `(x_{t-1}, a_{t-1}, y_{t-1})`, is decoded into treated-arm outcome
//! weights `omega1` (the untreated arm is pinned to zero for identifiability),
//! and the action follows `sigmoid(alpha * (<x_t, omega1> - beta))` with
//! `alpha = softplus(alpha_raw) > 0`.
//!
//! Inference side: a recurrent cell runs backwards over the trajectory to
//! produce summaries `b_t` of `h_{t:T}`, and a head maps `[m_{t-1}, b]` to the
//! approximate posterior over `m_t`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{log_sigmoid, sigmoid, softplus, DiagGaussian, GaussVar, Gradients, LstmCell, Mlp, ParamId, ParamSet, Tape, Var};
use crate::error::{IolError, Result};
use crate::seed::rng_for;
use crate::trajectory::{StepRecord, TrajectoryRecord};

/// Which backward summary feeds the posterior over `m_t` for `t > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryIndex {
    /// `b_{t-1}`, covering `h_{t-1:T}`.
    Previous,
    /// `b_t`, covering `h_{t:T}`.
    Current,
}

fn default_memory_dim() -> usize {
    16
}
fn default_hidden() -> usize {
    64
}
fn default_summary() -> SummaryIndex {
    SummaryIndex::Previous
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_memory_dim")]
    pub memory_dim: usize,
    /// Hidden width of the transition, decoder and posterior-head networks.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// State size of the backward recurrent cell.
    #[serde(default = "default_hidden")]
    pub summary_dim: usize,
    #[serde(default = "default_summary")]
    pub posterior_summary: SummaryIndex,
    /// Transition mean is `m_{t-1} + MLP(...)` instead of `MLP(...)`.
    #[serde(default)]
    pub residual_transition: bool,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            memory_dim: default_memory_dim(),
            hidden: default_hidden(),
            summary_dim: default_hidden(),
            posterior_summary: default_summary(),
            residual_transition: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_dim == 0 || self.hidden == 0 || self.summary_dim == 0 {
            return Err(IolError::Validation("model dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generative parameters: memory transition, weight decoder and treatment rule.
#[derive(Debug, Clone)]
pub struct GenerativeParams {
    /// `[m, x, a, y] -> (mean, std_raw)` of the next memory.
    pub transition_net: Mlp,
    /// `m -> omega1`.
    pub decoder_net: Mlp,
    pub alpha_raw: ParamId,
    pub beta: ParamId,
    pub memory_dim: usize,
}

/// Inference-network parameters.
#[derive(Debug, Clone)]
pub struct InferenceParams {
    /// Consumes `[x, a, y]` in reverse time order.
    pub backward_cell: LstmCell,
    /// `[m_{t-1}, b] -> (mean, std_raw)`.
    pub head_net: Mlp,
    /// `b_1 -> (mean, std_raw)`.
    pub init_head: Mlp,
}

/// Decoded beliefs at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectBelief {
    pub t: usize,
    pub omega1: Vec<f64>,
    pub mu1: f64,
    pub mu0: f64,
    pub tau: f64,
    pub pi: f64,
}

/// ELBO estimate with its two components: `value = -(nll + kl)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub value: f64,
    pub nll: f64,
    pub kl: f64,
}

/// Standard-normal noise for `K` ancestral posterior passes over `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    /// `eps[k][t]` has length `memory_dim`.
    pub eps: Vec<Vec<Vec<f64>>>,
}

impl ElboNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, samples: usize, horizon: usize, memory_dim: usize) -> Self {
        let eps = (0..samples)
            .map(|_| {
                (0..horizon)
                    .map(|_| (0..memory_dim).map(|_| rng.sample(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        ElboNoise { eps }
    }

    pub fn samples(&self) -> usize {
        self.eps.len()
    }
}

/// Tape handles for one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub elbo: Var,
    pub nll: Var,
    pub kl: Var,
    /// `nll + kl_weight * kl`, the quantity minimized during training.
    pub objective: Var,
}

fn triplet(step: &StepRecord) -> Vec<f64> {
    let mut v = Vec::with_capacity(step.x.len() + 2);
    v.extend_from_slice(&step.x);
    v.push(f64::from(step.a));
    v.push(step.y);
    v
}

/// `softplus^{-1}(1)`: the raw value giving `alpha = 1`.
pub fn alpha_raw_for_unit_slope() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

#[derive(Debug, Clone)]
pub struct IolModel {
    pub config: ModelConfig,
    pub context_dim: usize,
    pub params: ParamSet,
    pub gen: GenerativeParams,
    pub inf: InferenceParams,
}

impl IolModel {
    pub fn new(config: ModelConfig, context_dim: usize) -> Result<Self> {
        config.validate()?;
        if context_dim == 0 {
            return Err(IolError::Validation("context dimension must be >= 1".into()));
        }
        let mut rng = rng_for(config.init_seed, 0x1_0001);
        let mut params = ParamSet::new();
        let (m, h, s, d) = (config.memory_dim, config.hidden, config.summary_dim, context_dim);
        let transition_net = Mlp::new(&mut params, "gen.transition", &[m + d + 2, h, 2 * m], &mut rng);
        let decoder_net = Mlp::new(&mut params, "gen.decoder", &[m, h, d], &mut rng);
        let alpha_raw = params.add("gen.alpha_raw", vec![1], vec![alpha_raw_for_unit_slope()]);
        let beta = params.add("gen.beta", vec![1], vec![0.0]);
        let backward_cell = LstmCell::new(&mut params, "inf.backward_cell", d + 2, s, &mut rng);
        let head_net = Mlp::new(&mut params, "inf.head", &[m + s, h, 2 * m], &mut rng);
        let init_head = Mlp::new(&mut params, "inf.init_head", &[s, h, 2 * m], &mut rng);
        Ok(IolModel {
            gen: GenerativeParams { transition_net, decoder_net, alpha_raw, beta, memory_dim: m },
            inf: InferenceParams { backward_cell, head_net, init_head },
            config,
            context_dim,
            params,
        })
    }

    pub fn memory_dim(&self) -> usize {
        self.config.memory_dim
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.params.values(self.gen.alpha_raw)[0])
    }

    pub fn beta(&self) -> f64 {
        self.params.values(self.gen.beta)[0]
    }

    /// Fixed initial prior `p(m_1) = N(0, I)`.
    pub fn prior_initial(&self) -> DiagGaussian {
        DiagGaussian::standard(self.memory_dim())
    }

    fn check_step(&self, step: &StepRecord) -> Result<()> {
        if step.x.len() != self.context_dim {
            return Err(IolError::shape("context", self.context_dim, step.x.len()));
        }
        Ok(())
    }

    fn check_memory(&self, tape: &Tape<'_>, m: Var) -> Result<()> {
        if tape.dim(m) != self.memory_dim() {
            return Err(IolError::shape("memory", self.memory_dim(), tape.dim(m)));
        }
        Ok(())
    }

    // ---- tape-level building blocks -------------------------------------

    pub fn transition_on(&self, tape: &mut Tape<'_>, m_prev: Var, step_prev: &StepRecord) -> Result<GaussVar> {
        self.check_memory(tape, m_prev)?;
        self.check_step(step_prev)?;
        let h = tape.input(triplet(step_prev));
        let inp = tape.concat(&[m_prev, h]);
        let head = self.gen.transition_net.forward(tape, inp)?;
        let mut g = GaussVar::from_head(tape, head, self.memory_dim());
        if self.config.residual_transition {
            g.mean = tape.add(g.mean, m_prev);
        }
        Ok(g)
    }

    /// Returns `(omega1, tau)`; `mu0` is identically zero.
    pub fn decode_on(&self, tape: &mut Tape<'_>, m: Var, x: &[f64]) -> Result<(Var, Var)> {
        self.check_memory(tape, m)?;
        if x.len() != self.context_dim {
            return Err(IolError::shape("context", self.context_dim, x.len()));
        }
        let omega = self.gen.decoder_net.forward(tape, m)?;
        let xv = tape.input(x.to_vec());
        let tau = tape.dot(xv, omega);
        Ok((omega, tau))
    }

    /// `log pi(a | tau)` with `pi = sigmoid(alpha * (tau - beta))`.
    pub fn action_loglik_on(&self, tape: &mut Tape<'_>, tau: Var, a: u8) -> Var {
        let alpha_raw = tape.param(self.gen.alpha_raw);
        let alpha = tape.softplus(alpha_raw);
        let beta = tape.param(self.gen.beta);
        let centered = tape.sub(tau, beta);
        let z = tape.mul(alpha, centered);
        let z = if a == 1 { z } else { tape.neg(z) };
        tape.log_sigmoid(z)
    }

    pub fn summaries_on(&self, tape: &mut Tape<'_>, traj: &TrajectoryRecord) -> Result<Vec<Var>> {
        let cell = &self.inf.backward_cell;
        let mut state = cell.zero_state(tape);
        let mut out = vec![state.h; traj.len()];
        for t in (0..traj.len()).rev() {
            self.check_step(&traj.steps[t])?;
            let inp = tape.input(triplet(&traj.steps[t]));
            state = cell.step(tape, state, inp)?;
            out[t] = state.h;
        }
        Ok(out)
    }

    pub fn posterior_on(&self, tape: &mut Tape<'_>, m_prev: Option<Var>, b: Var) -> Result<GaussVar> {
        let head = match m_prev {
            None => self.inf.init_head.forward(tape, b)?,
            Some(m) => {
                self.check_memory(tape, m)?;
                let inp = tape.concat(&[m, b]);
                self.inf.head_net.forward(tape, inp)?
            }
        };
        Ok(GaussVar::from_head(tape, head, self.memory_dim()))
    }

    fn summary_index(&self, t: usize) -> usize {
        match self.config.posterior_summary {
            SummaryIndex::Previous => t.saturating_sub(1),
            SummaryIndex::Current => t,
        }
    }

    /// Builds the ELBO graph for one trajectory with pre-drawn noise.
    pub fn elbo_on(&self, tape: &mut Tape<'_>, traj: &TrajectoryRecord, noise: &ElboNoise, kl_weight: f64) -> Result<ElboVars> {
        let k_samples = noise.samples();
        if k_samples == 0 {
            return Err(IolError::Validation("mc_samples must be >= 1".into()));
        }
        if traj.is_empty() {
            return Err(IolError::Validation(format!("trajectory '{}' has no steps", traj.id)));
        }
        let summaries = self.summaries_on(tape, traj)?;
        let prior = GaussVar::constant(tape, &self.prior_initial());
        let mut ll_terms = Vec::with_capacity(k_samples * traj.len());
        let mut kl_terms = Vec::with_capacity(k_samples * traj.len());
        for eps_k in &noise.eps {
            if eps_k.len() < traj.len() {
                return Err(IolError::shape("elbo noise horizon", traj.len(), eps_k.len()));
            }
            let mut m_prev: Option<Var> = None;
            for (t, step) in traj.steps.iter().enumerate() {
                let b = summaries[if t == 0 { 0 } else { self.summary_index(t) }];
                let q = self.posterior_on(tape, m_prev, b)?;
                let eps = tape.input(eps_k[t].clone());
                let m = q.sample_with(tape, eps);
                let kl = match m_prev {
                    None => q.kl(tape, &prior),
                    Some(mp) => {
                        let p = self.transition_on(tape, mp, &traj.steps[t - 1])?;
                        q.kl(tape, &p)
                    }
                };
                let (_, tau) = self.decode_on(tape, m, &step.x)?;
                let ll = self.action_loglik_on(tape, tau, step.a);
                if !tape.scalar(ll).is_finite() || !tape.scalar(kl).is_finite() {
                    return Err(IolError::Numerical(format!(
                        "non-finite ELBO term in trajectory '{}' at step {t}",
                        traj.id
                    )));
                }
                ll_terms.push(ll);
                kl_terms.push(kl);
                m_prev = Some(m);
            }
        }
        let inv_k = 1.0 / k_samples as f64;
        let ll_sum = tape.add_many(&ll_terms);
        let nll = tape.scale(ll_sum, -inv_k);
        let kl_sum = tape.add_many(&kl_terms);
        let kl = tape.scale(kl_sum, inv_k);
        let neg_elbo = tape.add(nll, kl);
        let elbo = tape.neg(neg_elbo);
        let objective = if kl_weight == 1.0 {
            neg_elbo
        } else {
            let weighted = tape.scale(kl, kl_weight);
            tape.add(nll, weighted)
        };
        Ok(ElboVars { elbo, nll, kl, objective })
    }

    /// ELBO value, breakdown and the gradient of `nll + kl_weight * kl`.
    pub fn elbo_with_grad(&self, traj: &TrajectoryRecord, noise: &ElboNoise, kl_weight: f64) -> Result<(ElboBreakdown, Gradients)> {
        let mut tape = Tape::new(&self.params);
        let vars = self.elbo_on(&mut tape, traj, noise, kl_weight)?;
        let breakdown = ElboBreakdown {
            value: tape.scalar(vars.elbo),
            nll: tape.scalar(vars.nll),
            kl: tape.scalar(vars.kl),
        };
        Ok((breakdown, tape.backward(vars.objective)))
    }

    pub fn elbo_value(&self, traj: &TrajectoryRecord, noise: &ElboNoise) -> Result<ElboBreakdown> {
        let mut tape = Tape::new(&self.params);
        let vars = self.elbo_on(&mut tape, traj, noise, 1.0)?;
        Ok(ElboBreakdown {
            value: tape.scalar(vars.elbo),
            nll: tape.scalar(vars.nll),
            kl: tape.scalar(vars.kl),
        })
    }

    /// Monte Carlo ELBO with `mc_samples` reparameterized posterior passes.
    pub fn elbo<R: Rng + ?Sized>(&self, traj: &TrajectoryRecord, rng: &mut R, mc_samples: usize) -> Result<ElboBreakdown> {
        let noise = ElboNoise::draw(rng, mc_samples, traj.len(), self.memory_dim());
        self.elbo_value(traj, &noise)
    }

    // ---- value-level operations ------------------------------------------

    pub fn memory_transition(&self, m_prev: &[f64], step_prev: &StepRecord) -> Result<DiagGaussian> {
        let mut tape = Tape::new(&self.params);
        let m = tape.input(m_prev.to_vec());
        let g = self.transition_on(&mut tape, m, step_prev)?;
        Ok(g.value(&tape))
    }

    pub fn decode_effect(&self, m: &[f64], x: &[f64]) -> Result<EffectBelief> {
        let mut tape = Tape::new(&self.params);
        let mv = tape.input(m.to_vec());
        let (omega, tau) = self.decode_on(&mut tape, mv, x)?;
        let tau = tape.scalar(tau);
        Ok(EffectBelief {
            t: 0,
            omega1: tape.value(omega).to_vec(),
            mu1: tau,
            mu0: 0.0,
            tau,
            pi: self.treat_probability(tau),
        })
    }

    pub fn treat_probability(&self, tau: f64) -> f64 {
        sigmoid(self.alpha() * (tau - self.beta()))
    }

    pub fn action_likelihood(&self, tau: f64, a: u8) -> f64 {
        let z = self.alpha() * (tau - self.beta());
        if a == 1 {
            log_sigmoid(z)
        } else {
            log_sigmoid(-z)
        }
    }

    pub fn backward_summaries(&self, traj: &TrajectoryRecord) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.params);
        let vars = self.summaries_on(&mut tape, traj)?;
        Ok(vars.iter().map(|v| tape.value(*v).to_vec()).collect())
    }

    pub fn posterior_step(&self, m_prev: Option<&[f64]>, b: &[f64]) -> Result<DiagGaussian> {
        let mut tape = Tape::new(&self.params);
        let m = m_prev.map(|m| tape.input(m.to_vec()));
        let bv = tape.input(b.to_vec());
        if tape.dim(bv) != self.config.summary_dim {
            return Err(IolError::shape("summary", self.config.summary_dim, b.len()));
        }
        let g = self.posterior_on(&mut tape, m, bv)?;
        Ok(g.value(&tape))
    }

    /// Posterior-mean smoothing pass: beliefs plus the memory posterior per step.
    pub fn smoothed_beliefs(&self, traj: &TrajectoryRecord) -> Result<(Vec<EffectBelief>, Vec<DiagGaussian>)> {
        let mut tape = Tape::new(&self.params);
        let summaries = self.summaries_on(&mut tape, traj)?;
        let mut beliefs = Vec::with_capacity(traj.len());
        let mut memory = Vec::with_capacity(traj.len());
        let mut m_prev: Option<Var> = None;
        for (t, step) in traj.steps.iter().enumerate() {
            let b = summaries[if t == 0 { 0 } else { self.summary_index(t) }];
            let q = self.posterior_on(&mut tape, m_prev, b)?;
            let (omega, tau) = self.decode_on(&mut tape, q.mean, &step.x)?;
            let tau = tape.scalar(tau);
            beliefs.push(EffectBelief {
                t,
                omega1: tape.value(omega).to_vec(),
                mu1: tau,
                mu0: 0.0,
                tau,
                pi: self.treat_probability(tau),
            });
            memory.push(q.value(&tape));
            m_prev = Some(q.mean);
        }
        Ok((beliefs, memory))
    }

    /// Generative memory means `m_1 = 0`, `m_t = E[m_t | m_{t-1}, h_{t-1}]`.
    /// Entry `t` never depends on `x_t`.
    pub fn filtered_memory(&self, traj: &TrajectoryRecord) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(traj.len());
        let mut m = self.prior_initial().mean;
        for t in 0..traj.len() {
            if t > 0 {
                m = self.memory_transition(&m, &traj.steps[t - 1])?.mean;
            }
            out.push(m.clone());
        }
        Ok(out)
    }

    /// History-only action probabilities along the generative mean path;
    /// step `t` uses only `h_{1:t-1}` and `x_t`.
    pub fn predict_policy(&self, traj: &TrajectoryRecord) -> Result<Vec<EffectBelief>> {
        let memory = self.filtered_memory(traj)?;
        memory
            .iter()
            .zip(&traj.steps)
            .enumerate()
            .map(|(t, (m, step))| {
                let mut b = self.decode_effect(m, &step.x)?;
                b.t = t;
                Ok(b)
            })
            .collect()
    }

    /// Forward-samples `m_1..m_T` from the generative model and returns
    /// `log prod_t pi(a_t | tau_t)` for the observed actions.
    pub fn sample_action_loglik<R: Rng + ?Sized>(&self, traj: &TrajectoryRecord, rng: &mut R) -> Result<f64> {
        let mut m = self.prior_initial().sample(rng);
        let mut total = 0.0;
        for (t, step) in traj.steps.iter().enumerate() {
            if t > 0 {
                m = self.memory_transition(&m, &traj.steps[t - 1])?.sample(rng);
            }
            let b = self.decode_effect(&m, &step.x)?;
            total += self.action_likelihood(b.tau, step.a);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, kl_diag};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(d: usize, m: usize) -> IolModel {
        IolModel::new(
            ModelConfig { memory_dim: m, hidden: 4, summary_dim: 3, init_seed: 3, ..ModelConfig::default() },
            d,
        )
        .unwrap()
    }

    fn zero_tensors(model: &mut IolModel, prefix: &str) {
        for t in model.params.iter_mut() {
            if t.name().starts_with(prefix) {
                t.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn traj(rows: &[(&[f64], u8, f64)]) -> TrajectoryRecord {
        TrajectoryRecord::new(
            "t",
            rows.iter().map(|(x, a, y)| StepRecord::new(x.to_vec(), *a, *y)).collect(),
        )
    }

    fn random_traj(rng: &mut ChaCha8Rng, d: usize, t: usize) -> TrajectoryRecord {
        TrajectoryRecord::new(
            "r",
            (0..t)
                .map(|_| {
                    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    StepRecord::new(x, rng.random_range(0..2u8), rng.sample(StandardNormal))
                })
                .collect(),
        )
    }

    #[test]
    fn initial_prior_is_standard() {
        let m = tiny(2, 3);
        let p = m.prior_initial();
        assert_eq!(p.mean, vec![0.0; 3]);
        assert_eq!(p.std, vec![1.0; 3]);
        assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn prior_sample_mean_near_zero() {
        let m = tiny(2, 3);
        let p = m.prior_initial();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(p.sample(&mut rng)) {
                *a += v;
            }
        }
        for a in acc {
            assert!((a / n as f64).abs() < 0.02);
        }
    }

    #[test]
    fn zero_transition_gives_softplus_zero_std() {
        let mut m = tiny(2, 3);
        zero_tensors(&mut m, "gen.transition");
        let g = m.memory_transition(&[0.4, -1.0, 2.0], &StepRecord::new(vec![1.0, 2.0], 1, 0.5)).unwrap();
        let expect = std::f64::consts::LN_2 + 1e-4;
        assert_eq!(g.mean, vec![0.0; 3]);
        for s in g.std {
            assert!((s - expect).abs() < 1e-15);
            assert!((s - 0.6933).abs() < 1e-4);
        }
    }

    #[test]
    fn transition_ignores_current_context() {
        let m = tiny(2, 3);
        let base = traj(&[(&[0.1, 0.2], 1, 0.3), (&[1.0, -1.0], 0, 0.7), (&[0.5, 0.5], 1, -0.2)]);
        let mut perturbed = base.clone();
        perturbed.steps[2].x = vec![100.0, -50.0];
        let a = m.filtered_memory(&base).unwrap();
        let b = m.filtered_memory(&perturbed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_examples() {
        let mut m = tiny(2, 2);
        let b = m.decode_effect(&[0.3, 0.1], &[0.0, 0.0]).unwrap();
        assert_eq!(b.tau, 0.0);
        assert_eq!(b.pi, sigmoid(-m.alpha() * m.beta()));

        // Force the decoder output to omega1 = [1, -1].
        zero_tensors(&mut m, "gen.decoder");
        let out_bias = m.gen.decoder_net.layers[1].bias;
        m.params.get_mut(out_bias).values = vec![1.0, -1.0];
        let b = m.decode_effect(&[0.3, 0.1], &[2.0, 3.0]).unwrap();
        assert_eq!(b.mu1, 2.0 * 1.0 + 3.0 * -1.0);
        assert_eq!(b.tau, -1.0);
        assert_eq!(b.mu0, 0.0);
    }

    #[test]
    fn action_likelihood_examples() {
        let mut m = tiny(1, 1);
        let beta = m.gen.beta;
        m.params.get_mut(beta).values = vec![0.4];
        assert!((m.action_likelihood(0.4, 1) - 0.5f64.ln()).abs() < 1e-15);
        assert!((m.action_likelihood(0.4, 0) - 0.5f64.ln()).abs() < 1e-15);
        m.params.get_mut(beta).values = vec![0.0];
        assert!((m.alpha() - 1.0).abs() < 1e-15);
        assert!((m.action_likelihood(3f64.ln(), 1) - 0.75f64.ln()).abs() < 1e-12);
        assert!(m.action_likelihood(600.0, 0).is_finite());
        assert!(m.action_likelihood(-600.0, 1).is_finite());
    }

    #[test]
    fn zero_cell_summaries_are_zero() {
        let mut m = tiny(2, 2);
        zero_tensors(&mut m, "inf.backward_cell");
        let s = m.backward_summaries(&traj(&[(&[1.0, 2.0], 1, 3.0), (&[-1.0, 0.5], 0, 1.0)])).unwrap();
        assert!(s.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn last_summary_depends_only_on_last_step() {
        let m = tiny(2, 2);
        let a = traj(&[(&[1.0, 2.0], 1, 3.0), (&[-1.0, 0.5], 0, 1.0)]);
        let b = traj(&[(&[9.0, -4.0], 0, -2.0), (&[-1.0, 0.5], 0, 1.0)]);
        let sa = m.backward_summaries(&a).unwrap();
        let sb = m.backward_summaries(&b).unwrap();
        assert_eq!(sa[1], sb[1]);
        assert_ne!(sa[0], sb[0]);
    }

    #[test]
    fn backward_direction_matters() {
        let m = tiny(2, 2);
        let data = traj(&[(&[1.0, 0.0], 1, 2.0), (&[0.0, -1.0], 0, -3.0)]);
        let backward_b1 = m.backward_summaries(&data).unwrap()[0].clone();
        // A forward pass: feed step 1 then step 2, keep the final state.
        let cell = &m.inf.backward_cell;
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for s in &data.steps {
            let (nh, nc) = crate::diff::recurrent_step(&m.params, cell, &h, &c, &triplet(s)).unwrap();
            h = nh;
            c = nc;
        }
        assert_ne!(backward_b1, h);
    }

    #[test]
    fn zero_heads_posterior() {
        let mut m = tiny(2, 3);
        zero_tensors(&mut m, "inf.head");
        zero_tensors(&mut m, "inf.init_head");
        let expect = std::f64::consts::LN_2 + 1e-4;
        for g in [
            m.posterior_step(None, &[0.3, 0.2, 0.1]).unwrap(),
            m.posterior_step(Some(&[1.0, 1.0, 1.0]), &[0.3, 0.2, 0.1]).unwrap(),
        ] {
            assert_eq!(g.mean, vec![0.0; 3]);
            assert!(g.std.iter().all(|s| (s - expect).abs() < 1e-15));
        }
        let a = m.posterior_step(Some(&[0.5, 0.0, 1.0]), &[0.1, 0.1, 0.1]).unwrap();
        let b = m.posterior_step(Some(&[0.5, 0.0, 1.0]), &[0.1, 0.1, 0.1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let m = tiny(2, 3);
        assert!(m.memory_transition(&[0.0; 2], &StepRecord::new(vec![0.0; 2], 0, 0.0)).is_err());
        assert!(m.memory_transition(&[0.0; 3], &StepRecord::new(vec![0.0; 3], 0, 0.0)).is_err());
        assert!(m.decode_effect(&[0.0; 3], &[1.0]).is_err());
        assert!(m.posterior_step(None, &[0.0; 2]).is_err());
    }

    #[test]
    fn single_step_elbo_reduces_to_loglik_minus_kl() {
        let m = tiny(2, 2);
        let t = traj(&[(&[0.7, -0.2], 1, 0.4)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = ElboNoise::draw(&mut rng, 1, 1, 2);
        let e = m.elbo_value(&t, &noise).unwrap();

        let b = m.backward_summaries(&t).unwrap();
        let q = m.posterior_step(None, &b[0]).unwrap();
        let sample: Vec<f64> = q.mean.iter().zip(&q.std).zip(&noise.eps[0][0]).map(|((mu, s), e)| mu + s * e).collect();
        let belief = m.decode_effect(&sample, &t.steps[0].x).unwrap();
        let ll = m.action_likelihood(belief.tau, 1);
        let kl = kl_diag(&q, &m.prior_initial()).unwrap();
        assert!((e.value - (ll - kl)).abs() < 1e-12);
        assert!((e.nll + ll).abs() < 1e-12 && (e.kl - kl).abs() < 1e-12);
    }

    #[test]
    fn elbo_components_add_up() {
        let m = tiny(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_traj(&mut rng, 3, 5);
        let e = m.elbo(&t, &mut rng, 3).unwrap();
        assert!((e.value + e.nll + e.kl).abs() < 1e-12);
        assert!(e.kl >= 0.0 && e.nll >= 0.0);
        assert!(m.elbo(&t, &mut rng, 0).is_err());
    }

    #[test]
    fn full_elbo_gradient_matches_finite_differences() {
        let m = tiny(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_traj(&mut rng, 3, 3);
        let noise = ElboNoise::draw(&mut rng, 1, 3, 2);
        let f = |ps: &ParamSet| {
            let mut probe = m.clone();
            probe.params = ps.clone();
            let (e, g) = probe.elbo_with_grad(&t, &noise, 1.0).unwrap();
            (e.nll + e.kl, g)
        };
        let r = grad_check(f, &m.params, 1e-5);
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
        assert_eq!(r.checked, m.params.num_scalars());
    }

    #[test]
    fn non_stationary_policy_is_expressible() {
        // Transition pushes memory to a constant, decoder reads memory directly,
        // so the policy at step 1 (m = 0) differs from later steps.
        let mut m = IolModel::new(ModelConfig { memory_dim: 1, hidden: 1, summary_dim: 1, ..ModelConfig::default() }, 1).unwrap();
        zero_tensors(&mut m, "gen.");
        let alpha_raw = m.gen.alpha_raw;
        m.params.get_mut(alpha_raw).values = vec![alpha_raw_for_unit_slope()];
        let tb = m.gen.transition_net.layers[1].bias;
        m.params.get_mut(tb).values = vec![2.0, 0.0];
        let dw0 = m.gen.decoder_net.layers[0].weight;
        m.params.get_mut(dw0).values = vec![1.0];
        let dw1 = m.gen.decoder_net.layers[1].weight;
        m.params.get_mut(dw1).values = vec![1.0];
        let x = [1.0];
        let t = traj(&[(&x, 1, 0.0), (&x, 1, 0.0), (&x, 0, 0.0)]);
        let pi: Vec<f64> = m.predict_policy(&t).unwrap().iter().map(|b| b.pi).collect();
        assert_eq!(pi[0], 0.5);
        assert!(pi[1] > 0.6);
    }
}
