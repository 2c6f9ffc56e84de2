//! Forward problem: a linear outcome environment and an online-learning agent.
//!
//! At each step a context `x ~ N(0, I)` arrives, the agent computes its
//! perceived effect `<x, w1 - w0>`, acts with probability
//! `sigmoid(alpha * (effect - beta))`, observes `y = <x, w_a_true> + noise`, and
//! corrects the taken arm's weights by online gradient descent:
//! `w_a <- w_a - lr * (<x, w_a> - y) * x`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::sigmoid;
use crate::error::{IolError, Result};
use crate::seed::{derive_seed, rng_for};
use crate::trajectory::{fmt_f64, push_f64_array, StepRecord, TrajectoryRecord};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub d: usize,
    pub w1_true: Vec<f64>,
    pub w0_true: Vec<f64>,
    pub noise_std: f64,
}

/// True outcome weights drawn i.i.d. standard normal from `seed`.
pub fn make_environment(d: usize, seed: u64, noise_std: f64) -> Result<Environment> {
    if d == 0 {
        return Err(IolError::Validation("context dimension must be >= 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(IolError::Validation(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let mut rng = rng_for(seed, 0xE57);
    let w1_true = normal_vec(&mut rng, d, 1.0);
    let w0_true = normal_vec(&mut rng, d, 1.0);
    Ok(Environment { d, w1_true, w0_true, noise_std })
}

impl Environment {
    pub fn mean_outcome(&self, x: &[f64], a: u8) -> f64 {
        dot(x, if a == 1 { &self.w1_true } else { &self.w0_true })
    }

    pub fn effect_weights(&self) -> Vec<f64> {
        self.w1_true.iter().zip(&self.w0_true).map(|(a, b)| a - b).collect()
    }
}

/// Expected conditional treatment effect `<x, w1_true - w0_true>`.
pub fn true_cate(env: &Environment, x: &[f64]) -> Result<f64> {
    if x.len() != env.d {
        return Err(IolError::shape("true_cate context", env.d, x.len()));
    }
    Ok(env.w1_true.iter().zip(&env.w0_true).zip(x).map(|((a, b), v)| (a - b) * v).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub w1: Vec<f64>,
    pub w0: Vec<f64>,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl AgentState {
    pub fn new(w1: Vec<f64>, w0: Vec<f64>, lr: f64) -> Self {
        AgentState { w1, w0, lr, alpha: 1.0, beta: 0.0 }
    }

    pub fn perceived_effect(&self, x: &[f64]) -> f64 {
        dot(x, &self.w1) - dot(x, &self.w0)
    }

    pub fn effect_weights(&self) -> Vec<f64> {
        self.w1.iter().zip(&self.w0).map(|(a, b)| a - b).collect()
    }

    pub fn treat_probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.alpha * (self.perceived_effect(x) - self.beta))
    }
}

/// Samples an action from the agent's soft treatment rule; returns `(a, P(a=1))`.
pub fn agent_act<R: Rng + ?Sized>(agent: &AgentState, x: &[f64], rng: &mut R) -> (u8, f64) {
    let p = agent.treat_probability(x);
    let u: f64 = rng.random();
    (u8::from(u < p), p)
}

/// Online gradient step on the taken arm only.
pub fn agent_update(agent: &AgentState, x: &[f64], a: u8, y: f64) -> AgentState {
    let mut next = agent.clone();
    let w = if a == 1 { &mut next.w1 } else { &mut next.w0 };
    let residual = dot(x, w) - y;
    for (wi, xi) in w.iter_mut().zip(x) {
        *wi -= agent.lr * residual * xi;
    }
    next
}

/// Where each trajectory's starting beliefs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentPrior {
    /// Every trajectory starts from the same agent.
    Fixed(AgentState),
    /// Each trajectory draws `w1, w0 ~ N(0, std^2 I)` from its own seed stream.
    Sampled { lr: f64, std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    Shared,
    PerTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefStep {
    pub tau_true_belief: f64,
    pub w1: Vec<f64>,
    pub w0: Vec<f64>,
}

/// The agent's hidden beliefs at each step, before that step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefTrajectory {
    pub id: String,
    pub steps: Vec<BeliefStep>,
}

impl BeliefStep {
    pub fn effect_weights(&self) -> Vec<f64> {
        self.w1.iter().zip(&self.w0).map(|(a, b)| a - b).collect()
    }
}

pub fn trajectory_id(i: usize) -> String {
    format!("traj{i:06}")
}

/// Runs `n_traj` independent trajectories of length `horizon`.
pub fn simulate(
    env: &Environment,
    agent_init: &AgentPrior,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<(Vec<TrajectoryRecord>, Vec<BeliefTrajectory>)> {
    if n_traj == 0 || horizon == 0 {
        return Err(IolError::Validation("n_traj and horizon must be >= 1".into()));
    }
    if let AgentPrior::Fixed(a) = agent_init {
        if a.w1.len() != env.d || a.w0.len() != env.d {
            return Err(IolError::shape("agent prior", env.d, a.w1.len()));
        }
    }
    let pairs: Vec<(TrajectoryRecord, BeliefTrajectory)> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let mut agent = match agent_init {
                AgentPrior::Fixed(a) => a.clone(),
                AgentPrior::Sampled { lr, std } => {
                    let w1 = normal_vec(&mut rng, env.d, *std);
                    let w0 = normal_vec(&mut rng, env.d, *std);
                    AgentState::new(w1, w0, *lr)
                }
            };
            let id = trajectory_id(i);
            let mut steps = Vec::with_capacity(horizon);
            let mut beliefs = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let x = normal_vec(&mut rng, env.d, 1.0);
                beliefs.push(BeliefStep {
                    tau_true_belief: agent.perceived_effect(&x),
                    w1: agent.w1.clone(),
                    w0: agent.w0.clone(),
                });
                let (a, _) = agent_act(&agent, &x, &mut rng);
                let noise: f64 = rng.sample(StandardNormal);
                let y = env.mean_outcome(&x, a) + env.noise_std * noise;
                agent = agent_update(&agent, &x, a, y);
                steps.push(StepRecord::new(x, a, y));
            }
            (TrajectoryRecord::new(id.clone(), steps), BeliefTrajectory { id, steps: beliefs })
        })
        .collect();
    Ok(pairs.into_iter().unzip())
}

fn default_n_traj() -> usize {
    2000
}
fn default_horizon() -> usize {
    50
}
fn default_context_dim() -> usize {
    5
}
fn default_lambda() -> f64 {
    0.05
}
fn default_noise_std() -> f64 {
    0.5
}
fn default_prior_mode() -> PriorMode {
    PriorMode::Shared
}
fn default_prior_std() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_context_dim")]
    pub context_dim: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prior_mode")]
    pub prior_mode: PriorMode,
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_traj: default_n_traj(),
            horizon: default_horizon(),
            context_dim: default_context_dim(),
            lambda: default_lambda(),
            noise_std: default_noise_std(),
            seed: 0,
            prior_mode: default_prior_mode(),
            prior_std: default_prior_std(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub env: Environment,
    pub prior: AgentPrior,
    pub corpus: Vec<TrajectoryRecord>,
    pub beliefs: Vec<BeliefTrajectory>,
}

impl SimOutput {
    /// Cosine between the shared prior's effect weights and the true effect
    /// weights; `None` for per-trajectory priors.
    pub fn prior_truth_cosine(&self) -> Option<f64> {
        match &self.prior {
            AgentPrior::Fixed(a) => Some(cosine(&a.effect_weights(), &self.env.effect_weights())),
            AgentPrior::Sampled { .. } => None,
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Builds the environment and agent prior from `cfg.seed` and simulates.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutput> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(IolError::Validation(format!("sim.lambda must be >= 0, got {}", cfg.lambda)));
    }
    if !(cfg.prior_std > 0.0 && cfg.prior_std.is_finite()) {
        return Err(IolError::Validation(format!("sim.prior_std must be > 0, got {}", cfg.prior_std)));
    }
    let env = make_environment(cfg.context_dim, derive_seed(cfg.seed, 1), cfg.noise_std)?;
    let prior = match cfg.prior_mode {
        PriorMode::Shared => {
            let mut rng = rng_for(cfg.seed, 2);
            let w1 = normal_vec(&mut rng, cfg.context_dim, cfg.prior_std);
            let w0 = normal_vec(&mut rng, cfg.context_dim, cfg.prior_std);
            AgentPrior::Fixed(AgentState::new(w1, w0, cfg.lambda))
        }
        PriorMode::PerTrajectory => AgentPrior::Sampled { lr: cfg.lambda, std: cfg.prior_std },
    };
    let (corpus, beliefs) = simulate(&env, &prior, cfg.n_traj, cfg.horizon, derive_seed(cfg.seed, 3))?;
    Ok(SimOutput { env, prior, corpus, beliefs })
}

pub fn belief_json_line(b: &BeliefTrajectory) -> String {
    let mut buf = String::from("{\"id\":");
    buf.push_str(&serde_json::to_string(&b.id).expect("string serialization"));
    buf.push_str(",\"steps\":[");
    for (i, s) in b.steps.iter().enumerate() {
        if i > 0 {
            buf.push(',');
        }
        buf.push_str("{\"tau_true_belief\":");
        buf.push_str(&fmt_f64(s.tau_true_belief));
        buf.push_str(",\"w1\":");
        push_f64_array(&mut buf, &s.w1);
        buf.push_str(",\"w0\":");
        push_f64_array(&mut buf, &s.w0);
        buf.push('}');
    }
    buf.push_str("]}");
    buf
}

pub fn save_beliefs_jsonl(beliefs: &[BeliefTrajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IolError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for b in beliefs {
        writeln!(w, "{}", belief_json_line(b)).map_err(|e| IolError::io(path, e))?;
    }
    w.flush().map_err(|e| IolError::io(path, e))
}

pub fn load_beliefs_jsonl(path: impl AsRef<Path>) -> Result<Vec<BeliefTrajectory>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| IolError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IolError::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn environment_deterministic_and_sized() {
        let a = make_environment(5, 3, 0.5).unwrap();
        assert_eq!(a, make_environment(5, 3, 0.5).unwrap());
        assert_eq!(a.w1_true.len(), 5);
        assert_eq!(a.w0_true.len(), 5);
        assert!(make_environment(0, 3, 0.5).is_err());
    }

    #[test]
    fn noiseless_outcomes_are_linear() {
        let env = make_environment(3, 1, 0.0).unwrap();
        let agent = AgentState::new(vec![0.0; 3], vec![0.0; 3], 0.0);
        let (corpus, _) = simulate(&env, &AgentPrior::Fixed(agent), 5, 10, 9).unwrap();
        for s in corpus.iter().flat_map(|r| &r.steps) {
            assert_eq!(s.y, env.mean_outcome(&s.x, s.a));
        }
    }

    #[test]
    fn cate_cases() {
        let env = make_environment(4, 2, 0.5).unwrap();
        assert_eq!(true_cate(&env, &[0.0; 4]).unwrap(), 0.0);
        let same = Environment { d: 2, w1_true: vec![1.0, 2.0], w0_true: vec![1.0, 2.0], noise_std: 0.0 };
        assert_eq!(true_cate(&same, &[3.0, -7.0]).unwrap(), 0.0);
        let x = [0.3, -1.0, 2.5, 0.1];
        let two = dot(&x, &env.w1_true) - dot(&x, &env.w0_true);
        assert!((true_cate(&env, &x).unwrap() - two).abs() < 1e-12);
        assert!(true_cate(&env, &[1.0]).is_err());
    }

    #[test]
    fn act_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = AgentState::new(vec![1.0, 0.0], vec![0.0, 0.0], 0.1);
        let (_, p) = agent_act(&agent, &[0.0, 5.0], &mut rng);
        assert_eq!(p, 0.5);
        let (_, p) = agent_act(&agent, &[3f64.ln(), 9.0], &mut rng);
        let expect = 1.0 / (1.0 + (-(3f64.ln())).exp());
        assert!((p - 0.75).abs() < 1e-15 && (p - expect).abs() < 1e-15);
        let (a, p) = agent_act(&agent, &[800.0, 0.0], &mut rng);
        assert_eq!((a, p), (1, 1.0));
    }

    #[test]
    fn probability_monotone_in_effect() {
        let agent = AgentState::new(vec![1.0], vec![0.0], 0.1);
        let mut prev = -1.0;
        for k in -300..=300 {
            let p = agent.treat_probability(&[k as f64 * 0.05]);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn update_examples() {
        let agent = AgentState::new(vec![0.0, 0.0], vec![0.5, 0.5], 0.1);
        let next = agent_update(&agent, &[1.0, 2.0], 1, 1.0);
        let expect: Vec<f64> = [1.0, 2.0].iter().map(|x| 0.0 - 0.1 * ((0.0 - 1.0) * x)).collect();
        assert_eq!(next.w1, expect);
        assert!((next.w1[0] - 0.1).abs() < 1e-15 && (next.w1[1] - 0.2).abs() < 1e-15);
        assert_eq!(next.w0, agent.w0);

        let zero_res = agent_update(&agent, &[1.0, 1.0], 0, 1.0);
        assert_eq!(zero_res, agent);

        let untreated = agent_update(&agent, &[1.0, -3.0], 0, 4.0);
        assert_eq!(untreated.w1, agent.w1);
        assert_ne!(untreated.w0, agent.w0);
    }

    #[test]
    fn zero_learning_rate_keeps_beliefs() {
        let env = make_environment(3, 4, 0.5).unwrap();
        let (_, beliefs) = simulate(&env, &AgentPrior::Sampled { lr: 0.0, std: 1.0 }, 4, 20, 1).unwrap();
        for b in &beliefs {
            for s in &b.steps {
                assert_eq!(s.w1, b.steps[0].w1);
                assert_eq!(s.w0, b.steps[0].w0);
            }
        }
    }

    #[test]
    fn truth_is_a_fixed_point_without_noise() {
        let env = make_environment(3, 4, 0.0).unwrap();
        let agent = AgentState::new(env.w1_true.clone(), env.w0_true.clone(), 0.1);
        let (_, beliefs) = simulate(&env, &AgentPrior::Fixed(agent), 3, 30, 1).unwrap();
        for s in beliefs.iter().flat_map(|b| &b.steps) {
            for (a, b) in s.w1.iter().zip(&env.w1_true) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn learning_reduces_weight_error() {
        let env = make_environment(3, 8, 0.5).unwrap();
        let prior = AgentPrior::Sampled { lr: 0.02, std: 1.0 };
        let (corpus, beliefs) = simulate(&env, &prior, 100, 200, 5).unwrap();
        let mse = |t: usize| -> f64 {
            let mut acc = 0.0;
            for (r, b) in corpus.iter().zip(&beliefs) {
                let w = if r.steps[t].a == 1 { (&b.steps[t].w1, &env.w1_true) } else { (&b.steps[t].w0, &env.w0_true) };
                acc += w.0.iter().zip(w.1).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            acc / corpus.len() as f64
        };
        assert!(mse(199) < mse(0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = SimConfig { n_traj: 20, horizon: 7, ..SimConfig::default() };
        let a = run_simulation(&cfg).unwrap();
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.beliefs, b.beliefs);
    }

    #[test]
    fn belief_log_matches_agent_replay() {
        let cfg = SimConfig { n_traj: 3, horizon: 15, ..SimConfig::default() };
        let out = run_simulation(&cfg).unwrap();
        let AgentPrior::Fixed(start) = &out.prior else { panic!("shared prior expected") };
        for (r, b) in out.corpus.iter().zip(&out.beliefs) {
            let mut agent = start.clone();
            for (s, bs) in r.steps.iter().zip(&b.steps) {
                assert_eq!(bs.w1, agent.w1);
                assert_eq!(bs.tau_true_belief, agent.perceived_effect(&s.x));
                agent = agent_update(&agent, &s.x, s.a, s.y);
            }
        }
    }

    #[test]
    fn beliefs_round_trip() {
        let cfg = SimConfig { n_traj: 4, horizon: 3, ..SimConfig::default() };
        let out = run_simulation(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.jsonl");
        save_beliefs_jsonl(&out.beliefs, &p).unwrap();
        assert_eq!(load_beliefs_jsonl(&p).unwrap(), out.beliefs);
    }
}
