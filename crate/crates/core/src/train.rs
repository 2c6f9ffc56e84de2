//! Stochastic variational training of the IOL model, belief inference and
//! JSON checkpoints.
//!
//! Runs are deterministic for a given seed: the ELBO noise of every trajectory
//! comes from its own seeded stream, and per-trajectory gradients are summed in
//! batch order after the parallel pass.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{adam_step, AdamConfig, AdamState, DiagGaussian, Gradients, ParamManifest};
use crate::error::{IolError, Result};
use crate::model::{EffectBelief, ElboBreakdown, ElboNoise, IolModel, ModelConfig};
use crate::seed::{derive_seed, rng_for};
use crate::trajectory::{DatasetSplit, SplitFractions, StandardizationParams, TrajectoryRecord};

fn d_lr() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    32
}
fn d_one() -> usize {
    1
}
fn d_clip() -> f64 {
    5.0
}
fn d_patience() -> usize {
    10
}
fn d_warmup() -> usize {
    5
}
fn d_decay() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay; 1 disables it.
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_one")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_warmup")]
    pub kl_warmup_epochs: usize,
    /// Reuse each training trajectory's noise draw in every epoch.
    #[serde(default = "d_true")]
    pub fixed_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: d_lr(),
            lr_decay: d_decay(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            mc_samples: d_one(),
            seed: 0,
            clip_norm: d_clip(),
            patience: d_patience(),
            kl_warmup_epochs: d_warmup(),
            fixed_noise: d_true(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IolError::Validation(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be a finite non-negative number");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if self.mc_samples == 0 {
            return bad("train.mc_samples must be >= 1");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("train.clip_norm must be >= 0");
        }
        Ok(())
    }

    /// KL weight for a (global) epoch index: linear from 0 up to 1.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

/// Per-trajectory means of the unweighted objective `-ELBO = nll + kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub nll: f64,
    pub kl: f64,
}

impl ObjectiveStats {
    fn mean_of(items: &[ElboBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let nll = items.iter().map(|e| e.nll).sum::<f64>() / n;
        let kl = items.iter().map(|e| e.kl).sum::<f64>() / n;
        ObjectiveStats { objective: nll + kl, nll, kl }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub kl_weight: f64,
    pub lr: f64,
    pub train: ObjectiveStats,
    pub validation: Option<ObjectiveStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// One entry per optimizer step, in order.
    pub steps: Vec<ObjectiveStats>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        self.epochs == other.epochs
            && self.steps == other.steps
            && self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
    }

    /// Means of consecutive non-overlapping windows of the per-step objective.
    pub fn smoothed_objective(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        self.steps
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().map(|s| s.objective).sum::<f64>() / window as f64)
            .collect()
    }
}

/// Groups trajectory indices by length, shuffles within each group and cuts
/// batches of at most `batch_size`; the batch order is shuffled too.
pub fn length_batches<R: Rng + ?Sized>(data: &[TrajectoryRecord], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut lengths: Vec<usize> = data.iter().map(|r| r.len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut batches = Vec::new();
    for len in lengths {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].len() == len).collect();
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn sum_in_order(parts: Vec<(ElboBreakdown, Gradients)>) -> (Vec<ElboBreakdown>, Gradients) {
    let mut iter = parts.into_iter();
    let (first_e, mut total) = iter.next().expect("non-empty batch");
    let mut stats = vec![first_e];
    for (e, g) in iter {
        total.add_assign(&g);
        stats.push(e);
    }
    (stats, total)
}

fn evaluate_set(model: &IolModel, data: &[TrajectoryRecord], mc_samples: usize, seed: u64) -> Result<ObjectiveStats> {
    let items = data
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let mut rng = rng_for(seed, i as u64);
            let noise = ElboNoise::draw(&mut rng, mc_samples, traj.len(), model.memory_dim());
            model.elbo_value(traj, &noise)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectiveStats::mean_of(&items))
}

/// Training state that can be continued across calls.
pub struct Trainer {
    pub model: IolModel,
    pub config: TrainConfig,
    /// Epochs already completed before this trainer's next epoch.
    pub epochs_completed: usize,
}

impl Trainer {
    pub fn new(model: IolModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { model, config, epochs_completed: 0 })
    }

    /// Continues from a checkpoint; epoch numbering resumes after its last epoch.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: checkpoint.to_model()?,
            config,
            epochs_completed: checkpoint.epochs_completed,
        })
    }

    /// Runs up to `config.epochs` further epochs and leaves the best-validation
    /// parameters in `self.model`.
    pub fn run(&mut self, split: &DatasetSplit) -> Result<TrainReport> {
        let start = Instant::now();
        let cfg = self.config.clone();
        if split.train.is_empty() {
            return Err(IolError::Validation("training split is empty".into()));
        }
        for (part, name) in [(&split.train, "train"), (&split.validation, "validation")] {
            for r in part.iter() {
                if r.dim() != self.model.context_dim {
                    return Err(IolError::DimensionMismatch {
                        id: format!("{name}:{}", r.id),
                        expected: self.model.context_dim,
                        found: r.dim(),
                    });
                }
            }
        }
        let val_seed = derive_seed(cfg.seed, 0x7A1);
        let fixed_seed = derive_seed(cfg.seed, 0xF1_0000);
        let mut adam = AdamState::new(&self.model.params);
        let mut report = TrainReport {
            epochs: Vec::new(),
            steps: Vec::new(),
            best_epoch: None,
            stopped_early: false,
            wall_clock_secs: 0.0,
        };
        let mut best: Option<(f64, ParamManifest)> = None;
        let mut since_best = 0usize;
        let first_epoch = self.epochs_completed;

        for local in 0..cfg.epochs {
            let epoch = first_epoch + local;
            let kl_weight = cfg.kl_weight(epoch);
            let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
            let adam_cfg = AdamConfig { lr, ..AdamConfig::default() };
            let epoch_seed = derive_seed(cfg.seed, 0xE0_0000 + epoch as u64);
            let mut order_rng = rng_for(epoch_seed, u64::MAX);
            let batches = length_batches(&split.train, cfg.batch_size, &mut order_rng);
            let noise_seed = if cfg.fixed_noise { fixed_seed } else { epoch_seed };
            let mut epoch_items = Vec::with_capacity(split.train.len());

            for (b, batch) in batches.iter().enumerate() {
                let model = &self.model;
                let parts = batch
                    .par_iter()
                    .map(|&i| {
                        let traj = &split.train[i];
                        let mut rng = rng_for(noise_seed, i as u64);
                        let noise = ElboNoise::draw(&mut rng, cfg.mc_samples, traj.len(), model.memory_dim());
                        model.elbo_with_grad(traj, &noise, kl_weight)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| match e {
                        IolError::Numerical(m) => IolError::Numerical(format!("epoch {epoch}, batch {b}: {m}")),
                        other => other,
                    })?;
                let (stats, mut grad) = sum_in_order(parts);
                grad.scale(1.0 / batch.len() as f64);
                let step = ObjectiveStats::mean_of(&stats);
                if !step.objective.is_finite() {
                    return Err(IolError::Numerical(format!("non-finite loss at epoch {epoch}, batch {b}")));
                }
                if cfg.clip_norm > 0.0 {
                    grad.clip_global_norm(cfg.clip_norm);
                }
                self.model.params.set_grads(&grad);
                adam_step(&mut self.model.params, &mut adam, &adam_cfg)
                    .map_err(|e| IolError::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
                report.steps.push(step);
                epoch_items.extend(stats);
            }

            let validation = if split.validation.is_empty() {
                None
            } else {
                Some(evaluate_set(&self.model, &split.validation, cfg.mc_samples, val_seed)?)
            };
            let train_stats = ObjectiveStats::mean_of(&epoch_items);
            let monitored = validation.map_or(train_stats.objective, |v| v.objective);
            if !monitored.is_finite() {
                return Err(IolError::Numerical(format!("non-finite validation objective at epoch {epoch}")));
            }
            report.epochs.push(EpochRecord { epoch, kl_weight, lr, train: train_stats, validation });
            self.epochs_completed = epoch + 1;
            if best.as_ref().is_none_or(|(v, _)| monitored < *v) {
                best = Some((monitored, self.model.params.to_manifest()));
                report.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        if let Some((_, params)) = best {
            self.model.params.load_manifest(&params)?;
        }
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Trains a fresh model on a standardized split.
pub fn train(split: &DatasetSplit, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(IolModel, TrainReport)> {
    let model = IolModel::new(model_cfg.clone(), split.dim())?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let report = trainer.run(split)?;
    Ok((trainer.model, report))
}

/// Beliefs along one trajectory together with the memory posterior per step.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredTrajectory {
    pub id: String,
    pub beliefs: Vec<EffectBelief>,
    pub memory: Vec<DiagGaussian>,
}

/// Posterior-mean beliefs, computed ancestrally without sampling.
pub fn infer_beliefs(model: &IolModel, traj: &TrajectoryRecord) -> Result<InferredTrajectory> {
    if traj.dim() != model.context_dim {
        return Err(IolError::DimensionMismatch { id: traj.id.clone(), expected: model.context_dim, found: traj.dim() });
    }
    let (beliefs, memory) = model.smoothed_beliefs(traj)?;
    Ok(InferredTrajectory { id: traj.id.clone(), beliefs, memory })
}

/// Like [`infer_beliefs`], but draws each memory from its posterior.
pub fn infer_beliefs_sampled<R: Rng + ?Sized>(model: &IolModel, traj: &TrajectoryRecord, rng: &mut R) -> Result<InferredTrajectory> {
    if traj.dim() != model.context_dim {
        return Err(IolError::DimensionMismatch { id: traj.id.clone(), expected: model.context_dim, found: traj.dim() });
    }
    let summaries = model.backward_summaries(traj)?;
    let mut beliefs = Vec::with_capacity(traj.len());
    let mut memory = Vec::with_capacity(traj.len());
    let mut m_prev: Option<Vec<f64>> = None;
    for (t, step) in traj.steps.iter().enumerate() {
        let b = match (t, model.config.posterior_summary) {
            (0, _) => &summaries[0],
            (_, crate::model::SummaryIndex::Previous) => &summaries[t - 1],
            (_, crate::model::SummaryIndex::Current) => &summaries[t],
        };
        let q = model.posterior_step(m_prev.as_deref(), b)?;
        let m = q.sample(rng);
        let mut belief = model.decode_effect(&m, &step.x)?;
        belief.t = t;
        beliefs.push(belief);
        memory.push(q);
        m_prev = Some(m);
    }
    Ok(InferredTrajectory { id: traj.id.clone(), beliefs, memory })
}

/// Posterior-mean beliefs for a whole dataset, in input order.
pub fn infer_all(model: &IolModel, data: &[TrajectoryRecord]) -> Result<Vec<InferredTrajectory>> {
    data.par_iter().map(|t| infer_beliefs(model, t)).collect()
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// How a raw corpus was split for training; lets later stages rebuild the test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: SplitFractions,
    pub seed: u64,
}

/// Model header, data preprocessing and parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub model: ModelConfig,
    pub context_dim: usize,
    pub alpha_raw: f64,
    pub beta: f64,
    pub epochs_completed: usize,
    pub standardization: StandardizationParams,
    pub split: Option<SplitSpec>,
    pub params: ParamManifest,
}

impl Checkpoint {
    pub fn from_model(
        model: &IolModel,
        epochs_completed: usize,
        standardization: StandardizationParams,
        split: Option<SplitSpec>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            model: model.config.clone(),
            context_dim: model.context_dim,
            alpha_raw: model.params.values(model.gen.alpha_raw)[0],
            beta: model.beta(),
            epochs_completed,
            standardization,
            split,
            params: model.params.to_manifest(),
        }
    }

    pub fn to_model(&self) -> Result<IolModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(IolError::Validation(format!("unsupported checkpoint format {}", self.format)));
        }
        if self.standardization.x_mean.len() != self.context_dim {
            return Err(IolError::shape("checkpoint standardization", self.context_dim, self.standardization.x_mean.len()));
        }
        let mut model = IolModel::new(self.model.clone(), self.context_dim)?;
        model.params.load_manifest(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| IolError::Validation(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| IolError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IolError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| IolError::Parse { line: e.line(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_simulation, SimConfig};
    use crate::trajectory::split;

    fn small_split() -> DatasetSplit {
        let out = run_simulation(&SimConfig { n_traj: 40, horizon: 6, context_dim: 3, ..SimConfig::default() }).unwrap();
        split(&out.corpus, SplitFractions::default(), 1).unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig { memory_dim: 3, hidden: 8, summary_dim: 6, ..ModelConfig::default() }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, ..TrainConfig::default() }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let s = small_split();
        let init = IolModel::new(small_model(), 3).unwrap();
        let (model, report) = train(&s, &small_model(), &TrainConfig { lr: 0.0, ..quick(1) }).unwrap();
        assert_eq!(model.params.to_manifest(), init.params.to_manifest());
        assert_eq!(report.epochs.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let s = small_split();
        let (a, ra) = train(&s, &small_model(), &quick(3)).unwrap();
        let (b, rb) = train(&s, &small_model(), &quick(3)).unwrap();
        assert!(ra.same_run(&rb));
        assert_eq!(a.params.to_manifest(), b.params.to_manifest());
    }

    #[test]
    fn objective_decomposes() {
        let s = small_split();
        let (_, r) = train(&s, &small_model(), &quick(2)).unwrap();
        for st in r.steps.iter().chain(r.epochs.iter().map(|e| &e.train)) {
            assert!((st.objective - (st.nll + st.kl)).abs() <= 1e-9);
        }
        assert_eq!(r.epochs.len(), 2);
    }

    #[test]
    fn best_epoch_has_minimum_validation_objective() {
        let s = small_split();
        let (_, r) = train(&s, &small_model(), &TrainConfig { lr: 5e-3, patience: 3, ..quick(12) }).unwrap();
        let best = r.best_epoch.unwrap();
        let min = r
            .epochs
            .iter()
            .map(|e| e.validation.unwrap().objective)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.epochs[best].validation.unwrap().objective, min);
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let mut s = small_split();
        s.train.clear();
        assert!(train(&s, &small_model(), &quick(1)).is_err());
    }

    #[test]
    fn kl_warmup_is_linear() {
        let c = TrainConfig { kl_warmup_epochs: 4, ..TrainConfig::default() };
        let w: Vec<f64> = (0..6).map(|e| c.kl_weight(e)).collect();
        assert_eq!(w, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
        assert_eq!(TrainConfig { kl_warmup_epochs: 0, ..c }.kl_weight(0), 1.0);
    }

    #[test]
    fn batches_share_a_length_and_cover_everything() {
        let mut data = small_split().train;
        data[0].steps.truncate(2);
        data[1].steps.truncate(2);
        let mut rng = rng_for(0, 0);
        let batches = length_batches(&data, 4, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 4);
            assert!(b.iter().all(|&i| data[i].len() == data[b[0]].len()));
        }
    }

    #[test]
    fn beliefs_are_deterministic_and_one_per_step() {
        let s = small_split();
        let model = IolModel::new(small_model(), 3).unwrap();
        let t = &s.test[0];
        let a = infer_beliefs(&model, t).unwrap();
        assert_eq!(a, infer_beliefs(&model, t).unwrap());
        assert_eq!(a.beliefs.len(), t.len());
        let mut one = t.clone();
        one.steps.truncate(1);
        assert_eq!(infer_beliefs(&model, &one).unwrap().beliefs.len(), 1);
        let mut wrong = t.clone();
        wrong.steps.iter_mut().for_each(|s| s.x.push(0.0));
        assert!(infer_beliefs(&model, &wrong).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_resume_numbering() {
        let s = small_split();
        let model = IolModel::new(small_model(), 3).unwrap();
        let mut trainer = Trainer::new(model, quick(2)).unwrap();
        trainer.run(&s).unwrap();
        let ck = Checkpoint::from_model(&trainer.model, trainer.epochs_completed, s.standardization.clone(), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().params.to_manifest(), trainer.model.params.to_manifest());
        let mut resumed = Trainer::resume(&back, quick(2)).unwrap();
        let r = resumed.run(&s).unwrap();
        assert_eq!(r.epochs.first().unwrap().epoch, 2);
        assert_eq!(resumed.epochs_completed, 4);
    }
}
