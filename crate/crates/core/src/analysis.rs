//! Post-hoc interpretation of a trained model: time-binned relative weights,
//! policy-shift samples and belief recovery against simulator ground truth.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IolError, Result};
use crate::model::IolModel;
use crate::sim::BeliefTrajectory;
use crate::train::{infer_all, InferredTrajectory};
use crate::trajectory::{fmt_f64, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBin {
    pub bin: usize,
    /// Steps `t` with `t_start <= t < t_end` (0-based).
    pub t_start: usize,
    pub t_end: usize,
    pub n_steps: usize,
    /// No steps fell in this bin; `relative_weight` is all zeros.
    pub empty: bool,
    pub relative_weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTimeline {
    pub feature_names: Vec<String>,
    pub bins: Vec<WeightBin>,
}

pub fn default_feature_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

/// Bins `(t, weights)` samples into `n_bins` equal-width bins over
/// `0..horizon`, averages `|w|` per feature and L1-normalizes each bin.
pub fn bin_weights<'a>(
    samples: impl IntoIterator<Item = (usize, &'a [f64])>,
    horizon: usize,
    dim: usize,
    n_bins: usize,
) -> Result<Vec<WeightBin>> {
    if n_bins == 0 {
        return Err(IolError::Validation("analysis.n_bins must be >= 1".into()));
    }
    let horizon = horizon.max(1);
    let mut sums = vec![vec![0.0; dim]; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (t, w) in samples {
        if w.len() != dim {
            return Err(IolError::shape("weight vector", dim, w.len()));
        }
        let b = (t * n_bins / horizon).min(n_bins - 1);
        counts[b] += 1;
        for (s, v) in sums[b].iter_mut().zip(w) {
            *s += v.abs();
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = counts[b];
            let mut rel = sums[b].clone();
            if n > 0 {
                let total: f64 = rel.iter().sum();
                if total > 0.0 {
                    rel.iter_mut().for_each(|v| *v /= total);
                } else {
                    rel.iter_mut().for_each(|v| *v = 1.0 / dim as f64);
                }
            }
            WeightBin {
                bin: b,
                t_start: (b * horizon).div_ceil(n_bins),
                t_end: ((b + 1) * horizon).div_ceil(n_bins),
                n_steps: n,
                empty: n == 0,
                relative_weight: rel,
            }
        })
        .collect())
}

pub fn weight_timelines_from(inferred: &[InferredTrajectory], dim: usize, n_bins: usize) -> Result<WeightTimeline> {
    let horizon = inferred.iter().map(|t| t.beliefs.len()).max().unwrap_or(0);
    let samples = inferred.iter().flat_map(|tr| tr.beliefs.iter().map(|b| (b.t, b.omega1.as_slice())));
    Ok(WeightTimeline { feature_names: default_feature_names(dim), bins: bin_weights(samples, horizon, dim, n_bins)? })
}

pub fn weight_timelines(model: &IolModel, data: &[TrajectoryRecord], n_bins: usize) -> Result<WeightTimeline> {
    weight_timelines_from(&infer_all(model, data)?, model.context_dim, n_bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeBucket {
    Positive,
    Negative,
}

impl OutcomeBucket {
    /// Strictly positive standardized outcomes are `Positive`.
    pub fn of(y: f64) -> Self {
        if y > 0.0 {
            OutcomeBucket::Positive
        } else {
            OutcomeBucket::Negative
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutcomeBucket::Positive => "positive",
            OutcomeBucket::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSample {
    pub traj_id: String,
    pub t: usize,
    pub action_taken: u8,
    pub outcome_bucket: OutcomeBucket,
    pub shift: f64,
}

/// Where the change in perceived effect is measured.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ShiftMode {
    /// At the context just observed: `<x_t, omega_{t+1} - omega_t>`.
    #[default]
    JustSeen,
    /// Mean change over a fixed panel of reference contexts.
    ReferencePanel(Vec<Vec<f64>>),
}

fn weight_change_at(mode: &ShiftMode, x: &[f64], delta: &[f64]) -> f64 {
    let dot = |z: &[f64]| z.iter().zip(delta).map(|(a, b)| a * b).sum::<f64>();
    match mode {
        ShiftMode::JustSeen => dot(x),
        ShiftMode::ReferencePanel(panel) => panel.iter().map(|z| dot(z)).sum::<f64>() / panel.len().max(1) as f64,
    }
}

/// One sample per step with a successor, labelled by that step's action and
/// outcome sign.
pub fn shifts_from(inferred: &[InferredTrajectory], data: &[TrajectoryRecord], mode: &ShiftMode) -> Result<Vec<ShiftSample>> {
    if inferred.len() != data.len() {
        return Err(IolError::shape("shift inputs", data.len(), inferred.len()));
    }
    let mut out = Vec::new();
    for (tr, rec) in inferred.iter().zip(data) {
        if tr.id != rec.id || tr.beliefs.len() != rec.len() {
            return Err(IolError::Validation(format!("beliefs for '{}' do not match trajectory '{}'", tr.id, rec.id)));
        }
        for t in 0..rec.len().saturating_sub(1) {
            let delta: Vec<f64> = tr.beliefs[t + 1].omega1.iter().zip(&tr.beliefs[t].omega1).map(|(a, b)| a - b).collect();
            let step = &rec.steps[t];
            out.push(ShiftSample {
                traj_id: rec.id.clone(),
                t,
                action_taken: step.a,
                outcome_bucket: OutcomeBucket::of(step.y),
                shift: weight_change_at(mode, &step.x, &delta),
            });
        }
    }
    Ok(out)
}

pub fn policy_shift_series(model: &IolModel, data: &[TrajectoryRecord], mode: &ShiftMode) -> Result<Vec<ShiftSample>> {
    shifts_from(&infer_all(model, data)?, data, mode)
}

/// The simulated agent's own shifts `<x_t, w_{t+1} - w_t>` on the effect weights.
pub fn true_shift_series(corpus: &[TrajectoryRecord], beliefs: &[BeliefTrajectory]) -> Result<Vec<ShiftSample>> {
    let by_id = index_beliefs(beliefs);
    let mut out = Vec::new();
    for rec in corpus {
        let log = aligned(&by_id, rec)?;
        for t in 0..rec.len().saturating_sub(1) {
            let (now, next) = (log.steps[t].effect_weights(), log.steps[t + 1].effect_weights());
            let delta: Vec<f64> = next.iter().zip(&now).map(|(a, b)| a - b).collect();
            let step = &rec.steps[t];
            out.push(ShiftSample {
                traj_id: rec.id.clone(),
                t,
                action_taken: step.a,
                outcome_bucket: OutcomeBucket::of(step.y),
                shift: weight_change_at(&ShiftMode::JustSeen, &step.x, &delta),
            });
        }
    }
    Ok(out)
}

fn index_beliefs(beliefs: &[BeliefTrajectory]) -> HashMap<&str, &BeliefTrajectory> {
    beliefs.iter().map(|b| (b.id.as_str(), b)).collect()
}

fn aligned<'a>(by_id: &HashMap<&str, &'a BeliefTrajectory>, rec: &TrajectoryRecord) -> Result<&'a BeliefTrajectory> {
    let log = by_id
        .get(rec.id.as_str())
        .ok_or_else(|| IolError::Validation(format!("beliefs log has no trajectory '{}'", rec.id)))?;
    if log.steps.len() != rec.len() {
        return Err(IolError::Validation(format!(
            "beliefs log for '{}' has {} steps, corpus has {}",
            rec.id,
            log.steps.len(),
            rec.len()
        )));
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub accuracy: f64,
    pub n_compared: usize,
    /// Steps where either effect was exactly zero; left out of the denominator.
    pub n_ties: usize,
}

/// Sign agreement between predicted effects (one vector per corpus
/// trajectory, same order) and the agent's logged beliefs.
pub fn recovery_from_effects(
    corpus: &[TrajectoryRecord],
    predicted: &[Vec<f64>],
    beliefs: &[BeliefTrajectory],
) -> Result<RecoveryScore> {
    if predicted.len() != corpus.len() {
        return Err(IolError::shape("predicted effects", corpus.len(), predicted.len()));
    }
    let by_id = index_beliefs(beliefs);
    let (mut agree, mut n, mut ties) = (0usize, 0usize, 0usize);
    for (rec, pred) in corpus.iter().zip(predicted) {
        let log = aligned(&by_id, rec)?;
        if pred.len() != rec.len() {
            return Err(IolError::shape(format!("predicted effects for '{}'", rec.id), rec.len(), pred.len()));
        }
        for (p, b) in pred.iter().zip(&log.steps) {
            if *p == 0.0 || b.tau_true_belief == 0.0 {
                ties += 1;
                continue;
            }
            n += 1;
            agree += usize::from((*p > 0.0) == (b.tau_true_belief > 0.0));
        }
    }
    if n == 0 {
        return Err(IolError::Validation("no comparable steps for belief recovery".into()));
    }
    Ok(RecoveryScore { accuracy: agree as f64 / n as f64, n_compared: n, n_ties: ties })
}

pub fn belief_recovery_score(model: &IolModel, corpus: &[TrajectoryRecord], beliefs: &[BeliefTrajectory]) -> Result<RecoveryScore> {
    let inferred = infer_all(model, corpus)?;
    let taus: Vec<Vec<f64>> = inferred.iter().map(|t| t.beliefs.iter().map(|b| b.tau).collect()).collect();
    recovery_from_effects(corpus, &taus, beliefs)
}

fn write_csv(path: &Path, header: &[String], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| IolError::Validation(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| IolError::Validation(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| IolError::io(path, e))
}

/// `bin,feature_index,feature_name,relative_weight`; empty bins leave the
/// weight cell blank.
pub fn export_weights_csv(timeline: &WeightTimeline, path: impl AsRef<Path>) -> Result<()> {
    let header = ["bin", "feature_index", "feature_name", "relative_weight"].map(String::from);
    let mut rows = Vec::new();
    for b in &timeline.bins {
        for (i, name) in timeline.feature_names.iter().enumerate() {
            let w = if b.empty { String::new() } else { fmt_f64(b.relative_weight[i]) };
            rows.push(vec![b.bin.to_string(), i.to_string(), name.clone(), w]);
        }
    }
    write_csv(path.as_ref(), &header, rows)
}

/// `traj_id,t,action,outcome_bucket,shift`, sorted by id then step.
pub fn export_shifts_csv(samples: &[ShiftSample], path: impl AsRef<Path>) -> Result<()> {
    let header = ["traj_id", "t", "action", "outcome_bucket", "shift"].map(String::from);
    let mut sorted: Vec<&ShiftSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.traj_id.cmp(&b.traj_id).then(a.t.cmp(&b.t)));
    let rows = sorted
        .into_iter()
        .map(|s| {
            vec![
                s.traj_id.clone(),
                s.t.to_string(),
                s.action_taken.to_string(),
                s.outcome_bucket.name().to_string(),
                fmt_f64(s.shift),
            ]
        })
        .collect();
    write_csv(path.as_ref(), &header, rows)
}

/// `traj_id,t,tau_inferred,pi,omega_0..omega_{d-1}`, sorted by id then step.
pub fn export_beliefs_csv(inferred: &[InferredTrajectory], dim: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut header: Vec<String> = ["traj_id", "t", "tau_inferred", "pi"].map(String::from).to_vec();
    header.extend((0..dim).map(|i| format!("omega_{i}")));
    let mut sorted: Vec<&InferredTrajectory> = inferred.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rows = Vec::new();
    for tr in sorted {
        for b in &tr.beliefs {
            if b.omega1.len() != dim {
                return Err(IolError::shape("belief weights", dim, b.omega1.len()));
            }
            let mut row = vec![tr.id.clone(), b.t.to_string(), fmt_f64(b.tau), fmt_f64(b.pi)];
            row.extend(b.omega1.iter().map(|v| fmt_f64(*v)));
            rows.push(row);
        }
    }
    write_csv(path.as_ref(), &header, rows)
}
