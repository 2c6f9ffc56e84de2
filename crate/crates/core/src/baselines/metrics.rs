//! Action-matching metrics: accuracy, ROC AUC, average precision and NLL.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IolError, Result};
use crate::seed::rng_for;

/// Predicted probabilities of `a = 1` next to the observed actions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub probs: Vec<f64>,
    pub actions: Vec<u8>,
}

impl PolicyScore {
    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.actions.len() {
            return Err(IolError::shape("policy score", self.actions.len(), self.probs.len()));
        }
        if self.probs.is_empty() {
            return Err(IolError::Validation("cannot evaluate an empty test set".into()));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(IolError::Validation(format!("probability {p} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Midrank of every score (1-based; tied scores share their average rank).
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney ROC AUC; `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall step curve: the sum over distinct score
/// thresholds of `(R_k - R_{k-1}) * P_k`. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn mean_nll(probs: &[f64], labels: &[u8]) -> f64 {
    const EPS: f64 = 1e-15;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if l == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

pub fn accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(&p, &l)| u8::from(p >= 0.5) == l).count();
    hits as f64 / probs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub acc: f64,
    pub auc: Option<f64>,
    pub aps: Option<f64>,
    pub nll: f64,
}

pub fn metric_values(score: &PolicyScore) -> Result<MetricValues> {
    score.validate()?;
    Ok(MetricValues {
        acc: accuracy(&score.probs, &score.actions),
        auc: auc(&score.probs, &score.actions),
        aps: average_precision(&score.probs, &score.actions),
        nll: mean_nll(&score.probs, &score.actions),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub n_steps: usize,
    /// Bootstrap repetitions behind the std columns; 0 means a single pass.
    pub repetitions: usize,
    pub acc: Stat,
    pub auc: Option<Stat>,
    pub aps: Option<Stat>,
    pub nll: Stat,
    /// False when the test set holds a single class and AUC/APS are undefined.
    pub ranking_defined: bool,
}

/// Scores `score` once, or as mean and std over `repetitions` bootstrap
/// resamples of the test steps.
pub fn evaluate(method: &str, score: &PolicyScore, repetitions: usize, seed: u64) -> Result<MetricReport> {
    let full = metric_values(score)?;
    let ranking_defined = full.auc.is_some() && full.aps.is_some();
    let runs: Vec<MetricValues> = if repetitions == 0 {
        vec![full]
    } else {
        let mut rng = rng_for(seed, 0xB007);
        let n = score.probs.len();
        (0..repetitions)
            .map(|_| {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let resample = PolicyScore {
                    probs: idx.iter().map(|&i| score.probs[i]).collect(),
                    actions: idx.iter().map(|&i| score.actions[i]).collect(),
                };
                metric_values(&resample)
            })
            .collect::<Result<_>>()?
    };
    let collect = |f: &dyn Fn(&MetricValues) -> Option<f64>| -> Option<Stat> {
        let v: Vec<f64> = runs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| Stat::of(&v))
    };
    Ok(MetricReport {
        method: method.to_string(),
        n_steps: score.probs.len(),
        repetitions,
        acc: collect(&|m| Some(m.acc)).expect("at least one run"),
        auc: if ranking_defined { collect(&|m| m.auc) } else { None },
        aps: if ranking_defined { collect(&|m| m.aps) } else { None },
        nll: collect(&|m| Some(m.nll)).expect("at least one run"),
        ranking_defined,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Comparison table, one row per method.
pub fn comparison_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("method,acc,acc_std,auc,auc_std,aps,aps_std,nll,nll_std,n_steps\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            cell(Some(r.acc.mean)),
            cell(Some(r.acc.std)),
            cell(r.auc.map(|s| s.mean)),
            cell(r.auc.map(|s| s.std)),
            cell(r.aps.map(|s| s.mean)),
            cell(r.aps.map(|s| s.std)),
            cell(Some(r.nll.mean)),
            cell(Some(r.nll.std)),
            r.n_steps
        ));
    }
    out
}

pub fn write_comparison_csv(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, comparison_csv(reports)).map_err(|e| IolError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_scores() {
        let s = PolicyScore { probs: vec![0.9, 0.8, 0.2, 0.1], actions: vec![1, 1, 0, 0] };
        let m = metric_values(&s).unwrap();
        assert_eq!((m.acc, m.auc, m.aps), (1.0, Some(1.0), Some(1.0)));
        let hard = PolicyScore { probs: vec![1.0, 0.0], actions: vec![1, 0] };
        assert!(metric_values(&hard).unwrap().nll < 1e-12);
    }

    #[test]
    fn constant_predictor() {
        let s = PolicyScore { probs: vec![0.5; 6], actions: vec![1, 0, 0, 1, 0, 0] };
        let m = metric_values(&s).unwrap();
        assert_eq!(m.auc, Some(0.5));
        assert!((m.nll - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((m.aps.unwrap() - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_flags_ranking_metrics() {
        let s = PolicyScore { probs: vec![0.3, 0.6], actions: vec![1, 1] };
        let r = evaluate("x", &s, 0, 0).unwrap();
        assert!(!r.ranking_defined);
        assert!(r.auc.is_none() && r.aps.is_none());
        assert!(evaluate("x", &PolicyScore::default(), 0, 0).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let s = PolicyScore { probs: vec![0.1, 0.7, 0.4, 0.9, 0.3, 0.8], actions: vec![0, 1, 0, 1, 1, 0] };
        let a = evaluate("m", &s, 20, 3).unwrap();
        assert_eq!(a, evaluate("m", &s, 20, 3).unwrap());
        assert!(a.auc.unwrap().std > 0.0);
    }

    #[test]
    fn csv_marks_undefined_cells_empty() {
        let s = PolicyScore { probs: vec![0.3, 0.6], actions: vec![1, 1] };
        let csv = comparison_csv(&[evaluate("iol", &s, 0, 0).unwrap()]);
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("iol,0.500000,0.000000,,,,,"));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_definition(pairs in prop::collection::vec((0u8..20, 0u8..2), 2..80)) {
            let s: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 20.0).collect();
            let l: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            if let Some(a) = auc(&s, &l) {
                prop_assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_invariant_to_monotone_maps(pairs in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..80)) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let l: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let t: Vec<f64> = s.iter().map(|v| (v * 0.5).exp() + v.powi(3)).collect();
            prop_assert_eq!(auc(&s, &l), auc(&t, &l));
        }
    }
}
