//! Central finite-difference check of reverse-mode gradients.

use super::params::{Gradients, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the gradient returned by `f` at `params` against central
/// differences with step `h`, coordinate by coordinate. Relative error uses
/// the denominator `max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &ParamSet, h: f64) -> GradCheckReport
where
    F: Fn(&ParamSet) -> (f64, Gradients),
{
    let (_, analytic) = f(params);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let n_tensors = params.len();
    for ti in 0..n_tensors {
        let len = analytic.0[ti].len();
        for k in 0..len {
            let orig = probe.iter().nth(ti).expect("tensor").values[k];
            set(&mut probe, ti, k, orig + h);
            let (fp, _) = f(&probe);
            set(&mut probe, ti, k, orig - h);
            let (fm, _) = f(&probe);
            set(&mut probe, ti, k, orig);

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.0[ti][k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((params.iter().nth(ti).expect("tensor").name().to_string(), k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

fn set(p: &mut ParamSet, ti: usize, k: usize, v: f64) {
    p.iter_mut().nth(ti).expect("tensor").values[k] = v;
}
