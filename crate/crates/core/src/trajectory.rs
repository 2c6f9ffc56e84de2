//! Trajectory data model: ingestion, canonical serialization, standardization
//! and train/validation/test splitting.
//!
//! A trajectory is one agent's time-ordered sequence of `(x, a, y)` triplets.
//! The JSONL format holds one trajectory object per line:
//!
//! ```text
//! {"id": "t0", "steps": [{"x": [0.5, -1.0], "a": 1, "y": 0.25}, ...]}
//! ```
//!
//! Floats are written with 17 significant digits so that `load_jsonl` after
//! `save_jsonl` reproduces every value bit-for-bit.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IolError, Result};

/// One `(context, action, outcome)` triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub x: Vec<f64>,
    pub a: u8,
    pub y: f64,
}

impl StepRecord {
    pub fn new(x: Vec<f64>, a: u8, y: f64) -> Self {
        StepRecord { x, a, y }
    }

    pub fn treated(&self) -> bool {
        self.a == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn new(id: impl Into<String>, steps: Vec<StepRecord>) -> Self {
        TrajectoryRecord {
            id: id.into(),
            steps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Context dimension, taken from the first step.
    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.x.len())
    }

    /// Checks the per-step invariants. `expected_dim` pins `d` across a dataset.
    pub fn validate(&self, expected_dim: Option<usize>) -> Result<()> {
        if self.steps.is_empty() {
            return Err(IolError::Validation(format!(
                "trajectory '{}' has no steps",
                self.id
            )));
        }
        let d = expected_dim.unwrap_or_else(|| self.dim());
        for (t, step) in self.steps.iter().enumerate() {
            if step.x.len() != d {
                return Err(IolError::DimensionMismatch {
                    id: self.id.clone(),
                    expected: d,
                    found: step.x.len(),
                });
            }
            if step.x.iter().any(|v| !v.is_finite()) {
                return Err(IolError::NonFinite {
                    id: self.id.clone(),
                    step: t,
                    field: "x",
                });
            }
            if step.a > 1 {
                return Err(IolError::Validation(format!(
                    "trajectory '{}' step {t}: action {} not in {{0,1}}",
                    self.id, step.a
                )));
            }
            if !step.y.is_finite() {
                return Err(IolError::NonFinite {
                    id: self.id.clone(),
                    step: t,
                    field: "y",
                });
            }
        }
        Ok(())
    }
}

/// Validates every record and checks that `d` is shared across the dataset.
pub fn validate_dataset(records: &[TrajectoryRecord]) -> Result<usize> {
    let d = records.first().map_or(0, |r| r.dim());
    for r in records {
        r.validate(Some(d))?;
    }
    Ok(d)
}

#[derive(Deserialize)]
struct RawStep {
    x: Vec<f64>,
    a: i64,
    y: f64,
}

#[derive(Deserialize)]
struct RawTrajectory {
    id: String,
    steps: Vec<RawStep>,
}

fn from_raw(raw: RawTrajectory) -> Result<TrajectoryRecord> {
    let mut steps = Vec::with_capacity(raw.steps.len());
    for (t, s) in raw.steps.into_iter().enumerate() {
        if !(s.a == 0 || s.a == 1) {
            return Err(IolError::Validation(format!(
                "trajectory '{}' step {t}: action {} not in {{0,1}}",
                raw.id, s.a
            )));
        }
        steps.push(StepRecord::new(s.x, s.a as u8, s.y));
    }
    Ok(TrajectoryRecord::new(raw.id, steps))
}

/// Parses JSONL text (one trajectory per non-blank line).
pub fn parse_jsonl(text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTrajectory = serde_json::from_str(line).map_err(|e| IolError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let rec = from_raw(raw)?;
        rec.validate(dim)?;
        dim.get_or_insert(rec.dim());
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| IolError::io(path, e))?;
    parse_jsonl(&text)
}

/// Canonical float rendering: 17 significant digits, round-trip exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn push_f64_array(buf: &mut String, values: &[f64]) {
    buf.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            buf.push(',');
        }
        buf.push_str(&fmt_f64(*v));
    }
    buf.push(']');
}

/// Renders one trajectory as a canonical JSON line (without the newline).
pub fn to_json_line(rec: &TrajectoryRecord) -> String {
    let mut buf = String::with_capacity(64 + rec.steps.len() * 32 * (rec.dim() + 2));
    buf.push_str("{\"id\":");
    buf.push_str(&serde_json::to_string(&rec.id).expect("string serialization"));
    buf.push_str(",\"steps\":[");
    for (i, s) in rec.steps.iter().enumerate() {
        if i > 0 {
            buf.push(',');
        }
        buf.push_str("{\"x\":");
        push_f64_array(&mut buf, &s.x);
        let _ = write!(buf, ",\"a\":{},\"y\":{}}}", s.a, fmt_f64(s.y));
    }
    buf.push_str("]}");
    buf
}

pub fn save_jsonl(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IolError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        writeln!(w, "{}", to_json_line(rec)).map_err(|e| IolError::io(path, e))?;
    }
    w.flush().map_err(|e| IolError::io(path, e))
}

/// Reads the CSV form: one row per step with columns `id,t,x_0..x_{d-1},a,y`.
/// Rows of a trajectory must be contiguous with `t` counting up from 0.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IolError::io(path, e))?;
    parse_csv(BufReader::new(file))
}

pub fn parse_csv<R: std::io::Read>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IolError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let ncol = headers.len();
    if ncol < 4 || &headers[0] != "id" || &headers[1] != "t" {
        return Err(IolError::Parse {
            line: 1,
            message: "expected header id,t,x_0..x_{d-1},a,y".into(),
        });
    }
    let d = ncol - 4;
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| IolError::Parse {
            line,
            message: e.to_string(),
        })?;
        let num = |j: usize| -> Result<f64> {
            row[j].trim().parse::<f64>().map_err(|e| IolError::Parse {
                line,
                message: format!("column {}: {e}", &headers[j]),
            })
        };
        let id = row[0].to_string();
        let t: usize = row[1].trim().parse().map_err(|e| IolError::Parse {
            line,
            message: format!("column t: {e}"),
        })?;
        let x = (0..d).map(|j| num(2 + j)).collect::<Result<Vec<_>>>()?;
        let a = num(2 + d)?;
        if !(a == 0.0 || a == 1.0) {
            return Err(IolError::Validation(format!(
                "line {line}: action {a} not in {{0,1}}"
            )));
        }
        let y = num(3 + d)?;
        let step = StepRecord::new(x, a as u8, y);
        match out.last_mut() {
            Some(last) if last.id == id => {
                if t != last.steps.len() {
                    return Err(IolError::Parse {
                        line,
                        message: format!("trajectory '{id}': expected t={}", last.steps.len()),
                    });
                }
                last.steps.push(step);
            }
            _ => {
                if t != 0 {
                    return Err(IolError::Parse {
                        line,
                        message: format!("trajectory '{id}' must start at t=0"),
                    });
                }
                out.push(TrajectoryRecord::new(id, vec![step]));
            }
        }
    }
    validate_dataset(&out)?;
    Ok(out)
}

pub fn save_csv(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IolError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = records.first().map_or(0, |r| r.dim());
    let mut header = String::from("id,t");
    for j in 0..d {
        let _ = write!(header, ",x_{j}");
    }
    header.push_str(",a,y");
    writeln!(w, "{header}").map_err(|e| IolError::io(path, e))?;
    for rec in records {
        for (t, s) in rec.steps.iter().enumerate() {
            let mut line = format!("{},{t}", rec.id);
            for v in &s.x {
                let _ = write!(line, ",{}", fmt_f64(*v));
            }
            let _ = write!(line, ",{},{}", s.a, fmt_f64(s.y));
            writeln!(w, "{line}").map_err(|e| IolError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| IolError::io(path, e))
}

/// Affine standardization fitted on a subset of the data.
///
/// Zero-variance features pass through untouched (mean 0, std 1). Binary
/// outcomes (every fitted `y` in `{0,1}`) are also left as they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub y_binary: bool,
}

impl StandardizationParams {
    pub fn identity(d: usize) -> Self {
        StandardizationParams {
            x_mean: vec![0.0; d],
            x_std: vec![1.0; d],
            y_mean: 0.0,
            y_std: 1.0,
            y_binary: false,
        }
    }

    pub fn fit(fit_on: &[TrajectoryRecord]) -> Result<Self> {
        let d = validate_dataset(fit_on)?;
        let n: usize = fit_on.iter().map(|r| r.len()).sum();
        if n == 0 {
            return Err(IolError::Validation(
                "standardization needs a non-empty fit set".into(),
            ));
        }
        let nf = n as f64;
        let steps = || fit_on.iter().flat_map(|r| r.steps.iter());

        let mut x_mean = vec![0.0; d];
        let mut y_mean = 0.0;
        for s in steps() {
            for (m, v) in x_mean.iter_mut().zip(&s.x) {
                *m += v;
            }
            y_mean += s.y;
        }
        x_mean.iter_mut().for_each(|m| *m /= nf);
        y_mean /= nf;

        let mut x_var = vec![0.0; d];
        let mut y_var = 0.0;
        for s in steps() {
            for ((acc, v), m) in x_var.iter_mut().zip(&s.x).zip(&x_mean) {
                *acc += (v - m) * (v - m);
            }
            y_var += (s.y - y_mean) * (s.y - y_mean);
        }
        let mut x_std = Vec::with_capacity(d);
        for (j, var) in x_var.iter().enumerate() {
            let std = (var / nf).sqrt();
            if std > 1e-12 * (1.0 + x_mean[j].abs()) {
                x_std.push(std);
            } else {
                x_mean[j] = 0.0;
                x_std.push(1.0);
            }
        }

        let y_binary = steps().all(|s| s.y == 0.0 || s.y == 1.0);
        let (y_mean, y_std) = if y_binary {
            (0.0, 1.0)
        } else {
            let std = (y_var / nf).sqrt();
            if std > 1e-12 * (1.0 + y_mean.abs()) {
                (y_mean, std)
            } else {
                (0.0, 1.0)
            }
        };
        Ok(StandardizationParams {
            x_mean,
            x_std,
            y_mean,
            y_std,
            y_binary,
        })
    }

    pub fn apply_step(&self, s: &StepRecord) -> StepRecord {
        let x = s
            .x
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect();
        StepRecord::new(x, s.a, (s.y - self.y_mean) / self.y_std)
    }

    pub fn invert_step(&self, s: &StepRecord) -> StepRecord {
        let x = s
            .x
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect();
        StepRecord::new(x, s.a, s.y * self.y_std + self.y_mean)
    }

    pub fn apply(&self, rec: &TrajectoryRecord) -> TrajectoryRecord {
        TrajectoryRecord::new(
            rec.id.clone(),
            rec.steps.iter().map(|s| self.apply_step(s)).collect(),
        )
    }

    pub fn invert(&self, rec: &TrajectoryRecord) -> TrajectoryRecord {
        TrajectoryRecord::new(
            rec.id.clone(),
            rec.steps.iter().map(|s| self.invert_step(s)).collect(),
        )
    }
}

/// Fits standardization on `fit_on` and applies it to every record.
pub fn standardize(
    records: &[TrajectoryRecord],
    fit_on: &[TrajectoryRecord],
) -> Result<(Vec<TrajectoryRecord>, StandardizationParams)> {
    let params = StandardizationParams::fit(fit_on)?;
    let out = records.iter().map(|r| params.apply(r)).collect();
    Ok((out, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = SplitFractions {
            train,
            validation,
            test,
        };
        f.check()?;
        Ok(f)
    }

    pub fn check(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(IolError::Validation(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(IolError::Validation(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Split sizes for `n` trajectories: train and validation rounded, test takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let nf = n as f64;
        let train = ((self.train * nf).round() as usize).min(n);
        let val = ((self.validation * nf).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Which split each input trajectory lands in (0 train, 1 validation, 2 test).
pub fn split_assignment(n: usize, fractions: SplitFractions, seed: u64) -> Result<Vec<u8>> {
    fractions.check()?;
    let (n_train, n_val, _) = fractions.sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assign = vec![2u8; n];
    for (rank, &idx) in order.iter().enumerate() {
        assign[idx] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }
    Ok(assign)
}

/// Standardized train/validation/test partition of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<TrajectoryRecord>,
    pub validation: Vec<TrajectoryRecord>,
    pub test: Vec<TrajectoryRecord>,
    pub standardization: StandardizationParams,
}

impl DatasetSplit {
    pub fn dim(&self) -> usize {
        self.standardization.x_mean.len()
    }
}

/// Deterministically partitions `records` by trajectory, then standardizes all
/// three parts with parameters fitted on the training part only.
pub fn split(
    records: &[TrajectoryRecord],
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    let (train, validation, test) = split_raw(records, fractions, seed)?;
    let standardization = StandardizationParams::fit(&train)?;
    let apply = |v: Vec<TrajectoryRecord>| v.iter().map(|r| standardization.apply(r)).collect();
    Ok(DatasetSplit {
        train: apply(train),
        validation: apply(validation),
        test: apply(test),
        standardization,
    })
}

type RawSplit = (
    Vec<TrajectoryRecord>,
    Vec<TrajectoryRecord>,
    Vec<TrajectoryRecord>,
);

/// Partition without standardization; input order is kept within each part.
pub fn split_raw(records: &[TrajectoryRecord], fractions: SplitFractions, seed: u64) -> Result<RawSplit> {
    if records.is_empty() {
        return Err(IolError::Validation("cannot split an empty dataset".into()));
    }
    validate_dataset(records)?;
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(IolError::Validation(format!("duplicate trajectory id '{}'", r.id)));
        }
    }
    let assign = split_assignment(records.len(), fractions, seed)?;
    let mut parts: [Vec<TrajectoryRecord>; 3] = Default::default();
    for (rec, &k) in records.iter().zip(&assign) {
        parts[k as usize].push(rec.clone());
    }
    let [train, val, test] = parts;
    Ok((train, val, test))
}
