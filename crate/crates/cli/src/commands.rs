//! The four pipeline stages.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use iol_core::analysis::{
    export_beliefs_csv, export_shifts_csv, export_weights_csv, recovery_from_effects, shifts_from, weight_timelines_from,
    ShiftMode,
};
use iol_core::baselines::{evaluate as score_report, fit_baseline, score_iol, write_comparison_csv, BaselineKind, StepSet};
use iol_core::config::{RunConfig, ShiftModeName, Subset};
use iol_core::diff::DiagGaussian;
use iol_core::seed::rng_for;
use iol_core::sim::{load_beliefs_jsonl, run_simulation, save_beliefs_jsonl, AgentPrior};
use iol_core::train::{infer_all, Checkpoint, SplitSpec, Trainer};
use iol_core::trajectory::{load_csv, load_jsonl, save_jsonl, split, split_raw, StandardizationParams, TrajectoryRecord};
use iol_core::{model::IolModel, IolError};
use serde::Serialize;

use crate::manifest::{prepare_out_dir, RunManifest};
use crate::Common;

fn load_config(common: &Common) -> Result<RunConfig> {
    let Some(path) = &common.config else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| IolError::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| IolError::Validation(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let records = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_csv(path)?
    } else {
        load_jsonl(path)?
    };
    Ok(records)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    fs::write(path, text).map_err(|e| IolError::io(path, e))?;
    Ok(())
}

pub fn simulate(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    prepare_out_dir(&common.out, common.force)?;
    let mut manifest = RunManifest::start("simulate", &cfg, cfg.sim.seed);
    if let Some(p) = &common.config {
        manifest.input("config", p);
    }
    let out = run_simulation(&cfg.sim)?;
    save_jsonl(&out.corpus, common.out.join("corpus.jsonl"))?;
    save_beliefs_jsonl(&out.beliefs, common.out.join("beliefs.jsonl"))?;
    let prior = match &out.prior {
        AgentPrior::Fixed(a) => serde_json::json!({"kind": "shared", "w1": a.w1, "w0": a.w0, "lr": a.lr}),
        AgentPrior::Sampled { lr, std } => serde_json::json!({"kind": "per_trajectory", "lr": lr, "std": std}),
    };
    let env = serde_json::json!({
        "environment": out.env,
        "agent_prior": prior,
        "prior_truth_cosine": out.prior_truth_cosine(),
    });
    write_json(&env, &common.out.join("environment.json"))?;
    for f in ["corpus.jsonl", "beliefs.jsonl", "environment.json"] {
        manifest.output(f);
    }
    manifest.finish(&common.out)?;
    Ok(())
}

pub fn train(common: &Common, data: &Path, checkpoint: Option<&Path>, resume: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if resume && checkpoint.is_none() {
        return Err(IolError::Validation("--resume needs --checkpoint".into()).into());
    }
    let records = load_data(data)?;
    prepare_out_dir(&common.out, common.force)?;
    let mut manifest = RunManifest::start("train", &cfg, cfg.train.seed);
    manifest.input("data", data);

    let (mut trainer, split_spec, dataset) = match checkpoint.filter(|_| resume) {
        Some(path) => {
            manifest.input("checkpoint", path);
            let ck = Checkpoint::load(path)?;
            let spec = match ck.split {
                Some(s) => s,
                None => cfg.data.split_spec()?,
            };
            let dataset = restandardize(&records, spec, &ck.standardization)?;
            (Trainer::resume(&ck, cfg.train.clone())?, spec, dataset)
        }
        None => {
            let spec = cfg.data.split_spec()?;
            let dataset = split(&records, spec.fractions, spec.seed)?;
            let model = IolModel::new(cfg.model.clone(), dataset.dim())?;
            (Trainer::new(model, cfg.train.clone())?, spec, dataset)
        }
    };
    let report = trainer.run(&dataset)?;
    let ck = Checkpoint::from_model(&trainer.model, trainer.epochs_completed, dataset.standardization.clone(), Some(split_spec));
    ck.save(common.out.join("checkpoint.json"))?;
    write_json(&report, &common.out.join("report.json"))?;
    manifest.output("checkpoint.json");
    manifest.output("report.json");
    manifest.finish(&common.out)?;
    Ok(())
}

fn restandardize(
    records: &[TrajectoryRecord],
    spec: SplitSpec,
    standardization: &StandardizationParams,
) -> Result<iol_core::trajectory::DatasetSplit> {
    let (train, validation, test) = split_raw(records, spec.fractions, spec.seed)?;
    if let Some(r) = records.first() {
        if r.dim() != standardization.x_mean.len() {
            return Err(IolError::DimensionMismatch { id: r.id.clone(), expected: standardization.x_mean.len(), found: r.dim() }.into());
        }
    }
    let apply = |v: Vec<TrajectoryRecord>| v.iter().map(|r| standardization.apply(r)).collect();
    Ok(iol_core::trajectory::DatasetSplit {
        train: apply(train),
        validation: apply(validation),
        test: apply(test),
        standardization: standardization.clone(),
    })
}

fn checkpoint_split(ck: &Checkpoint, cfg: &RunConfig) -> Result<SplitSpec> {
    Ok(match ck.split {
        Some(s) => s,
        None => cfg.data.split_spec()?,
    })
}

pub fn evaluate(common: &Common, data: &Path, checkpoint: &Path, baselines: Option<&[String]>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.evaluate.seed = seed;
    }
    if let Some(names) = baselines {
        cfg.evaluate.baselines = names
            .iter()
            .filter(|n| !n.trim().is_empty())
            .map(|n| n.trim().parse::<BaselineKind>())
            .collect::<Result<_, _>>()?;
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let records = load_data(data)?;
    prepare_out_dir(&common.out, common.force)?;
    let mut manifest = RunManifest::start("evaluate", &cfg, cfg.evaluate.seed);
    manifest.input("data", data);
    manifest.input("checkpoint", checkpoint);

    let dataset = restandardize(&records, checkpoint_split(&ck, &cfg)?, &ck.standardization)?;
    if dataset.test.is_empty() {
        return Err(IolError::Validation("test split is empty".into()).into());
    }
    let ev = &cfg.evaluate;
    let mut reports = vec![score_report("iol", &score_iol(&model, &dataset.test)?, ev.bootstrap, ev.seed)?];
    let pooled = StepSet::pooled(&dataset.train);
    for kind in &ev.baselines {
        let fitted = fit_baseline(*kind, &pooled, &ev.baseline)?;
        reports.push(score_report(kind.name(), &fitted.score(&dataset.test)?, ev.bootstrap, ev.seed)?);
    }
    write_comparison_csv(&reports, common.out.join("metrics.csv"))?;
    write_json(&reports, &common.out.join("metrics.json"))?;
    manifest.output("metrics.csv");
    manifest.output("metrics.json");
    manifest.finish(&common.out)?;
    Ok(())
}

#[derive(Serialize)]
struct RecoveryOutput {
    accuracy: f64,
    n_compared: usize,
    n_ties: usize,
    subset: Subset,
    n_trajectories: usize,
}

pub fn analyze(common: &Common, data: &Path, checkpoint: &Path, beliefs: Option<&Path>, n_bins: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.analysis.panel_seed = seed;
    }
    if let Some(n) = n_bins {
        cfg.analysis.n_bins = n;
    }
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let records = load_data(data)?;
    let beliefs_log = beliefs.map(load_beliefs_jsonl).transpose()?;
    prepare_out_dir(&common.out, common.force)?;
    let mut manifest = RunManifest::start("analyze", &cfg, cfg.analysis.panel_seed);
    manifest.input("data", data);
    manifest.input("checkpoint", checkpoint);
    if let Some(b) = beliefs {
        manifest.input("beliefs", b);
    }

    let subset: Vec<TrajectoryRecord> = match cfg.analysis.subset {
        Subset::All => records.iter().map(|r| ck.standardization.apply(r)).collect(),
        part => {
            let ds = restandardize(&records, checkpoint_split(&ck, &cfg)?, &ck.standardization)?;
            match part {
                Subset::Train => ds.train,
                Subset::Validation => ds.validation,
                _ => ds.test,
            }
        }
    };
    let d = model.context_dim;
    let inferred = infer_all(&model, &subset)?;
    let timeline = weight_timelines_from(&inferred, d, cfg.analysis.n_bins)?;
    let mode = match cfg.analysis.shift_mode {
        ShiftModeName::JustSeen => ShiftMode::JustSeen,
        ShiftModeName::ReferencePanel => {
            let mut rng = rng_for(cfg.analysis.panel_seed, 0xA11E1);
            let g = DiagGaussian::standard(d);
            ShiftMode::ReferencePanel((0..cfg.analysis.panel_size).map(|_| g.sample(&mut rng)).collect())
        }
    };
    let shifts = shifts_from(&inferred, &subset, &mode)?;
    export_weights_csv(&timeline, common.out.join("weights.csv"))?;
    export_shifts_csv(&shifts, common.out.join("shifts.csv"))?;
    export_beliefs_csv(&inferred, d, common.out.join("beliefs.csv"))?;
    for f in ["weights.csv", "shifts.csv", "beliefs.csv"] {
        manifest.output(f);
    }
    if let Some(log) = beliefs_log {
        let taus: Vec<Vec<f64>> = inferred.iter().map(|t| t.beliefs.iter().map(|b| b.tau).collect()).collect();
        let score = recovery_from_effects(&subset, &taus, &log)?;
        let out = RecoveryOutput {
            accuracy: score.accuracy,
            n_compared: score.n_compared,
            n_ties: score.n_ties,
            subset: cfg.analysis.subset,
            n_trajectories: subset.len(),
        };
        write_json(&out, &common.out.join("recovery.json"))?;
        manifest.output("recovery.json");
    }
    manifest.finish(&common.out)?;
    Ok(())
}
