use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iol_core::model::{IolModel, ModelConfig};
use iol_core::train::Checkpoint;

const SMALL: &str = r#"
[model]
memory_dim = 2
hidden = 6
summary_dim = 4

[train]
epochs = 2
batch_size = 4

[sim]
n_traj = 20
horizon = 5
context_dim = 3
seed = 4

[data]
split = [0.6, 0.2, 0.2]
split_seed = 1

[analysis]
n_bins = 2

[evaluate]
baselines = ["bc-linear", "cirl"]
"#;

fn iol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iol")).args(args).output().expect("run iol")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("config.toml")
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let cfg = self.config();
        let out = self.path(out);
        let mut args = vec![cmd, "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        iol(&args)
    }

    fn ok(&self, cmd: &str, out: &str, extra: &[&str]) {
        let o = self.run(cmd, out, extra);
        assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    }

    /// simulate -> train -> analyze (with beliefs) into `<prefix>-*` directories.
    fn pipeline(&self, prefix: &str) {
        self.ok("simulate", &format!("{prefix}-sim"), &[]);
        let corpus = self.path(&format!("{prefix}-sim/corpus.jsonl"));
        let beliefs = self.path(&format!("{prefix}-sim/beliefs.jsonl"));
        self.ok("train", &format!("{prefix}-train"), &["--data", s(&corpus)]);
        let ck = self.path(&format!("{prefix}-train/checkpoint.json"));
        self.ok(
            "analyze",
            &format!("{prefix}-analyze"),
            &["--data", s(&corpus), "--checkpoint", s(&ck), "--beliefs", s(&beliefs)],
        );
    }
}

#[test]
fn simulate_writes_corpus_beliefs_and_manifest() {
    let ws = Workspace::new("[sim]\nn_traj = 1\nhorizon = 1\n");
    ws.ok("simulate", "sim", &[]);
    let corpus = fs::read_to_string(ws.path("sim/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 1);
    assert!(ws.path("sim/beliefs.jsonl").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("sim/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config"]["sim"]["n_traj"], 1);
}

#[test]
fn simulate_is_reproducible_and_seed_flag_overrides() {
    let ws = Workspace::new(SMALL);
    ws.ok("simulate", "a", &[]);
    ws.ok("simulate", "b", &[]);
    ws.ok("simulate", "c", &["--seed", "99"]);
    for f in ["corpus.jsonl", "beliefs.jsonl"] {
        assert_eq!(fs::read(ws.path(&format!("a/{f}"))).unwrap(), fs::read(ws.path(&format!("b/{f}"))).unwrap());
    }
    assert_ne!(fs::read(ws.path("a/corpus.jsonl")).unwrap(), fs::read(ws.path("c/corpus.jsonl")).unwrap());
}

#[test]
fn output_directories_are_append_never() {
    let ws = Workspace::new(SMALL);
    ws.ok("simulate", "sim", &[]);
    let again = ws.run("simulate", "sim", &[]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ws.ok("simulate", "sim", &["--force"]);
}

#[test]
fn unknown_config_key_is_named() {
    let ws = Workspace::new("[train]\nlearning_rate = 0.1\n");
    let o = ws.run("simulate", "sim", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_input_exits_with_io_code() {
    let ws = Workspace::new(SMALL);
    let o = ws.run("train", "t", &["--data", "/nonexistent/corpus.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/corpus.jsonl"));
}

#[test]
fn zero_epochs_leaves_initialization() {
    let ws = Workspace::new(&SMALL.replace("epochs = 2", "epochs = 0"));
    ws.ok("simulate", "sim", &[]);
    ws.ok("train", "t", &["--data", s(&ws.path("sim/corpus.jsonl"))]);
    let ck = Checkpoint::load(ws.path("t/checkpoint.json")).unwrap();
    let init = IolModel::new(ModelConfig { memory_dim: 2, hidden: 6, summary_dim: 4, ..ModelConfig::default() }, 3).unwrap();
    assert_eq!(ck.params, init.params.to_manifest());
    assert_eq!(ck.epochs_completed, 0);
}

#[test]
fn resume_continues_epoch_counter() {
    let ws = Workspace::new(SMALL);
    ws.ok("simulate", "sim", &[]);
    let corpus = ws.path("sim/corpus.jsonl");
    ws.ok("train", "t1", &["--data", s(&corpus)]);
    let ck = ws.path("t1/checkpoint.json");
    ws.ok("train", "t2", &["--data", s(&corpus), "--checkpoint", s(&ck), "--resume"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("t2/report.json")).unwrap()).unwrap();
    let epochs: Vec<u64> = report["epochs"].as_array().unwrap().iter().map(|e| e["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, vec![2, 3]);
    assert_eq!(Checkpoint::load(ws.path("t2/checkpoint.json")).unwrap().epochs_completed, 4);
}

#[test]
fn evaluate_rows_follow_requested_baselines() {
    let ws = Workspace::new(SMALL);
    ws.ok("simulate", "sim", &[]);
    let corpus = ws.path("sim/corpus.jsonl");
    ws.ok("train", "t", &["--data", s(&corpus)]);
    let ck = ws.path("t/checkpoint.json");

    ws.ok("evaluate", "e1", &["--data", s(&corpus), "--checkpoint", s(&ck)]);
    let table = fs::read_to_string(ws.path("e1/metrics.csv")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, vec!["iol", "bc-linear", "cirl"]);

    ws.ok("evaluate", "e2", &["--data", s(&corpus), "--checkpoint", s(&ck), "--baselines", ""]);
    assert_eq!(fs::read_to_string(ws.path("e2/metrics.csv")).unwrap().lines().count(), 2);

    ws.ok("evaluate", "e3", &["--data", s(&corpus), "--checkpoint", s(&ck)]);
    assert_eq!(table, fs::read_to_string(ws.path("e3/metrics.csv")).unwrap());

    let bad = ws.run("evaluate", "e4", &["--data", s(&corpus), "--checkpoint", s(&ck), "--baselines", "svm"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bc-linear, bc-deep, rcal, cirl"));
}

#[test]
fn analyze_outputs_and_recovery_toggle() {
    let ws = Workspace::new(SMALL);
    ws.ok("simulate", "sim", &[]);
    let corpus = ws.path("sim/corpus.jsonl");
    ws.ok("train", "t", &["--data", s(&corpus)]);
    let ck = ws.path("t/checkpoint.json");

    ws.ok("analyze", "a1", &["--data", s(&corpus), "--checkpoint", s(&ck), "--n-bins", "4"]);
    for f in ["weights.csv", "shifts.csv", "beliefs.csv", "manifest.json"] {
        assert!(ws.path(&format!("a1/{f}")).exists(), "{f}");
    }
    assert!(!ws.path("a1/recovery.json").exists());
    let weights = fs::read_to_string(ws.path("a1/weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 4 * 3 + 1);

    let beliefs = ws.path("sim/beliefs.jsonl");
    ws.ok("analyze", "a2", &["--data", s(&corpus), "--checkpoint", s(&ck), "--beliefs", s(&beliefs)]);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("a2/recovery.json")).unwrap()).unwrap();
    let acc = rec["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn pipeline_reruns_are_bit_identical() {
    let ws = Workspace::new(SMALL);
    ws.pipeline("r1");
    ws.pipeline("r2");
    let files = [
        "sim/corpus.jsonl",
        "sim/beliefs.jsonl",
        "train/checkpoint.json",
        "analyze/weights.csv",
        "analyze/shifts.csv",
        "analyze/beliefs.csv",
        "analyze/recovery.json",
    ];
    for f in files {
        let a = fs::read(ws.path(&format!("r1-{f}"))).unwrap();
        let b = fs::read(ws.path(&format!("r2-{f}"))).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}
