use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use signgru::graphnet::SkeletonTopology;
use signgru::model::{save_checkpoint, ModelConfig, ModelParams};
use signgru::training::EpochRecord;
use tempfile::TempDir;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// A tiny run layout: 3 classes over a 4-joint chain, 3 epochs.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().display();
        let text = format!(
            r#"seed = 3

[model]
stages = 1
gnn = "gat"
heads = 2
hidden = 8
seq_len = 8
n_nodes = 4
input_dim = 2
classes = 3
dropout = 0.0
norm_epsilon = 1e-5

[optim]
lr = 3e-3
weight_decay = 1e-5

[train]
epochs = 3
batch_size = 8

[data]
train_path = "{d}/data/train.jsonl"
val_path = "{d}/data/val.jsonl"
test_path = "{d}/data/test.jsonl"
topology = "chain"
split = [0.5, 0.25, 0.25]

[synth]
classes = 3
samples_per_class = 8
min_len = 6
max_len = 12
noise_sigma = 0.02

[output]
dir = "{d}/run"
"#
        );
        fs::write(dir.path().join("run.toml"), text).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_signgru"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn log(&self) -> Vec<EpochRecord> {
        fs::read_to_string(self.path("run/train_log.ndjson"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// `(class, probability)` per id from `predict` output.
fn predictions(stdout: &str) -> Vec<(String, usize, f64)> {
    stdout
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

fn accuracy_line(table: &str) -> f64 {
    let line = table.lines().find(|l| l.starts_with("# accuracy")).unwrap();
    line.split('\t').nth(1).unwrap().parse().unwrap()
}

fn class_rows(table: &str) -> Vec<String> {
    table
        .lines()
        .skip_while(|l| !l.starts_with("class\t"))
        .skip(1)
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect()
}

#[test]
fn synth_is_reproducible_and_reports_counts() {
    let ws = Workspace::new();
    let out = ws.ok(&["synth"]);
    let counts: Vec<usize> = out.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts, vec![12, 6, 6]);
    let first = fs::read(ws.path("data/train.jsonl")).unwrap();
    ws.ok(&["synth"]);
    assert_eq!(first, fs::read(ws.path("data/train.jsonl")).unwrap());
    assert!(ws.path("run/synth.config.toml").is_file());

    let bad = ws.run(&["--set", "synth.classes=1", "synth"]);
    assert_eq!(code(&bad), 2, "{}", stderr(&bad));
}

#[test]
fn train_eval_predict_agree() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    ws.ok(&["train"]);
    let log = ws.log();
    assert_eq!(log.len(), 3);
    let best = log.iter().map(|r| r.val_acc).fold(f64::MIN, f64::max);

    let echoed = fs::read_to_string(ws.path("run/train.config.toml")).unwrap();
    assert!(echoed.contains("stages = 1"));

    let desc = ws.ok(&["eval", "--split", "val"]);
    assert!((accuracy_line(&desc) - best).abs() < 5e-7, "{desc}");
    let asc = ws.ok(&["eval", "--split", "val", "--order", "asc"]);
    assert_eq!(class_rows(&desc).last(), class_rows(&asc).first());
    let report = fs::read_to_string(ws.path("run/eval_val.tsv")).unwrap();
    assert!(report.starts_with("# seed = 3"));

    let val = ws.path("data/val.jsonl");
    let preds = predictions(&ws.ok(&["predict", "--input", val.to_str().unwrap()]));
    let labels: Vec<usize> = fs::read_to_string(&val)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["label"].as_u64().unwrap() as usize)
        .collect();
    assert_eq!(preds.len(), labels.len());
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p.1 == **l).count();
    assert!((hits as f64 / labels.len() as f64 - best).abs() < 1e-12);
    assert_eq!(preds, predictions(&ws.ok(&["predict", "--input", val.to_str().unwrap()])));
}

#[test]
fn zero_learning_rate_gives_flat_log() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    ws.ok(&["--set", "optim.lr=0", "train"]);
    let log = ws.log();
    assert!(log.iter().all(|r| r.val_loss == log[0].val_loss));
    assert!(log.iter().all(|r| (r.train_loss - log[0].train_loss).abs() <= 1e-12 * log[0].train_loss));
}

#[test]
fn resume_with_other_topology_is_rejected() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    ws.ok(&["--set", "train.epochs=1", "train"]);
    let ring = SkeletonTopology::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
    ring.save(&ws.path("ring.json")).unwrap();
    let ckpt = ws.path("run/best.ckpt");
    let topo = format!("data.topology={}", ws.path("ring.json").display());
    let out = ws.run(&["--set", &topo, "train", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("topology"), "{}", stderr(&out));

    let resumed = ws.run(&["--set", "train.epochs=1", "train", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
}

#[test]
fn eval_errors_have_distinct_codes() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    let missing = ws.run(&["eval"]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));

    ws.ok(&["--set", "train.epochs=1", "train"]);
    fs::write(ws.path("empty.jsonl"), "").unwrap();
    let empty = format!("data.test_path={}", ws.path("empty.jsonl").display());
    let out = ws.run(&["--set", &empty, "eval"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let wrong = ws.run(&["--set", "model.classes=4", "eval", "--split", "val"]);
    assert_eq!(code(&wrong), 3);
    assert!(stderr(&wrong).contains("classes"), "{}", stderr(&wrong));
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        stages: 1,
        gnn: signgru::model::GnnKind::Gat,
        heads: 2,
        hidden: 8,
        seq_len: 8,
        n_nodes: 4,
        input_dim: 2,
        classes: 3,
        dropout: 0.0,
        norm_epsilon: 1e-5,
        classifier_width: None,
        leaky_slope: 0.2,
    }
}

fn record(id: &str, label: usize, phase: f64) -> String {
    let frames: Vec<Vec<[f64; 3]>> = (0..5)
        .map(|t| (0..4).map(|j| [(t as f64 + phase).sin() + j as f64, j as f64 * 0.5, 1.0]).collect())
        .collect();
    serde_json::json!({ "id": id, "label": label, "frames": frames }).to_string()
}

fn write_input(path: &Path) {
    let lines = [record("a", 0, 0.0), record("a-copy", 0, 0.0), record("b", 2, 1.3)];
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn zero_weights_predict_uniform() {
    let ws = Workspace::new();
    let config = tiny_model();
    let params = ModelParams::init(&config, &mut <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(0))
        .unwrap()
        .zeros_like();
    let ckpt = ws.path("zero.ckpt");
    save_checkpoint(&ckpt, &params, &config, &SkeletonTopology::chain(4).unwrap()).unwrap();
    write_input(&ws.path("input.jsonl"));
    let preds = predictions(&ws.ok(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        ws.path("input.jsonl").to_str().unwrap(),
    ]));
    assert_eq!(preds.len(), 3);
    assert!(preds.iter().all(|p| (p.2 - 1.0 / 3.0).abs() < 1e-12), "{preds:?}");
}

#[test]
fn duplicate_rows_and_malformed_input() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    ws.ok(&["--set", "train.epochs=1", "train"]);
    write_input(&ws.path("input.jsonl"));
    let preds = predictions(&ws.ok(&["predict", "--input", ws.path("input.jsonl").to_str().unwrap()]));
    assert_eq!((preds[0].1, preds[0].2.to_bits()), (preds[1].1, preds[1].2.to_bits()));

    fs::write(ws.path("bad.jsonl"), record("x", 0, 0.0) + "\n{\"id\": \"y\"}\n").unwrap();
    let out = ws.run(&["predict", "--input", ws.path("bad.jsonl").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains(":2:"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_names_faults() {
    let ws = Workspace::new();
    let first = ws.ok(&["gradcheck"]);
    assert!(first.contains("PASS"));
    assert_eq!(first, ws.ok(&["gradcheck"]));

    let out = ws.run(&["gradcheck", "--fault-param", "stage1.gru.w_z"]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("at `stage1.gru.w_z`"), "{text}");
}
