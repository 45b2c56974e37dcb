use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dga::model::{checkpoint_run_config, DgaModel};
use dga::tensor::read_checkpoint;

const SMALL: &str = "[model]\nembed_dim = 8\nhidden_dim = 8\nspatial_dim = 4\nnode_dim = 16\nattn_dim = 8\nmatch_dim = 16\n";

fn dga(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dga"))
        .args(args)
        .env("DGA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dga(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dga(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Work {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self, name: &str, count: usize, depths: &str, seed: u64) -> PathBuf {
        let out = self.path(name);
        ok(&[
            "gen-data",
            "--count",
            &count.to_string(),
            "--depths",
            depths,
            "--seed",
            &seed.to_string(),
            "--out",
            p(&out),
        ]);
        out
    }

    fn small_config(&self) -> PathBuf {
        let path = self.path("small.toml");
        std::fs::write(&path, SMALL).unwrap();
        path
    }
}

#[test]
fn gen_data_is_reproducible_and_validated() {
    let w = Work::new();
    let a = w.data("a.jsonl", 100, "0,1,0", 3);
    let b = w.data("b.jsonl", 100, "0,1,0", 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let records = dga::dataset::load_dataset(&a).unwrap();
    assert_eq!(records.len(), 100);
    assert!(records.iter().all(|r| r.depth == Some(1) && r.objects.len() == 8));

    let bad = w.path("bad.jsonl");
    assert_eq!(code(&["gen-data", "--count", "10", "--depths", "0.5,0.4", "--out", p(&bad)]), 2);
    assert_eq!(code(&["gen-data", "--count", "10", "--depths", "a,b", "--out", p(&bad)]), 2);
    assert_eq!(code(&["gen-data", "--count", "ten", "--out", p(&bad)]), 2);
    assert!(!bad.exists());
}

#[test]
fn zero_epochs_write_the_initialization() {
    let w = Work::new();
    let data = w.data("d.jsonl", 20, "0.5,0.5,0", 1);
    let ckpt = w.path("m.ckpt");
    ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "0", "--seed", "7"]);
    let trained = DgaModel::load(std::fs::File::open(&ckpt).unwrap()).unwrap();
    let fresh = DgaModel::init(trained.config.clone(), trained.vocab.clone(), 7).unwrap();
    for (a, b) in trained.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a, b);
    }
    let (c, t) = (&trained.config, dga::training::TrainConfig::default());
    assert_eq!((c.steps, c.visual_dim), (t.steps, 32));
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    let w = Work::new();
    let data = w.data("d.jsonl", 40, "0.3,0.4,0.3", 2);
    let cfg = w.small_config();
    let run = |name: &str| {
        let ckpt = w.path(name);
        ok(&[
            "train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg), "--epochs", "2", "--batch", "8",
            "--seed", "5",
        ]);
        std::fs::read(ckpt).unwrap()
    };
    assert_eq!(run("a.ckpt"), run("b.ckpt"));
}

#[test]
fn eval_matches_training_log() {
    let w = Work::new();
    let data = w.data("d.jsonl", 60, "0.4,0.4,0.2", 3);
    let cfg = w.small_config();
    let (ckpt, log, report) = (w.path("m.ckpt"), w.path("log.jsonl"), w.path("r.json"));
    let stdout = ok(&[
        "train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg), "--epochs", "3", "--log", p(&log),
    ]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(stdout.lines().count(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i + 1);
        for key in ["mean_loss", "train_accuracy", "wall_time"] {
            assert!(l[key].is_f64(), "{key} missing from {l}");
        }
    }
    let logged = lines[2]["train_accuracy"].as_f64().unwrap();

    let printed = ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&report)]);
    assert!(printed.starts_with("accuracy "));
    assert!(printed.contains("depth 0:") && printed.contains("depth 2:"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["accuracy"].as_f64().unwrap() >= logged - 1e-9);
    assert_eq!(r["total"], 60);

    // the resolved run configuration travels with the weights
    let ck = read_checkpoint(std::fs::File::open(&ckpt).unwrap()).unwrap();
    let run: serde_json::Value = serde_json::from_str(&checkpoint_run_config(&ck).unwrap()).unwrap();
    assert_eq!(run["train"]["epochs"], 3);
    assert_eq!(run["model"]["node_dim"], 16);
}

#[test]
fn untrained_checkpoints_score_near_chance() {
    let w = Work::new();
    let data = w.data("d.jsonl", 600, "0.34,0.33,0.33", 4);
    let mut total = 0.0;
    for seed in 0..5 {
        let ckpt = w.path(&format!("m{seed}.ckpt"));
        let report = w.path(&format!("r{seed}.json"));
        ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "0", "--seed", &seed.to_string()]);
        ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&report)]);
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        total += r["accuracy"].as_f64().unwrap();
    }
    let mean = total / 5.0;
    assert!((mean - 0.125).abs() <= 0.05, "mean untrained accuracy {mean}");
}

#[test]
fn incompatible_inputs_exit_with_four() {
    let w = Work::new();
    let data = w.data("d.jsonl", 10, "1,0,0", 5);
    let narrow = w.path("narrow.jsonl");
    ok(&["gen-data", "--count", "10", "--depths", "1,0,0", "--visual-dim", "16", "--out", p(&narrow)]);
    let ckpt = w.path("m.ckpt");
    ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "0"]);
    assert_eq!(code(&["eval", "--data", p(&narrow), "--ckpt", p(&ckpt)]), 4);

    // unseen words are not silently mapped to an unknown token
    let text = std::fs::read_to_string(&data).unwrap().replace("\"the\"", "\"a\"");
    let renamed = w.path("renamed.jsonl");
    std::fs::write(&renamed, text).unwrap();
    assert_eq!(code(&["eval", "--data", p(&renamed), "--ckpt", p(&ckpt)]), 4);
}

#[test]
fn data_errors_exit_with_three() {
    let w = Work::new();
    let missing = w.path("missing.jsonl");
    let ckpt = w.path("m.ckpt");
    assert_eq!(code(&["train", "--data", p(&missing), "--out", p(&ckpt)]), 3);
    let empty = w.path("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&["train", "--data", p(&empty), "--out", p(&ckpt)]), 3);
    let garbage = w.path("garbage.jsonl");
    std::fs::write(&garbage, "{\"objects\": [").unwrap();
    let out = dga(&["train", "--data", p(&garbage), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("record 0"));
    assert!(!ckpt.exists());
}

#[test]
fn flag_errors_exit_with_two() {
    let w = Work::new();
    let data = w.data("d.jsonl", 10, "1,0,0", 6);
    let ckpt = w.path("m.ckpt");
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&ckpt), "--batch", "0"]), 2);
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&ckpt), "--lr", "-1"]), 2);
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&ckpt), "--steps", "0"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let bad_cfg = w.path("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nwarmup = 3\n").unwrap();
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&bad_cfg)]), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_dga"))
        .args(["gen-data", "--count", "2", "--out", p(&w.path("t.jsonl"))])
        .env("DGA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let w = Work::new();
    let data = w.data("d.jsonl", 12, "1,0,0", 7);
    let cfg = w.path("c.toml");
    std::fs::write(&cfg, format!("{SMALL}[train]\nepochs = 1\nbatch_size = 4\nmargin = 0.3\nseed = 9\n")).unwrap();
    let ckpt = w.path("m.ckpt");
    ok(&[
        "train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg), "--batch", "6", "--epochs", "2",
    ]);
    let ck = read_checkpoint(std::fs::File::open(&ckpt).unwrap()).unwrap();
    let run: serde_json::Value = serde_json::from_str(&checkpoint_run_config(&ck).unwrap()).unwrap();
    let t = &run["train"];
    assert_eq!((t["epochs"].as_u64(), t["batch_size"].as_u64()), (Some(2), Some(6)));
    assert_eq!((t["margin"].as_f64(), t["seed"].as_u64()), (Some(0.3), Some(9)));
    assert_eq!(t["learning_rate"].as_f64(), Some(0.0005));
    assert_eq!(run["model"]["embed_dim"], 8);
}

#[test]
fn trace_reports_every_step() {
    let w = Work::new();
    let data = w.data("d.jsonl", 300, "0.2,0.3,0.5", 8);
    let cfg = w.small_config();
    let ckpt = w.path("m.ckpt");
    ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg), "--epochs", "40"]);
    let records = dga::dataset::load_dataset(&data).unwrap();
    let index = records.iter().position(|r| r.depth == Some(2)).unwrap();
    let out = w.path("trace.json");
    ok(&["trace", "--data", p(&data), "--index", &index.to_string(), "--ckpt", p(&ckpt), "--out", p(&out)]);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let steps = t["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    let len = t["tokens"].as_array().unwrap().len();
    let vec = |v: &serde_json::Value| -> Vec<f64> { v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    for s in steps {
        let words = vec(&s["words"]);
        assert_eq!(words.len(), len);
        assert!((words.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(vec(&s["nodes"]).len(), 8);
        assert_eq!(vec(&s["edge_types"]).len(), 11);
    }
    // training separates the steps' word distributions
    let mut gap = 0.0f64;
    for a in 0..3 {
        for b in a + 1..3 {
            let (x, y) = (vec(&steps[a]["words"]), vec(&steps[b]["words"]));
            gap = x.iter().zip(&y).map(|(u, v)| (u - v).abs()).fold(gap, f64::max);
        }
    }
    assert!(gap > 1e-3, "word distributions nearly identical across steps: {gap:e}");
    assert_eq!(t["gt"], records[index].gt);
    assert_eq!(t["config"]["index"], index);

    assert_eq!(
        code(&["trace", "--data", p(&data), "--index", "300", "--ckpt", p(&ckpt), "--out", p(&out)]),
        2
    );
}
