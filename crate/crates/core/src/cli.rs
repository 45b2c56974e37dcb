use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dga::dataset::{self, load_dataset, prepare_all, save_dataset, write_atomic, PreparedScene};
use dga::model::{DgaModel, ModelConfig};
use dga::synth::{self, SynthConfig};
use dga::trace::trace_scene;
use dga::training::{self, EvalReport, TrainConfig};
use dga::{DgaError, Result};

#[derive(Parser, Debug)]
#[command(name = "dga", version, about = "Ground referring expressions in scenes of object proposals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the per-step attention trace of one scene.
    Trace(TraceArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    /// Objects per scene.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Comma-separated proportions for depths 0, 1, 2.
    #[arg(long, default_value = "0.34,0.33,0.33")]
    pub depths: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with `[train]` and `[model]` tables; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the per-epoch log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional overrides read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub model: ModelOverrides,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub margin: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub lr_halve_every: Option<usize>,
    pub target_train_accuracy: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub spatial_dim: Option<usize>,
    pub node_dim: Option<usize>,
    pub attn_dim: Option<usize>,
    pub match_dim: Option<usize>,
}

/// Fully resolved training run, echoed into the checkpoint.
#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub data: PathBuf,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Trace(a) => trace(&a),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DGA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| DgaError::Flag(format!("DGA_THREADS={raw:?} is not a positive integer")))?;
    // a pool that is already configured keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn parse_mix(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| DgaError::Flag(format!("--depths: `{p}` is not a number")))
        })
        .collect()
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mix = parse_mix(&a.depths)?;
    if a.k < 2 {
        return Err(DgaError::Flag(format!("--k must be at least 2, got {}", a.k)));
    }
    let cfg = SynthConfig {
        objects: a.k,
        visual_dim: a.visual_dim,
        noise: a.noise,
    };
    let scenes = synth::generate_dataset(a.count, &mix, a.seed, &cfg)?;
    let records: Vec<_> = scenes.iter().map(|s| s.to_record()).collect();
    save_dataset(&a.out, &records)?;
    let counts = synth::depth_counts(a.count, &mix)?;
    println!("wrote {} scenes to {}", records.len(), a.out.display());
    for (d, n) in counts.iter().enumerate() {
        println!("depth {d}: {n}");
    }
    Ok(())
}

pub fn resolve_train(a: &TrainArgs, file: &ConfigFile, visual_dim: usize, vocab_size: usize) -> (TrainConfig, ModelConfig) {
    let d = TrainConfig::default();
    let f = &file.train;
    let train = TrainConfig {
        epochs: a.epochs.or(f.epochs).unwrap_or(d.epochs),
        batch_size: a.batch.or(f.batch_size).unwrap_or(d.batch_size),
        learning_rate: a.lr.or(f.learning_rate).unwrap_or(d.learning_rate),
        margin: a.margin.or(f.margin).unwrap_or(d.margin),
        steps: a.steps.or(f.steps).unwrap_or(d.steps),
        seed: a.seed.or(f.seed).unwrap_or(d.seed),
        lr_halve_every: f.lr_halve_every,
        target_train_accuracy: f.target_train_accuracy,
        adam: d.adam,
    };
    let mut model = ModelConfig::new(vocab_size, visual_dim);
    let m = &file.model;
    model.steps = train.steps;
    model.embed_dim = m.embed_dim.unwrap_or(model.embed_dim);
    model.hidden_dim = m.hidden_dim.unwrap_or(model.hidden_dim);
    model.spatial_dim = m.spatial_dim.unwrap_or(model.spatial_dim);
    model.node_dim = m.node_dim.unwrap_or(model.node_dim);
    model.attn_dim = m.attn_dim.unwrap_or(model.attn_dim);
    model.match_dim = m.match_dim.unwrap_or(model.match_dim);
    (train, model)
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| DgaError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| DgaError::Flag(format!("{}: {e}", path.display())))
}

fn nonempty(records: &[dataset::SceneRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(DgaError::Data(format!("{} contains no scenes", path.display())));
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => read_config(p)?,
        None => ConfigFile::default(),
    };
    let records = load_dataset(&a.data)?;
    nonempty(&records, &a.data)?;
    let vocab = dataset::dataset_vocabulary(&records);
    let (train_cfg, model_cfg) = resolve_train(a, &file, records[0].feature_dim(), vocab.len());
    train_cfg.validate()?;
    let run = RunConfig {
        command: "train",
        data: a.data.clone(),
        train: train_cfg.clone(),
        model: model_cfg.clone(),
    };
    let run_json = serde_json::to_string(&run).expect("run config serializes");
    let scenes = prepare_all(&records, &vocab, model_cfg.visual_dim, model_cfg.max_len)?;
    let mut model = DgaModel::init(model_cfg, vocab, train_cfg.seed)?;
    let mut log_lines = Vec::new();
    training::train(&mut model, &scenes, &train_cfg, |log| {
        let line = serde_json::to_string(log).expect("log serializes");
        println!("{line}");
        log_lines.push(line);
    })?;
    write_atomic(&a.out, |w| {
        model
            .save(w, Some(&run_json))
            .map_err(|e| std::io::Error::other(e.to_string()))
    })?;
    if let Some(log) = &a.log {
        write_atomic(log, |w| {
            for l in &log_lines {
                writeln!(w, "{l}")?;
            }
            Ok(())
        })?;
    }
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<DgaModel> {
    let file = fs::File::open(path).map_err(|e| DgaError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    DgaModel::load(std::io::BufReader::new(file))
}

fn prepare_for(model: &DgaModel, records: &[dataset::SceneRecord]) -> Result<Vec<PreparedScene>> {
    prepare_all(records, &model.vocab, model.config.visual_dim, model.config.max_len)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    data: &'a Path,
    ckpt: &'a Path,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let records = load_dataset(&a.data)?;
    nonempty(&records, &a.data)?;
    let scenes = prepare_for(&model, &records)?;
    let report = training::evaluate(&model, &scenes)?;
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    for (depth, t) in &report.per_depth {
        println!("depth {depth}: {:.4} ({}/{})", t.accuracy(), t.correct, t.total);
    }
    if let Some(out) = &a.out {
        let doc = EvalOutput {
            data: &a.data,
            ckpt: &a.ckpt,
            report: &report,
        };
        let json = serde_json::to_string_pretty(&doc).expect("report serializes");
        write_atomic(out, |w| writeln!(w, "{json}"))?;
    }
    Ok(())
}

fn trace(a: &TraceArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let records = load_dataset(&a.data)?;
    let record = records.get(a.index).ok_or_else(|| {
        DgaError::Flag(format!("--index {} out of range for {} scenes", a.index, records.len()))
    })?;
    let scene = prepare_for(&model, std::slice::from_ref(record))?.remove(0);
    let mut tr = trace_scene(&model, &scene)?;
    tr.config = Some(serde_json::json!({
        "command": "trace",
        "data": a.data,
        "index": a.index,
        "ckpt": a.ckpt,
    }));
    let json = serde_json::to_string_pretty(&tr).expect("trace serializes");
    write_atomic(&a.out, |w| writeln!(w, "{json}"))?;
    println!("predicted {} (gt {}), {} steps", tr.predicted, tr.gt, tr.steps.len());
    Ok(())
}
