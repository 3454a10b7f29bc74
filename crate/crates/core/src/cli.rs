//! Command implementations behind the `semobridge` binary.
//!
//! Every command appends one JSON line (a [`RunReport`]) to a report file:
//! `--report` if given, otherwise `runs.jsonl` inside the command's output
//! directory. Configuration precedence is flags, then `--config` file, then
//! defaults; the effective configuration is echoed into the report.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bridge::BridgeModel;
use crate::datastore::{
    self, load_model_for_task, load_task, manifest_path, save_model, save_task, task_hash, Dtype, ModelRecord,
    TrainingInfo,
};
use crate::error::Error;
use crate::hpsearch::{search, write_trace_csv, SearchSpec, Strategy};
use crate::inference::{modality_report, write_csv_file, BlendConfig, ClassifierState, Evaluation};
use crate::synth::{generate, SynthSpec};
use crate::task::{FewShotTask, LabeledEmbeddings};
use crate::training::{train, write_bias_norms_csv, write_history_csv, TrainConfig};

pub const SEED_ENV: &str = "SEMOBRIDGE_SEED";

#[derive(Debug, Parser)]
#[command(name = "semobridge", version, about = "Few-shot classification by bridging image embeddings into the text modality")]
pub struct Cli {
    /// Worker threads for query evaluation (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Append the run report to this JSONL file.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task.
    Synth(SynthArgs),
    /// Evaluate the test split with a training-free or trained bridge.
    Infer(InferArgs),
    /// Train class biases and the inverse projection.
    Train(TrainArgs),
    /// Search blend parameters on the validation split.
    Hpsearch(HpsearchArgs),
    /// Per-logit accuracy breakdown on a split.
    Eval(EvalArgs),
    /// Export diagnostics as CSV.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Keep {
    /// Parameters of the best validation epoch.
    Best,
    /// Parameters after the last epoch.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    BiasNorms,
    SimilarityHist,
    Confusion,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub shots: Option<u64>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub validation: Option<usize>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub eos_dim: Option<usize>,
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub image_noise: Option<f64>,
    #[arg(long)]
    pub text_noise: Option<f64>,
    #[arg(long)]
    pub anisotropy: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Blend JSON file, or overrides such as `l1=1,l2=0,l3=0`.
    #[arg(long)]
    pub blend: Option<String>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// JSON file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lambda_it: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_b: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Which parameters to save.
    #[arg(long, value_enum, default_value = "best")]
    pub keep: Keep,
}

#[derive(Debug, Args)]
pub struct HpsearchArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON file with search settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub blend: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub what: ExportKind,
    #[arg(long)]
    pub blend: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Output CSV path. For `similarity-hist` this is a directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// One line of the append-only run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub metrics: Value,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
}

struct Outcome {
    config: Value,
    seed: Option<u64>,
    metrics: Value,
    artifacts: Vec<PathBuf>,
    report_dir: PathBuf,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(report) => {
            if let Ok(line) = serde_json::to_string(&report.metrics) {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<RunReport> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("cli: --threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("cli: building thread pool")?;
    let start = Instant::now();
    let (name, outcome) = pool.install(|| -> anyhow::Result<(&str, Outcome)> {
        Ok(match &cli.command {
            Command::Synth(a) => ("synth", cmd_synth(a)?),
            Command::Infer(a) => ("infer", cmd_infer(a)?),
            Command::Train(a) => ("train", cmd_train(a)?),
            Command::Hpsearch(a) => ("hpsearch", cmd_hpsearch(a)?),
            Command::Eval(a) => ("eval", cmd_eval(a)?),
            Command::Export(a) => ("export", cmd_export(a)?),
        })
    })?;
    let mut config = outcome.config;
    if let Value::Object(map) = &mut config {
        map.insert("threads".into(), json!(cli.threads));
    }
    let report = RunReport {
        command: name.to_string(),
        config,
        seed: outcome.seed,
        metrics: outcome.metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
        artifacts: outcome.artifacts.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = cli.report.clone().unwrap_or_else(|| outcome.report_dir.join("runs.jsonl"));
    append_report(&path, &report)?;
    Ok(report)
}

fn append_report(path: &Path, report: &RunReport) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cli: creating {}", dir.display()))?;
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("cli: opening report {}", path.display()))?;
    writeln!(file, "{}", serde_json::to_string(report)?).with_context(|| format!("cli: writing report {}", path.display()))
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text).map_err(|source| Error::Json {
                path: p.to_path_buf(),
                source,
            })?)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cli: creating {}", dir.display()))
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<Outcome> {
    let mut spec: SynthSpec = read_config(a.config.as_deref())?;
    set(&mut spec.classes, a.classes.map(|v| v as usize));
    set(&mut spec.shots, a.shots.map(|v| v as usize));
    set(&mut spec.queries_per_class, a.queries);
    set(&mut spec.validation_per_class, a.validation);
    set(&mut spec.prompts_per_class, a.prompts);
    set(&mut spec.embed_dim, a.embed_dim);
    set(&mut spec.eos_dim, a.eos_dim);
    set(&mut spec.gap_magnitude, a.gap);
    set(&mut spec.image_noise, a.image_noise);
    set(&mut spec.text_noise, a.text_noise);
    set(&mut spec.noise_anisotropy, a.anisotropy);
    set(&mut spec.inter_class_separation, a.separation);
    set(&mut spec.seed, a.seed);
    let synth = generate(&spec)?;
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let manifest = save_task(&synth.task, &a.out, dtype)?;
    println!("{}", manifest.display());
    Ok(Outcome {
        config: json!({ "synth": spec, "dtype": format!("{:?}", a.dtype).to_lowercase(), "out": a.out }),
        seed: Some(spec.seed),
        metrics: json!({ "classes": spec.classes, "eos_norm": synth.task.eos_norm.value }),
        artifacts: vec![manifest],
        report_dir: a.out.clone(),
    })
}

/// Task plus the model to use with it (training-free when no model path).
struct Loaded {
    task: FewShotTask,
    record: Option<ModelRecord>,
    model: BridgeModel,
}

fn load(task_path: &Path, model_path: Option<&Path>) -> anyhow::Result<Loaded> {
    let task = load_task(task_path)?;
    let record = match model_path {
        Some(p) => Some(load_model_for_task(p, &manifest_path(task_path), &task)?),
        None => None,
    };
    let model = match &record {
        Some(r) => r.model.clone(),
        None => BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes()),
    };
    Ok(Loaded { task, record, model })
}

/// `--blend` may name a JSON file or hold `key=value` overrides applied on
/// top of the model's stored blend (or the defaults).
fn resolve_blend(arg: Option<&str>, stored: Option<BlendConfig>) -> anyhow::Result<BlendConfig> {
    let base = stored.unwrap_or_default();
    match arg {
        None => Ok(base),
        Some(s) if Path::new(s).is_file() => Ok(datastore::read_blend(Path::new(s))?),
        Some(s) if s.ends_with(".json") => Err(Error::MissingFile(PathBuf::from(s)).into()),
        Some(s) => Ok(base.with_overrides(s)?),
    }
}

fn split<'a>(task: &'a FewShotTask, s: Split) -> &'a LabeledEmbeddings {
    match s {
        Split::Validation => &task.validation,
        Split::Test => &task.test,
    }
}

fn evaluation_metrics(e: &Evaluation) -> Value {
    json!({ "accuracy": e.accuracy, "per_class_accuracy": e.per_class_accuracy() })
}

fn model_label(l: &Loaded) -> &'static str {
    if l.record.is_some() {
        "trained"
    } else {
        "training-free"
    }
}

fn write_histograms(dir: &Path, loaded: &Loaded) -> anyhow::Result<Vec<PathBuf>> {
    let t = &loaded.task;
    let report = modality_report(&t.support, &t.text, &loaded.model, &t.projection.forward)?;
    let mut paths = Vec::new();
    for (name, h) in report.histograms() {
        let p = dir.join(format!("similarity_hist_{name}.csv"));
        write_csv_file(&p, |w| h.write_csv(w))?;
        paths.push(p);
    }
    Ok(paths)
}

fn cmd_infer(a: &InferArgs) -> anyhow::Result<Outcome> {
    let loaded = load(&a.task, a.model.as_deref())?;
    let blend = resolve_blend(a.blend.as_deref(), loaded.record.as_ref().and_then(|r| r.blend))?;
    let t = &loaded.task;
    let state = ClassifierState::for_task(t, &loaded.model, blend)?;
    let eval = state.evaluate(&t.test.embeddings, &t.test.labels)?;
    create_dir(&a.out)?;
    let confusion = a.out.join("confusion.csv");
    write_csv_file(&confusion, |w| eval.write_confusion_csv(w))?;
    let mut artifacts = vec![confusion];
    artifacts.extend(write_histograms(&a.out, &loaded)?);
    Ok(Outcome {
        config: json!({ "task": a.task, "model": a.model, "model_kind": model_label(&loaded), "blend": blend, "out": a.out }),
        seed: Some(t.seed),
        metrics: evaluation_metrics(&eval),
        artifacts,
        report_dir: a.out.clone(),
    })
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<Outcome> {
    let task = load_task(&a.task)?;
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    let warmup_given = a.warmup.is_some() || a.config.is_some();
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.learning_rate, a.lr);
    set(&mut cfg.warmup_epochs, a.warmup);
    set(&mut cfg.lambda_it, a.lambda_it);
    set(&mut cfg.lambda_c, a.lambda_c);
    set(&mut cfg.lambda_b, a.lambda_b);
    set(&mut cfg.temperature, a.temperature);
    set(&mut cfg.eval_interval, a.eval_interval);
    set(&mut cfg.seed, a.seed);
    // default warmup is capped at --epochs
    if !warmup_given {
        cfg.warmup_epochs = cfg.warmup_epochs.min(cfg.epochs);
    }
    let outcome = train(&task, &cfg)?;
    let (model, saved_epoch) = match a.keep {
        Keep::Best => (&outcome.model, outcome.best_epoch),
        Keep::Final => (&outcome.final_model, cfg.epochs),
    };
    create_dir(&a.out)?;
    let record = ModelRecord {
        model: model.clone(),
        task_hash: task_hash(&a.task)?,
        blend: None,
        training: Some(TrainingInfo {
            config: cfg.clone(),
            best_epoch: outcome.best_epoch,
            best_val_acc: outcome.best_val_acc,
            saved_epoch,
        }),
    };
    let model_path = save_model(&a.out, &record)?;
    let history = a.out.join("history.csv");
    write_csv_file(&history, |w| write_history_csv(&outcome.history, w))?;
    let bias = a.out.join("bias_norms.csv");
    write_csv_file(&bias, |w| write_bias_norms_csv(model, &task.class_names, w))?;
    let first = &outcome.history[0].losses;
    let last = &outcome.history[outcome.history.len() - 1].losses;
    Ok(Outcome {
        config: json!({ "task": a.task, "train": cfg, "keep": a.keep, "out": a.out }),
        seed: Some(cfg.seed),
        metrics: json!({
            "best_epoch": outcome.best_epoch,
            "best_val_acc": outcome.best_val_acc,
            "saved_epoch": saved_epoch,
            "initial_loss": first.total,
            "final_loss": last.total,
            "parameters": model.parameter_count(),
        }),
        artifacts: vec![model_path, history, bias],
        report_dir: a.out.clone(),
    })
}

fn cmd_hpsearch(a: &HpsearchArgs) -> anyhow::Result<Outcome> {
    let loaded = load(&a.task, a.model.as_deref())?;
    let mut spec: SearchSpec = read_config(a.config.as_deref())?;
    set(&mut spec.budget, a.budget);
    set(&mut spec.seed, a.seed);
    if let Some(s) = &a.strategy {
        spec.strategy = s.parse::<Strategy>()?;
    }
    let t = &loaded.task;
    let base = loaded.record.as_ref().and_then(|r| r.blend).unwrap_or_default();
    let state = ClassifierState::for_task(t, &loaded.model, base)?;
    let out = search(&state, &t.validation, &spec)?;
    create_dir(&a.out)?;
    let blend_path = a.out.join("blend.json");
    datastore::write_blend(&blend_path, &out.best)?;
    let trace = a.out.join("trace.csv");
    write_csv_file(&trace, |w| write_trace_csv(&out.trace, w))?;
    Ok(Outcome {
        config: json!({ "task": a.task, "model": a.model, "model_kind": model_label(&loaded), "search": spec, "out": a.out }),
        seed: Some(spec.seed),
        metrics: json!({ "best_val_acc": out.best_val_acc, "evaluations": out.trace.len(), "best": out.best }),
        artifacts: vec![blend_path, trace],
        report_dir: a.out.clone(),
    })
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<Outcome> {
    let loaded = load(&a.task, a.model.as_deref())?;
    let blend = resolve_blend(a.blend.as_deref(), loaded.record.as_ref().and_then(|r| r.blend))?;
    let t = &loaded.task;
    let data = split(t, a.split);
    let state = ClassifierState::for_task(t, &loaded.model, blend)?;
    let sims = state.similarities(&data.embeddings)?;
    let weights = state.label_weights(blend.theta);
    let only = |l1: f64, l2: f64, l3: f64| BlendConfig {
        lambda1: l1,
        lambda2: l2,
        lambda3: l3,
        ..blend
    };
    let mut rows = serde_json::Map::new();
    for (name, b) in [
        ("z1", only(1.0, 0.0, 0.0)),
        ("z2", only(0.0, 1.0, 0.0)),
        ("z3", only(0.0, 0.0, 1.0)),
        ("z2+z3", only(0.0, 1.0, 1.0)),
        ("blend", blend),
    ] {
        let e = sims.evaluate(&data.labels, &b, &weights)?;
        rows.insert(name.into(), json!(e.accuracy));
    }
    let full = sims.evaluate(&data.labels, &blend, &weights)?;
    Ok(Outcome {
        config: json!({ "task": a.task, "model": a.model, "model_kind": model_label(&loaded), "blend": blend, "split": a.split }),
        seed: Some(t.seed),
        metrics: json!({ "accuracy": full.accuracy, "per_class_accuracy": full.per_class_accuracy(), "by_logit": rows }),
        artifacts: vec![],
        report_dir: a.out.clone(),
    })
}

fn cmd_export(a: &ExportArgs) -> anyhow::Result<Outcome> {
    let loaded = load(&a.task, a.model.as_deref())?;
    let t = &loaded.task;
    let (artifacts, metrics, report_dir) = match a.what {
        ExportKind::BiasNorms => {
            write_csv_file(&a.out, |w| write_bias_norms_csv(&loaded.model, &t.class_names, w))?;
            let norms = loaded.model.bias_norms();
            (vec![a.out.clone()], json!({ "rows": norms.len(), "bias_norms": norms }), parent(&a.out))
        }
        ExportKind::SimilarityHist => {
            create_dir(&a.out)?;
            let paths = write_histograms(&a.out, &loaded)?;
            let report = modality_report(&t.support, &t.text, &loaded.model, &t.projection.forward)?;
            let overlaps: serde_json::Map<String, Value> = report
                .histograms()
                .iter()
                .map(|(n, h)| (n.to_string(), json!(h.overlap())))
                .collect();
            (paths, json!({ "overlap": overlaps }), a.out.clone())
        }
        ExportKind::Confusion => {
            let blend = resolve_blend(a.blend.as_deref(), loaded.record.as_ref().and_then(|r| r.blend))?;
            let data = split(t, a.split);
            let eval = ClassifierState::for_task(t, &loaded.model, blend)?.evaluate(&data.embeddings, &data.labels)?;
            write_csv_file(&a.out, |w| eval.write_confusion_csv(w))?;
            (vec![a.out.clone()], evaluation_metrics(&eval), parent(&a.out))
        }
    };
    Ok(Outcome {
        config: json!({ "task": a.task, "model": a.model, "what": format!("{:?}", a.what), "out": a.out }),
        seed: Some(t.seed),
        metrics,
        artifacts,
        report_dir,
    })
}

fn parent(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
