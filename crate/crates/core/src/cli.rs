//! Command-line front end.
//!
//! Config files are versioned JSON; flags override file values and the
//! merged configuration is echoed into every artifact. Errors map to exit
//! codes through [`Error::exit_code`].

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bench::{self, BenchConfig, Budget, Strategy};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{self, generate_synthetic, load_dataset, save_dataset, stack, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, CentroidClassifier, EvalConfig, MetricReport};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::model::{MindCrossModel, ModelConfig};
use crate::pipeline::{self, BatchMode, CalibrationHooks, DaVariant, RunConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "mindcross", version, about = "Cross-subject brain decoding: synthesize, train, calibrate, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-subject dataset.
    Synth(SynthArgs),
    /// Train a model on every (non-held-out) subject of a dataset.
    Train(TrainArgs),
    /// Adapt a trained model to a new subject with a small budget.
    Calibrate(CalibrateArgs),
    /// Score a model with the N-way top-K protocol.
    Eval(EvalArgs),
    /// Check every loss gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Leave-one-subject-out comparison of calibration and scratch training.
    BenchAdapt(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    /// Binary container only.
    Mcds,
    /// Binary container plus a JSON-lines dump next to it.
    Json,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "format", value_enum, default_value = "mcds")]
    pub format: OutputFormat,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub trials_per_class: Option<usize>,
    /// Also generate a subject `new` correlated with this one.
    #[arg(long)]
    pub clone_source: Option<String>,
    /// Split each subject class-stratified; the test part goes to `--test-out`.
    #[arg(long, requires = "test_out")]
    pub train_fraction: Option<f64>,
    #[arg(long, requires = "train_fraction")]
    pub test_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DaVariantArg {
    Grl,
    Kl,
    Lp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BatchModeArg {
    PerSubject,
    Mixed,
}

/// Flags shared by every command that trains.
#[derive(Debug, Args)]
pub struct RunOverrides {
    /// Run config (JSON with `version`, `model` and `run` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epochs_calib: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub da_variant: Option<DaVariantArg>,
    #[arg(long, value_enum)]
    pub batch_mode: Option<BatchModeArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSON-lines history.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Subjects to leave out of training (repeatable).
    #[arg(long = "holdout")]
    pub holdout: Vec<String>,
    #[command(flatten)]
    pub run: RunOverrides,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub newdata: PathBuf,
    /// Number of calibration trials, drawn class-stratified.
    #[arg(long)]
    pub budget: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Subject in `--newdata` to calibrate; defaults to the only one the
    /// model does not know.
    #[arg(long)]
    pub subject: Option<String>,
    /// Write the subject's trials not used for calibration here.
    #[arg(long)]
    pub holdout_out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunOverrides,
    #[arg(long, hide = true)]
    pub inject_frozen_drift: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Collaboration weight λ.
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// Number of collaborating subjects K.
    #[arg(long = "topk")]
    pub topk: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Distractor draws per prediction.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub no_probes: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the results as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_grl_sign_bug: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated trial counts or percentages, e.g. `40,200` or `10%`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub budgets: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "calib,scratch")]
    pub strategies: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_trials: usize,
    /// Only these subjects are held out in turn; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub held_out: Vec<String>,
    #[command(flatten)]
    pub run: RunOverrides,
}

fn default_dropout() -> f64 {
    0.15
}

fn default_hidden() -> usize {
    2048
}

fn default_grl_scale() -> f64 {
    1.0
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_grl_scale")]
    pub grl_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: default_hidden(),
            dropout_p: default_dropout(),
            grl_scale: default_grl_scale(),
        }
    }
}

/// On-disk run configuration for `train`, `calibrate` and `bench-adapt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub run: RunConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            model: ModelSection::default(),
            run: RunConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::validation(
                "version",
                format!("config version {} is not supported (expected {})", self.version, CONFIG_VERSION),
            ));
        }
        self.run.validate()
    }

    fn model_config(&self, ds: &Dataset, subjects: Vec<String>) -> ModelConfig {
        let mut m = ModelConfig::new(ds.in_dim, self.model.hidden, ds.embed_dim, subjects);
        m.dropout_p = self.model.dropout_p;
        m.grl_scale = self.model.grl_scale;
        m
    }
}

/// Recursively overlays `top` onto `base`; non-object values replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(path.display().to_string(), e.to_string()))
}

/// `base`, overlaid by the file at `path`, overlaid by `flags`, parsed as `T`.
fn layered<T: Serialize + for<'de> Deserialize<'de>>(base: &T, path: Option<&Path>, flags: Value) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(p) = path {
        merge(&mut v, read_json(p)?);
    }
    merge(&mut v, flags);
    serde_json::from_value(v).map_err(|e| Error::validation("config", e.to_string()))
}

fn run_flags(o: &RunOverrides) -> Value {
    let mut run = serde_json::Map::new();
    let mut model = serde_json::Map::new();
    if let Some(v) = o.seed {
        run.insert("seed".into(), v.into());
    }
    if let Some(v) = o.epochs {
        run.insert("epochs_train".into(), v.into());
    }
    if let Some(v) = o.epochs_calib {
        run.insert("epochs_calib".into(), v.into());
    }
    if let Some(v) = o.batch_size {
        run.insert("batch_size".into(), v.into());
    }
    if let Some(v) = o.lr {
        run.insert("learning_rate".into(), v.into());
    }
    if let Some(v) = o.da_variant {
        let v = match v {
            DaVariantArg::Grl => DaVariant::Grl,
            DaVariantArg::Kl => DaVariant::Kl,
            DaVariantArg::Lp => DaVariant::Lp,
        };
        run.insert("da_variant".into(), serde_json::to_value(v).expect("enum serializes"));
    }
    if let Some(v) = o.batch_mode {
        let v = match v {
            BatchModeArg::PerSubject => BatchMode::PerSubject,
            BatchModeArg::Mixed => BatchMode::Mixed,
        };
        run.insert("batch_mode".into(), serde_json::to_value(v).expect("enum serializes"));
    }
    if let Some(v) = o.hidden {
        model.insert("hidden".into(), v.into());
    }
    json!({ "run": run, "model": model })
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The training configuration echoed into a checkpoint.
fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig> {
    let cfg = ck
        .run_config
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Header("checkpoint does not echo a run configuration".into()))?;
    serde_json::from_value(cfg).map_err(|e| Error::Header(format!("echoed configuration: {e}")))
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut flags = serde_json::Map::new();
    if let Some(v) = a.seed {
        flags.insert("seed".into(), v.into());
    }
    if let Some(v) = a.subjects {
        flags.insert("n_subjects".into(), v.into());
    }
    if let Some(v) = a.classes {
        flags.insert("n_classes".into(), v.into());
    }
    if let Some(v) = a.trials_per_class {
        flags.insert("trials_per_class".into(), v.into());
    }
    if let Some(v) = &a.clone_source {
        flags.insert("clone_source".into(), v.clone().into());
    }
    let cfg: SyntheticConfig = layered(&SyntheticConfig::default(), a.config.as_deref(), Value::Object(flags))?;
    let ds = generate_synthetic(&cfg)?;
    let mut outputs = vec![(a.out.clone(), ds.clone())];
    if let (Some(f), Some(test_out)) = (a.train_fraction, &a.test_out) {
        let (train, test) = data::split(&ds.records, f, cfg.seed)?;
        outputs = vec![(a.out.clone(), ds.with_records(train)), (test_out.clone(), ds.with_records(test))];
    }
    for (path, part) in &outputs {
        save_dataset(path, part)?;
        if a.format == OutputFormat::Json {
            let mut p = path.clone().into_os_string();
            p.push(".jsonl");
            part.write_jsonl(Path::new(&p))?;
        }
        let counts: Vec<String> = part.counts().iter().map(|(s, n)| format!("{s}={n}")).collect();
        say(out, format!("wrote {} records to {} ({})", part.len(), path.display(), counts.join(", ")))?;
    }
    Ok(())
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg: TrainConfig = layered(&TrainConfig::default(), a.run.config.as_deref(), run_flags(&a.run))?;
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    for h in &a.holdout {
        if !ds.subjects.contains(h) {
            return Err(Error::UnknownSubject(h.clone()));
        }
    }
    let subjects: Vec<String> = ds.subjects.iter().filter(|s| !a.holdout.contains(s)).cloned().collect();
    if subjects.is_empty() {
        return Err(Error::validation("holdout", "every subject is held out"));
    }
    let mut model = pipeline::init_model(cfg.model_config(&ds, subjects), cfg.run.seed)?;
    let echo = json!({
        "command": "train",
        "config": cfg,
        "data_sha256": file_sha256(&a.data)?,
        "holdout": a.holdout,
    });

    let file = File::create(&a.metrics).map_err(|e| Error::io(&a.metrics, e))?;
    let mut metrics = BufWriter::new(file);
    let history = pipeline::train_observed(&mut model, &ds.by_subject()?, &cfg.run, &mut |r| {
        let line = serde_json::to_string(r)?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&a.metrics, e))
    })?;
    save_checkpoint(&a.out, &model, &echo)?;
    say(
        out,
        format!(
            "trained {} epochs on {} subjects in {:.2}s; final loss {:.6}; {} parameters",
            history.epochs.len(),
            model.domain_subjects().len(),
            history.elapsed.as_secs_f64(),
            history.final_total().unwrap_or(f64::NAN),
            model.param_count()
        ),
    )
}

fn pick_subject(model: &MindCrossModel, ds: &Dataset, requested: Option<&str>) -> Result<String> {
    if let Some(s) = requested {
        if !ds.subjects.iter().any(|d| d == s) {
            return Err(Error::UnknownSubject(s.to_string()));
        }
        return Ok(s.to_string());
    }
    let unknown: Vec<&String> = ds.subjects.iter().filter(|s| !model.has_subject(s)).collect();
    match unknown.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::validation("subject", "every subject in the data is already known to the model")),
        many => Err(Error::validation(
            "subject",
            format!("several new subjects ({}); pick one with --subject", many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
        )),
    }
}

fn cmd_calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let base = checkpoint_config(&ck)?;
    let cfg: TrainConfig = layered(&base, a.run.config.as_deref(), run_flags(&a.run))?;
    cfg.validate()?;
    let ds = load_dataset(&a.newdata)?;
    let mut model = ck.model;
    let subject = pick_subject(&model, &ds, a.subject.as_deref())?;
    let records = ds.subject_records(&subject);
    if a.budget == 0 || a.budget > records.len() {
        return Err(Error::validation(
            "budget",
            format!("{} exceeds the {} trials available for `{subject}`", a.budget, records.len()),
        ));
    }
    let chosen = data::stratified_subset_indices(&records, a.budget, cfg.run.seed)?;
    let subset: Vec<_> = chosen.iter().map(|&i| records[i].clone()).collect();
    if let Some(path) = &a.holdout_out {
        let rest: Vec<_> = (0..records.len())
            .filter(|i| chosen.binary_search(i).is_err())
            .map(|i| records[i].clone())
            .collect();
        if rest.is_empty() {
            return Err(Error::validation("holdout_out", "the budget uses every trial; nothing is left to hold out"));
        }
        save_dataset(path, &ds.with_records(rest))?;
    }
    let data = stack(&subset, ds.in_dim, ds.embed_dim)?;

    pipeline::add_subject_for(&mut model, &subject, &data, &cfg.run)?;
    let started = Instant::now();
    let hooks = CalibrationHooks {
        inject_frozen_drift: a.inject_frozen_drift,
    };
    pipeline::calibrate_with_hooks(&mut model, &subject, &data, &cfg.run, hooks)?;
    let wall = started.elapsed().as_secs_f64();
    let echo = json!({
        "command": "calibrate",
        "config": cfg,
        "subject": subject,
        "budget": a.budget,
        "data_sha256": file_sha256(&a.newdata)?,
        "parent": ck.run_config,
    });
    save_checkpoint(&a.out, &model, &echo)?;
    let similarity = model.similarity.get(&subject).cloned().unwrap_or_default();
    say(out, format!("calibrated `{subject}` on {} trials in {wall:.3}s", a.budget))?;
    say(
        out,
        format!(
            "trainable parameters: {} of {} total",
            model.trainable_param_count(),
            model.param_count()
        ),
    )?;
    let sim: Vec<String> = model
        .domain_subjects()
        .iter()
        .zip(&similarity)
        .map(|(s, p)| format!("{s}={p:.4}"))
        .collect();
    say(out, format!("similarity: {}", sim.join(", ")))
}

/// Everything `eval` writes: the effective settings, then the scores.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config: Value,
    #[serde(flatten)]
    pub report: MetricReport,
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let mut run = checkpoint_config(&ck)?.run;
    if let Some(l) = a.lambda {
        run.lambda_collab = l;
    }
    if let Some(k) = a.topk {
        run.top_k = k;
    }
    run.validate()?;
    let n = ck.model.domain_subjects().len();
    if run.top_k > n {
        return Err(Error::validation("topk", format!("K = {} exceeds the {n} training subjects", run.top_k)));
    }
    let defaults = EvalConfig::default();
    let eval_cfg = EvalConfig {
        trials: a.trials.unwrap_or(defaults.trials),
        seed: a.seed.unwrap_or(defaults.seed),
        probes: !a.no_probes,
        ..defaults
    };
    let ds = load_dataset(&a.data)?;
    let classifier = CentroidClassifier::from_dataset(&ds)?;
    let report = evaluate(&ck.model, &ds, &classifier, &run, &eval_cfg)?;
    let artifact = EvalArtifact {
        config: json!({
            "eval": eval_cfg,
            "lambda_collab": run.lambda_collab,
            "top_k": run.top_k,
            "renormalize_topk": run.renormalize_topk,
            "model_config_digest": ck.config_digest,
            "data_sha256": file_sha256(&a.data)?,
        }),
        report,
    };
    write_json(&a.report, &artifact)?;
    let scores: Vec<String> = artifact
        .report
        .overall
        .nway_topk
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    say(out, format!("{}; retrieval={:.4}", scores.join(", "), artifact.report.overall.retrieval))?;
    if let Some(p) = &artifact.report.probes {
        say(
            out,
            format!("subject probe: specific={:.4} shared={:.4} (chance {:.4})", p.specific, p.shared, p.chance),
        )?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        inject_grl_sign_bug: a.inject_grl_sign_bug,
    })?;
    say(out, report.table().trim_end())?;
    say(out, format!("{:.2}s", started.elapsed().as_secs_f64()))?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .losses
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.name.as_str())
            .chain((!report.grl.passed).then_some("grl_negation"))
            .collect();
        Err(Error::GradcheckFailed(format!(
            "{} above tolerance {:e}",
            failed.join(", "),
            report.tolerance
        )))
    }
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let cfg: TrainConfig = layered(&TrainConfig::default(), a.run.config.as_deref(), run_flags(&a.run))?;
    cfg.validate()?;
    let budgets = a.budgets.iter().map(|b| b.parse::<Budget>()).collect::<Result<Vec<_>>>()?;
    let strategies = a.strategies.iter().map(|s| s.parse::<Strategy>()).collect::<Result<Vec<_>>>()?;
    let ds = load_dataset(&a.data)?;
    let bench_cfg = BenchConfig {
        budgets,
        strategies,
        seeds: a.seeds.clone(),
        hidden: cfg.model.hidden,
        dropout_p: cfg.model.dropout_p,
        grl_scale: cfg.model.grl_scale,
        run: cfg.run.clone(),
        test_fraction: a.test_fraction,
        eval_trials: a.eval_trials,
        held_out: a.held_out.clone(),
    };
    let rows = bench::run_bench(&ds, &bench_cfg)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in &rows {
            w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    match &a.out {
        Some(p) => {
            std::fs::write(p, &buf).map_err(|e| Error::io(p, e))?;
            say(out, format!("wrote {} rows to {}", rows.len(), p.display()))
        }
        None => out.write_all(&buf).map_err(|e| Error::io("<stdout>", e)),
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::BenchAdapt(a) => cmd_bench(a, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
