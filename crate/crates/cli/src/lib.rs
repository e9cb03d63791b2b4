//! `prepare`, `train`, `eval` and `report` over the core library.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

pub mod config;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use intervalrec::baselines::{train_ranker, RankerModel};
use intervalrec::benchmark::{
    check_targets, emit_report, partition_users, read_dump, report_files, user_statistics, write_dump, Perspective,
    PredictionRecord, WARM_COLD_FRACTION,
};
use intervalrec::checkpoint::NamedTensors;
use intervalrec::dataset::{ingest, PrepareConfig, PreparedDataset, Split};
use intervalrec::lm::{load_checkpoint, save_checkpoint, train, Backbone, Manifest, Model, Theta, TrainState};
use intervalrec::pipeline::{
    dataset_tokenizer, encode_all, lm_predictions, ranker_examples, ranker_predictions, ranker_sequences, split_examples,
    train_examples, Method,
};
use intervalrec::prompt::Mode;
use intervalrec::Error;

pub use config::RunConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "intervalrec", version, about = "Interval-aware sequential recommendation pipeline")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, env = "INTERVALREC_WORKDIR", default_value = ".")]
    pub workdir: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "INTERVALREC_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a raw log, k-core filter, split and sample candidates.
    Prepare(PrepareArgs),
    /// Train one method on a prepared dataset.
    Train(TrainArgs),
    /// Predict a split with a trained run and write a prediction dump.
    Eval(EvalArgs),
    /// Warm/cold report over prediction dumps.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub core: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub method: String,
    /// Prompt mode for LM methods (NO_INTERVAL, TIMESTAMP_TEXT, INTERVAL_TEXT, INTERVAL_EMB, FULL_IIA).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction dumps: eval directories or `.jsonl` files.
    #[arg(long, num_args = 1.., required = true)]
    pub dumps: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "USER,ITEM,INTERVAL")]
    pub perspectives: Vec<String>,
    #[arg(long, default_value_t = WARM_COLD_FRACTION)]
    pub fraction: f64,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn from_core(context: &str, e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self { code, message: format!("{context}: {e}") }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn ctx(self, context: &str) -> CliResult<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn ctx(self, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(context, e.into()))
    }
}

/// What produced an artifact directory, with everything needed to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub config: Option<std::collections::BTreeMap<String, String>>,
    pub dataset_fingerprint: Option<String>,
    pub method: Option<Method>,
    pub mode: Option<Mode>,
    pub label: Option<String>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const PREDICTIONS: &str = "predictions.jsonl";

fn write_manifest(dir: &Path, m: &ArtifactManifest) -> CliResult<()> {
    fs::create_dir_all(dir).ctx("manifest")?;
    let text = serde_json::to_string_pretty(m).ctx("manifest")? + "\n";
    fs::write(dir.join(MANIFEST), text).ctx("manifest")
}

fn read_manifest(dir: &Path) -> CliResult<ArtifactManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).ctx(&path.display().to_string())
}

fn require_input(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("input path {} does not exist", path.display())))
    }
}

fn load_dataset(dir: &Path) -> CliResult<(PreparedDataset, String)> {
    require_input(dir)?;
    let data = PreparedDataset::load(dir).ctx("dataset")?;
    let fp = PreparedDataset::fingerprint_dir(dir).ctx("dataset")?;
    Ok((data, fp))
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::usage("--workers must be positive"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let wd = cli.workdir.clone();
    let at = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { wd.join(p) };
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&at(&a.input), &at(&a.out), a.seed, a.core),
        Command::Train(a) => {
            let config = a.config.as_ref().map(|c| at(c));
            let cfg = RunConfig::resolve(config.as_deref(), |k| std::env::var(k).ok(), &a.set).ctx("config")?;
            cmd_train(&at(&a.data), &a.method, a.mode.as_deref(), &cfg, &at(&a.out))
        }
        Command::Eval(a) => {
            let split = Split::parse(&a.split).ok_or_else(|| CliError::usage(format!("unknown split {:?}; expected val or test", a.split)))?;
            cmd_eval(&at(&a.run), &at(&a.data), split, &at(&a.out))
        }
        Command::Report(a) => {
            let perspectives =
                a.perspectives.iter().map(|p| Perspective::parse(p.trim())).collect::<Result<Vec<_>, _>>().ctx("report")?;
            let dumps: Vec<PathBuf> = a.dumps.iter().map(|d| at(d)).collect();
            cmd_report(&at(&a.data), &dumps, &perspectives, a.fraction, a.seeds, &at(&a.out))
        }
    }
}

pub fn cmd_prepare(input: &Path, out: &Path, seed: u64, core: usize) -> CliResult<()> {
    require_input(input)?;
    if core == 0 {
        return Err(CliError::usage("--core must be positive"));
    }
    let file = fs::File::open(input).map_err(|e| CliError::usage(format!("{}: {e}", input.display())))?;
    let (log, report) = ingest(BufReader::new(file)).ctx("ingest")?;
    let mut data = PreparedDataset::prepare(&log, PrepareConfig { seed, core }).ctx("prepare")?;
    data.report.ingest = Some(report);
    data.save(out).ctx("prepare")?;
    let fp = PreparedDataset::fingerprint_dir(out).ctx("prepare")?;
    write_manifest(
        out,
        &ArtifactManifest {
            command: "prepare".into(),
            args: serde_json::json!({"input": input, "seed": seed, "core": core}),
            config: None,
            dataset_fingerprint: Some(fp),
            method: None,
            mode: None,
            label: None,
        },
    )
}

pub fn cmd_train(data_dir: &Path, method: &str, mode: Option<&str>, cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let method = Method::parse(method).ctx("train")?;
    let mode = match (mode, method.default_mode()) {
        (Some(_), None) => return Err(CliError::usage(format!("--mode applies only to LM methods, not {method}"))),
        (Some(m), Some(_)) => Some(Mode::parse(m).ctx("train")?),
        (None, d) => d,
    };
    let (data, fp) = load_dataset(data_dir)?;
    let seed = cfg.seed().ctx("config")?;
    let label = method.label(mode);
    fs::create_dir_all(out).ctx("train")?;
    if let Some(variant) = method.variant() {
        let rcfg = cfg.ranker(variant).ctx("config")?;
        let model = RankerModel::init(rcfg, data.catalog.ids()).ctx("train")?;
        let val = ranker_examples(&data, Split::Validation).ctx("train")?;
        let state = train_ranker(model, &ranker_sequences(&data), &val, None).ctx("train")?;
        state.best.to_tensors().ctx("train")?.save(&out.join(CHECKPOINT)).ctx("train")?;
        let log: Vec<serde_json::Value> =
            state.log.iter().map(|(e, l, v)| serde_json::json!({"epoch": e, "loss": l, "val_hr1": v})).collect();
        intervalrec::dataset::write_jsonl(&out.join("train_log.jsonl"), &log).ctx("train")?;
    } else {
        let mode = mode.expect("LM methods have a mode");
        let prompt = cfg.prompt().ctx("config")?;
        let tok = dataset_tokenizer(&data, &prompt);
        let (bcfg, init, bseed) = cfg.backbone(tok.len()).ctx("config")?;
        let backbone = Backbone::new(bcfg.clone(), init, &tok, bseed).ctx("backbone")?;
        let fingerprint = backbone.fingerprint();
        let model = Model::new(backbone, tok.clone(), mode).ctx("model")?;
        let tr = encode_all(&train_examples(&data).ctx("train")?, mode, &prompt, &tok).ctx("train")?;
        let va = encode_all(&split_examples(&data, Split::Validation).ctx("train")?, mode, &prompt, &tok).ctx("train")?;
        let (adapter, iia, hidden) = (cfg.adapter().ctx("config")?, cfg.iia().ctx("config")?, cfg.embedder_hidden().ctx("config")?);
        let theta = Theta::init(&model.backbone, &tok, adapter, iia, hidden, seed).ctx("train")?;
        let state = train(&model, TrainState::new(theta), &tr, &va, &cfg.train().ctx("config")?, None).ctx("train")?;
        let manifest = Manifest {
            backbone: bcfg,
            backbone_init: init,
            backbone_seed: bseed,
            backbone_fingerprint: fingerprint,
            mode,
            train_seed: seed,
            dataset_fingerprint: Some(fp.clone()),
            adapter,
            iia,
            embedder_hidden: hidden,
            prompt,
            tokens: tok.tokens().to_vec(),
            best_val_hr1: state.best_val_hr1,
            best_epoch: state.best_epoch,
        };
        save_checkpoint(&out.join(CHECKPOINT), &state.best, &manifest).ctx("train")?;
        fs::write(out.join("train_log.jsonl"), state.log_lines().ctx("train")?).ctx("train")?;
    }
    write_manifest(
        out,
        &ArtifactManifest {
            command: "train".into(),
            args: serde_json::json!({"data": data_dir, "method": method, "mode": mode}),
            config: Some(cfg.values.clone()),
            dataset_fingerprint: Some(fp),
            method: Some(method),
            mode,
            label: Some(label),
        },
    )
}

pub fn cmd_eval(run_dir: &Path, data_dir: &Path, split: Split, out: &Path) -> CliResult<()> {
    require_input(run_dir)?;
    let run = read_manifest(run_dir)?;
    let (data, fp) = load_dataset(data_dir)?;
    if run.dataset_fingerprint.as_deref() != Some(fp.as_str()) {
        return Err(CliError { code: EXIT_DATA, message: "eval: dataset fingerprint differs from the one the run was trained on".into() });
    }
    let method = run.method.ok_or_else(|| CliError { code: EXIT_DATA, message: "eval: run manifest has no method".into() })?;
    let label = run.label.clone().unwrap_or_else(|| method.label(run.mode));
    let records: Vec<PredictionRecord> = if method.variant().is_some() {
        let model = RankerModel::from_tensors(&NamedTensors::load(&run_dir.join(CHECKPOINT)).ctx("eval")?).ctx("eval")?;
        ranker_predictions(&model, &ranker_examples(&data, split).ctx("eval")?, &label).ctx("eval")?
    } else {
        let (theta, manifest) = load_checkpoint(&run_dir.join(CHECKPOINT)).ctx("eval")?;
        let model = manifest.model().ctx("eval")?;
        let tok = manifest.tokenizer().ctx("eval")?;
        let ex = encode_all(&split_examples(&data, split).ctx("eval")?, manifest.mode, &manifest.prompt, &tok).ctx("eval")?;
        lm_predictions(&model, &theta, &ex, &label).ctx("eval")?
    };
    fs::create_dir_all(out).ctx("eval")?;
    write_dump(&out.join(PREDICTIONS), &records).ctx("eval")?;
    write_manifest(
        out,
        &ArtifactManifest {
            command: "eval".into(),
            args: serde_json::json!({"run": run_dir, "data": data_dir, "split": split.name()}),
            config: run.config,
            dataset_fingerprint: Some(fp),
            method: Some(method),
            mode: run.mode,
            label: Some(label),
        },
    )
}

/// Reads a dump given as an eval directory or a bare `.jsonl` file; a
/// directory's manifest must carry the dataset's fingerprint.
fn load_dump(path: &Path, fingerprint: &str) -> CliResult<Vec<PredictionRecord>> {
    require_input(path)?;
    if path.is_dir() {
        let m = read_manifest(path)?;
        if m.dataset_fingerprint.as_deref() != Some(fingerprint) {
            return Err(CliError { code: EXIT_DATA, message: format!("report: {} was produced on a different dataset", path.display()) });
        }
        read_dump(&path.join(PREDICTIONS)).ctx("report")
    } else {
        read_dump(path).ctx("report")
    }
}

pub fn cmd_report(data_dir: &Path, dumps: &[PathBuf], perspectives: &[Perspective], fraction: f64, seeds: Vec<u64>, out: &Path) -> CliResult<()> {
    let (data, fp) = load_dataset(data_dir)?;
    let mut records = Vec::new();
    for d in dumps {
        records.extend(load_dump(d, &fp)?);
    }
    check_targets(&data, &records).ctx("report")?;
    let partitions = perspectives
        .iter()
        .map(|&p| partition_users(&user_statistics(&data, p), p, fraction))
        .collect::<Result<Vec<_>, _>>()
        .ctx("report")?;
    let report = emit_report(&records, &partitions, Some(fp.clone()), seeds).ctx("report")?;
    fs::create_dir_all(out).ctx("report")?;
    for (name, text) in report_files(&report, &partitions).ctx("report")? {
        fs::write(out.join(name), text).ctx("report")?;
    }
    write_manifest(
        out,
        &ArtifactManifest {
            command: "report".into(),
            args: serde_json::json!({
                "data": data_dir,
                "dumps": dumps,
                "perspectives": perspectives,
                "fraction": fraction,
                "seeds": report.seeds,
            }),
            config: None,
            dataset_fingerprint: Some(fp),
            method: None,
            mode: None,
            label: None,
        },
    )
}
