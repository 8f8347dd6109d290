//! Command-line front end.
//!
//! Every subcommand writes into one run directory (`--out`, or `FRS_OUT`,
//! or a spec file's `out_dir`, defaulting to `runs/<subcommand>`) and ends by
//! committing a `run.json` provenance record listing inputs, outputs with
//! their SHA-256, seeds and the effective configuration.
//!
//! Settings resolve as flags, then environment variables, then the spec
//! file. Failures print one JSON object on stderr and exit with 2 (usage or
//! configuration), 3 (data) or 4 (backend).

mod commands;
mod toyrepro;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backends::Task;
use crate::corpus::VariantKind;
use crate::error::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "frs-audit", version, about = "Fairness audits, adversarial variants, Grad-CAM and bias mitigation for face classifiers")]
pub struct Cli {
    /// Run directory receiving every output and `run.json`.
    #[arg(long, global = true, env = "FRS_OUT")]
    pub out: Option<PathBuf>,
    /// Master seed for every stochastic step.
    #[arg(long, global = true, env = "FRS_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a manifest from a labeled image directory and normalize crops to 200x256.
    Ingest(IngestArgs),
    /// Generate adversarial variant sets (RGB noise, spread, greyscale, mask).
    Variants(VariantsArgs),
    /// Score a manifest with one or more backends and tabulate group accuracy and disparity.
    Audit(AuditArgs),
    /// Split off the held-out test set (60 per country, 2:1 male:female by default).
    Holdout(HoldoutArgs),
    /// Sample k identities per (country, gender) cell.
    Kshot(KshotArgs),
    /// k-shot cross-entropy fine-tuning with repeats.
    TrainFewshot(TrainArgs),
    /// Triplet contrastive fine-tuning.
    TrainContrastive(ContrastiveArgs),
    /// Two-stage country-task training.
    TrainCountry(CountryArgs),
    /// Grad-CAM maps, overlays, group averages and zone profiles.
    Explain(ExplainArgs),
    /// Re-render tables and a bar chart from a saved audit report.
    Report(ReportArgs),
    /// Run the synthetic mitigation experiments and print their tables.
    ToyRepro(ToyArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Variants(_) => "variants",
            Command::Audit(_) => "audit",
            Command::Holdout(_) => "holdout",
            Command::Kshot(_) => "kshot",
            Command::TrainFewshot(_) => "train-fewshot",
            Command::TrainContrastive(_) => "train-contrastive",
            Command::TrainCountry(_) => "train-country",
            Command::Explain(_) => "explain",
            Command::Report(_) => "report",
            Command::ToyRepro(_) => "toy-repro",
        }
    }
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory of .jpg/.png face images.
    #[arg(long)]
    pub images: PathBuf,
    /// Labels CSV (`filename,identity_id,name,country,gender`); defaults to `<images>/labels.csv`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Face boxes CSV (`filename,x,y,width,height`); without it the full frame is the face.
    #[arg(long)]
    pub bboxes: Option<PathBuf>,
    /// Extra `country,region` rows (region GN or GS) for non-canonical countries.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Keep the original images instead of writing normalized crops.
    #[arg(long)]
    pub no_crop: bool,
}

#[derive(Args, Debug)]
pub struct VariantsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated variant tags, e.g. `rgb0.3,sprd,grey,mask`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kinds: Vec<VariantKind>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Manifest to score.
    #[arg(long, conflicts_with = "corpus")]
    pub manifest: Option<PathBuf>,
    /// Image directory with a `labels.csv`, ingested on the fly.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Backend: `stub`, `constant:<label>`, `local:<checkpoint>[@name]`, `rekognition`, `azure` or `facepp`.
    #[arg(long, required = true)]
    pub backend: Vec<String>,
    #[arg(long, default_value = "gender")]
    pub task: Task,
    /// Prediction cache directory.
    #[arg(long, env = "FRS_CACHE")]
    pub cache: Option<PathBuf>,
    /// Requests per second for remote backends.
    #[arg(long, default_value_t = 1.0)]
    pub rate_limit: f64,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// Add per-country groups next to the region groups.
    #[arg(long)]
    pub by_country: bool,
    /// Balanced resampling: this many identities per gender.
    #[arg(long)]
    pub balanced: Option<usize>,
    /// Number of male resamples for `--balanced`.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct HoldoutArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub per_country: usize,
    /// Male:female ratio.
    #[arg(long, default_value = "2:1")]
    pub ratio: String,
    /// Only drop the held-out records from the pool, not their identities' variants.
    #[arg(long)]
    pub overlap: bool,
}

#[derive(Args, Debug)]
pub struct KshotArgs {
    /// Training pool manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0)]
    pub adversarial_fraction: f64,
    #[arg(long, default_value = "rgb0.3")]
    pub adversarial_kind: VariantKind,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Experiment spec JSON; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub adversarial_fraction: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ContrastiveArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub triplets: TripletArgs,
}

#[derive(Args, Debug, Default)]
pub struct TripletArgs {
    #[arg(long)]
    pub margin: Option<f64>,
    /// Probability of an opposite-gender negative (1.0, or 0.85).
    #[arg(long)]
    pub opposite_p: Option<f64>,
    /// `per-cell:<k>` or `all`.
    #[arg(long)]
    pub anchors: Option<String>,
    /// Variant used as the positive.
    #[arg(long)]
    pub positive: Option<VariantKind>,
    /// Triplet weight; the cross-entropy weight is `1 - w`.
    #[arg(long)]
    pub w_triplet: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CountryScheme {
    Finetune,
    Contrastive,
}

#[derive(Args, Debug)]
pub struct CountryArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub triplets: TripletArgs,
    #[arg(long, value_enum)]
    pub scheme: Option<CountryScheme>,
    /// Second-stage manifest (k-shot sampled when `--shots` is set).
    #[arg(long)]
    pub stage2: Option<PathBuf>,
    /// Learning rate of the second stage.
    #[arg(long)]
    pub stage2_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "gender")]
    pub task: Task,
    /// Explain this class for every image instead of its true label.
    #[arg(long)]
    pub class: Option<String>,
    /// Conv block to hook (0-based); defaults to the last.
    #[arg(long)]
    pub block: Option<usize>,
    /// Explain at most this many records.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Columns of the composite grid.
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `report.json` written by `audit`.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ToyWhich {
    Mitigation,
    Contrastive,
    Country,
    All,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[arg(value_enum, default_value = "mitigation")]
    pub which: ToyWhich,
    /// Also write the gender toy data (PNGs, manifests, pretrained checkpoint
    /// and a few-shot spec) so the training subcommands can run on it.
    #[arg(long)]
    pub export: bool,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_backend() => EXIT_BACKEND,
        Error::Config(_) | Error::InvalidVariant(_) | Error::InvalidSplit(_) | Error::BadAmplitude(_) | Error::BadRadius(_) => {
            EXIT_USAGE
        }
        _ => EXIT_DATA,
    }
}

fn error_json(kind: &str, message: &str, code: i32) -> String {
    json!({ "error": kind, "message": message, "exit_code": code }).to_string()
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

fn file_entry(path: &Path, shown: String) -> Option<FileEntry> {
    let bytes = std::fs::read(path).ok()?;
    Some(FileEntry { path: shown, sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 })
}

fn collect_files(dir: &Path, acc: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, acc);
        } else {
            acc.push(p);
        }
    }
}

/// What a subcommand hands back for `run.json`.
#[derive(Default)]
pub struct RunInfo {
    pub inputs: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub config: Value,
    pub summary: Value,
}

/// State shared by the subcommand implementations.
pub struct Context {
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Context {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_run_json(out: &Path, command: &str, argv: &[String], started: &str, result: Result<&RunInfo, &Error>) -> std::io::Result<()> {
    let mut files = Vec::new();
    collect_files(out, &mut files);
    files.sort();
    let outputs: Vec<FileEntry> = files
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n != "run.json" && !n.to_string_lossy().starts_with(".run.json")))
        .filter_map(|p| file_entry(p, p.strip_prefix(out).unwrap_or(p).display().to_string()))
        .collect();
    let mut record = json!({
        "tool": "frs-audit",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": command,
        "argv": argv,
        "started_at": started,
        "finished_at": chrono::Utc::now().to_rfc3339(),
        "outputs": outputs,
    });
    match result {
        Ok(info) => {
            let inputs: Vec<FileEntry> =
                info.inputs.iter().filter_map(|p| file_entry(p, p.display().to_string())).collect();
            record["status"] = "ok".into();
            record["inputs"] = serde_json::to_value(inputs).unwrap_or_default();
            record["seeds"] = serde_json::to_value(&info.seeds).unwrap_or_default();
            record["config"] = info.config.clone();
            record["summary"] = info.summary.clone();
        }
        Err(e) => {
            record["status"] = "failed".into();
            record["error"] = json!({ "kind": e.kind(), "message": e.to_string() });
        }
    }
    let tmp = out.join(format!(".run.json.{}", std::process::id()));
    std::fs::write(&tmp, serde_json::to_string_pretty(&record).map_err(std::io::Error::other)?)?;
    std::fs::rename(&tmp, out.join("run.json"))
}

/// Resolves the run directory: flag or env first, then a spec-file value.
pub(crate) fn resolve_out(cli_out: &Option<PathBuf>, command: &Command) -> Result<PathBuf, Error> {
    if let Some(out) = cli_out {
        return Ok(out.clone());
    }
    let spec = match command {
        Command::TrainFewshot(a) => a.spec.as_ref(),
        Command::TrainContrastive(a) => a.train.spec.as_ref(),
        Command::TrainCountry(a) => a.train.spec.as_ref(),
        _ => None,
    };
    if let Some(path) = spec {
        let v: Value = serde_json::from_str(&crate::error::read_text(path)?)?;
        if let Some(out) = v.get("out_dir").and_then(Value::as_str) {
            return Ok(PathBuf::from(out));
        }
    }
    Ok(PathBuf::from("runs").join(command.name()))
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli, argv: Vec<String>) -> i32 {
    let started = chrono::Utc::now().to_rfc3339();
    let name = cli.command.name();
    let out = match resolve_out(&cli.out, &cli.command).and_then(|o| {
        std::fs::create_dir_all(&o)?;
        Ok(o)
    }) {
        Ok(o) => o,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_json(e.kind(), &e.to_string(), code));
            return code;
        }
    };
    let ctx = Context { out: out.clone(), seed: cli.seed };
    let result = commands::dispatch(&ctx, cli.command);
    let code = match &result {
        Ok(_) => 0,
        Err(e) => exit_code(e),
    };
    if let Err(io) = write_run_json(&out, name, &argv, &started, result.as_ref()) {
        eprintln!("{}", error_json("Io", &format!("cannot write run.json: {io}"), EXIT_DATA));
        return if code == 0 { EXIT_DATA } else { code };
    }
    if let Err(e) = result {
        eprintln!("{}", error_json(e.kind(), &e.to_string(), code));
    }
    code
}

/// Parses `argv` and runs it. Help and version requests print to stdout and
/// return 0; malformed command lines return [`EXIT_USAGE`].
pub fn main_with_args(argv: Vec<String>) -> i32 {
    match Cli::try_parse_from(&argv) {
        Ok(cli) => run(cli, argv),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                0
            }
            _ => {
                let message = e.render().to_string();
                eprintln!("{}", error_json("Usage", message.trim(), EXIT_USAGE));
                EXIT_USAGE
            }
        },
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args().collect())
}
