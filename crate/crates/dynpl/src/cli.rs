//! Command-line orchestration. Each subcommand runs one pipeline stage and
//! writes a manifest (resolved arguments + sha256 of every input) next to its
//! primary output; `rerun --manifest <file>` replays a run bit-identically.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::cohort::{build_cohort, read_cohort_jsonl, write_cohort_jsonl, Outcome};
use crate::corpus::narrative::NARRATIVE_LEN;
use crate::corpus::tables::{load_notes_csv, load_tables, ColumnMap, IngestReport};
use crate::corpus::text::normalize_text;
use crate::corpus::vocab::{Vocabulary, DEFAULT_MIN_DOCS};
use crate::embed::{load_word2vec_text, save_word2vec_text, train_cbow, CbowConfig, EmbeddingMatrix};
use crate::error::{DynplError, Result};
use crate::explain::{
    build_problem_list, export_false_positives, narrative_tokens, render_report,
    write_false_positives, ReportFormat, StayPrediction, FALSE_POSITIVE_K, PROBLEM_LIST_K,
};
use crate::labels::{
    build_label_space, hex_string, LabelConfig, LabelSpace, PhecodeMapping, DEFAULT_MIN_COUNT,
};
use crate::metrics::{au_roc, MicroMacro, ScoredSet};
use crate::model::baselines::{baseline_cnn_max, baseline_conv_attn};
use crate::model::checkpoint::{Checkpoint, ModelKind, CHECKPOINT_VERSION};
use crate::model::logreg::{fit_logreg, LogRegConfig};
use crate::model::{predict, DynplParams, DEFAULT_FILTER_DIM};
use crate::numerics::Tensor2;
use crate::synth::{generate, read_truth, write_corpus, GenSpec};
use crate::train::{
    build_examples, evaluate_extraction, evaluate_outcome, partition_patients, run_cv, train,
    train_baseline, train_extraction_only, train_frozen, write_epoch_reports, BaselineKind,
    EpochReport, Example, TrainConfig,
};

pub const MANIFEST_VERSION: u32 = 1;

const DEFAULT_SEED: u64 = 1;
const DEFAULT_FOLDS: usize = 5;
const DEFAULT_EMBED_DIM: usize = 100;

/// Optional config file: the single source of defaults; explicit flags win.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch_size: Option<usize>,
    pub rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub threshold_p: Option<f64>,
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    pub folds: Option<usize>,
    pub filter_dim: Option<usize>,
    pub embed_dim: Option<usize>,
    pub max_len: Option<usize>,
    pub min_docs: Option<u32>,
    pub min_count: Option<u32>,
    pub problems: Option<String>,
    pub outcome: Option<String>,
    pub model: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| DynplError::Config(format!("{}: {e}", path.display())))
    }

    fn outcome(&self) -> Result<Option<Outcome>> {
        match &self.outcome {
            Some(s) => Ok(Some(s.parse().map_err(DynplError::Config)?)),
            None => Ok(None),
        }
    }

    fn model(&self) -> Result<Option<ModelSel>> {
        match &self.model {
            Some(s) => parse_model(s).map(Some).map_err(DynplError::Config),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSel {
    Dynpl,
    #[value(name = "cnn_max")]
    CnnMax,
    #[value(name = "conv_attn")]
    ConvAttn,
    #[value(name = "frozen_dynpl")]
    FrozenDynpl,
    #[value(name = "lr_oracle")]
    LrOracle,
}

impl ModelSel {
    fn as_str(self) -> &'static str {
        match self {
            ModelSel::Dynpl => "dynpl",
            ModelSel::CnnMax => "cnn_max",
            ModelSel::ConvAttn => "conv_attn",
            ModelSel::FrozenDynpl => "frozen_dynpl",
            ModelSel::LrOracle => "lr_oracle",
        }
    }
}

fn parse_model(s: &str) -> std::result::Result<ModelSel, String> {
    match s {
        "dynpl" => Ok(ModelSel::Dynpl),
        "cnn_max" => Ok(ModelSel::CnnMax),
        "conv_attn" => Ok(ModelSel::ConvAttn),
        "frozen_dynpl" => Ok(ModelSel::FrozenDynpl),
        "lr_oracle" => Ok(ModelSel::LrOracle),
        other => Err(format!("unknown model {other:?}")),
    }
}

fn parse_outcome(s: &str) -> std::result::Result<Outcome, String> {
    s.parse()
}

fn parse_problems(s: &str) -> std::result::Result<String, String> {
    if LabelConfig::selectors().contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!(
            "unknown problem set {s:?} (expected one of {})",
            LabelConfig::selectors().join(", ")
        ))
    }
}

#[derive(Debug, Parser)]
#[command(name = "dynpl", version, about = "Dynamic problem lists from clinical notes")]
pub struct Cli {
    /// Directory that default input/output paths are resolved against.
    #[arg(long, env = "DYNPL_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
    /// JSON config file supplying defaults; explicit flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic corpus with a known truth sidecar.
    Synth(SynthArgs),
    /// Build the cohort from the raw CSV tables.
    Ingest(IngestArgs),
    /// Build the token vocabulary from the notes table.
    Vocab(VocabArgs),
    /// Train word embeddings on the notes table.
    Embed(EmbedArgs),
    /// Build the problem label space from the cohort.
    Labels(LabelsArgs),
    /// Train a model on one cross-validation fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out fold.
    Eval(EvalArgs),
    /// Render per-stay problem-list reports from a checkpoint.
    Explain(ExplainArgs),
    /// Fit the logistic-regression label oracle.
    Oracle(OracleArgs),
    /// Export top-scoring false-positive problem extractions.
    Fps(FpsArgs),
    /// Run full cross-validation and write the aggregate report.
    Report(ReportArgs),
    /// Replay a previous run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stays: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub n_problems: Option<usize>,
    #[arg(long)]
    pub emission: Option<f64>,
    #[arg(long)]
    pub risk_problems: Option<usize>,
    #[arg(long)]
    pub risk_weight: Option<f64>,
    #[arg(long)]
    pub bias: Option<f64>,
    /// Replace the probabilistic outcome rule with its decision boundary.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, value_parser = parse_outcome)]
    pub outcome: Option<Outcome>,
    /// Plant an outcome-only confounder token with this weight.
    #[arg(long)]
    pub confounder: Option<f64>,
    /// Fraction of positive problem labels flipped to 0 in the codes table.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for SynthArgs {
    fn default() -> Self {
        SynthArgs {
            seed: None,
            stays: None,
            vocab_size: None,
            n_problems: None,
            emission: None,
            risk_problems: None,
            risk_weight: None,
            bias: None,
            deterministic: false,
            outcome: None,
            confounder: None,
            noise: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestArgs {
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub stays: Option<PathBuf>,
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// Column schema: "default", "mimic", or a JSON mapping file.
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabArgs {
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long)]
    pub min_docs: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedArgs {
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelsArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long, value_parser = parse_problems)]
    pub problems: Option<String>,
    #[arg(long)]
    pub min_count: Option<u32>,
    /// Optional ICD9-to-phecode mapping CSV.
    #[arg(long)]
    pub phecodes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Inputs shared by every stage that needs assembled examples.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldArgs {
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub stays: Option<PathBuf>,
    #[arg(long)]
    pub codes: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long)]
    pub phecodes: Option<PathBuf>,
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long, value_parser = parse_outcome)]
    pub outcome: Option<Outcome>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelSel>,
    #[command(flatten)]
    #[serde(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    /// Pretrained word2vec-format embeddings; random init when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub filter_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub threshold_p: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub reports: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    /// Render only this stay (searched in the whole cohort).
    #[arg(long)]
    pub stay: Option<String>,
    /// Cap on the number of test-fold stays rendered.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<FormatSel>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatSel {
    #[default]
    Md,
    Html,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    /// Truth sidecar; when given, the oracle uses its ground-truth label
    /// vectors instead of the (possibly noisy) coded labels.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSel {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FpsArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    /// Which examples to scan for false positives.
    #[arg(long, value_enum)]
    pub scan: Option<SplitSel>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportArgs {
    /// dynpl or frozen_dynpl (cross-validation refits per fold).
    #[arg(long, value_enum)]
    pub model: Option<ModelSel>,
    #[command(flatten)]
    #[serde(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub filter_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub threshold_p: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Replay record: fully resolved arguments plus hashes of every input read.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub subcommand: String,
    pub args: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| DynplError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

fn write_manifest<A: Serialize>(
    path: &Path,
    subcommand: &str,
    args: &A,
    inputs: &[&Path],
) -> Result<()> {
    let mut hashed = BTreeMap::new();
    for p in inputs {
        hashed.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        subcommand: subcommand.to_string(),
        args: serde_json::to_value(args)?,
        inputs: hashed,
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("wrote manifest {}", path.display());
    Ok(())
}

fn in_dir(dir: &Path, flag: &Option<PathBuf>, name: &str) -> PathBuf {
    match flag {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => dir.join(p),
        None => dir.join(name),
    }
}

fn pick<T: Clone>(flag: &Option<T>, cfg: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| cfg.clone()).unwrap_or(default)
}

fn column_map(sel: Option<&str>) -> Result<ColumnMap> {
    match sel {
        None | Some("default") => Ok(ColumnMap::default()),
        Some("mimic") => Ok(ColumnMap::mimic()),
        Some(path) => ColumnMap::load(Path::new(path)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().to_string(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init()
        .ok();
}

pub fn execute(cli: Cli) -> Result<()> {
    let dir = cli.data_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    // Resolved paths end up in manifests; make them absolute so a rerun
    // reproduces the same files regardless of the invoking directory.
    let dir = if dir.is_absolute() {
        dir
    } else {
        std::env::current_dir()?.join(dir)
    };
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    dispatch(cli.cmd, &dir, &cfg)
}

fn dispatch(cmd: Cmd, dir: &Path, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => run_synth(a, dir, cfg),
        Cmd::Ingest(a) => run_ingest(a, dir),
        Cmd::Vocab(a) => run_vocab(a, dir, cfg),
        Cmd::Embed(a) => run_embed(a, dir, cfg),
        Cmd::Labels(a) => run_labels(a, dir, cfg),
        Cmd::Train(a) => run_train(a, dir, cfg),
        Cmd::Eval(a) => run_eval(a, dir, cfg),
        Cmd::Explain(a) => run_explain(a, dir, cfg),
        Cmd::Oracle(a) => run_oracle(a, dir, cfg),
        Cmd::Fps(a) => run_fps(a, dir, cfg),
        Cmd::Report(a) => run_report(a, dir, cfg),
        Cmd::Rerun(a) => run_rerun(a, dir),
    }
}

fn run_rerun(a: RerunArgs, dir: &Path) -> Result<()> {
    let raw = std::fs::read_to_string(&a.manifest)?;
    let manifest: Manifest = serde_json::from_str(&raw)
        .map_err(|e| DynplError::Config(format!("{}: {e}", a.manifest.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DynplError::Config(format!(
            "manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    log::info!("replaying {} from {}", manifest.subcommand, a.manifest.display());
    let args = manifest.args;
    let cfg = RunConfig::default();
    let parse = |e: serde_json::Error| DynplError::Config(format!("manifest args: {e}"));
    // arguments in a manifest are already fully resolved
    match manifest.subcommand.as_str() {
        "synth" => run_synth(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "ingest" => run_ingest(serde_json::from_value(args).map_err(parse)?, dir),
        "vocab" => run_vocab(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "embed" => run_embed(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "labels" => run_labels(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "train" => run_train(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "eval" => run_eval(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "explain" => run_explain(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "oracle" => run_oracle(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "fps" => run_fps(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        "report" => run_report(serde_json::from_value(args).map_err(parse)?, dir, &cfg),
        other => Err(DynplError::Config(format!("unknown subcommand {other:?} in manifest"))),
    }
}

fn run_synth(mut a: SynthArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    let defaults = GenSpec::default();
    a.out = Some(in_dir(dir, &a.out, ""));
    a.seed = Some(pick(&a.seed, &cfg.seed, defaults.seed));
    a.stays = Some(a.stays.unwrap_or(defaults.n_stays));
    a.vocab_size = Some(a.vocab_size.unwrap_or(defaults.vocab_size));
    a.n_problems = Some(a.n_problems.unwrap_or(defaults.n_problems));
    a.emission = Some(a.emission.unwrap_or(defaults.emission_prob));
    a.risk_problems = Some(a.risk_problems.unwrap_or(defaults.risk_problems));
    a.risk_weight = Some(a.risk_weight.unwrap_or(defaults.risk_weight));
    a.bias = Some(a.bias.unwrap_or(defaults.outcome_bias));
    a.outcome = Some(pick(&a.outcome, &cfg.outcome()?, defaults.outcome));
    a.noise = Some(a.noise.unwrap_or(defaults.label_noise));

    let spec = GenSpec {
        seed: a.seed.unwrap(),
        n_stays: a.stays.unwrap(),
        vocab_size: a.vocab_size.unwrap(),
        n_problems: a.n_problems.unwrap(),
        emission_prob: a.emission.unwrap(),
        risk_problems: a.risk_problems.unwrap(),
        risk_weight: a.risk_weight.unwrap(),
        outcome_bias: a.bias.unwrap(),
        deterministic_outcome: a.deterministic,
        outcome: a.outcome.unwrap(),
        confounder_weight: a.confounder,
        label_noise: a.noise.unwrap(),
        ..defaults
    };
    let out = a.out.clone().unwrap();
    std::fs::create_dir_all(&out)?;
    let output = generate(&spec)?;
    write_corpus(&output, &out)?;
    log::info!(
        "synth: {} stays, {} problems -> {}",
        output.records.len(),
        spec.n_problems,
        out.display()
    );
    write_manifest(&out.join("synth.manifest.json"), "synth", &a, &[])
}

fn run_ingest(mut a: IngestArgs, dir: &Path) -> Result<()> {
    a.notes = Some(in_dir(dir, &a.notes, "notes.csv"));
    a.stays = Some(in_dir(dir, &a.stays, "stays.csv"));
    a.codes = Some(in_dir(dir, &a.codes, "codes.csv"));
    a.columns = Some(a.columns.unwrap_or_else(|| "default".into()));
    a.out = Some(in_dir(dir, &a.out, "cohort.jsonl"));
    a.report = Some(in_dir(dir, &a.report, "cohort_report.json"));

    let map = column_map(a.columns.as_deref())?;
    let (tables, ingest_report) = load_tables(
        a.notes.as_ref().unwrap(),
        a.stays.as_ref().unwrap(),
        a.codes.as_ref().unwrap(),
        &map,
    )?;
    let (records, cohort_report) = build_cohort(&tables)?;
    let out = a.out.clone().unwrap();
    write_cohort_jsonl(&out, &records)?;
    write_json(
        a.report.as_ref().unwrap(),
        &serde_json::json!({ "ingest": ingest_report, "cohort": cohort_report }),
    )?;
    log::info!("ingest: {} stays included -> {}", records.len(), out.display());
    write_manifest(
        &manifest_path(&out),
        "ingest",
        &a,
        &[
            a.notes.as_deref().unwrap(),
            a.stays.as_deref().unwrap(),
            a.codes.as_deref().unwrap(),
        ],
    )
}

fn manifest_path(output: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", output.display()))
}

fn load_note_tokens(notes: &Path, columns: Option<&str>) -> Result<Vec<Vec<String>>> {
    let map = column_map(columns)?;
    let mut report = IngestReport::default();
    let rows = load_notes_csv(notes, &map, &mut report)?;
    Ok(rows.iter().map(|r| normalize_text(&r.text)).collect())
}

fn run_vocab(mut a: VocabArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.notes = Some(in_dir(dir, &a.notes, "notes.csv"));
    a.columns = Some(a.columns.unwrap_or_else(|| "default".into()));
    a.min_docs = Some(pick(&a.min_docs, &cfg.min_docs, DEFAULT_MIN_DOCS));
    a.out = Some(in_dir(dir, &a.out, "vocab.tsv"));

    let tokens = load_note_tokens(a.notes.as_ref().unwrap(), a.columns.as_deref())?;
    let vocab = Vocabulary::build(&tokens, a.min_docs.unwrap())?;
    let out = a.out.clone().unwrap();
    vocab.save(&out)?;
    log::info!("vocab: {} tokens -> {}", vocab.len(), out.display());
    write_manifest(&manifest_path(&out), "vocab", &a, &[a.notes.as_deref().unwrap()])
}

fn run_embed(mut a: EmbedArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.notes = Some(in_dir(dir, &a.notes, "notes.csv"));
    a.columns = Some(a.columns.unwrap_or_else(|| "default".into()));
    a.vocab = Some(in_dir(dir, &a.vocab, "vocab.tsv"));
    let defaults = CbowConfig::default();
    a.dim = Some(pick(&a.dim, &cfg.embed_dim, defaults.dim));
    a.window = Some(a.window.unwrap_or(defaults.window));
    a.negatives = Some(a.negatives.unwrap_or(defaults.negatives));
    a.epochs = Some(a.epochs.unwrap_or(defaults.epochs));
    a.seed = Some(pick(&a.seed, &cfg.seed, defaults.seed));
    a.out = Some(in_dir(dir, &a.out, "embeddings.txt"));

    let vocab = Vocabulary::load(a.vocab.as_ref().unwrap())?;
    let tokens = load_note_tokens(a.notes.as_ref().unwrap(), a.columns.as_deref())?;
    let ids: Vec<Vec<u32>> = tokens
        .iter()
        .map(|note| note.iter().map(|t| vocab.id(t)).collect())
        .collect();
    let config = CbowConfig {
        dim: a.dim.unwrap(),
        window: a.window.unwrap(),
        negatives: a.negatives.unwrap(),
        epochs: a.epochs.unwrap(),
        seed: a.seed.unwrap(),
        ..defaults
    };
    let emb = train_cbow(&ids, vocab.len(), &config)?;
    let out = a.out.clone().unwrap();
    save_word2vec_text(&out, &vocab, &emb)?;
    log::info!("embed: {}x{} -> {}", emb.vocab_size(), emb.dim(), out.display());
    write_manifest(
        &manifest_path(&out),
        "embed",
        &a,
        &[a.notes.as_deref().unwrap(), a.vocab.as_deref().unwrap()],
    )
}

fn run_labels(mut a: LabelsArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.cohort = Some(in_dir(dir, &a.cohort, "cohort.jsonl"));
    a.problems = Some(
        a.problems
            .or_else(|| cfg.problems.clone())
            .unwrap_or_else(|| "R-ICD".into()),
    );
    a.min_count = Some(pick(&a.min_count, &cfg.min_count, DEFAULT_MIN_COUNT));
    a.out = Some(in_dir(dir, &a.out, "label_space.json"));

    let records = read_cohort_jsonl(a.cohort.as_ref().unwrap())?;
    let config = LabelConfig::from_selector(a.problems.as_ref().unwrap(), a.min_count.unwrap())?;
    let phecodes = match &a.phecodes {
        Some(p) => PhecodeMapping::load(p)?,
        None => PhecodeMapping::default(),
    };
    let space = build_label_space(&records, &config, &phecodes, &HashMap::new())?;
    let out = a.out.clone().unwrap();
    space.save(&out)?;
    log::info!("labels: {} problems ({}) -> {}", space.len(), a.problems.as_ref().unwrap(), out.display());
    let mut inputs: Vec<&Path> = vec![a.cohort.as_deref().unwrap()];
    if let Some(p) = &a.phecodes {
        inputs.push(p);
    }
    write_manifest(&manifest_path(&out), "labels", &a, &inputs)
}

/// Everything a model stage needs: raw tables, cohort, vocab, label space,
/// and the assembled per-stay examples.
struct World {
    vocab: Vocabulary,
    space: LabelSpace,
    examples: Vec<Example>,
}

impl WorldArgs {
    fn resolve(&mut self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        self.notes = Some(in_dir(dir, &self.notes, "notes.csv"));
        self.stays = Some(in_dir(dir, &self.stays, "stays.csv"));
        self.codes = Some(in_dir(dir, &self.codes, "codes.csv"));
        self.cohort = Some(in_dir(dir, &self.cohort, "cohort.jsonl"));
        self.vocab = Some(in_dir(dir, &self.vocab, "vocab.tsv"));
        self.space = Some(in_dir(dir, &self.space, "label_space.json"));
        self.columns = Some(self.columns.take().unwrap_or_else(|| "default".into()));
        self.outcome = Some(pick(&self.outcome, &cfg.outcome()?, Outcome::Mortality30));
        self.max_len = Some(pick(&self.max_len, &cfg.max_len, NARRATIVE_LEN));
        Ok(())
    }

    fn load(&self) -> Result<World> {
        let map = column_map(self.columns.as_deref())?;
        let (tables, _) = load_tables(
            self.notes.as_ref().unwrap(),
            self.stays.as_ref().unwrap(),
            self.codes.as_ref().unwrap(),
            &map,
        )?;
        let records = read_cohort_jsonl(self.cohort.as_ref().unwrap())?;
        let vocab = Vocabulary::load(self.vocab.as_ref().unwrap())?;
        let space = LabelSpace::load(self.space.as_ref().unwrap())?;
        let phecodes = match &self.phecodes {
            Some(p) => PhecodeMapping::load(p)?,
            None => PhecodeMapping::default(),
        };
        let examples = build_examples(
            &tables,
            &records,
            &vocab,
            &space,
            &phecodes,
            self.outcome.unwrap(),
            self.max_len.unwrap(),
        )?;
        log::info!(
            "world: {} examples, {} labels, vocab {}",
            examples.len(),
            space.len(),
            vocab.len()
        );
        Ok(World { vocab, space, examples })
    }

    fn input_paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = vec![
            self.notes.as_deref().unwrap(),
            self.stays.as_deref().unwrap(),
            self.codes.as_deref().unwrap(),
            self.cohort.as_deref().unwrap(),
            self.vocab.as_deref().unwrap(),
            self.space.as_deref().unwrap(),
        ];
        if let Some(p) = &self.phecodes {
            out.push(p);
        }
        out
    }
}

impl SplitArgs {
    fn resolve(&mut self, cfg: &RunConfig) {
        self.seed = Some(pick(&self.seed, &cfg.seed, DEFAULT_SEED));
        self.fold = Some(pick(&self.fold, &cfg.fold, 0));
        self.folds = Some(pick(&self.folds, &cfg.folds, DEFAULT_FOLDS));
    }
}

fn split_sets(
    examples: &[Example],
    folds: usize,
    seed: u64,
    fold: usize,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let patients: Vec<String> = examples.iter().map(|e| e.patient_id.clone()).collect();
    let splits = partition_patients(&patients, folds, seed)?;
    let split = splits.get(fold).ok_or_else(|| {
        DynplError::InvalidInput(format!("fold {fold} out of range for {folds} folds"))
    })?;
    let select = |patients: &[String]| {
        let set: HashSet<&String> = patients.iter().collect();
        examples
            .iter()
            .filter(|e| set.contains(&e.patient_id))
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok((
        select(&split.train_patients),
        select(&split.val_patients),
        select(&split.test_patients),
    ))
}

fn load_embedding(
    path: &Option<PathBuf>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    match path {
        Some(p) => load_word2vec_text(p, vocab, seed),
        None => {
            // same uniform init the word2vec loader uses for unseen rows;
            // the pad row stays zero
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x454d_4245_44);
            let mut matrix = Tensor2::zeros(vocab.len(), dim);
            let bound = 0.5 / dim as f64;
            for r in 1..vocab.len() {
                for c in 0..dim {
                    *matrix.at_mut(r, c) = rng.gen_range(-bound..bound);
                }
            }
            Ok(EmbeddingMatrix { matrix })
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsOut {
    model: String,
    fold: usize,
    test_examples: usize,
    extraction: Option<MicroMacro>,
    outcome_au_roc: Option<f64>,
}

fn test_metrics(model: &ModelKind, test_set: &[Example], fold: usize) -> Result<MetricsOut> {
    let outcome_labels: Vec<u8> = test_set.iter().map(|e| e.outcome as u8).collect();
    let (extraction, outcome_au_roc) = match model {
        ModelKind::Dynpl(p) => (
            Some(evaluate_extraction(p, test_set)?),
            evaluate_outcome(p, test_set)?,
        ),
        ModelKind::CnnMax(p) => {
            let probs: Vec<f64> = test_set
                .iter()
                .map(|e| baseline_cnn_max(&e.narrative, p))
                .collect::<Result<_>>()?;
            (None, au_roc(&ScoredSet::new(probs, outcome_labels)))
        }
        ModelKind::ConvAttn(p) => {
            let probs: Vec<f64> = test_set
                .iter()
                .map(|e| Ok(baseline_conv_attn(&e.narrative, p)?.0))
                .collect::<Result<Vec<f64>>>()?;
            (None, au_roc(&ScoredSet::new(probs, outcome_labels)))
        }
        ModelKind::LogReg(m) => {
            let probs: Vec<f64> = test_set.iter().map(|e| m.predict(&e.labels)).collect();
            (None, au_roc(&ScoredSet::new(probs, outcome_labels)))
        }
    };
    Ok(MetricsOut {
        model: model.name().to_string(),
        fold,
        test_examples: test_set.len(),
        extraction,
        outcome_au_roc,
    })
}

fn run_train(mut a: TrainArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.world.resolve(dir, cfg)?;
    a.split.resolve(cfg);
    a.model = Some(pick(&a.model, &cfg.model()?, ModelSel::Dynpl));
    a.embeddings = a.embeddings.or_else(|| {
        let p = dir.join("embeddings.txt");
        p.exists().then_some(p)
    });
    a.embed_dim = Some(pick(&a.embed_dim, &cfg.embed_dim, DEFAULT_EMBED_DIM));
    a.filter_dim = Some(pick(&a.filter_dim, &cfg.filter_dim, DEFAULT_FILTER_DIM));
    let tc_defaults = TrainConfig::default();
    a.batch_size = Some(pick(&a.batch_size, &cfg.batch_size, tc_defaults.batch_size));
    a.rate = Some(pick(&a.rate, &cfg.rate, tc_defaults.rate));
    a.max_epochs = Some(pick(&a.max_epochs, &cfg.max_epochs, tc_defaults.max_epochs));
    a.patience = Some(pick(&a.patience, &cfg.patience, tc_defaults.patience));
    a.threshold_p = Some(pick(&a.threshold_p, &cfg.threshold_p, tc_defaults.threshold_p));
    a.out = Some(in_dir(dir, &a.out, "checkpoint.json"));
    a.reports = Some(in_dir(dir, &a.reports, "reports.jsonl"));
    a.metrics = Some(in_dir(dir, &a.metrics, "metrics.json"));

    let tc = TrainConfig {
        batch_size: a.batch_size.unwrap(),
        rate: a.rate.unwrap(),
        max_epochs: a.max_epochs.unwrap(),
        patience: a.patience.unwrap(),
        threshold_p: a.threshold_p.unwrap(),
        seed: a.split.seed.unwrap(),
        fold: a.split.fold.unwrap(),
    };
    let world = a.world.load()?;
    let (train_set, val_set, test_set) =
        split_sets(&world.examples, a.split.folds.unwrap(), tc.seed, tc.fold)?;
    log::info!(
        "fold {}: train {} / val {} / test {}",
        tc.fold,
        train_set.len(),
        val_set.len(),
        test_set.len()
    );
    let (model, reports) = fit_model(
        a.model.unwrap(),
        &a.embeddings,
        a.embed_dim.unwrap(),
        a.filter_dim.unwrap(),
        &world,
        &train_set,
        &val_set,
        &tc,
    )?;

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        label_space_hash: world.space.content_hash(),
        vocab_hash: world.vocab.content_hash(),
        config: serde_json::to_value(&a)?,
        model,
    };
    checkpoint.save(a.out.as_ref().unwrap())?;
    write_epoch_reports(a.reports.as_ref().unwrap(), &reports)?;
    let metrics = test_metrics(&checkpoint.model, &test_set, tc.fold)?;
    write_json(a.metrics.as_ref().unwrap(), &metrics)?;
    log::info!(
        "train {}: outcome AU-ROC {:?} -> {}",
        checkpoint.model.name(),
        metrics.outcome_au_roc,
        a.out.as_ref().unwrap().display()
    );
    let mut inputs = a.world.input_paths();
    if let Some(p) = &a.embeddings {
        inputs.push(p);
    }
    write_manifest(&manifest_path(a.out.as_ref().unwrap()), "train", &a, &inputs)
}

#[allow(clippy::too_many_arguments)]
fn fit_model(
    sel: ModelSel,
    embeddings: &Option<PathBuf>,
    embed_dim: usize,
    filter_dim: usize,
    world: &World,
    train_set: &[Example],
    val_set: &[Example],
    tc: &TrainConfig,
) -> Result<(ModelKind, Vec<EpochReport>)> {
    let label_count = world.space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    match sel {
        ModelSel::Dynpl => {
            let emb = load_embedding(embeddings, &world.vocab, embed_dim, tc.seed)?;
            let init = DynplParams::init(emb.matrix, label_count, filter_dim, &mut rng);
            let run = train(init, train_set, val_set, tc)?;
            if run.diverged {
                log::warn!("training diverged; keeping last finite parameters");
            }
            Ok((ModelKind::Dynpl(run.params), run.reports))
        }
        ModelSel::FrozenDynpl => {
            let emb = load_embedding(embeddings, &world.vocab, embed_dim, tc.seed)?;
            let init = DynplParams::init(emb.matrix, label_count, filter_dim, &mut rng);
            let pre = train_extraction_only(init, train_set, val_set, tc)?;
            let head = train_frozen(&pre.params, train_set, val_set, tc)?;
            let mut reports = pre.reports;
            reports.extend(head.reports);
            Ok((ModelKind::Dynpl(head.params), reports))
        }
        ModelSel::CnnMax | ModelSel::ConvAttn => {
            let emb = load_embedding(embeddings, &world.vocab, embed_dim, tc.seed)?;
            let kind = if sel == ModelSel::CnnMax {
                BaselineKind::CnnMax
            } else {
                BaselineKind::ConvAttn
            };
            let (model, reports) =
                train_baseline(kind, emb.matrix, filter_dim, train_set, val_set, tc)?;
            Ok((model, reports))
        }
        ModelSel::LrOracle => {
            let features: Vec<Vec<f64>> = train_set.iter().map(|e| e.labels.clone()).collect();
            let targets: Vec<f64> = train_set.iter().map(|e| e.outcome).collect();
            let model = fit_logreg(&features, &targets, &LogRegConfig::default())?;
            Ok((ModelKind::LogReg(model), Vec::new()))
        }
    }
}

fn run_eval(mut a: EvalArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.world.resolve(dir, cfg)?;
    a.split.resolve(cfg);
    a.checkpoint = Some(in_dir(dir, &a.checkpoint, "checkpoint.json"));
    a.out = Some(in_dir(dir, &a.out, "metrics.json"));

    let world = a.world.load()?;
    let checkpoint = Checkpoint::load(a.checkpoint.as_ref().unwrap())?;
    checkpoint.verify(&world.space.content_hash(), &world.vocab.content_hash())?;
    let fold = a.split.fold.unwrap();
    let (_, _, test_set) =
        split_sets(&world.examples, a.split.folds.unwrap(), a.split.seed.unwrap(), fold)?;
    let metrics = test_metrics(&checkpoint.model, &test_set, fold)?;
    write_json(a.out.as_ref().unwrap(), &metrics)?;
    log::info!(
        "eval {}: outcome AU-ROC {:?}",
        checkpoint.model.name(),
        metrics.outcome_au_roc
    );
    let mut inputs = a.world.input_paths();
    inputs.push(a.checkpoint.as_deref().unwrap());
    write_manifest(&manifest_path(a.out.as_ref().unwrap()), "eval", &a, &inputs)
}

fn run_oracle(mut a: OracleArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.world.resolve(dir, cfg)?;
    a.split.resolve(cfg);
    a.out = Some(in_dir(dir, &a.out, "oracle_checkpoint.json"));
    a.metrics = Some(in_dir(dir, &a.metrics, "oracle_metrics.json"));

    let world = a.world.load()?;
    let fold = a.split.fold.unwrap();
    let (train_set, _, test_set) =
        split_sets(&world.examples, a.split.folds.unwrap(), a.split.seed.unwrap(), fold)?;

    // when a truth sidecar is given, use its noise-free label vectors
    let truth_labels: Option<HashMap<String, Vec<f64>>> = match &a.truth {
        Some(p) => {
            let (_, records) = read_truth(p)?;
            Some(
                records
                    .into_iter()
                    .map(|r| {
                        let labels = r.true_problems.iter().map(|&b| b as f64).collect();
                        (r.stay_id, labels)
                    })
                    .collect(),
            )
        }
        None => None,
    };
    let features = |set: &[Example]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|e| match &truth_labels {
                Some(map) => map.get(&e.stay_id).cloned().ok_or_else(|| {
                    DynplError::Data(format!("stay {} missing from truth sidecar", e.stay_id))
                }),
                None => Ok(e.labels.clone()),
            })
            .collect()
    };
    let targets: Vec<f64> = train_set.iter().map(|e| e.outcome).collect();
    let model = fit_logreg(&features(&train_set)?, &targets, &LogRegConfig::default())?;

    let test_features = features(&test_set)?;
    let probs: Vec<f64> = test_features.iter().map(|x| model.predict(x)).collect();
    let labels: Vec<u8> = test_set.iter().map(|e| e.outcome as u8).collect();
    let metrics = MetricsOut {
        model: "lr_oracle".into(),
        fold,
        test_examples: test_set.len(),
        extraction: None,
        outcome_au_roc: au_roc(&ScoredSet::new(probs, labels)),
    };
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        label_space_hash: world.space.content_hash(),
        vocab_hash: world.vocab.content_hash(),
        config: serde_json::to_value(&a)?,
        model: ModelKind::LogReg(model),
    };
    checkpoint.save(a.out.as_ref().unwrap())?;
    write_json(a.metrics.as_ref().unwrap(), &metrics)?;
    log::info!("oracle: outcome AU-ROC {:?}", metrics.outcome_au_roc);
    let mut inputs = a.world.input_paths();
    if let Some(p) = &a.truth {
        inputs.push(p);
    }
    write_manifest(&manifest_path(a.out.as_ref().unwrap()), "oracle", &a, &inputs)
}

fn run_explain(mut a: ExplainArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.world.resolve(dir, cfg)?;
    a.split.resolve(cfg);
    a.checkpoint = Some(in_dir(dir, &a.checkpoint, "checkpoint.json"));
    a.format = Some(a.format.unwrap_or_default());
    a.out_dir = Some(in_dir(dir, &a.out_dir, "reports"));

    let world = a.world.load()?;
    let checkpoint = Checkpoint::load(a.checkpoint.as_ref().unwrap())?;
    checkpoint.verify(&world.space.content_hash(), &world.vocab.content_hash())?;
    let params = checkpoint.dynpl()?;

    let selected: Vec<&Example> = match &a.stay {
        Some(stay) => {
            let found: Vec<&Example> =
                world.examples.iter().filter(|e| &e.stay_id == stay).collect();
            if found.is_empty() {
                return Err(DynplError::Data(format!("stay {stay} not in cohort")));
            }
            found
        }
        None => {
            let (_, _, test_set) = split_sets(
                &world.examples,
                a.split.folds.unwrap(),
                a.split.seed.unwrap(),
                a.split.fold.unwrap(),
            )?;
            let limit = a.limit.unwrap_or(test_set.len());
            let ids: HashSet<String> =
                test_set.iter().take(limit).map(|e| e.stay_id.clone()).collect();
            world.examples.iter().filter(|e| ids.contains(&e.stay_id)).collect()
        }
    };

    let out_dir = a.out_dir.clone().unwrap();
    std::fs::create_dir_all(&out_dir)?;
    let (format, ext) = match a.format.unwrap() {
        FormatSel::Md => (ReportFormat::Markdown, "md"),
        FormatSel::Html => (ReportFormat::Html, "html"),
    };
    for ex in &selected {
        let bundle = predict(&ex.narrative, params)?;
        let tokens = narrative_tokens(&ex.narrative, &world.vocab);
        let entries =
            build_problem_list(&bundle, &tokens, &world.space, &params.outcome_w, PROBLEM_LIST_K);
        let text = render_report(&entries, &ex.stay_id, format);
        std::fs::write(out_dir.join(format!("{}.{ext}", ex.stay_id)), text)?;
    }
    log::info!("explain: {} reports -> {}", selected.len(), out_dir.display());
    let mut inputs = a.world.input_paths();
    inputs.push(a.checkpoint.as_deref().unwrap());
    write_manifest(&out_dir.join("explain.manifest.json"), "explain", &a, &inputs)
}

fn run_fps(mut a: FpsArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.world.resolve(dir, cfg)?;
    a.split.resolve(cfg);
    a.checkpoint = Some(in_dir(dir, &a.checkpoint, "checkpoint.json"));
    a.scan = Some(a.scan.unwrap_or_default());
    a.k = Some(a.k.unwrap_or(FALSE_POSITIVE_K));
    a.out = Some(in_dir(dir, &a.out, "false_positives.jsonl"));

    let world = a.world.load()?;
    let checkpoint = Checkpoint::load(a.checkpoint.as_ref().unwrap())?;
    checkpoint.verify(&world.space.content_hash(), &world.vocab.content_hash())?;
    let params = checkpoint.dynpl()?;

    let (train_set, _, test_set) = split_sets(
        &world.examples,
        a.split.folds.unwrap(),
        a.split.seed.unwrap(),
        a.split.fold.unwrap(),
    )?;
    let scan: Vec<&Example> = match a.scan.unwrap() {
        SplitSel::All => world.examples.iter().collect(),
        SplitSel::Train => train_set.iter().collect(),
        SplitSel::Test => test_set.iter().collect(),
    };
    let stays: Vec<StayPrediction> = scan
        .iter()
        .map(|ex| {
            Ok(StayPrediction {
                stay_id: ex.stay_id.clone(),
                bundle: predict(&ex.narrative, params)?,
                labels: ex.labels.clone(),
                tokens: narrative_tokens(&ex.narrative, &world.vocab),
            })
        })
        .collect::<Result<_>>()?;
    let fps = export_false_positives(&stays, &world.space, a.k.unwrap());
    let out = a.out.clone().unwrap();
    write_false_positives(&out, &fps)?;
    log::info!("fps: {} false positives -> {}", fps.len(), out.display());
    let mut inputs = a.world.input_paths();
    inputs.push(a.checkpoint.as_deref().unwrap());
    write_manifest(&manifest_path(&out), "fps", &a, &inputs)
}

fn run_report(mut a: ReportArgs, dir: &Path, cfg: &RunConfig) -> Result<()> {
    a.world.resolve(dir, cfg)?;
    a.model = Some(pick(&a.model, &cfg.model()?, ModelSel::Dynpl));
    a.seed = Some(pick(&a.seed, &cfg.seed, DEFAULT_SEED));
    a.folds = Some(pick(&a.folds, &cfg.folds, DEFAULT_FOLDS));
    a.embeddings = a.embeddings.or_else(|| {
        let p = dir.join("embeddings.txt");
        p.exists().then_some(p)
    });
    a.embed_dim = Some(pick(&a.embed_dim, &cfg.embed_dim, DEFAULT_EMBED_DIM));
    a.filter_dim = Some(pick(&a.filter_dim, &cfg.filter_dim, DEFAULT_FILTER_DIM));
    let tc_defaults = TrainConfig::default();
    a.batch_size = Some(pick(&a.batch_size, &cfg.batch_size, tc_defaults.batch_size));
    a.rate = Some(pick(&a.rate, &cfg.rate, tc_defaults.rate));
    a.max_epochs = Some(pick(&a.max_epochs, &cfg.max_epochs, tc_defaults.max_epochs));
    a.patience = Some(pick(&a.patience, &cfg.patience, tc_defaults.patience));
    a.threshold_p = Some(pick(&a.threshold_p, &cfg.threshold_p, tc_defaults.threshold_p));
    a.out = Some(in_dir(dir, &a.out, "cv_report.json"));

    let sel = a.model.unwrap();
    if !matches!(sel, ModelSel::Dynpl | ModelSel::FrozenDynpl) {
        return Err(DynplError::InvalidInput(format!(
            "report refits per fold and supports dynpl or frozen_dynpl, not {}",
            sel.as_str()
        )));
    }
    let world = a.world.load()?;
    let seed = a.seed.unwrap();
    let folds = a.folds.unwrap();
    let report = run_cv(&world.examples, folds, seed, |fold, train_set, val_set| {
        let tc = TrainConfig {
            batch_size: a.batch_size.unwrap(),
            rate: a.rate.unwrap(),
            max_epochs: a.max_epochs.unwrap(),
            patience: a.patience.unwrap(),
            threshold_p: a.threshold_p.unwrap(),
            seed,
            fold,
        };
        log::info!("cv fold {fold}: train {} / val {}", train_set.len(), val_set.len());
        let (model, _) = fit_model(
            sel,
            &a.embeddings,
            a.embed_dim.unwrap(),
            a.filter_dim.unwrap(),
            &world,
            train_set,
            val_set,
            &tc,
        )?;
        match model {
            ModelKind::Dynpl(p) => Ok(p),
            _ => unreachable!("report only fits dynpl-family models"),
        }
    })?;
    let out = a.out.clone().unwrap();
    write_json(&out, &report)?;
    log::info!("report: {} folds aggregated -> {}", folds, out.display());
    let mut inputs = a.world.input_paths();
    if let Some(p) = &a.embeddings {
        inputs.push(p);
    }
    write_manifest(&manifest_path(&out), "report", &a, &inputs)
}
