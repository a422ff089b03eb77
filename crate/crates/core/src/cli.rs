//! The `m2d` command line: corpus generation, training, evaluation sweeps,
//! export of truncated models and latency benchmarks.
//!
//! Exit codes are 0 on success, 1 when a command fails while running and 2
//! for usage errors (bad flags, inconsistent options, invalid configuration).

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::data::{self, SyntheticCorpusSpec};
use crate::elastic::{self, BenchConfig, InstantClock, TruncationSpec};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::eval;
use crate::rng::DEFAULT_SEED;
use crate::trainer::{self, DimMode, Objective, TrainConfig};
use crate::Error;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "m2d", version, about = "Train and slice two-dimensional matryoshka sentence encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a clustered synthetic corpus (train.jsonl, eval.jsonl).
    GenData(GenDataArgs),
    /// Train an encoder and write a checkpoint plus a step log.
    Train(TrainArgs),
    /// Spearman correlation over a (layer, dim) grid, as CSV.
    Eval(EvalArgs),
    /// Keep the first n layers and advertise a d-dimensional embedding.
    Export(ExportArgs),
    /// Median forward latency per early-exit layer, as CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON corpus spec; individual flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    vocab_per_cluster: Option<usize>,
    #[arg(long)]
    pairs_per_cluster: Option<usize>,
    #[arg(long)]
    eval_pairs_per_cluster: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    #[value(name = "2dmse")]
    TwoD,
    Mrl,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitKind {
    Random,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DimModeArg {
    SampleOne,
    FullSweep,
}

#[derive(Debug, Default, Args)]
struct ModelArgs {
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
}

impl ModelArgs {
    fn any(&self) -> bool {
        [
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
        ]
        .iter()
        .any(Option::is_some)
    }

    fn apply(&self, cfg: &mut EncoderConfig) {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.num_layers, self.num_layers);
        set(&mut cfg.hidden_dim, self.hidden_dim);
        set(&mut cfg.num_heads, self.num_heads);
        set(&mut cfg.ffn_dim, self.ffn_dim);
        set(&mut cfg.vocab_size, self.vocab_size);
        set(&mut cfg.max_seq_len, self.max_seq_len);
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON-lines training data (anchor/positive or text_a/text_b/score).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for manifest.json, steps.jsonl and model.ckpt.
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with optional "model" and "train" objects; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "2dmse")]
    mode: Mode,
    #[arg(long)]
    no_align: bool,
    #[arg(long)]
    no_last_layer: bool,
    /// Comma-separated dimension set, e.g. 8,16,32.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    dim_mode: Option<DimModeArg>,
    /// Loss weight override such as L_align=0.5; repeatable.
    #[arg(long = "lambda", value_name = "KEY=VALUE")]
    lambdas: Vec<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "random")]
    init: InitKind,
    /// Starting weights when --init checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write checkpoints/step-NNNNNN.ckpt every K optimizer steps.
    #[arg(long, value_name = "K")]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON-lines scored pairs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
    dims: Option<Vec<usize>>,
    /// `full`: every layer crossed with the dimension cascade.
    #[arg(long, value_parser = ["full"])]
    grid: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    dims: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialized model otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    shape: ModelArgs,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    num_batches: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Layers to time; all layers when absent.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Errors found while resolving configuration are usage errors.
fn usage(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::Input(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Reproducibility record written before a command starts working.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: Value,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_unix_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix_seconds: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: Value, artifacts: &[(&str, &Path)]) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            args: std::env::args().collect(),
            seed,
            config,
            artifacts: artifacts
                .iter()
                .map(|(k, p)| (k.to_string(), p.to_path_buf()))
                .collect(),
            started_unix_seconds: unix_now(),
            finished_unix_seconds: None,
        }
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        data::write_atomic(path, &json)?;
        Ok(())
    }

    fn finish(mut self, path: &Path) -> CliResult<()> {
        self.finished_unix_seconds = Some(unix_now());
        self.write(path)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn sibling_manifest(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Overlays the keys of `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: Option<Value>, what: &str) -> CliResult<T> {
    let Some(patch) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base).unwrap()).unwrap());
    };
    let mut v = serde_json::to_value(base).expect("config serializes");
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{what} config: {e}")))
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult<()> {
    let file = args.spec.as_deref().map(read_json).transpose()?;
    let mut spec: SyntheticCorpusSpec = overlay(&SyntheticCorpusSpec::default(), file, "corpus")?;
    if let Some(v) = args.clusters {
        spec.num_clusters = v;
    }
    if let Some(v) = args.vocab_per_cluster {
        spec.vocab_per_cluster = v;
    }
    if let Some(v) = args.pairs_per_cluster {
        spec.pairs_per_cluster = v;
    }
    if let Some(v) = args.eval_pairs_per_cluster {
        spec.eval_pairs_per_cluster = v;
    }
    if let Some(v) = args.noise_rate {
        spec.noise_rate = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    spec.validate().map_err(usage)?;

    create_dir(&args.out_dir)?;
    let train_path = args.out_dir.join("train.jsonl");
    let eval_path = args.out_dir.join("eval.jsonl");
    let manifest_path = args.out_dir.join("manifest.json");
    let manifest = RunManifest::new(
        "gen-data",
        spec.seed,
        to_json(&spec),
        &[("train", &train_path), ("eval", &eval_path)],
    );
    manifest.write(&manifest_path)?;

    let corpus = data::generate_synthetic_corpus(&spec)?;
    data::write_jsonl(&train_path, &corpus.train)?;
    data::write_jsonl(&eval_path, &corpus.eval)?;
    eprintln!(
        "wrote {} training pairs and {} eval pairs to {}",
        corpus.train.len(),
        corpus.eval.len(),
        args.out_dir.display()
    );
    manifest.finish(&manifest_path)
}

#[derive(Debug, Serialize)]
struct ResolvedTrain {
    model: EncoderConfig,
    train: TrainConfig,
    init: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_every: Option<usize>,
}

fn resolve_train(args: &TrainArgs) -> CliResult<(EncoderModel, ResolvedTrain)> {
    let file = args.config.as_deref().map(read_json).transpose()?;
    let (model_patch, train_patch) = match file {
        None => (None, None),
        Some(Value::Object(mut m)) => (m.remove("model"), m.remove("train")),
        Some(_) => return Err(CliError::Usage("config file must hold a JSON object".into())),
    };

    let seed_from_file = train_patch
        .as_ref()
        .and_then(|t| t.get("seed"))
        .and_then(Value::as_u64);
    let seed = args.seed.or(seed_from_file).unwrap_or(DEFAULT_SEED);

    let (model, init, checkpoint) = match args.init {
        InitKind::Random => {
            if args.checkpoint.is_some() {
                return Err(CliError::Usage("--checkpoint requires --init checkpoint".into()));
            }
            let mut cfg: EncoderConfig = overlay(&EncoderConfig::default(), model_patch, "model")?;
            args.model.apply(&mut cfg);
            cfg.seed = seed;
            (EncoderModel::init(cfg).map_err(usage)?, "random", None)
        }
        InitKind::Checkpoint => {
            let path = args
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("--init checkpoint requires --checkpoint PATH".into()))?;
            if args.model.any() || model_patch.is_some() {
                return Err(CliError::Usage(
                    "model shape comes from the checkpoint; drop the shape options".into(),
                ));
            }
            (data::load_checkpoint(&path)?, "checkpoint", Some(path))
        }
    };

    let mut defaults = TrainConfig::for_hidden_dim(model.hidden_dim()).map_err(usage)?;
    if args.init == InitKind::Checkpoint {
        defaults.learning_rate = trainer::FINETUNE_LEARNING_RATE;
    }
    let mut cfg: TrainConfig = overlay(&defaults, train_patch, "train")?;
    cfg.seed = seed;
    match args.mode {
        Mode::TwoD => {}
        Mode::Mrl => cfg.ablation.mrl_only = true,
        Mode::Plain => cfg.ablation.plain = true,
    }
    if args.no_align {
        cfg.ablation.disable_align = true;
    }
    if args.no_last_layer {
        cfg.ablation.disable_last_layer = true;
    }
    if let Some(dims) = &args.dims {
        cfg.dims = dims.clone();
    }
    if let Some(m) = args.dim_mode {
        cfg.dim_mode = match m {
            DimModeArg::SampleOne => DimMode::SampleOne,
            DimModeArg::FullSweep => DimMode::FullSweep,
        };
    }
    for spec in &args.lambdas {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--lambda expects KEY=VALUE, got {spec:?}")))?;
        let objective = Objective::from_key(key.trim()).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown loss {key:?}; expected one of {}",
                Objective::ALL.map(Objective::key).join(", ")
            ))
        })?;
        let w: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--lambda {key}: {value:?} is not a number")))?;
        cfg.lambdas.set(objective, w);
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    cfg.validate(model.num_layers(), model.hidden_dim()).map_err(usage)?;
    if args.checkpoint_every == Some(0) {
        return Err(CliError::Usage("--checkpoint-every must be positive".into()));
    }
    let resolved = ResolvedTrain {
        model: *model.config(),
        train: cfg,
        init,
        checkpoint,
        checkpoint_every: args.checkpoint_every,
    };
    Ok((model, resolved))
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let (model, resolved) = resolve_train(&args)?;
    create_dir(&args.out_dir)?;
    let manifest_path = args.out_dir.join("manifest.json");
    let log_path = args.out_dir.join("steps.jsonl");
    let ckpt_path = args.out_dir.join("model.ckpt");
    let manifest = RunManifest::new(
        "train",
        resolved.train.seed,
        to_json(&resolved),
        &[("data", &args.data), ("step_log", &log_path), ("checkpoint", &ckpt_path)],
    );
    manifest.write(&manifest_path)?;

    let data = data::load_train_data(&args.data)?;
    let tmp_log = log_path.with_extension("jsonl.partial");
    let file = File::create(&tmp_log).map_err(|e| CliError::Runtime(Error::io(&tmp_log, e)))?;
    let mut log = BufWriter::new(file);
    let periodic_dir = args.out_dir.join("checkpoints");
    if resolved.checkpoint_every.is_some() {
        create_dir(&periodic_dir)?;
    }
    let result = trainer::train(model, &data, &resolved.train, |report, model| {
        serde_json::to_writer(&mut log, report).map_err(|e| Error::Input(e.to_string()))?;
        log.write_all(b"\n").map_err(|e| Error::io(&tmp_log, e))?;
        match resolved.checkpoint_every {
            Some(k) if (report.step + 1) % k == 0 => {
                data::save_checkpoint(model, periodic_dir.join(format!("step-{:06}.ckpt", report.step + 1)))
            }
            _ => Ok(()),
        }
    });
    log.flush().map_err(|e| CliError::Runtime(Error::io(&tmp_log, e)))?;
    drop(log);
    // the log is kept on failure too, it is the record of what happened
    fs::rename(&tmp_log, &log_path).map_err(|e| CliError::Runtime(Error::io(&log_path, e)))?;
    let (model, reports) = result?;
    data::save_checkpoint(&model, &ckpt_path)?;
    if let Some(last) = reports.last() {
        eprintln!("trained {} steps, final joint loss {:.6}", reports.len(), last.joint);
    }
    manifest.finish(&manifest_path)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let model = data::load_checkpoint(&args.model)?;
    let (full_layers, full_dims) = eval::full_grid(&model).map_err(usage)?;
    let layers: BTreeSet<usize> = match &args.layers {
        Some(l) => l.iter().copied().collect(),
        None => full_layers,
    };
    let dims: BTreeSet<usize> = match &args.dims {
        Some(d) => d.iter().copied().collect(),
        None => full_dims,
    };
    for &n in &layers {
        for &d in &dims {
            model.check_layer_dim(n, d).map_err(usage)?;
        }
    }
    let manifest_path = args.out.as_deref().map(sibling_manifest);
    let manifest = RunManifest::new(
        "eval",
        model.config().seed,
        serde_json::json!({ "layers": layers, "dims": dims }),
        &[("model", &args.model), ("data", &args.data)],
    );
    if let Some(p) = &manifest_path {
        manifest.write(p)?;
    }

    let pairs = data::load_pairs(&args.data)?;
    let mut report = eval::evaluate(&model, &pairs, &layers, &dims)?;
    report.model_id = args.model.display().to_string();
    report.dataset_id = args.data.display().to_string();
    if report.skipped_pairs > 0 {
        eprintln!("skipped {} pairs that could not be tokenized", report.skipped_pairs);
    }
    let csv = report.to_csv();
    match &args.out {
        Some(path) => data::write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    match manifest_path {
        Some(p) => manifest.finish(&p),
        None => Ok(()),
    }
}

fn cmd_export(args: ExportArgs) -> CliResult<()> {
    let model = data::load_checkpoint(&args.model)?;
    let spec = TruncationSpec::new(args.layers, args.dims);
    spec.validate_for(&model).map_err(usage)?;
    let manifest_path = sibling_manifest(&args.out);
    let manifest = RunManifest::new(
        "export",
        model.config().seed,
        to_json(&spec),
        &[("model", &args.model), ("checkpoint", &args.out)],
    );
    manifest.write(&manifest_path)?;
    let truncated = elastic::truncate_model(&model, spec)?;
    data::save_checkpoint(&truncated, &args.out)?;
    manifest.finish(&manifest_path)
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let model = match &args.model {
        Some(path) => {
            if args.shape.any() {
                return Err(CliError::Usage(
                    "model shape comes from the checkpoint; drop the shape options".into(),
                ));
            }
            data::load_checkpoint(path)?
        }
        None => {
            let mut cfg = EncoderConfig {
                seed: args.seed,
                ..EncoderConfig::default()
            };
            args.shape.apply(&mut cfg);
            EncoderModel::init(cfg).map_err(usage)?
        }
    };
    let layers: BTreeSet<usize> = match &args.layers {
        Some(l) => l.iter().copied().collect(),
        None => (1..=model.num_layers()).collect(),
    };
    let config = BenchConfig {
        batch_size: args.batch_size,
        num_batches: args.num_batches,
        warmup_batches: args.warmup,
        seed: args.seed,
    };
    if config.num_batches < elastic::MIN_TIMED_BATCHES {
        return Err(CliError::Usage(format!(
            "--num-batches must be at least {}",
            elastic::MIN_TIMED_BATCHES
        )));
    }
    let manifest_path = args.out.as_deref().map(sibling_manifest);
    let manifest = RunManifest::new(
        "bench",
        args.seed,
        serde_json::json!({ "model": model.config(), "bench": config, "layers": layers }),
        &[],
    );
    if let Some(p) = &manifest_path {
        manifest.write(p)?;
    }
    let report = elastic::benchmark_layers(&model, &config, &layers, &mut InstantClock::default())
        .map_err(usage)?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => data::write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    match manifest_path {
        Some(p) => manifest.finish(&p),
        None => Ok(()),
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
