//! The `qinco` command line.
//!
//! Every artifact embeds a metadata record: the subcommand, its flags (paths
//! reduced to file names), and SHA-256 hashes of every input file. Thread
//! count and absolute paths are left out so that reruns in another directory
//! or with another `--threads` produce identical bytes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qinco_core::codec::{Anchors, PqQincoModel};
use qinco_core::data::GaussianMixture;
use qinco_core::metrics::exact_knn;
use qinco_core::model::{exact_param_count, param_count};
use qinco_core::search::{ivf_build, IvfConfig, IvfIndex};
use qinco_core::training::{EpochRecord, FitConfig, TrainData};
use qinco_core::{CodeArray, LossMode, Matrix, QincoConfig, Rng, SearchParams, TrainConfig, TrainReport, Variant};
use serde::{Serialize, Serializer};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{load_codes, load_index, save_codes, save_index, AnyModel};
use crate::report::{self, EvalReport, PrefixRow, SweepRow, RECALL_RANKS};
use crate::vecs::{read_bytes, read_ivecs, read_vectors, write_bytes, write_fvecs, write_ivecs};

#[derive(Parser, Debug)]
#[command(name = "qinco", version, about = "Neural residual quantization: training, coding and search")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object of flag values applied before the command-line flags,
    /// which take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate Gaussian-mixture vectors, optional splits and ground truth.
    #[command(args_override_self = true)]
    SynthData(SynthArgs),
    /// Initialize from RQ and train a model.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Encode vectors into a codes file.
    #[command(args_override_self = true)]
    Encode(EncodeArgs),
    /// Decode a codes file, optionally from a prefix of every code.
    #[command(args_override_self = true)]
    Decode(DecodeArgs),
    /// MSE, entropy and recall of a model or an index.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Train a centroid-conditioned model and build an IVF index.
    #[command(args_override_self = true)]
    BuildIvf(BuildIvfArgs),
    /// Sweep search parameters of an IVF index.
    #[command(args_override_self = true)]
    Search(SearchArgs),
    /// Time encoding and decoding.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
}

fn file_name<S: Serializer>(p: &Path, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&base(p))
}

fn opt_file_name<S: Serializer>(p: &Option<PathBuf>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match p {
        Some(p) => s.serialize_some(&base(p)),
        None => s.serialize_none(),
    }
}

fn base(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Database vectors.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 16)]
    pub clusters: usize,
    /// Spread of the cluster centers relative to the within-cluster scale.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training vectors, written to `<stem>.train.fvecs`.
    #[arg(long, default_value_t = 0)]
    pub train: usize,
    /// Validation vectors, written to `<stem>.valid.fvecs`.
    #[arg(long, default_value_t = 0)]
    pub valid: usize,
    /// Queries, written to `<stem>.queries.fvecs` with exact neighbors in
    /// `<stem>.gt.ivecs`.
    #[arg(long, default_value_t = 0)]
    pub queries: usize,
    #[arg(long, default_value_t = 100)]
    pub gt_k: usize,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Standard,
    #[value(name = "low_rank", alias = "low-rank")]
    LowRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossModeArg {
    Summed,
    #[value(name = "last_only", alias = "last-only")]
    LastOnly,
    Detached,
}

#[derive(Args, Debug, Serialize)]
pub struct ModelFlags {
    /// Code length (steps).
    #[arg(long = "M", default_value_t = 8)]
    #[serde(rename = "M")]
    pub m: usize,
    /// Codebook size.
    #[arg(long = "K", default_value_t = 256)]
    #[serde(rename = "K")]
    pub k: usize,
    /// Residual blocks per step.
    #[arg(long = "L", default_value_t = 2)]
    #[serde(rename = "L")]
    pub l: usize,
    /// Hidden width of the residual blocks.
    #[arg(long = "h", default_value_t = 256)]
    pub h: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Standard)]
    pub variant: VariantArg,
}

impl ModelFlags {
    fn config(&self, dim: usize) -> QincoConfig {
        let mut c = QincoConfig::new(dim, self.m, self.k, self.l, self.h);
        c.variant = match self.variant {
            VariantArg::Standard => Variant::Standard,
            VariantArg::LowRank => Variant::LowRank,
        };
        c
    }
}

#[derive(Args, Debug, Serialize)]
pub struct OptFlags {
    #[arg(long, value_enum, default_value_t = LossModeArg::Summed)]
    pub loss_mode: LossModeArg,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lr_drop: f64,
    #[arg(long, default_value_t = 10)]
    pub lr_patience: usize,
    #[arg(long, default_value_t = 50)]
    pub stop_patience: usize,
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
    #[arg(long, default_value_t = qinco_core::clustering::DEFAULT_KMEANS_ITERS)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Suppress the per-epoch JSON lines on standard output.
    #[arg(long)]
    #[serde(skip)]
    pub quiet: bool,
}

impl OptFlags {
    fn fit_config(&self, model: QincoConfig) -> FitConfig {
        let train = TrainConfig {
            batch_size: self.batch_size,
            base_lr: self.lr,
            lr_drop_factor: self.lr_drop,
            lr_patience_epochs: self.lr_patience,
            stop_patience_epochs: self.stop_patience,
            max_epochs: self.max_epochs,
            loss_mode: match self.loss_mode {
                LossModeArg::Summed => LossMode::Summed,
                LossModeArg::LastOnly => LossMode::LastOnly,
                LossModeArg::Detached => LossMode::Detached,
            },
            seed: self.seed,
            clip_grad_norm: self.clip_grad_norm,
            ..TrainConfig::default()
        };
        let mut f = FitConfig::new(model, train);
        f.kmeans_iters = self.kmeans_iters;
        f
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub valid: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub opt: OptFlags,
    /// Split vectors into this many equal sub-vectors with one model each.
    #[arg(long, default_value_t = 1)]
    pub pq_blocks: usize,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub out_model: PathBuf,
    /// Training report; defaults to the model path with `.json` appended.
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub codes: PathBuf,
    /// Decode only the first bytes of every code; must be a whole number of
    /// stored indices.
    #[arg(long)]
    pub prefix_bytes: Option<usize>,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["model", "index"]))]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub index: Option<PathBuf>,
    /// Database vectors (required with --model).
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub data: Option<PathBuf>,
    /// Precomputed codes of --data; encoded on the fly otherwise.
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub codes: Option<PathBuf>,
    #[arg(long, requires = "gt")]
    #[serde(serialize_with = "opt_file_name")]
    pub queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    #[serde(serialize_with = "opt_file_name")]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub per_step_csv: Option<PathBuf>,
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub prefix_csv: Option<PathBuf>,
    /// Recall against shortlist size with every bucket probed (--index only).
    #[arg(long, requires = "index")]
    #[serde(serialize_with = "opt_file_name")]
    pub n_short_csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100,200,500,1000")]
    pub n_short: Vec<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildIvfArgs {
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub train: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub valid: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub database: PathBuf,
    /// Number of IVF buckets.
    #[arg(long, default_value_t = 64)]
    pub k_ivf: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub opt: OptFlags,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub out_index: PathBuf,
    /// Training report; defaults to the index path with `.json` appended.
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub index: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub queries: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub gt: PathBuf,
    /// Buckets probed; defaults to powers of two up to K_ivf.
    #[arg(long, value_delimiter = ',')]
    pub p_ivf: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100,200,500,1000")]
    pub n_short: Vec<usize>,
    /// Results per query (capped by the shortlist size).
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub out_csv: PathBuf,
    /// Result ids of every grid point, in grid order, padded with -1.
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub out_ids: Option<PathBuf>,
    /// Decode every stored vector once up front instead of per query.
    #[arg(long)]
    pub cache: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(serialize_with = "file_name")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long)]
    #[serde(serialize_with = "opt_file_name")]
    pub out: Option<PathBuf>,
}

const SUBCOMMANDS: [&str; 8] = ["synth-data", "train", "encode", "decode", "eval", "build-ivf", "search", "bench"];

/// Turns a JSON object into flags: `true` becomes a bare switch, `false`
/// and `null` are dropped, arrays are joined with commas.
pub fn config_flags(config: &Value) -> Result<Vec<OsString>> {
    let obj = config
        .as_object()
        .ok_or_else(|| Error::Usage("config file must hold a JSON object".into()))?;
    let mut out = Vec::new();
    for (key, value) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &Value| -> Result<String> {
            match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                _ => Err(Error::Usage(format!("config value for {key} must be a string or number"))),
            }
        };
        match value {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>>>()?.join(",");
                out.push(flag.into());
                out.push(joined.into());
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}

/// Inserts flags from `--config` right after the subcommand name so that
/// explicit flags, which come later, override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let config: Value = serde_json::from_slice(&read_bytes(&path)?)?;
    let flags = config_flags(&config)?;
    let Some(at) = args.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(args);
    };
    let mut out = args[..=at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}

pub fn run<I, A>(args: I) -> Result<()>
where
    I: IntoIterator<Item = A>,
    A: Into<OsString>,
{
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Usage(e.to_string().trim_end().to_string())),
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // a pool may already exist when several commands run in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::BuildIvf(a) => build_ivf(a),
        Command::Search(a) => search(a),
        Command::Bench(a) => bench(a),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Metadata record embedded in every artifact of a run.
struct Run {
    command: &'static str,
    args: Value,
    inputs: BTreeMap<String, Value>,
}

impl Run {
    fn new(command: &'static str, args: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command,
            args: serde_json::to_value(args)?,
            inputs: BTreeMap::new(),
        })
    }

    /// Reads an input file and records its hash under `flag`.
    fn input(&mut self, flag: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.inputs.insert(flag.to_string(), json!({ "file": base(path), "sha256": sha256_hex(&bytes) }));
        Ok(bytes)
    }

    fn vectors(&mut self, flag: &str, path: &Path) -> Result<Matrix<f32>> {
        self.input(flag, path)?;
        read_vectors(path)
    }

    fn meta(&self) -> Value {
        json!({
            "tool": "qinco",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "args": self.args,
            "inputs": self.inputs,
        })
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `dir/stem.<label>.<ext>` next to `path`.
pub fn sibling(path: &Path, label: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{label}.{ext}"))
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    if a.n == 0 || a.d == 0 {
        return Err(Error::Usage("--n and --d must be positive".into()));
    }
    let run = Run::new("synth-data", a)?;
    let rng = Rng::new(a.seed);
    let mixture = GaussianMixture::random(a.d, a.clusters, a.spread, &mut rng.fork("mixture"))?;
    let database = mixture.sample(a.n, &mut rng.fork("database"));
    write_fvecs(&a.out, &database)?;
    for (label, n) in [("train", a.train), ("valid", a.valid)] {
        if n > 0 {
            write_fvecs(&sibling(&a.out, label, "fvecs"), &mixture.sample(n, &mut rng.fork(label)))?;
        }
    }
    if a.queries > 0 {
        let queries = mixture.sample(a.queries, &mut rng.fork("queries"));
        let gt = exact_knn(&database, &queries, a.gt_k.clamp(1, a.n))?;
        let rows: Vec<Vec<i32>> = gt.iter().map(|r| r.iter().map(|&i| i as i32).collect()).collect();
        write_fvecs(&sibling(&a.out, "queries", "fvecs"), &queries)?;
        write_ivecs(&sibling(&a.out, "gt", "ivecs"), &rows)?;
    }
    write_json(&sibling(&a.out, "meta", "json"), &run.meta())
}

fn epoch_line(block: Option<usize>, r: &EpochRecord) {
    let mut v = json!({
        "epoch": r.epoch,
        "train_loss": r.train_loss,
        "valid_loss": r.valid_loss,
        "lr": r.lr,
    });
    if let Some(b) = block {
        v["block"] = json!(b);
    }
    println!("{v}");
}

fn report_json(r: &TrainReport) -> Value {
    json!({
        "initial_valid_loss": r.initial_valid_loss,
        "best_epoch": r.best_epoch,
        "best_valid_loss": r.best_valid_loss,
        "final_step_mse": r.final_step_mse,
        "epochs": r.epochs.iter().map(|e| json!({
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "valid_loss": e.valid_loss,
            "lr": e.lr,
        })).collect::<Vec<_>>(),
    })
}

fn counts(cfg: &QincoConfig) -> Value {
    json!({ "param_count": param_count(cfg), "stored_params": exact_param_count(cfg) })
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut run = Run::new("train", a)?;
    let data = run.vectors("data", &a.data)?;
    let valid = run.vectors("valid", &a.valid)?;
    if a.pq_blocks == 0 || data.cols() % a.pq_blocks != 0 {
        return Err(Error::Usage(format!("--pq-blocks must divide the dimension {}", data.cols())));
    }
    let model_cfg = a.model.config(data.cols() / a.pq_blocks);
    let fit_cfg = a.opt.fit_config(model_cfg);
    let quiet = a.opt.quiet;
    let (model, reports) = if a.pq_blocks == 1 {
        let mut obs = |r: &EpochRecord| {
            if !quiet {
                epoch_line(None, r)
            }
        };
        let (m, r) = qinco_core::training::fit(TrainData::plain(&data), TrainData::plain(&valid), &fit_cfg, &mut obs)?;
        (AnyModel::Plain(m), vec![r])
    } else {
        let mut obs = |b: usize, r: &EpochRecord| {
            if !quiet {
                epoch_line(Some(b), r)
            }
        };
        let (m, r) = PqQincoModel::train(&data, &valid, a.pq_blocks, &fit_cfg, &mut obs)?;
        (AnyModel::Product(m), r)
    };
    let meta = run.meta();
    model.save(&a.out_model, &meta)?;
    let mut report = json!({
        "meta": meta,
        "model": counts(&model_cfg),
        "blocks": reports.iter().map(report_json).collect::<Vec<_>>(),
    });
    report["model"]["pq_blocks"] = json!(a.pq_blocks);
    let path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out_model, ".json"));
    write_json(&path, &report)
}

fn encode_any(model: &AnyModel, data: &Matrix<f32>) -> Result<CodeArray> {
    Ok(match model {
        AnyModel::Plain(m) => m.encode_batch(data, None)?,
        AnyModel::Product(m) => m.encode_batch(data)?,
    })
}

/// Steps per code (per block for product models) and the number of blocks.
fn layout(model: &AnyModel) -> (usize, usize) {
    match model {
        AnyModel::Plain(m) => (m.steps(), 1),
        AnyModel::Product(m) => (m.steps(), m.num_blocks()),
    }
}

/// Decodes the first `steps` indices of every code (of every block).
fn decode_any(model: &AnyModel, codes: &CodeArray, steps: usize) -> Result<Matrix<f32>> {
    Ok(match model {
        AnyModel::Plain(m) => m.decode_batch(codes, steps, None)?,
        AnyModel::Product(m) => m.decode_batch(codes, steps)?,
    })
}

fn load_model(run: &mut Run, path: &Path) -> Result<AnyModel> {
    run.input("model", path)?;
    Ok(AnyModel::load(path)?.0)
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let mut run = Run::new("encode", a)?;
    let model = load_model(&mut run, &a.model)?;
    let data = run.vectors("data", &a.data)?;
    let codes = encode_any(&model, &data)?;
    save_codes(&a.out, &codes, &run.meta())
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let mut run = Run::new("decode", a)?;
    let model = load_model(&mut run, &a.model)?;
    run.input("codes", &a.codes)?;
    let (codes, _) = load_codes(&a.codes)?;
    let (steps, blocks) = layout(&model);
    if codes.steps() != steps * blocks {
        return Err(Error::Usage(format!("codes hold {} steps but the model produces {}", codes.steps(), steps * blocks)));
    }
    let steps = match a.prefix_bytes {
        None => steps,
        Some(b) => {
            // a product code is cut at the same step in every block
            let w = codes.bytes_per_index() * blocks;
            if b % w != 0 || b / w > steps {
                return Err(Error::Usage(format!(
                    "--prefix-bytes {b} is not a multiple of {w} bytes up to {} bytes",
                    steps * w
                )));
            }
            b / w
        }
    };
    write_fvecs(&a.out, &decode_any(&model, &codes, steps)?)
}

fn read_truth(run: &mut Run, queries: &Path, gt: &Path) -> Result<(Matrix<f32>, Vec<usize>)> {
    let q = run.vectors("queries", queries)?;
    run.input("gt", gt)?;
    let truth = report::first_column(&read_ivecs(gt)?)?;
    if truth.len() != q.rows() {
        return Err(Error::Usage(format!("{} queries but {} ground-truth rows", q.rows(), truth.len())));
    }
    Ok((q, truth))
}

fn string_keys(m: BTreeMap<usize, f64>) -> BTreeMap<String, f64> {
    m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut run = Run::new("eval", a)?;
    let truth = match (&a.queries, &a.gt) {
        (Some(q), Some(g)) => Some(read_truth(&mut run, q, g)?),
        _ => None,
    };
    let (mut rep, prefix_rows) = if let Some(path) = &a.model {
        let model = load_model(&mut run, path)?;
        let data_path = a.data.as_ref().ok_or_else(|| Error::Usage("--model needs --data".into()))?;
        let data = run.vectors("data", data_path)?;
        let codes = match &a.codes {
            Some(p) => {
                run.input("codes", p)?;
                load_codes(p)?.0
            }
            None => encode_any(&model, &data)?,
        };
        if codes.len() != data.rows() {
            return Err(Error::Usage("codes and data hold different numbers of vectors".into()));
        }
        let (steps, blocks) = layout(&model);
        if codes.steps() != steps * blocks {
            return Err(Error::Usage("codes do not match the model".into()));
        }
        let prefixes = (0..=steps).map(|m| decode_any(&model, &codes, m)).collect::<Result<Vec<_>>>()?;
        evaluate(&data, &codes, &prefixes, blocks, truth.as_ref())?
    } else {
        let path = a.index.as_ref().expect("clap enforces the source group");
        run.input("index", path)?;
        let (index, _) = load_index(path)?;
        let (codes, assignment) = index_codes(&index)?;
        let anchors = Anchors {
            centroids: &index.centroids,
            assignment: &assignment,
        };
        let prefixes = (0..=codes.steps())
            .map(|m| Ok(index.model.decode_batch(&codes, m, Some(anchors))?))
            .collect::<Result<Vec<_>>>()?;
        let data = match &a.data {
            Some(p) => run.vectors("data", p)?,
            None => prefixes[prefixes.len() - 1].clone(),
        };
        let out = evaluate(&data, &codes, &prefixes, 1, truth.as_ref())?;
        if let (Some(csv), Some((q, t))) = (&a.n_short_csv, &truth) {
            let rows = n_short_curve(&index, q, t, &a.n_short)?;
            report::sweep_csv(csv, &rows)?;
        }
        out
    };
    if let Some(p) = &a.per_step_csv {
        report::per_step_csv(p, &rep)?;
    }
    if let Some(p) = &a.prefix_csv {
        report::prefix_csv(p, &prefix_rows)?;
    }
    rep.timings_us_per_vector.clear();
    let mut out = serde_json::to_value(&rep)?;
    out["meta"] = run.meta();
    write_json(&a.out, &out)
}

fn evaluate(
    data: &Matrix<f32>,
    codes: &CodeArray,
    prefixes: &[Matrix<f32>],
    blocks: usize,
    truth: Option<&(Matrix<f32>, Vec<usize>)>,
) -> Result<(EvalReport, Vec<PrefixRow>)> {
    let mut rep = EvalReport::from_decodes(data, codes, prefixes)?;
    let mut rows = Vec::with_capacity(prefixes.len());
    for (m, rec) in prefixes.iter().enumerate() {
        let recall = match truth {
            Some((q, t)) => report::exhaustive_recall(rec, q, t)?,
            None => BTreeMap::new(),
        };
        rows.push(PrefixRow {
            steps: m,
            bytes: m * blocks * codes.bytes_per_index(),
            mse: qinco_core::metrics::mse(data, rec)?,
            recall,
        });
    }
    if let Some(last) = rows.last() {
        rep.recall = string_keys(last.recall.clone());
    }
    Ok((rep, rows))
}

/// Codes of an index's vectors ordered by id, with their bucket numbers.
fn index_codes(index: &IvfIndex<f32>) -> Result<(CodeArray, Vec<usize>)> {
    let n = index.len();
    let m = index.model.steps();
    let mut indices = vec![0u32; n * m];
    let mut assignment = vec![usize::MAX; n];
    for (b, list) in index.lists.iter().enumerate() {
        for (pos, &id) in list.ids.iter().enumerate() {
            if id >= n || assignment[id] != usize::MAX {
                return Err(Error::Usage("index ids are not 0..N".into()));
            }
            assignment[id] = b;
            indices[id * m..(id + 1) * m].copy_from_slice(&list.codes[pos * m..(pos + 1) * m]);
        }
    }
    let codes = CodeArray::new(m, index.model.codebook_size(), indices, None)?;
    Ok((codes, assignment))
}

fn sweep_point(index: &IvfIndex<f32>, queries: &Matrix<f32>, truth: &[usize], p_ivf: usize, n_short: usize, k: usize) -> Result<(SweepRow, Vec<Vec<usize>>)> {
    let params = SearchParams {
        p_ivf,
        n_short,
        k: k.min(n_short),
    };
    let t = Instant::now();
    let res = index.search_batch(queries, params)?;
    let secs = t.elapsed().as_secs_f64();
    let ids = report::ids(&res);
    let recall = report::recalls(&ids, truth, &RECALL_RANKS)?;
    let row = SweepRow {
        p_ivf,
        n_short,
        recall,
        qps: queries.rows() as f64 / secs.max(1e-9),
    };
    Ok((row, ids))
}

fn n_short_curve(index: &IvfIndex<f32>, queries: &Matrix<f32>, truth: &[usize], grid: &[usize]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&n| Ok(sweep_point(index, queries, truth, index.k_ivf(), n, 100)?.0))
        .collect()
}

fn build_ivf(a: &BuildIvfArgs) -> Result<()> {
    let mut run = Run::new("build-ivf", a)?;
    let train = run.vectors("train", &a.train)?;
    let valid = run.vectors("valid", &a.valid)?;
    let database = run.vectors("database", &a.database)?;
    let model_cfg = a.model.config(train.cols());
    let cfg = IvfConfig {
        k_ivf: a.k_ivf,
        fit: a.opt.fit_config(model_cfg),
    };
    let quiet = a.opt.quiet;
    let mut obs = |r: &EpochRecord| {
        if !quiet {
            epoch_line(None, r)
        }
    };
    let (index, rep) = ivf_build(&train, &valid, &database, &cfg, &mut obs)?;
    let meta = run.meta();
    save_index(&a.out_index, &index, &meta)?;
    let mut coupled = model_cfg;
    coupled.ivf_coupled_step1 = true;
    let report = json!({
        "meta": meta,
        "model": counts(&coupled),
        "aq_fitted_mse": index.aq.fitted_mse,
        "training": report_json(&rep),
    });
    let path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out_index, ".json"));
    write_json(&path, &report)
}

fn search(a: &SearchArgs) -> Result<()> {
    let mut run = Run::new("search", a)?;
    run.input("index", &a.index)?;
    let (mut index, _) = load_index(&a.index)?;
    let (queries, truth) = read_truth(&mut run, &a.queries, &a.gt)?;
    let k_ivf = index.k_ivf();
    let p_grid: Vec<usize> = if a.p_ivf.is_empty() {
        let mut g: Vec<usize> = (0..).map(|i| 1usize << i).take_while(|&p| p < k_ivf).collect();
        g.push(k_ivf);
        g
    } else {
        a.p_ivf.clone()
    };
    if let Some(&p) = p_grid.iter().find(|&&p| p == 0 || p > k_ivf) {
        return Err(Error::Usage(format!("--p-ivf {p} is outside 1..={k_ivf}")));
    }
    if a.n_short.contains(&0) || a.k == 0 {
        return Err(Error::Usage("--n-short and --k must be positive".into()));
    }
    if a.cache {
        index.cache_reconstructions()?;
    }
    let mut rows = Vec::new();
    let mut all_ids = Vec::new();
    for &p in &p_grid {
        for &n in &a.n_short {
            let (row, ids) = sweep_point(&index, &queries, &truth, p, n, a.k)?;
            rows.push(row);
            all_ids.extend(ids.into_iter().map(|r| {
                let mut v: Vec<i32> = r.into_iter().map(|i| i as i32).collect();
                v.resize(a.k, -1);
                v
            }));
        }
    }
    report::sweep_csv(&a.out_csv, &rows)?;
    if let Some(p) = &a.out_ids {
        write_ivecs(p, &all_ids)?;
    }
    write_json(&with_suffix(&a.out_csv, ".meta.json"), &run.meta())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let mut run = Run::new("bench", a)?;
    let model = load_model(&mut run, &a.model)?;
    let data = run.vectors("data", &a.data)?;
    let n = data.rows().max(1) as f64;
    let mut codes = None;
    let enc = report::median_seconds(a.reps, || {
        codes = Some(encode_any(&model, &data)?);
        Ok(())
    })?;
    let codes = codes.expect("at least one repetition");
    let steps = layout(&model).0;
    let dec = report::median_seconds(a.reps, || decode_any(&model, &codes, steps).map(drop))?;
    let mut timings = BTreeMap::new();
    timings.insert("encode".to_string(), enc * 1e6 / n);
    timings.insert("decode".to_string(), dec * 1e6 / n);
    let out = json!({ "meta": run.meta(), "vectors": data.rows(), "reps": a.reps.max(5), "timings_us_per_vector": timings });
    println!("{}", serde_json::to_string(&out["timings_us_per_vector"])?);
    match &a.out {
        Some(p) => write_json(p, &out),
        None => Ok(()),
    }
}
