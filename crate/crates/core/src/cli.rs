//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE` with flat `key = value` lines
//! (`#` starts a comment). Keys are long flag names; `_` and `-` are
//! interchangeable. Values given on the command line win over the file, and
//! the effective settings are echoed to `<outdir>/config.resolved`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure (non-finite loss, failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::{format_report, gradcheck_suite, suite_names};
use crate::data::{
    generate_pool, load_dataset, make_splits, save_dataset, AugmentConfig, CloudRecord, DatasetManifest, Pool, Split,
};
use crate::error::{Error, Result};
use crate::geometry::morton_keys;
use crate::model::{build_dual_mask, Model, ModelConfig};
use crate::nncore::{GradcheckOptions, Scalar};
use crate::sequencer::{prepare_sequence, unit_offsets};
use crate::training::{
    evaluate_corpus, few_shot_eval, finetune, model_from_checkpoint, post_pretrain, pretrain, Checkpoint, Corpus,
    EvalRecord, FewShotConfig, FinetuneConfig, InitMode, MetricsLog, PretrainConfig, StageKind, Trainer,
};

pub const OUT_ENV: &str = "POINTAR_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "pointar",
    version,
    about = "Auto-regressive point-cloud pre-training on the CPU"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset and its manifest.
    GenData(GenDataArgs),
    /// Self-supervised next-patch pre-training.
    Pretrain(PretrainArgs),
    /// Supervised classification on a labelled intermediate set.
    PostPretrain(PostPretrainArgs),
    /// Classification fine-tuning with the auxiliary generation loss.
    Finetune(FinetuneArgs),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// w-way s-shot episodes with a trained classification head.
    FewShot(FewShotArgs),
    /// Dump the Morton order, a dual mask or the direction prompts.
    Inspect(InspectArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat `key = value` settings; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            Self::All => None,
            Self::Train => Some(Split::Train),
            Self::Val => Some(Split::Val),
            Self::Test => Some(Split::Test),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    FromPretrain,
    FromPostPretrain,
    FromScratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InspectWhat {
    Morton,
    Mask,
    Rdp,
}

/// Architecture of a freshly initialised model.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Named architecture preset.
    #[arg(long, default_value = "desk", value_parser = ["desk", "full", "tiny"])]
    pub preset: String,
    /// Token channels D [default: from preset].
    #[arg(long)]
    pub channels: Option<usize>,
    /// Attention heads [default: from preset].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Extractor blocks [default: from preset].
    #[arg(long)]
    pub extractor_depth: Option<usize>,
    /// Generator blocks [default: from preset].
    #[arg(long)]
    pub generator_depth: Option<usize>,
    /// Patches per cloud n [default: from preset].
    #[arg(long)]
    pub patches: Option<usize>,
    /// Points per patch k [default: from preset].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Dropout probability [default: from preset].
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl ModelArgs {
    pub fn config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset)?;
        c.channels = self.channels.unwrap_or(c.channels);
        c.heads = self.heads.unwrap_or(c.heads);
        c.extractor_depth = self.extractor_depth.unwrap_or(c.extractor_depth);
        c.generator_depth = self.generator_depth.unwrap_or(c.generator_depth);
        c.patches = self.patches.unwrap_or(c.patches);
        c.patch_size = self.patch_size.unwrap_or(c.patch_size);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Shape pool.
    #[arg(long, value_enum, default_value = "A")]
    pub pool: PoolArg,
    /// Number of clouds.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Points per cloud.
    #[arg(long, default_value_t = crate::data::DEFAULT_CLOUD_POINTS)]
    pub points: usize,
    /// Train, val and test fractions.
    #[arg(long, default_value = "1,0,0")]
    pub splits: String,
    /// Dataset path [default: <outdir>/dataset.pgpt]; the manifest goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optimisation settings shared by the supervised stages.
#[derive(Debug, Clone, Args)]
pub struct SupervisedArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    /// Linear warm-up share of all steps.
    #[arg(long, default_value_t = crate::training::DEFAULT_WARMUP_FRACTION)]
    pub warmup: f64,
    #[arg(long, default_value_t = crate::training::DEFAULT_CLIP_NORM)]
    pub clip_norm: f64,
    /// Random scale, rotation and jitter of training clouds.
    #[arg(long)]
    pub augment: bool,
    /// Comma-separated parameter-name prefixes to keep fixed.
    #[arg(long, default_value = "")]
    pub freeze: String,
    /// Split evaluated after every epoch and at the end.
    #[arg(long, value_enum, default_value = "val")]
    pub eval_split: SplitArg,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset file [default: fresh pool-A set from --gen-count and --seed].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Clouds generated when --data is absent.
    #[arg(long, default_value_t = 2000)]
    pub gen_count: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = crate::training::DEFAULT_WARMUP_FRACTION)]
    pub warmup: f64,
    /// Dual-mask ratio (0 gives a plain causal mask).
    #[arg(long, default_value_t = 0.7)]
    pub ratio: f64,
    #[arg(long, default_value_t = crate::training::DEFAULT_CLIP_NORM)]
    pub clip_norm: f64,
    #[arg(long)]
    pub augment: bool,
    /// Also write `pretrain_epochNNN.ckpt` every this many epochs (0: never).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Seed of the initialisation, batch order and masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Dtype,
    /// Continue the run saved in this checkpoint (its stage settings apply).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PostPretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub opt: SupervisedArgs,
    /// Labelled dataset (typically pool B).
    #[arg(long)]
    pub data: PathBuf,
    /// Pre-trained checkpoint [default: random initialisation].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub opt: SupervisedArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Starting weights (ignored for from-scratch).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "from-pretrain")]
    pub init: InitArg,
    /// Weight of the generation loss.
    #[arg(long, default_value_t = crate::training::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args)]
pub struct FewShotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Extractor weights [default: random initialisation from --seed].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    #[arg(long, default_value_t = 10)]
    pub shots: usize,
    /// Held-out queries per class.
    #[arg(long, default_value_t = crate::training::fewshot::DEFAULT_QUERIES)]
    pub queries: usize,
    #[arg(long, default_value_t = crate::training::fewshot::DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub head_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub head_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub head_weight_decay: f64,
    /// Fine-tune the whole model on each support set instead of the head only.
    #[arg(long)]
    pub full_finetune: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub what: InspectWhat,
    /// Dataset file (morton, rdp).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Record inside the dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Dual-mask ratio (mask).
    #[arg(long, default_value_t = 0.7)]
    pub ratio: f64,
    /// Sequence length of the mask [default: --patches].
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed of the mask draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Central-difference step.
    #[arg(long, default_value_t = crate::nncore::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = crate::nncore::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Entries probed per tensor.
    #[arg(long, default_value_t = 64)]
    pub max_entries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control: scale the analytic gradient of this op.
    #[arg(long, value_parser = corrupt_ops())]
    pub corrupt: Option<String>,
    #[arg(long, default_value_t = 1.5)]
    pub corrupt_factor: f64,
}

const CORRUPTIBLE: [&str; 20] = [
    "matmul",
    "add_bias",
    "add",
    "mul",
    "scale",
    "sum",
    "reshape",
    "relu",
    "gelu",
    "layer_norm",
    "softmax",
    "attention",
    "group_max",
    "group_mean",
    "concat_broadcast",
    "concat_cols",
    "gather_rows",
    "chamfer",
    "cross_entropy",
    "dropout",
];

fn corrupt_ops() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(CORRUPTIBLE)
}

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Gradcheck(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// The clap command tree; repeated flags keep their last value.
pub fn command() -> clap::Command {
    Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true))
}

/// Parses a `key = value` file into `(key, value)` pairs in file order.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected `key = value`", ln + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::InvalidArgument(format!("config line {}: empty key", ln + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path_from(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Prepends the config file's settings to the user's flags so that the
/// latter override them.
fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    if args.len() < 2 {
        return Ok(args);
    }
    let Some(path) = config_path_from(&args[2..]) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let sub_name = args[1].to_string_lossy().to_string();
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown subcommand {sub_name}")))?;
    let mut injected = Vec::new();
    for (key, value) in parse_config_file(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::InvalidArgument(format!("{}: unknown key {key} for {sub_name}", path.display())))?;
        if key == "config" {
            continue;
        }
        let is_switch = matches!(arg.get_action(), clap::ArgAction::SetTrue);
        if is_switch {
            match value.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "{key}: expected true or false, got {other}"
                    )))
                }
            }
        } else {
            injected.push(OsString::from(format!("--{key}={value}")));
        }
    }
    let mut merged = args[..2].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&args[2..]);
    Ok(merged)
}

/// Effective settings of the chosen subcommand, one `key = value` per line.
fn resolved_config(matches: &clap::ArgMatches) -> String {
    let cmd = Cli::command();
    let mut s = String::new();
    let Some((name, sub_m)) = matches.subcommand() else {
        return s;
    };
    let _ = writeln!(s, "command = {name}");
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if matches!(id, "help" | "version" | "config") {
            continue;
        }
        let value = match sub_m.get_raw(id) {
            Some(vals) => vals
                .map(|v| v.to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join(","),
            None => continue,
        };
        let _ = writeln!(s, "{long} = {value}");
    }
    s
}

/// Runs the CLI with `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let merged = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let matches = match command().try_get_matches_from(merged) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    let resolved = resolved_config(&matches);
    match dispatch(cli.command, &resolved, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn prepare_outdir(common: &CommonArgs, resolved: &str) -> Result<PathBuf> {
    fs::create_dir_all(&common.outdir)?;
    fs::write(common.outdir.join("config.resolved"), resolved)?;
    Ok(common.outdir.clone())
}

fn dispatch(cmd: Command, resolved: &str, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a, resolved, out),
        Command::Pretrain(a) => match a.dtype {
            Dtype::F32 => cmd_pretrain::<f32>(&a, resolved, out, err),
            Dtype::F64 => cmd_pretrain::<f64>(&a, resolved, out, err),
        },
        Command::PostPretrain(a) => {
            let sup = Supervised {
                common: &a.common,
                model: &a.model,
                opt: &a.opt,
                data: &a.data,
                split: a.split,
                seed: a.seed,
                kind: StageKind::PostPretrain,
                checkpoint: a.checkpoint.as_deref(),
                init: InitMode::FromPretrain,
                lambda: 0.0,
            };
            match a.dtype {
                Dtype::F32 => cmd_supervised::<f32>(&sup, resolved, out, err),
                Dtype::F64 => cmd_supervised::<f64>(&sup, resolved, out, err),
            }
        }
        Command::Finetune(a) => {
            let init = match a.init {
                InitArg::FromPretrain => InitMode::FromPretrain,
                InitArg::FromPostPretrain => InitMode::FromPostPretrain,
                InitArg::FromScratch => InitMode::FromScratch,
            };
            let sup = Supervised {
                common: &a.common,
                model: &a.model,
                opt: &a.opt,
                data: &a.data,
                split: a.split,
                seed: a.seed,
                kind: StageKind::Finetune,
                checkpoint: a.checkpoint.as_deref(),
                init,
                lambda: a.lambda,
            };
            match a.dtype {
                Dtype::F32 => cmd_supervised::<f32>(&sup, resolved, out, err),
                Dtype::F64 => cmd_supervised::<f64>(&sup, resolved, out, err),
            }
        }
        Command::Eval(a) => match a.dtype {
            Dtype::F32 => cmd_eval::<f32>(&a, resolved, out),
            Dtype::F64 => cmd_eval::<f64>(&a, resolved, out),
        },
        Command::FewShot(a) => match a.dtype {
            Dtype::F32 => cmd_few_shot::<f32>(&a, resolved, out),
            Dtype::F64 => cmd_few_shot::<f64>(&a, resolved, out),
        },
        Command::Inspect(a) => cmd_inspect(&a, resolved, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, resolved, out),
    }
}

fn parse_fractions(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("--splits expects three numbers, got {s:?}")))?;
    <[f64; 3]>::try_from(parts)
        .map_err(|_| Error::InvalidArgument(format!("--splits expects three numbers, got {s:?}")))
}

fn at<V>(path: &Path, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    at(path, Checkpoint::load(path))
}

pub fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("manifest")
}

fn cmd_gen_data(a: &GenDataArgs, resolved: &str, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_outdir(&a.common, resolved)?;
    let fractions = parse_fractions(&a.splits)?;
    let pool = match a.pool {
        PoolArg::A => Pool::A,
        PoolArg::B => Pool::B,
    };
    let path = a.out.clone().unwrap_or_else(|| dir.join("dataset.pgpt"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let records = generate_pool(pool, a.count, a.points, a.seed)?;
    let manifest = DatasetManifest::from_records(&records, a.seed);
    let manifest = if records.is_empty() {
        manifest
    } else {
        make_splits(&manifest, a.seed, fractions)?
    };
    save_dataset(&path, &records)?;
    manifest.save(&manifest_path(&path))?;
    writeln!(out, "records={} path={}", records.len(), path.display())?;
    Ok(())
}

/// Records of `split` (all records when `None`) with the dataset's class count.
pub fn load_split(data: &Path, split: Option<Split>) -> Result<(Vec<CloudRecord>, usize)> {
    let records = at(data, load_dataset(data))?;
    let mpath = manifest_path(data);
    let manifest = if mpath.exists() {
        at(&mpath, DatasetManifest::load(&mpath))?
    } else {
        DatasetManifest::from_records(&records, 0)
    };
    if manifest.len() != records.len() {
        return Err(Error::Format(format!(
            "manifest lists {} records, dataset holds {}",
            manifest.len(),
            records.len()
        )));
    }
    let classes = manifest.class_names.len();
    let chosen = match split {
        None => records,
        Some(s) => {
            let idx = manifest.indices(s);
            idx.iter().map(|&i| records[i].clone()).collect()
        }
    };
    Ok((chosen, classes))
}

fn corpus_for(data: &Path, split: SplitArg, cfg: &ModelConfig) -> Result<(Corpus, usize)> {
    let (records, classes) = load_split(data, split.split())?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {split:?} of {} is empty",
            data.display()
        )));
    }
    Ok((Corpus::for_model(records, cfg)?, classes))
}

fn metrics_csv_with_prefix(prefix: Option<&Path>, first_step: u64, log: &MetricsLog) -> Result<String> {
    let mut csv = String::from(crate::training::metrics::METRICS_HEADER);
    csv.push('\n');
    if let Some(p) = prefix.filter(|p| p.exists()) {
        for line in fs::read_to_string(p)?.lines().skip(1) {
            let step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad metrics row {line:?}", p.display())))?;
            if step < first_step {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    csv.push_str(&log.csv_rows());
    Ok(csv)
}

fn cmd_pretrain<T: Scalar>(a: &PretrainArgs, resolved: &str, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let dir = prepare_outdir(&a.common, resolved)?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let cfg = match &resume {
        Some(ck) => crate::training::read_model_config(ck)?,
        None => a.model.config()?,
    };
    let corpus = match &a.data {
        Some(p) => corpus_for(p, a.split, &cfg)?.0,
        None => Corpus::for_model(
            generate_pool(Pool::A, a.gen_count, crate::data::DEFAULT_CLOUD_POINTS, a.seed)?,
            &cfg,
        )?,
    };
    let every = a.checkpoint_every;
    // a resumed run re-emits the rows its checkpoint already covered
    let first_step: u64 = match &resume {
        Some(ck) => ck.parse("train.step")?,
        None => 0,
    };
    let prefix = a.resume.as_deref().map(|p| p.with_extension("csv"));
    let started = Instant::now();
    let hook = |t: &mut Trainer<T>, epoch: usize| -> Result<()> {
        let _ = writeln!(
            err,
            "[{:>8.1}s] epoch {epoch} step {} loss {:.6}",
            started.elapsed().as_secs_f64(),
            t.step,
            t.metrics.last_loss().unwrap_or(f64::NAN)
        );
        if every > 0 && epoch.is_multiple_of(every) {
            let stem = dir.join(format!("pretrain_epoch{epoch:03}"));
            t.checkpoint().save(&stem.with_extension("ckpt"))?;
            fs::write(
                stem.with_extension("csv"),
                metrics_csv_with_prefix(prefix.as_deref(), first_step, &t.metrics)?,
            )?;
        }
        Ok(())
    };
    let trainer = match resume {
        Some(ck) => {
            let mut t = Trainer::<T>::from_checkpoint(&ck, corpus.len())?;
            t.run(&corpus, hook)?;
            t
        }
        None => {
            let pc = PretrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                base_lr: a.lr,
                weight_decay: a.weight_decay,
                warmup_fraction: a.warmup,
                dual_mask_ratio: a.ratio,
                seed: a.seed,
                clip_norm: a.clip_norm,
                augment: a.augment.then(AugmentConfig::default),
                checkpoint_every: a.checkpoint_every,
            };
            pretrain(Model::<T>::new(cfg, a.seed)?, &corpus, &pc, hook)?
        }
    };
    trainer.checkpoint().save(&dir.join("pretrain.ckpt"))?;
    fs::write(
        dir.join("pretrain.csv"),
        metrics_csv_with_prefix(prefix.as_deref(), first_step, &trainer.metrics)?,
    )?;
    match trainer.metrics.last_loss() {
        Some(l) => writeln!(out, "final_loss={l:.6} steps={}", trainer.step)?,
        None => writeln!(out, "final_loss=none steps={}", trainer.step)?,
    }
    Ok(())
}

struct Supervised<'a> {
    common: &'a CommonArgs,
    model: &'a ModelArgs,
    opt: &'a SupervisedArgs,
    data: &'a Path,
    split: SplitArg,
    seed: u64,
    kind: StageKind,
    checkpoint: Option<&'a Path>,
    init: InitMode,
    lambda: f64,
}

fn initial_model<T: Scalar>(s: &Supervised<'_>, classes: usize) -> Result<Model<T>> {
    let fresh = s.init == InitMode::FromScratch || (s.kind == StageKind::PostPretrain && s.checkpoint.is_none());
    let mut model = if fresh {
        let mut c = s.model.config()?;
        c.num_classes = classes;
        Model::new(c, s.seed)?
    } else {
        let path = s
            .checkpoint
            .ok_or_else(|| Error::InvalidArgument(format!("--init {} needs --checkpoint", s.init)))?;
        let ck = load_checkpoint(path)?;
        let expected = match s.init {
            InitMode::FromPostPretrain => StageKind::PostPretrain,
            _ => StageKind::Pretrain,
        };
        if let Some(kind) = ck.get("stage.kind") {
            if s.kind == StageKind::Finetune && kind != expected.to_string() {
                return Err(Error::ConfigMismatch(format!(
                    "--init {} expects a {expected} checkpoint, got {kind}",
                    s.init
                )));
            }
        }
        model_from_checkpoint::<T>(&ck)?
    };
    if model.config.num_classes != classes {
        model.reset_classifier(classes, s.seed)?;
    }
    Ok(model)
}

fn cmd_supervised<T: Scalar>(
    s: &Supervised<'_>,
    resolved: &str,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let dir = prepare_outdir(s.common, resolved)?;
    let (records, classes) = load_split(s.data, s.split.split())?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {:?} of {} is empty",
            s.split,
            s.data.display()
        )));
    }
    let model = initial_model::<T>(s, classes)?;
    let cfg = model.config;
    let corpus = Corpus::for_model(records, &cfg)?;
    let eval_records = match s.opt.eval_split.split() {
        Some(sp) => load_split(s.data, Some(sp))?.0,
        None => load_split(s.data, None)?.0,
    };
    let eval_corpus = if eval_records.is_empty() {
        None
    } else {
        Some(Corpus::for_model(eval_records, &cfg)?)
    };
    let fc = FinetuneConfig {
        lambda: s.lambda,
        epochs: s.opt.epochs,
        lr: s.opt.lr,
        weight_decay: s.opt.weight_decay,
        batch_size: s.opt.batch_size,
        warmup_fraction: s.opt.warmup,
        seed: s.seed,
        init: s.init,
        clip_norm: s.opt.clip_norm,
        augment: s.opt.augment.then(AugmentConfig::default),
        frozen: s
            .opt
            .freeze
            .split(',')
            .filter(|p| !p.is_empty())
            .map(str::to_string)
            .collect(),
    };
    let started = Instant::now();
    let hook = |t: &mut Trainer<T>, epoch: usize| -> Result<()> {
        let acc = match &eval_corpus {
            Some(ec) => {
                let acc = evaluate_corpus(&t.model, ec)?.accuracy;
                t.metrics.evals.push(EvalRecord {
                    epoch,
                    step: t.step,
                    accuracy: acc,
                });
                format!("{acc:.4}")
            }
            None => "-".into(),
        };
        let _ = writeln!(
            err,
            "[{:>8.1}s] epoch {epoch} step {} loss {:.6} eval {acc}",
            started.elapsed().as_secs_f64(),
            t.step,
            t.metrics.last_loss().unwrap_or(f64::NAN)
        );
        Ok(())
    };
    let trainer = match s.kind {
        StageKind::PostPretrain => post_pretrain(model, &corpus, &fc, hook)?,
        _ => finetune(model, &corpus, &fc, hook)?,
    };
    let stem = match s.kind {
        StageKind::PostPretrain => "post_pretrain",
        _ => "finetune",
    };
    trainer.checkpoint().save(&dir.join(format!("{stem}.ckpt")))?;
    fs::write(dir.join(format!("{stem}.csv")), trainer.metrics.to_csv())?;
    fs::write(dir.join(format!("{stem}_eval.csv")), trainer.metrics.eval_csv())?;
    let final_acc = evaluate_corpus(&trainer.model, eval_corpus.as_ref().unwrap_or(&corpus))?.accuracy;
    let loss = trainer
        .metrics
        .last_loss()
        .map_or("none".to_string(), |l| format!("{l:.6}"));
    writeln!(out, "final_loss={loss} accuracy={final_acc:.4}")?;
    Ok(())
}

fn cmd_eval<T: Scalar>(a: &EvalArgs, resolved: &str, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_outdir(&a.common, resolved)?;
    let model = model_from_checkpoint::<T>(&load_checkpoint(&a.checkpoint)?)?;
    let (corpus, _) = corpus_for(&a.data, a.split, &model.config)?;
    let report = evaluate_corpus(&model, &corpus)?;
    let labels = corpus.labels();
    let names = crate::data::CLASS_NAMES;
    let mut csv = String::from("class,name,count,correct,accuracy\n");
    for (c, acc) in report.per_class.iter().enumerate() {
        let count = labels.iter().filter(|&&l| l == c).count();
        let correct = labels
            .iter()
            .zip(&report.predictions)
            .filter(|(&l, &p)| l == c && p == c)
            .count();
        let name = names.get(c).copied().unwrap_or("");
        let acc = acc.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(csv, "{c},{name},{count},{correct},{acc}");
    }
    let correct = labels.iter().zip(&report.predictions).filter(|(l, p)| l == p).count();
    let _ = writeln!(csv, "all,,{},{correct},{}", report.count, report.accuracy);
    fs::write(dir.join("eval.csv"), csv)?;
    writeln!(out, "accuracy={:.4} count={}", report.accuracy, report.count)?;
    Ok(())
}

fn cmd_few_shot<T: Scalar>(a: &FewShotArgs, resolved: &str, out: &mut dyn Write) -> Result<()> {
    let dir = prepare_outdir(&a.common, resolved)?;
    let model = match &a.checkpoint {
        Some(p) => model_from_checkpoint::<T>(&load_checkpoint(p)?)?,
        None => Model::<T>::new(a.model.config()?, a.seed)?,
    };
    let (corpus, _) = corpus_for(&a.data, a.split, &model.config)?;
    let cfg = FewShotConfig {
        ways: a.ways,
        shots: a.shots,
        queries: a.queries,
        trials: a.trials,
        seed: a.seed,
        head_steps: a.head_steps,
        head_lr: a.head_lr,
        head_weight_decay: a.head_weight_decay,
        full_finetune: a.full_finetune.then(FinetuneConfig::default),
    };
    let report = few_shot_eval(&model, &corpus, &cfg)?;
    let mut csv = String::from("trial,accuracy\n");
    for (i, acc) in report.accuracies.iter().enumerate() {
        let _ = writeln!(csv, "{i},{acc}");
    }
    fs::write(dir.join("fewshot.csv"), csv)?;
    writeln!(
        out,
        "accuracy={report} ways={} shots={} trials={}",
        a.ways, a.shots, a.trials
    )?;
    Ok(())
}

fn cmd_inspect(a: &InspectArgs, resolved: &str, out: &mut dyn Write) -> Result<()> {
    prepare_outdir(&a.common, resolved)?;
    let cfg = a.model.config();
    if a.what == InspectWhat::Mask {
        let n = match a.n {
            Some(n) => n,
            None => cfg?.patches,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mask = build_dual_mask(n, a.ratio, &mut rng)?;
        write!(out, "{}", mask.mask.to_grid())?;
        return Ok(());
    }
    let cfg = cfg?;
    let input = a
        .input
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--input is required for morton and rdp".into()))?;
    let records = at(input, load_dataset(input))?;
    let record = records
        .get(a.index)
        .ok_or_else(|| Error::InvalidArgument(format!("{} holds {} records", input.display(), records.len())))?;
    let seq = prepare_sequence(&record.cloud, &cfg.sequencer(record.cloud.len()))?;
    match a.what {
        InspectWhat::Morton => {
            let keys = morton_keys(&seq.centers);
            for (i, (c, key)) in seq.centers.centers.iter().zip(keys).enumerate() {
                writeln!(
                    out,
                    "{i}\t{}\t{:#018x}\t{:.6} {:.6} {:.6}",
                    seq.centers.source_indices[i], key.0, c[0], c[1], c[2]
                )?;
            }
        }
        InspectWhat::Rdp => {
            for (i, u) in unit_offsets(&seq.centers.centers).iter().enumerate() {
                let norm = seq.rdp.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                writeln!(out, "{i}\t{:.6} {:.6} {:.6}\t{norm:.6}", u[0], u[1], u[2])?;
            }
        }
        InspectWhat::Mask => unreachable!(),
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, resolved: &str, out: &mut dyn Write) -> Result<()> {
    prepare_outdir(&a.common, resolved)?;
    let corrupt = a
        .corrupt
        .as_deref()
        .map(|op| *CORRUPTIBLE.iter().find(|&&c| c == op).expect("validated by clap"));
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        max_entries: a.max_entries,
        corrupt,
        corrupt_factor: a.corrupt_factor,
    };
    let reports = gradcheck_suite(opts, a.seed)?;
    debug_assert_eq!(reports.len(), suite_names().len());
    write!(out, "{}", format_report(&reports))?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_err))
        .collect();
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", reports.len())?;
        Ok(())
    } else {
        Err(Error::Gradcheck(failed.join(", ")))
    }
}
