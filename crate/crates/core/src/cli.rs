//! The `rpo` command line: one flat configuration schema shared by every
//! subcommand, with flags overriding config-file values key for key.
//!
//! Precedence for each key: flag, then `RPO_EMBED_ENDPOINT` (endpoint only),
//! then the `--config` file, then the built-in default. The resolved values
//! are written to `<out>/manifest.toml`, which can be passed back as
//! `--config` to reproduce the run.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::embed::{EmbedError, EmbeddingProvider, ProviderConfig};
use crate::evalkit::{self, chosen_baselines, decode_all, EvalError, SweepAxis, SweepSetup};
use crate::losses::{AlignConfig, Method, Strategy, DEFAULT_TAU_PAIRED, DEFAULT_TAU_UNPAIRED};
use crate::policy::{DecodeConfig, ModelParams, ModelShape, PolicyError};
use crate::prefdata::{self, DataError, PairedBatch, PreferencePair};
use crate::synth::{self, JudgeOracle, SynthConfig, SynthError};
use crate::trainer::{self, AlignData, OptimizerConfig, TrainConfig, TrainError};

pub const EMBED_ENDPOINT_ENV: &str = "RPO_EMBED_ENDPOINT";
pub const GRADCHECK_THRESHOLD: f64 = 1e-5;
const GRADCHECK_FIXTURE: &str = include_str!("../fixtures/gradcheck_pairs.jsonl");
const TINY_SHAPE: ModelShape = ModelShape {
    window: 4,
    embed_dim: 8,
    hidden: 16,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs. Exit code 1.
    Usage(String),
    /// Training, numeric or provider failure. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        usage(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::NonFinite(..) => runtime(e),
            _ => usage(e),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::NonFinite(_) => runtime(e),
            _ => usage(e),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::InvalidDim(_) | EmbedError::Io { .. } | EmbedError::Record { .. } => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Embed(_) => runtime(e),
            TrainError::Policy(p) => p.into(),
            _ => usage(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            _ => usage(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Bow,
    File,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Sgd,
}

/// The flat configuration schema. Every key has a matching `--flag`
/// (underscores become dashes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Subcommand that produced a manifest; informational.
    pub command: Option<String>,
    pub seed: u64,
    pub out: PathBuf,
    /// Paired JSONL dataset.
    pub data: Option<PathBuf>,
    /// Unpaired JSONL dataset; takes precedence over `data` for align/sweep.
    pub unpaired_data: Option<PathBuf>,
    /// Split paired data into unpaired examples before aligning.
    pub decompose: bool,
    /// Starting checkpoint (align, sweep) or the policy under test (eval).
    pub init: Option<PathBuf>,
    /// Judge sidecar written by `synth`.
    pub oracle: Option<PathBuf>,
    /// Checkpoint whose decodes serve as the eval baseline.
    pub baseline: Option<PathBuf>,

    pub method: Method,
    pub strategy: Strategy,
    /// Defaults to 0.5 for paired and 0.75 for unpaired data.
    pub tau: Option<f64>,
    pub beta: f64,
    pub alpha: f64,
    pub kto_weight_desirable: f64,
    pub kto_weight_undesirable: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub grad_clip: Option<f64>,
    pub record_steps: bool,

    /// Model dimensions; `gradcheck` defaults to a 4/8/16 model, everything
    /// else to 8/16/64.
    pub window: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub init_scale: f64,

    pub provider: ProviderKind,
    pub bow_dim: usize,
    pub embed_endpoint: Option<String>,
    pub embed_file: Option<PathBuf>,
    pub embed_timeout_secs: f64,
    pub embed_fallback_dim: Option<usize>,

    pub temperature: f64,
    pub max_new: usize,
    pub decode_seed: u64,
    pub eval_prompts: usize,
    pub eval_seed: u64,

    pub num_clusters: usize,
    pub prompts_per_cluster: usize,

    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        let align = AlignConfig::default();
        let synth = SynthConfig::default();
        Self {
            command: None,
            seed: 0,
            out: PathBuf::from("rpo-out"),
            data: None,
            unpaired_data: None,
            decompose: false,
            init: None,
            oracle: None,
            baseline: None,
            method: align.method,
            strategy: align.strategy,
            tau: None,
            beta: align.beta,
            alpha: align.alpha,
            kto_weight_desirable: align.kto_weight_desirable,
            kto_weight_undesirable: align.kto_weight_undesirable,
            epochs: 1,
            batch_size: trainer::DEFAULT_BATCH_SIZE,
            lr: trainer::DEFAULT_LR,
            optimizer: OptimizerKind::Rmsprop,
            rmsprop_decay: 0.99,
            rmsprop_epsilon: 1e-8,
            grad_clip: None,
            record_steps: false,
            window: None,
            embed_dim: None,
            hidden: None,
            init_scale: crate::policy::DEFAULT_INIT_SCALE,
            provider: ProviderKind::Bow,
            bow_dim: 256,
            embed_endpoint: None,
            embed_file: None,
            embed_timeout_secs: crate::embed::DEFAULT_HTTP_TIMEOUT.as_secs_f64(),
            embed_fallback_dim: None,
            temperature: 0.0,
            max_new: evalkit::DEFAULT_MAX_NEW,
            decode_seed: 0,
            eval_prompts: 256,
            eval_seed: 1,
            num_clusters: synth.num_clusters,
            prompts_per_cluster: synth.prompts_per_cluster,
            sweep_axis: None,
            sweep_values: Vec::new(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rpo",
    version,
    about = "Train and evaluate preference-aligned byte-level language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset and its judge.
    Synth,
    /// Supervised fine-tuning on chosen responses.
    Sft,
    /// Preference alignment starting from --init.
    Align,
    /// Win rate of --init against a baseline, judged by --oracle.
    Eval,
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck,
    /// Train and evaluate once per value of --sweep-axis.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Sft => "sft",
            Command::Align => "align",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Default, Args)]
struct Flags {
    /// TOML file using the same keys as the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for shuffling, sampling and initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Paired preference JSONL.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Unpaired preference JSONL.
    #[arg(long, global = true)]
    unpaired_data: Option<PathBuf>,
    /// Split --data into unpaired records before aligning.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    decompose: Option<bool>,
    /// Starting checkpoint (also the frozen reference for align).
    #[arg(long, global = true)]
    init: Option<PathBuf>,
    /// Judge oracle JSON written by synth.
    #[arg(long, global = true)]
    oracle: Option<PathBuf>,
    /// Checkpoint whose decodes are the eval baseline.
    #[arg(long, global = true)]
    baseline: Option<PathBuf>,
    /// Loss: rpo, dpo, ipo or kto.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// RPO weighting: embedding, uniform or diagonal.
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Softmax temperature for embedding weights.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Reward scale.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Diagonal weight for the diagonal strategy.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    kto_weight_desirable: Option<f64>,
    #[arg(long, global = true)]
    kto_weight_undesirable: Option<f64>,
    /// Passes over the data.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Examples per step (per side when unpaired).
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, global = true)]
    rmsprop_decay: Option<f64>,
    #[arg(long, global = true)]
    rmsprop_epsilon: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long, global = true)]
    grad_clip: Option<f64>,
    /// Keep per-step log-ratios and weights in report.json.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    record_steps: Option<bool>,
    /// Context bytes seen by the model.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Byte embedding width.
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    /// Hidden layer width.
    #[arg(long, global = true)]
    hidden: Option<usize>,
    /// Standard deviation of initial weights.
    #[arg(long, global = true)]
    init_scale: Option<f64>,
    /// Prompt embedding source.
    #[arg(long, global = true)]
    provider: Option<ProviderKind>,
    /// Hashed bag-of-words dimension.
    #[arg(long, global = true)]
    bow_dim: Option<usize>,
    /// Embedding server URL (also RPO_EMBED_ENDPOINT).
    #[arg(long, global = true)]
    embed_endpoint: Option<String>,
    /// JSONL of precomputed prompt embeddings.
    #[arg(long, global = true)]
    embed_file: Option<PathBuf>,
    #[arg(long, global = true)]
    embed_timeout_secs: Option<f64>,
    /// Fall back to bag-of-words of this dimension when the server fails.
    #[arg(long, global = true)]
    embed_fallback_dim: Option<usize>,
    /// Decoding temperature; 0 is greedy.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Maximum generated bytes.
    #[arg(long, global = true)]
    max_new: Option<usize>,
    #[arg(long, global = true)]
    decode_seed: Option<u64>,
    /// Number of held-out prompts to judge.
    #[arg(long, global = true)]
    eval_prompts: Option<usize>,
    /// Seed for held-out prompt generation.
    #[arg(long, global = true)]
    eval_seed: Option<u64>,
    /// Prompt clusters in the synthetic task.
    #[arg(long, global = true)]
    num_clusters: Option<usize>,
    #[arg(long, global = true)]
    prompts_per_cluster: Option<usize>,
    /// tau, beta, batch_size or temperature.
    #[arg(long, global = true)]
    sweep_axis: Option<SweepAxis>,
    /// Comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    sweep_values: Option<Vec<f64>>,
}

impl Flags {
    fn apply(self, s: &mut Settings) {
        macro_rules! set {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { s.$field = v; })*
            };
        }
        macro_rules! set_opt {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { s.$field = Some(v); })*
            };
        }
        set!(
            seed,
            out,
            decompose,
            method,
            strategy,
            beta,
            alpha,
            kto_weight_desirable,
            kto_weight_undesirable,
            epochs,
            batch_size,
            lr,
            optimizer,
            rmsprop_decay,
            rmsprop_epsilon,
            record_steps,
            init_scale,
            provider,
            bow_dim,
            embed_timeout_secs,
            temperature,
            max_new,
            decode_seed,
            eval_prompts,
            eval_seed,
            num_clusters,
            prompts_per_cluster,
            sweep_values,
        );
        set_opt!(
            data,
            unpaired_data,
            init,
            oracle,
            baseline,
            tau,
            grad_clip,
            window,
            embed_dim,
            hidden,
            embed_endpoint,
            embed_file,
            embed_fallback_dim,
            sweep_axis,
        );
    }
}

/// Loads `--config` (if any), then applies the environment and flags.
fn resolve(flags: Flags, command: Command) -> Result<Settings, CliError> {
    let mut settings = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<Settings>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => Settings::default(),
    };
    if let Ok(endpoint) = std::env::var(EMBED_ENDPOINT_ENV) {
        if !endpoint.is_empty() {
            settings.embed_endpoint = Some(endpoint);
        }
    }
    flags.apply(&mut settings);
    settings.command = Some(command.name().to_string());
    let default_shape = if command == Command::Gradcheck {
        TINY_SHAPE
    } else {
        ModelShape::default()
    };
    settings.window.get_or_insert(default_shape.window);
    settings.embed_dim.get_or_insert(default_shape.embed_dim);
    settings.hidden.get_or_insert(default_shape.hidden);
    Ok(settings)
}

impl Settings {
    pub fn shape(&self) -> Result<ModelShape, CliError> {
        let d = ModelShape::default();
        Ok(ModelShape::new(
            self.window.unwrap_or(d.window),
            self.embed_dim.unwrap_or(d.embed_dim),
            self.hidden.unwrap_or(d.hidden),
        )?)
    }

    pub fn align_config(&self, paired: bool) -> AlignConfig {
        let default_tau = if paired {
            DEFAULT_TAU_PAIRED
        } else {
            DEFAULT_TAU_UNPAIRED
        };
        AlignConfig {
            method: self.method,
            strategy: self.strategy,
            beta: self.beta,
            tau: self.tau.unwrap_or(default_tau),
            alpha: self.alpha,
            kto_weight_desirable: self.kto_weight_desirable,
            kto_weight_undesirable: self.kto_weight_undesirable,
        }
    }

    pub fn train_config(&self, paired: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: match self.optimizer {
                OptimizerKind::Rmsprop => OptimizerConfig::Rmsprop {
                    decay: self.rmsprop_decay,
                    epsilon: self.rmsprop_epsilon,
                },
                OptimizerKind::Sgd => OptimizerConfig::Sgd,
            },
            align: self.align_config(paired),
            seed: self.seed,
            grad_clip: self.grad_clip,
            record_steps: self.record_steps,
        }
    }

    pub fn provider_config(&self) -> Result<ProviderConfig, CliError> {
        Ok(match self.provider {
            ProviderKind::Bow => ProviderConfig::HashedBow { dim: self.bow_dim },
            ProviderKind::File => ProviderConfig::File {
                path: self
                    .embed_file
                    .clone()
                    .ok_or_else(|| usage("--provider file needs --embed-file"))?,
            },
            ProviderKind::Http => ProviderConfig::Http {
                endpoint: self.embed_endpoint.clone().ok_or_else(|| {
                    usage(format!(
                        "--provider http needs --embed-endpoint or {EMBED_ENDPOINT_ENV}"
                    ))
                })?,
                timeout_secs: self.embed_timeout_secs,
                fallback_dim: self.embed_fallback_dim,
            },
        })
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            max_new: self.max_new,
            temperature: self.temperature,
            seed: self.decode_seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_clusters: self.num_clusters,
            prompts_per_cluster: self.prompts_per_cluster,
            reward_seed: self.seed,
            sample_seed: self.seed,
            ..SynthConfig::default()
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.max_new == 0 {
            return Err(usage("max_new must be >= 1"));
        }
        if !(self.temperature >= 0.0) {
            return Err(usage("temperature must be >= 0"));
        }
        if !(self.embed_timeout_secs > 0.0) {
            return Err(usage("embed_timeout_secs must be > 0"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(usage("init_scale must be finite and >= 0"));
        }
        self.shape()?;
        Ok(())
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| usage(format!("this command needs --{}", key.replace('_', "-"))))
    }

    fn load_pairs(&self) -> Result<Vec<PreferencePair>, CliError> {
        Ok(prefdata::load_paired(self.require(&self.data, "data")?)?)
    }

    fn load_align_data(&self) -> Result<AlignData, CliError> {
        if let Some(path) = &self.unpaired_data {
            return Ok(AlignData::Unpaired(prefdata::load_unpaired(path)?));
        }
        let pairs = self.load_pairs()?;
        Ok(if self.decompose {
            AlignData::Unpaired(prefdata::decompose_to_unpaired(&pairs, self.seed)?)
        } else {
            AlignData::Paired(pairs)
        })
    }

    fn load_oracle(&self) -> Result<JudgeOracle, CliError> {
        Ok(JudgeOracle::load(self.require(&self.oracle, "oracle")?)?)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).map_err(runtime)?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

fn write_manifest(settings: &Settings) -> Result<PathBuf, CliError> {
    let path = settings.out.join("manifest.toml");
    let text = toml::to_string(settings).map_err(runtime)?;
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let command = cli.command;
    let mut settings = resolve(cli.flags, command)?;
    settings.validate()?;
    fs::create_dir_all(&settings.out).map_err(|e| usage(format!("{}: {e}", settings.out.display())))?;
    match command {
        Command::Synth => synth_cmd(&settings),
        Command::Sft => sft_cmd(&settings),
        Command::Align => align_cmd(&mut settings),
        Command::Eval => eval_cmd(&settings),
        Command::Gradcheck => gradcheck_cmd(&settings),
        Command::Sweep => sweep_cmd(&mut settings),
    }
}

fn say(line: impl fmt::Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn synth_cmd(s: &Settings) -> Result<(), CliError> {
    write_manifest(s)?;
    let data = synth::generate(&s.synth_config())?;
    let pairs_path = s.out.join("pairs.jsonl");
    prefdata::write_paired(&pairs_path, &data.pairs)?;
    let unpaired = prefdata::decompose_to_unpaired(&data.pairs, s.seed)?;
    prefdata::write_unpaired(s.out.join("unpaired.jsonl"), &unpaired)?;
    data.oracle.save(s.out.join("oracle.json"))?;
    say(format!(
        "wrote {} pairs over {} clusters to {}",
        data.pairs.len(),
        data.oracle.clusters.len(),
        pairs_path.display()
    ));
    Ok(())
}

fn sft_cmd(s: &Settings) -> Result<(), CliError> {
    write_manifest(s)?;
    let pairs = s.load_pairs()?;
    let cfg = s.train_config(true);
    let init = ModelParams::init(s.shape()?, s.seed, s.init_scale)?;
    let (params, report) = trainer::train_sft_from(&cfg, init, &pairs)?;
    params.save(s.out.join("model.bin"))?;
    write_json(&s.out.join("report.json"), &report)?;
    say(format!(
        "sft: {} steps, final epoch loss {:.6}, {:.1}s",
        report.steps,
        report.epoch_mean_loss.last().copied().unwrap_or(f64::NAN),
        report.wall_clock.as_secs_f64()
    ));
    Ok(())
}

fn align_cmd(s: &mut Settings) -> Result<(), CliError> {
    let data = s.load_align_data()?;
    let paired = matches!(data, AlignData::Paired(_));
    let cfg = s.train_config(paired);
    s.tau = Some(cfg.align.tau);
    write_manifest(s)?;
    say(format!(
        "align: method={} strategy={} tau={} beta={} alpha={} lr={} batch_size={} epochs={}",
        cfg.align.method,
        cfg.align.strategy,
        cfg.align.tau,
        cfg.align.beta,
        cfg.align.alpha,
        cfg.lr,
        cfg.batch_size,
        cfg.epochs
    ));
    let sft = ModelParams::load(s.require(&s.init, "init")?)?;
    let mut provider = EmbeddingProvider::from_config(&s.provider_config()?)?;
    let (policy, report) = trainer::train_align(&cfg, &data, &sft, &mut provider)?;
    policy.save(s.out.join("model.bin"))?;
    write_json(&s.out.join("report.json"), &report)?;
    let m = report.margins_after.expect("align reports margins");
    say(format!(
        "align: {} steps, final epoch loss {:.6}, reward margin {:.6}, {:.1}s",
        report.steps,
        report.epoch_mean_loss.last().copied().unwrap_or(f64::NAN),
        m.margin(),
        report.wall_clock.as_secs_f64()
    ));
    Ok(())
}

/// Evaluation prompts and their baseline responses.
fn eval_targets(
    s: &Settings,
    oracle: &JudgeOracle,
) -> Result<(Vec<String>, std::collections::BTreeMap<String, String>), CliError> {
    let decode = s.decode_config();
    if let Some(path) = &s.baseline {
        let baseline = ModelParams::load(path)?;
        let prompts = synth::generate_prompts(oracle, s.eval_prompts, s.eval_seed);
        let baselines = decode_all(&baseline, &prompts, &decode);
        return Ok((prompts, baselines));
    }
    if s.data.is_some() {
        let baselines = chosen_baselines(&s.load_pairs()?);
        let prompts: Vec<String> = baselines.keys().take(s.eval_prompts).cloned().collect();
        return Ok((prompts, baselines));
    }
    Err(usage(
        "eval needs --baseline (checkpoint) or --data (chosen responses as baseline)",
    ))
}

fn eval_cmd(s: &Settings) -> Result<(), CliError> {
    write_manifest(s)?;
    let policy = ModelParams::load(s.require(&s.init, "init")?)?;
    let oracle = s.load_oracle()?;
    let (prompts, baselines) = eval_targets(s, &oracle)?;
    let report = evalkit::win_rate(&policy, &baselines, &prompts, &oracle, &s.decode_config())?;
    write_jsonl(&s.out.join("eval_records.jsonl"), &report.records)?;
    let summary = serde_json::json!({
        "win_rate": report.win_rate,
        "tie_rate": report.tie_rate,
        "loss_rate": report.loss_rate,
        "mean_candidate_reward": report.mean_candidate_reward,
        "mean_baseline_reward": report.mean_baseline_reward,
        "prompts": report.records.len(),
    });
    write_json(&s.out.join("eval.json"), &summary)?;
    say(format!(
        "eval: win_rate={:.4} tie_rate={:.4} loss_rate={:.4} over {} prompts",
        report.win_rate,
        report.tie_rate,
        report.loss_rate,
        report.records.len()
    ));
    Ok(())
}

fn gradcheck_cmd(s: &Settings) -> Result<(), CliError> {
    write_manifest(s)?;
    let pairs = match &s.data {
        Some(path) => prefdata::load_paired(path)?,
        None => prefdata::parse_paired(GRADCHECK_FIXTURE)?,
    };
    let batch = PairedBatch::from_pairs(pairs.iter().take(4));
    let shape = s.shape()?;
    let policy = ModelParams::init(shape, s.seed, s.init_scale)?;
    let reference = ModelParams::init(shape, s.seed.wrapping_add(1), s.init_scale)?;
    let mut provider = EmbeddingProvider::from_config(&s.provider_config()?)?;
    let cfg = s.align_config(true);
    let report = trainer::gradcheck(&policy, &reference, &batch, &cfg, &mut provider)?;
    write_json(&s.out.join("gradcheck.json"), &report)?;
    say(format!(
        "gradcheck: method={} strategy={} params={} max_rel_error={:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        report.method,
        report.strategy,
        report.num_params,
        report.max_rel_error,
        report.worst_param,
        report.analytic,
        report.numeric
    ));
    if report.max_rel_error < GRADCHECK_THRESHOLD {
        Ok(())
    } else {
        Err(runtime(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_THRESHOLD:e}",
            report.max_rel_error
        )))
    }
}

fn sweep_cmd(s: &mut Settings) -> Result<(), CliError> {
    let axis = s.sweep_axis.ok_or_else(|| usage("sweep needs --sweep-axis"))?;
    if s.sweep_values.is_empty() {
        return Err(usage("sweep needs --sweep-values"));
    }
    let data = s.load_align_data()?;
    let paired = matches!(data, AlignData::Paired(_));
    let cfg = s.train_config(paired);
    s.tau = Some(cfg.align.tau);
    write_manifest(s)?;
    let sft = ModelParams::load(s.require(&s.init, "init")?)?;
    let oracle = s.load_oracle()?;
    let prompts = synth::generate_prompts(&oracle, s.eval_prompts, s.eval_seed);
    let baseline = match &s.baseline {
        Some(path) => ModelParams::load(path)?,
        None => sft.clone(),
    };
    let baselines = decode_all(&baseline, &prompts, &s.decode_config());
    let mut provider = EmbeddingProvider::from_config(&s.provider_config()?)?;
    let setup = SweepSetup {
        base: cfg,
        data: &data,
        sft: &sft,
        prompts: &prompts,
        baselines: &baselines,
        judge: &oracle,
        decode: s.decode_config(),
    };
    let rows = evalkit::sweep(axis, &s.sweep_values, &setup, &mut provider)?;
    write_jsonl(&s.out.join("sweep.jsonl"), &rows)?;
    for row in &rows {
        match (&row.win_rate, &row.error) {
            (Some(w), _) => say(format!(
                "{}={} win_rate={:.4} final_loss={:.6}",
                axis,
                row.value,
                w,
                row.final_loss.unwrap_or(f64::NAN)
            )),
            (None, Some(e)) => say(format!("{}={} error: {e}", axis, row.value)),
            (None, None) => {}
        }
    }
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(runtime("every sweep cell failed"));
    }
    Ok(())
}
