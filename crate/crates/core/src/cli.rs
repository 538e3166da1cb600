//! The `pomp` command line: flat config files, subcommands and CSV reports.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{metrics_csv, probe, zero_shot_eval};
use crate::data::{
    generate_synthetic, localize, read_features, write_features, FeatureDataset, SyntheticSpec,
};
use crate::encoder::{
    init_prompt, read_vocabulary, write_token_embeddings, write_vocabulary, ClassVocabulary,
    EncoderKind, FrozenTextEncoder,
};
use crate::error::PompError;
use crate::gradcheck::{run_grad_check, GradCheckConfig, KChoice};
use crate::numerics::reset_peak;
use crate::sampling::DistributionKind;
use crate::training::{
    linear_fit, load_checkpoint, measure_step_memory, save_checkpoint, train, Checkpoint, LossPath,
    MemoryFixture, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;
pub const EXIT_GRAD_CHECK: i32 = 6;
pub const EXIT_MEMORY: i32 = 7;

pub const PRETRAIN_FEATURES: &str = "pretrain.feat";
pub const PRETRAIN_LABELS: &str = "pretrain.labl";
pub const HELDOUT_FEATURES: &str = "heldout.feat";
pub const HELDOUT_LABELS: &str = "heldout.labl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const EMBEDDING_FILE: &str = "tokens.embd";
pub const CHECKPOINT_FILE: &str = "checkpoint.pomp";

/// Every accepted config key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for data generation, initialization and sampling"),
    ("encoder_seed", "seed of the frozen text encoder (defaults to seed)"),
    ("encoder", "frozen encoder kind: linear | tanh"),
    ("data_dir", "directory holding generated data (defaults to the output directory)"),
    ("out", "output directory"),
    ("checkpoint", "checkpoint path (defaults to <out>/checkpoint.pomp)"),
    ("split", "evaluation split: pretrain | heldout"),
    ("n_classes", "generator: number of classes"),
    ("d", "generator: image / class feature dimension"),
    ("e", "generator: token embedding dimension"),
    ("tokens_per_class", "generator: tokens per class name"),
    ("shots", "generator: images per class"),
    ("noise_sigma", "generator: image noise standard deviation"),
    ("zipf_exponent", "generator: class frequency exponent"),
    ("heldout_fraction", "generator: fraction of classes held out"),
    ("k", "classes per training step"),
    ("batch_size", "images per step"),
    ("epochs", "training epochs"),
    ("lr0", "initial learning rate"),
    ("tau", "softmax temperature"),
    ("prompt_len", "soft prompt length"),
    ("distribution", "negative proposal: uniform | frequency | similarity"),
    ("similarity_tau", "temperature of the similarity proposal"),
    ("margin", "adaptive | fixed non-negative margin"),
    ("per_image_sampling", "draw a class set per image instead of per batch"),
    ("loss_path", "sampled | full"),
    ("parallel", "encode step classes on the worker pool"),
    ("grad_check_classes", "grad-check: classes per fixture"),
    ("grad_check_fixtures", "grad-check: fixtures per cell"),
    ("grad_check_h", "grad-check: finite-difference step"),
    ("grad_check_tolerance", "grad-check: relative error bound"),
    ("grad_check_flip_sign", "grad-check: flip the positive term (harness self-test)"),
    ("bench_k", "bench-memory: comma-separated K values"),
    ("ablate_margins", "ablate: comma-separated margins, `adaptive` allowed"),
    ("ablate_distributions", "ablate: comma-separated proposal kinds"),
    ("ablate_k", "ablate: comma-separated K values"),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(PompError),
    #[error("training failed: {0}")]
    Training(PompError),
    #[error("checkpoint error: {0}")]
    Checkpoint(PompError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("memory benchmark failed: {0}")]
    Memory(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Training(_) => EXIT_TRAINING,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
            CliError::GradCheck(_) => EXIT_GRAD_CHECK,
            CliError::Memory(_) => EXIT_MEMORY,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Parsed `key = value` pairs. File values come first; `--set` and the
/// dedicated flags override them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<String, String>,
    overridden: Vec<String>,
}

fn check_key(key: &str) -> CliResult<()> {
    if CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(CliError::Config(format!("unknown config key `{key}`")))
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = CliConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            check_key(k).map_err(|e| CliError::Config(format!("line {}: {}", i + 1, config_body(&e))))?;
            if cfg.values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(PompError::io(path, e)))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override. Overriding the same key twice is an
    /// error.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        check_key(key)?;
        if self.overridden.iter().any(|k| k == key) {
            return Err(CliError::Config(format!("duplicate override for `{key}`")));
        }
        self.overridden.push(key.to_string());
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    fn list<T: FromStr>(&self, key: &str, default: &str) -> CliResult<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key).unwrap_or(default);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    /// SHA-256 of the sorted `key=value` lines, hex encoded.
    pub fn digest(&self) -> String {
        let mut canon = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(canon, "{k}={v}");
        }
        hex(&Sha256::digest(canon.as_bytes()))
    }
}

fn config_body(e: &CliError) -> String {
    match e {
        CliError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Pretrain,
    Heldout,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Heldout => "heldout",
        }
    }

    fn files(self) -> (&'static str, &'static str) {
        match self {
            Split::Pretrain => (PRETRAIN_FEATURES, PRETRAIN_LABELS),
            Split::Heldout => (HELDOUT_FEATURES, HELDOUT_LABELS),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "heldout" => Ok(Split::Heldout),
            other => Err(format!("unknown split `{other}` (expected pretrain or heldout)")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pomp", version, about = "Sampled-softmax soft-prompt pre-training")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic class universe and its two splits.
    GenData,
    /// Pre-train a soft prompt on the pre-training split.
    Pretrain,
    /// Zero-shot evaluation of a checkpoint.
    Eval {
        /// Also evaluate a freshly initialized prompt.
        #[arg(long)]
        with_control: bool,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Alignment and uniformity of a checkpoint's class features.
    Probe {
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Analytic vs finite-difference prompt gradients on random fixtures.
    GradCheck,
    /// Per-step memory against the cost model over a sweep of K.
    BenchMemory,
    /// Train and probe every cell of a margin × distribution × K grid.
    Ablate,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("pomp: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("POMP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("POMP_THREADS must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let mut conf = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    for pair in &cli.set {
        conf.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        conf.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        conf.set("out", &out.to_string_lossy())?;
    }
    match cli.command {
        Command::GenData => cmd_gen_data(&conf),
        Command::Pretrain => cmd_pretrain(&conf),
        Command::Eval { with_control, split } => cmd_eval(&conf, split, with_control),
        Command::Probe { split } => cmd_probe(&conf, split),
        Command::GradCheck => cmd_grad_check(&conf),
        Command::BenchMemory => cmd_bench_memory(&conf),
        Command::Ablate => cmd_ablate(&conf),
    }
}

fn out_dir(conf: &CliConfig) -> CliResult<PathBuf> {
    let dir: PathBuf = conf.get_or("out", PathBuf::from("pomp-out"))?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(PompError::io(&dir, e)))?;
    Ok(dir)
}

fn data_dir(conf: &CliConfig) -> CliResult<PathBuf> {
    match conf.get::<PathBuf>("data_dir")? {
        Some(d) => Ok(d),
        None => conf.get_or("out", PathBuf::from("pomp-out")),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(PompError::io(path, e)))
}

/// Generator parameters, defaulting to the standard fixture.
pub fn synthetic_spec(conf: &CliConfig) -> CliResult<SyntheticSpec> {
    let base = SyntheticSpec::standard();
    Ok(SyntheticSpec {
        n_classes: conf.get_or("n_classes", base.n_classes)?,
        d: conf.get_or("d", base.d)?,
        e: conf.get_or("e", base.e)?,
        tokens_per_class: conf.get_or("tokens_per_class", base.tokens_per_class)?,
        shots: conf.get_or("shots", base.shots)?,
        noise_sigma: conf.get_or("noise_sigma", base.noise_sigma)?,
        zipf_exponent: conf.get_or("zipf_exponent", base.zipf_exponent)?,
        heldout_fraction: conf.get_or("heldout_fraction", base.heldout_fraction)?,
        seed: conf.get_or("seed", base.seed)?,
    })
}

fn parse_margin(raw: &str) -> CliResult<Option<f64>> {
    if raw == "adaptive" {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| CliError::Config(format!("margin must be `adaptive` or a number, got `{raw}`")))
}

/// Training parameters from the config; `seed` is required.
pub fn train_config(conf: &CliConfig) -> CliResult<TrainConfig> {
    let base = TrainConfig::default();
    let loss_path = match conf.raw("loss_path").unwrap_or("sampled") {
        "sampled" => LossPath::Sampled,
        "full" => LossPath::FullSoftmax,
        other => return Err(CliError::Config(format!("loss_path must be sampled or full, got `{other}`"))),
    };
    let cfg = TrainConfig {
        k: conf.get_or("k", base.k)?,
        batch_size: conf.get_or("batch_size", base.batch_size)?,
        epochs: conf.get_or("epochs", base.epochs)?,
        lr0: conf.get_or("lr0", base.lr0)?,
        tau: conf.get_or("tau", base.tau)?,
        prompt_len: conf.get_or("prompt_len", base.prompt_len)?,
        distribution: conf.get_or("distribution", base.distribution)?,
        similarity_tau: conf.get_or("similarity_tau", base.similarity_tau)?,
        margin_override: parse_margin(conf.raw("margin").unwrap_or("adaptive"))?,
        seed: conf.require("seed")?,
        per_image_sampling: conf.get_or("per_image_sampling", base.per_image_sampling)?,
        loss_path,
        parallel: conf.get_or("parallel", base.parallel)?,
    };
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn encoder_kind(conf: &CliConfig) -> CliResult<EncoderKind> {
    conf.get_or("encoder", EncoderKind::MeanPoolLinear)
}

fn encoder_seed(conf: &CliConfig) -> CliResult<u64> {
    match conf.get("encoder_seed")? {
        Some(s) => Ok(s),
        None => conf.require("seed"),
    }
}

/// Vocabulary, encoder and one split localized to its own class set.
pub struct SplitData {
    pub vocab: ClassVocabulary,
    pub dataset: FeatureDataset,
    pub encoder: FrozenTextEncoder,
}

fn load_split(conf: &CliConfig, split: Split) -> CliResult<SplitData> {
    let dir = data_dir(conf)?;
    let vocab = read_vocabulary(&dir.join(VOCAB_FILE), &dir.join(EMBEDDING_FILE)).map_err(CliError::Io)?;
    let (feat, labl) = split.files();
    let dataset = read_features(&dir.join(feat), &dir.join(labl)).map_err(CliError::Io)?;
    if let Some(d) = conf.get::<usize>("d")? {
        dataset.check_dim(d).map_err(CliError::Io)?;
    }
    let (vocab, dataset) = localize(&vocab, &dataset).map_err(CliError::Io)?;
    let encoder = FrozenTextEncoder::new(encoder_kind(conf)?, encoder_seed(conf)?, vocab.embed_dim(), dataset.dim())
        .map_err(config_err)?;
    Ok(SplitData {
        vocab,
        dataset,
        encoder,
    })
}

fn checksum_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(PompError::io(path, e)))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn cmd_gen_data(conf: &CliConfig) -> CliResult<()> {
    conf.require::<u64>("seed")?;
    let spec = synthetic_spec(conf)?;
    let universe = generate_synthetic(&spec).map_err(config_err)?;
    let dir = out_dir(conf)?;
    let io = CliError::Io;
    write_features(&dir.join(PRETRAIN_FEATURES), &dir.join(PRETRAIN_LABELS), &universe.pretrain).map_err(io)?;
    write_features(&dir.join(HELDOUT_FEATURES), &dir.join(HELDOUT_LABELS), &universe.heldout).map_err(io)?;
    write_vocabulary(&dir.join(VOCAB_FILE), &universe.vocab).map_err(io)?;
    write_token_embeddings(&dir.join(EMBEDDING_FILE), universe.vocab.token_embeddings()).map_err(io)?;
    for name in [PRETRAIN_FEATURES, PRETRAIN_LABELS, HELDOUT_FEATURES, HELDOUT_LABELS, VOCAB_FILE, EMBEDDING_FILE] {
        let path = dir.join(name);
        println!("{}  {}", checksum_file(&path)?, path.display());
    }
    Ok(())
}

fn checkpoint_path(conf: &CliConfig) -> CliResult<PathBuf> {
    match conf.get::<PathBuf>("checkpoint")? {
        Some(p) => Ok(p),
        None => Ok(conf.get_or("out", PathBuf::from("pomp-out"))?.join(CHECKPOINT_FILE)),
    }
}

fn check_k(cfg: &TrainConfig, n: usize) -> CliResult<()> {
    if cfg.k > n {
        return Err(CliError::Config(format!(
            "K = {} exceeds the number of pre-training classes N = {n} (K <= N required)",
            cfg.k
        )));
    }
    if cfg.loss_path == LossPath::FullSoftmax && cfg.k != n {
        return Err(CliError::Config(format!("loss_path = full requires K = N = {n}")));
    }
    Ok(())
}

fn cmd_pretrain(conf: &CliConfig) -> CliResult<()> {
    let cfg = train_config(conf)?;
    let data = load_split(conf, Split::Pretrain)?;
    check_k(&cfg, data.vocab.num_classes())?;
    let outcome = train(&cfg, &data.vocab, &data.encoder, &data.dataset).map_err(CliError::Training)?;
    let dir = out_dir(conf)?;
    let ckpt = checkpoint_path(conf)?;
    save_checkpoint(&outcome.checkpoint, &ckpt).map_err(CliError::Io)?;
    let mut csv = format!("# config_digest={}\n# train_digest={}\nepoch,mean_loss,steps\n", conf.digest(), hex(&cfg.digest()));
    for r in &outcome.log {
        let _ = writeln!(csv, "{},{},{}", r.epoch, r.mean_loss, r.steps);
    }
    write_text(&dir.join("loss.csv"), &csv)?;
    println!("checkpoint {} sha256 {}", ckpt.display(), hex(&outcome.checkpoint.digest));
    if let Some(last) = outcome.log.last() {
        println!("final epoch {} mean loss {:.6}", last.epoch, last.mean_loss);
    }
    Ok(())
}

fn load_prompt_checkpoint(conf: &CliConfig, e: usize) -> CliResult<Checkpoint> {
    let path = checkpoint_path(conf)?;
    let ckpt = load_checkpoint(&path).map_err(|err| match err {
        PompError::Io { .. } => CliError::Io(err),
        other => CliError::Checkpoint(other),
    })?;
    if ckpt.prompt.embed_dim() != e {
        return Err(CliError::Checkpoint(PompError::ShapeMismatch {
            expected: format!("prompt embed dim {e}"),
            found: ckpt.prompt.embed_dim().to_string(),
        }));
    }
    Ok(ckpt)
}

fn resolve_split(conf: &CliConfig, flag: Option<Split>) -> CliResult<Split> {
    match flag {
        Some(s) => Ok(s),
        None => Ok(conf.get::<Split>("split")?.unwrap_or(Split::Heldout)),
    }
}

fn cmd_eval(conf: &CliConfig, split: Option<Split>, with_control: bool) -> CliResult<()> {
    let split = resolve_split(conf, split)?;
    let data = load_split(conf, split)?;
    let ckpt = load_prompt_checkpoint(conf, data.vocab.embed_dim())?;
    let eval = |p| zero_shot_eval(p, &data.encoder, &data.vocab, &data.dataset, &[1, 5]).map_err(CliError::Io);
    let trained = eval(&ckpt.prompt)?;
    let mut rows = vec![
        ("top1", trained.top1),
        ("top5", trained.top5),
        ("num_images", trained.num_images as f64),
    ];
    if with_control {
        let seed = conf.require::<u64>("seed")?;
        let control = init_prompt(ckpt.prompt.len(), data.vocab.embed_dim(), seed).map_err(config_err)?;
        let c = eval(&control)?;
        rows.push(("control_top1", c.top1));
        rows.push(("control_top5", c.top5));
    }
    let comments = [
        ("config_digest", conf.digest()),
        ("split", split.name().to_string()),
        ("checkpoint_sha256", hex(&ckpt.digest)),
    ];
    let dir = out_dir(conf)?;
    write_text(&dir.join(format!("eval_{}.csv", split.name())), &metrics_csv(&comments, &rows))?;

    let mut per_class = format!("# config_digest={}\n# split={}\nclass,name,top1\n", conf.digest(), split.name());
    for (entry, acc) in data.vocab.entries().iter().zip(&trained.per_class_accuracy) {
        let _ = writeln!(per_class, "{},{},{}", entry.class_id, entry.name, acc);
    }
    write_text(&dir.join(format!("eval_{}_per_class.csv", split.name())), &per_class)?;
    for (k, v) in &rows {
        println!("{k} {v}");
    }
    Ok(())
}

fn cmd_probe(conf: &CliConfig, split: Option<Split>) -> CliResult<()> {
    let split = resolve_split(conf, split)?;
    let data = load_split(conf, split)?;
    let ckpt = load_prompt_checkpoint(conf, data.vocab.embed_dim())?;
    let report = probe(&ckpt.prompt, &data.encoder, &data.vocab, &data.dataset).map_err(CliError::Io)?;
    let rows = [("align", report.align), ("uniform", report.uniform), ("top1", report.eval.top1)];
    let comments = [
        ("config_digest", conf.digest()),
        ("split", split.name().to_string()),
        ("checkpoint_sha256", hex(&ckpt.digest)),
    ];
    write_text(&out_dir(conf)?.join(format!("probe_{}.csv", split.name())), &metrics_csv(&comments, &rows))?;
    for (k, v) in rows {
        println!("{k} {v}");
    }
    Ok(())
}

fn cmd_grad_check(conf: &CliConfig) -> CliResult<()> {
    let base = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        num_classes: conf.get_or("grad_check_classes", base.num_classes)?,
        fixtures: conf.get_or("grad_check_fixtures", base.fixtures)?,
        h: conf.get_or("grad_check_h", base.h)?,
        tolerance: conf.get_or("grad_check_tolerance", base.tolerance)?,
        tau: conf.get_or("tau", base.tau)?,
        seed: conf.get_or("seed", base.seed)?,
        flip_positive_sign: conf.get_or("grad_check_flip_sign", false)?,
        ..base
    };
    let report = run_grad_check(&cfg).map_err(config_err)?;
    for kind in &cfg.kinds {
        for kc in &cfg.k_values {
            let k = match kc {
                KChoice::Fixed(k) => *k,
                KChoice::All => cfg.num_classes,
            };
            let worst = report
                .outcomes
                .iter()
                .filter(|o| o.kind == *kind && o.k == k)
                .map(|o| o.relative_error)
                .fold(0.0, f64::max);
            println!("encoder={kind} K={kc} fixtures={} max_rel_err={worst:.3e}", cfg.fixtures);
        }
    }
    println!("max_rel_err {:.3e}", report.max_relative_error());
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = failures
        .iter()
        .map(|o| format!("encoder={} K={} fixture={} rel_err={:.3e}", o.kind, o.k, o.fixture, o.relative_error))
        .collect();
    Err(CliError::GradCheck(format!(
        "{} of {} fixtures exceed {:e}:\n  {}",
        failures.len(),
        report.outcomes.len(),
        cfg.tolerance,
        list.join("\n  ")
    )))
}

pub const MEMORY_RATIO_RANGE: (f64, f64) = (0.75, 1.25);

fn cmd_bench_memory(conf: &CliConfig) -> CliResult<()> {
    let ks: Vec<usize> = conf.list("bench_k", "64,128,256,512")?;
    if ks.is_empty() {
        return Err(CliError::Config("bench_k is empty".into()));
    }
    let mut cfg_conf = conf.clone();
    if conf.raw("seed").is_none() {
        cfg_conf.set("seed", &SyntheticSpec::standard().seed.to_string())?;
    }
    let mut spec = synthetic_spec(&cfg_conf)?;
    let max_k = *ks.iter().max().expect("non-empty");
    // every swept K must fit in the class universe
    spec.n_classes = spec.n_classes.max(max_k);
    let universe = generate_synthetic(&spec).map_err(config_err)?;
    let encoder = FrozenTextEncoder::new(encoder_kind(conf)?, encoder_seed(&cfg_conf)?, spec.e, spec.d).map_err(config_err)?;
    let fixture = MemoryFixture {
        vocab: universe.vocab,
        encoder,
        dataset: universe.pretrain,
    };
    let base = train_config(&cfg_conf)?;
    let mut csv = format!("# config_digest={}\nk,modeled_bytes,measured_peak\n", conf.digest());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut bad = Vec::new();
    for &k in &ks {
        let cfg = TrainConfig {
            k,
            parallel: false,
            ..base.clone()
        };
        reset_peak();
        let report = measure_step_memory(&cfg, &fixture).map_err(|e| CliError::Memory(e.to_string()))?;
        let ratio = report.ratio();
        println!(
            "K={k} modeled={} measured={} ratio={ratio:.4}",
            report.modeled_bytes_per_step, report.measured_peak_bytes
        );
        let _ = writeln!(csv, "{k},{},{}", report.modeled_bytes_per_step, report.measured_peak_bytes);
        if !(MEMORY_RATIO_RANGE.0..=MEMORY_RATIO_RANGE.1).contains(&ratio) {
            bad.push(format!("K={k} ratio {ratio:.4}"));
        }
        xs.push(k as f64);
        ys.push(report.measured_peak_bytes as f64);
    }
    write_text(&out_dir(conf)?.join("memory.csv"), &csv)?;
    if xs.len() >= 2 {
        match linear_fit(&xs, &ys) {
            Ok((slope, intercept, r2)) => {
                println!("slope_bytes_per_class {slope:.3}");
                println!("intercept_bytes {intercept:.3}");
                println!("r2 {r2:.6}");
            }
            Err(e) => println!("no fit: {e}"),
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Memory(format!(
            "measured/modeled outside [{}, {}]: {}",
            MEMORY_RATIO_RANGE.0,
            MEMORY_RATIO_RANGE.1,
            bad.join(", ")
        )))
    }
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn cmd_ablate(conf: &CliConfig) -> CliResult<()> {
    let base = train_config(conf)?;
    let margins: Vec<String> = conf.list("ablate_margins", "0,adaptive")?;
    let dists: Vec<DistributionKind> = conf.list("ablate_distributions", &base.distribution.to_string())?;
    let ks: Vec<usize> = conf.list("ablate_k", &base.k.to_string())?;
    if margins.is_empty() || dists.is_empty() || ks.is_empty() {
        return Err(CliError::Config("ablation grid is empty".into()));
    }
    let margin_values = margins
        .iter()
        .map(|m| parse_margin(m))
        .collect::<CliResult<Vec<_>>>()?;
    let train_data = load_split(conf, Split::Pretrain)?;
    let eval_data = load_split(conf, Split::Heldout)?;
    let mut csv = format!(
        "# config_digest={}\n# split=heldout\nmargin,distribution,k,top1,align,uniform,status\n",
        conf.digest()
    );
    let mut failed = 0;
    for (label, margin) in margins.iter().zip(&margin_values) {
        for dist in &dists {
            for &k in &ks {
                let cfg = TrainConfig {
                    k,
                    distribution: *dist,
                    margin_override: *margin,
                    ..base.clone()
                };
                let result = check_k(&cfg, train_data.vocab.num_classes())
                    .map_err(|e| e.to_string())
                    .and_then(|_| {
                        train(&cfg, &train_data.vocab, &train_data.encoder, &train_data.dataset)
                            .and_then(|o| probe(&o.checkpoint.prompt, &eval_data.encoder, &eval_data.vocab, &eval_data.dataset))
                            .map_err(|e| e.to_string())
                    });
                match result {
                    Ok(r) => {
                        println!("margin={label} distribution={dist} K={k} top1={} align={} uniform={}", r.eval.top1, r.align, r.uniform);
                        let _ = writeln!(csv, "{label},{dist},{k},{},{},{},ok", r.eval.top1, r.align, r.uniform);
                    }
                    Err(msg) => {
                        failed += 1;
                        eprintln!("margin={label} distribution={dist} K={k} failed: {msg}");
                        let _ = writeln!(csv, "{label},{dist},{k},,,,error: {}", csv_field(&msg));
                    }
                }
            }
        }
    }
    write_text(&out_dir(conf)?.join("ablate.csv"), &csv)?;
    if failed > 0 {
        return Err(CliError::Training(PompError::invalid(format!("{failed} ablation cell(s) failed"))));
    }
    Ok(())
}
