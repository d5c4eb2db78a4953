//! Command-line experiment driver.
//!
//! Every subcommand is a pure function of the config file, the CLI flags,
//! and the input artifacts: rerunning a command with the same inputs
//! reproduces its outputs byte for byte. The only wall-clock value anywhere
//! is the manifest's informational `unix_time`, which is excluded from all
//! checksum comparisons.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing/invalid artifact,
//! 4 numerical failure, 5 I/O error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editing::{
    self, default_mask, diffuse, interpolate, invert, manipulate, train_boundary,
    write_frames, write_sweep_csv, Boundary, EditError, EditRequest,
};
use crate::metrics::{
    alignment_report, fit_gaussian, frechet_distance_sq, mse, projection_csv,
    projection_svg, spearman_rho, MetricsError, ReportOptions,
};
use crate::models::{
    load_checkpoint, Checkpoint, CheckpointError, ModelBundle,
};
use crate::numerics::{NumericsError, Rng, Tensor};
use crate::synthdata::{
    attribute_oracle, generate_dataset, load_dataset, save_dataset, Attribute,
    ImageBatch, SynthError, IMG_PIXELS,
};
use crate::training::{
    pretrain_gan, train_encoder, FeatureExtractor, LossWeights, MetricsCsv,
    TrainMode, TrainSink, TrainingError, PHASE_PRETRAIN, STREAM_REPORT,
};

/// RNG stream for sampling the codes a semantic boundary is trained on.
/// Distinct from the fixed training streams (0..=4) and the evaluation
/// streams (5 + 16k).
pub const STREAM_BOUNDARY: u64 = 6;

/// Per-set point cap for the projection SVGs (sets are stride-thinned
/// beyond this; the CSV always holds every point).
const SVG_MAX_POINTS: usize = 4000;

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config values, or a semantically invalid request.
    Usage(String),
    /// A required input artifact is missing or does not parse/match.
    Artifact(String),
    /// A numerical failure (non-finite loss, metric breakdown).
    Numeric(String),
    /// An I/O failure while writing outputs.
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Artifact(m) | CliError::Numeric(m) | CliError::Io(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::BadConfig(_) | TrainingError::WrongMode { .. } => {
                CliError::Usage(e.to_string())
            }
            TrainingError::NonFinite { .. }
            | TrainingError::Numerics(_)
            | TrainingError::Metrics(_) => CliError::Numeric(e.to_string()),
            TrainingError::Checkpoint(_) => CliError::Artifact(e.to_string()),
            TrainingError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Artifact(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<EditError> for CliError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::Numerics(_) | EditError::Degenerate(_) | EditError::NotUnit(_) => {
                CliError::Numeric(e.to_string())
            }
            EditError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Artifact(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

/// Deterministic laboratory for encoder-based GAN inversion with a latent
/// discriminator, on synthetic blob images.
#[derive(Debug, Parser)]
#[command(name = "fidg", version, about, max_term_width = 100)]
pub struct Cli {
    /// Flat key = value config file; CLI flags override its entries.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed (mandatory: via this flag or the config file).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Base directory that run directories are created under.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub force: bool,
    /// Continue an interrupted training run from its latest checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic blob dataset.
    GenData {
        /// Dataset file to write (default: the config's `data` path).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Number of images (default: the config's `n_images`).
        #[arg(long, value_name = "N")]
        n_images: Option<usize>,
    },
    /// Pretrain the GAN (FC, G, D) on the dataset.
    Pretrain {
        /// Run directory name under --out (default: "pretrain").
        #[arg(long, value_name = "NAME")]
        name: Option<String>,
        /// Override the config's `steps_pretrain`.
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Train the inversion encoder against a pretrained GAN.
    TrainEncoder {
        /// Inversion objective.
        #[arg(long, value_enum, value_name = "MODE")]
        mode: Option<ModeArg>,
        /// Run directory name under --out (default: the mode's phase tag).
        #[arg(long, value_name = "NAME")]
        name: Option<String>,
        /// Pretrained checkpoint (default: <out>/pretrain/checkpoints/checkpoint-final.bin).
        #[arg(long, value_name = "PATH")]
        pretrained: Option<PathBuf>,
        /// Override the config's `steps_invert`.
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Evaluate an encoder run: alignment report, held-out reconstruction,
    /// and the latent projection (filtered and unfiltered SVGs).
    Evaluate {
        /// Run directory of the encoder run.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Checkpoint to evaluate (default: the run's checkpoint-final.bin).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Pretrained checkpoint for the feature extractor.
        #[arg(long, value_name = "PATH")]
        pretrained: Option<PathBuf>,
        /// Override the config's `eval_samples`.
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
    },
    /// Write only the latent projection artifacts for an encoder run.
    Project {
        /// Run directory of the encoder run.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Checkpoint to project (default: the run's checkpoint-final.bin).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Override the config's `eval_samples`.
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
    },
    /// Latent-space editing on held-out images.
    Edit {
        #[command(subcommand)]
        op: EditOp,
    },
    /// Verify a run directory's manifest checksums and print a summary.
    Report {
        /// Run directory to report on.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EditOp {
    /// Interpolate between two held-out images in code space.
    Interpolate {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Held-out image index of the start frame.
        #[arg(long, value_name = "I", default_value_t = 0)]
        index_a: usize,
        /// Held-out image index of the end frame.
        #[arg(long, value_name = "I", default_value_t = 1)]
        index_b: usize,
        /// Number of frames (>= 2).
        #[arg(long, value_name = "K", default_value_t = 8)]
        steps: usize,
        /// Attribute scored in the sweep CSV.
        #[arg(long, value_name = "NAME", default_value = "right_of_center")]
        attribute: String,
    },
    /// Paste the masked center of one held-out image into another and
    /// re-encode the composite.
    Diffuse {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Held-out image index supplying the masked region.
        #[arg(long, value_name = "I", default_value_t = 0)]
        target: usize,
        /// Held-out image index supplying the surroundings.
        #[arg(long, value_name = "I", default_value_t = 1)]
        context: usize,
        /// Attribute scored in the sweep CSV.
        #[arg(long, value_name = "NAME", default_value = "right_of_center")]
        attribute: String,
    },
    /// Sweep a held-out image's code along a semantic boundary normal.
    Manipulate {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Held-out image index to edit.
        #[arg(long, value_name = "I", default_value_t = 0)]
        index: usize,
        /// Sweep half-range (frames cover [-alpha, +alpha]).
        #[arg(long, value_name = "A")]
        alpha: Option<f64>,
        /// Number of sweep frames.
        #[arg(long, value_name = "K")]
        steps: Option<usize>,
        /// Attribute to manipulate.
        #[arg(long, value_name = "NAME", default_value = "right_of_center")]
        attribute: String,
        /// Boundary JSON file to use.
        #[arg(long, value_name = "PATH")]
        boundary: Option<PathBuf>,
        /// Train (and save) a boundary from oracle-labeled generated
        /// samples before sweeping.
        #[arg(long)]
        train_boundary: bool,
    },
}

/// The only two accepted mode spellings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    ForceInDomain,
    InDomain,
}

impl ModeArg {
    pub fn to_mode(self) -> TrainMode {
        match self {
            ModeArg::ForceInDomain => TrainMode::ForceInDomain,
            ModeArg::InDomain => TrainMode::InDomain,
        }
    }

    pub fn flag_name(self) -> &'static str {
        match self {
            ModeArg::ForceInDomain => "force-in-domain",
            ModeArg::InDomain => "in-domain",
        }
    }

    pub fn from_flag_name(s: &str) -> Result<ModeArg, CliError> {
        match s {
            "force-in-domain" => Ok(ModeArg::ForceInDomain),
            "in-domain" => Ok(ModeArg::InDomain),
            other => Err(CliError::Usage(format!(
                "mode must be 'force-in-domain' or 'in-domain', got '{other}'"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Fully resolved run configuration: config-file entries overridden by CLI
/// flags, with documented defaults for everything except the seed.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub n_images: usize,
    pub latent_dim: usize,
    pub gamma: f64,
    pub lambda_adv: f64,
    pub lambda_adv_dw: f64,
    pub lambda_vgg: f64,
    pub lr_pretrain: f64,
    pub lr_encoder: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    pub steps_pretrain: usize,
    pub steps_invert: usize,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub mmd_subsample: usize,
    pub boundary_samples: usize,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub out: PathBuf,
    pub mode: Option<ModeArg>,
}

/// Parses the flat `key = value` config format: UTF-8, one pair per line,
/// `#` starts a comment line, blank lines ignored. Unknown keys are
/// rejected so typos fail loudly.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    const KNOWN: &[&str] = &[
        "seed", "data", "n_images", "latent_dim", "gamma", "lambda_adv",
        "lambda_adv_dw", "lambda_vgg", "lr_pretrain", "lr_encoder", "lr_critic",
        "batch_size", "steps_pretrain", "steps_invert", "log_interval",
        "eval_interval", "eval_samples", "mmd_subsample", "boundary_samples",
        "svm_lambda", "svm_epochs", "out", "mode",
    ];
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "config line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN.contains(&key) {
            return Err(CliError::Usage(format!(
                "config line {}: unknown key '{key}'",
                lineno + 1
            )));
        }
        if value.is_empty() {
            return Err(CliError::Usage(format!(
                "config line {}: key '{key}' has an empty value",
                lineno + 1
            )));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(CliError::Usage(format!(
                "config line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

fn parse_as<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(s) => s.parse::<T>().map_err(|_| {
            CliError::Usage(format!(
                "config key '{key}': cannot parse '{s}' as {}",
                std::any::type_name::<T>()
            ))
        }),
    }
}

impl RunConfig {
    /// Builds a config from a parsed key/value map plus the global flag
    /// overrides. `seed` must come from one of the two sources — there is
    /// deliberately no wall-clock fallback.
    pub fn from_map(map: &BTreeMap<String, String>, cli: &Cli) -> Result<RunConfig, CliError> {
        let seed = match (cli.seed, map.get("seed")) {
            (Some(s), _) => s,
            (None, Some(s)) => s.parse::<u64>().map_err(|_| {
                CliError::Usage(format!("config key 'seed': cannot parse '{s}' as u64"))
            })?,
            (None, None) => {
                return Err(CliError::Usage(
                    "seed is mandatory: set it in the config file or pass --seed".into(),
                ))
            }
        };
        let defaults = LossWeights::default();
        let mode = match map.get("mode") {
            Some(s) => Some(ModeArg::from_flag_name(s)?),
            None => None,
        };
        let cfg = RunConfig {
            seed,
            data: cli_path(map, "data", "data/dataset.bin")?,
            n_images: parse_as(map, "n_images", 10_000)?,
            latent_dim: parse_as(map, "latent_dim", 8)?,
            gamma: parse_as(map, "gamma", defaults.gamma)?,
            lambda_adv: parse_as(map, "lambda_adv", defaults.lambda_adv)?,
            lambda_adv_dw: parse_as(map, "lambda_adv_dw", defaults.lambda_adv_dw)?,
            lambda_vgg: parse_as(map, "lambda_vgg", defaults.lambda_vgg)?,
            lr_pretrain: parse_as(map, "lr_pretrain", defaults.lr_pretrain)?,
            lr_encoder: parse_as(map, "lr_encoder", defaults.lr_encoder)?,
            lr_critic: parse_as(map, "lr_critic", defaults.lr_critic)?,
            batch_size: parse_as(map, "batch_size", defaults.batch_size)?,
            steps_pretrain: parse_as(map, "steps_pretrain", defaults.steps_pretrain)?,
            steps_invert: parse_as(map, "steps_invert", defaults.steps_invert)?,
            log_interval: parse_as(map, "log_interval", defaults.log_interval)?,
            eval_interval: parse_as(map, "eval_interval", defaults.eval_interval)?,
            eval_samples: parse_as(map, "eval_samples", 100_000)?,
            mmd_subsample: parse_as(map, "mmd_subsample", 2000)?,
            boundary_samples: parse_as(map, "boundary_samples", 2000)?,
            svm_lambda: parse_as(map, "svm_lambda", 1e-3)?,
            svm_epochs: parse_as(map, "svm_epochs", 200)?,
            out: cli.out.clone().map(Ok).unwrap_or_else(|| cli_path(map, "out", "runs"))?,
            mode,
        };
        cfg.loss_weights().validate()?;
        if cfg.latent_dim == 0 || cfg.n_images == 0 {
            return Err(CliError::Usage(
                "latent_dim and n_images must be >= 1".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda_adv: self.lambda_adv,
            lambda_adv_dw: self.lambda_adv_dw,
            lambda_vgg: self.lambda_vgg,
            lr_pretrain: self.lr_pretrain,
            lr_encoder: self.lr_encoder,
            lr_critic: self.lr_critic,
            batch_size: self.batch_size,
            steps_pretrain: self.steps_pretrain,
            steps_invert: self.steps_invert,
            log_interval: self.log_interval,
            eval_interval: self.eval_interval,
        }
    }

    /// The resolved config as a sorted key/value map — the exact content of
    /// `config.snapshot` and of the manifest's config block.
    pub fn as_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("seed".into(), self.seed.to_string());
        m.insert("data".into(), self.data.display().to_string());
        m.insert("n_images".into(), self.n_images.to_string());
        m.insert("latent_dim".into(), self.latent_dim.to_string());
        m.insert("gamma".into(), self.gamma.to_string());
        m.insert("lambda_adv".into(), self.lambda_adv.to_string());
        m.insert("lambda_adv_dw".into(), self.lambda_adv_dw.to_string());
        m.insert("lambda_vgg".into(), self.lambda_vgg.to_string());
        m.insert("lr_pretrain".into(), self.lr_pretrain.to_string());
        m.insert("lr_encoder".into(), self.lr_encoder.to_string());
        m.insert("lr_critic".into(), self.lr_critic.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("steps_pretrain".into(), self.steps_pretrain.to_string());
        m.insert("steps_invert".into(), self.steps_invert.to_string());
        m.insert("log_interval".into(), self.log_interval.to_string());
        m.insert("eval_interval".into(), self.eval_interval.to_string());
        m.insert("eval_samples".into(), self.eval_samples.to_string());
        m.insert("mmd_subsample".into(), self.mmd_subsample.to_string());
        m.insert("boundary_samples".into(), self.boundary_samples.to_string());
        m.insert("svm_lambda".into(), self.svm_lambda.to_string());
        m.insert("svm_epochs".into(), self.svm_epochs.to_string());
        m.insert("out".into(), self.out.display().to_string());
        if let Some(mode) = self.mode {
            m.insert("mode".into(), mode.flag_name().to_string());
        }
        m
    }

    /// `config.snapshot` text: sorted `key = value` lines. Round-trips
    /// through [`parse_config_text`].
    pub fn snapshot_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.as_map() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn cli_path(map: &BTreeMap<String, String>, key: &str, default: &str) -> Result<PathBuf, CliError> {
    Ok(map.get(key).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(default)))
}

/// Loads and resolves the config for a command. Precedence: explicit
/// `--config` file, else the run directory's `config.snapshot` (when a run
/// is being operated on), else pure defaults; global flags override either.
fn resolve_config(cli: &Cli, run: Option<&Path>) -> Result<RunConfig, CliError> {
    let text = match (&cli.config, run) {
        (Some(path), _) => fs::read_to_string(path).map_err(|e| {
            CliError::Artifact(format!("config file {}: {e}", path.display()))
        })?,
        (None, Some(run_dir)) => {
            let snap = run_dir.join("config.snapshot");
            fs::read_to_string(&snap).map_err(|e| {
                CliError::Artifact(format!(
                    "no --config given and the run snapshot {} is unreadable: {e}",
                    snap.display()
                ))
            })?
        }
        (None, None) => String::new(),
    };
    RunConfig::from_map(&parse_config_text(&text)?, cli)
}

/// `FIDG_THREADS` caps parallel evaluation; absent means 1.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var_os("FIDG_THREADS") {
        None => Ok(1),
        Some(os) => {
            let s = os.to_str().unwrap_or("");
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|t| *t >= 1)
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "FIDG_THREADS must be a positive integer, got '{}'",
                        os.to_string_lossy()
                    ))
                })
        }
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

/// Inventory of a run: the resolved config, a checksum for every file the
/// run directory holds, and checksums of the external inputs it consumed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub status: String,
    /// Informational wall-clock stamp (seconds since the Unix epoch).
    /// Deliberately excluded from all reproducibility comparisons.
    pub unix_time: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<ManifestEntry>,
    pub artifacts: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Every file under `root`, as sorted slash-separated relative paths.
fn walk_files(root: &Path) -> Result<Vec<String>, CliError> {
    fn visit(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            let path = entry.path();
            if path.is_dir() {
                visit(&path, root, out)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    visit(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

fn unix_time_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn manifest_entries(paths: &[(String, PathBuf)]) -> Result<Vec<ManifestEntry>, CliError> {
    paths
        .iter()
        .map(|(name, p)| {
            Ok(ManifestEntry { path: name.clone(), sha256: sha256_file(p)? })
        })
        .collect()
}

/// Writes `manifest.json` for a run directory: checksums every file the
/// directory currently holds (the manifest itself excluded) plus the named
/// external inputs.
fn write_run_manifest(
    run_dir: &Path,
    command: &str,
    status: &str,
    config: &RunConfig,
    inputs: &[(String, PathBuf)],
) -> Result<(), CliError> {
    let mut artifacts = Vec::new();
    for rel in walk_files(run_dir)? {
        if rel == "manifest.json" {
            continue;
        }
        let sha = sha256_file(&run_dir.join(&rel))?;
        artifacts.push(ManifestEntry { path: rel, sha256: sha });
    }
    let manifest = RunManifest {
        tool: "fidg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        status: status.into(),
        unix_time: unix_time_now(),
        config: config.as_map(),
        inputs: manifest_entries(inputs)?,
        artifacts,
    };
    let path = run_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_run_manifest(run_dir: &Path) -> Result<RunManifest, CliError> {
    let path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::Artifact(format!("no manifest at {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Artifact(format!("manifest {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Artifact loading helpers
// ---------------------------------------------------------------------------

fn load_checkpoint_at(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Artifact(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?)
}

/// Rebuilds a model bundle from checkpoint arrays. The architecture is
/// determined by the configured `latent_dim`; a checkpoint trained at a
/// different width fails the shape check and is rejected.
fn bundle_from_checkpoint(ck: &Checkpoint, latent_dim: usize) -> Result<ModelBundle, CliError> {
    let mut bundle = ModelBundle::init(&mut Rng::from_seed(0), latent_dim, IMG_PIXELS);
    bundle.load_named_arrays(&ck.arrays).map_err(|e| {
        CliError::Artifact(format!(
            "checkpoint does not match the configured model dims: {e}"
        ))
    })?;
    Ok(bundle)
}

fn load_pretrained(
    path: &Path,
    latent_dim: usize,
) -> Result<(ModelBundle, FeatureExtractor), CliError> {
    let ck = load_checkpoint_at(path)?;
    if ck.phase != PHASE_PRETRAIN {
        return Err(CliError::Artifact(format!(
            "{} holds a '{}' checkpoint, expected '{PHASE_PRETRAIN}' (run `fidg pretrain` first)",
            path.display(),
            ck.phase
        )));
    }
    let mut bundle = bundle_from_checkpoint(&ck, latent_dim)?;
    bundle.frozen.fc = true;
    bundle.frozen.generator = true;
    let features = FeatureExtractor::from_critic(&bundle.critic_d)?;
    Ok((bundle, features))
}

fn load_encoder_checkpoint(path: &Path, latent_dim: usize) -> Result<(ModelBundle, Checkpoint), CliError> {
    let ck = load_checkpoint_at(path)?;
    if !ck.phase.starts_with("invert-") {
        return Err(CliError::Artifact(format!(
            "{} holds a '{}' checkpoint, expected an encoder phase (invert-*)",
            path.display(),
            ck.phase
        )));
    }
    let bundle = bundle_from_checkpoint(&ck, latent_dim)?;
    Ok((bundle, ck))
}

fn default_final_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("checkpoint-final.bin")
}

fn default_pretrained(cfg: &RunConfig) -> PathBuf {
    cfg.out
        .join("pretrain")
        .join("checkpoints")
        .join("checkpoint-final.bin")
}

/// Latest checkpoint of a run, for `--resume`: the final checkpoint if one
/// was written, else the highest numbered one, else the init state.
fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf, CliError> {
    let ck_dir = run_dir.join("checkpoints");
    let final_ck = ck_dir.join("checkpoint-final.bin");
    if final_ck.exists() {
        return Ok(final_ck);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    if ck_dir.is_dir() {
        for entry in fs::read_dir(&ck_dir).map_err(io_err(&ck_dir))? {
            let path = entry.map_err(io_err(&ck_dir))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(num) = name
                .strip_prefix("checkpoint-")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                if best.as_ref().is_none_or(|(b, _)| num > *b) {
                    best = Some((num, path));
                }
            }
        }
    }
    if let Some((_, path)) = best {
        return Ok(path);
    }
    let init = ck_dir.join("checkpoint-init.bin");
    if init.exists() {
        return Ok(init);
    }
    Err(CliError::Artifact(format!(
        "nothing to resume: no checkpoints under {}",
        ck_dir.display()
    )))
}

/// The dataset's held-out segment (the final n/10 rows — the same split
/// training holds back), as an `[m, 256]` matrix.
fn heldout_matrix(images: &Tensor) -> Result<Tensor, CliError> {
    let n = images.shape()[0];
    let eval_rows = n / 10;
    if eval_rows == 0 {
        return Err(CliError::Artifact(format!(
            "dataset has only {n} rows; need at least 10 for a held-out split"
        )));
    }
    Ok(images.slice_rows(n - eval_rows, n)?)
}

fn heldout_image(heldout: &Tensor, index: usize, what: &str) -> Result<ImageBatch, CliError> {
    let m = heldout.shape()[0];
    if index >= m {
        return Err(CliError::Usage(format!(
            "{what} index {index} is out of range: the held-out set has {m} images"
        )));
    }
    Ok(ImageBatch::from_matrix(&heldout.slice_rows(index, index + 1)?)?)
}

fn load_images(cfg: &RunConfig) -> Result<Tensor, CliError> {
    if !cfg.data.exists() {
        return Err(CliError::Artifact(format!(
            "dataset not found: {} (run `fidg gen-data` first)",
            cfg.data.display()
        )));
    }
    Ok(load_dataset(&cfg.data)?.images.as_matrix())
}

fn parse_attribute(name: &str) -> Result<Attribute, CliError> {
    Attribute::from_name(name).map_err(|e| CliError::Usage(e.to_string()))
}

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

/// Parses an argv (first element is the program name) and runs it.
/// Clap-level rejections (unknown flags, bad enum values) map to usage
/// errors, mirroring the binary's exit behavior.
pub fn run_args<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { data, n_images } => cmd_gen_data(&cli, data.clone(), *n_images),
        Command::Pretrain { name, steps } => cmd_pretrain(&cli, name.clone(), *steps),
        Command::TrainEncoder { mode, name, pretrained, steps } => {
            cmd_train_encoder(&cli, *mode, name.clone(), pretrained.clone(), *steps)
        }
        Command::Evaluate { run, checkpoint, pretrained, samples } => {
            cmd_evaluate(&cli, run, checkpoint.clone(), pretrained.clone(), *samples)
        }
        Command::Project { run, checkpoint, samples } => {
            cmd_project(&cli, run, checkpoint.clone(), *samples)
        }
        Command::Edit { op } => cmd_edit(&cli, op),
        Command::Report { run } => cmd_report(run),
    }
}

fn cmd_gen_data(cli: &Cli, data: Option<PathBuf>, n_images: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli, None)?;
    if let Some(d) = data {
        cfg.data = d;
    }
    if let Some(n) = n_images {
        cfg.n_images = n;
    }
    if cfg.data.exists() && !cli.force {
        return Err(CliError::Artifact(format!(
            "{} already exists; pass --force to overwrite",
            cfg.data.display()
        )));
    }
    if let Some(parent) = cfg.data.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let dataset = generate_dataset(&mut Rng::from_seed(cfg.seed), cfg.n_images)?;
    save_dataset(&dataset, &cfg.data)?;
    let sha = sha256_file(&cfg.data)?;

    let manifest = RunManifest {
        tool: "fidg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "gen-data".into(),
        status: "complete".into(),
        unix_time: unix_time_now(),
        config: cfg.as_map(),
        inputs: Vec::new(),
        artifacts: vec![ManifestEntry {
            path: cfg
                .data
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| cfg.data.display().to_string()),
            sha256: sha.clone(),
        }],
    };
    let manifest_path = cfg.data.with_extension("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    println!(
        "wrote {} ({} images, seed {}), sha256 {sha}",
        cfg.data.display(),
        cfg.n_images,
        cfg.seed
    );
    Ok(())
}

/// Shared fresh/--resume/--force plumbing for the two training commands.
/// Returns the sink plus the checkpoint to resume from (if any).
fn prepare_run_dir(
    run_dir: &Path,
    cfg: &RunConfig,
    force: bool,
    resume: bool,
) -> Result<(TrainSink, Option<Checkpoint>), CliError> {
    if resume {
        let ck_path = latest_checkpoint(run_dir)?;
        let ck = load_checkpoint_at(&ck_path)?;
        let sink = TrainSink::resume(run_dir, ck.step)?;
        return Ok((sink, Some(ck)));
    }
    if run_dir.join("metrics.csv").exists() {
        if !force {
            return Err(CliError::Artifact(format!(
                "{} already holds a run; pass --force to redo it or --resume to continue it",
                run_dir.display()
            )));
        }
        // A fresh --force run must not inherit stale files (old numbered
        // checkpoints, reports), or reruns would not be byte-identical.
        fs::remove_dir_all(run_dir).map_err(io_err(run_dir))?;
    }
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let snap = run_dir.join("config.snapshot");
    fs::write(&snap, cfg.snapshot_text()).map_err(io_err(&snap))?;
    let sink = TrainSink::create(run_dir)?;
    Ok((sink, None))
}

fn cmd_pretrain(cli: &Cli, name: Option<String>, steps: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli, None)?;
    if let Some(s) = steps {
        cfg.steps_pretrain = s;
    }
    let images = load_images(&cfg)?;
    let run_dir = cfg.out.join(name.as_deref().unwrap_or("pretrain"));
    let (mut sink, resume_ck) = prepare_run_dir(&run_dir, &cfg, cli.force, cli.resume)?;
    pretrain_gan(
        &images,
        &cfg.loss_weights(),
        cfg.latent_dim,
        cfg.seed,
        resume_ck.as_ref(),
        Some(&mut sink),
    )?;
    write_run_manifest(
        &run_dir,
        "pretrain",
        "complete",
        &cfg,
        &[("dataset".into(), cfg.data.clone())],
    )?;
    println!(
        "pretrained for {} steps (seed {}) -> {}",
        cfg.steps_pretrain,
        cfg.seed,
        run_dir.display()
    );
    Ok(())
}

fn cmd_train_encoder(
    cli: &Cli,
    mode: Option<ModeArg>,
    name: Option<String>,
    pretrained: Option<PathBuf>,
    steps: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli, None)?;
    let mode_arg = mode.or(cfg.mode).ok_or_else(|| {
        CliError::Usage(
            "--mode is required: 'force-in-domain' or 'in-domain' (flag or config key `mode`)"
                .into(),
        )
    })?;
    cfg.mode = Some(mode_arg);
    if let Some(s) = steps {
        cfg.steps_invert = s;
    }
    let train_mode = mode_arg.to_mode();
    let pretrained_path = pretrained.unwrap_or_else(|| default_pretrained(&cfg));
    if !pretrained_path.exists() {
        return Err(CliError::Artifact(format!(
            "pretrained checkpoint not found: {} (run `fidg pretrain` first)",
            pretrained_path.display()
        )));
    }
    let (pre_bundle, features) = load_pretrained(&pretrained_path, cfg.latent_dim)?;
    let images = load_images(&cfg)?;
    let run_dir = cfg
        .out
        .join(name.as_deref().unwrap_or_else(|| train_mode.phase_tag()));
    let (mut sink, resume_ck) = prepare_run_dir(&run_dir, &cfg, cli.force, cli.resume)?;
    train_encoder(
        &pre_bundle,
        &features,
        &images,
        &cfg.loss_weights(),
        train_mode,
        cfg.seed,
        resume_ck.as_ref(),
        Some(&mut sink),
    )?;
    write_run_manifest(
        &run_dir,
        "train-encoder",
        "complete",
        &cfg,
        &[
            ("dataset".into(), cfg.data.clone()),
            ("pretrained".into(), pretrained_path.clone()),
        ],
    )?;
    println!(
        "trained encoder ({}) for {} steps (seed {}) -> {}",
        train_mode.name(),
        cfg.steps_invert,
        cfg.seed,
        run_dir.display()
    );
    Ok(())
}

/// Numbers written by `evaluate` beyond the alignment report itself.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub n_samples: usize,
    pub fd_latent: f64,
    pub fd_feature: f64,
    pub mse_heldout: f64,
    pub n_heldout: usize,
    pub overlap: f64,
    pub n_outliers: usize,
}

fn cmd_evaluate(
    cli: &Cli,
    run_dir: &Path,
    checkpoint: Option<PathBuf>,
    pretrained: Option<PathBuf>,
    samples: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli, Some(run_dir))?;
    if let Some(s) = samples {
        cfg.eval_samples = s;
    }
    let ck_path = checkpoint.unwrap_or_else(|| default_final_checkpoint(run_dir));
    let (bundle, _ck) = load_encoder_checkpoint(&ck_path, cfg.latent_dim)?;
    let pretrained_path = pretrained.unwrap_or_else(|| default_pretrained(&cfg));
    let (_, features) = load_pretrained(&pretrained_path, cfg.latent_dim)?;

    // Held-out reconstruction quality through the pretrained feature map.
    let images = load_images(&cfg)?;
    let x_held = heldout_matrix(&images)?;
    let w = bundle.encode(&x_held)?;
    let x_rec = bundle.generate(&w)?;
    let mse_heldout = mse(&x_held, &x_rec)?;
    let f_real = features.forward(&x_held)?;
    let f_rec = features.forward(&x_rec)?;
    let fd_feature = frechet_distance_sq(&fit_gaussian(&f_real)?, &fit_gaussian(&f_rec)?)?;

    // Latent alignment against the prior, on freshly drawn codes.
    let opts = ReportOptions {
        n_samples: cfg.eval_samples,
        chunk: 512,
        threads: threads_from_env()?,
        mmd_subsample: cfg.mmd_subsample,
    };
    let mut rng = Rng::with_stream(cfg.seed, STREAM_REPORT);
    let (report, projection) = alignment_report(&bundle, &mut rng, &opts)?;

    let reports_dir = run_dir.join("reports");
    fs::create_dir_all(&reports_dir).map_err(io_err(&reports_dir))?;
    let write = |name: &str, text: String| -> Result<(), CliError> {
        let path = reports_dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))
    };
    write("alignment_report.json", report.to_json() + "\n")?;
    let summary = EvalSummary {
        checkpoint: ck_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        n_samples: report.n_samples,
        fd_latent: report.fd_latent,
        fd_feature,
        mse_heldout,
        n_heldout: x_held.shape()[0],
        overlap: report.overlap,
        n_outliers: report.n_outliers,
    };
    let mut summary_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Io(format!("summary serialization: {e}")))?;
    summary_text.push('\n');
    write("evaluation.json", summary_text)?;
    write("projection.csv", projection_csv(&projection))?;
    write(
        "projection_filtered.svg",
        projection_svg(&projection, SVG_MAX_POINTS, true),
    )?;
    write(
        "projection_unfiltered.svg",
        projection_svg(&projection, SVG_MAX_POINTS, false),
    )?;

    write_run_manifest(
        run_dir,
        "evaluate",
        "complete",
        &cfg,
        &[
            ("checkpoint".into(), ck_path.clone()),
            ("pretrained".into(), pretrained_path.clone()),
            ("dataset".into(), cfg.data.clone()),
        ],
    )?;
    println!(
        "evaluated {}: fd_latent {:.6}, fd_feature {:.6}, mse_heldout {:.6}, overlap {:.4}, outliers {}",
        ck_path.display(),
        report.fd_latent,
        fd_feature,
        mse_heldout,
        report.overlap,
        report.n_outliers
    );
    Ok(())
}

fn cmd_project(
    cli: &Cli,
    run_dir: &Path,
    checkpoint: Option<PathBuf>,
    samples: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli, Some(run_dir))?;
    if let Some(s) = samples {
        cfg.eval_samples = s;
    }
    let ck_path = checkpoint.unwrap_or_else(|| default_final_checkpoint(run_dir));
    let (bundle, _ck) = load_encoder_checkpoint(&ck_path, cfg.latent_dim)?;
    let opts = ReportOptions {
        n_samples: cfg.eval_samples,
        chunk: 512,
        threads: threads_from_env()?,
        mmd_subsample: cfg.mmd_subsample,
    };
    let mut rng = Rng::with_stream(cfg.seed, STREAM_REPORT);
    let (report, projection) = alignment_report(&bundle, &mut rng, &opts)?;

    let reports_dir = run_dir.join("reports");
    fs::create_dir_all(&reports_dir).map_err(io_err(&reports_dir))?;
    let write = |name: &str, text: String| -> Result<(), CliError> {
        let path = reports_dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))
    };
    write("projection.csv", projection_csv(&projection))?;
    write(
        "projection_filtered.svg",
        projection_svg(&projection, SVG_MAX_POINTS, true),
    )?;
    write(
        "projection_unfiltered.svg",
        projection_svg(&projection, SVG_MAX_POINTS, false),
    )?;
    write_run_manifest(
        run_dir,
        "project",
        "complete",
        &cfg,
        &[("checkpoint".into(), ck_path.clone())],
    )?;
    println!(
        "projected {} codes from {}: overlap {:.4}, outliers {}",
        report.n_samples,
        ck_path.display(),
        report.overlap,
        report.n_outliers
    );
    Ok(())
}

fn cmd_edit(cli: &Cli, op: &EditOp) -> Result<(), CliError> {
    match op {
        EditOp::Interpolate { run, checkpoint, index_a, index_b, steps, attribute } => {
            edit_interpolate(cli, run, checkpoint.clone(), *index_a, *index_b, *steps, attribute)
        }
        EditOp::Diffuse { run, checkpoint, target, context, attribute } => {
            edit_diffuse(cli, run, checkpoint.clone(), *target, *context, attribute)
        }
        EditOp::Manipulate {
            run,
            checkpoint,
            index,
            alpha,
            steps,
            attribute,
            boundary,
            train_boundary,
        } => edit_manipulate(
            cli,
            run,
            checkpoint.clone(),
            *index,
            *alpha,
            *steps,
            attribute,
            boundary.clone(),
            *train_boundary,
        ),
    }
}

struct EditContext {
    cfg: RunConfig,
    bundle: ModelBundle,
    heldout: Tensor,
    ck_path: PathBuf,
}

fn edit_context(cli: &Cli, run_dir: &Path, checkpoint: Option<PathBuf>) -> Result<EditContext, CliError> {
    let cfg = resolve_config(cli, Some(run_dir))?;
    let ck_path = checkpoint.unwrap_or_else(|| default_final_checkpoint(run_dir));
    let (bundle, _ck) = load_encoder_checkpoint(&ck_path, cfg.latent_dim)?;
    let images = load_images(&cfg)?;
    let heldout = heldout_matrix(&images)?;
    Ok(EditContext { cfg, bundle, heldout, ck_path })
}

fn finish_edit(
    run_dir: &Path,
    cfg: &RunConfig,
    ck_path: &Path,
    extra_inputs: &[(String, PathBuf)],
) -> Result<(), CliError> {
    let mut inputs = vec![
        ("checkpoint".to_string(), ck_path.to_path_buf()),
        ("dataset".to_string(), cfg.data.clone()),
    ];
    inputs.extend_from_slice(extra_inputs);
    write_run_manifest(run_dir, "edit", "complete", cfg, &inputs)
}

fn edit_interpolate(
    cli: &Cli,
    run_dir: &Path,
    checkpoint: Option<PathBuf>,
    index_a: usize,
    index_b: usize,
    steps: usize,
    attribute: &str,
) -> Result<(), CliError> {
    if steps < 2 {
        return Err(CliError::Usage(format!(
            "interpolation needs --steps >= 2, got {steps}"
        )));
    }
    let attr = parse_attribute(attribute)?;
    let ctx = edit_context(cli, run_dir, checkpoint)?;
    let img_a = heldout_image(&ctx.heldout, index_a, "--index-a")?;
    let img_b = heldout_image(&ctx.heldout, index_b, "--index-b")?;
    let w1 = invert(&ctx.bundle, &img_a)?;
    let w2 = invert(&ctx.bundle, &img_b)?;
    let frames = interpolate(&ctx.bundle, &w1, &w2, steps)?;
    let alphas: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    let scores: Vec<f64> = attribute_oracle(&frames, attr).iter().map(|s| s.score).collect();

    let dir = run_dir.join("edits").join("interpolate");
    write_frames(&dir, &frames)?;
    write_sweep_csv(&dir.join("sweep.csv"), &alphas, &scores)?;
    finish_edit(run_dir, &ctx.cfg, &ctx.ck_path, &[])?;
    println!(
        "interpolated held-out images {index_a} -> {index_b} over {steps} frames -> {}",
        dir.display()
    );
    Ok(())
}

fn edit_diffuse(
    cli: &Cli,
    run_dir: &Path,
    checkpoint: Option<PathBuf>,
    target: usize,
    context: usize,
    attribute: &str,
) -> Result<(), CliError> {
    let attr = parse_attribute(attribute)?;
    let ctx = edit_context(cli, run_dir, checkpoint)?;
    let img_t = heldout_image(&ctx.heldout, target, "--target")?;
    let img_c = heldout_image(&ctx.heldout, context, "--context")?;
    let mask = default_mask();
    let (x_mix, rec) = diffuse(&ctx.bundle, &img_t, &img_c, &mask)?;

    // Frame order: target, context, composite, reconstruction.
    let mut rows = Vec::with_capacity(4 * IMG_PIXELS);
    for b in [&img_t, &img_c, &x_mix, &rec] {
        rows.extend_from_slice(b.image(0));
    }
    let frames = ImageBatch::from_matrix(&Tensor::from_vec(&[4, IMG_PIXELS], rows)?)?;
    let scores: Vec<f64> = attribute_oracle(&frames, attr).iter().map(|s| s.score).collect();
    let alphas = vec![0.0; 4];

    let dir = run_dir.join("edits").join("diffuse");
    write_frames(&dir, &frames)?;
    write_sweep_csv(&dir.join("sweep.csv"), &alphas, &scores)?;
    finish_edit(run_dir, &ctx.cfg, &ctx.ck_path, &[])?;
    println!(
        "diffused held-out image {target} into {context} (frames: target, context, composite, reconstruction) -> {}",
        dir.display()
    );
    Ok(())
}

/// Trains a boundary for `attr` from oracle-labeled generated samples:
/// codes w = FC(z) with z from the dedicated boundary stream, labeled by
/// the sign of the oracle score on G(w). Degenerate oracle rows are
/// dropped.
pub fn boundary_from_samples(
    bundle: &ModelBundle,
    seed: u64,
    n_samples: usize,
    svm_lambda: f64,
    svm_epochs: usize,
    attr: Attribute,
    created_from_run: &str,
) -> Result<Boundary, CliError> {
    let ld = bundle.latent_dim();
    let mut rng = Rng::with_stream(seed, STREAM_BOUNDARY);
    let z = Tensor::from_vec(&[n_samples, ld], rng.gaussian_vec(n_samples * ld))?;
    let w = bundle.map_latent(&z)?;
    let imgs = ImageBatch::from_matrix(&bundle.generate(&w)?)?;
    let oracle = attribute_oracle(&imgs, attr);
    let keep: Vec<usize> = (0..oracle.len()).filter(|i| !oracle[*i].degenerate).collect();
    if keep.is_empty() {
        return Err(CliError::Numeric(
            "all generated boundary samples were degenerate for the oracle".into(),
        ));
    }
    let codes = w.gather_rows(&keep)?;
    let labels: Vec<i8> = keep
        .iter()
        .map(|&i| if oracle[i].score > 0.0 { 1 } else { -1 })
        .collect();
    Ok(train_boundary(
        &codes,
        &labels,
        svm_lambda,
        svm_epochs,
        attr.name(),
        created_from_run,
    )?)
}

#[allow(clippy::too_many_arguments)]
fn edit_manipulate(
    cli: &Cli,
    run_dir: &Path,
    checkpoint: Option<PathBuf>,
    index: usize,
    alpha: Option<f64>,
    steps: Option<usize>,
    attribute: &str,
    boundary_path: Option<PathBuf>,
    do_train_boundary: bool,
) -> Result<(), CliError> {
    let attr = parse_attribute(attribute)?;
    let ctx = edit_context(cli, run_dir, checkpoint)?;
    let run_name = run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| run_dir.display().to_string());

    let edits_dir = run_dir.join("edits");
    fs::create_dir_all(&edits_dir).map_err(io_err(&edits_dir))?;
    let mut extra_inputs = Vec::new();
    let boundary = if do_train_boundary {
        let b = boundary_from_samples(
            &ctx.bundle,
            ctx.cfg.seed,
            ctx.cfg.boundary_samples,
            ctx.cfg.svm_lambda,
            ctx.cfg.svm_epochs,
            attr,
            &run_name,
        )?;
        let path = edits_dir.join(format!("boundary-{}.json", attr.name()));
        b.save(&path)?;
        println!(
            "trained boundary for {} (held-out accuracy {:.4}) -> {}",
            attr.name(),
            b.accuracy,
            path.display()
        );
        b
    } else if let Some(path) = boundary_path {
        if !path.exists() {
            return Err(CliError::Artifact(format!(
                "boundary file not found: {}",
                path.display()
            )));
        }
        extra_inputs.push(("boundary".to_string(), path.clone()));
        Boundary::load(&path)?
    } else {
        return Err(CliError::Artifact(
            "manipulate needs a boundary: pass --boundary FILE or --train-boundary".into(),
        ));
    };

    let img = heldout_image(&ctx.heldout, index, "--index")?;
    let w = invert(&ctx.bundle, &img)?;
    let req = EditRequest {
        w,
        boundary,
        alpha: alpha.unwrap_or(editing::DEFAULT_ALPHA),
        steps: steps.unwrap_or(editing::DEFAULT_SWEEP_STEPS),
    };
    let sweep = manipulate(&ctx.bundle, &req)?;
    let scores: Vec<f64> = attribute_oracle(&sweep.frames, attr).iter().map(|s| s.score).collect();

    let dir = edits_dir.join(format!("manipulate-{}", attr.name()));
    write_frames(&dir, &sweep.frames)?;
    write_sweep_csv(&dir.join("sweep.csv"), &sweep.alphas, &scores)?;
    finish_edit(run_dir, &ctx.cfg, &ctx.ck_path, &extra_inputs)?;

    let rho = spearman_rho(&sweep.alphas, &scores).unwrap_or(f64::NAN);
    println!(
        "swept {} on held-out image {index} over {} frames (alpha {}, spearman {:.4}) -> {}",
        attr.name(),
        sweep.alphas.len(),
        req.alpha,
        rho,
        dir.display()
    );
    Ok(())
}

fn cmd_report(run_dir: &Path) -> Result<(), CliError> {
    let manifest = read_run_manifest(run_dir)?;
    let mut bad = Vec::new();
    for entry in &manifest.artifacts {
        let path = run_dir.join(&entry.path);
        match sha256_file(&path) {
            Ok(sha) if sha == entry.sha256 => {}
            Ok(_) => bad.push(format!("{} (checksum mismatch)", entry.path)),
            Err(_) => bad.push(format!("{} (missing)", entry.path)),
        }
    }
    println!("run: {}", run_dir.display());
    println!(
        "tool: {} {}   command: {}   status: {}",
        manifest.tool, manifest.version, manifest.command, manifest.status
    );
    if let Some(seed) = manifest.config.get("seed") {
        let mode = manifest
            .config
            .get("mode")
            .map(|m| format!("   mode: {m}"))
            .unwrap_or_default();
        println!("seed: {seed}{mode}");
    }
    if bad.is_empty() {
        println!("artifacts: {} files, all checksums verified", manifest.artifacts.len());
    }

    let metrics_path = run_dir.join("metrics.csv");
    if metrics_path.exists() {
        if let Ok(rows) = MetricsCsv::read_rows(&metrics_path) {
            if let Some(last) = rows.last() {
                println!("final metrics row: {}", last.to_line());
            }
        }
    }
    let report_path = run_dir.join("reports").join("evaluation.json");
    if report_path.exists() {
        let text = fs::read_to_string(&report_path).map_err(io_err(&report_path))?;
        if let Ok(s) = serde_json::from_str::<EvalSummary>(&text) {
            println!(
                "evaluation: fd_latent {:.6}, fd_feature {:.6}, mse_heldout {:.6}, overlap {:.4}, outliers {}",
                s.fd_latent, s.fd_feature, s.mse_heldout, s.overlap, s.n_outliers
            );
        }
    }
    if !bad.is_empty() {
        return Err(CliError::Artifact(format!(
            "manifest verification failed for {} of {} artifacts: {}",
            bad.len(),
            manifest.artifacts.len(),
            bad.join(", ")
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn test_dir(tag: &str) -> PathBuf {
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let dir = std::env::temp_dir().join(format!(
            "fidg-cli-{tag}-{}-{}",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).expect("argv parses")
    }

    #[test]
    fn config_text_parses_comments_defaults_and_overrides() {
        let text = "# a comment\n\nseed = 7\ngamma = 2.5\n  batch_size =  16 \n";
        let map = parse_config_text(text).unwrap();
        assert_eq!(map.get("seed").unwrap(), "7");
        assert_eq!(map.get("batch_size").unwrap(), "16");

        let cli = parse(&["fidg", "pretrain"]);
        let cfg = RunConfig::from_map(&map, &cli).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gamma, 2.5);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.lambda_adv, 0.1);
        assert_eq!(cfg.steps_pretrain, 20_000);
        assert_eq!(cfg.eval_samples, 100_000);
        assert_eq!(cfg.out, PathBuf::from("runs"));

        let cli2 = parse(&["fidg", "--seed", "99", "--out", "elsewhere", "pretrain"]);
        let cfg2 = RunConfig::from_map(&map, &cli2).unwrap();
        assert_eq!(cfg2.seed, 99, "--seed overrides the config file");
        assert_eq!(cfg2.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn config_rejects_unknown_keys_bad_values_and_missing_seed() {
        assert!(matches!(
            parse_config_text("sneed = 3\n"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            parse_config_text("seed 3\n"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            parse_config_text("seed = 1\nseed = 2\n"),
            Err(CliError::Usage(_))
        ));

        let cli = parse(&["fidg", "pretrain"]);
        let empty = BTreeMap::new();
        let err = RunConfig::from_map(&empty, &cli).unwrap_err();
        assert_eq!(err.code(), 2, "missing seed is a usage error");

        let map = parse_config_text("seed = 1\ngamma = wild\n").unwrap();
        assert!(RunConfig::from_map(&map, &cli).is_err());
        let map = parse_config_text("seed = 1\nmode = sideways\n").unwrap();
        assert!(RunConfig::from_map(&map, &cli).is_err());
        let map = parse_config_text("seed = 1\neval_interval = 150\n").unwrap();
        assert!(RunConfig::from_map(&map, &cli).is_err(), "eval must be a multiple of log");
    }

    #[test]
    fn snapshot_round_trips_through_the_config_parser() {
        let cli = parse(&["fidg", "--seed", "5", "pretrain"]);
        let map = parse_config_text("lambda_vgg = 0.00005\nmode = in-domain\n").unwrap();
        let cfg = RunConfig::from_map(&map, &cli).unwrap();
        let snap = cfg.snapshot_text();
        let reparsed = parse_config_text(&snap).unwrap();
        let cli_plain = parse(&["fidg", "pretrain"]);
        let cfg2 = RunConfig::from_map(&reparsed, &cli_plain).unwrap();
        assert_eq!(cfg2.seed, 5);
        assert_eq!(cfg2.lambda_vgg.to_bits(), cfg.lambda_vgg.to_bits());
        assert_eq!(cfg2.mode, Some(ModeArg::InDomain));
        assert_eq!(cfg2.snapshot_text(), snap, "snapshot is a fixed point");
    }

    #[test]
    fn mode_flag_accepts_exactly_the_two_hyphenated_spellings() {
        let ok = parse(&["fidg", "train-encoder", "--mode", "force-in-domain"]);
        match ok.command {
            Command::TrainEncoder { mode, .. } => {
                assert_eq!(mode, Some(ModeArg::ForceInDomain));
                assert_eq!(mode.unwrap().to_mode(), TrainMode::ForceInDomain);
            }
            _ => panic!("wrong subcommand"),
        }
        let ok = parse(&["fidg", "train-encoder", "--mode", "in-domain"]);
        match ok.command {
            Command::TrainEncoder { mode, .. } => assert_eq!(mode, Some(ModeArg::InDomain)),
            _ => panic!("wrong subcommand"),
        }
        for bad in ["in_domain", "force_in_domain", "forceindomain", "IN-DOMAIN"] {
            assert!(
                Cli::try_parse_from(["fidg", "train-encoder", "--mode", bad]).is_err(),
                "'{bad}' must be rejected"
            );
        }
        assert!(ModeArg::from_flag_name("in-domain").is_ok());
        assert!(ModeArg::from_flag_name("in_domain").is_err());
    }

    #[test]
    fn sha256_matches_a_known_test_vector() {
        let dir = test_dir("sha");
        let path = dir.join("abc.txt");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn thread_cap_parses_the_environment_contract() {
        // Never mutate the real environment in tests; exercise the parse
        // logic by contract instead.
        assert_eq!(threads_from_env().unwrap(), 1, "absent FIDG_THREADS means 1");
    }

    /// End-to-end pipeline at toy scale, driving the same `run` entry the
    /// binary uses: gen-data, pretrain, both encoder modes, evaluate,
    /// project, all three edits, report. Asserts layout, determinism of
    /// re-evaluation, and exit-code classes along the way.
    #[test]
    fn the_full_pipeline_runs_end_to_end_at_toy_scale() {
        let root = test_dir("pipe");
        let cfg_path = root.join("lab.conf");
        let data_path = root.join("data").join("dataset.bin");
        let out = root.join("runs");
        fs::write(
            &cfg_path,
            format!(
                "seed = 11\n\
                 data = {}\n\
                 out = {}\n\
                 n_images = 300\n\
                 batch_size = 16\n\
                 steps_pretrain = 60\n\
                 steps_invert = 60\n\
                 log_interval = 20\n\
                 eval_interval = 60\n\
                 eval_samples = 400\n\
                 mmd_subsample = 100\n\
                 boundary_samples = 400\n\
                 svm_epochs = 60\n",
                data_path.display(),
                out.display()
            ),
        )
        .unwrap();
        let cfg_s = cfg_path.to_str().unwrap();

        // gen-data, twice: the second must refuse without --force.
        run(parse(&["fidg", "--config", cfg_s, "gen-data"])).unwrap();
        assert!(data_path.exists());
        let sha_first = sha256_file(&data_path).unwrap();
        let refuse = run(parse(&["fidg", "--config", cfg_s, "gen-data"])).unwrap_err();
        assert_eq!(refuse.code(), 3);
        run(parse(&["fidg", "--config", cfg_s, "--force", "gen-data"])).unwrap();
        assert_eq!(
            sha256_file(&data_path).unwrap(),
            sha_first,
            "regenerated dataset is byte-identical"
        );
        let ds_manifest = data_path.with_extension("manifest.json");
        assert!(ds_manifest.exists());

        // pretrain.
        run(parse(&["fidg", "--config", cfg_s, "pretrain"])).unwrap();
        let pre_dir = out.join("pretrain");
        for f in ["config.snapshot", "metrics.csv", "manifest.json"] {
            assert!(pre_dir.join(f).exists(), "missing {f}");
        }
        assert!(pre_dir.join("checkpoints/checkpoint-final.bin").exists());
        assert!(pre_dir.join("checkpoints/checkpoint-init.bin").exists());

        // train-encoder requires a mode.
        let no_mode = run(parse(&["fidg", "--config", cfg_s, "train-encoder"])).unwrap_err();
        assert_eq!(no_mode.code(), 2);

        run(parse(&["fidg", "--config", cfg_s, "train-encoder", "--mode", "force-in-domain"]))
            .unwrap();
        run(parse(&["fidg", "--config", cfg_s, "train-encoder", "--mode", "in-domain"]))
            .unwrap();
        let force_dir = out.join("invert-force-in-domain");
        let indom_dir = out.join("invert-in-domain");
        assert!(force_dir.join("checkpoints/checkpoint-final.bin").exists());
        assert!(indom_dir.join("checkpoints/checkpoint-final.bin").exists());
        let snap = fs::read_to_string(force_dir.join("config.snapshot")).unwrap();
        assert!(snap.contains("mode = force-in-domain"));

        // Rerunning a finished training run refuses without --force/--resume.
        let refuse = run(parse(&[
            "fidg", "--config", cfg_s, "train-encoder", "--mode", "in-domain",
        ]))
        .unwrap_err();
        assert_eq!(refuse.code(), 3);

        // evaluate: artifacts in reports/, byte-identical on re-run.
        let force_run = force_dir.to_str().unwrap();
        run(parse(&["fidg", "evaluate", "--run", force_run])).unwrap();
        let reports = force_dir.join("reports");
        for f in [
            "alignment_report.json",
            "evaluation.json",
            "projection.csv",
            "projection_filtered.svg",
            "projection_unfiltered.svg",
        ] {
            assert!(reports.join(f).exists(), "missing report file {f}");
        }
        let report_bytes = fs::read(reports.join("alignment_report.json")).unwrap();
        let eval_bytes = fs::read(reports.join("evaluation.json")).unwrap();
        run(parse(&["fidg", "evaluate", "--run", force_run])).unwrap();
        assert_eq!(
            fs::read(reports.join("alignment_report.json")).unwrap(),
            report_bytes,
            "evaluate is deterministic"
        );
        assert_eq!(fs::read(reports.join("evaluation.json")).unwrap(), eval_bytes);
        let svg = fs::read_to_string(reports.join("projection_unfiltered.svg")).unwrap();
        assert!(svg.contains("outlier filter off"));

        // project on the in-domain run (no pretrained checkpoint needed).
        run(parse(&["fidg", "project", "--run", indom_dir.to_str().unwrap()])).unwrap();
        assert!(indom_dir.join("reports/projection.csv").exists());

        // edits on the force run.
        run(parse(&[
            "fidg", "edit", "interpolate", "--run", force_run, "--steps", "5",
        ]))
        .unwrap();
        let interp = force_dir.join("edits/interpolate");
        assert!(interp.join("frame_000.pgm").exists());
        assert!(interp.join("frame_004.pgm").exists());
        let csv = fs::read_to_string(interp.join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);

        run(parse(&["fidg", "edit", "diffuse", "--run", force_run])).unwrap();
        assert!(force_dir.join("edits/diffuse/frame_003.pgm").exists());

        let no_boundary = run(parse(&[
            "fidg", "edit", "manipulate", "--run", force_run,
        ]))
        .unwrap_err();
        assert_eq!(no_boundary.code(), 3, "manipulate without a boundary is a missing artifact");

        run(parse(&[
            "fidg", "edit", "manipulate", "--run", force_run, "--train-boundary",
        ]))
        .unwrap();
        let boundary_path = force_dir.join("edits/boundary-right_of_center.json");
        assert!(boundary_path.exists());
        let sweep_dir = force_dir.join("edits/manipulate-right_of_center");
        let sweep_csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
        assert_eq!(sweep_csv.lines().count(), 1 + editing::DEFAULT_SWEEP_STEPS);
        assert!(sweep_dir.join("frame_006.pgm").exists());

        // Reuse the saved boundary by path.
        run(parse(&[
            "fidg", "edit", "manipulate", "--run", force_run, "--boundary",
            boundary_path.to_str().unwrap(),
        ]))
        .unwrap();

        // report verifies the manifest it just wrote.
        run(parse(&["fidg", "report", "--run", force_run])).unwrap();

        // Corrupt one artifact: report must fail with exit class 3.
        fs::write(force_dir.join("metrics.csv"), "tampered\n").unwrap();
        let bad = run(parse(&["fidg", "report", "--run", force_run])).unwrap_err();
        assert_eq!(bad.code(), 3);

        fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn training_resume_matches_an_uninterrupted_run_through_the_cli() {
        let root = test_dir("resume");
        let data_path = root.join("dataset.bin");
        let out_a = root.join("a");
        let out_b = root.join("b");
        let base = format!(
            "seed = 21\n\
             data = {}\n\
             n_images = 240\n\
             batch_size = 16\n\
             log_interval = 20\n\
             eval_interval = 40\n",
            data_path.display()
        );
        let cfg_short = root.join("short.conf");
        let cfg_long = root.join("long.conf");
        fs::write(&cfg_short, format!("{base}steps_pretrain = 40\n")).unwrap();
        fs::write(&cfg_long, format!("{base}steps_pretrain = 80\n")).unwrap();

        run(parse(&["fidg", "--config", cfg_short.to_str().unwrap(), "gen-data"])).unwrap();

        // A: interrupted at 40 steps, resumed to 80.
        run(parse(&[
            "fidg", "--config", cfg_short.to_str().unwrap(), "--out", out_a.to_str().unwrap(),
            "pretrain",
        ]))
        .unwrap();
        run(parse(&[
            "fidg", "--config", cfg_long.to_str().unwrap(), "--out", out_a.to_str().unwrap(),
            "--resume", "pretrain",
        ]))
        .unwrap();
        // B: straight through 80 steps.
        run(parse(&[
            "fidg", "--config", cfg_long.to_str().unwrap(), "--out", out_b.to_str().unwrap(),
            "pretrain",
        ]))
        .unwrap();

        let a = out_a.join("pretrain");
        let b = out_b.join("pretrain");
        assert_eq!(
            fs::read(a.join("metrics.csv")).unwrap(),
            fs::read(b.join("metrics.csv")).unwrap(),
            "resumed metrics CSV equals the uninterrupted one"
        );
        assert_eq!(
            fs::read(a.join("checkpoints/checkpoint-final.bin")).unwrap(),
            fs::read(b.join("checkpoints/checkpoint-final.bin")).unwrap(),
            "resumed final checkpoint equals the uninterrupted one"
        );
        fs::remove_dir_all(&root).ok();
    }
}
