//! Batch command-line front end.
//!
//! `sensiq <command> --config <path> [--out <dir>] [--seed <u64>] [--jobs <n>]`
//!
//! The configuration is a list of `key = value` lines with `#` comments.
//! Every output is computed in memory and written to the output directory
//! only once the whole command has succeeded, followed by `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::calib::{sample, shift, to_csv_string, DistKind, DistSpec, TaskSpec};
use crate::diagnostics::{
    digest, run_bit_allocation, run_calibration_mismatch, run_cross_layer, run_prediction_fidelity, run_proxy_ranking,
    run_static_vs_adaptive, run_static_vs_adaptive_trials, run_weighted_obs_trials, ExperimentResult, LayerQuant,
    TrialSetup,
};
use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::netcore::{load_checkpoint, perturb_weights, random_mlp, to_checkpoint_string, LossKind, Network};
use crate::numerics::{derive_seed, frobenius_sq, gram_mean, Rng};
use crate::quantize::{
    quantize_awq, quantize_obs, quantize_obs_weighted, quantize_rtn, ObsOrder, QuantGranularity, QuantSpec,
    ScalePolicy, DEFAULT_ALPHA_GRID,
};
use crate::sensitivity::{compute, MetricKind, SensitivityReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const KEY_HELP: &str = "\
Configuration keys (`key = value`, `#` starts a comment; lists are comma-separated).
Relative paths are resolved against the directory of the config file.

  all commands
    seed            u64, default 0 (overridden by --seed)
    out             output directory, default `sensiq-out` (overridden by --out)
  gen-model         writes model.nnm
    dims            required, widths input first, e.g. 4,8,3
    relu            bool, default true
    loss            mse | sce, default mse
  gen-data          writes data.csv
    model_path      required, teacher checkpoint
    n               rows, default 256
    noise           target noise scale, default 0.1
    dist            gaussian | heavy-tailed, default gaussian
    dof             heavy-tailed degrees of freedom, default 3
    mean, scale     per-dimension lists, default 0 and 1
  sensitivity       writes sensitivity.csv
    model_path, data_path   required
    metrics         default all: exact-sensitivity, quadratic-diagD, magnitude,
                    covariance, fisher-diag, grad-saliency, obd-weight
    layers          default every linear layer
  quantize          writes quantized.nnm and quantize.json
    model_path, data_path   required
    method          rtn | awq | obs | obs-weighted, default rtn
    layers          default every linear layer
    awq_metric      score driving protective scaling, default exact-sensitivity
  quantization keys (quantize and experiment)
    bits            2..8, default 4
    granularity     per-tensor | per-channel-in, default per-tensor
    scale_policy    absmax | grid-search-mse, default absmax
    group_size      per-channel-in group width, default 1
    order           desc-diag | natural, default desc-diag
    alpha_grid      default 0,0.25,0.5,0.75,1
  experiment        writes <kind>.json
    kind            required: prediction-fidelity | cross-layer | calibration-mismatch |
                    static-vs-adaptive | proxy-ranking | bit-allocation |
                    static-vs-adaptive-trials | weighted-obs-trials
    model_path, data_path   required except for the trial kinds
    layer           default first linear layer
    method          identity | rtn | awq | obs | obs-weighted (cross-layer rtn, static-vs-adaptive awq)
    eps             default 1e-1,1e-2,1e-3,1e-4
    rounds          adaptive sweeps, default 1
    teacher_path    calibration-mismatch: task teacher, required
    n, noise        calibration-mismatch and trial kinds, defaults 256 and 0.1
    shift_dim       calibration-mismatch: shifted input dimension, default 0
    shift_sigma     calibration-mismatch: mean shift in units of scale, default 0
    same_seed       calibration-mismatch: reuse the calibration seed for deploy, default false
    awq_metric      calibration-mismatch protection score, default exact-sensitivity
    metric          bit-allocation score, default exact-sensitivity
    candidate_bits  bit-allocation, default 2,3,4
    budgets         bit-allocation, default 2.5,3,3.5,4
    dims, relu, loss        trial kinds: instance architecture (dims required)
    trials          trial kinds, default 50
    outlier_offset  weighted-obs-trials target offset of the outlier row, default 10
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    GenModel,
    GenData,
    Sensitivity,
    Quantize,
    Experiment,
}

impl Command {
    pub fn tag(self) -> &'static str {
        match self {
            Command::GenModel => "gen-model",
            Command::GenData => "gen-data",
            Command::Sensitivity => "sensitivity",
            Command::Quantize => "quantize",
            Command::Experiment => "experiment",
        }
    }

    fn keys(self) -> &'static [&'static str] {
        const QUANT: [&str; 6] = [
            "bits",
            "granularity",
            "scale_policy",
            "group_size",
            "order",
            "alpha_grid",
        ];
        match self {
            Command::GenModel => &["seed", "out", "dims", "relu", "loss"],
            Command::GenData => &[
                "seed",
                "out",
                "model_path",
                "n",
                "noise",
                "dist",
                "dof",
                "mean",
                "scale",
            ],
            Command::Sensitivity => &["seed", "out", "model_path", "data_path", "metrics", "layers"],
            Command::Quantize => {
                const K: [&str; 13] = [
                    "seed",
                    "out",
                    "model_path",
                    "data_path",
                    "method",
                    "layers",
                    "awq_metric",
                    QUANT[0],
                    QUANT[1],
                    QUANT[2],
                    QUANT[3],
                    QUANT[4],
                    QUANT[5],
                ];
                &K
            }
            Command::Experiment => {
                const K: [&str; 32] = [
                    "seed",
                    "out",
                    "kind",
                    "model_path",
                    "data_path",
                    "layer",
                    "method",
                    "eps",
                    "rounds",
                    "teacher_path",
                    "n",
                    "noise",
                    "shift_dim",
                    "shift_sigma",
                    "same_seed",
                    "awq_metric",
                    "metric",
                    "candidate_bits",
                    "budgets",
                    "dims",
                    "relu",
                    "loss",
                    "trials",
                    "outlier_offset",
                    "dist",
                    "dof",
                    QUANT[0],
                    QUANT[1],
                    QUANT[2],
                    QUANT[3],
                    QUANT[4],
                    QUANT[5],
                ];
                &K
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sensiq", version, about = "Activation-sensitivity analysis and quantization diagnostics", after_long_help = KEY_HELP)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Raw `key = value` entries with their 1-based line numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str, command: Command) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    message: format!("expected `key = value`, found `{content}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if !command.keys().contains(&k) {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key `{k}` for command {}", command.tag()),
                });
            }
            if let Some((first, _)) = entries.get(k) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{k}` (lines {first} and {line})"),
                });
            }
            entries.insert(k.to_string(), (line, v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn get<T>(&self, key: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => parse(v).map(Some).ok_or_else(|| Error::Config {
                line: *line,
                message: format!("`{key}` expects {what}, found `{v}`"),
            }),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    fn list<T>(&self, key: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<Vec<T>>> {
        self.get(key, what, |v| {
            v.split(',')
                .map(|t| parse(t.trim()))
                .collect::<Option<Vec<T>>>()
                .filter(|l| !l.is_empty())
        })
    }

    fn required<T>(&self, key: &str, value: Option<T>) -> Result<T> {
        value.ok_or_else(|| Error::MissingKey(key.to_string()))
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_f64(v: &str) -> Option<f64> {
    v.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// How a `quantize` run treats each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Identity,
    Rtn,
    Awq,
    Obs,
    ObsWeighted,
}

impl Method {
    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "identity" => Some(Self::Identity),
            "rtn" => Some(Self::Rtn),
            "awq" => Some(Self::Awq),
            "obs" => Some(Self::Obs),
            "obs-weighted" => Some(Self::ObsWeighted),
            _ => None,
        }
    }

    fn layer_quant(self, spec: QuantSpec, order: ObsOrder) -> LayerQuant {
        match self {
            Method::Identity => LayerQuant::Identity,
            Method::Rtn => LayerQuant::Rtn(spec),
            Method::Awq => LayerQuant::Awq(spec),
            Method::Obs => LayerQuant::Obs(spec, order),
            Method::ObsWeighted => LayerQuant::ObsWeighted(spec, order),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    PredictionFidelity,
    CrossLayer,
    CalibrationMismatch,
    StaticVsAdaptive,
    ProxyRanking,
    BitAllocation,
    StaticVsAdaptiveTrials,
    WeightedObsTrials,
}

impl ExperimentKind {
    const ALL: [ExperimentKind; 8] = [
        Self::PredictionFidelity,
        Self::CrossLayer,
        Self::CalibrationMismatch,
        Self::StaticVsAdaptive,
        Self::ProxyRanking,
        Self::BitAllocation,
        Self::StaticVsAdaptiveTrials,
        Self::WeightedObsTrials,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::PredictionFidelity => "prediction-fidelity",
            Self::CrossLayer => "cross-layer",
            Self::CalibrationMismatch => "calibration-mismatch",
            Self::StaticVsAdaptive => "static-vs-adaptive",
            Self::ProxyRanking => "proxy-ranking",
            Self::BitAllocation => "bit-allocation",
            Self::StaticVsAdaptiveTrials => "static-vs-adaptive-trials",
            Self::WeightedObsTrials => "weighted-obs-trials",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    fn is_trials(self) -> bool {
        matches!(self, Self::StaticVsAdaptiveTrials | Self::WeightedObsTrials)
    }
}

/// Fully validated configuration for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model_path: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub teacher_path: Option<PathBuf>,
    pub metrics: Vec<MetricKind>,
    pub layers: Option<Vec<String>>,
    pub layer: Option<String>,
    pub quant: QuantSpec,
    pub order: ObsOrder,
    pub alpha_grid: Vec<f64>,
    pub method: Option<Method>,
    pub awq_metric: MetricKind,
    pub experiment: Option<ExperimentKind>,
    pub eps: Vec<f64>,
    pub rounds: usize,
    pub dims: Option<Vec<usize>>,
    pub relu: bool,
    pub loss: LossKind,
    pub n: usize,
    pub noise: f64,
    pub heavy_tail_dof: Option<f64>,
    pub mean: Option<Vec<f64>>,
    pub scale: Option<Vec<f64>>,
    pub shift_dim: usize,
    pub shift_sigma: f64,
    pub same_seed: bool,
    pub alloc_metric: MetricKind,
    pub candidate_bits: Vec<u32>,
    pub budgets: Vec<f64>,
    pub trials: usize,
    pub outlier_offset: f64,
    pub jobs: usize,
    /// Content hash of the effective configuration and every referenced file.
    pub config_digest: String,
}

fn resolve(base: &Path, raw: &RawConfig, key: &str) -> Result<Option<PathBuf>> {
    let Some(p) = raw.get(key, "a path", |v| Some(PathBuf::from(v)))? else {
        return Ok(None);
    };
    let p = if p.is_absolute() { p } else { base.join(p) };
    if !p.is_file() {
        return Err(Error::io(
            &p,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("`{key}` does not exist")),
        ));
    }
    Ok(Some(p))
}

/// Parses and validates `text` for `command`. `base_dir` anchors relative
/// paths; `seed` and `out` override the corresponding keys.
pub fn parse_config(
    text: &str,
    command: Command,
    base_dir: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    jobs: usize,
) -> Result<RunConfig> {
    let raw = RawConfig::parse(text, command)?;
    let metric = |v: &str| MetricKind::from_tag(v);
    let seed = match seed {
        Some(s) => s,
        None => raw
            .get("seed", "an unsigned 64-bit integer", |v| v.parse::<u64>().ok())?
            .unwrap_or(0),
    };
    let output_dir = match out {
        Some(o) => o,
        None => {
            let o = raw
                .get("out", "a path", |v| Some(PathBuf::from(v)))?
                .unwrap_or_else(|| "sensiq-out".into());
            if o.is_absolute() {
                o
            } else {
                base_dir.join(o)
            }
        }
    };
    let bits = raw.get("bits", "an integer", |v| v.parse::<u32>().ok())?.unwrap_or(4);
    let quant = QuantSpec {
        bits,
        symmetric: true,
        granularity: raw
            .get(
                "granularity",
                "per-tensor or per-channel-in",
                QuantGranularity::from_tag,
            )?
            .unwrap_or(QuantGranularity::PerTensor),
        scale_policy: raw
            .get("scale_policy", "absmax or grid-search-mse", ScalePolicy::from_tag)?
            .unwrap_or(ScalePolicy::AbsMax),
        group_size: raw.get("group_size", "a positive integer", |v| v.parse::<usize>().ok())?,
    };
    if !(2..=8).contains(&bits) {
        return Err(Error::Config {
            line: raw.line("bits"),
            message: format!("`bits` must be in [2, 8], got {bits}"),
        });
    }
    quant.validate().map_err(|e| Error::Config {
        line: raw.line("group_size"),
        message: e.to_string(),
    })?;
    let experiment = raw.get("kind", "an experiment kind", ExperimentKind::from_tag)?;
    let cfg = RunConfig {
        command,
        seed,
        output_dir,
        model_path: resolve(base_dir, &raw, "model_path")?,
        data_path: resolve(base_dir, &raw, "data_path")?,
        teacher_path: resolve(base_dir, &raw, "teacher_path")?,
        metrics: raw
            .list("metrics", "metric names", metric)?
            .unwrap_or_else(|| MetricKind::ALL.to_vec()),
        layers: raw.list("layers", "layer names", |v| Some(v.to_string()))?,
        layer: raw.get("layer", "a layer name", |v| Some(v.to_string()))?,
        quant,
        order: raw
            .get("order", "desc-diag or natural", ObsOrder::from_tag)?
            .unwrap_or(ObsOrder::DescDiag),
        alpha_grid: raw
            .list("alpha_grid", "reals in [0, 1]", |v| {
                parse_f64(v).filter(|a| (0.0..=1.0).contains(a))
            })?
            .unwrap_or_else(|| DEFAULT_ALPHA_GRID.to_vec()),
        method: raw.get("method", "identity, rtn, awq, obs or obs-weighted", Method::from_tag)?,
        awq_metric: raw
            .get("awq_metric", "a metric name", metric)?
            .unwrap_or(MetricKind::ExactSensitivity),
        experiment,
        eps: raw
            .list("eps", "non-negative reals", |v| parse_f64(v).filter(|e| *e >= 0.0))?
            .unwrap_or_else(|| vec![1e-1, 1e-2, 1e-3, 1e-4]),
        rounds: raw
            .get("rounds", "a positive integer", |v| {
                v.parse::<usize>().ok().filter(|r| *r > 0)
            })?
            .unwrap_or(1),
        dims: raw.list("dims", "positive integers", |v| {
            v.parse::<usize>().ok().filter(|d| *d > 0)
        })?,
        relu: raw.get("relu", "true or false", parse_bool)?.unwrap_or(true),
        loss: raw
            .get("loss", "mse or sce", LossKind::from_tag)?
            .unwrap_or(LossKind::Mse),
        n: raw
            .get("n", "a positive integer", |v| {
                v.parse::<usize>().ok().filter(|n| *n > 0)
            })?
            .unwrap_or(256),
        noise: raw
            .get("noise", "a non-negative real", |v| parse_f64(v).filter(|x| *x >= 0.0))?
            .unwrap_or(0.1),
        heavy_tail_dof: match raw.get("dist", "gaussian or heavy-tailed", |v| match v {
            "gaussian" => Some(false),
            "heavy-tailed" => Some(true),
            _ => None,
        })? {
            Some(true) => Some(
                raw.get("dof", "a positive real", |v| parse_f64(v).filter(|d| *d > 0.0))?
                    .unwrap_or(3.0),
            ),
            _ => None,
        },
        mean: raw.list("mean", "reals", parse_f64)?,
        scale: raw.list("scale", "positive reals", |v| parse_f64(v).filter(|s| *s > 0.0))?,
        shift_dim: raw
            .get("shift_dim", "a dimension index", |v| v.parse::<usize>().ok())?
            .unwrap_or(0),
        shift_sigma: raw.get("shift_sigma", "a real", parse_f64)?.unwrap_or(0.0),
        same_seed: raw.get("same_seed", "true or false", parse_bool)?.unwrap_or(false),
        alloc_metric: raw
            .get("metric", "a metric name", metric)?
            .unwrap_or(MetricKind::ExactSensitivity),
        candidate_bits: raw
            .list("candidate_bits", "integers in [2, 8]", |v| {
                v.parse::<u32>().ok().filter(|b| (2..=8).contains(b))
            })?
            .unwrap_or_else(|| vec![2, 3, 4]),
        budgets: raw
            .list("budgets", "reals", parse_f64)?
            .unwrap_or_else(|| vec![2.5, 3.0, 3.5, 4.0]),
        trials: raw
            .get("trials", "a positive integer", |v| {
                v.parse::<usize>().ok().filter(|t| *t > 0)
            })?
            .unwrap_or(50),
        outlier_offset: raw.get("outlier_offset", "a real", parse_f64)?.unwrap_or(10.0),
        jobs: jobs.max(1),
        config_digest: String::new(),
    };
    let cfg = check_required(cfg, &raw)?;
    let digest = config_digest(&cfg, &raw)?;
    Ok(RunConfig {
        config_digest: digest,
        ..cfg
    })
}

fn check_required(cfg: RunConfig, raw: &RawConfig) -> Result<RunConfig> {
    match cfg.command {
        Command::GenModel => {
            let dims = raw.required("dims", cfg.dims.as_ref())?;
            if dims.len() < 2 {
                return Err(Error::Config {
                    line: raw.line("dims"),
                    message: "`dims` needs at least an input and an output width".into(),
                });
            }
        }
        Command::GenData => {
            raw.required("model_path", cfg.model_path.as_ref())?;
        }
        Command::Sensitivity | Command::Quantize => {
            raw.required("model_path", cfg.model_path.as_ref())?;
            raw.required("data_path", cfg.data_path.as_ref())?;
        }
        Command::Experiment => {
            let kind = raw.required("kind", cfg.experiment)?;
            if kind.is_trials() {
                raw.required("dims", cfg.dims.as_ref())?;
            } else {
                raw.required("model_path", cfg.model_path.as_ref())?;
                if kind == ExperimentKind::CalibrationMismatch {
                    raw.required("teacher_path", cfg.teacher_path.as_ref())?;
                } else {
                    raw.required("data_path", cfg.data_path.as_ref())?;
                }
            }
        }
    }
    Ok(cfg)
}

fn config_digest(cfg: &RunConfig, raw: &RawConfig) -> Result<String> {
    let mut text = format!("sensiq-config\ncommand={}\nseed={}\n", cfg.command.tag(), cfg.seed);
    for (k, (_, v)) in &raw.entries {
        if k != "out" && k != "seed" {
            text.push_str(&format!("{k}={v}\n"));
        }
    }
    for (key, path) in [
        ("model_path", &cfg.model_path),
        ("data_path", &cfg.data_path),
        ("teacher_path", &cfg.teacher_path),
    ] {
        if let Some(p) = path {
            let body = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            text.push_str(&format!("{key}-sha256={}\n", digest_bytes(&body)));
        }
    }
    Ok(digest(&text))
}

fn digest_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// `layer,metric,channel,score,n_samples,seed`; weight-level metrics are
/// reduced to input channels.
pub fn emit_sensitivity_csv(reports: &[SensitivityReport], seed: u64) -> String {
    let mut out = String::from("layer,metric,channel,score,n_samples,seed\n");
    for r in reports {
        for (j, s) in r.channel_scores().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{j},{},{},{seed}\n",
                r.layer_name,
                r.metric.tag(),
                fmt_f64(*s),
                r.n_samples
            ));
        }
    }
    out
}

/// One parsed row of [`emit_sensitivity_csv`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub layer: String,
    pub metric: MetricKind,
    pub channel: usize,
    pub score: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn parse_sensitivity_csv(text: &str) -> Result<Vec<SensitivityRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "layer,metric,channel,score,n_samples,seed")) => {}
        _ => return Err(Error::parse(1, "missing sensitivity CSV header")),
    }
    lines
        .map(|(i, line)| {
            let bad = |what: &str| Error::parse(i + 1, format!("invalid {what}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::parse(i + 1, format!("expected 6 fields, found {}", f.len())));
            }
            Ok(SensitivityRow {
                layer: f[0].to_string(),
                metric: MetricKind::from_tag(f[1]).ok_or_else(|| bad("metric"))?,
                channel: f[2].parse().map_err(|_| bad("channel"))?,
                score: f[3].parse().map_err(|_| bad("score"))?,
                n_samples: f[4].parse().map_err(|_| bad("n_samples"))?,
                seed: f[5].parse().map_err(|_| bad("seed"))?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ExperimentJson<'a> {
    experiment: &'a str,
    seed: u64,
    config_digest: &'a str,
    scalars: &'a BTreeMap<String, f64>,
    series: &'a BTreeMap<String, Vec<f64>>,
}

/// Top-level `{experiment, seed, config_digest, scalars, series}`.
pub fn emit_experiment_json(result: &ExperimentResult) -> String {
    let body = ExperimentJson {
        experiment: &result.experiment,
        seed: result.seed,
        config_digest: &result.config_digest,
        scalars: &result.scalars,
        series: &result.series,
    };
    let mut s = serde_json::to_string_pretty(&body).expect("plain maps serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_digest: &'a str,
    files: Vec<&'a str>,
}

/// Files produced by a command, in emission order.
pub type Outputs = Vec<(String, String)>;

fn load_model(cfg: &RunConfig) -> Result<Network> {
    load_checkpoint(cfg.model_path.as_ref().expect("validated"))
}

fn load_data(cfg: &RunConfig) -> Result<crate::netcore::Batch> {
    crate::calib::load_csv(cfg.data_path.as_ref().expect("validated"))
}

fn target_layers(cfg: &RunConfig, net: &Network) -> Result<Vec<String>> {
    let all = net.linear_names();
    match &cfg.layers {
        None => Ok(all),
        Some(ls) => {
            for l in ls {
                if !all.contains(l) {
                    return Err(Error::UnknownLayer(l.clone()));
                }
            }
            Ok(ls.clone())
        }
    }
}

fn single_layer(cfg: &RunConfig, net: &Network) -> Result<String> {
    match &cfg.layer {
        Some(l) => net.linear(l).map(|_| l.clone()),
        None => net
            .linear_names()
            .into_iter()
            .next()
            .ok_or_else(|| Error::Validation("network has no linear layers".into())),
    }
}

fn dist_for(cfg: &RunConfig, dim: usize, seed: u64) -> Result<DistSpec> {
    let mut d = DistSpec::gaussian(dim, seed);
    if let Some(dof) = cfg.heavy_tail_dof {
        d = d.with_kind(DistKind::HeavyTailed { dof });
    }
    if let Some(m) = &cfg.mean {
        d.mean = m.clone();
    }
    if let Some(s) = &cfg.scale {
        d.scale = s.clone();
    }
    d.validate()?;
    Ok(d)
}

/// Executes `cfg` and returns the files it would write, without touching disk.
pub fn execute(cfg: &RunConfig) -> Result<Outputs> {
    let provenance = |r: ExperimentResult| r.with_provenance(cfg.seed, cfg.config_digest.clone());
    match cfg.command {
        Command::GenModel => {
            let dims = cfg.dims.as_ref().expect("validated");
            let net = random_mlp(dims, cfg.relu, cfg.loss, &mut Rng::derived(cfg.seed, "gen-model"))?;
            Ok(vec![("model.nnm".into(), to_checkpoint_string(&net))])
        }
        Command::GenData => {
            let teacher = load_model(cfg)?;
            let dim = teacher
                .input_dim()
                .ok_or_else(|| Error::Validation("teacher has no linear layers".into()))?;
            let dist = dist_for(cfg, dim, derive_seed(cfg.seed, "gen-data"))?;
            let batch = sample(&dist, &TaskSpec::new(teacher, cfg.noise)?, cfg.n)?;
            Ok(vec![("data.csv".into(), to_csv_string(&batch))])
        }
        Command::Sensitivity => {
            let net = load_model(cfg)?;
            let batch = load_data(cfg)?;
            let layers = target_layers(cfg, &net)?;
            let (_, taps) = net.backward(&batch, &layers)?;
            let mut reports = Vec::new();
            for (name, tap) in layers.iter().zip(&taps) {
                let w = &net.linear(name)?.weight;
                for &m in &cfg.metrics {
                    reports.push(compute(m, tap, w)?);
                }
            }
            Ok(vec![(
                "sensitivity.csv".into(),
                emit_sensitivity_csv(&reports, cfg.seed),
            )])
        }
        Command::Quantize => {
            let net = load_model(cfg)?;
            let batch = load_data(cfg)?;
            let layers = target_layers(cfg, &net)?;
            let method = cfg.method.unwrap_or(Method::Rtn);
            let (base, taps) = net.backward(&batch, &layers)?;
            let mut res = provenance(ExperimentResult {
                experiment: "quantize".into(),
                seed: 0,
                scalars: BTreeMap::new(),
                series: BTreeMap::new(),
                config_digest: String::new(),
            });
            let mut quantized = net.clone();
            for (name, tap) in layers.iter().zip(&taps) {
                let w = &net.linear(name)?.weight;
                let q = match method {
                    Method::Identity => {
                        continue;
                    }
                    Method::Rtn => quantize_rtn(w, &cfg.quant)?,
                    Method::Awq => {
                        let report = compute(cfg.awq_metric, tap, w)?.to_channel();
                        quantize_awq(w, tap, &report, &cfg.quant, &cfg.alpha_grid)?
                    }
                    Method::Obs => quantize_obs(w, &gram_mean(&tap.x)?, &cfg.quant, cfg.order)?,
                    Method::ObsWeighted => quantize_obs_weighted(w, tap, &cfg.quant, cfg.order)?,
                };
                if let Some(a) = q.awq_alpha {
                    res.scalars.insert(format!("alpha.{name}"), a);
                }
                res.scalars
                    .insert(format!("delta_frobenius_sq.{name}"), frobenius_sq(&q.delta));
                quantized = perturb_weights(&quantized, name, &q.delta)?;
            }
            let after = quantized.loss(&batch)?;
            res.scalars.insert("base_loss".into(), base);
            res.scalars.insert("quantized_loss".into(), after);
            res.scalars.insert("loss_delta".into(), after - base);
            Ok(vec![
                ("quantized.nnm".into(), to_checkpoint_string(&quantized)),
                ("quantize.json".into(), emit_experiment_json(&res)),
            ])
        }
        Command::Experiment => {
            let kind = cfg.experiment.expect("validated");
            let result = run_experiment(cfg, kind)?;
            Ok(vec![(
                format!("{}.json", kind.tag()),
                emit_experiment_json(&provenance(result)),
            )])
        }
    }
}

fn trial_setup(cfg: &RunConfig) -> TrialSetup {
    TrialSetup {
        dims: cfg.dims.clone().expect("validated"),
        relu: cfg.relu,
        loss: cfg.loss,
        n: cfg.n,
        noise: cfg.noise,
    }
}

fn trial_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.trials)
        .map(|t| derive_seed(cfg.seed, &format!("trial-{t}")))
        .collect()
}

fn run_experiment(cfg: &RunConfig, kind: ExperimentKind) -> Result<ExperimentResult> {
    if kind.is_trials() {
        let setup = trial_setup(cfg);
        let seeds = trial_seeds(cfg);
        return match kind {
            ExperimentKind::StaticVsAdaptiveTrials => {
                let m = cfg.method.unwrap_or(Method::Awq).layer_quant(cfg.quant, cfg.order);
                run_static_vs_adaptive_trials(&setup, m, cfg.rounds, &seeds, cfg.jobs)
            }
            _ => run_weighted_obs_trials(&setup, &cfg.quant, cfg.order, cfg.outlier_offset, &seeds, cfg.jobs),
        };
    }
    let net = load_model(cfg)?;
    if kind == ExperimentKind::CalibrationMismatch {
        let teacher = load_checkpoint(cfg.teacher_path.as_ref().expect("validated"))?;
        let dim = net
            .input_dim()
            .ok_or_else(|| Error::Validation("network has no linear layers".into()))?;
        let calib = dist_for(cfg, dim, derive_seed(cfg.seed, "calibration"))?;
        let deploy_seed = if cfg.same_seed {
            calib.seed
        } else {
            derive_seed(cfg.seed, "deployment")
        };
        if cfg.shift_dim >= dim {
            return Err(Error::Validation(format!(
                "shift_dim {} outside input dim {dim}",
                cfg.shift_dim
            )));
        }
        let mut delta = vec![0.0; dim];
        delta[cfg.shift_dim] = cfg.shift_sigma * calib.scale[cfg.shift_dim];
        let deploy = shift(&calib, &delta, &vec![1.0; dim])?.with_seed(deploy_seed);
        let task = TaskSpec::new(teacher, cfg.noise)?;
        let layer = single_layer(cfg, &net)?;
        return run_calibration_mismatch(&net, &calib, &deploy, &task, cfg.n, &layer, &cfg.quant, cfg.awq_metric);
    }
    let batch = load_data(cfg)?;
    let plan = |default: Method| -> Vec<(String, LayerQuant)> {
        let m = cfg.method.unwrap_or(default).layer_quant(cfg.quant, cfg.order);
        let layers = cfg.layers.clone().unwrap_or_else(|| net.linear_names());
        layers.into_iter().map(|l| (l, m)).collect()
    };
    match kind {
        ExperimentKind::PredictionFidelity => {
            run_prediction_fidelity(&net, &batch, &single_layer(cfg, &net)?, &cfg.quant, &cfg.eps)
        }
        ExperimentKind::CrossLayer => run_cross_layer(&net, &batch, &plan(Method::Rtn)),
        ExperimentKind::StaticVsAdaptive => run_static_vs_adaptive(&net, &batch, &plan(Method::Awq), cfg.rounds),
        ExperimentKind::ProxyRanking => run_proxy_ranking(&net, &batch, &single_layer(cfg, &net)?, &cfg.quant),
        ExperimentKind::BitAllocation => run_bit_allocation(
            &net,
            &batch,
            cfg.alloc_metric,
            &cfg.quant,
            &cfg.candidate_bits,
            &cfg.budgets,
        ),
        _ => unreachable!("handled above"),
    }
}

/// Writes `outputs` and `manifest.json` into `cfg.output_dir`.
pub fn write_outputs(cfg: &RunConfig, outputs: &Outputs) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in outputs {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = Manifest {
        command: cfg.command.tag(),
        version: VERSION,
        seed: cfg.seed,
        config_digest: &cfg.config_digest,
        files: outputs.iter().map(|(n, _)| n.as_str()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("plain struct serializes");
    text.push('\n');
    let p = dir.join("manifest.json");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Parses, executes and writes one command.
pub fn run(cli: &Cli) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&cli.config).map_err(|e| Error::io(&cli.config, e))?;
    let base = cli.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg = parse_config(&text, cli.command, &base, cli.seed, cli.out.clone(), cli.jobs)?;
    let outputs = execute(&cfg)?;
    write_outputs(&cfg, &outputs)?;
    Ok(cfg)
}

/// Single-line, machine-parsable error text.
pub fn error_line(e: &Error) -> String {
    format!("sensiq: error[{}]: {}", e.kind(), e.to_string().replace('\n', " "))
}

/// Entry point shared by the binary and tests; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!(
                "{}",
                error_line(&Error::Usage(first.trim_start_matches("error: ").to_string()))
            );
            return 1;
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> PathBuf {
        PathBuf::from("/nonexistent-base")
    }

    #[test]
    fn minimal_gen_model_config() {
        let cfg = parse_config("dims = 4, 3\n", Command::GenModel, &base(), None, None, 1).unwrap();
        assert_eq!(cfg.dims, Some(vec![4, 3]));
        assert_eq!(cfg.quant.bits, 4);
        assert!(cfg.relu);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.config_digest.len(), 64);
    }

    #[test]
    fn bits_below_two_rejected() {
        match parse_config("dims = 2,2\n", Command::GenModel, &base(), None, None, 1) {
            Ok(_) => {}
            Err(e) => panic!("{e}"),
        }
        let text = "kind = proxy-ranking\nbits = 1\n";
        match parse_config(text, Command::Experiment, &base(), None, None, 1) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("bits"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let text = "# header\ndims = 3,2\nrelu = true\ndims = 4,2\n";
        match parse_config(text, Command::GenModel, &base(), None, None, 1) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("lines 2 and 4"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_type_mismatch() {
        let e = parse_config("dims = 3,2\ncolour = red\n", Command::GenModel, &base(), None, None, 1).unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }));
        assert_eq!(e.exit_code(), 1);
        let e = parse_config("dims = 3,x\n", Command::GenModel, &base(), None, None, 1).unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        let e = parse_config("relu = true\n", Command::GenModel, &base(), None, None, 1).unwrap_err();
        assert!(matches!(e, Error::MissingKey(ref k) if k == "dims"));
    }

    #[test]
    fn missing_file_is_data_error() {
        let e = parse_config("model_path = nope.nnm\n", Command::GenData, &base(), None, None, 1).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn sensitivity_csv_round_trip_and_empty() {
        assert_eq!(
            emit_sensitivity_csv(&[], 3),
            "layer,metric,channel,score,n_samples,seed\n"
        );
        assert!(parse_sensitivity_csv(&emit_sensitivity_csv(&[], 3)).unwrap().is_empty());
        let x = crate::numerics::Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 / 7.0);
        let tap = crate::netcore::LayerTap::new("fc", x, crate::numerics::Matrix::zeros(3, 1), None).unwrap();
        let r = crate::sensitivity::magnitude(&tap).unwrap();
        let rows = parse_sensitivity_csv(&emit_sensitivity_csv(std::slice::from_ref(&r), 9)).unwrap();
        assert_eq!(rows.len(), 2);
        for (row, s) in rows.iter().zip(&r.scores) {
            assert_eq!(row.score.to_bits(), s.to_bits());
            assert_eq!(row.seed, 9);
        }
    }

    #[test]
    fn experiment_json_fields() {
        let mut r = ExperimentResult {
            experiment: "x".into(),
            seed: 5,
            scalars: BTreeMap::new(),
            series: BTreeMap::new(),
            config_digest: "d".into(),
        };
        r.scalars.insert("a".into(), 0.1);
        r.series.insert("s".into(), vec![1.0, 1e-300]);
        let v: serde_json::Value = serde_json::from_str(&emit_experiment_json(&r)).unwrap();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for k in ["experiment", "seed", "config_digest", "scalars", "series"] {
            assert!(obj.contains_key(k), "{k}");
        }
        assert_eq!(v["scalars"]["a"].as_f64(), Some(0.1));
        assert_eq!(v["series"]["s"][1].as_f64(), Some(1e-300));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["sensiq", "bogus", "--config", "x"]), 1);
        assert_eq!(main_with_args(["sensiq", "gen-model"]), 1);
    }
}
