//! Experiment configuration, synthetic data, drivers and result files.
//!
//! Configuration is a flat `key = value` text file with dotted section keys
//! (`#` starts a comment, lists are comma separated), or a JSON object whose
//! nesting spells the same keys. Any key can be overridden from the
//! environment as `WDMUP_` + the key in upper case with dots replaced by
//! underscores, e.g. `WDMUP_ARCH_WIDTH_LIST=64,128,256`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::diagnostics::{
    audit_update_orders, claim1_ratios, claim2_gap, coord_check, decomposition_sweep, gradient_rank_one_ratios,
    measure_sweep, run_assumption_protocol, verify_assumption_1, verify_assumption_2, verify_assumption_3,
    verify_second_order_auto, AssumptionProtocol, AssumptionReport, Axis, CoordCheckConfig, CoordCheckResult,
    DataSource, DiagError, FitCheck, LayerSelection, ModelSpec, SweepConfig, Verdict, PROBE_STEP,
};
use crate::linalg::{gaussian_matrix, Matrix, RandomSource};
use crate::netsim::{Activation, ArchSpec, BlockSpec, Loss};
use crate::optim::{apply_update, clip_global_norm, update, warmup_cosine, OptimizerState, ParamState, StepOptions};
use crate::scaling::{
    check_bias_condition, check_init_condition, check_update_condition, BaseHyperparams, BiasInit, ConditionReport,
    DepthConvention, InputModality, LayerRole, OptimizerKind, ParamKind, ScaledHyperparams,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("writing {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Scaling(#[from] crate::scaling::ScalingError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
    #[error(transparent)]
    Net(#[from] crate::netsim::NetError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "WDMUP_";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Scale,
    CoordCheck,
    Transfer,
    Verify,
    Equiv,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Scale => "scale",
            ExperimentKind::CoordCheck => "coordcheck",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::Verify => "verify",
            ExperimentKind::Equiv => "equiv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Scale, Self::CoordCheck, Self::Transfer, Self::Verify, Self::Equiv]
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianTeacher,
    TwoClassGaussian,
    OneHot,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianTeacher => "gaussian_teacher",
            DatasetKind::TwoClassGaussian => "two_class",
            DatasetKind::OneHot => "one_hot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian_teacher" | "teacher" => Some(DatasetKind::GaussianTeacher),
            "two_class" | "two_class_gaussian" => Some(DatasetKind::TwoClassGaussian),
            "one_hot" | "onehot" => Some(DatasetKind::OneHot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Some(OutputFormat::Csv),
            "json" => Some(OutputFormat::Json),
            "both" => Some(OutputFormat::Both),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
            OutputFormat::Both => "both",
        }
    }

    fn csv(self) -> bool {
        self != OutputFormat::Json
    }

    fn json(self) -> bool {
        self != OutputFormat::Csv
    }
}

/// Every recognised key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "verify"),
    ("arch.d0", "16"),
    ("arch.d_out", "4"),
    ("arch.width_list", "64,128,256,512,1024"),
    ("arch.depth_list", "4,8,16,32,64,128"),
    ("arch.block_depth", "2"),
    ("arch.hidden_ratio", "1"),
    ("arch.activation", "linear"),
    ("arch.bias", "false"),
    ("model.param", "mup"),
    ("model.optimizer", "muon_kimi"),
    ("model.momentum", "false"),
    ("model.exact", "true"),
    ("model.convention", "ratio"),
    ("model.base_width", "1"),
    ("model.base_depth", "1"),
    ("model.modality", "dense"),
    ("model.bias_init", "zero"),
    ("model.loss", "mse"),
    ("model.hold_alpha", "false"),
    ("hp.alpha_base", "1"),
    ("hp.sigma2_base", "1"),
    ("hp.eta_base", "0.1"),
    ("hp.lambda_base", "0"),
    ("hp.eps_base", "1e-16"),
    ("data.kind", "gaussian_teacher"),
    ("data.batch_size", "32"),
    ("data.samples", "256"),
    ("data.separation", "2"),
    ("schedule.steps", "10"),
    ("schedule.warmup", "0.1"),
    ("schedule.cosine_floor", "0.1"),
    ("schedule.clip", "1"),
    ("sweep.axis", "width"),
    ("sweep.record_params", "false"),
    ("sweep.band", "4"),
    ("transfer.lr_exponents", "-10,-9,-8,-7,-6,-5,-4"),
    ("verify.conditions", "true"),
    ("verify.audit", "true"),
    ("verify.audit_optimizers", "all"),
    ("verify.claims", "true"),
    ("verify.assumptions", "false"),
    ("verify.appg_width", "256"),
    ("verify.appg_d0", "3072"),
    ("verify.appg_depths", "4,8,16,32,64,128,256"),
    ("verify.appg_steps", "200"),
    ("verify.appg_samples", "200"),
    ("equiv.shapes", "12x8"),
    ("equiv.count", "100"),
    ("run.seeds", "0,1,2"),
    ("run.out", "results"),
    ("run.workers", "0"),
    ("run.format", "both"),
];

/// Per-experiment overrides of [`KEYS`]; the transfer sweep needs a trainable
/// nonlinear model and a wider rate grid than the diagnostic runs.
pub const TRANSFER_DEFAULTS: &[(&str, &str)] = &[
    ("arch.width_list", "32,64,128,256,512"),
    ("arch.activation", "relu"),
    ("model.optimizer", "adamw"),
    ("model.momentum", "true"),
    ("schedule.steps", "60"),
    ("transfer.lr_exponents", "-9,-8,-7,-6,-5,-4,-3,-2,-1,0"),
];

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

/// Parses the flat `key = value` format.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flattens a JSON object into dotted keys; arrays become comma lists.
pub fn parse_json_config(text: &str) -> Result<BTreeMap<String, String>> {
    let value: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
    let mut map = BTreeMap::new();
    flatten_json("", &value, &mut map)?;
    Ok(map)
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn flatten_json(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    match v {
        Value::Object(obj) => {
            for (k, child) in obj {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, child, out)?;
            }
        }
        Value::Array(items) => {
            let parts: Option<Vec<String>> = items.iter().map(scalar_string).collect();
            let parts = parts.ok_or_else(|| HarnessError::Config(format!("`{prefix}`: lists must hold scalars")))?;
            out.insert(prefix.to_string(), parts.join(","));
        }
        other => {
            let s = scalar_string(other).ok_or_else(|| HarnessError::Config(format!("`{prefix}`: null value")))?;
            out.insert(prefix.to_string(), s);
        }
    }
    Ok(())
}

/// Reads a config file; `.json` files use the JSON form.
pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) || text.trim_start().starts_with('{') {
        parse_json_config(&text)
    } else {
        parse_flat(&text)
    }
}

/// Applies environment overrides through `lookup` (normally `std::env::var`).
pub fn apply_env_overrides(map: &mut BTreeMap<String, String>, lookup: impl Fn(&str) -> Option<String>) {
    for (key, _) in KEYS {
        if let Some(v) = lookup(&env_name(key)) {
            map.insert(key.to_string(), v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d0: usize,
    pub d_out: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub block_depth: usize,
    /// `n_l / n`.
    pub hidden_ratio: f64,
    pub activation: Activation,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub param: ParamKind,
    pub optimizer: OptimizerKind,
    /// Practical (momentum) mode instead of reduced mode.
    pub momentum: bool,
    pub exact: bool,
    pub convention: DepthConvention,
    pub base_width: Option<usize>,
    pub base_depth: Option<usize>,
    pub modality: InputModality,
    pub bias_init: BiasInit,
    pub loss: Loss,
    pub hold_alpha: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub batch_size: usize,
    pub samples: usize,
    /// Distance of each class mean from the origin (two-class data).
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    /// Warmup as a fraction of all steps.
    pub warmup: f64,
    pub cosine_floor: f64,
    /// Global-norm clip; 0 disables.
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub conditions: bool,
    pub audit: bool,
    pub audit_optimizers: Vec<OptimizerKind>,
    pub claims: bool,
    pub assumptions: bool,
    pub appg_width: usize,
    pub appg_d0: usize,
    pub appg_depths: Vec<usize>,
    pub appg_steps: usize,
    pub appg_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub arch: ArchConfig,
    pub model: ModelConfig,
    pub hp: BaseHyperparams,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub axis: Axis,
    pub record_params: bool,
    pub band: f64,
    pub lr_exponents: Vec<i32>,
    pub verify: VerifyConfig,
    pub equiv_shapes: Vec<(usize, usize)>,
    pub equiv_count: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads; 0 uses every logical CPU.
    pub workers: usize,
    pub format: OutputFormat,
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
    kind_defaults: &'static [(&'static str, &'static str)],
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.map
            .get(key)
            .map(String::as_str)
            .or_else(|| self.kind_defaults.iter().find(|(k, _)| *k == key).map(|(_, d)| *d))
            .or_else(|| KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d))
            .expect("key listed in KEYS")
    }

    fn invalid(&self, key: &str, reason: impl Into<String>) -> HarnessError {
        HarnessError::InvalidValue { key: key.into(), value: self.raw(key).into(), reason: reason.into() }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key).trim().parse().map_err(|_| self.invalid(key, "cannot parse"))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key).trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(self.invalid(key, "expected true or false")),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let items: Vec<&str> = self.raw(key).split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(self.invalid(key, "list must not be empty"));
        }
        items.iter().map(|s| s.parse().map_err(|_| self.invalid(key, format!("cannot parse `{s}`")))).collect()
    }

    fn choice<T>(&self, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        f(self.raw(key)).ok_or_else(|| self.invalid(key, "unrecognised option"))
    }

    fn auto(&self, key: &str) -> Result<Option<usize>> {
        if self.raw(key).trim().eq_ignore_ascii_case("auto") {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }
}

fn parse_activation(s: &str) -> Option<Activation> {
    match s.trim().to_ascii_lowercase().as_str() {
        "linear" | "identity" => Some(Activation::Linear),
        "relu" => Some(Activation::Relu),
        _ => None,
    }
}

fn parse_convention(s: &str) -> Option<DepthConvention> {
    match s.trim().to_ascii_lowercase().as_str() {
        "ratio" => Some(DepthConvention::Ratio),
        "absolute" => Some(DepthConvention::Absolute),
        _ => None,
    }
}

fn parse_modality(s: &str) -> Option<InputModality> {
    match s.trim().to_ascii_lowercase().as_str() {
        "dense" => Some(InputModality::Dense),
        "one_hot" | "onehot" => Some(InputModality::OneHot),
        _ => None,
    }
}

fn parse_bias_init(s: &str) -> Option<BiasInit> {
    match s.trim().to_ascii_lowercase().as_str() {
        "zero" => Some(BiasInit::Zero),
        "gaussian" => Some(BiasInit::Gaussian),
        _ => None,
    }
}

fn parse_loss(s: &str) -> Option<Loss> {
    match s.trim().to_ascii_lowercase().as_str() {
        "mse" | "squared_error" => Some(Loss::SquaredError),
        "bce" | "binary_cross_entropy" => Some(Loss::BinaryCrossEntropy),
        _ => None,
    }
}

fn parse_axis(s: &str) -> Option<Axis> {
    match s.trim().to_ascii_lowercase().as_str() {
        "width" => Some(Axis::Width),
        "depth" => Some(Axis::Depth),
        _ => None,
    }
}

fn parse_optimizers(s: &str) -> Option<Vec<OptimizerKind>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Some(OptimizerKind::ALL.to_vec());
    }
    s.split(',').map(|p| OptimizerKind::parse(p.trim())).collect()
}

fn parse_shapes(s: &str) -> Option<Vec<(usize, usize)>> {
    s.split(',')
        .map(|p| {
            let (r, c) = p.trim().split_once('x')?;
            Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Builds a validated config from flat keys (missing keys take defaults).
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KEYS.iter().any(|(k, _)| k == key) {
                return Err(HarnessError::UnknownKey(key.clone()));
            }
        }
        let r = Reader { map, kind_defaults: &[] };
        let kind = r.choice("experiment", ExperimentKind::parse)?;
        let kind_defaults = if kind == ExperimentKind::Transfer { TRANSFER_DEFAULTS } else { &[] };
        let r = Reader { map, kind_defaults };
        let cfg = ExperimentConfig {
            experiment: kind,
            arch: ArchConfig {
                d0: r.parse("arch.d0")?,
                d_out: r.parse("arch.d_out")?,
                widths: r.list("arch.width_list")?,
                depths: r.list("arch.depth_list")?,
                block_depth: r.parse("arch.block_depth")?,
                hidden_ratio: r.parse("arch.hidden_ratio")?,
                activation: r.choice("arch.activation", parse_activation)?,
                bias: r.bool("arch.bias")?,
            },
            model: ModelConfig {
                param: r.choice("model.param", ParamKind::parse)?,
                optimizer: r.choice("model.optimizer", OptimizerKind::parse)?,
                momentum: r.bool("model.momentum")?,
                exact: r.bool("model.exact")?,
                convention: r.choice("model.convention", parse_convention)?,
                base_width: r.auto("model.base_width")?,
                base_depth: r.auto("model.base_depth")?,
                modality: r.choice("model.modality", parse_modality)?,
                bias_init: r.choice("model.bias_init", parse_bias_init)?,
                loss: r.choice("model.loss", parse_loss)?,
                hold_alpha: r.bool("model.hold_alpha")?,
            },
            hp: BaseHyperparams {
                alpha_base: r.parse("hp.alpha_base")?,
                sigma2_base: r.parse("hp.sigma2_base")?,
                eta_base: r.parse("hp.eta_base")?,
                lambda_base: r.parse("hp.lambda_base")?,
                eps_base: r.parse("hp.eps_base")?,
            },
            data: DataConfig {
                kind: r.choice("data.kind", DatasetKind::parse)?,
                batch_size: r.parse("data.batch_size")?,
                samples: r.parse("data.samples")?,
                separation: r.parse("data.separation")?,
            },
            schedule: ScheduleConfig {
                steps: r.parse("schedule.steps")?,
                warmup: r.parse("schedule.warmup")?,
                cosine_floor: r.parse("schedule.cosine_floor")?,
                clip: r.parse("schedule.clip")?,
            },
            axis: r.choice("sweep.axis", parse_axis)?,
            record_params: r.bool("sweep.record_params")?,
            band: r.parse("sweep.band")?,
            lr_exponents: r.list("transfer.lr_exponents")?,
            verify: VerifyConfig {
                conditions: r.bool("verify.conditions")?,
                audit: r.bool("verify.audit")?,
                audit_optimizers: r.choice("verify.audit_optimizers", parse_optimizers)?,
                claims: r.bool("verify.claims")?,
                assumptions: r.bool("verify.assumptions")?,
                appg_width: r.parse("verify.appg_width")?,
                appg_d0: r.parse("verify.appg_d0")?,
                appg_depths: r.list("verify.appg_depths")?,
                appg_steps: r.parse("verify.appg_steps")?,
                appg_samples: r.parse("verify.appg_samples")?,
            },
            equiv_shapes: r.choice("equiv.shapes", parse_shapes)?,
            equiv_count: r.parse("equiv.count")?,
            seeds: r.list("run.seeds")?,
            out: PathBuf::from(r.raw("run.out").trim()),
            workers: r.parse("run.workers")?,
            format: r.choice("run.format", OutputFormat::parse)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults for an experiment kind.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut map = BTreeMap::new();
        map.insert("experiment".to_string(), kind.name().to_string());
        ExperimentConfig::from_map(&map).expect("defaults are valid")
    }

    /// File (optional) plus environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = match path {
            Some(p) => load_config_file(p)?,
            None => BTreeMap::new(),
        };
        apply_env_overrides(&mut map, |k| std::env::var(k).ok());
        ExperimentConfig::from_map(&map)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        let a = &self.arch;
        if a.widths.iter().chain(&a.depths).any(|&s| s == 0) || a.d0 == 0 || a.d_out == 0 {
            return bad("sizes must be positive");
        }
        if a.block_depth == 0 {
            return bad("arch.block_depth must be at least 1");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("run.seeds must be distinct");
        }
        if self.data.batch_size == 0 || self.data.samples == 0 {
            return bad("data.batch_size and data.samples must be at least 1");
        }
        if self.data.kind == DatasetKind::TwoClassGaussian && a.d_out != 1 {
            return bad("two-class data needs arch.d_out = 1");
        }
        if !(0.0..1.0).contains(&self.schedule.warmup) {
            return bad("schedule.warmup must lie in [0, 1)");
        }
        if self.verify.appg_depths.is_empty() || self.equiv_shapes.is_empty() {
            return bad("lists must not be empty");
        }
        Ok(())
    }

    /// Resolved configuration as flat keys (used for the summary echo).
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let a = &self.arch;
        let m = &self.model;
        let auto = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        let act = match a.activation {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        };
        let conv = match m.convention {
            DepthConvention::Ratio => "ratio",
            DepthConvention::Absolute => "absolute",
        };
        let modality = match m.modality {
            InputModality::Dense => "dense",
            InputModality::OneHot => "one_hot",
        };
        let bias_init = match m.bias_init {
            BiasInit::Zero => "zero",
            BiasInit::Gaussian => "gaussian",
        };
        let loss = match m.loss {
            Loss::SquaredError => "mse",
            Loss::BinaryCrossEntropy => "bce",
        };
        let opts: Vec<&str> = self.verify.audit_optimizers.iter().map(|o| o.name()).collect();
        let shapes: Vec<String> = self.equiv_shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect();
        let entries: Vec<(&str, String)> = vec![
            ("experiment", self.experiment.name().into()),
            ("arch.d0", a.d0.to_string()),
            ("arch.d_out", a.d_out.to_string()),
            ("arch.width_list", join(&a.widths)),
            ("arch.depth_list", join(&a.depths)),
            ("arch.block_depth", a.block_depth.to_string()),
            ("arch.hidden_ratio", a.hidden_ratio.to_string()),
            ("arch.activation", act.into()),
            ("arch.bias", a.bias.to_string()),
            ("model.param", m.param.name().into()),
            ("model.optimizer", m.optimizer.name().into()),
            ("model.momentum", m.momentum.to_string()),
            ("model.exact", m.exact.to_string()),
            ("model.convention", conv.into()),
            ("model.base_width", auto(m.base_width)),
            ("model.base_depth", auto(m.base_depth)),
            ("model.modality", modality.into()),
            ("model.bias_init", bias_init.into()),
            ("model.loss", loss.into()),
            ("model.hold_alpha", m.hold_alpha.to_string()),
            ("hp.alpha_base", self.hp.alpha_base.to_string()),
            ("hp.sigma2_base", self.hp.sigma2_base.to_string()),
            ("hp.eta_base", self.hp.eta_base.to_string()),
            ("hp.lambda_base", self.hp.lambda_base.to_string()),
            ("hp.eps_base", self.hp.eps_base.to_string()),
            ("data.kind", self.data.kind.name().into()),
            ("data.batch_size", self.data.batch_size.to_string()),
            ("data.samples", self.data.samples.to_string()),
            ("data.separation", self.data.separation.to_string()),
            ("schedule.steps", self.schedule.steps.to_string()),
            ("schedule.warmup", self.schedule.warmup.to_string()),
            ("schedule.cosine_floor", self.schedule.cosine_floor.to_string()),
            ("schedule.clip", self.schedule.clip.to_string()),
            ("sweep.axis", self.axis.name().into()),
            ("sweep.record_params", self.record_params.to_string()),
            ("sweep.band", self.band.to_string()),
            ("transfer.lr_exponents", join(&self.lr_exponents)),
            ("verify.conditions", self.verify.conditions.to_string()),
            ("verify.audit", self.verify.audit.to_string()),
            ("verify.audit_optimizers", opts.join(",")),
            ("verify.claims", self.verify.claims.to_string()),
            ("verify.assumptions", self.verify.assumptions.to_string()),
            ("verify.appg_width", self.verify.appg_width.to_string()),
            ("verify.appg_d0", self.verify.appg_d0.to_string()),
            ("verify.appg_depths", join(&self.verify.appg_depths)),
            ("verify.appg_steps", self.verify.appg_steps.to_string()),
            ("verify.appg_samples", self.verify.appg_samples.to_string()),
            ("equiv.shapes", shapes.join(",")),
            ("equiv.count", self.equiv_count.to_string()),
            ("run.seeds", join(&self.seeds)),
            ("run.out", self.out.display().to_string()),
            ("run.workers", self.workers.to_string()),
            ("run.format", self.format.name().into()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Template architecture at the first width and depth.
    pub fn arch_template(&self) -> ArchSpec {
        let a = &self.arch;
        let width = a.widths[0];
        ArchSpec {
            d0: a.d0,
            width,
            d_out: a.d_out,
            depth: a.depths[0],
            block: BlockSpec {
                depth: a.block_depth,
                hidden_width: ((width as f64 * a.hidden_ratio).round() as usize).max(1),
                activation: a.activation,
                use_bias: a.bias,
            },
        }
    }

    /// Model family with base sizes defaulting to the smallest listed sizes.
    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        let mut spec = ModelSpec::new(self.arch_template(), m.optimizer, m.param, self.hp);
        spec.base_width = m.base_width.unwrap_or_else(|| *self.arch.widths.iter().min().expect("nonempty"));
        spec.base_depth = m.base_depth.unwrap_or_else(|| *self.arch.depths.iter().min().expect("nonempty"));
        spec.convention = m.convention;
        spec.modality = m.modality;
        spec.bias_init = m.bias_init;
        spec.loss = m.loss;
        spec.batch_size = self.data.batch_size;
        spec.hold_alpha_constant = m.hold_alpha;
        let mut options = if m.momentum { StepOptions::practical(m.optimizer) } else { StepOptions::reduced() };
        options.exact = m.exact;
        spec.options = options;
        spec
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.data.kind,
            d0: self.arch.d0,
            d_out: self.arch.d_out,
            separation: self.data.separation,
        }
    }

    fn sizes(&self, axis: Axis) -> &[usize] {
        match axis {
            Axis::Width => &self.arch.widths,
            Axis::Depth => &self.arch.depths,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Shape and kind of a synthetic task; samples are drawn per seed and step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub d0: usize,
    pub d_out: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub kind: DatasetKind,
    pub inputs: Matrix,
    pub targets: Matrix,
    pub seed: u64,
}

/// Number of hidden units of the teacher network.
const TEACHER_WIDTH: usize = 32;

/// Draws `samples` examples. The task itself (teacher weights, class means,
/// token embeddings) depends only on `seed`; the examples also depend on
/// `stream`.
pub fn make_dataset(spec: &DatasetSpec, samples: usize, seed: u64, stream: u64) -> SyntheticDataset {
    let mut task = RandomSource::derived(seed, &format!("task/{}", spec.kind.name()));
    let mut rng = RandomSource::derived(seed, &format!("data/{}/{stream}", spec.kind.name()));
    let (inputs, targets) = match spec.kind {
        DatasetKind::GaussianTeacher => {
            let u = gaussian_matrix(TEACHER_WIDTH, spec.d0, 1.0 / (spec.d0 as f64).sqrt(), &mut task);
            let v = gaussian_matrix(spec.d_out, TEACHER_WIDTH, 1.0 / (TEACHER_WIDTH as f64).sqrt(), &mut task);
            let x = gaussian_matrix(samples, spec.d0, 1.0, &mut rng);
            let hidden = x.matmul_nt(&u).expect("shapes").map(f64::tanh);
            let y = hidden.matmul_nt(&v).expect("shapes");
            (x, y)
        }
        DatasetKind::TwoClassGaussian => {
            let mut mean = task.normal_vec(spec.d0, 1.0);
            let norm = crate::linalg::norm2(&mean);
            mean.iter_mut().for_each(|m| *m *= spec.separation / norm);
            let mut x = gaussian_matrix(samples, spec.d0, 1.0, &mut rng);
            let mut y = Matrix::zeros(samples, 1);
            for s in 0..samples {
                let label = (s % 2) as f64;
                let sign = 2.0 * label - 1.0;
                crate::linalg::axpy(sign, &mean, x.row_mut(s));
                y[(s, 0)] = label;
            }
            (x, y)
        }
        DatasetKind::OneHot => {
            let table = gaussian_matrix(spec.d_out, spec.d0, 1.0, &mut task);
            let mut x = Matrix::zeros(samples, spec.d0);
            let mut y = Matrix::zeros(samples, spec.d_out);
            for s in 0..samples {
                let k = rng.below(spec.d0);
                x.row_mut(s)[k] = 1.0;
                for o in 0..spec.d_out {
                    y[(s, o)] = table[(o, k)];
                }
            }
            (x, y)
        }
    };
    SyntheticDataset { kind: spec.kind, inputs, targets, seed }
}

impl DataSource for DatasetSpec {
    fn batch(&self, seed: u64, step: usize, size: usize) -> (Matrix, Matrix) {
        let d = make_dataset(self, size, seed, step as u64);
        (d.inputs, d.targets)
    }
}

// ---------------------------------------------------------------------------
// Result rows and files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MetricValue {
    Value(f64),
    Diverged,
}

impl MetricValue {
    pub fn render(&self) -> String {
        match self {
            MetricValue::Diverged => "diverged".into(),
            MetricValue::Value(v) if v.is_nan() => "nan".into(),
            MetricValue::Value(v) if v.is_infinite() => "diverged".into(),
            MetricValue::Value(v) => v.to_string(),
        }
    }
}

/// One flat result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub seed: Option<u64>,
    pub step: Option<usize>,
    pub base_lr: Option<f64>,
    pub metric: String,
    pub value: MetricValue,
}

impl ResultRow {
    pub fn new(experiment: &str, metric: impl Into<String>, value: f64) -> Self {
        ResultRow {
            experiment: experiment.into(),
            width: None,
            depth: None,
            seed: None,
            step: None,
            base_lr: None,
            metric: metric.into(),
            value: MetricValue::Value(value),
        }
    }

    fn cell(mut self, width: Option<usize>, depth: Option<usize>, seed: Option<u64>, step: Option<usize>) -> Self {
        self.width = width;
        self.depth = depth;
        self.seed = seed;
        self.step = step;
        self
    }

    fn key(&self) -> String {
        let o = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{}|{}|{}|{}|{}|{}",
            o(self.width.map(|v| v.to_string())),
            o(self.depth.map(|v| v.to_string())),
            o(self.seed.map(|v| v.to_string())),
            o(self.step.map(|v| v.to_string())),
            o(self.base_lr.map(|v| v.to_string())),
            self.metric
        )
    }

    fn fields(&self) -> [String; 8] {
        let o = |v: Option<String>| v.unwrap_or_default();
        [
            self.experiment.clone(),
            o(self.width.map(|v| v.to_string())),
            o(self.depth.map(|v| v.to_string())),
            o(self.seed.map(|v| v.to_string())),
            o(self.step.map(|v| v.to_string())),
            o(self.base_lr.map(|v| v.to_string())),
            self.metric.clone(),
            self.value.render(),
        ]
    }
}

pub const CSV_HEADER: [&str; 8] = ["experiment", "width", "depth", "seed", "step", "base_lr", "metric", "value"];

/// Output of one experiment run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Value,
    /// Human-readable report for the terminal.
    pub report: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|source| HarnessError::Io { path: tmp.clone(), source })?;
    fs::rename(&tmp, path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

/// Renders rows as CSV; fails on duplicate cell keys.
pub fn render_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    for r in rows {
        if !seen.insert(r.key()) {
            return Err(HarnessError::Config(format!("duplicate result cell {}", r.key())));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let path = PathBuf::from("results.csv");
    w.write_record(CSV_HEADER).map_err(|source| HarnessError::Csv { path: path.clone(), source })?;
    for r in rows {
        w.write_record(r.fields()).map_err(|source| HarnessError::Csv { path: path.clone(), source })?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(format!("csv buffer: {e}")))
}

/// Writes `results.csv` and/or `summary.json` into `dir`; returns the paths.
pub fn write_outputs(dir: &Path, format: OutputFormat, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    if format.csv() {
        let path = dir.join("results.csv");
        write_atomic(&path, &render_csv(&out.rows)?)?;
        written.push(path);
    }
    if format.json() {
        let path = dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&out.summary)
            .map_err(|source| HarnessError::Json { path: path.clone(), source })?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

fn summary(cfg: &ExperimentConfig, verdict: Verdict, results: Value) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment.name(),
        "verdict": verdict.name(),
        "config": cfg.to_map(),
        "results": results,
    })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Runs the configured experiment on a worker pool of `cfg.workers` threads.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    pool.install(|| match cfg.experiment {
        ExperimentKind::Scale => cmd_scale(cfg),
        ExperimentKind::CoordCheck => cmd_coordcheck(cfg),
        ExperimentKind::Transfer => cmd_transfer(cfg),
        ExperimentKind::Verify => cmd_verify(cfg),
        ExperimentKind::Equiv => cmd_equiv(cfg),
    })
}

/// One row of the scaled-hyperparameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub width: usize,
    pub depth: usize,
    pub role: String,
    pub hp: ScaledHyperparams,
}

/// Per-role hyperparameters for every listed width and depth.
pub fn scale_table(cfg: &ExperimentConfig) -> Result<Vec<ScaleRow>> {
    let spec = cfg.model_spec();
    let mut rows = Vec::new();
    for &depth in &cfg.arch.depths {
        for &width in &cfg.arch.widths {
            let mut arch = spec.arch_at(Axis::Width, width);
            arch.depth = depth;
            let p = spec.parameterization(&arch)?;
            let (n_in, n_out) = arch.sublayer_dims(1);
            let mut roles = vec![LayerRole::input(arch.d0, width)];
            if arch.block.use_bias {
                roles.push(LayerRole::input_bias(width));
            }
            roles.push(LayerRole::hidden(1, 1, n_in, n_out));
            if arch.block.use_bias {
                roles.push(LayerRole::hidden_bias(1, 1, n_out));
            }
            roles.push(LayerRole::output(width, arch.d_out));
            for role in roles {
                let hp = p.hyperparams(&role)?;
                let name = role_kind_name(&role);
                rows.push(ScaleRow { width, depth, role: name, hp });
            }
        }
    }
    Ok(rows)
}

fn role_kind_name(role: &LayerRole) -> String {
    use crate::scaling::LayerKind::*;
    match role.kind {
        Input => "input",
        InputBias => "input_bias",
        Hidden => "hidden",
        HiddenBias => "hidden_bias",
        Output => "output",
    }
    .to_string()
}

pub fn cmd_scale(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let table = scale_table(cfg)?;
    let with_eps = cfg.model.optimizer == OptimizerKind::AdamW && cfg.model.momentum;
    let mut rows = Vec::new();
    let mut report = String::new();
    let spec = cfg.model_spec();
    let _ = writeln!(
        report,
        "{} {} (base width {}, base depth {})",
        cfg.model.optimizer.name(),
        cfg.model.param.name(),
        spec.base_width,
        spec.base_depth
    );
    let _ = write!(report, "{:>6} {:>6} {:<12} {:>12} {:>12} {:>12} {:>12}", "width", "depth", "role", "alpha", "sigma2", "eta", "lambda");
    if with_eps {
        let _ = write!(report, " {:>12}", "eps");
    }
    report.push('\n');
    for r in &table {
        let _ = write!(
            report,
            "{:>6} {:>6} {:<12} {:>12.6e} {:>12.6e} {:>12.6e} {:>12.6e}",
            r.width, r.depth, r.role, r.hp.alpha, r.hp.sigma2, r.hp.eta, r.hp.lambda
        );
        if with_eps {
            let _ = write!(report, " {:>12.6e}", r.hp.eps);
        }
        report.push('\n');
        let mut values = vec![("alpha", r.hp.alpha), ("sigma2", r.hp.sigma2), ("eta", r.hp.eta), ("lambda", r.hp.lambda)];
        if with_eps {
            values.push(("eps", r.hp.eps));
        }
        for (name, v) in values {
            rows.push(ResultRow::new("scale", format!("{}.{name}", r.role), v).cell(Some(r.width), Some(r.depth), None, None));
        }
    }
    let results = json!({ "with_eps": with_eps, "table": to_value(&table) });
    Ok(RunOutput { rows, summary: summary(cfg, Verdict::Pass, results), report })
}

fn coord_config(cfg: &ExperimentConfig) -> CoordCheckConfig {
    CoordCheckConfig {
        model: cfg.model_spec(),
        axis: cfg.axis,
        sizes: cfg.sizes(cfg.axis).to_vec(),
        seeds: cfg.seeds.clone(),
        steps: cfg.schedule.steps,
        record_params: cfg.record_params,
        delta_from_init: false,
        band: cfg.band,
    }
}

fn fit_json(check: &FitCheck) -> Value {
    json!({
        "name": check.name,
        "target": check.target.to_string(),
        "verdict": check.verdict.name(),
        "slope": check.fit.as_ref().map(|f| f.slope),
        "r_squared": check.fit.as_ref().map(|f| f.r_squared),
        "slope_stderr": check.fit.as_ref().map(|f| f.slope_stderr),
        "seeds": check.fit.as_ref().map(|f| f.seeds_averaged),
        "points": check.fit.as_ref().map(|f| to_value(&f.points)),
    })
}

pub fn coordcheck_rows(result: &CoordCheckResult) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for r in &result.records {
        let cell = |row: ResultRow| row.cell(Some(r.width), Some(r.depth), Some(r.seed), Some(r.step));
        for (l, v) in r.h_rms.iter().enumerate() {
            rows.push(cell(ResultRow::new("coordcheck", format!("h_rms[{l}]"), *v)));
        }
        if let Some(dh) = &r.dh_rms {
            for (l, v) in dh.iter().enumerate() {
                rows.push(cell(ResultRow::new("coordcheck", format!("dh_rms[{l}]"), *v)));
            }
        }
        for (label, v) in &r.w_norms {
            rows.push(cell(ResultRow::new("coordcheck", format!("w_norm[{label}]"), *v)));
        }
        for (label, v) in &r.dw_norms {
            rows.push(cell(ResultRow::new("coordcheck", format!("dw_norm[{label}]"), *v)));
        }
        let mut loss = ResultRow::new("coordcheck", "loss", r.loss);
        if r.diverged {
            loss.value = MetricValue::Diverged;
        }
        rows.push(cell(loss));
    }
    rows
}

pub fn cmd_coordcheck(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let cc = coord_config(cfg);
    let result = coord_check(&cc, &cfg.dataset())?;
    let rows = coordcheck_rows(&result);
    let mut report = String::new();
    let _ = writeln!(
        report,
        "coordcheck {} {} over {} {:?}: {}",
        cfg.model.optimizer.name(),
        cfg.model.param.name(),
        cfg.axis,
        cc.sizes,
        result.verdict
    );
    for f in result.fits.iter().filter(|f| f.quantity == "h_L") {
        let slope = f.check.fit.as_ref().map_or("n/a".to_string(), |x| format!("{:+.3}", x.slope));
        let spread = f.spread.map_or("n/a".to_string(), |s| format!("{s:.2}"));
        let _ = writeln!(report, "  step {:>3}: slope {slope} spread {spread} {}", f.step, f.check.verdict);
    }
    if !result.unstable.is_empty() {
        let _ = writeln!(report, "  unstable cells: {:?}", result.unstable);
    }
    let fits: Vec<Value> = result
        .fits
        .iter()
        .map(|f| {
            let mut v = fit_json(&f.check);
            v["step"] = json!(f.step);
            v["quantity"] = json!(f.quantity);
            v["spread"] = json!(f.spread);
            v
        })
        .collect();
    let results = json!({
        "axis": cfg.axis.name(),
        "sizes": cc.sizes,
        "fits": fits,
        "worst_spread": result.worst_spread(),
        "unstable": to_value(&result.unstable),
    });
    Ok(RunOutput { rows, summary: summary(cfg, result.verdict, results), report })
}

/// Outcome of one transfer cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub size: usize,
    pub lr_exponent: i32,
    pub seed: u64,
    /// Final evaluation loss, `None` when the run diverged.
    pub loss: Option<f64>,
}

/// Per-size optimum of a transfer sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOptimum {
    pub size: usize,
    pub best_exponent: Option<i32>,
    pub best_index: Option<usize>,
    /// Seed-mean losses along the grid (`None` if any seed diverged).
    pub mean_losses: Vec<Option<f64>>,
    /// Optimum on the edge of the grid.
    pub at_edge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub axis: Axis,
    pub cells: Vec<TransferCell>,
    pub optima: Vec<TransferOptimum>,
    /// Largest minus smallest optimum index across sizes.
    pub shift: Option<usize>,
    pub warnings: Vec<String>,
    pub verdict: Verdict,
}

/// Trains one network for the full schedule and returns its final loss on a
/// fixed evaluation batch, or `None` if it diverged.
pub fn train_cell(model: &ModelSpec, arch: ArchSpec, schedule: &ScheduleConfig, eval_samples: usize, seed: u64, data: &dyn DataSource) -> Result<Option<f64>> {
    let (mut net, step_cfg) = model.build(arch, seed)?;
    let mut state = OptimizerState::new(model.optimizer, &net.params);
    let warmup = (schedule.warmup * schedule.steps as f64).round() as usize;
    for t in 0..schedule.steps {
        let (x, y) = data.batch(seed, t, model.batch_size);
        let trace = net.forward_batch(&x)?;
        let mut grads = net.backward(&trace, model.loss, &y)?;
        if !grads.is_finite() {
            return Ok(None);
        }
        if schedule.clip > 0.0 {
            clip_global_norm(&mut grads, schedule.clip);
        }
        let scale = warmup_cosine(t, schedule.steps, warmup, schedule.cosine_floor);
        let delta = state.step(&net.params, &grads, &step_cfg, scale)?;
        apply_update(&mut net.params, &delta, model.optimizer, &model.options)?;
        if !net.params.is_finite() {
            return Ok(None);
        }
    }
    let (ex, ey) = data.batch(seed, PROBE_STEP, eval_samples);
    let loss = net.loss(&ex, &ey, model.loss)?;
    Ok((loss.is_finite() && loss < 1e12).then_some(loss))
}

/// Learning-rate sweep over sizes along `axis`.
pub fn transfer_sweep(cfg: &ExperimentConfig, axis: Axis) -> Result<TransferResult> {
    let sizes = cfg.sizes(axis).to_vec();
    let spec = cfg.model_spec();
    let data = cfg.dataset();
    let grid = cfg.lr_exponents.clone();
    let jobs: Vec<(usize, i32, u64)> = sizes
        .iter()
        .flat_map(|&s| grid.iter().flat_map(move |&e| cfg.seeds.iter().map(move |&seed| (s, e, seed))))
        .collect();
    let cells = jobs
        .into_par_iter()
        .map(|(size, e, seed)| {
            let mut model = spec.clone();
            model.base.eta_base = 2f64.powi(e);
            let arch = model.arch_at(axis, size);
            let loss = train_cell(&model, arch, &cfg.schedule, cfg.data.samples, seed, &data)?;
            Ok(TransferCell { size, lr_exponent: e, seed, loss })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut optima = Vec::new();
    let mut warnings = Vec::new();
    for &size in &sizes {
        let mean_losses: Vec<Option<f64>> = grid
            .iter()
            .map(|&e| {
                let ls: Vec<Option<f64>> =
                    cells.iter().filter(|c| c.size == size && c.lr_exponent == e).map(|c| c.loss).collect();
                let all: Option<Vec<f64>> = ls.into_iter().collect();
                all.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let best = mean_losses
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i, l)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best_index = best.map(|b| b.0);
        let at_edge = best_index.is_some_and(|i| i == 0 || i + 1 == grid.len());
        if at_edge {
            warnings.push(format!("{} {size}: optimum on the grid edge; expand grid", axis.name()));
        }
        if best_index.is_none() {
            warnings.push(format!("{} {size}: every learning rate diverged", axis.name()));
        }
        optima.push(TransferOptimum { size, best_exponent: best_index.map(|i| grid[i]), best_index, mean_losses, at_edge });
    }
    let idx: Vec<usize> = optima.iter().filter_map(|o| o.best_index).collect();
    let shift = (sizes.len() > 1 && idx.len() == sizes.len())
        .then(|| idx.iter().max().unwrap() - idx.iter().min().unwrap());
    let verdict = match shift {
        None => Verdict::Inconclusive,
        Some(_) if optima.iter().any(|o| o.at_edge) => Verdict::Inconclusive,
        Some(s) if s <= 1 => Verdict::Pass,
        Some(_) => Verdict::Fail,
    };
    Ok(TransferResult { axis, cells, optima, shift, warnings, verdict })
}

pub fn transfer_rows(result: &TransferResult) -> Vec<ResultRow> {
    result
        .cells
        .iter()
        .map(|c| {
            let (w, d) = match result.axis {
                Axis::Width => (Some(c.size), None),
                Axis::Depth => (None, Some(c.size)),
            };
            let mut row = ResultRow::new("transfer", "final_loss", c.loss.unwrap_or(f64::NAN)).cell(w, d, Some(c.seed), None);
            row.base_lr = Some(2f64.powi(c.lr_exponent));
            if c.loss.is_none() {
                row.value = MetricValue::Diverged;
            }
            row
        })
        .collect()
}

pub fn cmd_transfer(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let result = transfer_sweep(cfg, cfg.axis)?;
    let rows = transfer_rows(&result);
    let mut report = String::new();
    let _ = writeln!(
        report,
        "transfer {} {} over {}: shift {} -> {}",
        cfg.model.optimizer.name(),
        cfg.model.param.name(),
        cfg.axis,
        result.shift.map_or("n/a".into(), |s| s.to_string()),
        result.verdict
    );
    for o in &result.optima {
        let _ = writeln!(report, "  {:>6}: best log2(eta_base) = {}", o.size, o.best_exponent.map_or("n/a".into(), |e| e.to_string()));
    }
    for w in &result.warnings {
        let _ = writeln!(report, "  warning: {w}");
    }
    let results = json!({
        "axis": result.axis.name(),
        "lr_exponents": cfg.lr_exponents,
        "optima": to_value(&result.optima),
        "shift": result.shift,
        "warnings": result.warnings,
    });
    Ok(RunOutput { rows, summary: summary(cfg, result.verdict, results), report })
}

/// Largest relative deviation of each reduced-mode equivalence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub shape: (usize, usize),
    pub count: usize,
    pub shampoo_vs_muon: f64,
    pub soap_vs_muon: f64,
    pub lion_vs_adamw: f64,
}

impl EquivalenceReport {
    pub fn verdict(&self) -> Verdict {
        if self.shampoo_vs_muon <= 1e-6 && self.soap_vs_muon <= 1e-6 && self.lion_vs_adamw == 0.0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// Compares reduced-mode directions on `count` random gradients of `shape`.
pub fn equivalence_check(seed: u64, shape: (usize, usize), count: usize) -> Result<EquivalenceReport> {
    let (rows, cols) = shape;
    let role = LayerRole::hidden(1, 1, cols, rows);
    let hp = ScaledHyperparams { alpha: 1.0, sigma2: 1.0, eta: 1.0, lambda: 0.0, eps: 0.0 };
    let o = StepOptions::reduced();
    let w = Matrix::zeros(rows, cols);
    let devs = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = RandomSource::derived(seed, &format!("equiv/{rows}x{cols}/{i}"));
            let g = gaussian_matrix(rows, cols, 1.0, &mut rng);
            let run = |k: OptimizerKind| update(k, &role, &w, &g, &mut ParamState::default(), &hp, &o);
            let muon = run(OptimizerKind::Muon)?;
            let rel = |m: &Matrix| m.max_abs_diff(&muon).expect("same shape") / muon.max_abs();
            let sh = rel(&run(OptimizerKind::Shampoo)?);
            let so = rel(&run(OptimizerKind::Soap)?);
            let lion = run(OptimizerKind::Lion)?;
            let adam = run(OptimizerKind::AdamW)?;
            let li = lion.max_abs_diff(&adam).expect("same shape");
            Ok((sh, so, li))
        })
        .collect::<Result<Vec<_>>>()?;
    let max = |f: fn(&(f64, f64, f64)) -> f64| devs.iter().map(f).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        shape,
        count,
        shampoo_vs_muon: max(|d| d.0),
        soap_vs_muon: max(|d| d.1),
        lion_vs_adamw: max(|d| d.2),
    })
}

pub fn cmd_equiv(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let seed = cfg.seeds[0];
    let reports = cfg
        .equiv_shapes
        .iter()
        .map(|&s| equivalence_check(seed, s, cfg.equiv_count))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut report = String::new();
    for r in &reports {
        let _ = writeln!(
            report,
            "{}x{} ({} gradients): shampoo/muon {:.3e}, soap/muon {:.3e}, lion/adamw {:.3e} -> {}",
            r.shape.0,
            r.shape.1,
            r.count,
            r.shampoo_vs_muon,
            r.soap_vs_muon,
            r.lion_vs_adamw,
            r.verdict()
        );
        for (name, v) in [("shampoo_vs_muon", r.shampoo_vs_muon), ("soap_vs_muon", r.soap_vs_muon), ("lion_vs_adamw", r.lion_vs_adamw)] {
            let mut row = ResultRow::new("equiv", format!("{}x{}.{name}", r.shape.0, r.shape.1), v);
            row.seed = Some(seed);
            rows.push(row);
        }
    }
    let verdict = Verdict::combine(reports.iter().map(|r| r.verdict()));
    Ok(RunOutput { rows, summary: summary(cfg, verdict, to_value(&reports)), report })
}

/// Architecture and training setup of the assumption protocol: ReLU
/// two-layer blocks, one logit, full-batch gradient descent with the
/// absolute-depth SGD rules and base sizes 1.
pub fn assumption_protocol(width: usize, d0: usize, depths: Vec<usize>, steps: usize, samples: usize, seeds: Vec<u64>) -> (AssumptionProtocol, DatasetSpec) {
    let arch = ArchSpec::linear(d0, width, 1, depths[0]).with_activation(Activation::Relu);
    let base = BaseHyperparams { alpha_base: 1.0, sigma2_base: 2.0, eta_base: 0.001, lambda_base: 0.0, eps_base: 0.0 };
    let mut model = ModelSpec::new(arch, OptimizerKind::Sgd, ParamKind::MuP, base);
    model.base_width = 1;
    model.base_depth = 1;
    model.convention = DepthConvention::Absolute;
    model.loss = Loss::BinaryCrossEntropy;
    model.batch_size = samples;
    let proto = AssumptionProtocol { model, depths, seeds, steps, samples, selection: LayerSelection::Representative };
    let data = DatasetSpec { kind: DatasetKind::TwoClassGaussian, d0, d_out: 1, separation: 2.0 };
    (proto, data)
}

fn condition_json(r: &ConditionReport) -> Value {
    json!({
        "check": r.name,
        "verdict": r.verdict.name(),
        "items": r.items.iter().map(|i| {
            let f = FitCheck { name: i.name.clone(), target: i.target, fit: i.fit.clone(), verdict: i.verdict };
            fit_json(&f)
        }).collect::<Vec<_>>(),
    })
}

fn assumption_json(r: &AssumptionReport) -> Value {
    json!({
        "check": r.id.name(),
        "verdict": r.verdict.name(),
        "band": [r.band.0, r.band.1],
        "out_of_band": r.out_of_band,
        "degenerate": r.degenerate,
        "depth_fit": fit_json(&r.depth_check),
        "stats": to_value(&r.stats),
    })
}

fn fit_rows(rows: &mut Vec<ResultRow>, prefix: &str, check: &FitCheck) {
    if let Some(f) = &check.fit {
        rows.push(ResultRow::new("verify", format!("{prefix}.{}.slope", check.name), f.slope));
        rows.push(ResultRow::new("verify", format!("{prefix}.{}.r_squared", check.name), f.r_squared));
    }
}

/// Claim checks on μP linear networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimReport {
    /// `(width, min, max)` of the Claim 1 ratio over blocks and seeds.
    pub claim1: Vec<(usize, f64, f64)>,
    pub claim2_gap: f64,
    /// Worst `|‖∇‖₂/‖∇‖_F − 1|` at batch size 1.
    pub rank_one_gap: f64,
    pub verdict: Verdict,
}

pub fn claim_checks(cfg: &ExperimentConfig) -> Result<ClaimReport> {
    let mut spec = cfg.model_spec();
    spec.arch.block.activation = Activation::Linear;
    spec.arch.block.use_bias = false;
    spec.arch.block.depth = 2;
    spec.arch.block.hidden_width = spec.arch.width;
    let data = cfg.dataset();
    let results = cells_of(&cfg.arch.widths, &cfg.seeds)
        .into_par_iter()
        .map(|(n, seed)| {
            let arch = spec.arch_at(Axis::Width, n);
            let (net, _) = spec.build(arch, seed)?;
            let (x, y) = data.batch(seed, PROBE_STEP, 1);
            let ratios = claim1_ratios(&net, x.row(0))?;
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            let gap = claim2_gap(&net, x.row(0), y.row(0), spec.loss, 0.1)?;
            let grads = net.backward(&net.forward(x.row(0))?, spec.loss, &y)?;
            let rank = gradient_rank_one_ratios(&grads).iter().map(|(_, r)| (r - 1.0).abs()).fold(0.0, f64::max);
            Ok((n, lo, hi, gap, rank))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut claim1 = Vec::new();
    for &n in &cfg.arch.widths {
        let rs: Vec<_> = results.iter().filter(|r| r.0 == n).collect();
        let lo = rs.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let hi = rs.iter().map(|r| r.2).fold(0.0, f64::max);
        claim1.push((n, lo, hi));
    }
    let claim2_gap = results.iter().map(|r| r.3).fold(0.0, f64::max);
    let rank_one_gap = results.iter().map(|r| r.4).fold(0.0, f64::max);
    let ok = claim1.iter().all(|c| c.1 >= 0.2 && c.2 <= 1.0) && claim2_gap <= 1e-8 && rank_one_gap <= 1e-8;
    Ok(ClaimReport { claim1, claim2_gap, rank_one_gap, verdict: if ok { Verdict::Pass } else { Verdict::Fail } })
}

fn cells_of(sizes: &[usize], seeds: &[u64]) -> Vec<(usize, u64)> {
    sizes.iter().flat_map(|&s| seeds.iter().map(move |&seed| (s, seed))).collect()
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let spec = cfg.model_spec();
    let data = cfg.dataset();
    let k = cfg.arch.block_depth;
    let mut blocks: Vec<Value> = Vec::new();
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let mut report = String::new();
    let sweep = |axis: Axis| SweepConfig {
        model: spec.clone(),
        axis,
        sizes: cfg.sizes(axis).to_vec(),
        seeds: cfg.seeds.clone(),
        take_step: true,
    };

    if cfg.verify.conditions {
        let width_sweep = measure_sweep(&sweep(Axis::Width), &data)?;
        let depth_sweep = measure_sweep(&sweep(Axis::Depth), &data)?;
        for (axis, s) in [(Axis::Width, &width_sweep), (Axis::Depth, &depth_sweep)] {
            for r in [check_init_condition(s, k)?, check_update_condition(s, k)?] {
                let _ = writeln!(report, "{} vs {}: {}", r.name, axis, r.verdict);
                for i in &r.items {
                    let f = FitCheck { name: i.name.clone(), target: i.target, fit: i.fit.clone(), verdict: i.verdict };
                    fit_rows(&mut rows, &format!("{}.{}", r.name, axis), &f);
                    let slope = i.fit.as_ref().map_or("n/a".into(), |f| format!("{:+.3}", f.slope));
                    let _ = writeln!(report, "  {:<24} slope {slope:>7} target {} {}", i.name, i.target, i.verdict);
                }
                let mut block = condition_json(&r);
                block["axis"] = json!(axis.name());
                blocks.push(block);
                verdicts.push(r.verdict);
            }
        }
        if cfg.arch.bias {
            let r = check_bias_condition(&width_sweep, &depth_sweep)?;
            let _ = writeln!(report, "bias: {}", r.verdict);
            blocks.push(condition_json(&r));
            verdicts.push(r.verdict);
        }
        if k == 2 {
            let check = verify_second_order_auto(&sweep(Axis::Depth), &data)?;
            fit_rows(&mut rows, "second_order", &check);
            let _ = writeln!(report, "second-order auto-satisfaction: {}", check.verdict);
            let mut block = fit_json(&check);
            block["check"] = json!("second_order_auto");
            blocks.push(block);
            verdicts.push(check.verdict);
            if cfg.arch.activation == Activation::Linear && !cfg.arch.bias {
                let checks = decomposition_sweep(&sweep(Axis::Depth), &data)?;
                let v = Verdict::combine(checks.iter().map(|c| c.verdict));
                let _ = writeln!(report, "feature-update decomposition: {v}");
                for c in &checks {
                    fit_rows(&mut rows, "decomposition", c);
                }
                blocks.push(json!({ "check": "decomposition", "verdict": v.name(), "items": checks.iter().map(fit_json).collect::<Vec<_>>() }));
                verdicts.push(v);
            }
        }
    }

    if cfg.verify.audit {
        let mut audit_spec = spec.clone();
        audit_spec.arch.block.use_bias = false;
        let mut items = Vec::new();
        for &opt in &cfg.verify.audit_optimizers {
            audit_spec.optimizer = opt;
            let checks = audit_update_orders(&audit_spec, &cfg.arch.widths, &cfg.seeds, &data)?;
            for c in checks {
                let slope = c.fit.as_ref().map_or("n/a".into(), |f| format!("{:+.3}", f.slope));
                let _ = writeln!(report, "audit {:<20} slope {slope:>7} target {} {}", c.name, c.target, c.verdict);
                fit_rows(&mut rows, "audit", &c);
                verdicts.push(c.verdict);
                items.push(fit_json(&c));
            }
        }
        let v = Verdict::combine(items.iter().map(|i| if i["verdict"] == "pass" { Verdict::Pass } else { Verdict::Fail }));
        blocks.push(json!({ "check": "update_orders", "verdict": v.name(), "items": items }));
    }

    if cfg.verify.claims {
        let c = claim_checks(cfg)?;
        let _ = writeln!(report, "claims: gap {:.2e}, rank-one gap {:.2e}, claim-1 {:?}: {}", c.claim2_gap, c.rank_one_gap, c.claim1, c.verdict);
        rows.push(ResultRow::new("verify", "claims.claim2_gap", c.claim2_gap));
        rows.push(ResultRow::new("verify", "claims.rank_one_gap", c.rank_one_gap));
        for (n, lo, hi) in &c.claim1 {
            rows.push(ResultRow::new("verify", "claims.claim1_min", *lo).cell(Some(*n), None, None, None));
            rows.push(ResultRow::new("verify", "claims.claim1_max", *hi).cell(Some(*n), None, None, None));
        }
        let mut block = to_value(&c);
        block["check"] = json!("claims");
        blocks.push(block);
        verdicts.push(c.verdict);
    }

    if cfg.verify.assumptions {
        let v = &cfg.verify;
        let (proto, appg_data) =
            assumption_protocol(v.appg_width, v.appg_d0, v.appg_depths.clone(), v.appg_steps, v.appg_samples, cfg.seeds.clone());
        let trace = run_assumption_protocol(&proto, &appg_data)?;
        let [a1w, a1f] = verify_assumption_1(&trace);
        for r in [a1w, a1f, verify_assumption_2(&trace), verify_assumption_3(&trace)] {
            let _ = writeln!(report, "assumption {}: {} ({} out of band)", r.id.name(), r.verdict, r.out_of_band);
            fit_rows(&mut rows, "assumption", &r.depth_check);
            for s in &r.stats {
                let cell = |row: ResultRow| row.cell(None, Some(s.depth), None, Some(s.step));
                rows.push(cell(ResultRow::new("verify", format!("{}.min", r.id.name()), s.min)));
                rows.push(cell(ResultRow::new("verify", format!("{}.mean", r.id.name()), s.mean)));
                rows.push(cell(ResultRow::new("verify", format!("{}.max", r.id.name()), s.max)));
            }
            blocks.push(assumption_json(&r));
            verdicts.push(r.verdict);
        }
    }

    let verdict = Verdict::combine(verdicts);
    let _ = writeln!(report, "overall: {verdict}");
    Ok(RunOutput { rows, summary: summary(cfg, verdict, Value::Array(blocks)), report })
}
