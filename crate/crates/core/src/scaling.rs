//! Hyperparameter scaling rules and spectral-condition checks.
//!
//! Every rule maps base hyperparameters tuned on a base model of width
//! `n_base` and depth `L_base` to a target model through the ratios
//! `r_n = n / n_base` and `r_L = L / L_base`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{fit_seeded, Axis, ScalingFit, SlopeTarget, Verdict};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScalingError {
    #[error("matrix optimizer applied to vector parameter ({opt}, {role})")]
    MatrixOptimizerOnVector { opt: OptimizerKind, role: String },
    #[error("invalid scale ratios: {0}")]
    InvalidRatios(String),
    #[error("condition sweep needs at least 3 distinct sizes, got {0}")]
    TooFewPoints(usize),
    #[error("inconsistent measurements: {0}")]
    InconsistentMeasurements(String),
}

pub type Result<T> = std::result::Result<T, ScalingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Hidden,
    Output,
    InputBias,
    HiddenBias,
}

/// Position of a parameter in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRole {
    pub kind: LayerKind,
    /// Residual block, 1-based (hidden roles only, 0 otherwise).
    pub block: usize,
    /// Sublayer inside the block, 1-based (hidden roles only, 0 otherwise).
    pub sublayer: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl LayerRole {
    pub fn input(d0: usize, n: usize) -> Self {
        LayerRole { kind: LayerKind::Input, block: 0, sublayer: 0, n_in: d0, n_out: n }
    }

    pub fn hidden(block: usize, sublayer: usize, n_in: usize, n_out: usize) -> Self {
        LayerRole { kind: LayerKind::Hidden, block, sublayer, n_in, n_out }
    }

    pub fn output(n: usize, d_out: usize) -> Self {
        LayerRole { kind: LayerKind::Output, block: 0, sublayer: 0, n_in: n, n_out: d_out }
    }

    pub fn input_bias(n: usize) -> Self {
        LayerRole { kind: LayerKind::InputBias, block: 0, sublayer: 0, n_in: 1, n_out: n }
    }

    pub fn hidden_bias(block: usize, sublayer: usize, dim: usize) -> Self {
        LayerRole { kind: LayerKind::HiddenBias, block, sublayer, n_in: 1, n_out: dim }
    }

    pub fn is_bias(&self) -> bool {
        matches!(self.kind, LayerKind::InputBias | LayerKind::HiddenBias)
    }

    /// Short label used in tables and result files, e.g. `hidden[3].2`.
    pub fn label(&self) -> String {
        match self.kind {
            LayerKind::Input => "input".into(),
            LayerKind::Output => "output".into(),
            LayerKind::InputBias => "input_bias".into(),
            LayerKind::Hidden => format!("hidden[{}].{}", self.block, self.sublayer),
            LayerKind::HiddenBias => format!("hidden_bias[{}].{}", self.block, self.sublayer),
        }
    }
}

impl fmt::Display for LayerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Width and depth of a target model relative to the base model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRatios {
    pub width: usize,
    pub width_base: usize,
    pub depth: usize,
    pub depth_base: usize,
}

impl ScaleRatios {
    pub fn new(width: usize, width_base: usize, depth: usize, depth_base: usize) -> Result<Self> {
        if width == 0 || width_base == 0 || depth == 0 || depth_base == 0 {
            return Err(ScalingError::InvalidRatios(format!(
                "sizes must be positive (n={width}, n_base={width_base}, L={depth}, L_base={depth_base})"
            )));
        }
        Ok(ScaleRatios { width, width_base, depth, depth_base })
    }

    /// The base model itself.
    pub fn identity(width: usize, depth: usize) -> Self {
        ScaleRatios { width, width_base: width, depth, depth_base: depth }
    }

    pub fn r_n(&self) -> f64 {
        self.width as f64 / self.width_base as f64
    }

    pub fn r_l(&self) -> f64 {
        self.depth as f64 / self.depth_base as f64
    }
}

/// How table entries written with an absolute depth `L` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DepthConvention {
    /// `L` is replaced by `r_L`, so the base model reproduces the base value.
    #[default]
    Ratio,
    /// `L` is the target depth itself (`r_L · L_base`).
    Absolute,
}

impl DepthConvention {
    fn depth_factor(self, r: &ScaleRatios) -> f64 {
        match self {
            DepthConvention::Ratio => r.r_l(),
            DepthConvention::Absolute => r.depth as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseHyperparams {
    pub alpha_base: f64,
    pub sigma2_base: f64,
    pub eta_base: f64,
    pub lambda_base: f64,
    pub eps_base: f64,
}

impl Default for BaseHyperparams {
    fn default() -> Self {
        BaseHyperparams {
            alpha_base: 1.0,
            sigma2_base: 0.02 * 0.02,
            eta_base: 1.0 / 128.0,
            lambda_base: 0.0,
            eps_base: 1e-16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledHyperparams {
    pub alpha: f64,
    pub sigma2: f64,
    pub eta: f64,
    pub lambda: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
    Lion,
    Sophia,
    Muon,
    MuonKimi,
    Shampoo,
    Soap,
    Sso,
}

/// Optimizers that share one scaling table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingFamily {
    Sgd,
    AdamLike,
    MuonLike,
    MuonKimi,
    Sso,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 9] = [
        OptimizerKind::Sgd,
        OptimizerKind::AdamW,
        OptimizerKind::Lion,
        OptimizerKind::Sophia,
        OptimizerKind::Muon,
        OptimizerKind::MuonKimi,
        OptimizerKind::Shampoo,
        OptimizerKind::Soap,
        OptimizerKind::Sso,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Lion => "lion",
            OptimizerKind::Sophia => "sophia",
            OptimizerKind::Muon => "muon",
            OptimizerKind::MuonKimi => "muon_kimi",
            OptimizerKind::Shampoo => "shampoo",
            OptimizerKind::Soap => "soap",
            OptimizerKind::Sso => "sso",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        OptimizerKind::ALL.into_iter().find(|o| o.name().replace('_', "") == key)
    }

    pub fn family(self) -> ScalingFamily {
        match self {
            OptimizerKind::Sgd => ScalingFamily::Sgd,
            OptimizerKind::AdamW | OptimizerKind::Lion | OptimizerKind::Sophia => ScalingFamily::AdamLike,
            OptimizerKind::Muon | OptimizerKind::Shampoo | OptimizerKind::Soap => ScalingFamily::MuonLike,
            OptimizerKind::MuonKimi => ScalingFamily::MuonKimi,
            OptimizerKind::Sso => ScalingFamily::Sso,
        }
    }

    /// Matrix-preconditioned optimizers cannot update vector parameters.
    pub fn is_matrix_only(self) -> bool {
        matches!(
            self.family(),
            ScalingFamily::MuonLike | ScalingFamily::MuonKimi | ScalingFamily::Sso
        )
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    StandardParam,
    MuP,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::StandardParam => "sp",
            ParamKind::MuP => "mup",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sp" | "standard" | "standardparam" => Some(ParamKind::StandardParam),
            "mup" | "μp" | "mu_p" => Some(ParamKind::MuP),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InputModality {
    OneHot,
    #[default]
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BiasInit {
    #[default]
    Zero,
    /// `N(0, σ²_base)`, i.e. `‖b‖_R = Θ(1)`.
    Gaussian,
}

fn check_matrix_only(opt: OptimizerKind, role: &LayerRole) -> Result<()> {
    if role.is_bias() && opt.is_matrix_only() {
        return Err(ScalingError::MatrixOptimizerOnVector { opt, role: role.label() });
    }
    Ok(())
}

/// Initial variance σ² of a parameter.
pub fn init_variance(
    role: &LayerRole,
    base: &BaseHyperparams,
    ratios: &ScaleRatios,
    param: ParamKind,
    modality: InputModality,
    bias_init: BiasInit,
) -> f64 {
    let s = base.sigma2_base;
    match role.kind {
        LayerKind::Input => match modality {
            InputModality::Dense => s / role.n_in as f64,
            InputModality::OneHot => s,
        },
        LayerKind::Hidden => s / ratios.r_n(),
        LayerKind::Output => match param {
            ParamKind::MuP => s,
            ParamKind::StandardParam => s / ratios.r_n(),
        },
        LayerKind::InputBias | LayerKind::HiddenBias => match bias_init {
            BiasInit::Zero => 0.0,
            BiasInit::Gaussian => s,
        },
    }
}

/// Block multiplier α for two-layer (or deeper) residual blocks.
pub fn block_multiplier(role: &LayerRole, base: &BaseHyperparams, ratios: &ScaleRatios, param: ParamKind) -> f64 {
    block_multiplier_k(role, base, ratios, param, 2)
}

/// Block multiplier for blocks of depth `k`; one-layer blocks use
/// `α_base/√r_L` on hidden parameters.
pub fn block_multiplier_k(
    role: &LayerRole,
    base: &BaseHyperparams,
    ratios: &ScaleRatios,
    param: ParamKind,
    k: usize,
) -> f64 {
    let a = base.alpha_base;
    if param == ParamKind::StandardParam {
        return a;
    }
    match role.kind {
        LayerKind::Input | LayerKind::InputBias => a,
        LayerKind::Hidden | LayerKind::HiddenBias => {
            if k == 1 {
                a / ratios.r_l().sqrt()
            } else {
                a / ratios.r_l()
            }
        }
        LayerKind::Output => a / ratios.r_n(),
    }
}

/// Learning rate for two-layer (or deeper) residual blocks.
pub fn learning_rate(
    opt: OptimizerKind,
    role: &LayerRole,
    base: &BaseHyperparams,
    ratios: &ScaleRatios,
    param: ParamKind,
    conv: DepthConvention,
) -> Result<f64> {
    learning_rate_k(opt, role, base, ratios, param, conv, 2)
}

pub fn learning_rate_k(
    opt: OptimizerKind,
    role: &LayerRole,
    base: &BaseHyperparams,
    ratios: &ScaleRatios,
    param: ParamKind,
    conv: DepthConvention,
    k: usize,
) -> Result<f64> {
    check_matrix_only(opt, role)?;
    let eta = base.eta_base;
    if param == ParamKind::StandardParam {
        return Ok(eta);
    }
    let rn = ratios.r_n();
    let d = conv.depth_factor(ratios);
    let value = match (opt.family(), role.kind) {
        (ScalingFamily::MuonKimi, LayerKind::Hidden) => eta / rn.sqrt(),
        (ScalingFamily::MuonKimi, _) => eta,
        (ScalingFamily::MuonLike, LayerKind::Hidden) => eta,
        (ScalingFamily::MuonLike, _) => eta * rn.sqrt(),
        (ScalingFamily::Sso, LayerKind::Output) => eta * rn,
        (ScalingFamily::Sso, _) => eta,
        (ScalingFamily::Sgd, LayerKind::Hidden) => eta * d,
        (ScalingFamily::Sgd, LayerKind::HiddenBias) => eta * d * rn,
        (ScalingFamily::Sgd, _) => eta * rn,
        (ScalingFamily::AdamLike, LayerKind::Hidden) => eta / rn,
        (ScalingFamily::AdamLike, _) => eta,
    };
    Ok(value * one_layer_lr_factor(opt, role, ratios, conv, k))
}

/// One-layer blocks carry a `1/√L` multiplier and need hidden updates of
/// order `1/√L`: scale-invariant optimizers divide the learning rate by
/// `√r_L`; SGD, whose gradients already shrink by `1/√L`, drops its depth
/// factor entirely.
fn one_layer_lr_factor(opt: OptimizerKind, role: &LayerRole, r: &ScaleRatios, conv: DepthConvention, k: usize) -> f64 {
    let hidden = matches!(role.kind, LayerKind::Hidden | LayerKind::HiddenBias);
    if k != 1 || !hidden {
        return 1.0;
    }
    match opt.family() {
        ScalingFamily::Sgd => 1.0 / conv.depth_factor(r),
        _ => 1.0 / r.r_l().sqrt(),
    }
}

/// Decoupled weight decay λ for two-layer (or deeper) residual blocks.
pub fn weight_decay(
    opt: OptimizerKind,
    role: &LayerRole,
    base: &BaseHyperparams,
    ratios: &ScaleRatios,
    param: ParamKind,
    conv: DepthConvention,
) -> Result<f64> {
    weight_decay_k(opt, role, base, ratios, param, conv, 2)
}

pub fn weight_decay_k(
    opt: OptimizerKind,
    role: &LayerRole,
    base: &BaseHyperparams,
    ratios: &ScaleRatios,
    param: ParamKind,
    conv: DepthConvention,
    k: usize,
) -> Result<f64> {
    check_matrix_only(opt, role)?;
    let lam = base.lambda_base;
    if param == ParamKind::StandardParam {
        return Ok(lam);
    }
    let rn = ratios.r_n();
    let d = conv.depth_factor(ratios);
    let value = match (opt.family(), role.kind) {
        (ScalingFamily::MuonKimi, LayerKind::Hidden) => lam * rn.sqrt(),
        (ScalingFamily::MuonKimi, _) => lam,
        (ScalingFamily::MuonLike, LayerKind::Hidden) => lam,
        (ScalingFamily::MuonLike, _) => lam / rn.sqrt(),
        (ScalingFamily::Sso, LayerKind::Output) => lam / rn,
        (ScalingFamily::Sso, _) => lam,
        (ScalingFamily::Sgd, LayerKind::Hidden) => lam / d,
        (ScalingFamily::Sgd, LayerKind::HiddenBias) => lam / (d * rn),
        (ScalingFamily::Sgd, _) => lam / rn,
        (ScalingFamily::AdamLike, LayerKind::Hidden) => lam * rn,
        (ScalingFamily::AdamLike, _) => lam,
    };
    // One-layer SGD gradients are √L larger than in the two-layer table.
    let hidden = matches!(role.kind, LayerKind::Hidden | LayerKind::HiddenBias);
    let factor = if k == 1 && hidden && opt.family() == ScalingFamily::Sgd { d.sqrt() } else { 1.0 };
    Ok(value * factor)
}

/// AdamW ε: `ε_base/r_n` on input and output parameters, `ε_base/(L·r_n)` on
/// hidden weights and biases (with `L` evaluated per the depth convention).
pub fn adamw_epsilon(
    role: &LayerRole,
    base: &BaseHyperparams,
    ratios: &ScaleRatios,
    param: ParamKind,
    conv: DepthConvention,
) -> f64 {
    let e = base.eps_base;
    if param == ParamKind::StandardParam {
        return e;
    }
    let rn = ratios.r_n();
    match role.kind {
        LayerKind::Hidden | LayerKind::HiddenBias => e / (conv.depth_factor(ratios) * rn),
        _ => e / rn,
    }
}

/// Everything needed to produce per-parameter hyperparameters for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parameterization {
    pub optimizer: OptimizerKind,
    pub param: ParamKind,
    pub base: BaseHyperparams,
    pub ratios: ScaleRatios,
    pub convention: DepthConvention,
    pub modality: InputModality,
    pub bias_init: BiasInit,
    /// Layers per residual block.
    pub block_depth: usize,
}

impl Parameterization {
    pub fn new(optimizer: OptimizerKind, param: ParamKind, base: BaseHyperparams, ratios: ScaleRatios) -> Self {
        Parameterization {
            optimizer,
            param,
            base,
            ratios,
            convention: DepthConvention::Ratio,
            modality: InputModality::Dense,
            bias_init: BiasInit::Zero,
            block_depth: 2,
        }
    }

    pub fn with_convention(mut self, convention: DepthConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn with_modality(mut self, modality: InputModality) -> Self {
        self.modality = modality;
        self
    }

    pub fn with_bias_init(mut self, bias_init: BiasInit) -> Self {
        self.bias_init = bias_init;
        self
    }

    pub fn with_block_depth(mut self, k: usize) -> Self {
        self.block_depth = k;
        self
    }

    pub fn multiplier(&self, role: &LayerRole) -> f64 {
        block_multiplier_k(role, &self.base, &self.ratios, self.param, self.block_depth)
    }

    pub fn variance(&self, role: &LayerRole) -> f64 {
        init_variance(role, &self.base, &self.ratios, self.param, self.modality, self.bias_init)
    }

    pub fn hyperparams(&self, role: &LayerRole) -> Result<ScaledHyperparams> {
        let k = self.block_depth;
        Ok(ScaledHyperparams {
            alpha: block_multiplier_k(role, &self.base, &self.ratios, self.param, k),
            sigma2: init_variance(role, &self.base, &self.ratios, self.param, self.modality, self.bias_init),
            eta: learning_rate_k(self.optimizer, role, &self.base, &self.ratios, self.param, self.convention, k)?,
            lambda: weight_decay_k(self.optimizer, role, &self.base, &self.ratios, self.param, self.convention, k)?,
            eps: adamw_epsilon(role, &self.base, &self.ratios, self.param, self.convention),
        })
    }
}

// ---------------------------------------------------------------------------
// Spectral-condition checks
// ---------------------------------------------------------------------------

/// Norms of one weight matrix (or bias vector) before and after a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamNorms {
    /// `‖W‖_R` (or `‖b‖_R`).
    pub norm: f64,
    /// `‖ΔW‖_R` (or `‖Δb‖_R`) of the step, if one was taken.
    pub delta: Option<f64>,
}

/// Multiplier and per-sublayer norms of one residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockNorms {
    pub alpha: f64,
    pub sublayers: Vec<ParamNorms>,
}

/// Norm measurements of one network (one size, one seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetMeasurement {
    /// Width or depth, depending on the sweep axis.
    pub size: usize,
    pub seed: u64,
    pub alpha_in: f64,
    pub input: ParamNorms,
    pub alpha_out: f64,
    pub output: ParamNorms,
    pub blocks: Vec<BlockNorms>,
    /// All bias vectors of the network (empty without biases).
    pub biases: Vec<ParamNorms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeasurements {
    pub axis: Axis,
    pub points: Vec<NetMeasurement>,
    /// `(size, seed)` cells whose gradients overflowed; not in `points`.
    #[serde(default)]
    pub unstable: Vec<(usize, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionItem {
    pub name: String,
    pub target: SlopeTarget,
    pub fit: Option<ScalingFit>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub items: Vec<ConditionItem>,
    pub verdict: Verdict,
}

impl ConditionReport {
    fn from_items(name: &str, mut items: Vec<ConditionItem>, unstable: usize) -> Self {
        if unstable > 0 {
            items.push(ConditionItem {
                name: format!("stability ({unstable} cells diverged)"),
                target: SlopeTarget::within(0.0),
                fit: None,
                verdict: Verdict::Fail,
            });
        }
        let verdict = Verdict::combine(items.iter().map(|i| i.verdict));
        ConditionReport { name: name.to_string(), items, verdict }
    }

    pub fn item(&self, name: &str) -> Option<&ConditionItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

fn distinct_sizes(sweep: &SweepMeasurements) -> usize {
    let mut sizes: Vec<usize> = sweep.points.iter().map(|p| p.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes.len()
}

fn check_sweep(sweep: &SweepMeasurements, k: usize) -> Result<()> {
    let distinct = distinct_sizes(sweep);
    if distinct < 3 {
        return Err(ScalingError::TooFewPoints(distinct));
    }
    for p in &sweep.points {
        if p.blocks.iter().any(|b| b.sublayers.len() != k) {
            return Err(ScalingError::InconsistentMeasurements(format!(
                "size {} has a block without {k} sublayers",
                p.size
            )));
        }
    }
    Ok(())
}

/// Evaluates `f` on every network, groups by size and fits against the axis.
fn slope_item(
    name: &str,
    sweep: &SweepMeasurements,
    target: SlopeTarget,
    f: impl Fn(&NetMeasurement) -> Option<f64>,
) -> ConditionItem {
    let mut groups: Vec<(usize, Vec<f64>)> = Vec::new();
    for p in &sweep.points {
        let Some(v) = f(p) else {
            return ConditionItem { name: name.into(), target, fit: None, verdict: Verdict::Inconclusive };
        };
        match groups.iter_mut().find(|(s, _)| *s == p.size) {
            Some((_, vals)) => vals.push(v),
            None => groups.push((p.size, vec![v])),
        }
    }
    groups.sort_by_key(|(s, _)| *s);
    if groups.iter().all(|(_, vals)| vals.iter().all(|&v| v == 0.0)) {
        return ConditionItem { name: name.into(), target, fit: None, verdict: Verdict::DegenerateZero };
    }
    match fit_seeded(sweep.axis, &groups) {
        Ok(fit) => {
            let verdict = target.judge(&fit);
            ConditionItem { name: name.into(), target, fit: Some(fit), verdict }
        }
        Err(_) => ConditionItem { name: name.into(), target, fit: None, verdict: Verdict::DegenerateZero },
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Hidden-block target: `Θ(1/L)` against depth, flat against width.
fn hidden_target(axis: Axis) -> SlopeTarget {
    match axis {
        Axis::Depth => SlopeTarget::within(-1.0),
        Axis::Width => SlopeTarget::within(0.0),
    }
}

/// Initial spectral conditions: C1.1 on input and output, C1.2 on the hidden
/// block products. One-layer blocks use the `O(1/√L)` depth bound.
pub fn check_init_condition(sweep: &SweepMeasurements, k: usize) -> Result<ConditionReport> {
    check_sweep(sweep, k)?;
    let mut items = vec![
        slope_item("C1.1 input", sweep, SlopeTarget::within(0.0), |p| Some(p.alpha_in * p.input.norm)),
        slope_item("C1.1 output", sweep, SlopeTarget::within(0.0), |p| Some(p.alpha_out * p.output.norm)),
    ];
    let (name, target) = if k == 1 {
        let t = match sweep.axis {
            Axis::Depth => SlopeTarget::at_most(-0.5),
            Axis::Width => SlopeTarget::within(0.0),
        };
        ("C1.2 hidden (one-layer)", t)
    } else {
        ("C1.2 hidden", hidden_target(sweep.axis))
    };
    items.push(slope_item(name, sweep, target, |p| {
        mean(p.blocks.iter().map(|b| b.alpha * b.sublayers.iter().map(|s| s.norm).product::<f64>()))
    }));
    Ok(ConditionReport::from_items("init", items, sweep.unstable.len()))
}

/// Name of the subset product with updated sublayers `subset` (1-based).
pub fn subset_item_name(k: usize, subset: &[usize]) -> String {
    if k == 2 {
        return match subset {
            [2] => "C2.2 dW2*W1".into(),
            [1] => "C2.2 W2*dW1".into(),
            _ => "C2.3 dW2*dW1".into(),
        };
    }
    let list: Vec<String> = subset.iter().map(|i| i.to_string()).collect();
    format!("C3 S={{{}}}", list.join(","))
}

/// All nonempty subsets of `1..=k`, ordered by size then lexicographically.
pub fn nonempty_subsets(k: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> =
        (1u32..(1u32 << k)).map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).collect()).collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)));
    subsets
}

/// Update conditions (C2.1–C2.3 and every subset product for `k`-layer blocks).
pub fn check_update_condition(sweep: &SweepMeasurements, k: usize) -> Result<ConditionReport> {
    check_sweep(sweep, k)?;
    let mut items = vec![
        slope_item("C2.1 input", sweep, SlopeTarget::within(0.0), |p| p.input.delta.map(|d| p.alpha_in * d)),
        slope_item("C2.1 output", sweep, SlopeTarget::within(0.0), |p| p.output.delta.map(|d| p.alpha_out * d)),
    ];
    for subset in nonempty_subsets(k) {
        let name = subset_item_name(k, &subset);
        let item = slope_item(&name, sweep, hidden_target(sweep.axis), |p| {
            let mut per_block = Vec::with_capacity(p.blocks.len());
            for b in &p.blocks {
                let mut prod = b.alpha;
                for (i, s) in b.sublayers.iter().enumerate() {
                    prod *= if subset.contains(&(i + 1)) { s.delta? } else { s.norm };
                }
                per_block.push(prod);
            }
            mean(per_block.into_iter())
        });
        items.push(item);
    }
    Ok(ConditionReport::from_items("update", items, sweep.unstable.len()))
}

/// Bias conditions: `‖b‖_R` and `‖Δb‖_R` flat against both width and depth.
pub fn check_bias_condition(width_sweep: &SweepMeasurements, depth_sweep: &SweepMeasurements) -> Result<ConditionReport> {
    let mut items = Vec::new();
    for sweep in [width_sweep, depth_sweep] {
        let distinct = distinct_sizes(sweep);
        if distinct < 3 {
            return Err(ScalingError::TooFewPoints(distinct));
        }
        if sweep.points.iter().any(|p| p.biases.is_empty()) {
            return Err(ScalingError::InconsistentMeasurements("network without biases".into()));
        }
        let axis = sweep.axis.name();
        items.push(slope_item(&format!("bias init vs {axis}"), sweep, SlopeTarget::within(0.0), |p| {
            mean(p.biases.iter().map(|b| b.norm))
        }));
        items.push(slope_item(&format!("bias update vs {axis}"), sweep, SlopeTarget::within(0.0), |p| {
            let deltas: Option<Vec<f64>> = p.biases.iter().map(|b| b.delta).collect();
            mean(deltas?.into_iter())
        }));
    }
    Ok(ConditionReport::from_items("bias", items, width_sweep.unstable.len() + depth_sweep.unstable.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> BaseHyperparams {
        BaseHyperparams { alpha_base: 1.0, sigma2_base: 0.0004, eta_base: 0.02, lambda_base: 0.1, eps_base: 1e-8 }
    }

    fn hidden() -> LayerRole {
        LayerRole::hidden(1, 1, 256, 256)
    }

    #[test]
    fn init_variance_examples() {
        let r = ScaleRatios::new(256, 64, 4, 4).unwrap();
        let b = base();
        let v = init_variance(&hidden(), &b, &r, ParamKind::MuP, InputModality::Dense, BiasInit::Zero);
        assert!((v - 0.0001).abs() < 1e-18);
        let id = ScaleRatios::identity(64, 4);
        let v = init_variance(&hidden(), &b, &id, ParamKind::MuP, InputModality::Dense, BiasInit::Zero);
        assert_eq!(v, b.sigma2_base);
        let r16 = ScaleRatios::new(1024, 64, 4, 4).unwrap();
        let out = LayerRole::output(1024, 1);
        let mup = init_variance(&out, &b, &r16, ParamKind::MuP, InputModality::Dense, BiasInit::Zero);
        let sp = init_variance(&out, &b, &r16, ParamKind::StandardParam, InputModality::Dense, BiasInit::Zero);
        assert_eq!(mup / sp, 16.0);
    }

    #[test]
    fn multiplier_examples() {
        let b = base();
        let r = ScaleRatios::new(256, 64, 32, 4).unwrap();
        assert_eq!(block_multiplier(&hidden(), &b, &r, ParamKind::MuP), 0.125);
        assert_eq!(block_multiplier(&LayerRole::output(256, 1), &b, &r, ParamKind::MuP), 0.25);
        let id = ScaleRatios::identity(64, 4);
        for role in [LayerRole::input(3, 64), hidden(), LayerRole::output(64, 1)] {
            assert_eq!(block_multiplier(&role, &b, &id, ParamKind::MuP), 1.0);
        }
    }

    #[test]
    fn learning_rate_examples() {
        let b = base();
        let r = ScaleRatios::new(256, 64, 4, 4).unwrap();
        let lr = learning_rate(OptimizerKind::MuonKimi, &hidden(), &b, &r, ParamKind::MuP, DepthConvention::Ratio);
        assert_eq!(lr.unwrap(), 0.01);
        let sgd = BaseHyperparams { eta_base: 0.1, ..b };
        let r = ScaleRatios::new(64, 64, 16, 4).unwrap();
        let abs = learning_rate(OptimizerKind::Sgd, &hidden(), &sgd, &r, ParamKind::MuP, DepthConvention::Absolute);
        assert!((abs.unwrap() - 1.6).abs() < 1e-15);
        let rat = learning_rate(OptimizerKind::Sgd, &hidden(), &sgd, &r, ParamKind::MuP, DepthConvention::Ratio);
        assert!((rat.unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn matrix_optimizers_reject_biases() {
        let b = base();
        let r = ScaleRatios::identity(64, 4);
        for opt in [OptimizerKind::Muon, OptimizerKind::MuonKimi, OptimizerKind::Shampoo, OptimizerKind::Soap, OptimizerKind::Sso] {
            let err = learning_rate(opt, &LayerRole::input_bias(64), &b, &r, ParamKind::MuP, DepthConvention::Ratio)
                .unwrap_err();
            assert!(err.to_string().contains("matrix optimizer applied to vector parameter"));
            assert!(weight_decay(opt, &LayerRole::hidden_bias(1, 1, 64), &b, &r, ParamKind::MuP, DepthConvention::Ratio)
                .is_err());
        }
        assert!(learning_rate(OptimizerKind::AdamW, &LayerRole::input_bias(64), &b, &r, ParamKind::MuP, DepthConvention::Ratio)
            .is_ok());
    }

    #[test]
    fn weight_decay_and_epsilon_examples() {
        let b = base();
        let r = ScaleRatios::new(256, 64, 4, 4).unwrap();
        let c = DepthConvention::Ratio;
        assert!((weight_decay(OptimizerKind::AdamW, &hidden(), &b, &r, ParamKind::MuP, c).unwrap() - 0.4).abs() < 1e-15);
        assert!((weight_decay(OptimizerKind::MuonKimi, &hidden(), &b, &r, ParamKind::MuP, c).unwrap() - 0.2).abs() < 1e-15);
        let r = ScaleRatios::new(128, 64, 8, 4).unwrap();
        let e = adamw_epsilon(&hidden(), &b, &r, ParamKind::MuP, c);
        assert!((e - 2.5e-9).abs() < 1e-24);
        let r = ScaleRatios::new(256, 64, 4, 4).unwrap();
        let e = adamw_epsilon(&LayerRole::input(3, 256), &b, &r, ParamKind::MuP, c);
        assert!((e - 2.5e-9).abs() < 1e-24);
    }

    #[test]
    fn one_layer_blocks_use_inverse_sqrt_depth() {
        let b = base();
        let r = ScaleRatios::new(64, 64, 16, 4).unwrap();
        let role = LayerRole::hidden(1, 1, 64, 64);
        assert_eq!(block_multiplier_k(&role, &b, &r, ParamKind::MuP, 1), 0.5);
        let lr = learning_rate_k(OptimizerKind::MuonKimi, &role, &b, &r, ParamKind::MuP, DepthConvention::Ratio, 1);
        assert!((lr.unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn subsets_are_enumerated() {
        assert_eq!(nonempty_subsets(2), vec![vec![2], vec![1], vec![1, 2]]);
        assert_eq!(nonempty_subsets(3).len(), 7);
        assert_eq!(subset_item_name(2, &[1, 2]), "C2.3 dW2*dW1");
        assert_eq!(subset_item_name(3, &[1, 3]), "C3 S={1,3}");
    }

    #[test]
    fn optimizer_names_round_trip() {
        for o in OptimizerKind::ALL {
            assert_eq!(OptimizerKind::parse(o.name()), Some(o));
        }
        assert_eq!(OptimizerKind::parse("MuonKimi"), Some(OptimizerKind::MuonKimi));
        assert_eq!(OptimizerKind::parse("nope"), None);
    }

    fn synthetic_sweep(axis: Axis, sizes: &[usize], hidden_exp: f64) -> SweepMeasurements {
        let mut points = Vec::new();
        for &s in sizes {
            for seed in 0..3 {
                let x = s as f64;
                let jitter = 1.0 + 0.01 * seed as f64;
                points.push(NetMeasurement {
                    size: s,
                    seed,
                    alpha_in: 1.0,
                    input: ParamNorms { norm: jitter, delta: Some(0.5) },
                    alpha_out: 1.0,
                    output: ParamNorms { norm: 2.0, delta: Some(0.3) },
                    blocks: vec![BlockNorms {
                        alpha: x.powf(hidden_exp),
                        sublayers: vec![ParamNorms { norm: 1.0, delta: Some(0.1) }; 2],
                    }],
                    biases: vec![],
                });
            }
        }
        SweepMeasurements { axis, points, unstable: vec![] }
    }

    #[test]
    fn init_check_separates_inverse_depth_from_constant() {
        let good = synthetic_sweep(Axis::Depth, &[4, 8, 16, 32], -1.0);
        let report = check_init_condition(&good, 2).unwrap();
        assert_eq!(report.item("C1.2 hidden").unwrap().verdict, Verdict::Pass);
        assert_eq!(report.verdict, Verdict::Pass);
        let bad = synthetic_sweep(Axis::Depth, &[4, 8, 16, 32], 0.0);
        let report = check_init_condition(&bad, 2).unwrap();
        assert_eq!(report.item("C1.2 hidden").unwrap().verdict, Verdict::Fail);
        let short = synthetic_sweep(Axis::Depth, &[4], -1.0);
        assert!(matches!(check_init_condition(&short, 2), Err(ScalingError::TooFewPoints(1))));
    }

    #[test]
    fn update_check_covers_all_subsets() {
        let good = synthetic_sweep(Axis::Depth, &[4, 8, 16], -1.0);
        let report = check_update_condition(&good, 2).unwrap();
        assert_eq!(report.items.len(), 5);
        assert_eq!(report.verdict, Verdict::Pass);
    }
}
