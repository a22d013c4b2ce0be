//! Measurements, log–log exponent fits and pass/fail verdicts.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    dot, norm2, rms_op_norm_with, rms_vec, spectral_norm, LinalgError, Matrix, NormPrecision, RandomSource,
};
use crate::netsim::{Activation, ArchSpec, Loss, NetError, ParamSet, ResidualNet};
use crate::optim::{apply_update, direction, OptimError, OptimizerState, ParamState, StepConfig, StepOptions};
use crate::scaling::{
    BaseHyperparams, BiasInit, BlockNorms, DepthConvention, InputModality, LayerKind, LayerRole, NetMeasurement,
    OptimizerKind, ParamKind, ParamNorms, Parameterization, ScaleRatios, ScalingError, SweepMeasurements,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagError {
    #[error("need at least 3 sizes, got {0}")]
    TooFewPoints(usize),
    #[error("sizes must be strictly increasing and geometric: {0:?}")]
    NotGeometric(Vec<usize>),
    #[error("measurement at size {size} is not positive: {value}")]
    NonPositive { size: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradients at size {size}, seed {seed}")]
    Diverged { size: usize, seed: u64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

pub type Result<T> = std::result::Result<T, DiagError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Width,
    Depth,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Width => "width",
            Axis::Depth => "depth",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Least-squares fit of `log y = slope · log size + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub axis: Axis,
    /// `(size, seed-mean measurement)`.
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope.
    pub slope_stderr: f64,
    pub seeds_averaged: usize,
}

impl ScalingFit {
    /// Largest over smallest measurement.
    pub fn spread(&self) -> f64 {
        let (lo, hi) = self.points.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
        hi / lo
    }
}

fn check_geometric(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 3 {
        return Err(DiagError::TooFewPoints(sizes.len()));
    }
    if sizes[0] == 0 || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagError::NotGeometric(sizes.to_vec()));
    }
    let r0 = sizes[1] as f64 / sizes[0] as f64;
    if sizes.windows(2).any(|w| ((w[1] as f64 / w[0] as f64) / r0 - 1.0).abs() > 1e-9) {
        return Err(DiagError::NotGeometric(sizes.to_vec()));
    }
    Ok(())
}

/// OLS on `(log size, log value)`; values must already be seed means.
pub fn fit_exponent(axis: Axis, points: &[(usize, f64)], seeds_averaged: usize) -> Result<ScalingFit> {
    let sizes: Vec<usize> = points.iter().map(|p| p.0).collect();
    check_geometric(&sizes)?;
    for &(size, value) in points {
        if value.is_nan() || value <= 0.0 || !value.is_finite() {
            return Err(DiagError::NonPositive { size, value });
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    // A constant series is fitted perfectly by a flat line.
    let r_squared = if syy <= 1e-300 { 1.0 } else { (1.0 - ssr / syy).max(0.0) };
    let slope_stderr = if points.len() > 2 { (ssr / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(ScalingFit { axis, points: points.to_vec(), slope, intercept, r_squared, slope_stderr, seeds_averaged })
}

/// Averages each size's per-seed values, then fits.
pub fn fit_seeded(axis: Axis, groups: &[(usize, Vec<f64>)]) -> Result<ScalingFit> {
    let mut sorted: Vec<&(usize, Vec<f64>)> = groups.iter().collect();
    sorted.sort_by_key(|g| g.0);
    let seeds = sorted.iter().map(|g| g.1.len()).min().unwrap_or(0);
    if seeds == 0 {
        return Err(DiagError::TooFewPoints(0));
    }
    let points: Vec<(usize, f64)> =
        sorted.iter().map(|(s, v)| (*s, v.iter().sum::<f64>() / v.len() as f64)).collect();
    fit_exponent(axis, &points, seeds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
    DegenerateZero,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
            Verdict::DegenerateZero => "degenerate_zero",
        }
    }

    /// Any failure fails; otherwise any degenerate or inconclusive item
    /// spoils a pass. An empty list is inconclusive.
    pub fn combine(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
        let (mut any, mut fail, mut zero, mut unsure) = (false, false, false, false);
        for v in verdicts {
            any = true;
            match v {
                Verdict::Fail => fail = true,
                Verdict::DegenerateZero => zero = true,
                Verdict::Inconclusive => unsure = true,
                Verdict::Pass => {}
            }
        }
        if fail {
            Verdict::Fail
        } else if zero {
            Verdict::DegenerateZero
        } else if unsure || !any {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        }
    }

    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Minimum r² for a sloped fit to be trusted.
pub const MIN_R_SQUARED: f64 = 0.8;
/// Minimum seeds behind a pass/fail verdict.
pub const MIN_SEEDS: usize = 3;
pub const DEFAULT_SLOPE_TOL: f64 = 0.15;

/// Expected exponent of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlopeTarget {
    /// `|slope − target| ≤ tol`.
    Within { target: f64, tol: f64 },
    /// `slope ≤ bound + tol`.
    AtMost { bound: f64, tol: f64 },
}

impl SlopeTarget {
    pub fn within(target: f64) -> Self {
        SlopeTarget::Within { target, tol: DEFAULT_SLOPE_TOL }
    }

    pub fn within_tol(target: f64, tol: f64) -> Self {
        SlopeTarget::Within { target, tol }
    }

    pub fn at_most(bound: f64) -> Self {
        SlopeTarget::AtMost { bound, tol: DEFAULT_SLOPE_TOL }
    }

    /// Verdict for a fit.
    ///
    /// A slope inside the band passes when r² ≥ 0.8, or when the expected
    /// exponent is 0 (a flat series has no variance for r² to explain). A
    /// slope outside the band fails when r² ≥ 0.8 or when it is more than two
    /// standard errors outside. Everything else, and any fit over fewer than
    /// three seeds, is inconclusive.
    pub fn judge(&self, fit: &ScalingFit) -> Verdict {
        if fit.seeds_averaged < MIN_SEEDS || !fit.slope.is_finite() {
            return Verdict::Inconclusive;
        }
        let trusted = fit.r_squared >= MIN_R_SQUARED;
        let (excess, flat) = match *self {
            SlopeTarget::Within { target, tol } => ((fit.slope - target).abs() - tol, target == 0.0),
            SlopeTarget::AtMost { bound, tol } => (fit.slope - bound - tol, false),
        };
        if excess <= 0.0 {
            if trusted || flat {
                Verdict::Pass
            } else {
                Verdict::Inconclusive
            }
        } else if trusted || excess > 2.0 * fit.slope_stderr {
            Verdict::Fail
        } else {
            Verdict::Inconclusive
        }
    }
}

impl fmt::Display for SlopeTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlopeTarget::Within { target, tol } => write!(f, "{target} ± {tol}"),
            SlopeTarget::AtMost { bound, tol } => write!(f, "≤ {bound} + {tol}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Models and data
// ---------------------------------------------------------------------------

/// Source of training batches: `(inputs, targets)` for a seed and step.
pub trait DataSource: Sync {
    fn batch(&self, seed: u64, step: usize, size: usize) -> (Matrix, Matrix);
}

impl<F> DataSource for F
where
    F: Fn(u64, usize, usize) -> (Matrix, Matrix) + Sync,
{
    fn batch(&self, seed: u64, step: usize, size: usize) -> (Matrix, Matrix) {
        self(seed, step, size)
    }
}

/// Step index used for the fixed measurement batch.
pub const PROBE_STEP: usize = usize::MAX;

/// A model family: architecture template, parameterization and optimizer.
/// The sweep axis replaces `arch.width` or `arch.depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    pub base_width: usize,
    pub base_depth: usize,
    pub optimizer: OptimizerKind,
    pub param: ParamKind,
    pub base: BaseHyperparams,
    pub convention: DepthConvention,
    pub modality: InputModality,
    pub bias_init: BiasInit,
    pub options: StepOptions,
    pub loss: Loss,
    pub batch_size: usize,
    /// Keep every hidden multiplier at `α_base` regardless of depth.
    pub hold_alpha_constant: bool,
}

impl ModelSpec {
    pub fn new(arch: ArchSpec, optimizer: OptimizerKind, param: ParamKind, base: BaseHyperparams) -> Self {
        ModelSpec {
            arch,
            base_width: arch.width,
            base_depth: arch.depth,
            optimizer,
            param,
            base,
            convention: DepthConvention::Ratio,
            modality: InputModality::Dense,
            bias_init: BiasInit::Zero,
            options: StepOptions::reduced(),
            loss: Loss::SquaredError,
            batch_size: 16,
            hold_alpha_constant: false,
        }
    }

    /// Architecture at `size` along `axis`. With `n_l = n` in the template,
    /// the block width follows the width.
    pub fn arch_at(&self, axis: Axis, size: usize) -> ArchSpec {
        let mut a = self.arch;
        match axis {
            Axis::Width => {
                let ratio = a.block.hidden_width as f64 / a.width as f64;
                a.width = size;
                a.block.hidden_width = ((size as f64 * ratio).round() as usize).max(1);
            }
            Axis::Depth => a.depth = size,
        }
        a
    }

    pub fn parameterization(&self, arch: &ArchSpec) -> Result<Parameterization> {
        let ratios = ScaleRatios::new(arch.width, self.base_width, arch.depth, self.base_depth)?;
        Ok(Parameterization::new(self.optimizer, self.param, self.base, ratios)
            .with_convention(self.convention)
            .with_modality(self.modality)
            .with_bias_init(self.bias_init)
            .with_block_depth(arch.block.depth))
    }

    /// Initialized network and per-parameter step configuration.
    pub fn build(&self, arch: ArchSpec, seed: u64) -> Result<(ResidualNet, StepConfig)> {
        let p = self.parameterization(&arch)?;
        let key = format!("init/w{}/d{}", arch.width, arch.depth);
        let mut rng = RandomSource::derived(seed, &key);
        let mut net = ResidualNet::initialize(arch, &p, &mut rng)?;
        if self.hold_alpha_constant {
            net.alphas.iter_mut().for_each(|a| *a = self.base.alpha_base);
        }
        let cfg = StepConfig::new(&p, &arch.roles(), self.options)?;
        Ok((net, cfg))
    }

    /// One optimizer step on a batch: returns `ΔW` without applying it.
    pub fn step_delta(
        &self,
        net: &ResidualNet,
        cfg: &StepConfig,
        state: &mut OptimizerState,
        x: &Matrix,
        y: &Matrix,
    ) -> Result<ParamSet> {
        let trace = net.forward_batch(x)?;
        let grads = net.backward(&trace, self.loss, y)?;
        Ok(state.step(&net.params, &grads, cfg, 1.0)?)
    }
}

fn is_diverged(v: f64) -> bool {
    !v.is_finite() || v.abs() > 1e12
}

/// Mean over samples (rows) of the per-sample RMS norm.
pub fn mean_row_rms(m: &Matrix) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    (0..m.rows()).map(|r| rms_vec(m.row(r))).sum::<f64>() / m.rows() as f64
}

fn op_norm(m: &Matrix) -> f64 {
    rms_op_norm_with(m, NormPrecision::MEASURE)
}

// ---------------------------------------------------------------------------
// Spectral-condition sweeps
// ---------------------------------------------------------------------------

/// Norms of every weight (and `ΔW`, when given) of one network.
pub fn measure_network(net: &ResidualNet, delta: Option<&ParamSet>, size: usize, seed: u64) -> NetMeasurement {
    let pn = |role: &LayerRole| {
        let w = net.params.get(role).expect("role of this network");
        ParamNorms { norm: op_norm(w), delta: delta.map(|d| op_norm(d.get(role).expect("same shape"))) }
    };
    let arch = &net.arch;
    let mut blocks = Vec::with_capacity(arch.depth);
    let mut biases = Vec::new();
    if arch.block.use_bias {
        biases.push(pn(&LayerRole::input_bias(arch.width)));
    }
    for l in 1..=arch.depth {
        let mut sublayers = Vec::with_capacity(arch.block.depth);
        for i in 1..=arch.block.depth {
            let (n_in, n_out) = arch.sublayer_dims(i);
            sublayers.push(pn(&LayerRole::hidden(l, i, n_in, n_out)));
            if arch.block.use_bias {
                biases.push(pn(&LayerRole::hidden_bias(l, i, n_out)));
            }
        }
        blocks.push(BlockNorms { alpha: net.alphas[l - 1], sublayers });
    }
    NetMeasurement {
        size,
        seed,
        alpha_in: net.alpha_in,
        input: pn(&LayerRole::input(arch.d0, arch.width)),
        alpha_out: net.alpha_out,
        output: pn(&LayerRole::output(arch.width, arch.d_out)),
        blocks,
        biases,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub model: ModelSpec,
    pub axis: Axis,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Take one optimizer step and record `ΔW` norms.
    pub take_step: bool,
}

fn cells(sizes: &[usize], seeds: &[u64]) -> Vec<(usize, u64)> {
    sizes.iter().flat_map(|&s| seeds.iter().map(move |&seed| (s, seed))).collect()
}

/// Init (and optionally one-step) norm measurements over a sweep.
/// Cells whose gradients overflow are listed in `unstable` and left out.
pub fn measure_sweep(cfg: &SweepConfig, data: &dyn DataSource) -> Result<SweepMeasurements> {
    let results = cells(&cfg.sizes, &cfg.seeds)
        .into_par_iter()
        .map(|(size, seed)| {
            let arch = cfg.model.arch_at(cfg.axis, size);
            let (net, step) = cfg.model.build(arch, seed)?;
            let delta = if cfg.take_step {
                let (x, y) = data.batch(seed, 0, cfg.model.batch_size);
                let trace = net.forward_batch(&x)?;
                let grads = net.backward(&trace, cfg.model.loss, &y)?;
                if !grads.is_finite() {
                    return Err(DiagError::Diverged { size, seed });
                }
                let mut state = OptimizerState::new(cfg.model.optimizer, &net.params);
                Some(state.step(&net.params, &grads, &step, 1.0)?)
            } else {
                None
            };
            Ok(measure_network(&net, delta.as_ref(), size, seed))
        })
        .collect::<Vec<Result<NetMeasurement>>>();
    let mut points = Vec::new();
    let mut unstable = Vec::new();
    for r in results {
        match r {
            Ok(p) => points.push(p),
            Err(DiagError::Diverged { size, seed }) => unstable.push((size, seed)),
            Err(e) => return Err(e),
        }
    }
    Ok(SweepMeasurements { axis: cfg.axis, points, unstable })
}

/// Result of a single fitted quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCheck {
    pub name: String,
    pub target: SlopeTarget,
    pub fit: Option<ScalingFit>,
    pub verdict: Verdict,
}

impl FitCheck {
    fn from_groups(name: &str, axis: Axis, target: SlopeTarget, groups: &[(usize, Vec<f64>)]) -> Self {
        if groups.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)) {
            return FitCheck { name: name.into(), target, fit: None, verdict: Verdict::DegenerateZero };
        }
        match fit_seeded(axis, groups) {
            Ok(fit) => {
                let verdict = target.judge(&fit);
                FitCheck { name: name.into(), target, fit: Some(fit), verdict }
            }
            Err(DiagError::NonPositive { .. }) => {
                FitCheck { name: name.into(), target, fit: None, verdict: Verdict::DegenerateZero }
            }
            Err(_) => FitCheck { name: name.into(), target, fit: None, verdict: Verdict::Inconclusive },
        }
    }
}

fn group_by_size(values: impl IntoIterator<Item = (usize, f64)>) -> Vec<(usize, Vec<f64>)> {
    let mut groups: Vec<(usize, Vec<f64>)> = Vec::new();
    for (s, v) in values {
        match groups.iter_mut().find(|g| g.0 == s) {
            Some(g) => g.1.push(v),
            None => groups.push((s, vec![v])),
        }
    }
    groups.sort_by_key(|g| g.0);
    groups
}

/// Whether second-order block terms shrink like `1/L` on their own once the
/// init and first-order conditions hold: fits `α_l ‖ΔW⁽²⁾‖_R ‖ΔW⁽¹⁾‖_R`
/// (mean over blocks) against depth, expecting slope −1.
pub fn verify_second_order_auto(cfg: &SweepConfig, data: &dyn DataSource) -> Result<FitCheck> {
    if cfg.axis != Axis::Depth {
        return Err(DiagError::Config("second-order check sweeps depth".into()));
    }
    if cfg.model.arch.block.depth != 2 {
        return Err(DiagError::Config("second-order check needs two-layer blocks".into()));
    }
    check_geometric(&cfg.sizes)?;
    let sweep = measure_sweep(&SweepConfig { take_step: true, ..cfg.clone() }, data)?;
    let values = sweep.points.iter().map(|p| {
        let per_block: Vec<f64> = p
            .blocks
            .iter()
            .map(|b| b.alpha * b.sublayers[0].delta.unwrap_or(0.0) * b.sublayers[1].delta.unwrap_or(0.0))
            .collect();
        (p.size, per_block.iter().sum::<f64>() / per_block.len() as f64)
    });
    let mut check = FitCheck::from_groups("C2.3 auto", Axis::Depth, SlopeTarget::within(-1.0), &group_by_size(values));
    if !sweep.unstable.is_empty() {
        check.verdict = Verdict::Fail;
    }
    Ok(check)
}

// ---------------------------------------------------------------------------
// Update-order audit
// ---------------------------------------------------------------------------

/// Predicted exponent of `‖A‖_R` against width for `role`: the inverse of the
/// width exponent of `α·η`, since `α η ‖A‖_R` must stay `Θ(1)` (input,
/// output) or `Θ(1/L)` (hidden, with `Θ(1)` neighbouring weights).
pub fn predicted_direction_exponent(model: &ModelSpec, kind: LayerKind) -> Result<f64> {
    let at = |n: usize| -> Result<f64> {
        let arch = model.arch_at(Axis::Width, n);
        let p = model.parameterization(&arch)?;
        let (n_in1, n_out1) = arch.sublayer_dims(1);
        let role = match kind {
            LayerKind::Input => LayerRole::input(arch.d0, n),
            LayerKind::Output => LayerRole::output(n, arch.d_out),
            _ => LayerRole::hidden(1, 1, n_in1, n_out1),
        };
        let hp = p.hyperparams(&role)?;
        Ok(hp.alpha * hp.eta)
    };
    let n = model.base_width.max(1);
    Ok(-(at(2 * n)? / at(n)?).ln() / 2f64.ln())
}

/// Fits of `‖A‖_R` against width for the input layer, the hidden layers
/// (mean over all sublayers) and the output layer after one reduced step.
pub fn audit_update_orders(
    model: &ModelSpec,
    widths: &[usize],
    seeds: &[u64],
    data: &dyn DataSource,
) -> Result<Vec<FitCheck>> {
    check_geometric(widths)?;
    let options = StepOptions { reduced: true, ..model.options };
    let rows = cells(widths, seeds)
        .into_par_iter()
        .map(|(n, seed)| {
            let arch = model.arch_at(Axis::Width, n);
            let (net, cfg) = model.build(arch, seed)?;
            let (x, y) = data.batch(seed, 0, model.batch_size);
            let grads = net.backward(&net.forward_batch(&x)?, model.loss, &y)?;
            let mut sums = [0.0f64; 3];
            let mut counts = [0usize; 3];
            for (idx, ((role, w), (_, g))) in net.params.entries().into_iter().zip(grads.entries()).enumerate() {
                let slot = match role.kind {
                    LayerKind::Input => 0,
                    LayerKind::Hidden => 1,
                    LayerKind::Output => 2,
                    _ => continue,
                };
                let a = direction(model.optimizer, &role, w, g, &mut ParamState::default(), &cfg.hyperparams[idx], &options)?;
                sums[slot] += op_norm(&a);
                counts[slot] += 1;
            }
            Ok((n, [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64, sums[2] / counts[2] as f64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (slot, (name, kind)) in
        [("input", LayerKind::Input), ("hidden", LayerKind::Hidden), ("output", LayerKind::Output)].iter().enumerate()
    {
        let predicted = predicted_direction_exponent(model, *kind)?;
        let groups = group_by_size(rows.iter().map(|(n, v)| (*n, v[slot])));
        out.push(FitCheck::from_groups(
            &format!("{} {name}", model.optimizer.name()),
            Axis::Width,
            SlopeTarget::within(predicted),
            &groups,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Coordinate checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckConfig {
    pub model: ModelSpec,
    pub axis: Axis,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Record per-parameter operator norms (slow for wide nets).
    pub record_params: bool,
    /// Measure `Δh` against initialization instead of the previous step.
    pub delta_from_init: bool,
    /// Allowed max/min ratio of `‖h_L‖_R` across sizes.
    pub band: f64,
}

/// Measurements of one network after `step` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckRecord {
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
    pub step: usize,
    /// `rms(h_0) ..= rms(h_{L+1})`, averaged over the probe batch.
    pub h_rms: Vec<f64>,
    /// Same for `Δh`; absent at step 0.
    pub dh_rms: Option<Vec<f64>>,
    /// `(label, ‖W‖_R)` when parameter norms are recorded.
    pub w_norms: Vec<(String, f64)>,
    pub dw_norms: Vec<(String, f64)>,
    pub loss: f64,
    pub diverged: bool,
}

impl CoordCheckRecord {
    pub fn h_last(&self) -> f64 {
        self.h_rms[self.depth]
    }

    pub fn dh_last(&self) -> Option<f64> {
        self.dh_rms.as_ref().map(|d| d[self.depth])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordFit {
    pub step: usize,
    pub quantity: String,
    pub check: FitCheck,
    /// max/min over sizes of the seed-mean value.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckResult {
    pub records: Vec<CoordCheckRecord>,
    pub fits: Vec<CoordFit>,
    /// `(size, seed)` cells that diverged.
    pub unstable: Vec<(usize, u64)>,
    pub verdict: Verdict,
}

impl CoordCheckResult {
    pub fn fit(&self, step: usize, quantity: &str) -> Option<&CoordFit> {
        self.fits.iter().find(|f| f.step == step && f.quantity == quantity)
    }

    /// Largest max/min ratio of `‖h_L‖_R` over all recorded steps.
    pub fn worst_spread(&self) -> f64 {
        self.fits.iter().filter(|f| f.quantity == "h_L").filter_map(|f| f.spread).fold(1.0, f64::max)
    }
}

fn feature_rms(trace: &crate::netsim::ForwardTrace) -> Vec<f64> {
    let mut v: Vec<f64> = trace.h.iter().map(mean_row_rms).collect();
    v.push(mean_row_rms(&trace.output));
    v
}

fn feature_delta_rms(after: &crate::netsim::ForwardTrace, before: &crate::netsim::ForwardTrace) -> Vec<f64> {
    let mut v: Vec<f64> =
        after.h.iter().zip(&before.h).map(|(a, b)| mean_row_rms(&a.sub(b).expect("same shape"))).collect();
    v.push(mean_row_rms(&after.output.sub(&before.output).expect("same shape")));
    v
}

fn run_coord_cell(cfg: &CoordCheckConfig, size: usize, seed: u64, data: &dyn DataSource) -> Result<Vec<CoordCheckRecord>> {
    let m = &cfg.model;
    let arch = m.arch_at(cfg.axis, size);
    let (mut net, step_cfg) = m.build(arch, seed)?;
    let (px, py) = data.batch(seed, PROBE_STEP, m.batch_size);
    let mut state = OptimizerState::new(m.optimizer, &net.params);
    let param_norms = |p: &ParamSet| -> Vec<(String, f64)> {
        if cfg.record_params {
            p.entries().iter().map(|(r, w)| (r.label(), op_norm(w))).collect()
        } else {
            Vec::new()
        }
    };
    let init_trace = net.forward_batch(&px)?;
    let mut prev_trace = init_trace.clone();
    let h0 = feature_rms(&init_trace);
    let loss0 = m.loss.evaluate(&init_trace.output, &py)?.0;
    let mut records = vec![CoordCheckRecord {
        width: arch.width,
        depth: arch.depth,
        seed,
        step: 0,
        diverged: h0.iter().any(|&v| is_diverged(v)),
        h_rms: h0,
        dh_rms: None,
        w_norms: param_norms(&net.params),
        dw_norms: Vec::new(),
        loss: loss0,
    }];
    for t in 1..=cfg.steps {
        let (x, y) = data.batch(seed, t - 1, m.batch_size);
        let delta = m.step_delta(&net, &step_cfg, &mut state, &x, &y)?;
        apply_update(&mut net.params, &delta, m.optimizer, &m.options)?;
        let trace = net.forward_batch(&px)?;
        let h = feature_rms(&trace);
        let reference = if cfg.delta_from_init { &init_trace } else { &prev_trace };
        let dh = feature_delta_rms(&trace, reference);
        let loss = m.loss.evaluate(&trace.output, &py)?.0;
        let diverged = h.iter().chain(&dh).any(|&v| is_diverged(v)) || !loss.is_finite();
        records.push(CoordCheckRecord {
            width: arch.width,
            depth: arch.depth,
            seed,
            step: t,
            h_rms: h,
            dh_rms: Some(dh),
            w_norms: param_norms(&net.params),
            dw_norms: param_norms(&delta),
            loss,
            diverged,
        });
        prev_trace = trace;
        if diverged {
            break;
        }
    }
    Ok(records)
}

/// Trains every `(size, seed)` cell for `steps` steps and fits `‖h_L‖_R` and
/// `‖Δh_L‖_R` against size at each step.
///
/// The verdict passes when no cell diverges, every `‖h_L‖_R` fit is flat and
/// the spread across sizes stays within `band` at every step.
pub fn coord_check(cfg: &CoordCheckConfig, data: &dyn DataSource) -> Result<CoordCheckResult> {
    check_geometric(&cfg.sizes)?;
    if cfg.seeds.is_empty() {
        return Err(DiagError::Config("no seeds".into()));
    }
    let mut records: Vec<CoordCheckRecord> = cells(&cfg.sizes, &cfg.seeds)
        .into_par_iter()
        .map(|(size, seed)| run_coord_cell(cfg, size, seed, data))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let size_of = |r: &CoordCheckRecord| match cfg.axis {
        Axis::Width => r.width,
        Axis::Depth => r.depth,
    };
    records.sort_by_key(|r| (size_of(r), r.seed, r.step));
    let mut unstable: Vec<(usize, u64)> =
        records.iter().filter(|r| r.diverged).map(|r| (size_of(r), r.seed)).collect();
    unstable.dedup();

    let mut fits = Vec::new();
    for step in 0..=cfg.steps {
        for quantity in ["h_L", "dh_L"] {
            if quantity == "dh_L" && step == 0 {
                continue;
            }
            let values = records
                .iter()
                .filter(|r| r.step == step && !unstable.contains(&(size_of(r), r.seed)))
                .filter_map(|r| {
                    let v = if quantity == "h_L" { Some(r.h_last()) } else { r.dh_last() };
                    v.map(|v| (size_of(r), v))
                });
            let groups = group_by_size(values);
            let spread = (groups.len() == cfg.sizes.len()).then(|| {
                let means: Vec<f64> = groups.iter().map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64).collect();
                let hi = means.iter().cloned().fold(0.0, f64::max);
                let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
                hi / lo
            });
            let check = if groups.len() < cfg.sizes.len() {
                FitCheck { name: quantity.into(), target: SlopeTarget::within(0.0), fit: None, verdict: Verdict::Fail }
            } else {
                FitCheck::from_groups(quantity, cfg.axis, SlopeTarget::within(0.0), &groups)
            };
            fits.push(CoordFit { step, quantity: quantity.into(), check, spread });
        }
    }
    let mut verdicts: Vec<Verdict> =
        fits.iter().filter(|f| f.quantity == "h_L").map(|f| f.check.verdict).collect();
    if !unstable.is_empty() {
        verdicts.push(Verdict::Fail);
    }
    if fits.iter().filter(|f| f.quantity == "h_L").any(|f| f.spread.is_none_or(|s| s > cfg.band)) {
        verdicts.push(Verdict::Fail);
    }
    Ok(CoordCheckResult { records, fits, unstable, verdict: Verdict::combine(verdicts) })
}

// ---------------------------------------------------------------------------
// Feature-update decomposition
// ---------------------------------------------------------------------------

/// Depth fits of the RMS norms of `Δh_0`, `ε₀`, `ε₁⁽¹⁾`, `ε₁⁽²⁾`, `ε₂` and
/// `Δh_L` after one step, for linear two-layer blocks. Each is expected to
/// stay `Θ(1)` (slope 0 ± 0.2) under μP.
pub fn decomposition_sweep(cfg: &SweepConfig, data: &dyn DataSource) -> Result<Vec<FitCheck>> {
    if cfg.axis != Axis::Depth {
        return Err(DiagError::Config("decomposition sweep runs over depth".into()));
    }
    check_geometric(&cfg.sizes)?;
    let rows = cells(&cfg.sizes, &cfg.seeds)
        .into_par_iter()
        .map(|(size, seed)| {
            let arch = cfg.model.arch_at(Axis::Depth, size);
            let (net, step) = cfg.model.build(arch, seed)?;
            let (x, y) = data.batch(seed, 0, cfg.model.batch_size);
            let mut state = OptimizerState::new(cfg.model.optimizer, &net.params);
            let delta = cfg.model.step_delta(&net, &step, &mut state, &x, &y)?;
            let mut after = net.clone();
            after.params.add_scaled(1.0, &delta)?;
            let (px, _) = data.batch(seed, PROBE_STEP, 1);
            let n = net.decompose_feature_update(&after, px.row(0))?.norms();
            Ok((size, [n.dh0, n.eps0, n.eps1_w1, n.eps1_w2, n.eps2, n.dh_l]))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = ["dh_0", "eps0", "eps1_w1", "eps1_w2", "eps2", "dh_L"];
    Ok(names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let groups = group_by_size(rows.iter().map(|(s, v)| (*s, v[i])));
            FitCheck::from_groups(name, Axis::Depth, SlopeTarget::within_tol(0.0, 0.2), &groups)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Assumption verifiers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssumptionId {
    #[serde(rename = "A1-weights")]
    A1Weights,
    #[serde(rename = "A1-features")]
    A1Features,
    #[serde(rename = "A2")]
    A2,
    #[serde(rename = "A3")]
    A3,
}

impl AssumptionId {
    pub fn name(self) -> &'static str {
        match self {
            AssumptionId::A1Weights => "A1-weights",
            AssumptionId::A1Features => "A1-features",
            AssumptionId::A2 => "A2",
            AssumptionId::A3 => "A3",
        }
    }

    /// Allowed ratio band.
    pub fn band(self) -> (f64, f64) {
        match self {
            AssumptionId::A1Weights | AssumptionId::A1Features => (0.1, 1.0),
            AssumptionId::A2 => (0.2, 1.0),
            AssumptionId::A3 => (0.1, 10.0),
        }
    }
}

/// Ratios of one layer at one phase; `None` marks a zero denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatios {
    pub layer: String,
    /// `‖W + ΔW‖_R / (‖W‖_R + ‖ΔW‖_R)`.
    pub a1_weights: Option<f64>,
    /// Sample mean of `‖(W + ΔW)h‖_R / (‖Wh‖_R + ‖ΔWh‖_R)`.
    pub a1_features: Option<f64>,
    /// Sample mean of `‖φ(z)‖_R / ‖z‖_R`.
    pub a2: Option<f64>,
    /// Sample mean over `j` of `‖ΔW h_j‖_R / ((1/B) Σ_i ‖ΔW⁽ⁱ⁾ h_j‖_R)`.
    pub a3: Option<f64>,
}

impl LayerRatios {
    pub fn get(&self, id: AssumptionId) -> Option<f64> {
        match id {
            AssumptionId::A1Weights => self.a1_weights,
            AssumptionId::A1Features => self.a1_features,
            AssumptionId::A2 => self.a2,
            AssumptionId::A3 => self.a3,
        }
    }
}

/// Ratios of the tracked layers of one network at one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub depth: usize,
    pub seed: u64,
    pub step: usize,
    pub loss: f64,
    pub layers: Vec<LayerRatios>,
}

/// Phase records of a multi-depth training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub depth: usize,
    pub step: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub id: AssumptionId,
    pub band: (f64, f64),
    /// Statistics over layers and seeds per `(depth, step)`.
    pub stats: Vec<RatioStats>,
    /// Depth fit of the mean ratio.
    pub depth_check: FitCheck,
    /// Ratios with a zero denominator were skipped.
    pub degenerate: bool,
    pub out_of_band: usize,
    pub verdict: Verdict,
}

/// Which layers to track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelection {
    /// The input layer and every sublayer of the final block.
    Representative,
    All,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0 && num.is_finite() && den.is_finite()).then(|| num / den)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Ratios of one layer from its input rows `a`, pre-activations `z`,
/// backpropagated deltas and the update `ΔW`.
pub fn layer_ratios(
    label: String,
    w: &Matrix,
    dw: &Matrix,
    a: &Matrix,
    z: &Matrix,
    delta: &Matrix,
    act: Activation,
) -> Result<LayerRatios> {
    let w_new = w.add(dw)?;
    let a1_weights = ratio(op_norm(&w_new), op_norm(w) + op_norm(dw));
    let wh = a.matmul_nt(w)?;
    let dwh = a.matmul_nt(dw)?;
    let b = a.rows();
    let a1_features = mean_opt((0..b).map(|s| {
        let sum: Vec<f64> = wh.row(s).iter().zip(dwh.row(s)).map(|(x, y)| x + y).collect();
        ratio(norm2(&sum), norm2(wh.row(s)) + norm2(dwh.row(s)))
    }));
    let a2 = mean_opt((0..b).map(|s| {
        let zs = z.row(s);
        let phi: Vec<f64> = zs.iter().map(|&v| act.apply(v)).collect();
        ratio(norm2(&phi), norm2(zs))
    }));
    // With ΔW⁽ⁱ⁾ = −η B δ_i a_iᵀ the single-sample update and ΔW their mean:
    // ΔW h_j = −η Σ_i δ_i K_ij and (1/B) Σ_i ‖ΔW⁽ⁱ⁾ h_j‖ = η Σ_i ‖δ_i‖ |K_ij|,
    // where K = A Aᵀ. The learning rate cancels.
    let gram = a.matmul_nt(a)?;
    let batch = gram.matmul(delta)?;
    let dnorm: Vec<f64> = (0..b).map(|s| norm2(delta.row(s))).collect();
    let a3 = mean_opt((0..b).map(|j| {
        let den: f64 = (0..b).map(|i| gram[(j, i)].abs() * dnorm[i]).sum();
        ratio(norm2(batch.row(j)), den)
    }));
    Ok(LayerRatios { layer: label, a1_weights, a1_features, a2, a3 })
}

/// Ratios of the tracked layers of `net` on a full batch, with `ΔW` the
/// update that the optimizer would take from this point.
pub fn measure_phase(
    net: &ResidualNet,
    x: &Matrix,
    targets: &Matrix,
    loss: Loss,
    delta: &ParamSet,
    selection: LayerSelection,
) -> Result<Vec<LayerRatios>> {
    let trace = net.forward_batch(x)?;
    let (_, signals) = net.backward_full(&trace, loss, targets, true)?;
    let act = net.activation();
    let last = net.arch.depth;
    let mut out = Vec::new();
    for s in &signals {
        let keep = match s.role.kind {
            LayerKind::Input => true,
            LayerKind::Hidden => selection == LayerSelection::All || s.role.block == last,
            _ => false,
        };
        if !keep {
            continue;
        }
        let z = match s.role.kind {
            LayerKind::Input => &trace.z_in,
            _ => &trace.z[s.role.block - 1][s.role.sublayer - 1],
        };
        let w = net.param(&s.role)?;
        let dw = delta.get(&s.role).expect("same architecture");
        out.push(layer_ratios(s.role.label(), w, dw, &s.input, z, &s.delta, act)?);
    }
    Ok(out)
}

/// Full-batch training protocol for the assumption checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionProtocol {
    pub model: ModelSpec,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Number of samples in the full batch.
    pub samples: usize,
    pub selection: LayerSelection,
}

impl AssumptionProtocol {
    pub fn phases(&self) -> Vec<usize> {
        let mut p = vec![0, self.steps / 2, self.steps];
        p.dedup();
        p
    }
}

fn run_assumption_cell(proto: &AssumptionProtocol, depth: usize, seed: u64, data: &dyn DataSource) -> Result<Vec<PhaseRecord>> {
    let m = &proto.model;
    let arch = m.arch_at(Axis::Depth, depth);
    let (mut net, cfg) = m.build(arch, seed)?;
    let (x, y) = data.batch(seed, 0, proto.samples);
    let mut state = OptimizerState::new(m.optimizer, &net.params);
    let phases = proto.phases();
    let mut records = Vec::new();
    for t in 0..=proto.steps {
        let trace = net.forward_batch(&x)?;
        let loss = m.loss.evaluate(&trace.output, &y)?.0;
        let grads = net.backward(&trace, m.loss, &y)?;
        let delta = state.step(&net.params, &grads, &cfg, 1.0)?;
        if phases.contains(&t) {
            let layers = measure_phase(&net, &x, &y, m.loss, &delta, proto.selection)?;
            records.push(PhaseRecord { depth, seed, step: t, loss, layers });
        }
        if t < proto.steps {
            apply_update(&mut net.params, &delta, m.optimizer, &m.options)?;
        }
    }
    Ok(records)
}

/// Trains one network per `(depth, seed)` and records layer ratios at
/// steps `0`, `T/2` and `T`.
pub fn run_assumption_protocol(proto: &AssumptionProtocol, data: &dyn DataSource) -> Result<RunTrace> {
    let mut records: Vec<PhaseRecord> = cells(&proto.depths, &proto.seeds)
        .into_par_iter()
        .map(|(d, s)| run_assumption_cell(proto, d, s, data))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    records.sort_by_key(|r| (r.depth, r.seed, r.step));
    Ok(RunTrace { records })
}

fn verify_assumption(trace: &RunTrace, id: AssumptionId) -> AssumptionReport {
    let band = id.band();
    let mut degenerate = false;
    let mut out_of_band = 0;
    let mut stats = Vec::new();
    let mut per_depth_seed: Vec<((usize, u64), Vec<f64>)> = Vec::new();
    let mut keys: Vec<(usize, usize)> = trace.records.iter().map(|r| (r.depth, r.step)).collect();
    keys.sort_unstable();
    keys.dedup();
    for (depth, step) in keys {
        let mut vals = Vec::new();
        for r in trace.records.iter().filter(|r| r.depth == depth && r.step == step) {
            for l in &r.layers {
                match l.get(id) {
                    Some(v) => {
                        if v < band.0 || v > band.1 {
                            out_of_band += 1;
                        }
                        vals.push(v);
                        match per_depth_seed.iter_mut().find(|e| e.0 == (depth, r.seed)) {
                            Some(e) => e.1.push(v),
                            None => per_depth_seed.push(((depth, r.seed), vec![v])),
                        }
                    }
                    None => degenerate = true,
                }
            }
        }
        if !vals.is_empty() {
            stats.push(RatioStats {
                depth,
                step,
                min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                max: vals.iter().cloned().fold(0.0, f64::max),
            });
        }
    }
    let groups = group_by_size(per_depth_seed.iter().map(|((d, _), v)| (*d, v.iter().sum::<f64>() / v.len() as f64)));
    let depth_check = FitCheck::from_groups(id.name(), Axis::Depth, SlopeTarget::within(0.0), &groups);
    let mut verdicts = vec![depth_check.verdict];
    if out_of_band > 0 {
        verdicts.push(Verdict::Fail);
    }
    if stats.is_empty() {
        verdicts.push(Verdict::DegenerateZero);
    }
    AssumptionReport { id, band, stats, depth_check, degenerate, out_of_band, verdict: Verdict::combine(verdicts) }
}

/// Non-vanishing update, for weights and for features.
pub fn verify_assumption_1(trace: &RunTrace) -> [AssumptionReport; 2] {
    [verify_assumption(trace, AssumptionId::A1Weights), verify_assumption(trace, AssumptionId::A1Features)]
}

/// Stable activation.
pub fn verify_assumption_2(trace: &RunTrace) -> AssumptionReport {
    verify_assumption(trace, AssumptionId::A2)
}

/// Per-sample update alignment.
pub fn verify_assumption_3(trace: &RunTrace) -> AssumptionReport {
    verify_assumption(trace, AssumptionId::A3)
}

// ---------------------------------------------------------------------------
// Tightness claims
// ---------------------------------------------------------------------------

/// Per block `‖W⁽²⁾W⁽¹⁾h‖_R / (‖W⁽²⁾‖_R ‖W⁽¹⁾‖_R ‖h‖_R)` with `h = h_{l-1}(x)`.
pub fn claim1_ratios(net: &ResidualNet, x: &[f64]) -> Result<Vec<f64>> {
    if net.arch.block.depth != 2 {
        return Err(DiagError::Config("claim 1 concerns two-layer blocks".into()));
    }
    let trace = net.forward(x)?;
    let mut out = Vec::with_capacity(net.arch.depth);
    for (l, blk) in net.params.blocks.iter().enumerate() {
        let h = trace.feature(l, 0);
        let prod = blk.weights[1].matvec(&blk.weights[0].matvec(h)?)?;
        let den = rms_op_norm_with(&blk.weights[1], NormPrecision::EXACT)
            * rms_op_norm_with(&blk.weights[0], NormPrecision::EXACT)
            * rms_vec(h);
        out.push(rms_vec(&prod) / den);
    }
    Ok(out)
}

/// Largest relative gap between `‖ΔW⁽²⁾W⁽¹⁾h‖_R` and `‖ΔW⁽²⁾‖_R ‖W⁽¹⁾h‖_R`
/// over blocks, after one plain gradient step of size `eta` on one sample.
pub fn claim2_gap(net: &ResidualNet, x: &[f64], target: &[f64], loss: Loss, eta: f64) -> Result<f64> {
    if net.arch.block.depth != 2 {
        return Err(DiagError::Config("claim 2 concerns two-layer blocks".into()));
    }
    let trace = net.forward(x)?;
    let grads = net.backward(&trace, loss, &Matrix::new(1, target.len(), target.to_vec())?)?;
    let mut worst: f64 = 0.0;
    for (l, blk) in net.params.blocks.iter().enumerate() {
        let dw2 = grads.blocks[l].weights[1].scaled(-eta);
        let w1h = blk.weights[0].matvec(trace.feature(l, 0))?;
        let lhs = rms_vec(&dw2.matvec(&w1h)?);
        let rhs = rms_op_norm_with(&dw2, NormPrecision::EXACT) * rms_vec(&w1h);
        if rhs > 0.0 {
            worst = worst.max((lhs - rhs).abs() / rhs);
        }
    }
    Ok(worst)
}

/// `‖∇W‖₂ / ‖∇W‖_F` for every weight matrix (1 exactly for rank-one gradients).
pub fn gradient_rank_one_ratios(grads: &ParamSet) -> Vec<(String, f64)> {
    grads
        .entries()
        .into_iter()
        .filter(|(r, g)| !r.is_bias() && g.frobenius_norm() > 0.0)
        .map(|(r, g)| {
            let s = spectral_norm(g, 20_000, 1e-15).value;
            (r.label(), s / g.frobenius_norm())
        })
        .collect()
}

/// Cosine between two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm2(a) * norm2(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn pts(sizes: &[usize], f: impl Fn(f64) -> f64) -> Vec<(usize, f64)> {
        sizes.iter().map(|&s| (s, f(s as f64))).collect()
    }

    #[test]
    fn exact_power_laws() {
        let fit = fit_exponent(Axis::Width, &pts(&[64, 128, 256, 512], |x| 3.0 * x), 3).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        let fit = fit_exponent(Axis::Width, &pts(&[4, 16, 64], |x| 2.0 / x.sqrt()), 3).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_preconditions() {
        assert!(matches!(fit_exponent(Axis::Depth, &pts(&[4, 8], |x| x), 3), Err(DiagError::TooFewPoints(2))));
        assert!(matches!(fit_exponent(Axis::Depth, &pts(&[4, 8, 12], |x| x), 3), Err(DiagError::NotGeometric(_))));
        let bad = vec![(4, 1.0), (8, 0.0), (16, 1.0)];
        assert!(matches!(fit_exponent(Axis::Depth, &bad, 3), Err(DiagError::NonPositive { size: 8, .. })));
    }

    #[test]
    fn seeds_are_averaged_before_fitting() {
        let groups = vec![(16, vec![1.0, 3.0]), (4, vec![0.5, 1.5]), (8, vec![1.0, 1.0, 1.0])];
        let fit = fit_seeded(Axis::Width, &groups).unwrap();
        assert_eq!(fit.points, vec![(4, 1.0), (8, 1.0), (16, 2.0)]);
        assert_eq!(fit.seeds_averaged, 2);
    }

    #[test]
    fn verdict_rules() {
        let mk = |slope: f64, r2: f64, se: f64, seeds: usize| ScalingFit {
            axis: Axis::Width,
            points: vec![],
            slope,
            intercept: 0.0,
            r_squared: r2,
            slope_stderr: se,
            seeds_averaged: seeds,
        };
        let t = SlopeTarget::within(-1.0);
        assert_eq!(t.judge(&mk(-1.1, 0.99, 0.01, 3)), Verdict::Pass);
        assert_eq!(t.judge(&mk(-1.1, 0.5, 0.01, 3)), Verdict::Inconclusive);
        assert_eq!(t.judge(&mk(0.0, 0.0, 0.01, 3)), Verdict::Fail);
        assert_eq!(t.judge(&mk(-1.3, 0.3, 0.2, 3)), Verdict::Inconclusive);
        assert_eq!(t.judge(&mk(-1.0, 1.0, 0.0, 2)), Verdict::Inconclusive);
        let flat = SlopeTarget::within(0.0);
        assert_eq!(flat.judge(&mk(0.05, 0.1, 0.05, 3)), Verdict::Pass);
        assert_eq!(flat.judge(&mk(0.5, 0.95, 0.05, 3)), Verdict::Fail);
        let at_most = SlopeTarget::at_most(-0.5);
        assert_eq!(at_most.judge(&mk(-1.0, 0.99, 0.0, 3)), Verdict::Pass);
        assert_eq!(at_most.judge(&mk(0.0, 0.99, 0.0, 3)), Verdict::Fail);
    }

    #[test]
    fn verdict_combination() {
        use Verdict::*;
        assert_eq!(Verdict::combine([Pass, Pass]), Pass);
        assert_eq!(Verdict::combine([Pass, Inconclusive]), Inconclusive);
        assert_eq!(Verdict::combine([DegenerateZero, Inconclusive]), DegenerateZero);
        assert_eq!(Verdict::combine([Pass, DegenerateZero, Fail]), Fail);
        assert_eq!(Verdict::combine([]), Inconclusive);
    }

    #[test]
    fn layer_ratio_trivial_cases() {
        let mut rng = RandomSource::new(1);
        let w = gaussian_matrix(5, 4, 1.0, &mut rng);
        let a = gaussian_matrix(3, 4, 1.0, &mut rng);
        let z = a.matmul_nt(&w).unwrap();
        let delta = gaussian_matrix(3, 5, 1.0, &mut rng);
        let zero = Matrix::zeros(5, 4);
        let r = layer_ratios("x".into(), &w, &zero, &a, &z, &delta, Activation::Linear).unwrap();
        assert!((r.a1_weights.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.a1_features.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.a2, Some(1.0));
        let r = layer_ratios("x".into(), &w, &w.scaled(-1.0), &a, &z, &delta, Activation::Linear).unwrap();
        assert_eq!(r.a1_weights, Some(0.0));
        let neg = z.map(|v| -v.abs() - 1.0);
        let r = layer_ratios("x".into(), &w, &zero, &a, &neg, &delta, Activation::Relu).unwrap();
        assert_eq!(r.a2, Some(0.0));
    }

    #[test]
    fn alignment_of_identical_samples_is_one() {
        let row = vec![0.3, -1.0, 2.0];
        let a = Matrix::from_rows(&vec![row; 6]).unwrap();
        let drow = vec![0.5, 0.1];
        let delta = Matrix::from_rows(&vec![drow; 6]).unwrap();
        let w = Matrix::filled(2, 3, 0.1);
        let z = a.matmul_nt(&w).unwrap();
        let dw = delta.matmul_tn(&a).unwrap();
        let r = layer_ratios("x".into(), &w, &dw, &a, &z, &delta, Activation::Linear).unwrap();
        assert!((r.a3.unwrap() - 1.0).abs() < 1e-12);
        let single = layer_ratios("x".into(), &w, &dw, &a.clone(), &z, &delta, Activation::Linear).unwrap();
        assert_eq!(single.a3, r.a3);
    }
}
