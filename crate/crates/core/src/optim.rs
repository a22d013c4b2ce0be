//! Update rules with decoupled weight decay.
//!
//! Every rule has the form `ΔW = −η (A + λ W)`; [`direction`] returns `A`.
//! Reduced mode zeroes all momenta and accumulators, which is the setting of
//! the per-step scaling analysis. Practical mode keeps the usual buffers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    inv_frac_power, newton_schulz_orthogonalize, orthogonalize_or_zero, range_eig, spectral_norm, sym_eig,
    LinalgError, Matrix,
};
use crate::netsim::{GradientSet, NetError, ParamSet};
use crate::scaling::{LayerRole, OptimizerKind, Parameterization, ScaledHyperparams, ScalingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("matrix optimizer {opt} cannot update vector parameter {role}")]
    VectorParameter { opt: OptimizerKind, role: String },
    #[error("shape mismatch: parameter {param:?}, gradient {grad:?}")]
    Shape { param: (usize, usize), grad: (usize, usize) },
    #[error("expected {expected} hyperparameter entries, got {got}")]
    HyperparamCount { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Momentum and preconditioner settings shared by all parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    /// Momentum-free first-step rules.
    pub reduced: bool,
    /// Exact polar factor instead of Newton–Schulz.
    pub exact: bool,
    pub ns_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// SOAP preconditioner averaging.
    pub beta3: f64,
    /// Muon-family momentum.
    pub momentum: f64,
    pub nesterov: bool,
    pub sophia_gamma: f64,
    pub sophia_lag: u64,
    pub sophia_eps: f64,
    /// Rescale SSO weights back onto the spectral sphere after each step.
    pub sso_retract: bool,
}

impl StepOptions {
    pub fn reduced() -> Self {
        StepOptions {
            reduced: true,
            exact: true,
            ns_iters: 5,
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
            momentum: 0.0,
            nesterov: false,
            sophia_gamma: 0.01,
            sophia_lag: 10,
            sophia_eps: 1e-12,
            sso_retract: true,
        }
    }

    /// Momentum settings commonly used in practice for `opt`.
    pub fn practical(opt: OptimizerKind) -> Self {
        let (beta1, beta2) = match opt {
            OptimizerKind::Lion => (0.9, 0.99),
            OptimizerKind::Sophia => (0.965, 0.99),
            _ => (0.9, 0.95),
        };
        StepOptions {
            reduced: false,
            exact: false,
            beta1,
            beta2,
            beta3: 0.95,
            momentum: 0.95,
            nesterov: true,
            ..StepOptions::reduced()
        }
    }
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions::reduced()
    }
}

/// Per-parameter hyperparameters (canonical order) plus shared options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub roles: Vec<LayerRole>,
    pub hyperparams: Vec<ScaledHyperparams>,
    pub options: StepOptions,
}

impl StepConfig {
    pub fn new(p: &Parameterization, roles: &[LayerRole], options: StepOptions) -> Result<Self> {
        let hyperparams = roles.iter().map(|r| p.hyperparams(r)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(StepConfig { roles: roles.to_vec(), hyperparams, options })
    }
}

/// Buffers of one parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamState {
    pub m: Option<Matrix>,
    pub v: Option<Matrix>,
    pub h: Option<Matrix>,
    pub l: Option<Matrix>,
    pub r: Option<Matrix>,
    pub q_l: Option<Matrix>,
    pub q_r: Option<Matrix>,
    /// Steps taken by this parameter.
    pub t: u64,
}

/// Optimizer buffers for a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub params: Vec<ParamState>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        OptimizerState { kind, params: vec![ParamState::default(); params.entries().len()], t: 0 }
    }

    /// Computes `ΔW` for every parameter. `lr_scale` multiplies every η
    /// (schedules); it does not touch λ's product with η.
    pub fn step(&mut self, params: &ParamSet, grads: &GradientSet, cfg: &StepConfig, lr_scale: f64) -> Result<ParamSet> {
        let ws = params.entries();
        let gs = grads.entries();
        if cfg.hyperparams.len() != ws.len() || gs.len() != ws.len() || self.params.len() != ws.len() {
            return Err(OptimError::HyperparamCount { expected: ws.len(), got: cfg.hyperparams.len() });
        }
        let mut delta = params.zeros_like();
        {
            let mut out = delta.entries_mut();
            for (idx, ((role, w), (_, g))) in ws.iter().zip(&gs).enumerate() {
                let mut hp = cfg.hyperparams[idx];
                hp.eta *= lr_scale;
                *out[idx].1 = update(self.kind, role, w, g, &mut self.params[idx], &hp, &cfg.options)?;
            }
        }
        self.t += 1;
        Ok(delta)
    }
}

/// Applies `ΔW` and, for SSO with retraction enabled, rescales every hidden
/// matrix back to spectral norm `√(n_out/n_in)`.
pub fn apply_update(params: &mut ParamSet, delta: &ParamSet, kind: OptimizerKind, options: &StepOptions) -> Result<()> {
    params.add_scaled(1.0, delta)?;
    if kind == OptimizerKind::Sso && options.sso_retract {
        for (role, w) in params.entries_mut() {
            if !role.is_bias() {
                sso_retract(w);
            }
        }
    }
    Ok(())
}

fn check_shapes(w: &Matrix, g: &Matrix) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(OptimError::Shape { param: w.shape(), grad: g.shape() });
    }
    Ok(())
}

/// `−η (A + λ W)`.
pub fn finish(a: &Matrix, w: &Matrix, hp: &ScaledHyperparams) -> Matrix {
    let mut d = a.clone();
    if hp.lambda != 0.0 {
        d.add_scaled(hp.lambda, w).expect("same shape");
    }
    d.scale_in_place(-hp.eta);
    d
}

/// `ΔW` of one parameter.
pub fn update(
    kind: OptimizerKind,
    role: &LayerRole,
    w: &Matrix,
    g: &Matrix,
    state: &mut ParamState,
    hp: &ScaledHyperparams,
    options: &StepOptions,
) -> Result<Matrix> {
    let a = direction(kind, role, w, g, state, hp, options)?;
    Ok(finish(&a, w, hp))
}

/// The direction `A` of the update `ΔW = −η (A + λ W)`; advances `state`.
pub fn direction(
    kind: OptimizerKind,
    role: &LayerRole,
    w: &Matrix,
    g: &Matrix,
    state: &mut ParamState,
    hp: &ScaledHyperparams,
    options: &StepOptions,
) -> Result<Matrix> {
    check_shapes(w, g)?;
    if kind.is_matrix_only() && role.is_bias() {
        return Err(OptimError::VectorParameter { opt: kind, role: role.label() });
    }
    state.t += 1;
    let o = options;
    Ok(match kind {
        OptimizerKind::Sgd => g.clone(),
        OptimizerKind::AdamW => adamw_direction(g, state, hp.eps, o),
        OptimizerKind::Lion => lion_direction(g, state, o),
        OptimizerKind::Sophia => sophia_direction(g, state, o),
        OptimizerKind::Muon => orthogonal_part(&muon_input(g, state, o), o)?,
        OptimizerKind::MuonKimi => {
            let mut a = orthogonal_part(&muon_input(g, state, o), o)?;
            a.scale_in_place(kimi_factor(g));
            a
        }
        OptimizerKind::Shampoo => shampoo_direction(g, state, o)?,
        OptimizerKind::Soap => soap_direction(g, state, o)?,
        OptimizerKind::Sso => {
            let mut a = orthogonal_part(&muon_input(g, state, o), o)?;
            a.scale_in_place(sso_radius(g));
            a
        }
    })
}

/// `sign(x)` with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sign_matrix(g: &Matrix) -> Matrix {
    g.map(sign)
}

/// `0.2 √max(n_in, n_out)`.
pub fn kimi_factor(g: &Matrix) -> f64 {
    0.2 * (g.rows().max(g.cols()) as f64).sqrt()
}

/// SSO sphere radius `√(n_out/n_in)`.
pub fn sso_radius(w: &Matrix) -> f64 {
    (w.rows() as f64 / w.cols() as f64).sqrt()
}

/// Rescales `w` so that its spectral norm equals [`sso_radius`].
pub fn sso_retract(w: &mut Matrix) {
    let s = spectral_norm(w, 20_000, 1e-14).value;
    if s > 0.0 {
        w.scale_in_place(sso_radius(w) / s);
    }
}

fn orthogonal_part(g: &Matrix, o: &StepOptions) -> Result<Matrix> {
    if g.max_abs() == 0.0 {
        return Ok(Matrix::zeros(g.rows(), g.cols()));
    }
    if o.exact {
        Ok(orthogonalize_or_zero(g))
    } else {
        Ok(newton_schulz_orthogonalize(g, o.ns_iters)?)
    }
}

fn buffer<'a>(slot: &'a mut Option<Matrix>, like: &Matrix) -> &'a mut Matrix {
    slot.get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

/// Gradient fed to the Muon-family polar step: raw in reduced mode,
/// heavy-ball or Nesterov momentum otherwise.
fn muon_input(g: &Matrix, state: &mut ParamState, o: &StepOptions) -> Matrix {
    if o.reduced || o.momentum == 0.0 {
        return g.clone();
    }
    let m = buffer(&mut state.m, g);
    m.scale_in_place(o.momentum);
    m.add_scaled(1.0, g).expect("same shape");
    if o.nesterov {
        let mut eff = g.clone();
        eff.add_scaled(o.momentum, m).expect("same shape");
        eff
    } else {
        m.clone()
    }
}

fn adamw_direction(g: &Matrix, state: &mut ParamState, eps: f64, o: &StepOptions) -> Matrix {
    if o.reduced {
        return sign_matrix(g);
    }
    let t = state.t as i32;
    let m = buffer(&mut state.m, g);
    ema(m, g, o.beta1, |x| x);
    let m_hat = m.scaled(1.0 / (1.0 - o.beta1.powi(t)));
    let v = buffer(&mut state.v, g);
    ema(v, g, o.beta2, |x| x * x);
    let c2 = 1.0 / (1.0 - o.beta2.powi(t));
    let mut out = m_hat;
    for (a, &vv) in out.as_mut_slice().iter_mut().zip(v.as_slice()) {
        let denom = (vv * c2).sqrt() + eps;
        *a = if denom > 0.0 { *a / denom } else { 0.0 };
    }
    out
}

/// `buf ← β buf + (1 − β) f(g)`.
fn ema(buf: &mut Matrix, g: &Matrix, beta: f64, f: impl Fn(f64) -> f64) {
    for (b, &x) in buf.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *b = beta * *b + (1.0 - beta) * f(x);
    }
}

fn lion_direction(g: &Matrix, state: &mut ParamState, o: &StepOptions) -> Matrix {
    if o.reduced {
        return sign_matrix(g);
    }
    let m = buffer(&mut state.m, g);
    let mut u = Matrix::zeros(g.rows(), g.cols());
    for ((u, &mm), &x) in u.as_mut_slice().iter_mut().zip(m.as_slice()).zip(g.as_slice()) {
        *u = sign(o.beta1 * mm + (1.0 - o.beta1) * x);
    }
    ema(m, g, o.beta2, |x| x);
    u
}

/// Clipped preconditioned step `clip(m / max(γh, ε), 1)` with a
/// squared-gradient curvature proxy refreshed every `sophia_lag` steps.
fn sophia_direction(g: &Matrix, state: &mut ParamState, o: &StepOptions) -> Matrix {
    let (b1, b2) = if o.reduced { (0.0, 0.0) } else { (o.beta1, o.beta2) };
    let m = buffer(&mut state.m, g);
    ema(m, g, b1, |x| x);
    let m = m.clone();
    let refresh = (state.t - 1).is_multiple_of(o.sophia_lag.max(1));
    let h = buffer(&mut state.h, g);
    if refresh {
        ema(h, g, b2, |x| x * x);
    }
    let mut out = m;
    for (a, &hh) in out.as_mut_slice().iter_mut().zip(h.as_slice()) {
        let r = *a / (o.sophia_gamma * hh).max(o.sophia_eps);
        *a = r.clamp(-1.0, 1.0);
    }
    out
}

fn shampoo_direction(g: &Matrix, state: &mut ParamState, o: &StepOptions) -> Result<Matrix> {
    let ggt = g.matmul_nt(g)?;
    let gtg = g.matmul_tn(g)?;
    let (l, r) = if o.reduced {
        (ggt, gtg)
    } else {
        let l = buffer(&mut state.l, &ggt);
        l.add_scaled(1.0, &ggt)?;
        let r = buffer(&mut state.r, &gtg);
        r.add_scaled(1.0, &gtg)?;
        (l.clone(), r.clone())
    };
    let pl = inv_frac_power(&l, 0.25)?;
    let pr = inv_frac_power(&r, 0.25)?;
    Ok(pl.matmul(g)?.matmul(&pr)?)
}

/// Entries below this fraction of the largest rotated-gradient entry are
/// treated as exact zeros by the reduced SOAP sign.
const SOAP_DEAD_ZONE: f64 = 1e-9;

fn soap_direction(g: &Matrix, state: &mut ParamState, o: &StepOptions) -> Result<Matrix> {
    if g.max_abs() == 0.0 {
        return Ok(Matrix::zeros(g.rows(), g.cols()));
    }
    if o.reduced {
        let el = range_eig(&g.matmul_nt(g)?)?;
        let er = range_eig(&g.matmul_tn(g)?)?;
        let (Some(el), Some(er)) = (el, er) else {
            return Ok(Matrix::zeros(g.rows(), g.cols()));
        };
        let rotated = el.vectors.matmul_tn(g)?.matmul(&er.vectors)?;
        let cut = SOAP_DEAD_ZONE * rotated.max_abs();
        let s = rotated.map(|x| if x.abs() <= cut { 0.0 } else { sign(x) });
        return Ok(el.vectors.matmul(&s)?.matmul_nt(&er.vectors)?);
    }
    // Practical mode: EMA preconditioners, full eigenbases refreshed every
    // step, Adam moments kept in the rotated frame.
    let ggt = g.matmul_nt(g)?;
    let gtg = g.matmul_tn(g)?;
    let l = buffer(&mut state.l, &ggt);
    ema_matrix(l, &ggt, o.beta3);
    let r = buffer(&mut state.r, &gtg);
    ema_matrix(r, &gtg, o.beta3);
    let ql = sym_eig(&symmetrize(l))?.vectors;
    let qr = sym_eig(&symmetrize(r))?.vectors;
    let rotated = ql.matmul_tn(g)?.matmul(&qr)?;
    let mut inner = ParamState { m: state.m.take(), v: state.v.take(), t: state.t, ..ParamState::default() };
    let step = adamw_direction(&rotated, &mut inner, 1e-30, o);
    state.m = inner.m;
    state.v = inner.v;
    state.q_l = Some(ql.clone());
    state.q_r = Some(qr.clone());
    Ok(ql.matmul(&step)?.matmul_nt(&qr)?)
}

fn ema_matrix(buf: &mut Matrix, x: &Matrix, beta: f64) {
    buf.scale_in_place(beta);
    buf.add_scaled(1.0 - beta, x).expect("same shape");
}

fn symmetrize(s: &Matrix) -> Matrix {
    Matrix::from_fn(s.rows(), s.cols(), |i, j| 0.5 * (s[(i, j)] + s[(j, i)]))
}

pub fn sgd_step(w: &Matrix, g: &Matrix, hp: &ScaledHyperparams) -> Result<Matrix> {
    check_shapes(w, g)?;
    Ok(finish(g, w, hp))
}

pub fn adamw_step(w: &Matrix, g: &Matrix, state: &mut ParamState, hp: &ScaledHyperparams, options: &StepOptions) -> Result<Matrix> {
    check_shapes(w, g)?;
    state.t += 1;
    Ok(finish(&adamw_direction(g, state, hp.eps, options), w, hp))
}

pub fn lion_step(w: &Matrix, g: &Matrix, state: &mut ParamState, hp: &ScaledHyperparams, options: &StepOptions) -> Result<Matrix> {
    check_shapes(w, g)?;
    state.t += 1;
    Ok(finish(&lion_direction(g, state, options), w, hp))
}

pub fn sophia_step(w: &Matrix, g: &Matrix, state: &mut ParamState, hp: &ScaledHyperparams, options: &StepOptions) -> Result<Matrix> {
    check_shapes(w, g)?;
    state.t += 1;
    Ok(finish(&sophia_direction(g, state, options), w, hp))
}

fn matrix_step(kind: OptimizerKind, w: &Matrix, g: &Matrix, state: &mut ParamState, hp: &ScaledHyperparams, options: &StepOptions) -> Result<Matrix> {
    if w.rows() == 1 || w.cols() == 1 {
        return Err(OptimError::VectorParameter { opt: kind, role: format!("{}x{}", w.rows(), w.cols()) });
    }
    let role = LayerRole::hidden(1, 1, w.cols(), w.rows());
    update(kind, &role, w, g, state, hp, options)
}

pub fn muon_step(w: &Matrix, g: &Matrix, hp: &ScaledHyperparams, exact: bool) -> Result<Matrix> {
    let o = StepOptions { exact, ..StepOptions::reduced() };
    matrix_step(OptimizerKind::Muon, w, g, &mut ParamState::default(), hp, &o)
}

pub fn muon_kimi_step(w: &Matrix, g: &Matrix, hp: &ScaledHyperparams, exact: bool) -> Result<Matrix> {
    let o = StepOptions { exact, ..StepOptions::reduced() };
    matrix_step(OptimizerKind::MuonKimi, w, g, &mut ParamState::default(), hp, &o)
}

pub fn shampoo_step(w: &Matrix, g: &Matrix, state: &mut ParamState, hp: &ScaledHyperparams, options: &StepOptions) -> Result<Matrix> {
    matrix_step(OptimizerKind::Shampoo, w, g, state, hp, options)
}

pub fn soap_step(w: &Matrix, g: &Matrix, state: &mut ParamState, hp: &ScaledHyperparams, options: &StepOptions) -> Result<Matrix> {
    matrix_step(OptimizerKind::Soap, w, g, state, hp, options)
}

/// SSO update `−η(A + λW)` without retraction; see [`sso_retract`].
pub fn sso_step(w: &Matrix, g: &Matrix, hp: &ScaledHyperparams) -> Result<Matrix> {
    matrix_step(OptimizerKind::Sso, w, g, &mut ParamState::default(), hp, &StepOptions::reduced())
}

/// Scales `grads` so that their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup over `warmup` steps, then cosine decay from 1 to `floor`
/// at the final step. `step` is 0-based.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, floor: f64) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / (span.saturating_sub(1).max(1)) as f64).min(1.0);
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, rms_op_norm, RandomSource};

    fn hp(eta: f64, lambda: f64) -> ScaledHyperparams {
        ScaledHyperparams { alpha: 1.0, sigma2: 1.0, eta, lambda, eps: 0.0 }
    }

    fn rel_dev(a: &Matrix, b: &Matrix) -> f64 {
        a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let d = sgd_step(&Matrix::column(&[2.0]), &Matrix::column(&[0.5]), &hp(0.1, 0.1)).unwrap();
        assert!((d[(0, 0)] + 0.07).abs() < 1e-15);
        let g = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        assert_eq!(sgd_step(&Matrix::zeros(1, 2), &g, &hp(1.0, 0.0)).unwrap(), g.scaled(-1.0));
    }

    #[test]
    fn reduced_adamw_is_sign_descent() {
        let g = Matrix::from_rows(&[vec![-3.0, 0.2]]).unwrap();
        let d = adamw_step(&Matrix::zeros(1, 2), &g, &mut ParamState::default(), &hp(1.0, 0.0), &StepOptions::reduced()).unwrap();
        assert_eq!(d.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn full_adamw_without_momentum_matches_reduced() {
        let mut rng = RandomSource::new(3);
        let g = gaussian_matrix(5, 4, 1.0, &mut rng);
        let w = gaussian_matrix(5, 4, 1.0, &mut rng);
        let o = StepOptions { reduced: false, beta1: 0.0, beta2: 0.0, ..StepOptions::reduced() };
        let full = adamw_step(&w, &g, &mut ParamState::default(), &hp(0.3, 0.1), &o).unwrap();
        let red = adamw_step(&w, &g, &mut ParamState::default(), &hp(0.3, 0.1), &StepOptions::reduced()).unwrap();
        assert!(full.max_abs_diff(&red).unwrap() <= 1e-12);
    }

    #[test]
    fn sign_of_positive_gradient_has_norm_n_in() {
        let g = Matrix::filled(6, 10, 0.3);
        assert!((rms_op_norm(&sign_matrix(&g)) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn lion_degenerate_momentum_gives_zero_sign() {
        let o = StepOptions { reduced: false, beta1: 1.0, beta2: 0.99, ..StepOptions::reduced() };
        let w = Matrix::filled(2, 2, 1.0);
        let g = Matrix::filled(2, 2, 5.0);
        let d = lion_step(&w, &g, &mut ParamState::default(), &hp(0.5, 0.2), &o).unwrap();
        assert_eq!(d, w.scaled(-0.5 * 0.2));
    }

    #[test]
    fn sophia_clip_regimes() {
        let mut rng = RandomSource::new(4);
        let g = gaussian_matrix(4, 3, 1.0, &mut rng);
        let w = Matrix::zeros(4, 3);
        let saturated = StepOptions { sophia_gamma: 0.0, ..StepOptions::reduced() };
        let d = sophia_step(&w, &g, &mut ParamState::default(), &hp(1.0, 0.0), &saturated).unwrap();
        assert_eq!(d, sign_matrix(&g).scaled(-1.0));
        let soft = StepOptions { sophia_gamma: 1e6, ..StepOptions::reduced() };
        let d = sophia_step(&w, &g, &mut ParamState::default(), &hp(1.0, 0.0), &soft).unwrap();
        assert!(d.max_abs() < 1.0);
        for ((&dd, &gg), _) in d.as_slice().iter().zip(g.as_slice()).zip(0..) {
            assert!((dd + gg / (1e6 * gg * gg)).abs() <= 1e-15 * (1.0 + dd.abs()));
        }
    }

    #[test]
    fn sophia_refreshes_curvature_on_lag() {
        let o = StepOptions { sophia_lag: 3, ..StepOptions::practical(OptimizerKind::Sophia) };
        let mut st = ParamState::default();
        let g = Matrix::filled(2, 2, 1.0);
        let role = LayerRole::hidden(1, 1, 2, 2);
        let mut seen = Vec::new();
        for _ in 0..4 {
            direction(OptimizerKind::Sophia, &role, &g, &g, &mut st, &hp(1.0, 0.0), &o).unwrap();
            seen.push(st.h.as_ref().unwrap()[(0, 0)]);
        }
        assert_eq!(seen[1], seen[0]);
        assert_eq!(seen[2], seen[0]);
        assert!(seen[3] > seen[0]);
    }

    #[test]
    fn muon_examples() {
        let g = Matrix::from_diag(&[3.0, 5.0]);
        let d = muon_step(&Matrix::zeros(2, 2), &g, &hp(1.0, 0.0), true).unwrap();
        assert!(d.max_abs_diff(&Matrix::identity(2).scaled(-1.0)).unwrap() < 1e-14);
        let d = muon_kimi_step(&Matrix::zeros(2, 2), &g, &hp(1.0, 0.0), true).unwrap();
        let expected = Matrix::identity(2).scaled(-0.2 * 2f64.sqrt());
        assert!(d.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn muon_direction_norms() {
        let mut rng = RandomSource::new(5);
        let g = gaussian_matrix(12, 8, 1.0, &mut rng);
        let a = muon_step(&Matrix::zeros(12, 8), &g, &hp(-1.0, 0.0), true).unwrap();
        assert!((rms_op_norm(&a) - (8.0f64 / 12.0).sqrt()).abs() < 1e-9);
        let g = gaussian_matrix(16, 16, 1.0, &mut rng);
        let a = muon_kimi_step(&Matrix::zeros(16, 16), &g, &hp(-1.0, 0.0), true).unwrap();
        assert!((rms_op_norm(&a) - 0.2 * 4.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_optimizers_reject_vectors() {
        let v = Matrix::column(&[1.0, 2.0, 3.0]);
        assert!(matches!(muon_step(&v, &v, &hp(1.0, 0.0), true), Err(OptimError::VectorParameter { .. })));
        let role = LayerRole::hidden_bias(1, 1, 3);
        let r = direction(OptimizerKind::Soap, &role, &v, &v, &mut ParamState::default(), &hp(1.0, 0.0), &StepOptions::reduced());
        assert!(matches!(r, Err(OptimError::VectorParameter { .. })));
        let r = direction(OptimizerKind::AdamW, &role, &v, &v, &mut ParamState::default(), &hp(1.0, 0.0), &StepOptions::reduced());
        assert!(r.is_ok());
    }

    #[test]
    fn shampoo_and_soap_match_muon_on_random_gradients() {
        let mut rng = RandomSource::new(6);
        let w = Matrix::zeros(12, 8);
        for _ in 0..20 {
            let g = gaussian_matrix(12, 8, 1.0, &mut rng);
            let muon = muon_step(&w, &g, &hp(1.0, 0.0), true).unwrap();
            let o = StepOptions::reduced();
            let sh = shampoo_step(&w, &g, &mut ParamState::default(), &hp(1.0, 0.0), &o).unwrap();
            let so = soap_step(&w, &g, &mut ParamState::default(), &hp(1.0, 0.0), &o).unwrap();
            assert!(rel_dev(&sh, &muon) <= 1e-6, "shampoo {}", rel_dev(&sh, &muon));
            assert!(rel_dev(&so, &muon) <= 1e-6, "soap {}", rel_dev(&so, &muon));
        }
    }

    #[test]
    fn shampoo_rank_deficient_gradient_is_partial_isometry() {
        let mut rng = RandomSource::new(7);
        let a = gaussian_matrix(10, 2, 1.0, &mut rng);
        let b = gaussian_matrix(2, 6, 1.0, &mut rng);
        let g = a.matmul(&b).unwrap();
        let d = shampoo_step(&Matrix::zeros(10, 6), &g, &mut ParamState::default(), &hp(-1.0, 0.0), &StepOptions::reduced()).unwrap();
        let p = d.matmul_tn(&d).unwrap();
        // DᵀD is the orthogonal projector onto the 2-dimensional row space.
        assert!(p.matmul(&p).unwrap().max_abs_diff(&p).unwrap() < 1e-8);
        assert!((p.trace() - 2.0).abs() < 1e-8);
        assert!(d.max_abs_diff(&orthogonalize_or_zero(&g)).unwrap() < 1e-8);
    }

    #[test]
    fn soap_diagonal_gradient_gives_identity_pattern() {
        let g = Matrix::from_diag(&[4.0, 2.0, 1.0]);
        let d = soap_step(&Matrix::zeros(3, 3), &g, &mut ParamState::default(), &hp(-1.0, 0.0), &StepOptions::reduced()).unwrap();
        assert!(d.max_abs_diff(&Matrix::identity(3)).unwrap() < 1e-12);
    }

    #[test]
    fn soap_rank_r_sign_has_r_unit_singular_values() {
        let mut rng = RandomSource::new(8);
        let g = gaussian_matrix(9, 3, 1.0, &mut rng).matmul(&gaussian_matrix(3, 7, 1.0, &mut rng)).unwrap();
        let d = soap_step(&Matrix::zeros(9, 7), &g, &mut ParamState::default(), &hp(-1.0, 0.0), &StepOptions::reduced()).unwrap();
        let eig = crate::linalg::sym_eig(&d.matmul_tn(&d).unwrap()).unwrap();
        let ones = eig.values.iter().filter(|&&v| (v - 1.0).abs() < 1e-8).count();
        let zeros = eig.values.iter().filter(|&&v| v.abs() < 1e-8).count();
        assert_eq!((ones, zeros), (3, 4));
    }

    #[test]
    fn sso_direction_and_retraction() {
        let mut rng = RandomSource::new(9);
        let g = gaussian_matrix(6, 10, 1.0, &mut rng);
        let mut st = ParamState::default();
        let role = LayerRole::hidden(1, 1, 10, 6);
        let a = direction(OptimizerKind::Sso, &role, &g, &g, &mut st, &hp(1.0, 0.0), &StepOptions::reduced()).unwrap();
        assert!((rms_op_norm(&a) - 1.0).abs() < 1e-8);

        let mut w = gaussian_matrix(6, 10, 1.0, &mut rng);
        sso_retract(&mut w);
        let before = w.clone();
        let d = sso_step(&w, &g, &hp(0.0, 0.3)).unwrap();
        w.add_scaled(1.0, &d).unwrap();
        sso_retract(&mut w);
        assert!(w.max_abs_diff(&before).unwrap() < 1e-10);

        let d = sso_step(&w, &g, &hp(0.05, 0.1)).unwrap();
        w.add_scaled(1.0, &d).unwrap();
        sso_retract(&mut w);
        let s = spectral_norm(&w, 20_000, 1e-14).value;
        assert!((s - (6.0f64 / 10.0).sqrt()).abs() < 1e-8);
    }

    #[test]
    fn practical_modes_run_and_stay_finite() {
        let mut rng = RandomSource::new(10);
        let role = LayerRole::hidden(1, 1, 6, 5);
        for kind in OptimizerKind::ALL {
            let mut st = ParamState::default();
            let o = StepOptions::practical(kind);
            let w = gaussian_matrix(5, 6, 1.0, &mut rng);
            for _ in 0..3 {
                let g = gaussian_matrix(5, 6, 1.0, &mut rng);
                let d = update(kind, &role, &w, &g, &mut st, &hp(0.01, 0.1), &o).unwrap();
                assert!(d.is_finite(), "{kind}");
            }
            assert_eq!(st.t, 3);
        }
    }

    #[test]
    fn schedule_shape() {
        assert!((warmup_cosine(0, 100, 10, 0.1) - 0.1).abs() < 1e-15);
        assert!((warmup_cosine(9, 100, 10, 0.1) - 1.0).abs() < 1e-15);
        assert!((warmup_cosine(10, 100, 10, 0.1) - 1.0).abs() < 1e-15);
        assert!((warmup_cosine(99, 100, 10, 0.1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let arch = crate::netsim::ArchSpec::linear(2, 3, 1, 1);
        let mut g = ParamSet::zeros(&arch).map(|m| Matrix::filled(m.rows(), m.cols(), 1.0));
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
