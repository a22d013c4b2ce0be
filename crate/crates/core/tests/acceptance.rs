//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails. Pass criterion ids (`ac3`, `ac7`, ...) to run a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use wdmup::diagnostics::{
    audit_update_orders, coord_check, measure_sweep, run_assumption_protocol, verify_assumption_1,
    verify_assumption_2, verify_assumption_3, verify_second_order_auto, CoordCheckConfig, ModelSpec, SweepConfig,
};
use wdmup::harness::{
    assumption_protocol, claim_checks, equivalence_check, run_experiment, transfer_sweep, write_outputs,
    DatasetKind, DatasetSpec, ExperimentConfig, ExperimentKind, OutputFormat,
};
use wdmup::linalg::{gaussian_matrix, orthogonalize, spectral_norm, sym_eig};
use wdmup::scaling::{
    check_init_condition, check_update_condition, BaseHyperparams, BiasInit, DepthConvention, InputModality,
    LayerRole, OptimizerKind, ParamKind, Parameterization, ScaleRatios,
};
use wdmup::{ArchSpec, Axis, Loss, Matrix, RandomSource, ResidualNet, Verdict};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { id: "ac1", title: "hyperparameter tables", budget: secs(1), run: ac1_tables },
        Criterion { id: "ac2", title: "optimizer equivalences", budget: secs(10), run: ac2_equivalences },
        Criterion { id: "ac3", title: "update-order audit", budget: secs(120), run: ac3_audit },
        Criterion { id: "ac4", title: "spectral conditions", budget: secs(180), run: ac4_conditions },
        Criterion { id: "ac5", title: "second-order auto-satisfaction", budget: secs(60), run: ac5_second_order },
        Criterion { id: "ac6", title: "coordinate check", budget: secs(180), run: ac6_coordcheck },
        Criterion { id: "ac7", title: "learning-rate transfer", budget: secs(1200), run: ac7_transfer },
        Criterion { id: "ac8", title: "feature-update claims", budget: secs(60), run: ac8_claims },
        Criterion { id: "ac9", title: "assumptions 1-3", budget: secs(600), run: ac9_assumptions },
        Criterion { id: "ac10", title: "numerics", budget: secs(60), run: ac10_numerics },
        Criterion { id: "ac11", title: "determinism", budget: None, run: ac11_determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == c.id) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let over = c.budget.is_some_and(|b| elapsed > b);
        let pass = outcome.pass && !over;
        if !pass {
            failed += 1;
        }
        let budget = c.budget.map_or("no limit".to_string(), |b| format!("limit {}s", b.as_secs()));
        let timing = if over { " OVER TIME" } else { "" };
        println!(
            "{:<5} {:<32} {} ({:.1}s, {budget}{timing}) {}",
            c.id.to_uppercase(),
            c.title,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            outcome.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// AC1
// ---------------------------------------------------------------------------

/// Evaluates table entries such as `eta/sqrt(rn)` or `lam/(L*rn)` left to
/// right, exactly as written.
struct Expr<'a> {
    s: &'a [u8],
    pos: usize,
    vars: &'a [(&'a str, f64)],
}

impl Expr<'_> {
    fn eval(text: &str, vars: &[(&str, f64)]) -> f64 {
        let mut e = Expr { s: text.as_bytes(), pos: 0, vars };
        let v = e.product();
        assert_eq!(e.pos, e.s.len(), "trailing input in {text}");
        v
    }

    fn product(&mut self) -> f64 {
        let mut v = self.atom();
        while self.pos < self.s.len() && matches!(self.s[self.pos], b'*' | b'/') {
            let op = self.s[self.pos];
            self.pos += 1;
            let rhs = self.atom();
            v = if op == b'*' { v * rhs } else { v / rhs };
        }
        v
    }

    fn atom(&mut self) -> f64 {
        if self.s[self.pos] == b'(' {
            self.pos += 1;
            let v = self.product();
            self.pos += 1;
            return v;
        }
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
        if name == "sqrt" {
            self.pos += 1;
            let v = self.product();
            self.pos += 1;
            return v.sqrt();
        }
        self.vars.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("unknown symbol {name}")).1
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Col {
    In,
    InBias,
    Hid,
    Out,
    HidBias,
}

/// `(alpha, sigma2, eta, lambda, eps)` as written in the μP tables. `None`
/// marks a column absent from the optimizer's table.
fn mup_entry(opt: OptimizerKind, col: Col) -> Option<[&'static str; 5]> {
    use Col::*;
    use OptimizerKind::*;
    let alpha = match col {
        In | InBias => "a",
        Hid | HidBias => "a/rL",
        Out => "a/rn",
    };
    let sigma2 = match col {
        In => "sin",
        Hid => "s/rn",
        Out | InBias | HidBias => "s",
    };
    let eps = match col {
        Hid | HidBias => "e/(L*rn)",
        _ => "e/rn",
    };
    let (eta, lam) = match (opt, col) {
        (MuonKimi | Muon | Shampoo | Soap | Sso, InBias | HidBias) => return None,
        (MuonKimi, Hid) => ("eta/sqrt(rn)", "lam*sqrt(rn)"),
        (MuonKimi, _) => ("eta", "lam"),
        (Muon | Shampoo | Soap, Hid) => ("eta", "lam"),
        (Muon | Shampoo | Soap, _) => ("eta*sqrt(rn)", "lam/sqrt(rn)"),
        (Sso, Out) => ("eta*rn", "lam/rn"),
        (Sso, _) => ("eta", "lam"),
        (Sgd, Hid) => ("eta*L", "lam/L"),
        (Sgd, HidBias) => ("eta*L*rn", "lam/(L*rn)"),
        (Sgd, _) => ("eta*rn", "lam/rn"),
        (AdamW | Lion | Sophia, Hid) => ("eta/rn", "lam*rn"),
        (AdamW | Lion | Sophia, _) => ("eta", "lam"),
    };
    Some([alpha, sigma2, eta, lam, eps])
}

/// The gray (SP) entries.
fn sp_entry(col: Col) -> [&'static str; 5] {
    let sigma2 = match col {
        Col::In => "sin",
        Col::Hid | Col::Out => "s/rn",
        _ => "s",
    };
    ["a", sigma2, "eta", "lam", "e"]
}

fn ac1_tables() -> Outcome {
    use OptimizerKind::*;
    let opts = [Sgd, AdamW, Lion, Sophia, Muon, MuonKimi, Shampoo, Soap, Sso];
    let base = BaseHyperparams { alpha_base: 1.5, sigma2_base: 0.0004, eta_base: 0.02, lambda_base: 0.1, eps_base: 1e-8 };
    let (n0, l0, d0, d_out) = (64usize, 4usize, 12usize, 3usize);
    let mut checked = 0usize;
    let mut mismatches = Vec::new();
    for opt in opts {
        for param in [ParamKind::MuP, ParamKind::StandardParam] {
            for conv in [DepthConvention::Ratio, DepthConvention::Absolute] {
                for modality in [InputModality::Dense, InputModality::OneHot] {
                    for rn in [1usize, 2, 4, 16] {
                        for rl in [1usize, 2, 8] {
                            let (n, l) = (n0 * rn, l0 * rl);
                            let ratios = ScaleRatios::new(n, n0, l, l0).unwrap();
                            let p = Parameterization::new(opt, param, base, ratios)
                                .with_convention(conv)
                                .with_modality(modality)
                                .with_bias_init(BiasInit::Gaussian);
                            let depth_symbol = match conv {
                                DepthConvention::Ratio => rl as f64,
                                DepthConvention::Absolute => l as f64,
                            };
                            let sin = match modality {
                                InputModality::Dense => base.sigma2_base / d0 as f64,
                                InputModality::OneHot => base.sigma2_base,
                            };
                            let vars = [
                                ("a", base.alpha_base),
                                ("s", base.sigma2_base),
                                ("sin", sin),
                                ("eta", base.eta_base),
                                ("lam", base.lambda_base),
                                ("e", base.eps_base),
                                ("rn", rn as f64),
                                ("rL", rl as f64),
                                ("L", depth_symbol),
                            ];
                            let roles = [
                                (Col::In, LayerRole::input(d0, n)),
                                (Col::InBias, LayerRole::input_bias(n)),
                                (Col::Hid, LayerRole::hidden(1, 1, n, n)),
                                (Col::Out, LayerRole::output(n, d_out)),
                                (Col::HidBias, LayerRole::hidden_bias(1, 1, n)),
                            ];
                            for (col, role) in roles {
                                let entry = match param {
                                    ParamKind::MuP => mup_entry(opt, col),
                                    ParamKind::StandardParam => mup_entry(opt, col).map(|_| sp_entry(col)),
                                };
                                let got = p.hyperparams(&role);
                                let Some(entry) = entry else {
                                    if got.is_ok() {
                                        mismatches.push(format!("{opt} {role}: expected rejection"));
                                    }
                                    continue;
                                };
                                let Ok(hp) = got else {
                                    mismatches.push(format!("{opt} {role}: unexpected error"));
                                    continue;
                                };
                                let values = [hp.alpha, hp.sigma2, hp.eta, hp.lambda, hp.eps];
                                let names = ["alpha", "sigma2", "eta", "lambda", "eps"];
                                for k in 0..5 {
                                    // ε only appears in the AdamW table.
                                    if k == 4 && opt != AdamW {
                                        continue;
                                    }
                                    let want = Expr::eval(entry[k], &vars);
                                    checked += 1;
                                    if values[k] != want {
                                        mismatches.push(format!(
                                            "{opt} {} {role} {} r_n={rn} r_L={rl}: {} vs {want}",
                                            param.name(),
                                            names[k],
                                            values[k]
                                        ));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let detail = match mismatches.first() {
        None => format!("{checked} entries equal"),
        Some(m) => format!("{} of {checked} entries differ, first: {m}", mismatches.len()),
    };
    Outcome::new(mismatches.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// AC2
// ---------------------------------------------------------------------------

fn ac2_equivalences() -> Outcome {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut pass = true;
    for shape in [(12, 8), (8, 12), (16, 16)] {
        let r = match equivalence_check(7, shape, 100) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        pass &= r.shampoo_vs_muon <= 1e-6 && r.soap_vs_muon <= 1e-6 && r.lion_vs_adamw == 0.0;
        worst = (worst.0.max(r.shampoo_vs_muon), worst.1.max(r.soap_vs_muon), worst.2.max(r.lion_vs_adamw));
    }
    Outcome::new(
        pass,
        format!("300 gradients: shampoo/muon {:.1e}, soap/muon {:.1e}, lion/adamw {:.1e}", worst.0, worst.1, worst.2),
    )
}

// ---------------------------------------------------------------------------
// Shared model setups
// ---------------------------------------------------------------------------

const WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
const DEPTHS: [usize; 6] = [4, 8, 16, 32, 64, 128];
const SEEDS: [u64; 3] = [0, 1, 2];

fn teacher(d0: usize, d_out: usize) -> DatasetSpec {
    DatasetSpec { kind: DatasetKind::GaussianTeacher, d0, d_out, separation: 2.0 }
}

fn linear_model(opt: OptimizerKind, param: ParamKind, width: usize, depth: usize, eta: f64) -> ModelSpec {
    let base = BaseHyperparams { alpha_base: 1.0, sigma2_base: 1.0, eta_base: eta, lambda_base: 0.0, eps_base: 1e-16 };
    let mut m = ModelSpec::new(ArchSpec::linear(16, width, 4, depth), opt, param, base);
    m.base_width = 1;
    m.base_depth = 1;
    m.batch_size = 32;
    m
}

fn slope_of(fit: &Option<wdmup::ScalingFit>) -> String {
    fit.as_ref().map_or("n/a".into(), |f| format!("{:+.2}", f.slope))
}

// ---------------------------------------------------------------------------
// AC3
// ---------------------------------------------------------------------------

fn ac3_audit() -> Outcome {
    use OptimizerKind::*;
    let expected = [
        (AdamW, 1.0),
        (Lion, 1.0),
        (Sophia, 1.0),
        (MuonKimi, 0.5),
        (Muon, 0.0),
        (Shampoo, 0.0),
        (Soap, 0.0),
        (Sso, 0.0),
        (Sgd, 0.0),
    ];
    let data = teacher(16, 4);
    let mut pass = true;
    let mut parts = Vec::new();
    for (opt, want) in expected {
        let model = linear_model(opt, ParamKind::MuP, WIDTHS[0], 4, 0.01);
        let checks = match audit_update_orders(&model, &WIDTHS, &SEEDS, &data) {
            Ok(c) => c,
            Err(e) => return Outcome::new(false, format!("{opt}: {e}")),
        };
        let hidden = checks.iter().find(|c| c.name.ends_with("hidden")).expect("hidden fit");
        let ok = hidden.fit.as_ref().is_some_and(|f| (f.slope - want).abs() <= 0.15 && f.seeds_averaged >= 3);
        pass &= ok;
        parts.push(format!("{opt} {}{}", slope_of(&hidden.fit), if ok { "" } else { "!" }));
    }
    Outcome::new(pass, format!("hidden slopes: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// AC4
// ---------------------------------------------------------------------------

type SweepItems = Vec<(Axis, Vec<(String, Verdict, Option<f64>)>)>;

fn condition_sweeps(param: ParamKind) -> Result<SweepItems, String> {
    let data = teacher(16, 4);
    let model = linear_model(OptimizerKind::MuonKimi, param, 64, 4, 0.02);
    let mut out = Vec::new();
    for (axis, sizes) in [(Axis::Width, WIDTHS.to_vec()), (Axis::Depth, DEPTHS.to_vec())] {
        let cfg = SweepConfig { model: model.clone(), axis, sizes, seeds: SEEDS.to_vec(), take_step: true };
        let sweep = measure_sweep(&cfg, &data).map_err(|e| e.to_string())?;
        let mut items = Vec::new();
        for r in [check_init_condition(&sweep, 2), check_update_condition(&sweep, 2)] {
            let r = r.map_err(|e| e.to_string())?;
            for i in r.items {
                items.push((i.name, i.verdict, i.fit.map(|f| f.slope)));
            }
        }
        out.push((axis, items));
    }
    Ok(out)
}

fn ac4_conditions() -> Outcome {
    let mup = match condition_sweeps(ParamKind::MuP) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, e),
    };
    let sp = match condition_sweeps(ParamKind::StandardParam) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, e),
    };
    let mut pass = true;
    let mut notes = Vec::new();
    for (axis, items) in &mup {
        for (name, verdict, slope) in items {
            let relevant = match axis {
                Axis::Width => name.starts_with("C1.1") || name.starts_with("C2.1"),
                Axis::Depth => name.starts_with("C1.2") || name.starts_with("C2.2") || name.starts_with("C2.3"),
            };
            if !relevant {
                continue;
            }
            if *verdict != Verdict::Pass {
                pass = false;
                notes.push(format!("muP {name} vs {axis}: {verdict} ({slope:?})"));
            }
        }
    }
    let (_, sp_depth) = sp.iter().find(|(a, _)| *a == Axis::Depth).unwrap();
    let sp_fail: Vec<&String> = sp_depth
        .iter()
        .filter(|(n, v, _)| (n.starts_with("C1.2") || n.starts_with("C2.2")) && *v == Verdict::Fail)
        .map(|(n, _, _)| n)
        .collect();
    let expected_sp = sp_depth.iter().filter(|(n, _, _)| n.starts_with("C1.2") || n.starts_with("C2.2")).count();
    if sp_fail.len() != expected_sp {
        pass = false;
        notes.push(format!("SP: only {} of {expected_sp} depth checks fail", sp_fail.len()));
    }
    let depth_slopes: Vec<String> = mup
        .iter()
        .find(|(a, _)| *a == Axis::Depth)
        .unwrap()
        .1
        .iter()
        .filter(|(n, _, _)| !n.starts_with("C1.1") && !n.starts_with("C2.1"))
        .map(|(n, _, s)| format!("{n} {:+.2}", s.unwrap_or(f64::NAN)))
        .collect();
    let detail = if notes.is_empty() {
        format!("muP depth slopes [{}]; SP fails {} checks", depth_slopes.join(", "), sp_fail.len())
    } else {
        notes.join("; ")
    };
    Outcome::new(pass, detail)
}

// ---------------------------------------------------------------------------
// AC5
// ---------------------------------------------------------------------------

fn ac5_second_order() -> Outcome {
    let data = teacher(16, 4);
    let run = |hold: bool| {
        let mut model = linear_model(OptimizerKind::MuonKimi, ParamKind::MuP, 64, 4, 0.02);
        model.hold_alpha_constant = hold;
        let cfg = SweepConfig { model, axis: Axis::Depth, sizes: DEPTHS.to_vec(), seeds: SEEDS.to_vec(), take_step: true };
        verify_second_order_auto(&cfg, &data)
    };
    match (run(false), run(true)) {
        (Ok(mup), Ok(held)) => Outcome::new(
            mup.verdict == Verdict::Pass && held.verdict == Verdict::Fail,
            format!(
                "muP slope {} ({}), constant alpha slope {} ({})",
                slope_of(&mup.fit),
                mup.verdict,
                slope_of(&held.fit),
                held.verdict
            ),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// AC6
// ---------------------------------------------------------------------------

fn coord_cfg(param: ParamKind, axis: Axis) -> CoordCheckConfig {
    let sizes = match axis {
        Axis::Width => WIDTHS.to_vec(),
        Axis::Depth => DEPTHS.to_vec(),
    };
    CoordCheckConfig {
        model: linear_model(OptimizerKind::MuonKimi, param, 64, 4, 0.1),
        axis,
        sizes,
        seeds: SEEDS.to_vec(),
        steps: 10,
        record_params: false,
        delta_from_init: false,
        band: 4.0,
    }
}

fn ac6_coordcheck() -> Outcome {
    let data = teacher(16, 4);
    let mut notes = Vec::new();
    let mut pass = true;
    for axis in [Axis::Width, Axis::Depth] {
        match coord_check(&coord_cfg(ParamKind::MuP, axis), &data) {
            Ok(r) => {
                let ok = r.verdict == Verdict::Pass && r.worst_spread() <= 4.0;
                pass &= ok;
                notes.push(format!("muP {axis} spread {:.2} {}", r.worst_spread(), r.verdict));
            }
            Err(e) => return Outcome::new(false, e.to_string()),
        }
    }
    match coord_check(&coord_cfg(ParamKind::StandardParam, Axis::Width), &data) {
        Ok(r) => {
            let slope = r.fit(10, "h_L").and_then(|f| f.check.fit.as_ref()).map(|f| f.slope);
            let ok = slope.is_some_and(|s| s > 0.3);
            pass &= ok;
            notes.push(format!("SP width slope {}", slope.map_or("n/a".into(), |s| format!("{s:+.2}"))));
        }
        Err(e) => return Outcome::new(false, e.to_string()),
    }
    match coord_check(&coord_cfg(ParamKind::StandardParam, Axis::Depth), &data) {
        Ok(r) => {
            let deep: Vec<_> = r.records.iter().filter(|x| x.depth >= 128).collect();
            let diverged = deep.iter().any(|x| x.diverged);
            let min_shallow = r
                .records
                .iter()
                .filter(|x| x.depth == DEPTHS[0])
                .map(|x| x.h_last())
                .fold(f64::INFINITY, f64::min);
            let max_deep = deep.iter().map(|x| x.h_last()).fold(0.0, f64::max);
            let ratio = max_deep / min_shallow;
            let ok = diverged || ratio.is_nan() || ratio > 4.0;
            pass &= ok;
            notes.push(format!("SP L=128 diverged={diverged} ratio to L=4 {ratio:.3e}"));
        }
        Err(e) => return Outcome::new(false, e.to_string()),
    }
    Outcome::new(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// AC7
// ---------------------------------------------------------------------------

fn transfer_config(param: ParamKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Transfer);
    cfg.model.param = param;
    cfg.seeds = SEEDS.to_vec();
    cfg
}

fn ac7_transfer() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let runs = [
        (ParamKind::MuP, Axis::Width, "muP width", true),
        (ParamKind::MuP, Axis::Depth, "muP depth", true),
        (ParamKind::StandardParam, Axis::Width, "SP width", false),
    ];
    for (param, axis, label, want_transfer) in runs {
        let cfg = transfer_config(param);
        let r = match transfer_sweep(&cfg, axis) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("{label}: {e}")),
        };
        let best: Vec<String> =
            r.optima.iter().map(|o| o.best_exponent.map_or("-".into(), |e| e.to_string())).collect();
        let ok = match (r.shift, want_transfer) {
            (Some(s), true) => s <= 1 && r.optima.iter().all(|o| !o.at_edge),
            (Some(s), false) => s >= 2,
            (None, _) => false,
        };
        pass &= ok;
        notes.push(format!("{label} optima [{}] shift {}", best.join(","), r.shift.map_or("n/a".into(), |s| s.to_string())));
    }
    Outcome::new(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// AC8
// ---------------------------------------------------------------------------

fn ac8_claims() -> Outcome {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Verify);
    cfg.seeds = SEEDS.to_vec();
    match claim_checks(&cfg) {
        Ok(c) => {
            let lo = c.claim1.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            let hi = c.claim1.iter().map(|x| x.2).fold(0.0, f64::max);
            let pass = c.claim2_gap <= 1e-8 && c.rank_one_gap <= 1e-8 && lo >= 0.2 && hi <= 1.0;
            Outcome::new(
                pass,
                format!("claim 1 ratio in [{lo:.3}, {hi:.3}], claim 2 gap {:.1e}, rank-one gap {:.1e}", c.claim2_gap, c.rank_one_gap),
            )
        }
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// AC9
// ---------------------------------------------------------------------------

/// The full-size run (n = 256) needs about 40 minutes on one core; a
/// narrower network keeps every other setting and fits the budget.
const APPG_WIDTH: usize = 64;

fn ac9_assumptions() -> Outcome {
    let (proto, data) = assumption_protocol(APPG_WIDTH, 3072, vec![4, 8, 16, 32, 64, 128, 256], 200, 200, SEEDS.to_vec());
    let trace = match run_assumption_protocol(&proto, &data) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let [a1w, a1f] = verify_assumption_1(&trace);
    let reports = [a1w, a1f, verify_assumption_2(&trace), verify_assumption_3(&trace)];
    let pass = reports.iter().all(|r| r.verdict == Verdict::Pass);
    let parts: Vec<String> = reports
        .iter()
        .map(|r| {
            let lo = r.stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
            let hi = r.stats.iter().map(|s| s.max).fold(0.0, f64::max);
            format!("{} [{lo:.3}, {hi:.3}] {}", r.id.name(), r.verdict)
        })
        .collect();
    Outcome::new(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// AC10
// ---------------------------------------------------------------------------

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn ac10_numerics() -> Outcome {
    let mut rng = RandomSource::new(2024);
    let mut worst_eig = 0.0f64;
    let mut worst_polar = 0.0f64;
    let mut worst_norm = 0.0f64;
    for &(r, c) in &[(1, 1), (3, 5), (8, 8), (17, 9), (32, 64), (64, 64)] {
        let a = gaussian_matrix(r, c, 1.0, &mut rng);
        let svd = to_na(&a).svd(true, true);
        let smax = svd.singular_values.max();

        let est = spectral_norm(&a, 20_000, 1e-14).value;
        worst_norm = worst_norm.max((est - smax).abs() / smax);

        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        let polar = u * vt;
        let ours = to_na(&orthogonalize(&a).unwrap());
        worst_polar = worst_polar.max((ours - polar).amax());

        let s = a.matmul_tn(&a).unwrap();
        let eig = sym_eig(&s).unwrap();
        let mut want: Vec<f64> = svd.singular_values.iter().map(|x| x * x).collect();
        want.resize(c, 0.0);
        want.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let mut got = eig.values.clone();
        got.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let scale = want[0].max(1.0);
        for (g, w) in got.iter().zip(&want) {
            worst_eig = worst_eig.max((g - w).abs() / scale);
        }
        let q = to_na(&eig.vectors);
        let recon = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.values.clone())) * q.transpose();
        worst_eig = worst_eig.max((recon - to_na(&s)).amax() / scale);
    }

    let fd = finite_difference_error();

    let mut law_lo = f64::INFINITY;
    let mut law_hi = 0.0f64;
    for &m in &[128usize, 256, 512] {
        for &n in &[128usize, 256, 512] {
            let sigma = 0.7;
            let mean = (0..20u64)
                .map(|seed| {
                    let mut rng = RandomSource::derived(seed, &format!("law/{m}x{n}"));
                    let g = gaussian_matrix(m, n, sigma, &mut rng);
                    spectral_norm(&g, 400, 1e-7).value / (sigma * ((m as f64).sqrt() + (n as f64).sqrt()))
                })
                .sum::<f64>()
                / 20.0;
            law_lo = law_lo.min(mean);
            law_hi = law_hi.max(mean);
        }
    }

    let pass = worst_eig <= 1e-8 && worst_polar <= 1e-8 && worst_norm <= 1e-8 && fd <= 1e-4 && law_lo >= 0.9 && law_hi <= 1.05;
    Outcome::new(
        pass,
        format!(
            "eig {worst_eig:.1e}, polar {worst_polar:.1e}, spectral {worst_norm:.1e}, finite differences {fd:.1e}, norm law [{law_lo:.3}, {law_hi:.3}]"
        ),
    )
}

/// Worst relative error of the analytic gradient against central
/// differences on small networks of every supported shape.
fn finite_difference_error() -> f64 {
    use wdmup::Activation;
    let archs = [
        (ArchSpec::linear(3, 4, 2, 2), Loss::SquaredError),
        (ArchSpec::linear(3, 4, 1, 3).with_activation(Activation::Relu).with_bias(true), Loss::BinaryCrossEntropy),
        (ArchSpec::linear(2, 4, 2, 2).with_block_depth(3).with_hidden_width(3).with_bias(true), Loss::SquaredError),
        (ArchSpec::linear(2, 5, 2, 3).with_block_depth(1), Loss::SquaredError),
    ];
    let mut worst = 0.0f64;
    for (seed, (arch, loss)) in archs.into_iter().enumerate() {
        let base = BaseHyperparams { alpha_base: 1.0, sigma2_base: 1.0, eta_base: 0.1, lambda_base: 0.0, eps_base: 0.0 };
        let p = Parameterization::new(OptimizerKind::Sgd, ParamKind::MuP, base, ScaleRatios::identity(arch.width, arch.depth))
            .with_block_depth(arch.block.depth)
            .with_bias_init(BiasInit::Gaussian);
        let mut rng = RandomSource::new(seed as u64);
        let net = ResidualNet::initialize(arch, &p, &mut rng).unwrap();
        let x = gaussian_matrix(3, arch.d0, 1.0, &mut rng);
        let t = match loss {
            Loss::SquaredError => gaussian_matrix(3, arch.d_out, 1.0, &mut rng),
            Loss::BinaryCrossEntropy => Matrix::from_fn(3, 1, |i, _| (i % 2) as f64),
        };
        let grads = net.backward(&net.forward_batch(&x).unwrap(), loss, &t).unwrap();
        let h = 1e-6;
        for (role, g) in grads.entries() {
            for idx in 0..g.len() {
                let mut plus = net.clone();
                plus.param_mut(&role).unwrap().as_mut_slice()[idx] += h;
                let mut minus = net.clone();
                minus.param_mut(&role).unwrap().as_mut_slice()[idx] -= h;
                let fd = (plus.loss(&x, &t, loss).unwrap() - minus.loss(&x, &t, loss).unwrap()) / (2.0 * h);
                let an = g.as_slice()[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// AC11
// ---------------------------------------------------------------------------

fn small_config(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(kind);
    cfg.arch.widths = vec![16, 32, 64];
    cfg.arch.depths = vec![2, 4, 8];
    cfg.lr_exponents = vec![-8, -6, -4];
    cfg.schedule.steps = 5;
    cfg.equiv_count = 10;
    cfg.verify.audit_optimizers = vec![OptimizerKind::AdamW, OptimizerKind::MuonKimi];
    cfg.verify.assumptions = true;
    cfg.verify.appg_width = 16;
    cfg.verify.appg_d0 = 8;
    cfg.verify.appg_depths = vec![2, 4, 8];
    cfg.verify.appg_steps = 4;
    cfg.verify.appg_samples = 8;
    cfg
}

fn ac11_determinism() -> Outcome {
    let kinds = [
        ExperimentKind::Scale,
        ExperimentKind::CoordCheck,
        ExperimentKind::Transfer,
        ExperimentKind::Verify,
        ExperimentKind::Equiv,
    ];
    let mut differing = Vec::new();
    for kind in kinds {
        let mut files: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
        for _ in 0..2 {
            let mut cfg = small_config(kind);
            cfg.workers = 2;
            let dir = tempfile::tempdir().unwrap();
            let out = match run_experiment(&cfg) {
                Ok(o) => o,
                Err(e) => return Outcome::new(false, format!("{}: {e}", kind.name())),
            };
            let paths = write_outputs(dir.path(), OutputFormat::Both, &out).unwrap();
            let mut contents: Vec<(String, Vec<u8>)> = paths
                .iter()
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
                .collect();
            contents.sort();
            files.push(contents);
        }
        if files[0] != files[1] {
            differing.push(kind.name());
        }
    }
    let pass = differing.is_empty();
    let detail = if pass {
        "5 experiments byte-identical across reruns".to_string()
    } else {
        format!("outputs differ for {}", differing.join(", "))
    };
    Outcome::new(pass, detail)
}
