//! Analysis objects: the competitor `U = W₁ + λV`, the bound constants, and
//! checkers that compare a training trace against each high-probability and
//! deterministic statement.

use std::f64::consts::{LN_2, PI};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{certified_margin, Example, HalfspaceSampler, MarginSpec};
use crate::error::{check_len, domain, Error, Result};
use crate::model::{forward_unchecked, DropoutMask, NetworkParams};
use crate::numerics::{dot, loss, mean_se, sample_gaussian_vector, RngStream};
use crate::trainer::TrainOutput;
use crate::trainer::CompetitorSummary;

/// `V` with rows `a_r ψ(w_{r,1}) / √m`, and `U = W₁ + λV`.
#[derive(Clone, Debug, PartialEq)]
pub struct Competitor {
    pub v: Array2<f64>,
    pub u: Array2<f64>,
    pub w1: Array2<f64>,
    pub lambda: f64,
    pub gamma: f64,
}

impl Competitor {
    pub fn u_row(&self, r: usize) -> &[f64] {
        let d = self.u.ncols();
        &self.u.as_slice().expect("standard layout")[r * d..(r + 1) * d]
    }

    pub fn v_row(&self, r: usize) -> &[f64] {
        let d = self.v.ncols();
        &self.v.as_slice().expect("standard layout")[r * d..(r + 1) * d]
    }

    /// `out[r] = v_r · x`.
    pub fn v_preactivations_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.v_row(r), x);
        }
    }

    pub fn v_frobenius(&self) -> f64 {
        self.v.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_u_row_norm(&self) -> f64 {
        (0..self.u.nrows())
            .map(|r| dot(self.u_row(r), self.u_row(r)).sqrt())
            .fold(0.0, f64::max)
    }

    /// `‖W₁ − U‖²_F`.
    pub fn dist_init_sq(&self) -> f64 {
        self.u.iter().zip(self.w1.iter()).map(|(u, w)| (u - w) * (u - w)).sum()
    }

    pub fn summary(&self, c: f64) -> CompetitorSummary {
        let u_max_row_norm = self.max_u_row_norm();
        CompetitorSummary {
            lambda: self.lambda,
            gamma: self.gamma,
            dist_init_sq: self.dist_init_sq(),
            u_in_ball: u_max_row_norm <= c,
            u_max_row_norm,
        }
    }
}

/// Competitor with the certified margin of a synthetic spec.
pub fn build_competitor(init: &NetworkParams, spec: &MarginSpec, lambda: f64) -> Result<Competitor> {
    let gamma = certified_margin(spec)?;
    build_competitor_with_gamma(init, spec, lambda, gamma)
}

/// Competitor with an externally supplied margin (e.g. an estimate).
pub fn build_competitor_with_gamma(
    init: &NetworkParams,
    spec: &MarginSpec,
    lambda: f64,
    gamma: f64,
) -> Result<Competitor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return domain(format!("lambda must be a non-negative finite number, got {lambda}"));
    }
    check_len("margin spec dimension", init.dim(), spec.dim())?;
    let (m, d) = (init.width(), init.dim());
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let mut v = Array2::zeros((m, d));
    let mut psi = vec![0.0; d];
    for r in 0..m {
        spec.psi.eval_into(init.row(r), &mut psi);
        let s = init.a[r] * inv_sqrt_m;
        v.row_mut(r).iter_mut().zip(&psi).for_each(|(o, p)| *o = s * p);
    }
    let u = &init.w + &(&v * lambda);
    let comp = Competitor {
        v,
        u,
        w1: init.w.clone(),
        lambda,
        gamma,
    };
    let vf = comp.v_frobenius();
    if vf > 1.0 + 1e-12 {
        return domain(format!("feature map gives ‖V‖_F = {vf} > 1"));
    }
    Ok(comp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub gamma: f64,
    pub eta: f64,
    pub iterations: usize,
    pub m: usize,
    pub d: usize,
    pub delta: f64,
    pub c: f64,
    pub lambda: f64,
    pub m_required: f64,
    pub width_sufficient: bool,
    pub thm1_bound: f64,
    pub thm2_bound: f64,
    pub worst_case_loss: f64,
    /// A logarithm argument inside `λ` fell below `e` and was raised to it;
    /// the horizon is too short for the formula to be meaningful.
    pub log_clamped: bool,
}

/// `c = √d + max{1/(14γ²), 2√ln m} + 1`.
pub fn default_radius(gamma: f64, m: usize, d: usize) -> f64 {
    (d as f64).sqrt() + (1.0 / (14.0 * gamma * gamma)).max(2.0 * (m as f64).ln().sqrt()) + 1.0
}

pub fn compute_bounds(gamma: f64, eta: f64, iterations: usize, m: usize, d: usize, delta: f64) -> Result<BoundReport> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return domain(format!("gamma must be positive, got {gamma}"));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return domain(format!("eta must be positive, got {eta}"));
    }
    if iterations == 0 || m == 0 || d == 0 {
        return domain("T, m and d must be positive");
    }
    if !(delta > 0.0 && delta < 1.0) {
        return domain(format!("delta must lie in (0, 1), got {delta}"));
    }
    let t = iterations as f64;
    let c = default_radius(gamma, m, d);
    let mut log_clamped = false;
    let mut clamped_ln = |arg: f64| {
        if arg < std::f64::consts::E {
            log_clamped = true;
            1.0
        } else {
            arg.ln()
        }
    };
    let l1 = clamped_ln(2.0 * eta * t);
    let l2 = clamped_ln(24.0 * eta * c * (m as f64).sqrt() * t * t);
    let lambda = 5.0 / gamma * l1 + (44.0 / (gamma * gamma) * l2).sqrt();
    let m_required = 2401.0 * gamma.powi(-6) * lambda * lambda;
    Ok(BoundReport {
        gamma,
        eta,
        iterations,
        m,
        d,
        delta,
        c,
        lambda,
        m_required,
        width_sufficient: m as f64 >= m_required,
        thm1_bound: 4.0 * lambda * lambda / (eta * t),
        thm2_bound: 12.0 * lambda * lambda / (eta * t) + 6.0 * (1.0 / delta).ln() / t,
        worst_case_loss: c * (m as f64).sqrt() / LN_2 + 1.0,
        log_clamped,
    })
}

/// `ℓ(y ⟨∇g(W_t; x, B), U⟩)`.
pub fn linearized_loss(params: &NetworkParams, mask: &DropoutMask, example: &Example, u: &Array2<f64>) -> Result<f64> {
    check_len("input dimension", params.dim(), example.dim())?;
    check_len("mask length", params.width(), mask.len())?;
    if u.dim() != params.w.dim() {
        return Err(Error::Shape {
            what: "competitor rows",
            expected: params.width(),
            got: u.nrows(),
        });
    }
    let m = params.width();
    let mut z = vec![0.0; m];
    params.preactivations_into(&example.x, &mut z);
    let mut s = 0.0;
    for (r, u_r) in u.outer_iter().enumerate() {
        if mask.keep[r] && z[r] >= 0.0 {
            let ux: f64 = u_r.iter().zip(&example.x).map(|(a, b)| a * b).sum();
            s += params.a[r] * ux;
        }
    }
    Ok(loss(example.y * s / (m as f64).sqrt()))
}

/// Hidden units whose activation on `x` differs between `W_t` and `W₁`.
pub fn flip_count(params: &NetworkParams, init: &NetworkParams, x: &[f64]) -> Result<usize> {
    if params.w.dim() != init.w.dim() {
        return Err(Error::Shape {
            what: "initial weights",
            expected: params.width(),
            got: init.width(),
        });
    }
    check_len("input dimension", params.dim(), x.len())?;
    Ok((0..params.width())
        .filter(|&r| (dot(params.row(r), x) >= 0.0) != (dot(init.row(r), x) >= 0.0))
        .count())
}

/// Risk with its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub risk: f64,
    pub se: f64,
    pub n: usize,
}

impl RiskEstimate {
    fn from_errors(errors: usize, n: usize) -> Self {
        let p = errors as f64 / n as f64;
        Self {
            risk: p,
            se: (p * (1.0 - p) / n as f64).sqrt(),
            n,
        }
    }
}

/// Misclassification rate on fresh draws from `spec`. An output of exactly
/// zero counts as an error.
pub fn estimate_risk(
    params: &NetworkParams,
    mask: Option<&DropoutMask>,
    spec: &MarginSpec,
    rng: RngStream,
    n_mc: usize,
) -> Result<RiskEstimate> {
    if n_mc == 0 {
        return domain("n_mc must be at least 1");
    }
    let mut sampler = HalfspaceSampler::new(rng, spec)?;
    check_len("input dimension", params.dim(), spec.dim())?;
    if let Some(mask) = mask {
        check_len("mask length", params.width(), mask.len())?;
    }
    let errors = (0..n_mc)
        .filter(|_| {
            let ex = sampler.sample();
            ex.y * forward_unchecked(params, mask, &ex.x) <= 0.0
        })
        .count();
    Ok(RiskEstimate::from_errors(errors, n_mc))
}

/// Misclassification rate on a fixed example set.
pub fn empirical_risk(params: &NetworkParams, mask: Option<&DropoutMask>, examples: &[Example]) -> Result<RiskEstimate> {
    if examples.is_empty() {
        return domain("empirical risk needs at least one example");
    }
    if let Some(mask) = mask {
        check_len("mask length", params.width(), mask.len())?;
    }
    let mut errors = 0;
    for ex in examples {
        check_len("input dimension", params.dim(), ex.dim())?;
        if ex.y * forward_unchecked(params, mask, &ex.x) <= 0.0 {
            errors += 1;
        }
    }
    Ok(RiskEstimate::from_errors(errors, examples.len()))
}

/// Risks of `n_masks` fresh Bernoulli(q) sub-networks of `params` on
/// `examples`; hidden activations are computed once per example.
pub fn random_mask_risks(
    params: &NetworkParams,
    q: f64,
    examples: &[Example],
    n_masks: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&q) {
        return domain(format!("q must lie in [0, 1], got {q}"));
    }
    if examples.is_empty() {
        return domain("random-mask risk needs at least one example");
    }
    let m = params.width();
    let masks: Vec<Vec<usize>> = (0..n_masks)
        .map(|_| (0..m).filter(|_| rng.bernoulli(q)).collect())
        .collect();
    let mut errors = vec![0usize; n_masks];
    let mut h = vec![0.0; m];
    for ex in examples {
        check_len("input dimension", params.dim(), ex.dim())?;
        params.preactivations_into(&ex.x, &mut h);
        for (r, v) in h.iter_mut().enumerate() {
            *v = params.a[r] * v.max(0.0);
        }
        for (k, keep) in masks.iter().enumerate() {
            let s: f64 = keep.iter().map(|&r| h[r]).sum();
            if ex.y * s <= 0.0 {
                errors[k] += 1;
            }
        }
    }
    let n = examples.len() as f64;
    Ok(errors.into_iter().map(|e| e as f64 / n).collect())
}

/// Mean and standard error of `ℓ(y g(W; x, B))` over `n_masks` masks.
pub fn mask_averaged_loss(
    params: &NetworkParams,
    example: &Example,
    q: f64,
    n_masks: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    check_len("input dimension", params.dim(), example.dim())?;
    if n_masks < 2 {
        return domain("need at least two masks for a standard error");
    }
    let m = params.width();
    let mut h = vec![0.0; m];
    params.preactivations_into(&example.x, &mut h);
    let scale = example.y / (m as f64).sqrt();
    for (r, v) in h.iter_mut().enumerate() {
        *v = scale * params.a[r] * v.max(0.0);
    }
    let losses: Vec<f64> = (0..n_masks)
        .map(|_| {
            let s: f64 = h.iter().filter(|_| rng.bernoulli(q)).sum();
            loss(s)
        })
        .collect();
    Ok(mean_se(&losses))
}

/// Monte Carlo `Pr{|wᵀx| ≤ D}` for `w ~ N(0, I_d)` and a fixed random unit
/// `x`, with its standard error.
pub fn anticoncentration_mc(rng: &mut RngStream, d: usize, radius: f64, n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return domain("need at least one sample");
    }
    let mut x = sample_gaussian_vector(rng, d)?;
    let nx = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|v| *v /= nx);
    let mut w = vec![0.0; d];
    let hits = (0..n)
        .filter(|_| {
            w.iter_mut().for_each(|v| *v = rng.standard_normal());
            dot(&w, &x).abs() <= radius
        })
        .count();
    let p = hits as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}

/// `2D/√(2π)`.
pub fn anticoncentration_bound(radius: f64) -> f64 {
    2.0 * radius / (2.0 * PI).sqrt()
}

/// One statement checked against one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub id: String,
    pub bound: f64,
    pub observed: f64,
    /// Positive when the statement holds with room to spare.
    pub slack: f64,
    pub pass: bool,
    /// `false` when a hypothesis of the statement is not met by this run; the
    /// numbers are still reported.
    pub applicable: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub bounds: BoundReport,
    /// Width requirement of the high-probability statements.
    pub width_sufficient: bool,
    pub checks: Vec<LemmaCheck>,
}

impl LemmaReport {
    pub fn get(&self, id: &str) -> Option<&LemmaCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

pub const LEMMA_IDS: [&str; 9] = [
    "regret",
    "regret_step",
    "drift",
    "init_output",
    "margin_concentration",
    "linearized_loss",
    "worst_case_loss",
    "flip_count",
    "active_width",
];

fn check(id: &str, bound: f64, observed: f64, upper: bool, applicable: bool, note: impl Into<String>) -> LemmaCheck {
    let slack = if upper { bound - observed } else { observed - bound };
    LemmaCheck {
        id: id.into(),
        bound,
        observed,
        slack,
        pass: slack >= 0.0,
        applicable,
        note: note.into(),
    }
}

/// Checks a run that was traced with `competitor`.
///
/// Deterministic statements (`regret`, `regret_step`, `worst_case_loss`) must
/// pass on every run where they apply; the others hold with probability at
/// least `1 − δ` once the width requirement is met.
pub fn verify_lemmas(run: &TrainOutput, competitor: &Competitor, delta: f64) -> Result<LemmaReport> {
    let summary = run
        .competitor_summary
        .ok_or_else(|| Error::Precondition("run was not traced with a competitor".into()))?;
    if summary.lambda != competitor.lambda || summary.dist_init_sq != competitor.dist_init_sq() {
        return Err(Error::Precondition("competitor does not match the traced run".into()));
    }
    let theory: Vec<_> = run
        .steps
        .iter()
        .map(|s| s.theory.ok_or_else(|| Error::Precondition("step without competitor trace".into())))
        .collect::<Result<_>>()?;
    let cfg = &run.config;
    let (m, t_max, eta, c) = (cfg.m as f64, cfg.iterations as f64, cfg.eta, cfg.c);
    let gamma = competitor.gamma;
    let lambda = competitor.lambda;
    let bounds = compute_bounds(gamma, eta, cfg.iterations, cfg.m, cfg.d, delta)?;
    let wide = bounds.width_sufficient;
    let hp_note = if wide { "" } else { "preconditions unmet: m below the width requirement" };
    let projections: usize = run.steps.iter().map(|s| s.projection_hits).sum();
    let mut checks = Vec::new();

    // Lemma 1: needs Π_c to be non-expansive towards U, which holds when U is
    // in the ball or when no projection ever fired.
    let regret_ok = summary.u_in_ball || projections == 0;
    let regret_note = if regret_ok {
        String::new()
    } else {
        format!(
            "U has a row of norm {:.3} > c = {:.3} and the projection fired {} times",
            summary.u_max_row_norm, c, projections
        )
    };
    let lhs = run.mean_inst_loss();
    let lin_sum: f64 = theory.iter().map(|s| s.linloss).sum();
    let rhs = summary.dist_init_sq / (eta * t_max) + 2.0 * lin_sum / t_max;
    let mut regret = check("regret", rhs, lhs, true, regret_ok, regret_note.clone());
    regret.pass = regret.slack >= -1e-9;
    checks.push(regret);

    let mut worst_step = f64::NEG_INFINITY;
    for s in &theory {
        let tol = 1e-9 * (1.0 + s.dist_to_u_sq);
        worst_step = worst_step.max((s.half_step_gap - tol).max(if regret_ok && s.projected_gap.is_finite() {
            s.projected_gap - tol
        } else {
            f64::NEG_INFINITY
        }));
    }
    checks.push(check("regret_step", 0.0, worst_step, true, true, "distance recursion, tolerance 1e-9 relative"));

    let drift = run.steps.iter().map(|s| s.max_drift).fold(0.0, f64::max);
    checks.push(check("drift", 3.5 * lambda / (gamma * m.sqrt()), drift, true, wide, hp_note));

    let init_out = theory.iter().map(|s| s.init_output.abs()).fold(0.0, f64::max);
    let a6_ok = wide && m >= 25.0 * (6.0 * t_max / delta).ln();
    checks.push(check(
        "init_output",
        (2.0 * (6.0 * t_max / delta).ln()).sqrt(),
        init_out,
        true,
        a6_ok,
        hp_note,
    ));

    let margin = theory.iter().map(|s| s.margin_v).fold(f64::INFINITY, f64::min);
    checks.push(check(
        "margin_concentration",
        gamma - (2.0 * (3.0 * t_max / delta).ln() / m).sqrt(),
        margin,
        false,
        true,
        "",
    ));

    let max_lin = theory.iter().map(|s| s.linloss).fold(0.0, f64::max);
    checks.push(check("linearized_loss", lambda * lambda / (2.0 * eta * t_max), max_lin, true, wide, hp_note));
    checks.push(check(
        "worst_case_loss",
        c * m.sqrt() / LN_2 + 1.0,
        max_lin,
        true,
        summary.u_in_ball,
        if summary.u_in_ball { "" } else { "U has rows outside the max-norm ball" },
    ));

    let hoeff = (m * (3.0 * t_max / delta).ln() / 2.0).sqrt();
    let (mut flip_slack, mut flip_obs, mut flip_bound) = (f64::INFINITY, 0.0, 0.0);
    for s in &run.steps {
        let b = m * s.max_drift + hoeff;
        if b - (s.flips as f64) < flip_slack {
            flip_slack = b - s.flips as f64;
            flip_obs = s.flips as f64;
            flip_bound = b;
        }
    }
    checks.push(check("flip_count", flip_bound, flip_obs, true, true, ""));

    let width_cap = cfg.q * m + (2.0 * m * (t_max / delta).ln()).sqrt();
    let over = run.steps.iter().filter(|s| s.active as f64 > width_cap).count() as f64 / t_max;
    let max_active = run.steps.iter().map(|s| s.active).max().unwrap_or(0) as f64;
    let mut active = check("active_width", width_cap, max_active, true, true, format!("fraction of steps over the cap: {over}"));
    active.pass = over <= delta;
    checks.push(active);

    Ok(LemmaReport {
        bounds,
        width_sufficient: wide,
        checks,
    })
}

/// Per-statement pass counts over several runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub id: String,
    pub bound: f64,
    /// Smallest slack over runs.
    pub worst_slack: f64,
    pub worst_observed: f64,
    pub seeds_passed: usize,
    pub seeds_total: usize,
    pub applicable: bool,
}

pub fn summarize_reports(reports: &[LemmaReport]) -> Vec<LemmaSummary> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    first
        .checks
        .iter()
        .map(|c0| {
            let all: Vec<&LemmaCheck> = reports.iter().filter_map(|r| r.get(&c0.id)).collect();
            let worst = all
                .iter()
                .min_by(|a, b| a.slack.total_cmp(&b.slack))
                .expect("at least one report");
            LemmaSummary {
                id: c0.id.clone(),
                bound: worst.bound,
                worst_slack: worst.slack,
                worst_observed: worst.observed,
                seeds_passed: all.iter().filter(|c| c.pass).count(),
                seeds_total: all.len(),
                applicable: all.iter().all(|c| c.applicable),
            }
        })
        .collect()
}
