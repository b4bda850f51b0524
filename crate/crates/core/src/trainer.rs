//! One-pass online dropout SGD with row-wise max-norm projection.
//!
//! For `t = 1, …, T−1`:
//!
//! ```text
//! g_t        = (1/√m) aᵀ B_t σ(W_t x_t)
//! W_{t+1/2}  = W_t + η · Q_t(W_t) · y_t · ∇g_t(W_t)      (Q_t = −ℓ'(y_t g_t))
//! W_{t+1}    = Π_c(W_{t+1/2})
//! ```
//!
//! and the returned predictor is `q·W_T`. Example `T` and mask `B_T` are still
//! drawn so that the last iterate gets a full diagnostic record; no update is
//! applied with them.
//!
//! Besides the sampled [`IterateRecord`]s, every step leaves a [`StepDiag`],
//! which is what the lemma checks in [`crate::theory`] consume.

use std::f64::consts::LN_2;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{check_len, domain, Error, Result};
use crate::model::{init_network, init_network_bounded, DropoutMask, NetworkParams};
use crate::numerics::{dot, loss, neg_deriv, norm_sq, streams, RngStream};
use crate::theory::Competitor;

const MAX_INIT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Masks at train time, weights multiplied by `q` at the end.
    #[default]
    Standard,
    /// Kept units scaled by `1/q` at train time, no final rescale.
    Inverted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub m: usize,
    pub d: usize,
    /// Keep-probability; the dropout rate is `1 − q`.
    pub q: f64,
    pub eta: f64,
    /// Max-norm radius.
    pub c: f64,
    /// Number of iterates `T` (so `T − 1` updates).
    pub iterations: usize,
    pub seed: u64,
    pub variant: Variant,
    pub snapshot_stride: usize,
    /// Re-draw the initialization until every row norm is at most this.
    pub max_init_norm: Option<f64>,
    /// Keep full weight copies at recorded iterations.
    pub keep_snapshots: bool,
}

impl TrainConfig {
    /// A config with the default stride `max(1, T/200)`.
    pub fn new(m: usize, d: usize, q: f64, eta: f64, c: f64, iterations: usize, seed: u64) -> Self {
        Self {
            m,
            d,
            q,
            eta,
            c,
            iterations,
            seed,
            variant: Variant::Standard,
            snapshot_stride: default_stride(iterations),
            max_init_norm: None,
            keep_snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 {
            return domain(format!("m and d must be positive (m={}, d={})", self.m, self.d));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return domain(format!("q must lie in (0, 1], got {}", self.q));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return domain(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.c > 0.0) {
            return domain(format!("c must be positive, got {}", self.c));
        }
        if self.iterations == 0 {
            return domain("T must be at least 1");
        }
        if self.snapshot_stride == 0 {
            return domain("snapshot_stride must be at least 1");
        }
        Ok(())
    }

    /// Additional requirement of the regret analysis: `η ≤ ln 2`.
    pub fn validate_for_theory(&self) -> Result<()> {
        self.validate()?;
        if self.eta > LN_2 {
            return domain(format!(
                "theory checks require eta in (0, ln 2], got {}",
                self.eta
            ));
        }
        if self.variant != Variant::Standard {
            return domain("theory checks are stated for the standard variant");
        }
        Ok(())
    }

    /// Whether iterate `t` gets an [`IterateRecord`]: every `snapshot_stride`
    /// steps from `t = 1`, plus `t = T`.
    pub fn is_recorded(&self, t: usize) -> bool {
        (t - 1) % self.snapshot_stride == 0 || t == self.iterations
    }
}

pub fn default_stride(iterations: usize) -> usize {
    (iterations / 200).max(1)
}

/// Diagnostics of a recorded iterate. Outputs are label-signed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub t: usize,
    /// `L_t(W_t) = ℓ(y_t g_t(W_t))`.
    pub inst_loss: f64,
    /// `Q_t(W_t) = −ℓ'(y_t g_t(W_t))`.
    pub q_value: f64,
    /// `y_t g_t(W_t)`.
    pub sub_output: f64,
    /// `y_t f_t(q W_t)` (standard) or `y_t f_t(W_t)` (inverted).
    pub full_output: f64,
    pub max_drift: f64,
    pub flip_count: usize,
    pub active_neurons: usize,
    /// Rows clipped by the projection applied after this step.
    pub projection_hits: usize,
    /// Regret-inequality slack at horizon `t`, when a competitor is supplied.
    pub lemma1_slack: Option<f64>,
    /// `L_t^{(t)}(U)`, when a competitor is supplied.
    pub lemma2_linloss: Option<f64>,
}

/// Per-step competitor quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryStep {
    /// `L_t^{(t)}(U)`.
    pub linloss: f64,
    /// `g_t(W₁)`.
    pub init_output: f64,
    /// `y_t ⟨∇g_t(W₁), V⟩`.
    pub margin_v: f64,
    /// `‖W_{t+1/2} − U‖² − (‖W_t − U‖² − η L_t + 2η L_t^{(t)}(U))`, ≤ 0 always.
    pub half_step_gap: f64,
    /// Same with the projected `W_{t+1}`; NaN at `t = T`.
    pub projected_gap: f64,
    /// `‖W_t − U‖²`.
    pub dist_to_u_sq: f64,
}

/// Per-step diagnostics kept for every iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiag {
    pub inst_loss: f64,
    pub q_value: f64,
    pub sub_output: f64,
    pub max_drift: f64,
    pub flips: usize,
    pub active: usize,
    pub projection_hits: usize,
    /// `‖W_{t+1/2} − W_t‖_F`; zero at `t = T`.
    pub step_norm: f64,
    pub theory: Option<TheoryStep>,
}

/// What an observer sees at step `t`, before the update.
pub struct StepView<'a> {
    pub t: usize,
    pub params: &'a NetworkParams,
    pub mask: &'a DropoutMask,
    pub example: &'a Example,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub config: TrainConfig,
    /// `W_T`.
    pub final_params: NetworkParams,
    /// `q·W_T` for the standard variant, `W_T` for the inverted one.
    pub rescaled: NetworkParams,
    pub records: Vec<IterateRecord>,
    /// One entry per iterate `t = 1..=T`.
    pub steps: Vec<StepDiag>,
    /// `(t, W_t)` at recorded iterations when `keep_snapshots` is set.
    pub snapshots: Vec<(usize, NetworkParams)>,
    pub competitor_summary: Option<CompetitorSummary>,
    pub init_attempts: usize,
}

impl TrainOutput {
    pub fn mean_inst_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.inst_loss).sum::<f64>() / self.steps.len() as f64
    }

    /// Rescales a snapshot into the predictor it represents.
    pub fn predictor(&self, params: &NetworkParams) -> NetworkParams {
        match self.config.variant {
            Variant::Standard => params.scaled(self.config.q),
            Variant::Inverted => params.clone(),
        }
    }
}

/// Competitor-level constants carried with a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetitorSummary {
    pub lambda: f64,
    pub gamma: f64,
    /// `‖W₁ − U‖²_F`.
    pub dist_init_sq: f64,
    /// Whether every row of `U` lies in the radius-`c` ball.
    pub u_in_ball: bool,
    /// Largest row norm of `U`.
    pub u_max_row_norm: f64,
}

/// Row-wise projection onto the radius-`c` ball.
///
/// Rows already inside are returned bit-for-bit; clipped rows end with norm
/// at most `c`, so applying the projection twice changes nothing.
pub fn project_maxnorm(w: &Array2<f64>, c: f64) -> Result<Array2<f64>> {
    if !(c > 0.0) {
        return domain(format!("max-norm radius must be positive, got {c}"));
    }
    let mut out = w.as_standard_layout().into_owned();
    let d = out.ncols();
    if d > 0 {
        for row in out.as_slice_mut().expect("standard layout").chunks_exact_mut(d) {
            project_row(row, c);
        }
    }
    Ok(out)
}

/// Returns whether the row was clipped.
#[inline]
fn project_row(row: &mut [f64], c: f64) -> bool {
    let n = norm_sq(row).sqrt();
    if n <= c {
        return false;
    }
    let s = c / n;
    row.iter_mut().for_each(|v| *v *= s);
    // rounding can leave the norm a few ulps above c
    while norm_sq(row).sqrt() > c {
        row.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    true
}

/// A single dropout step on `(x, y)` with mask `B`: returns `W_{t+1}` and the
/// record of `W_t`. Drift and flips are measured against the incoming `W_t`
/// (there is no initialization in scope here).
pub fn dropout_step(
    params: &NetworkParams,
    example: &Example,
    mask: &DropoutMask,
    eta: f64,
    c: f64,
) -> Result<(NetworkParams, IterateRecord)> {
    check_len("input dimension", params.dim(), example.dim())?;
    check_len("mask length", params.width(), mask.len())?;
    if !(c > 0.0) {
        return domain(format!("max-norm radius must be positive, got {c}"));
    }
    let m = params.width();
    let mut z = vec![0.0; m];
    params.preactivations_into(&example.x, &mut z);
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let (mut g, mut f) = (0.0, 0.0);
    for r in 0..m {
        if z[r] > 0.0 {
            f += params.a[r] * z[r];
            if mask.keep[r] {
                g += params.a[r] * z[r];
            }
        }
    }
    let margin = example.y * g * inv_sqrt_m;
    let qv = neg_deriv(margin);
    let coef = eta * qv * example.y * inv_sqrt_m;
    let mut next = params.clone();
    let (mut hits, mut max_move, mut flips) = (0, 0.0f64, 0);
    for r in 0..m {
        if mask.keep[r] && z[r] >= 0.0 {
            let step = coef * params.a[r];
            let row = next.row_mut(r);
            row.iter_mut().zip(&example.x).for_each(|(w, x)| *w += step * x);
        }
        if project_row(next.row_mut(r), c) {
            hits += 1;
        }
        let moved: f64 = next
            .row(r)
            .iter()
            .zip(params.row(r))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        max_move = max_move.max(moved.sqrt());
        if (dot(next.row(r), &example.x) >= 0.0) != (z[r] >= 0.0) {
            flips += 1;
        }
    }
    let record = IterateRecord {
        t: 1,
        inst_loss: loss(margin),
        q_value: qv,
        sub_output: margin,
        full_output: example.y * f * inv_sqrt_m * mask.q,
        max_drift: max_move,
        flip_count: flips,
        active_neurons: mask.active(),
        projection_hits: hits,
        lemma1_slack: None,
        lemma2_linloss: None,
    };
    Ok((next, record))
}

/// Owns a validated config and its initialization.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    init: NetworkParams,
    init_attempts: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed, streams::INIT);
        let (init, init_attempts) = match config.max_init_norm {
            Some(bound) => init_network_bounded(&mut rng, config.m, config.d, bound, MAX_INIT_ATTEMPTS)?,
            None => (init_network(&mut rng, config.m, config.d)?, 1),
        };
        Ok(Self {
            config,
            init,
            init_attempts,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// `W₁` (and the fixed signs).
    pub fn initial(&self) -> &NetworkParams {
        &self.init
    }

    pub fn run<I>(&self, data: I, competitor: Option<&Competitor>) -> Result<TrainOutput>
    where
        I: IntoIterator<Item = Example>,
    {
        self.run_with(data, competitor, |_| Ok(()))
    }

    /// Runs the algorithm, calling `observer` at every iterate before its
    /// update.
    pub fn run_with<I, F>(&self, data: I, competitor: Option<&Competitor>, mut observer: F) -> Result<TrainOutput>
    where
        I: IntoIterator<Item = Example>,
        F: FnMut(&StepView<'_>) -> Result<()>,
    {
        let cfg = &self.config;
        if let Some(comp) = competitor {
            cfg.validate_for_theory()?;
            if comp.w1 != self.init.w {
                return Err(Error::Precondition(
                    "competitor was not built from this run's initialization".into(),
                ));
            }
        }
        let (m, d, t_max) = (cfg.m, cfg.d, cfg.iterations);
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        let mask_scale = match cfg.variant {
            Variant::Standard => 1.0,
            Variant::Inverted => 1.0 / cfg.q,
        };
        let out_scale = match cfg.variant {
            Variant::Standard => cfg.q,
            Variant::Inverted => 1.0,
        };

        let w1 = &self.init;
        let mut w = self.init.clone();
        let mut mask = DropoutMask {
            keep: vec![false; m],
            q: cfg.q,
        };
        let mut mask_rng = RngStream::new(cfg.seed, streams::MASKS);
        let mut data = data.into_iter();

        let mut z = vec![0.0; m];
        let mut z1 = vec![0.0; m];
        let mut vx = vec![0.0; m];
        let mut drift_sq = vec![0.0; m];
        let mut dist_u_sq: Vec<f64> = match competitor {
            Some(comp) => (0..m).map(|r| row_dist_sq(w.row(r), comp.u_row(r))).collect(),
            None => Vec::new(),
        };
        let mut delta = vec![0.0; d];

        let summary = competitor.map(|comp| comp.summary(cfg.c));
        let mut records = Vec::new();
        let mut steps = Vec::with_capacity(t_max);
        let mut snapshots = Vec::new();
        let (mut sum_loss, mut sum_lin) = (0.0, 0.0);

        for t in 1..=t_max {
            let example = data.next().ok_or(Error::DataExhausted { iteration: t })?;
            check_len("example dimension", d, example.dim())?;
            mask.resample(&mut mask_rng);
            observer(&StepView {
                t,
                params: &w,
                mask: &mask,
                example: &example,
            })?;
            if cfg.keep_snapshots && cfg.is_recorded(t) {
                snapshots.push((t, w.clone()));
            }
            let (x, y) = (&example.x[..], example.y);

            w.preactivations_into(x, &mut z);
            w1.preactivations_into(x, &mut z1);
            let (mut g, mut f, mut flips) = (0.0, 0.0, 0);
            for r in 0..m {
                if z[r] > 0.0 {
                    f += w.a[r] * z[r];
                    if mask.keep[r] {
                        g += w.a[r] * z[r];
                    }
                }
                if (z[r] >= 0.0) != (z1[r] >= 0.0) {
                    flips += 1;
                }
            }
            let margin = y * g * inv_sqrt_m * mask_scale;
            let inst_loss = loss(margin);
            let qv = neg_deriv(margin);
            let active = mask.active();
            let max_drift = drift_sq.iter().copied().fold(0.0, f64::max).sqrt();

            // Gradient of L_t: rows with b_r = 1 and z_r ≥ 0 move by coef·a_r·x.
            let coef = cfg.eta * qv * y * inv_sqrt_m * mask_scale;
            let x_sq = norm_sq(x);
            let n_moving = (0..m).filter(|&r| mask.keep[r] && z[r] >= 0.0).count();
            let step_norm = coef.abs() * (n_moving as f64 * x_sq).sqrt();

            let theory = competitor.map(|comp| {
                comp.v_preactivations_into(x, &mut vx);
                let (mut lin, mut g1, mut mv) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    if !mask.keep[r] {
                        continue;
                    }
                    if z[r] >= 0.0 {
                        lin += w.a[r] * (z1[r] + comp.lambda * vx[r]);
                    }
                    if z1[r] >= 0.0 {
                        g1 += w.a[r] * z1[r];
                        mv += w.a[r] * vx[r];
                    }
                }
                let linloss = loss(y * lin * inv_sqrt_m);
                let dist_now: f64 = dist_u_sq.iter().sum();
                // ‖W_{t+1/2} − U‖² from the moving rows only.
                let mut half = dist_now;
                for r in 0..m {
                    if mask.keep[r] && z[r] >= 0.0 {
                        let s = coef * w.a[r];
                        let wr = w.row(r);
                        let ur = comp.u_row(r);
                        let cross: f64 = (0..d).map(|j| (wr[j] - ur[j]) * x[j]).sum();
                        half += 2.0 * s * cross + s * s * x_sq;
                    }
                }
                let bound = dist_now - cfg.eta * inst_loss + 2.0 * cfg.eta * linloss;
                TheoryStep {
                    linloss,
                    init_output: g1 * inv_sqrt_m,
                    margin_v: y * mv * inv_sqrt_m,
                    half_step_gap: half - bound,
                    projected_gap: f64::NAN,
                    dist_to_u_sq: dist_now,
                }
            });

            let mut hits = 0;
            if t < t_max {
                for r in 0..m {
                    let moving = mask.keep[r] && z[r] >= 0.0;
                    // the first projection also catches initial rows outside the ball
                    if !moving && t > 1 {
                        continue;
                    }
                    let row = w.row_mut(r);
                    if moving {
                        let s = coef * self.init.a[r];
                        delta.iter_mut().zip(x).for_each(|(dl, xi)| *dl = s * xi);
                        row.iter_mut().zip(&delta).for_each(|(wi, dl)| *wi += dl);
                    }
                    if project_row(row, cfg.c) {
                        hits += 1;
                    }
                    drift_sq[r] = row_dist_sq(w.row(r), w1.row(r));
                    if let Some(comp) = competitor {
                        dist_u_sq[r] = row_dist_sq(w.row(r), comp.u_row(r));
                    }
                }
            }
            let theory = theory.map(|mut th| {
                if t < t_max {
                    let dist_next: f64 = dist_u_sq.iter().sum();
                    th.projected_gap = dist_next - (th.dist_to_u_sq - cfg.eta * inst_loss + 2.0 * cfg.eta * th.linloss);
                }
                th
            });

            sum_loss += inst_loss;
            if let Some(th) = &theory {
                sum_lin += th.linloss;
            }
            let diag = StepDiag {
                inst_loss,
                q_value: qv,
                sub_output: margin,
                max_drift,
                flips,
                active,
                projection_hits: hits,
                step_norm: if t < t_max { step_norm } else { 0.0 },
                theory,
            };
            steps.push(diag);

            if cfg.is_recorded(t) {
                let (lemma1_slack, lemma2_linloss) = match (&theory, &summary) {
                    (Some(th), Some(s)) => {
                        let slack = (s.dist_init_sq / cfg.eta + 2.0 * sum_lin - sum_loss) / t as f64;
                        (Some(slack), Some(th.linloss))
                    }
                    _ => (None, None),
                };
                records.push(IterateRecord {
                    t,
                    inst_loss,
                    q_value: qv,
                    sub_output: margin,
                    full_output: y * f * inv_sqrt_m * out_scale,
                    max_drift,
                    flip_count: flips,
                    active_neurons: active,
                    projection_hits: hits,
                    lemma1_slack,
                    lemma2_linloss,
                });
            }
        }

        let rescaled = match cfg.variant {
            Variant::Standard => w.scaled(cfg.q),
            Variant::Inverted => w.clone(),
        };
        Ok(TrainOutput {
            config: cfg.clone(),
            final_params: w,
            rescaled,
            records,
            steps,
            snapshots,
            competitor_summary: summary,
            init_attempts: self.init_attempts,
        })
    }
}

#[inline]
fn row_dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Initializes from the config and runs. A supplied competitor must have been
/// built from `Trainer::new(config)?.initial()`.
pub fn train<I>(config: TrainConfig, data: I, competitor: Option<&Competitor>) -> Result<TrainOutput>
where
    I: IntoIterator<Item = Example>,
{
    Trainer::new(config)?.run(data, competitor)
}

pub const METRICS_HEADER: [&str; 11] = [
    "t",
    "inst_loss",
    "q_value",
    "sub_output",
    "full_output",
    "max_drift",
    "flip_count",
    "active_neurons",
    "projection_hits",
    "lemma1_slack",
    "lemma2_linloss",
];

/// One CSV row per record; missing competitor columns are left empty.
pub fn write_metrics_csv<W: Write>(w: W, records: &[IterateRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for rec in records {
        out.serialize(rec)?;
    }
    if records.is_empty() {
        out.write_record(METRICS_HEADER)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<IterateRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
