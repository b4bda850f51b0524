//! Sweeps over `(m, q, seed)` cells: training, held-out risk curves, lemma
//! checks and the output files.

use std::f64::consts::LN_2;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use dropnet::data::{
    certified_margin, estimate_margin, fit_linear_direction, load_mnist_binary, read_examples, Example,
    HalfspaceSampler, MarginSpec,
};
use dropnet::model::write_checkpoint;
use dropnet::numerics::{mean_se, streams, RngStream};
use dropnet::theory::{
    build_competitor_with_gamma, compute_bounds, default_radius, empirical_risk, random_mask_risks, summarize_reports,
    verify_lemmas, BoundReport, LemmaReport, LemmaSummary,
};
use dropnet::trainer::{IterateRecord, TrainConfig, Trainer, Variant, METRICS_HEADER};

use crate::config::{DataSource, ExperimentSpec, TheoryMode};
use crate::CliError;

/// What a sweep produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Metrics, risks, summary and lemma report.
    Run,
    /// Lemma report only; theory tracing is mandatory.
    Verify,
}

pub const RISK_COLUMNS: [&str; 3] = ["full_risk", "visited_risk", "random_mask_risk"];

/// One row of a cell CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRow {
    pub record: IterateRecord,
    pub full_risk: Option<f64>,
    pub visited_risk: Option<f64>,
    pub random_mask_risk: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub m: usize,
    pub q: f64,
    pub seed: u64,
    pub last: CellRow,
    pub report: Option<LemmaReport>,
    pub untraced_reason: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaCell {
    pub m: usize,
    pub q: f64,
    pub status: String,
    pub bounds: Option<BoundReport>,
    pub lemmas: Vec<LemmaSummary>,
    pub per_seed: Vec<LemmaReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaFile {
    pub name: String,
    pub delta: f64,
    pub gamma_source: String,
    pub cells: Vec<LemmaCell>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub lemma_file: LemmaFile,
}

pub fn cell_file_name(m: usize, q: f64, seed: u64) -> String {
    format!("cell_m{m}_q{q}_s{seed}.csv")
}

/// Data shared by every cell.
enum Source {
    Halfspace { d: usize, gamma0: f64 },
    Finite {
        train: Vec<Example>,
        held_out: Vec<Example>,
        direction: Vec<f64>,
    },
}

impl Source {
    fn load(spec: &ExperimentSpec) -> Result<Self, CliError> {
        let examples = match &spec.data {
            DataSource::Halfspace { d, gamma0 } => {
                return Ok(Source::Halfspace {
                    d: *d,
                    gamma0: *gamma0,
                })
            }
            DataSource::Mnist { dir, pos, neg } => load_mnist_binary(dir, *pos, *neg)?,
            DataSource::Text { path } => read_examples(BufReader::new(File::open(path)?))?,
        };
        log::warn!("finite dataset: examples are drawn without replacement, outside the i.i.d. stream setting");
        let mut examples = examples;
        shuffle(&mut examples, &mut RngStream::new(spec.seed, streams::HELD_OUT));
        let n_hold = ((examples.len() as f64 * spec.holdout).round() as usize).clamp(1, examples.len() - 1);
        let train = examples.split_off(n_hold);
        let held_out: Vec<Example> = examples.into_iter().take(spec.n_mc).collect();
        let direction = fit_linear_direction(&train, 100, 1.0)?;
        Ok(Source::Finite {
            train,
            held_out,
            direction,
        })
    }

    fn dim(&self) -> usize {
        match self {
            Source::Halfspace { d, .. } => *d,
            Source::Finite { direction, .. } => direction.len(),
        }
    }

    fn margin_spec(&self, q: f64) -> Result<MarginSpec, CliError> {
        Ok(match self {
            Source::Halfspace { d, gamma0 } => MarginSpec::axis_halfspace(*d, *gamma0, q)?,
            Source::Finite { direction, .. } => MarginSpec::mnist(direction.clone(), q)?,
        })
    }

    /// Certified margin, or the Monte Carlo estimate minus three standard
    /// errors for finite datasets.
    fn gamma(&self, spec: &MarginSpec, seed: u64) -> Result<f64, CliError> {
        Ok(match self {
            Source::Halfspace { .. } => certified_margin(spec)?,
            Source::Finite { train, .. } => {
                let mut rng = RngStream::new(seed, streams::MONTE_CARLO);
                estimate_margin(&mut rng, spec, train, 200)?.lower()
            }
        })
    }
}

fn shuffle<T>(xs: &mut [T], rng: &mut RngStream) {
    for i in (1..xs.len()).rev() {
        let j = ((rng.uniform() * (i + 1) as f64) as usize).min(i);
        xs.swap(i, j);
    }
}

/// Shortest round-trip representation, in exponent form for very small or
/// very large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn row_fields(row: &CellRow) -> Vec<String> {
    let r = &row.record;
    vec![
        r.t.to_string(),
        fmt_f64(r.inst_loss),
        fmt_f64(r.q_value),
        fmt_f64(r.sub_output),
        fmt_f64(r.full_output),
        fmt_f64(r.max_drift),
        r.flip_count.to_string(),
        r.active_neurons.to_string(),
        r.projection_hits.to_string(),
        fmt_opt(r.lemma1_slack),
        fmt_opt(r.lemma2_linloss),
        fmt_opt(row.full_risk),
        fmt_opt(row.visited_risk),
        fmt_opt(row.random_mask_risk),
    ]
}

fn write_cell_csv(path: &Path, rows: &[CellRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(METRICS_HEADER.iter().chain(RISK_COLUMNS.iter()))?;
    for row in rows {
        w.write_record(row_fields(row))?;
    }
    w.flush()?;
    Ok(())
}

fn run_cell(
    spec: &ExperimentSpec,
    source: &Source,
    mode: Mode,
    m: usize,
    q: f64,
    seed: u64,
    dir: &Path,
) -> Result<CellOutcome, CliError> {
    let d = source.dim();
    let margin = source.margin_spec(q)?;
    let gamma = source.gamma(&margin, spec.seed)?;
    let theory_wanted = match (mode, spec.theory) {
        (Mode::Verify, _) | (_, TheoryMode::On) => true,
        (_, TheoryMode::Off) => false,
        (_, TheoryMode::Auto) => spec.eta <= LN_2 && spec.variant == Variant::Standard,
    };
    let mut untraced_reason = None;
    if theory_wanted && gamma <= 0.0 {
        let msg = format!("margin estimate {gamma:.4e} is not positive");
        if mode == Mode::Verify || spec.theory == TheoryMode::On {
            return Err(CliError::Precondition(msg));
        }
        untraced_reason = Some(msg);
    }
    if !theory_wanted {
        untraced_reason = Some(match spec.theory {
            TheoryMode::Off => "theory = false".to_string(),
            _ => "eta > ln 2 or inverted variant".to_string(),
        });
    }
    let traced = untraced_reason.is_none();
    if mode == Mode::Verify && (spec.eta > LN_2 || spec.variant != Variant::Standard) {
        return Err(CliError::Precondition(
            "verification needs eta in (0, ln 2] and the standard variant".into(),
        ));
    }

    let c = match (spec.c, gamma > 0.0) {
        (Some(c), _) => c,
        (None, true) => default_radius(gamma, m, d),
        (None, false) => {
            return Err(CliError::Precondition(format!(
                "c must be set: the margin estimate {gamma:.4e} gives no default radius"
            )))
        }
    };
    let mut cfg = TrainConfig::new(m, d, q, spec.eta, c, spec.iterations, seed);
    cfg.variant = spec.variant;
    cfg.snapshot_stride = spec.snapshot_stride;
    if traced && spec.c.is_none() {
        cfg.max_init_norm = Some(c - 1.0);
    }
    let trainer = Trainer::new(cfg.clone())?;
    let competitor = if traced {
        let bounds = compute_bounds(gamma, spec.eta, spec.iterations, m, d, spec.delta)?;
        Some(build_competitor_with_gamma(trainer.initial(), &margin, bounds.lambda, gamma)?)
    } else {
        None
    };

    let data: Box<dyn Iterator<Item = Example>> = match source {
        Source::Halfspace { .. } => Box::new(HalfspaceSampler::new(RngStream::new(seed, streams::DATA), &margin)?),
        Source::Finite { train, .. } => {
            let mut order = train.clone();
            shuffle(&mut order, &mut RngStream::new(seed, streams::DATA));
            Box::new(order.into_iter())
        }
    };
    let held_out: Vec<Example> = match source {
        Source::Halfspace { .. } => HalfspaceSampler::new(RngStream::new(seed, streams::HELD_OUT), &margin)?
            .take(spec.n_mc)
            .collect(),
        Source::Finite { held_out, .. } => held_out.clone(),
    };
    let stem = format!("m{m}_q{q}_s{seed}");
    let mut mask_rng = RngStream::new(seed, streams::RANDOM_MASKS);
    let mut risks: Vec<(usize, f64, f64, Option<f64>)> = Vec::new();
    let out = trainer.run_with(data, competitor.as_ref(), |view| {
        let t = view.t;
        if spec.checkpoint_stride > 0 && ((t - 1) % spec.checkpoint_stride == 0 || t == spec.iterations) {
            let path = dir.join(format!("ckpt_{stem}_t{t}.bin"));
            write_checkpoint(BufWriter::new(File::create(path)?), view.params, q, t as u64)?;
        }
        let at_risk = (t - 1) % spec.risk_stride == 0 || t == spec.iterations;
        if mode == Mode::Run && at_risk {
            // sign(f(qW)) = sign(f(W)) for q > 0
            let full = empirical_risk(view.params, None, &held_out)?.risk;
            let visited = empirical_risk(view.params, Some(view.mask), &held_out)?.risk;
            let random = if spec.n_random_masks > 0 {
                let r = random_mask_risks(view.params, q, &held_out, spec.n_random_masks, &mut mask_rng)?;
                Some(r.iter().sum::<f64>() / r.len() as f64)
            } else {
                None
            };
            risks.push((t, full, visited, random));
        }
        Ok(())
    })?;

    let rows: Vec<CellRow> = out
        .records
        .iter()
        .map(|rec| {
            let risk = risks.iter().find(|r| r.0 == rec.t);
            CellRow {
                record: rec.clone(),
                full_risk: risk.map(|r| r.1),
                visited_risk: risk.map(|r| r.2),
                random_mask_risk: risk.and_then(|r| r.3),
            }
        })
        .collect();
    if mode == Mode::Run {
        write_cell_csv(&dir.join(cell_file_name(m, q, seed)), &rows)?;
    }
    let report = match &competitor {
        Some(comp) => Some(verify_lemmas(&out, comp, spec.delta)?),
        None => None,
    };
    Ok(CellOutcome {
        m,
        q,
        seed,
        last: rows.last().expect("at least one record").clone(),
        report,
        untraced_reason,
    })
}

/// Runs every `(m, q, seed)` cell on a pool of `spec.threads` workers and
/// writes the outputs under `<output>/<name>/`.
pub fn run_experiment(spec: &ExperimentSpec, mode: Mode) -> Result<SweepResult, CliError> {
    let dir = spec.out_dir();
    fs::create_dir_all(&dir)?;
    let source = Source::load(spec)?;
    if let Source::Finite { train, held_out, .. } = &source {
        log::info!("{} training / {} held-out examples", train.len(), held_out.len());
    }
    let jobs: Vec<(usize, f64, u64)> = spec
        .widths
        .iter()
        .flat_map(|&m| spec.keep.iter().flat_map(move |&q| spec.seeds().map(move |s| (m, q, s))))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellOutcome, CliError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..spec.threads.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(m, q, seed)) = jobs.get(i) else { break };
                log::info!("cell m={m} q={q} seed={seed}");
                let res = run_cell(spec, &source, mode, m, q, seed, &dir);
                results.lock().expect("no poisoned workers")[i] = Some(res);
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let lemma_file = lemma_file(spec, &source, &cells);
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("lemma_report.json"))?), &lemma_file)?;
    if mode == Mode::Run {
        write_summary(&dir.join("summary.csv"), spec, &cells)?;
    }
    Ok(SweepResult { dir, cells, lemma_file })
}

fn lemma_file(spec: &ExperimentSpec, source: &Source, cells: &[CellOutcome]) -> LemmaFile {
    let mut out = Vec::new();
    for &m in &spec.widths {
        for &q in &spec.keep {
            let group: Vec<&CellOutcome> = cells.iter().filter(|c| c.m == m && c.q == q).collect();
            let reports: Vec<LemmaReport> = group.iter().filter_map(|c| c.report.clone()).collect();
            let bounds = reports.first().map(|r| r.bounds.clone());
            let status = match (&bounds, group.iter().find_map(|c| c.untraced_reason.clone())) {
                (_, Some(reason)) => format!("not traced: {reason}"),
                (Some(b), None) if !b.width_sufficient => format!(
                    "preconditions unmet: m = {m} < m_required = {:.3e}; checks computed but not guaranteed",
                    b.m_required
                ),
                _ => "verified".to_string(),
            };
            out.push(LemmaCell {
                m,
                q,
                status,
                bounds,
                lemmas: summarize_reports(&reports),
                per_seed: reports,
            });
        }
    }
    LemmaFile {
        name: spec.name.clone(),
        delta: spec.delta,
        gamma_source: match source {
            Source::Halfspace { .. } => "certified".into(),
            Source::Finite { .. } => "estimated (Monte Carlo minimum minus 3 SE)".into(),
        },
        cells: out,
    }
}

pub const SUMMARY_METRICS: [&str; 7] = [
    "inst_loss",
    "max_drift",
    "flip_fraction",
    "active_neurons",
    "full_risk",
    "visited_risk",
    "random_mask_risk",
];

/// Values of the final row that enter the summary, in `SUMMARY_METRICS`
/// order; `None` for columns that were not computed.
pub fn summary_values(row: &CellRow, m: usize) -> [Option<f64>; 7] {
    let r = &row.record;
    [
        Some(r.inst_loss),
        Some(r.max_drift),
        Some(r.flip_count as f64 / m as f64),
        Some(r.active_neurons as f64),
        row.full_risk,
        row.visited_risk,
        row.random_mask_risk,
    ]
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let (mean, se) = mean_se(xs);
    (mean, se * (xs.len() as f64).sqrt())
}

fn write_summary(path: &Path, spec: &ExperimentSpec, cells: &[CellOutcome]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["m".to_string(), "q".to_string(), "seeds".to_string()];
    for name in SUMMARY_METRICS {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_sd"));
    }
    w.write_record(&header)?;
    for &m in &spec.widths {
        for &q in &spec.keep {
            let group: Vec<&CellOutcome> = cells.iter().filter(|c| c.m == m && c.q == q).collect();
            let mut fields = vec![m.to_string(), q.to_string(), group.len().to_string()];
            for k in 0..SUMMARY_METRICS.len() {
                let vals: Option<Vec<f64>> = group.iter().map(|c| summary_values(&c.last, m)[k]).collect();
                match vals {
                    Some(v) => {
                        let (mean, sd) = mean_sd(&v);
                        fields.push(fmt_f64(mean));
                        fields.push(fmt_f64(sd));
                    }
                    None => fields.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&fields)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Human-readable lines for the terminal.
pub fn print_lemma_summary(file: &LemmaFile, out: &mut impl Write) -> std::io::Result<()> {
    for cell in &file.cells {
        writeln!(out, "m={} q={}: {}", cell.m, cell.q, cell.status)?;
        for l in &cell.lemmas {
            writeln!(
                out,
                "  {:<22} {}/{} seeds  worst slack {:>12.4e}  bound {:>12.4e}{}",
                l.id,
                l.seeds_passed,
                l.seeds_total,
                l.worst_slack,
                l.bound,
                if l.applicable { "" } else { "  (hypotheses not met)" }
            )?;
        }
    }
    Ok(())
}
