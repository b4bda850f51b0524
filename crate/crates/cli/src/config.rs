//! Flat `key = value` experiment configs.
//!
//! ```text
//! # lines starting with '#' are comments; inline '#' comments are allowed
//! name    = figure1
//! data    = halfspace
//! d       = 20
//! gamma0  = 0.5
//! m       = 4096
//! dropout = 0.1, 0.5, 0.7
//! T       = 2000
//! eta     = 0.5
//! seeds   = 5
//! ```
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `name` | `experiment` | output subdirectory |
//! | `data` | required | `halfspace`, `mnist` (IDX directory) or `text` (export of `mnist-prepare`) |
//! | `m` | required | comma list of widths |
//! | `q` / `dropout` | required, exactly one | keep-probabilities, or dropout rates `1 − q` |
//! | `d` | required for `halfspace` | input dimension |
//! | `gamma0` | required for `halfspace` | sampling margin `γ₀ ∈ (0, 0.999]` |
//! | `T` | required | iterations |
//! | `eta` | required | learning rate |
//! | `c` | `√d + max{1/(14γ²), 2√ln m} + 1` | max-norm radius |
//! | `seed`, `seeds` | `0`, `1` | base seed and number of seeds |
//! | `variant` | `standard` | or `inverted` |
//! | `snapshot_stride` | `max(1, T/200)` | record every this many steps |
//! | `risk_stride` | multiple of `snapshot_stride` near `T/20` | risk estimates every this many steps |
//! | `n_mc` | `2000` | held-out points for risk estimates |
//! | `n_random_masks` | `0` | fresh masks per risk estimate |
//! | `delta` | `0.05` | confidence for the lemma checks |
//! | `theory` | `auto` | `true`, `false`, or `auto` (trace when `eta ≤ ln 2`) |
//! | `checkpoint_stride` | `0` (off) | write weights every this many steps |
//! | `output` | `out` | output root |
//! | `threads` | available cores | worker threads for sweep cells |
//! | `mnist_dir`, `digit_pos`, `digit_neg` | — | for `data = mnist` |
//! | `data_path` | — | for `data = text` |
//! | `holdout` | `0.2` | held-out fraction for finite datasets |

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use dropnet::trainer::{default_stride, Variant};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Halfspace { d: usize, gamma0: f64 },
    Mnist { dir: PathBuf, pos: u8, neg: u8 },
    Text { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TheoryMode {
    Auto,
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataSource,
    pub widths: Vec<usize>,
    /// Keep-probabilities.
    pub keep: Vec<f64>,
    pub iterations: usize,
    pub eta: f64,
    pub c: Option<f64>,
    pub seed: u64,
    pub n_seeds: usize,
    pub variant: Variant,
    pub snapshot_stride: usize,
    pub risk_stride: usize,
    pub n_mc: usize,
    pub n_random_masks: usize,
    pub delta: f64,
    pub theory: TheoryMode,
    pub checkpoint_stride: usize,
    pub output: PathBuf,
    pub threads: usize,
    pub holdout: f64,
}

impl ExperimentSpec {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |k| self.seed + k)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output.join(&self.name)
    }
}

/// Every problem found in a config, one per line.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub issues: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid experiment config:")?;
        for issue in &self.issues {
            writeln!(f, "  - {issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

const KEYS: &[&str] = &[
    "name",
    "data",
    "m",
    "q",
    "dropout",
    "d",
    "gamma0",
    "T",
    "eta",
    "c",
    "seed",
    "seeds",
    "variant",
    "snapshot_stride",
    "risk_stride",
    "n_mc",
    "n_random_masks",
    "delta",
    "theory",
    "checkpoint_stride",
    "output",
    "threads",
    "mnist_dir",
    "digit_pos",
    "digit_neg",
    "data_path",
    "holdout",
];

struct Fields {
    map: BTreeMap<String, String>,
    issues: Vec<String>,
}

impl Fields {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&mut self, key: &str, what: &str) -> Option<T> {
        let raw = self.raw(key)?.to_string();
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.issues.push(format!("{key}: expected {what}, got '{raw}'"));
                None
            }
        }
    }

    fn required<T: FromStr>(&mut self, key: &str, what: &str) -> Option<T> {
        if self.raw(key).is_none() {
            self.issues.push(format!("{key}: required"));
            return None;
        }
        self.get(key, what)
    }

    fn list<T: FromStr>(&mut self, key: &str, what: &str) -> Option<Vec<T>> {
        let raw = self.raw(key)?.to_string();
        let parsed: Result<Vec<T>, _> = raw.split(',').map(|s| s.trim().parse()).collect();
        match parsed {
            Ok(v) if !v.is_empty() => Some(v),
            _ => {
                self.issues.push(format!("{key}: expected a comma-separated list of {what}, got '{raw}'"));
                None
            }
        }
    }

    fn check(&mut self, ok: bool, msg: impl Into<String>) {
        if !ok {
            self.issues.push(msg.into());
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentSpec, ConfigError> {
    let mut fields = Fields {
        map: BTreeMap::new(),
        issues: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            fields.issues.push(format!("line {}: expected 'key = value'", i + 1));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            fields.issues.push(format!("line {}: unknown key '{key}'", i + 1));
        } else if fields.map.insert(key.to_string(), value.to_string()).is_some() {
            fields.issues.push(format!("line {}: duplicate key '{key}'", i + 1));
        }
    }
    let f = &mut fields;

    let name = f.raw("name").unwrap_or("experiment").to_string();
    f.check(
        !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
        format!("name: must be non-empty and use only [A-Za-z0-9._-], got '{name}'"),
    );

    let data = match f.raw("data") {
        None => {
            f.issues.push("data: required (halfspace, mnist or text)".into());
            None
        }
        Some("halfspace") => {
            let d: Option<usize> = f.required("d", "a positive integer");
            let gamma0: Option<f64> = f.required("gamma0", "a number");
            if let Some(d) = d {
                f.check(d >= 1, "d: must be at least 1");
            }
            if let Some(g) = gamma0 {
                f.check(g > 0.0 && g <= 0.999, format!("gamma0: must lie in (0, 0.999], got {g}"));
            }
            d.zip(gamma0).map(|(d, gamma0)| DataSource::Halfspace { d, gamma0 })
        }
        Some("mnist") => {
            let dir: Option<String> = f.required("mnist_dir", "a path");
            let pos: Option<u8> = f.required("digit_pos", "a digit");
            let neg: Option<u8> = f.required("digit_neg", "a digit");
            if let (Some(p), Some(n)) = (pos, neg) {
                f.check(p <= 9 && n <= 9 && p != n, "digit_pos, digit_neg: must be distinct digits 0-9");
            }
            match (dir, pos, neg) {
                (Some(dir), Some(pos), Some(neg)) => Some(DataSource::Mnist {
                    dir: dir.into(),
                    pos,
                    neg,
                }),
                _ => None,
            }
        }
        Some("text") => f
            .required::<String>("data_path", "a path")
            .map(|p| DataSource::Text { path: p.into() }),
        Some(other) => {
            f.issues.push(format!("data: expected halfspace, mnist or text, got '{other}'"));
            None
        }
    };
    if !matches!(data, Some(DataSource::Halfspace { .. })) && f.raw("gamma0").is_some() {
        f.issues.push("gamma0: only valid with data = halfspace".into());
    }

    let widths: Option<Vec<usize>> = if f.raw("m").is_some() {
        f.list("m", "positive integers")
    } else {
        f.issues.push("m: required".into());
        None
    };
    if let Some(w) = &widths {
        f.check(w.iter().all(|&m| m >= 1), "m: widths must be at least 1");
    }

    let keep = match (f.raw("q").is_some(), f.raw("dropout").is_some()) {
        (true, true) => {
            f.issues.push("q, dropout: give one of them, not both".into());
            None
        }
        (false, false) => {
            f.issues.push("q: required (or dropout = list of rates 1 - q)".into());
            None
        }
        (true, false) => f.list::<f64>("q", "numbers"),
        (false, true) => f
            .list::<f64>("dropout", "numbers")
            .map(|rates| rates.into_iter().map(|r| 1.0 - r).collect()),
    };
    if let Some(k) = &keep {
        f.check(
            k.iter().all(|&q| q > 0.0 && q <= 1.0),
            "q: keep-probabilities must lie in (0, 1] (dropout rates in [0, 1))",
        );
    }

    let iterations: Option<usize> = f.required("T", "a positive integer");
    if let Some(t) = iterations {
        f.check(t >= 1, "T: must be at least 1");
    }
    let eta: Option<f64> = f.required("eta", "a number");
    if let Some(e) = eta {
        f.check(e > 0.0 && e.is_finite(), format!("eta: must be positive, got {e}"));
    }
    let c: Option<f64> = f.get("c", "a number");
    if let Some(c) = c {
        f.check(c > 0.0, format!("c: must be positive, got {c}"));
    }
    let seed: u64 = f.get("seed", "a non-negative integer").unwrap_or(0);
    let n_seeds: usize = f.get("seeds", "a positive integer").unwrap_or(1);
    f.check(n_seeds >= 1, "seeds: must be at least 1");
    let variant = match f.raw("variant").unwrap_or("standard") {
        "standard" => Variant::Standard,
        "inverted" => Variant::Inverted,
        other => {
            f.issues.push(format!("variant: expected standard or inverted, got '{other}'"));
            Variant::Standard
        }
    };
    let t = iterations.unwrap_or(1);
    let snapshot_stride: usize = f.get("snapshot_stride", "a positive integer").unwrap_or(default_stride(t));
    f.check(snapshot_stride >= 1, "snapshot_stride: must be at least 1");
    let risk_stride: usize = f
        .get("risk_stride", "a positive integer")
        .unwrap_or_else(|| snapshot_stride.max(1) * ((t / 20) / snapshot_stride.max(1)).max(1));
    f.check(
        risk_stride >= 1 && snapshot_stride >= 1 && risk_stride % snapshot_stride == 0,
        "risk_stride: must be a positive multiple of snapshot_stride",
    );
    let n_mc: usize = f.get("n_mc", "a positive integer").unwrap_or(2000);
    f.check(n_mc >= 1, "n_mc: must be at least 1");
    let n_random_masks: usize = f.get("n_random_masks", "a non-negative integer").unwrap_or(0);
    let delta: f64 = f.get("delta", "a number").unwrap_or(0.05);
    f.check(delta > 0.0 && delta < 1.0, format!("delta: must lie in (0, 1), got {delta}"));
    let theory = match f.raw("theory").unwrap_or("auto") {
        "auto" => TheoryMode::Auto,
        "true" => TheoryMode::On,
        "false" => TheoryMode::Off,
        other => {
            f.issues.push(format!("theory: expected auto, true or false, got '{other}'"));
            TheoryMode::Auto
        }
    };
    if let (TheoryMode::On, Some(e)) = (theory, eta) {
        f.check(
            e <= LN_2,
            format!("eta: theory checks require eta in (0, ln 2] = (0, 0.6931...], got {e}"),
        );
    }
    if theory == TheoryMode::On && variant == Variant::Inverted {
        f.issues.push("theory: checks are stated for variant = standard".into());
    }
    let checkpoint_stride: usize = f.get("checkpoint_stride", "a non-negative integer").unwrap_or(0);
    let output = PathBuf::from(f.raw("output").unwrap_or("out"));
    let threads: usize = f
        .get("threads", "a positive integer")
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    f.check(threads >= 1, "threads: must be at least 1");
    let holdout: f64 = f.get("holdout", "a number").unwrap_or(0.2);
    f.check(holdout > 0.0 && holdout < 1.0, format!("holdout: must lie in (0, 1), got {holdout}"));

    if !fields.issues.is_empty() {
        return Err(ConfigError { issues: fields.issues });
    }
    Ok(ExperimentSpec {
        name,
        data: data.expect("checked"),
        widths: widths.expect("checked"),
        keep: keep.expect("checked"),
        iterations: t,
        eta: eta.expect("checked"),
        c,
        seed,
        n_seeds,
        variant,
        snapshot_stride,
        risk_stride,
        n_mc,
        n_random_masks,
        delta,
        theory,
        checkpoint_stride,
        output,
        threads,
        holdout,
    })
}
