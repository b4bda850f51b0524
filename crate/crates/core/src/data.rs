//! Data sources: a synthetic halfspace distribution with a closed-form margin
//! certificate, and binary MNIST as a real-data analog.
//!
//! Every example lives on the unit sphere. For the halfspace distribution the
//! feature map is the constant `ψ(z) = u*`, and
//!
//! ```text
//! E_{z,b}[ y ⟨u*, b·x·1{zᵀx ≥ 0}⟩ ] = q · y(u*ᵀx) · Pr{zᵀx ≥ 0} = q · y(u*ᵀx) / 2 ≥ q·γ₀/2
//! ```
//!
//! so the margin `γ = q·γ₀/2` is certified analytically.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::numerics::{dot, norm_sq, RngStream};

/// Rejection sampling needs a non-empty acceptance cap.
pub const MAX_GAMMA0: f64 = 0.999;

const UNIT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    /// +1 or -1.
    pub y: f64,
}

impl Example {
    /// Builds an example, checking the label and that `x` is a unit vector.
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        if y != 1.0 && y != -1.0 {
            return domain(format!("label must be ±1, got {y}"));
        }
        let n = norm_sq(&x).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return domain(format!("input must have unit norm, got {n}"));
        }
        Ok(Self { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Halfspace,
    MnistBinary,
}

/// The feature map `ψ` certifying the margin assumption. Only bounded maps
/// are representable; both variants satisfy `‖ψ(z)‖ ≤ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// `z ↦ u` for a fixed vector with `‖u‖ ≤ 1`.
    Constant(Vec<f64>),
    Zero,
}

impl FeatureMap {
    /// `⟨ψ(z), x⟩`. Both supported maps ignore `z`.
    pub fn project(&self, _z: &[f64], x: &[f64]) -> f64 {
        match self {
            FeatureMap::Constant(u) => dot(u, x),
            FeatureMap::Zero => 0.0,
        }
    }

    /// `ψ(z)` written into `out`.
    pub fn eval_into(&self, _z: &[f64], out: &mut [f64]) {
        match self {
            FeatureMap::Constant(u) => out.copy_from_slice(u),
            FeatureMap::Zero => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub kind: DataKind,
    pub u_star: Vec<f64>,
    /// Halfspace only: minimal `|u*ᵀx|` of accepted samples.
    pub gamma0: f64,
    /// Keep-probability the margin is stated for.
    pub q: f64,
    pub psi: FeatureMap,
}

impl MarginSpec {
    pub fn halfspace(u_star: Vec<f64>, gamma0: f64, q: f64) -> Result<Self> {
        if u_star.is_empty() {
            return domain("u_star must be non-empty");
        }
        let n = norm_sq(&u_star).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return domain(format!("u_star must have unit norm, got {n}"));
        }
        if !(gamma0 > 0.0 && gamma0 <= MAX_GAMMA0) {
            return domain(format!("gamma0 must lie in (0, {MAX_GAMMA0}], got {gamma0}"));
        }
        check_q(q)?;
        Ok(Self {
            kind: DataKind::Halfspace,
            psi: FeatureMap::Constant(u_star.clone()),
            u_star,
            gamma0,
            q,
        })
    }

    /// Halfspace with `u* = e₁`.
    pub fn axis_halfspace(d: usize, gamma0: f64, q: f64) -> Result<Self> {
        if d == 0 {
            return domain("dimension must be positive");
        }
        let mut u = vec![0.0; d];
        u[0] = 1.0;
        Self::halfspace(u, gamma0, q)
    }

    /// MNIST spec with a heuristic direction (e.g. from [`fit_linear_direction`]).
    pub fn mnist(u_star: Vec<f64>, q: f64) -> Result<Self> {
        let n = norm_sq(&u_star).sqrt();
        if n > 1.0 + UNIT_TOL {
            return domain(format!("psi must be bounded by 1, got norm {n}"));
        }
        check_q(q)?;
        Ok(Self {
            kind: DataKind::MnistBinary,
            psi: FeatureMap::Constant(u_star.clone()),
            u_star,
            gamma0: 0.0,
            q,
        })
    }

    pub fn dim(&self) -> usize {
        self.u_star.len()
    }

    /// The same distribution certified at a different keep-probability.
    pub fn with_q(&self, q: f64) -> Result<Self> {
        check_q(q)?;
        Ok(Self { q, ..self.clone() })
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return domain(format!("keep-probability must lie in [0, 1], got {q}"));
    }
    Ok(())
}

/// Uniform-on-the-sphere sampler conditioned on `|u*ᵀx| ≥ γ₀`, labelled by
/// `sign(u*ᵀx)`. Tracks trial counts so the acceptance rate is observable.
#[derive(Clone, Debug)]
pub struct HalfspaceSampler {
    rng: RngStream,
    u_star: Vec<f64>,
    gamma0: f64,
    pub trials: u64,
    pub accepted: u64,
}

impl HalfspaceSampler {
    pub fn new(rng: RngStream, spec: &MarginSpec) -> Result<Self> {
        if spec.kind != DataKind::Halfspace {
            return Err(Error::Unsupported("halfspace sampler on a non-halfspace spec".into()));
        }
        if !(spec.gamma0 > 0.0 && spec.gamma0 <= MAX_GAMMA0) {
            return domain(format!("gamma0 must lie in (0, {MAX_GAMMA0}], got {}", spec.gamma0));
        }
        Ok(Self {
            rng,
            u_star: spec.u_star.clone(),
            gamma0: spec.gamma0,
            trials: 0,
            accepted: 0,
        })
    }

    pub fn sample(&mut self) -> Example {
        let d = self.u_star.len();
        let mut x = vec![0.0; d];
        loop {
            self.trials += 1;
            x.iter_mut().for_each(|v| *v = self.rng.standard_normal());
            let n = norm_sq(&x).sqrt();
            if n == 0.0 {
                continue;
            }
            x.iter_mut().for_each(|v| *v /= n);
            let s = dot(&self.u_star, &x);
            if s.abs() >= self.gamma0 {
                self.accepted += 1;
                let y = if s >= 0.0 { 1.0 } else { -1.0 };
                return Example { x, y };
            }
        }
    }
}

impl Iterator for HalfspaceSampler {
    type Item = Example;

    fn next(&mut self) -> Option<Example> {
        Some(self.sample())
    }
}

pub fn sample_halfspace(rng: RngStream, spec: &MarginSpec, n: usize) -> Result<Vec<Example>> {
    let mut sampler = HalfspaceSampler::new(rng, spec)?;
    Ok((0..n).map(|_| sampler.sample()).collect())
}

/// The analytically certified margin `q·γ₀/2` of the halfspace construction.
pub fn certified_margin(spec: &MarginSpec) -> Result<f64> {
    match spec.kind {
        DataKind::Halfspace => Ok(spec.q * spec.gamma0 / 2.0),
        DataKind::MnistBinary => Err(Error::Unsupported(
            "no certified margin for MNIST; use estimate_margin".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginEstimate {
    /// Smallest per-example Monte Carlo margin.
    pub min: f64,
    /// Standard error of the estimate attaining the minimum.
    pub se: f64,
    pub argmin: usize,
}

impl MarginEstimate {
    /// `min − 3·SE`, the value fed to the bound formulas for estimated margins.
    pub fn lower(&self) -> f64 {
        self.min - 3.0 * self.se
    }
}

/// Monte Carlo estimate of `E_{z,b}[y⟨ψ(z), b·x·1{zᵀx ≥ 0}⟩]` per example,
/// minimised over the examples.
///
/// Both supported feature maps are constant in `z`, so only the scalar
/// `zᵀx ~ N(0, ‖x‖²)` enters; it is drawn directly instead of a full
/// `d`-dimensional `z`, which is exact in distribution.
pub fn estimate_margin(
    rng: &mut RngStream,
    spec: &MarginSpec,
    examples: &[Example],
    n_mc: usize,
) -> Result<MarginEstimate> {
    if examples.is_empty() {
        return domain("margin estimate over an empty example list");
    }
    if n_mc == 0 {
        return domain("n_mc must be at least 1");
    }
    let mut best = MarginEstimate {
        min: f64::INFINITY,
        se: 0.0,
        argmin: 0,
    };
    for (i, ex) in examples.iter().enumerate() {
        check_len("example dimension", spec.dim(), ex.dim())?;
        let xnorm = norm_sq(&ex.x).sqrt();
        let proj = ex.y * spec.psi.project(&[], &ex.x);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n_mc {
            let s = xnorm * rng.standard_normal();
            let keep = rng.bernoulli(spec.q);
            let v = if keep && s >= 0.0 { proj } else { 0.0 };
            sum += v;
            sum_sq += v * v;
        }
        let n = n_mc as f64;
        let mean = sum / n;
        let var = if n_mc > 1 {
            ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        if mean < best.min {
            best = MarginEstimate {
                min: mean,
                se: (var / n).sqrt(),
                argmin: i,
            };
        }
    }
    Ok(best)
}

/// Unit-norm separating direction for MNIST: full-batch logistic
/// regression (no bias) by gradient descent, normalised. Heuristic only; it
/// provides the `ψ` used to report an estimated margin.
pub fn fit_linear_direction(examples: &[Example], iterations: usize, lr: f64) -> Result<Vec<f64>> {
    let Some(first) = examples.first() else {
        return domain("cannot fit a direction to no examples");
    };
    let d = first.dim();
    let mut u = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let n = examples.len() as f64;
    for _ in 0..iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for ex in examples {
            check_len("example dimension", d, ex.dim())?;
            let coef = ex.y * crate::numerics::neg_deriv(ex.y * dot(&u, &ex.x));
            grad.iter_mut().zip(&ex.x).for_each(|(g, x)| *g += coef * x);
        }
        u.iter_mut().zip(&grad).for_each(|(w, g)| *w += lr * g / n);
    }
    let norm = norm_sq(&u).sqrt();
    if norm == 0.0 {
        return domain("fitted direction is zero");
    }
    u.iter_mut().for_each(|v| *v /= norm);
    Ok(u)
}

// ---------------------------------------------------------------------------
// IDX files

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, one `rows*cols` block per image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            msg: format!("truncated header: need 4 bytes, file has {}", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| Error::Parse {
        offset: bytes.len() as u64,
        msg: format!("truncated body: expected {len} bytes from offset {offset}"),
    })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let pixels = body(bytes, 16, n * rows * cols)?.to_vec();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_be_u32(bytes, 4)? as usize;
    Ok(body(bytes, 8, n)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Locates the training image/label pair inside `dir`, accepting both the
/// `train-images-idx3-ubyte` and `train-images.idx3-ubyte` spellings.
pub fn mnist_files(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let find = |names: &[&str]| -> Result<PathBuf> {
        names
            .iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("none of {names:?} found in {}", dir.display()),
                ))
            })
    };
    Ok((
        find(&["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
        find(&["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
    ))
}

/// Converts parsed IDX records into unit-norm binary examples, preserving file
/// order. All-zero images cannot be normalised and are skipped.
pub fn binary_examples(
    images: &IdxImages,
    labels: &[u8],
    digit_pos: u8,
    digit_neg: u8,
) -> Result<Vec<Example>> {
    if digit_pos == digit_neg {
        return domain(format!("positive and negative digit are both {digit_pos}"));
    }
    check_len("label count", images.len(), labels.len())?;
    let mut out = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let y = if label == digit_pos {
            1.0
        } else if label == digit_neg {
            -1.0
        } else {
            continue;
        };
        let x: Vec<f64> = images.image(i).iter().map(|&p| p as f64).collect();
        let n = norm_sq(&x).sqrt();
        if n == 0.0 {
            log::warn!("skipping all-zero image at index {i}");
            continue;
        }
        out.push(Example {
            x: x.into_iter().map(|v| v / n).collect(),
            y,
        });
    }
    Ok(out)
}

pub fn load_mnist_binary(dir: &Path, digit_pos: u8, digit_neg: u8) -> Result<Vec<Example>> {
    if digit_pos == digit_neg {
        return domain(format!("positive and negative digit are both {digit_pos}"));
    }
    let (img_path, lbl_path) = mnist_files(dir)?;
    let images = parse_idx_images(&fs::read(img_path)?)?;
    let labels = parse_idx_labels(&fs::read(lbl_path)?)?;
    binary_examples(&images, &labels, digit_pos, digit_neg)
}

// ---------------------------------------------------------------------------
// Text export: one example per line, `y x_1 ... x_d`, 17 significant digits.

pub fn write_examples<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for ex in examples {
        write!(w, "{}", if ex.y > 0.0 { "1" } else { "-1" })?;
        for v in &ex.x {
            write!(w, " {v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<Example>> {
    let mut out: Vec<Example> = Vec::new();
    let mut offset = 0u64;
    for line in r.lines() {
        let line = line?;
        let line_len = line.len() as u64 + 1;
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let bad = |msg: String| Error::Parse { offset, msg };
            let mut fields = trimmed.split_whitespace();
            let y = match fields.next() {
                Some("1") | Some("+1") => 1.0,
                Some("-1") => -1.0,
                other => return Err(bad(format!("bad label {other:?}"))),
            };
            let x = fields
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("bad value {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if let Some(prev) = out.first() {
                if prev.dim() != x.len() {
                    return Err(bad(format!("expected {} values, got {}", prev.dim(), x.len())));
                }
            }
            out.push(Example { x, y });
        }
        offset += line_len;
    }
    Ok(out)
}
