//! The two-layer ReLU network `f(x; W) = (1/√m) aᵀσ(Wx)`, its dropout
//! sub-networks `g(W; x, B) = (1/√m) aᵀBσ(Wx)` and their exact gradients.
//!
//! The output signs `a` are drawn once at initialization and never trained.
//! The ReLU derivative at zero is taken as 1, i.e. a unit is active when
//! `w_rᵀx ≥ 0`, which makes `⟨∇g(W), W⟩ = g(W)` hold exactly.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{check_len, domain, Error, Result};
use crate::numerics::{dot, norm_sq, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    /// Hidden weights, `m × d`, row `r` is `w_r`. Always in standard layout.
    pub w: Array2<f64>,
    /// Output signs, each exactly ±1.
    pub a: Vec<f64>,
}

impl NetworkParams {
    pub fn new(w: Array2<f64>, a: Vec<f64>) -> Result<Self> {
        check_len("sign vector length", w.nrows(), a.len())?;
        if w.nrows() == 0 || w.ncols() == 0 {
            return domain("network must have positive width and dimension");
        }
        if a.iter().any(|&s| s != 1.0 && s != -1.0) {
            return domain("output signs must be exactly ±1");
        }
        let w = w.as_standard_layout().into_owned();
        Ok(Self { w, a })
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.dim();
        &self.w.as_slice().expect("standard layout")[r * d..(r + 1) * d]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.w.as_slice_mut().expect("standard layout")[r * d..(r + 1) * d]
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.width())
            .map(|r| norm_sq(self.row(r)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Same signs, weights multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            w: &self.w * alpha,
            a: self.a.clone(),
        }
    }

    /// Writes `w_rᵀx` for every row into `out`.
    #[inline]
    pub fn preactivations_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let w = self.w.as_slice().expect("standard layout");
        for (o, row) in out.iter_mut().zip(w.chunks_exact(d)) {
            *o = dot(row, x);
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_len("input dimension", self.dim(), x.len())
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        check_len("mask length", self.width(), mask.len())
    }
}

/// Diagonal Bernoulli pattern `B`; `keep[r]` is `b_r = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub q: f64,
}

impl DropoutMask {
    pub fn ones(m: usize) -> Self {
        Self {
            keep: vec![true; m],
            q: 1.0,
        }
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            keep: vec![false; m],
            q: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// `‖B‖₀`, the number of kept units.
    pub fn active(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Redraws every bit in place.
    pub fn resample(&mut self, rng: &mut RngStream) {
        let q = self.q;
        self.keep.iter_mut().for_each(|k| *k = rng.bernoulli(q));
    }
}

pub fn sample_mask(rng: &mut RngStream, m: usize, q: f64) -> Result<DropoutMask> {
    if !(0.0..=1.0).contains(&q) {
        return domain(format!("keep-probability must lie in [0, 1], got {q}"));
    }
    let mut mask = DropoutMask {
        keep: vec![false; m],
        q,
    };
    mask.resample(rng);
    Ok(mask)
}

/// Gaussian hidden rows and uniform ±1 signs, drawn in that order.
pub fn init_network(rng: &mut RngStream, m: usize, d: usize) -> Result<NetworkParams> {
    if m == 0 || d == 0 {
        return domain(format!("network shape must be positive, got m={m}, d={d}"));
    }
    let w = Array2::from_shape_simple_fn((m, d), || rng.standard_normal());
    let a = (0..m).map(|_| rng.sign()).collect();
    Ok(NetworkParams { w, a })
}

/// Redraws the initialization from the same stream until every row norm is
/// at most `bound`.
pub fn init_network_bounded(
    rng: &mut RngStream,
    m: usize,
    d: usize,
    bound: f64,
    max_attempts: usize,
) -> Result<(NetworkParams, usize)> {
    for attempt in 1..=max_attempts {
        let params = init_network(rng, m, d)?;
        if params.max_row_norm() <= bound {
            return Ok((params, attempt));
        }
    }
    Err(Error::Precondition(format!(
        "no initialization with max row norm ≤ {bound} in {max_attempts} attempts"
    )))
}

/// `(1/√m) Σ_r a_r σ(w_rᵀx)`.
pub fn forward_full(params: &NetworkParams, x: &[f64]) -> Result<f64> {
    params.check_input(x)?;
    Ok(forward_unchecked(params, None, x))
}

/// `(1/√m) Σ_r a_r b_r σ(w_rᵀx)`.
pub fn forward_sub(params: &NetworkParams, mask: &DropoutMask, x: &[f64]) -> Result<f64> {
    params.check_input(x)?;
    params.check_mask(mask)?;
    Ok(forward_unchecked(params, Some(mask), x))
}

pub(crate) fn forward_unchecked(params: &NetworkParams, mask: Option<&DropoutMask>, x: &[f64]) -> f64 {
    let mut sum = 0.0;
    for r in 0..params.width() {
        if mask.is_some_and(|m| !m.keep[r]) {
            continue;
        }
        let z = dot(params.row(r), x);
        if z > 0.0 {
            sum += params.a[r] * z;
        }
    }
    sum / (params.width() as f64).sqrt()
}

/// `∂g/∂w_r = (1/√m) a_r b_r 1{w_rᵀx ≥ 0} x`, returned densely.
pub fn grad_sub(params: &NetworkParams, mask: &DropoutMask, x: &[f64]) -> Result<Array2<f64>> {
    params.check_input(x)?;
    params.check_mask(mask)?;
    let (m, d) = (params.width(), params.dim());
    let scale = 1.0 / (m as f64).sqrt();
    let mut g = Array2::zeros((m, d));
    for r in 0..m {
        if mask.keep[r] && dot(params.row(r), x) >= 0.0 {
            let coef = scale * params.a[r];
            g.row_mut(r)
                .iter_mut()
                .zip(x)
                .for_each(|(gi, xi)| *gi = coef * xi);
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Checkpoints: header (m: u64, d: u64, q: f64, t: u64), then `a` as signed
// bytes, then `W` row-major; all multi-byte values little-endian.

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub q: f64,
    pub iteration: u64,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &NetworkParams, q: f64, iteration: u64) -> Result<()> {
    w.write_all(&(params.width() as u64).to_le_bytes())?;
    w.write_all(&(params.dim() as u64).to_le_bytes())?;
    w.write_all(&q.to_le_bytes())?;
    w.write_all(&iteration.to_le_bytes())?;
    let signs: Vec<u8> = params.a.iter().map(|&s| (s as i8) as u8).collect();
    w.write_all(&signs)?;
    for v in params.w.as_slice().expect("standard layout") {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut offset = 0u64;
    let mut take = |r: &mut R, buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::Parse {
            offset,
            msg: format!("truncated checkpoint: {e}"),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut b8 = [0u8; 8];
    take(&mut r, &mut b8)?;
    let m = u64::from_le_bytes(b8) as usize;
    take(&mut r, &mut b8)?;
    let d = u64::from_le_bytes(b8) as usize;
    take(&mut r, &mut b8)?;
    let q = f64::from_le_bytes(b8);
    take(&mut r, &mut b8)?;
    let iteration = u64::from_le_bytes(b8);
    if m == 0 || d == 0 {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("invalid shape m={m}, d={d}"),
        });
    }
    let mut signs = vec![0u8; m];
    take(&mut r, &mut signs)?;
    let a = signs.iter().map(|&b| (b as i8) as f64).collect();
    let mut raw = vec![0u8; m * d * 8];
    take(&mut r, &mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let w = Array2::from_shape_vec((m, d), data).expect("shape matches length");
    let params = NetworkParams::new(w, a).map_err(|e| Error::Parse {
        offset: 32,
        msg: e.to_string(),
    })?;
    Ok(Checkpoint {
        params,
        q,
        iteration,
    })
}
