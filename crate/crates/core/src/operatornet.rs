//! Operator learning: FFT, spectral convolution, DeepONet and the Fourier neural operator.

use crate::autodiff::{Op, Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{forward_on_tape, Activation, MlpConfig, MlpParams, MlpVars};
use crate::optim::{minibatch_train, Optimizer, OptimizerKind, RunStatus, Schedule, TrainOutcome};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    /// `e^{i theta}`.
    pub fn cis(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> f64 {
        self.norm_sqr().sqrt()
    }
}

impl Add for Complex {
    type Output = Complex;
    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Complex;
    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(invalid(format!("FFT length {n} is not a power of two")));
    }
    Ok(())
}

/// In-place iterative radix-2 transform `X[k] = sum x[n] e^{-+2 pi i kn/N}`, unnormalized.
fn fft_in_place(x: &mut [Complex], inverse: bool) {
    let n = x.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            x.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let w = Complex::cis(sign * 2.0 * PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut wk = Complex::new(1.0, 0.0);
            for k in 0..len / 2 {
                let a = x[start + k];
                let b = x[start + k + len / 2] * wk;
                x[start + k] = a + b;
                x[start + k + len / 2] = a - b;
                wk = wk * w;
            }
        }
        len <<= 1;
    }
}

/// Forward DFT `X[k] = sum_n x[n] e^{-2 pi i kn/N}` for power-of-two lengths.
pub fn fft(x: &[Complex]) -> Result<Vec<Complex>> {
    check_pow2(x.len())?;
    let mut y = x.to_vec();
    fft_in_place(&mut y, false);
    Ok(y)
}

/// Inverse of [`fft`] including the `1/N` factor.
pub fn ifft(x: &[Complex]) -> Result<Vec<Complex>> {
    check_pow2(x.len())?;
    let mut y = x.to_vec();
    fft_in_place(&mut y, true);
    let s = 1.0 / y.len() as f64;
    y.iter_mut().for_each(|v| *v = v.scale(s));
    Ok(y)
}

/// O(N^2) reference transform with the same convention as [`fft`].
pub fn naive_dft(x: &[Complex]) -> Vec<Complex> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::ZERO, |acc, (j, &v)| {
                acc + v * Complex::cis(-2.0 * PI * ((k * j) % n) as f64 / n as f64)
            })
        })
        .collect()
}

/// Row-column 2D transform of a row-major `n1 x n2` array, unnormalized.
fn fft2_in_place(x: &mut [Complex], n1: usize, n2: usize, inverse: bool) {
    if n2 > 1 {
        for row in x.chunks_mut(n2) {
            fft_in_place(row, inverse);
        }
    }
    if n1 > 1 {
        let mut col = vec![Complex::ZERO; n1];
        for c in 0..n2 {
            for r in 0..n1 {
                col[r] = x[r * n2 + c];
            }
            fft_in_place(&mut col, inverse);
            for r in 0..n1 {
                x[r * n2 + c] = col[r];
            }
        }
    }
}

/// Real field on the periodic grid `x = (m h1, n h2)`, `h = L / N`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction2D {
    pub n1: usize,
    pub n2: usize,
    pub l1: f64,
    pub l2: f64,
    pub values: Vec<f64>,
}

impl GridFunction2D {
    pub fn new(n1: usize, n2: usize, l1: f64, l2: f64, values: Vec<f64>) -> Result<Self> {
        check_pow2(n1)?;
        check_pow2(n2)?;
        if values.len() != n1 * n2 || !(l1 > 0.0) || !(l2 > 0.0) {
            return Err(invalid(format!(
                "grid {n1}x{n2} on [0,{l1}]x[0,{l2}] with {} values",
                values.len()
            )));
        }
        Ok(Self { n1, n2, l1, l2, values })
    }

    /// Samples `f(x1, x2)` at the grid nodes.
    pub fn sample(n1: usize, n2: usize, l1: f64, l2: f64, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let (h1, h2) = (l1 / n1 as f64, l2 / n2 as f64);
        let mut v = Vec::with_capacity(n1 * n2);
        for m in 0..n1 {
            for n in 0..n2 {
                v.push(f(m as f64 * h1, n as f64 * h2));
            }
        }
        Self::new(n1, n2, l1, l2, v)
    }

    pub fn at(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.n2 + n]
    }

    /// `sqrt(h1 h2 sum u^2)`.
    pub fn l2_norm(&self) -> f64 {
        let cell = self.l1 * self.l2 / (self.n1 * self.n2) as f64;
        (cell * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
}

/// Coefficients `u^[r, s] = (h1 h2 / L1 L2) sum u[m, n] e^{-2 pi i (r m / N1 + s n / N2)}`.
pub fn dft2(u: &GridFunction2D) -> Vec<Complex> {
    let mut x: Vec<Complex> = u.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_in_place(&mut x, u.n1, u.n2, false);
    let s = 1.0 / (u.n1 * u.n2) as f64;
    x.iter_mut().for_each(|v| *v = v.scale(s));
    x
}

/// Synthesis `u[m, n] = sum u^[r, s] e^{2 pi i (...)}`; returns the real part and the largest
/// imaginary magnitude discarded.
pub fn idft2(coeffs: &[Complex], n1: usize, n2: usize, l1: f64, l2: f64) -> Result<(GridFunction2D, f64)> {
    check_pow2(n1)?;
    check_pow2(n2)?;
    if coeffs.len() != n1 * n2 {
        return Err(invalid(format!("{} coefficients for a {n1}x{n2} grid", coeffs.len())));
    }
    let mut x = coeffs.to_vec();
    fft2_in_place(&mut x, n1, n2, true);
    let imag = x.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    let g = GridFunction2D::new(n1, n2, l1, l2, x.iter().map(|v| v.re).collect())?;
    Ok((g, imag))
}

/// Geometry of a batched spectral convolution.
///
/// Fields are stored as rows `(batch, m, n)` with one column per channel. Kernel weights have
/// shape `(modes, c_out, c_in, 2)` over the half mode set of [`half_modes`]; the conjugate
/// half follows from symmetry, and the imaginary part of the `(0, 0)` entry is ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralGeom {
    pub batch: usize,
    pub n1: usize,
    pub n2: usize,
    pub k1: usize,
    pub k2: usize,
    pub l1: f64,
    pub l2: f64,
    pub c_in: usize,
    pub c_out: usize,
}

impl SpectralGeom {
    pub fn validate(&self) -> Result<()> {
        check_pow2(self.n1)?;
        check_pow2(self.n2)?;
        if self.batch == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(invalid("spectral convolution needs a positive batch and channel counts"));
        }
        if 2 * self.k1 >= self.n1.max(2) || 2 * self.k2 >= self.n2.max(2) {
            return Err(invalid(format!(
                "retained modes ({}, {}) must stay below half the grid ({}, {})",
                self.k1, self.k2, self.n1, self.n2
            )));
        }
        if !(self.l1 > 0.0) || !(self.l2 > 0.0) {
            return Err(invalid("domain lengths must be positive"));
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn modes(&self) -> usize {
        half_mode_count(self.k1, self.k2)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.modes(), self.c_out, self.c_in, 2]
    }

    fn wrap(&self, q: (i64, i64)) -> usize {
        let m = q.0.rem_euclid(self.n1 as i64) as usize;
        let n = q.1.rem_euclid(self.n2 as i64) as usize;
        m * self.n2 + n
    }
}

/// `(0,0)`, then `(0,n)` for `1 <= n <= k2`, then `(m,n)` for `1 <= m <= k1`, `|n| <= k2`.
pub fn half_modes(k1: usize, k2: usize) -> Vec<(i64, i64)> {
    let (k1, k2) = (k1 as i64, k2 as i64);
    let mut v = vec![(0, 0)];
    v.extend((1..=k2).map(|n| (0, n)));
    for m in 1..=k1 {
        v.extend((-k2..=k2).map(|n| (m, n)));
    }
    v
}

pub fn half_mode_count(k1: usize, k2: usize) -> usize {
    1 + k2 + k1 * (2 * k2 + 1)
}

fn check_field(x: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if x.shape() != [rows, cols] {
        return Err(invalid(format!("{what} has shape {:?}, expected [{rows}, {cols}]", x.shape())));
    }
    Ok(())
}

/// Normalized transforms of every (batch, channel) field: `out[b][c]` has `n1 * n2` coefficients.
fn forward_fields(x: &Tensor, g: &SpectralGeom, channels: usize) -> Vec<Vec<Vec<Complex>>> {
    let np = g.points();
    let s = 1.0 / np as f64;
    let d = x.data();
    (0..g.batch)
        .map(|b| {
            (0..channels)
                .map(|c| {
                    let mut f: Vec<Complex> = (0..np).map(|p| Complex::new(d[(b * np + p) * channels + c], 0.0)).collect();
                    fft2_in_place(&mut f, g.n1, g.n2, false);
                    f.iter_mut().for_each(|v| *v = v.scale(s));
                    f
                })
                .collect()
        })
        .collect()
}

/// Applies per-mode matrices `mult[t]` (`rows x cols`, row-major) at the half modes and their
/// conjugates at the mirrored modes, then synthesizes real fields with `rows` channels.
fn modal_map(x: &Tensor, g: &SpectralGeom, cols: usize, rows: usize, mult: &[Vec<Complex>]) -> Result<Tensor> {
    let modes = half_modes(g.k1, g.k2);
    let np = g.points();
    let xhat = forward_fields(x, g, cols);
    let mut out = vec![0.0; g.batch * np * rows];
    for (b, xb) in xhat.iter().enumerate() {
        let mut vhat = vec![vec![Complex::ZERO; np]; rows];
        for (t, &q) in modes.iter().enumerate() {
            let (pos, neg) = (g.wrap(q), g.wrap((-q.0, -q.1)));
            for i in 0..rows {
                let mut acc_p = Complex::ZERO;
                let mut acc_n = Complex::ZERO;
                for (j, xj) in xb.iter().enumerate() {
                    let m = mult[t][i * cols + j];
                    acc_p = acc_p + m * xj[pos];
                    acc_n = acc_n + m.conj() * xj[neg];
                }
                vhat[i][pos] = acc_p;
                if t > 0 {
                    vhat[i][neg] = acc_n;
                }
            }
        }
        for (i, mut f) in vhat.into_iter().enumerate() {
            fft2_in_place(&mut f, g.n1, g.n2, true);
            for (p, v) in f.iter().enumerate() {
                out[(b * np + p) * rows + i] = v.re;
            }
        }
    }
    Tensor::new(vec![g.batch * np, rows], out)
}

/// Effective multipliers `K[q] = L1 L2 conj(kappa[q])` at the half modes, `(c_out x c_in)` each.
fn multipliers(w: &Tensor, g: &SpectralGeom) -> Vec<Vec<Complex>> {
    let c = g.l1 * g.l2;
    let per = g.c_out * g.c_in;
    (0..g.modes())
        .map(|t| {
            (0..per)
                .map(|k| {
                    let re = w.data()[(t * per + k) * 2];
                    let im = if t == 0 { 0.0 } else { w.data()[(t * per + k) * 2 + 1] };
                    Complex::new(c * re, -c * im)
                })
                .collect()
        })
        .collect()
}

fn check_spectral(u: &Tensor, w: &Tensor, g: &SpectralGeom, u_cols: usize, what: &str) -> Result<()> {
    g.validate()?;
    check_field(u, g.batch * g.points(), u_cols, what)?;
    if w.shape() != g.weight_shape() {
        return Err(invalid(format!(
            "spectral weights have shape {:?}, expected {:?}",
            w.shape(),
            g.weight_shape()
        )));
    }
    Ok(())
}

/// `v_i = L1 L2 sum_{|m|<=k1, |n|<=k2} sum_j u^_j[m,n] kappa_ij[-m,-n] e^{2 pi i (...)}`.
pub fn spectral_apply(u: &Tensor, w: &Tensor, g: &SpectralGeom) -> Result<Tensor> {
    check_spectral(u, w, g, g.c_in, "spectral input")?;
    modal_map(u, g, g.c_in, g.c_out, &multipliers(w, g))
}

/// Transpose of [`spectral_apply`] with respect to `u`.
pub fn spectral_adjoint(gr: &Tensor, w: &Tensor, g: &SpectralGeom) -> Result<Tensor> {
    check_spectral(gr, w, g, g.c_out, "spectral cotangent")?;
    let k = multipliers(w, g);
    let kh: Vec<Vec<Complex>> = k
        .iter()
        .map(|m| {
            let mut t = vec![Complex::ZERO; m.len()];
            for i in 0..g.c_out {
                for j in 0..g.c_in {
                    t[j * g.c_out + i] = m[i * g.c_in + j].conj();
                }
            }
            t
        })
        .collect();
    modal_map(gr, g, g.c_out, g.c_in, &kh)
}

/// Gradient of `sum(gr * spectral_apply(u, w))` with respect to the weights.
pub fn spectral_weight_grad(u: &Tensor, gr: &Tensor, g: &SpectralGeom) -> Result<Tensor> {
    g.validate()?;
    check_field(u, g.batch * g.points(), g.c_in, "spectral input")?;
    check_field(gr, g.batch * g.points(), g.c_out, "spectral cotangent")?;
    let modes = half_modes(g.k1, g.k2);
    let np = g.points() as f64;
    let c = g.l1 * g.l2;
    let uhat = forward_fields(u, g, g.c_in);
    let ghat = forward_fields(gr, g, g.c_out);
    let shape = g.weight_shape();
    let mut out = vec![0.0; shape.iter().product()];
    for (ub, gb) in uhat.iter().zip(&ghat) {
        for (t, &q) in modes.iter().enumerate() {
            let (pos, neg) = (g.wrap(q), g.wrap((-q.0, -q.1)));
            for i in 0..g.c_out {
                for j in 0..g.c_in {
                    let ap = (ub[j][pos] * gb[i][pos].conj()).scale(np);
                    let idx = ((t * g.c_out + i) * g.c_in + j) * 2;
                    if t == 0 {
                        out[idx] += c * ap.re;
                    } else {
                        let an = (ub[j][neg] * gb[i][neg].conj()).scale(np);
                        out[idx] += c * (ap.re + an.re);
                        out[idx + 1] += c * (ap.im - an.im);
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Records a spectral convolution node.
pub fn spectral_on_tape(tape: &mut Tape, u: Var, w: Var, g: SpectralGeom) -> Result<Var> {
    tape.push(Op::Spectral(u, w, g))
}

/// Spectral kernel weights over the half mode set, with retained modes `|m| <= k1`, `|n| <= k2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralKernel {
    pub k1: usize,
    pub k2: usize,
    /// `(modes, c_out, c_in, 2)` holding `(re, im)` of `kappa` on the half mode set.
    pub weights: Tensor,
}

impl SpectralKernel {
    pub fn new(k1: usize, k2: usize, weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[0] != half_mode_count(k1, k2) || s[3] != 2 {
            return Err(invalid(format!("spectral weights shape {s:?} does not fit modes ({k1}, {k2})")));
        }
        let per = s[1] * s[2];
        if weights.data()[..per * 2].iter().skip(1).step_by(2).any(|&im| im != 0.0) {
            return Err(invalid("the (0, 0) mode must be real for a real-valued convolution"));
        }
        Ok(Self { k1, k2, weights })
    }

    /// `kappa_ij = delta_ij / (L1 L2)` on every retained mode.
    pub fn identity(channels: usize, k1: usize, k2: usize, l1: f64, l2: f64) -> Self {
        let modes = half_mode_count(k1, k2);
        let mut w = Tensor::zeros(&[modes, channels, channels, 2]);
        for t in 0..modes {
            for i in 0..channels {
                w.set(&[t, i, i, 0], 1.0 / (l1 * l2));
            }
        }
        Self { k1, k2, weights: w }
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.weights.shape()[1], self.weights.shape()[2])
    }

    /// `kappa` at the mode `(m, n)` using conjugate symmetry for the mirrored half.
    pub fn coefficient(&self, q: (i64, i64), i: usize, j: usize) -> Complex {
        let (co, ci) = self.channels();
        let lookup = |t: usize| {
            let idx = ((t * co + i) * ci + j) * 2;
            let im = if t == 0 { 0.0 } else { self.weights.data()[idx + 1] };
            Complex::new(self.weights.data()[idx], im)
        };
        let modes = half_modes(self.k1, self.k2);
        if let Some(t) = modes.iter().position(|&p| p == q) {
            lookup(t)
        } else if let Some(t) = modes.iter().position(|&p| p == (-q.0, -q.1)) {
            lookup(t).conj()
        } else {
            Complex::ZERO
        }
    }
}

/// Spectral convolution of a multichannel field (one grid per channel).
pub fn spectral_conv(u: &[GridFunction2D], kernel: &SpectralKernel) -> Result<Vec<GridFunction2D>> {
    let first = u.first().ok_or_else(|| invalid("no input channels"))?;
    if u.iter().any(|c| (c.n1, c.n2) != (first.n1, first.n2)) {
        return Err(invalid("channels live on different grids"));
    }
    let (c_out, c_in) = kernel.channels();
    if c_in != u.len() {
        return Err(invalid(format!("kernel expects {c_in} channels, got {}", u.len())));
    }
    let g = SpectralGeom {
        batch: 1,
        n1: first.n1,
        n2: first.n2,
        k1: kernel.k1,
        k2: kernel.k2,
        l1: first.l1,
        l2: first.l2,
        c_in,
        c_out,
    };
    let np = g.points();
    let mut rows = vec![0.0; np * c_in];
    for (j, ch) in u.iter().enumerate() {
        for p in 0..np {
            rows[p * c_in + j] = ch.values[p];
        }
    }
    let v = spectral_apply(&Tensor::new(vec![np, c_in], rows)?, &kernel.weights, &g)?;
    (0..c_out)
        .map(|i| GridFunction2D::new(g.n1, g.n2, g.l1, g.l2, (0..np).map(|p| v.data()[p * c_out + i]).collect()))
        .collect()
}

/// Fixed sensor locations for the branch network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSet {
    pub points: Vec<f64>,
}

impl SensorSet {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("sensor set is empty"));
        }
        let mut sorted = points.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.iter().any(|v| !v.is_finite()) {
            return Err(invalid("sensor points must be distinct and finite"));
        }
        Ok(Self { points })
    }

    /// `M` equispaced sensors covering `[lo, hi]` including both ends.
    pub fn uniform(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m < 2 {
            return Self::new(vec![lo]);
        }
        Self::new((0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.points.iter().map(|&y| f(y)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DeepOnet {
    pub sensors: SensorSet,
    pub branch_cfg: MlpConfig,
    pub trunk_cfg: MlpConfig,
    pub branch: MlpParams,
    pub trunk: MlpParams,
}

impl DeepOnet {
    pub fn new(sensors: SensorSet, branch_cfg: MlpConfig, trunk_cfg: MlpConfig, rng: &mut Rng) -> Result<Self> {
        let branch = MlpParams::init(&branch_cfg, rng)?;
        let trunk = MlpParams::init(&trunk_cfg, rng)?;
        Self::from_parts(sensors, branch_cfg, trunk_cfg, branch, trunk)
    }

    pub fn from_parts(
        sensors: SensorSet,
        branch_cfg: MlpConfig,
        trunk_cfg: MlpConfig,
        branch: MlpParams,
        trunk: MlpParams,
    ) -> Result<Self> {
        branch_cfg.validate()?;
        trunk_cfg.validate()?;
        if branch_cfg.input_dim() != sensors.len() {
            return Err(invalid(format!(
                "branch input width {} but {} sensors",
                branch_cfg.input_dim(),
                sensors.len()
            )));
        }
        if branch_cfg.output_dim() != trunk_cfg.output_dim() {
            return Err(invalid(format!(
                "branch outputs {} and trunk outputs {} must agree",
                branch_cfg.output_dim(),
                trunk_cfg.output_dim()
            )));
        }
        let m = Self {
            sensors,
            branch_cfg,
            trunk_cfg,
            branch,
            trunk,
        };
        m.check_params(&m.branch, &m.trunk)?;
        Ok(m)
    }

    fn check_params(&self, branch: &MlpParams, trunk: &MlpParams) -> Result<()> {
        branch.check(&self.branch_cfg)?;
        trunk.check(&self.trunk_cfg)
    }

    pub fn latent_dim(&self) -> usize {
        self.trunk_cfg.output_dim()
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut v = self.branch.to_tensors();
        v.extend(self.trunk.to_tensors());
        v
    }

    pub fn set_param_tensors(&mut self, ts: &[Tensor]) -> Result<()> {
        let nb = 2 * self.branch.layers.len();
        if ts.len() != nb + 2 * self.trunk.layers.len() {
            return Err(invalid("wrong number of DeepONet parameter tensors"));
        }
        let branch = MlpParams::from_tensors(&ts[..nb])?;
        let trunk = MlpParams::from_tensors(&ts[nb..])?;
        self.check_params(&branch, &trunk)?;
        self.branch = branch;
        self.trunk = trunk;
        Ok(())
    }

    /// `u(x) = sum_k beta_k(a) tau_k(x)` for one input sample and one location.
    pub fn forward(&self, a: &[f64], x: &[f64]) -> Result<f64> {
        if a.len() != self.sensors.len() {
            return Err(invalid(format!("{} sensor values for {} sensors", a.len(), self.sensors.len())));
        }
        let out = self.predict(&Tensor::new(vec![1, a.len()], a.to_vec())?, &[0], &Tensor::new(vec![1, x.len()], x.to_vec())?)?;
        Ok(out.item())
    }

    /// Outputs `(P, 1)` for rows of `x` paired with rows `fn_index` of the sensor matrix `inputs`.
    pub fn predict(&self, inputs: &Tensor, fn_index: &[usize], x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = MlpVars::constants(&mut tape, &self.branch);
        let t = MlpVars::constants(&mut tape, &self.trunk);
        let a = tape.constant(inputs.clone());
        let xv = tape.constant(x.clone());
        let out = self.record(&mut tape, &b, &t, a, fn_index, xv)?;
        Ok(tape.value(out).clone())
    }

    fn record(&self, tape: &mut Tape, b: &MlpVars, t: &MlpVars, a: Var, fn_index: &[usize], x: Var) -> Result<Var> {
        let (rows, _) = tape.value(x).dims2()?;
        if fn_index.len() != rows {
            return Err(invalid(format!("{} function indices for {rows} points", fn_index.len())));
        }
        let beta = forward_on_tape(tape, &self.branch_cfg, b, a)?.out;
        let tau = forward_on_tape(tape, &self.trunk_cfg, t, x)?.out;
        let beta = tape.gather_rows(beta, Arc::from(fn_index))?;
        let prod = tape.mul(beta, tau)?;
        tape.sum_cols(prod)
    }
}

/// Training triples `(a(y_1..y_M), x, u(x))` grouped by input function.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    /// `(F, M)` sensor values per input function.
    pub inputs: Tensor,
    pub fn_index: Vec<usize>,
    /// `(P, D)` evaluation points.
    pub x: Tensor,
    /// `(P, 1)` operator outputs.
    pub u: Tensor,
}

impl OperatorDataset {
    pub fn len(&self) -> usize {
        self.fn_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fn_index.is_empty()
    }

    /// Sub-dataset of the triples `idx`, keeping all input functions.
    pub fn select(&self, idx: &[usize]) -> Result<OperatorDataset> {
        let (_, d) = self.x.dims2()?;
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut u = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x.row(i));
            u.push(self.u.data()[i]);
        }
        Ok(OperatorDataset {
            inputs: self.inputs.clone(),
            fn_index: idx.iter().map(|&i| self.fn_index[i]).collect(),
            x: Tensor::new(vec![idx.len(), d], x)?,
            u: Tensor::column(u),
        })
    }
}

/// A scalar function on an interval, used as an operator input or output.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Builds `n_fn x n_pts` triples; each function gets its own uniformly random output points in
/// `[lo, hi]`.
#[allow(clippy::too_many_arguments)]
pub fn build_deeponet_dataset(
    mut sampler: impl FnMut(&mut Rng) -> ScalarFn,
    oracle: impl Fn(&ScalarFn) -> ScalarFn,
    sensors: &SensorSet,
    n_fn: usize,
    n_pts: usize,
    domain: (f64, f64),
    seed: u64,
) -> Result<OperatorDataset> {
    if n_fn == 0 || n_pts == 0 {
        return Err(invalid("dataset needs at least one function and one point"));
    }
    let mut rng = Rng::new(seed);
    let mut inputs = Vec::with_capacity(n_fn * sensors.len());
    let mut fn_index = Vec::with_capacity(n_fn * n_pts);
    let mut xs = Vec::with_capacity(n_fn * n_pts);
    let mut us = Vec::with_capacity(n_fn * n_pts);
    for f in 0..n_fn {
        let a = sampler(&mut rng);
        inputs.extend(sensors.sample(|y| a(y)));
        let sol = oracle(&a);
        for _ in 0..n_pts {
            let x = rng.uniform_in(domain.0, domain.1);
            fn_index.push(f);
            xs.push(x);
            us.push(sol(x));
        }
    }
    Ok(OperatorDataset {
        inputs: Tensor::new(vec![n_fn, sensors.len()], inputs)?,
        fn_index,
        x: Tensor::column(xs),
        u: Tensor::column(us),
    })
}

/// `x -> int_0^x a(t) dt` by the trapezoid rule with `n` panels on `[0, x]`.
pub fn antiderivative_oracle(n: usize) -> impl Fn(&ScalarFn) -> ScalarFn {
    move |a: &ScalarFn| {
        let a = a.clone();
        Arc::new(move |x: f64| {
            let h = x / n as f64;
            let inner: f64 = (1..n).map(|i| a(i as f64 * h)).sum();
            h * (0.5 * (a(0.0) + a(x)) + inner)
        }) as ScalarFn
    }
}

/// Random band-limited function `c0 + sum_k (a_k cos + b_k sin)(2 pi k t / period)` with
/// normal coefficients scaled by `scale / k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierSeries {
    pub period: f64,
    pub c0: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FourierSeries {
    pub fn random(rng: &mut Rng, modes: usize, scale: f64, period: f64) -> Self {
        let c0 = scale * rng.normal();
        let mut cos = Vec::with_capacity(modes);
        let mut sin = Vec::with_capacity(modes);
        for k in 1..=modes {
            cos.push(scale * rng.normal() / k as f64);
            sin.push(scale * rng.normal() / k as f64);
        }
        Self { period, c0, cos, sin }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let w = 2.0 * PI / self.period;
        self.c0
            + self
                .cos
                .iter()
                .zip(&self.sin)
                .enumerate()
                .map(|(i, (a, b))| {
                    let k = (i + 1) as f64;
                    a * (k * w * t).cos() + b * (k * w * t).sin()
                })
                .sum::<f64>()
    }

    /// Exact `int_0^x`.
    pub fn integral(&self, x: f64) -> f64 {
        let w = 2.0 * PI / self.period;
        self.c0 * x
            + self
                .cos
                .iter()
                .zip(&self.sin)
                .enumerate()
                .map(|(i, (a, b))| {
                    let kw = (i + 1) as f64 * w;
                    a * (kw * x).sin() / kw + b * (1.0 - (kw * x).cos()) / kw
                })
                .sum::<f64>()
    }

    pub fn into_fn(self) -> ScalarFn {
        Arc::new(move |t| self.eval(t))
    }
}

/// Physics residual points for `du/dx - s(x) = 0`: sensor inputs, function index, locations and
/// source values.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeResidual {
    pub inputs: Tensor,
    pub fn_index: Vec<usize>,
    pub x: Tensor,
    pub source: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeepOnetLoss {
    pub data: f64,
    pub physics: f64,
    pub total: f64,
}

struct DeepOnetTape {
    tape: Tape,
    vars: Vec<Var>,
    data: Option<Var>,
    physics: Option<Var>,
    total: Var,
}

fn record_deeponet_loss(
    model: &DeepOnet,
    data: Option<&OperatorDataset>,
    physics: Option<&DerivativeResidual>,
    lambda: f64,
) -> Result<DeepOnetTape> {
    let mut tape = Tape::new();
    let b = MlpVars::params(&mut tape, &model.branch);
    let t = MlpVars::params(&mut tape, &model.trunk);
    let mut vars = b.flat();
    vars.extend(t.flat());
    let mut terms = Vec::new();
    let data_v = match data {
        Some(d) => {
            let a = tape.constant(d.inputs.clone());
            let x = tape.constant(d.x.clone());
            let out = model.record(&mut tape, &b, &t, a, &d.fn_index, x)?;
            let target = tape.constant(d.u.clone());
            let r = tape.sub(out, target)?;
            let r2 = tape.square(r)?;
            let m = tape.mean(r2)?;
            terms.push(m);
            Some(m)
        }
        None => None,
    };
    let phys_v = match physics {
        Some(p) if lambda > 0.0 => {
            let a = tape.constant(p.inputs.clone());
            let x = tape.input(p.x.clone());
            let out = model.record(&mut tape, &b, &t, a, &p.fn_index, x)?;
            let du = tape.grad(out, &[x])?[0];
            let s = tape.constant(p.source.clone());
            let r = tape.sub(du, s)?;
            let r2 = tape.square(r)?;
            let m = tape.mean(r2)?;
            let scaled = tape.scale(m, lambda)?;
            terms.push(scaled);
            Some(m)
        }
        _ => None,
    };
    let total = match terms[..] {
        [] => return Err(invalid("DeepONet loss needs data or physics terms")),
        [one] => one,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!(),
    };
    tape.set_tip(total);
    Ok(DeepOnetTape {
        tape,
        vars,
        data: data_v,
        physics: phys_v,
        total,
    })
}

/// `Pi = Pi_d + lambda Pi_p` with `Pi_p` the mean squared residual of `du/dx - s`.
pub fn pideeponet_loss(
    model: &DeepOnet,
    data: Option<&OperatorDataset>,
    physics: Option<&DerivativeResidual>,
    lambda: f64,
) -> Result<DeepOnetLoss> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let r = record_deeponet_loss(model, data, physics, lambda)?;
    let get = |v: Option<Var>| v.map(|v| r.tape.value(v).item()).unwrap_or(0.0);
    Ok(DeepOnetLoss {
        data: get(r.data),
        physics: get(r.physics),
        total: r.tape.value(r.total).item(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub n_batch: usize,
    pub seed: u64,
}

/// Adam on the mean squared triple loss (plus an optional physics term on every step).
pub fn deeponet_train(
    model: &mut DeepOnet,
    data: &OperatorDataset,
    physics: Option<&DerivativeResidual>,
    lambda: f64,
    settings: TrainSettings,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(invalid("empty operator dataset"));
    }
    let mut params = model.param_tensors();
    let mut opt = Optimizer::new(OptimizerKind::adam(), settings.lr, Schedule::Constant);
    let base = model.clone();
    let outcome = minibatch_train(
        &mut params,
        data.len(),
        &mut opt,
        settings.epochs,
        settings.n_batch,
        settings.seed,
        |p, batch| {
            let mut m = base.clone();
            m.set_param_tensors(p)?;
            let sub = if batch.len() == data.len() { data.clone() } else { data.select(batch)? };
            let r = record_deeponet_loss(&m, Some(&sub), physics, lambda)?;
            let grads = r.tape.backward_scalar()?;
            let g = r.vars.iter().zip(p).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();
            Ok((r.tape.value(r.total).item(), g))
        },
        None,
    )?;
    if outcome.status == RunStatus::Completed {
        model.set_param_tensors(&params)?;
    }
    Ok(outcome)
}

/// `sqrt(sum (pred - u)^2 / sum u^2)`.
pub fn relative_l2(pred: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub width: usize,
    /// Number of middle (spectral) layers.
    pub layers: usize,
    pub k1: usize,
    pub k2: usize,
    pub activation: Activation,
    pub l1: f64,
    pub l2: f64,
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 {
            return Err(invalid("FNO needs positive channel counts"));
        }
        if !(self.l1 > 0.0 && self.l2 > 0.0) {
            return Err(invalid("FNO domain lengths must be positive"));
        }
        Ok(())
    }

    /// Default mode cutoff `min(12, N / 4)`.
    pub fn default_modes(n: usize) -> usize {
        12.min(n / 4)
    }

    pub fn geom(&self, batch: usize, n1: usize, n2: usize) -> SpectralGeom {
        SpectralGeom {
            batch,
            n1,
            n2,
            k1: self.k1,
            k2: self.k2,
            l1: self.l1,
            l2: self.l2,
            c_in: self.width,
            c_out: self.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnoLayer {
    /// `(H, H)` pointwise weights.
    pub w: Tensor,
    /// `(1, H)`.
    pub b: Tensor,
    pub kernel: SpectralKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnoParams {
    pub lift_w: Tensor,
    pub lift_b: Tensor,
    pub middle: Vec<FnoLayer>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl FnoParams {
    /// Glorot-uniform pointwise weights and uniform spectral weights of size `1 / (L1 L2 H)`.
    pub fn init(cfg: &FnoConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.width;
        let glorot = |rng: &mut Rng, o: usize, i: usize| {
            let lim = (6.0 / (o + i) as f64).sqrt();
            rng.uniform_tensor(&[o, i], -lim, lim)
        };
        let lift_w = glorot(rng, h, cfg.in_channels);
        let s = 1.0 / (cfg.l1 * cfg.l2 * h as f64);
        let modes = half_mode_count(cfg.k1, cfg.k2);
        let middle = (0..cfg.layers)
            .map(|_| {
                let w = glorot(rng, h, h);
                let mut kw = rng.uniform_tensor(&[modes, h, h, 2], -s, s);
                for k in 0..h * h {
                    kw.data_mut()[2 * k + 1] = 0.0;
                }
                FnoLayer {
                    w,
                    b: Tensor::zeros(&[1, h]),
                    kernel: SpectralKernel {
                        k1: cfg.k1,
                        k2: cfg.k2,
                        weights: kw,
                    },
                }
            })
            .collect();
        let proj_w = glorot(rng, 1, h);
        Ok(Self {
            lift_w,
            lift_b: Tensor::zeros(&[1, h]),
            middle,
            proj_w,
            proj_b: Tensor::zeros(&[1, 1]),
        })
    }

    /// `[lift_w, lift_b, (w, b, kappa) per layer, proj_w, proj_b]`.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut v = vec![self.lift_w.clone(), self.lift_b.clone()];
        for l in &self.middle {
            v.extend([l.w.clone(), l.b.clone(), l.kernel.weights.clone()]);
        }
        v.extend([self.proj_w.clone(), self.proj_b.clone()]);
        v
    }

    pub fn from_tensors(&self, ts: &[Tensor]) -> Result<Self> {
        if ts.len() != 4 + 3 * self.middle.len() {
            return Err(invalid("wrong number of FNO parameter tensors"));
        }
        let mut out = self.clone();
        for (dst, src) in out.to_tensors().iter().zip(ts) {
            if dst.shape() != src.shape() {
                return Err(invalid(format!("FNO parameter shape {:?} expected {:?}", src.shape(), dst.shape())));
            }
        }
        out.lift_w = ts[0].clone();
        out.lift_b = ts[1].clone();
        for (k, l) in out.middle.iter_mut().enumerate() {
            l.w = ts[2 + 3 * k].clone();
            l.b = ts[3 + 3 * k].clone();
            l.kernel.weights = ts[4 + 3 * k].clone();
        }
        let n = ts.len();
        out.proj_w = ts[n - 2].clone();
        out.proj_b = ts[n - 1].clone();
        Ok(out)
    }

    pub fn count(&self) -> usize {
        self.to_tensors().iter().map(Tensor::len).sum()
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row(y, b)
}

/// Records the FNO on `a` with rows `(batch, m, n)` and `in_channels` columns; returns the
/// `(batch * n1 * n2, 1)` output node.
pub fn fno_on_tape(
    tape: &mut Tape,
    cfg: &FnoConfig,
    vars: &[Var],
    a: Var,
    batch: usize,
    n1: usize,
    n2: usize,
) -> Result<Var> {
    cfg.validate()?;
    if vars.len() != 4 + 3 * cfg.layers {
        return Err(invalid("FNO parameter handles do not match the layer count"));
    }
    let geom = cfg.geom(batch, n1, n2);
    geom.validate()?;
    let (rows, cols) = tape.value(a).dims2()?;
    if rows != batch * n1 * n2 || cols != cfg.in_channels {
        return Err(invalid(format!(
            "FNO input {:?} does not match {batch} grids of {n1}x{n2} with {} channels",
            tape.value(a).shape(),
            cfg.in_channels
        )));
    }
    let mut v = affine(tape, a, vars[0], vars[1])?;
    for k in 0..cfg.layers {
        let (w, b, kappa) = (vars[2 + 3 * k], vars[3 + 3 * k], vars[4 + 3 * k]);
        let local = affine(tape, v, w, b)?;
        let conv = spectral_on_tape(tape, v, kappa, geom)?;
        let z = tape.add(local, conv)?;
        v = cfg.activation.on_tape(tape, z)?;
    }
    let n = vars.len();
    affine(tape, v, vars[n - 2], vars[n - 1])
}

/// Stacks single-channel grids into FNO input rows.
fn stack_grids(grids: &[&GridFunction2D]) -> Result<(Tensor, usize, usize)> {
    let first = grids.first().ok_or_else(|| invalid("no grids"))?;
    if grids.iter().any(|g| (g.n1, g.n2) != (first.n1, first.n2)) {
        return Err(invalid("grids have different sizes"));
    }
    let data: Vec<f64> = grids.iter().flat_map(|g| g.values.iter().copied()).collect();
    Ok((Tensor::column(data), first.n1, first.n2))
}

/// Evaluates the FNO on one single-channel input grid.
pub fn fno_forward(cfg: &FnoConfig, params: &FnoParams, a: &GridFunction2D) -> Result<GridFunction2D> {
    if cfg.in_channels != 1 {
        return Err(invalid("fno_forward takes single-channel inputs"));
    }
    if (a.l1, a.l2) != (cfg.l1, cfg.l2) {
        return Err(invalid("input grid domain differs from the FNO domain"));
    }
    let out = fno_forward_batch(cfg, params, &[a])?;
    out.into_iter().next().ok_or_else(|| invalid("empty FNO output"))
}

pub fn fno_forward_batch(cfg: &FnoConfig, params: &FnoParams, inputs: &[&GridFunction2D]) -> Result<Vec<GridFunction2D>> {
    let (x, n1, n2) = stack_grids(inputs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.to_tensors().into_iter().map(|t| tape.constant(t)).collect();
    let xv = tape.constant(x);
    let out = fno_on_tape(&mut tape, cfg, &vars, xv, inputs.len(), n1, n2)?;
    let np = n1 * n2;
    tape.value(out)
        .data()
        .chunks(np)
        .map(|c| GridFunction2D::new(n1, n2, cfg.l1, cfg.l2, c.to_vec()))
        .collect()
}

/// Pairs of input and output grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnoDataset {
    pub inputs: Vec<GridFunction2D>,
    pub outputs: Vec<GridFunction2D>,
}

impl FnoDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(invalid("empty FNO dataset"));
        }
        if self.inputs.len() != self.outputs.len() {
            return Err(invalid("FNO dataset has unequal input and output counts"));
        }
        let f = &self.inputs[0];
        if self.inputs.iter().chain(&self.outputs).any(|g| (g.n1, g.n2, g.l1, g.l2) != (f.n1, f.n2, f.l1, f.l2)) {
            return Err(invalid("FNO dataset grids do not match"));
        }
        Ok(())
    }

    pub fn split_at(&self, n: usize) -> (FnoDataset, FnoDataset) {
        let n = n.min(self.len());
        (
            FnoDataset {
                inputs: self.inputs[..n].to_vec(),
                outputs: self.outputs[..n].to_vec(),
            },
            FnoDataset {
                inputs: self.inputs[n..].to_vec(),
                outputs: self.outputs[n..].to_vec(),
            },
        )
    }
}

/// Periodic 1D problem `-u'' + u = a` on `[0, period)` with random band-limited `a`, solved
/// exactly in Fourier space. Grids are `n x 1`.
pub fn screened_poisson_dataset(count: usize, n: usize, modes: usize, period: f64, seed: u64) -> Result<FnoDataset> {
    let mut rng = Rng::new(seed);
    let mut inputs = Vec::with_capacity(count);
    let mut outputs = Vec::with_capacity(count);
    let w = 2.0 * PI / period;
    for _ in 0..count {
        let a = FourierSeries::random(&mut rng, modes, 1.0, period);
        let mut u = a.clone();
        u.c0 = a.c0;
        for k in 0..modes {
            let s = 1.0 + ((k + 1) as f64 * w).powi(2);
            u.cos[k] /= s;
            u.sin[k] /= s;
        }
        inputs.push(GridFunction2D::sample(n, 1, period, 1.0, |x, _| a.eval(x))?);
        outputs.push(GridFunction2D::sample(n, 1, period, 1.0, |x, _| u.eval(x))?);
    }
    Ok(FnoDataset { inputs, outputs })
}

/// Mean relative L2 error of the FNO over a dataset.
pub fn fno_relative_error(cfg: &FnoConfig, params: &FnoParams, data: &FnoDataset) -> Result<f64> {
    data.validate()?;
    let refs: Vec<&GridFunction2D> = data.inputs.iter().collect();
    let pred = fno_forward_batch(cfg, params, &refs)?;
    let errs: Vec<f64> = pred.iter().zip(&data.outputs).map(|(p, t)| relative_l2(&p.values, &t.values)).collect();
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Adam on the mean squared grid error; one sample is one input/output grid pair.
pub fn fno_train(cfg: &FnoConfig, params: &mut FnoParams, data: &FnoDataset, settings: TrainSettings) -> Result<TrainOutcome> {
    data.validate()?;
    let (n1, n2) = (data.inputs[0].n1, data.inputs[0].n2);
    let mut ts = params.to_tensors();
    let mut opt = Optimizer::new(OptimizerKind::adam(), settings.lr, Schedule::Constant);
    let template = params.clone();
    let outcome = minibatch_train(
        &mut ts,
        data.len(),
        &mut opt,
        settings.epochs,
        settings.n_batch,
        settings.seed,
        |p, batch| {
            let ins: Vec<&GridFunction2D> = batch.iter().map(|&i| &data.inputs[i]).collect();
            let outs: Vec<&GridFunction2D> = batch.iter().map(|&i| &data.outputs[i]).collect();
            let (x, _, _) = stack_grids(&ins)?;
            let (y, _, _) = stack_grids(&outs)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
            let xv = tape.constant(x);
            let out = fno_on_tape(&mut tape, cfg, &vars, xv, batch.len(), n1, n2)?;
            let yv = tape.constant(y);
            let r = tape.sub(out, yv)?;
            let r2 = tape.square(r)?;
            let loss = tape.mean(r2)?;
            tape.set_tip(loss);
            let g = tape.backward_scalar()?;
            Ok((tape.value(loss).item(), vars.iter().zip(p).map(|(&v, t)| g.get_or_zeros(v, t)).collect()))
        },
        None,
    )?;
    if outcome.status == RunStatus::Completed {
        *params = template.from_tensors(&ts)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_complex(rng: &mut Rng, n: usize) -> Vec<Complex> {
        (0..n).map(|_| Complex::new(rng.normal(), rng.normal())).collect()
    }

    #[test]
    fn fft_matches_naive() {
        let mut rng = Rng::new(3);
        for n in [1, 2, 8, 64] {
            let x = rand_complex(&mut rng, n);
            let a = fft(&x).unwrap();
            let b = naive_dft(&x);
            let err = a.iter().zip(&b).map(|(p, q)| (*p - *q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n} err={err}");
            let back = ifft(&a).unwrap();
            assert!(back.iter().zip(&x).all(|(p, q)| (*p - *q).abs() < 1e-12));
        }
        let mut delta = vec![Complex::ZERO; 16];
        delta[0] = Complex::new(1.0, 0.0);
        assert!(fft(&delta).unwrap().iter().all(|v| (*v - Complex::new(1.0, 0.0)).abs() < 1e-15));
        assert!(fft(&[Complex::ZERO; 6]).is_err());
    }

    #[test]
    fn dft2_examples() {
        let c = GridFunction2D::sample(8, 4, 2.0, 3.0, |_, _| 2.5).unwrap();
        let h = dft2(&c);
        assert!((h[0].re - 2.5).abs() < 1e-14);
        assert!(h[1..].iter().all(|v| v.abs() < 1e-14));
        let cosf = GridFunction2D::sample(8, 8, 2.0, 1.0, |x, _| (PI * x).cos()).unwrap();
        let h = dft2(&cosf);
        for (k, v) in h.iter().enumerate() {
            let (m, n) = (k / 8, k % 8);
            if n == 0 && (m == 1 || m == 7) {
                assert!((v.re - 0.5).abs() < 1e-14);
            } else {
                assert!(v.abs() < 1e-14);
            }
        }
        let mut rng = Rng::new(5);
        let r = GridFunction2D::new(16, 8, 1.0, 2.0, (0..128).map(|_| rng.normal()).collect()).unwrap();
        let (back, imag) = idft2(&dft2(&r), 16, 8, 1.0, 2.0).unwrap();
        assert!(imag < 1e-12);
        assert!(back.values.iter().zip(&r.values).all(|(a, b)| (a - b).abs() < 1e-10));
        let energy: f64 = dft2(&r).iter().map(|v| v.norm_sqr()).sum::<f64>() * 2.0;
        assert!((r.l2_norm().powi(2) - energy).abs() < 1e-10);
    }

    fn geom(batch: usize, n1: usize, n2: usize, k1: usize, k2: usize, ci: usize, co: usize) -> SpectralGeom {
        SpectralGeom {
            batch,
            n1,
            n2,
            k1,
            k2,
            l1: 2.0,
            l2: 0.5,
            c_in: ci,
            c_out: co,
        }
    }

    fn random_weights(rng: &mut Rng, g: &SpectralGeom) -> Tensor {
        rng.normal_tensor(&g.weight_shape())
    }

    #[test]
    fn identity_kernel_reproduces_band_limited_fields() {
        let (l1, l2) = (2.0, 0.5);
        let u = GridFunction2D::sample(16, 8, l1, l2, |x, y| 1.0 + (PI * x).sin() * (4.0 * PI * y).cos() + (3.0 * PI * x).cos())
            .unwrap();
        let k = SpectralKernel::identity(1, 3, 2, l1, l2);
        let v = spectral_conv(std::slice::from_ref(&u), &k).unwrap();
        assert!(v[0].values.iter().zip(&u.values).all(|(a, b)| (a - b).abs() < 1e-12));
        let mut w = Tensor::zeros(k.weights.shape());
        w.set(&[0, 0, 0, 0], 1.0 / (l1 * l2));
        let mean = spectral_conv(std::slice::from_ref(&u), &SpectralKernel::new(3, 2, w).unwrap()).unwrap();
        assert!(mean[0].values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let mut bad = Tensor::zeros(k.weights.shape());
        bad.set(&[0, 0, 0, 1], 0.3);
        assert!(SpectralKernel::new(3, 2, bad).is_err());
    }

    #[test]
    fn spectral_conv_matches_spatial_convolution() {
        let g = geom(1, 8, 8, 2, 2, 2, 3);
        let mut rng = Rng::new(11);
        let w = random_weights(&mut rng, &g);
        let u = rng.normal_tensor(&[64, 2]);
        let v = spectral_apply(&u, &w, &g).unwrap();
        let kern = SpectralKernel { k1: 2, k2: 2, weights: w };
        let (h1, h2) = (g.l1 / 8.0, g.l2 / 8.0);
        // Sampled kernel kappa(z) = sum_k kappa^[-k] e^{2 pi i k z / L}, convolved by the rectangle rule.
        let kernel_at = |i: usize, j: usize, z1: f64, z2: f64| {
            let mut s = Complex::ZERO;
            for m in -2i64..=2 {
                for n in -2i64..=2 {
                    let c = kern.coefficient((-m, -n), i, j);
                    s = s + c * Complex::cis(2.0 * PI * (m as f64 * z1 / g.l1 + n as f64 * z2 / g.l2));
                }
            }
            s.re
        };
        let mut err = 0.0f64;
        for i in 0..3 {
            for p in 0..64 {
                let (x1, x2) = ((p / 8) as f64 * h1, (p % 8) as f64 * h2);
                let mut acc = 0.0;
                for j in 0..2 {
                    for q in 0..64 {
                        let (y1, y2) = ((q / 8) as f64 * h1, (q % 8) as f64 * h2);
                        acc += h1 * h2 * kernel_at(i, j, x1 - y1, x2 - y2) * u.at(&[q, j]);
                    }
                }
                err = err.max((acc - v.at(&[p, i])).abs());
            }
        }
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn adjoint_and_weight_gradient_are_consistent() {
        let g = geom(2, 8, 4, 2, 1, 2, 3);
        let mut rng = Rng::new(2);
        let w = random_weights(&mut rng, &g);
        let u = rng.normal_tensor(&[64, 2]);
        let r = rng.normal_tensor(&[64, 3]);
        let au = spectral_apply(&u, &w, &g).unwrap();
        let atr = spectral_adjoint(&r, &w, &g).unwrap();
        let lhs: f64 = au.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(atr.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        let gw = spectral_weight_grad(&u, &r, &g).unwrap();
        let eps = 1e-6;
        for k in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[k] += eps;
            let mut wm = w.clone();
            wm.data_mut()[k] -= eps;
            let f = |w: &Tensor| -> f64 {
                spectral_apply(&u, w, &g).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&wp) - f(&wm)) / (2.0 * eps);
            assert!((fd - gw.data()[k]).abs() < 1e-6 * fd.abs().max(1.0), "entry {k}: {fd} vs {}", gw.data()[k]);
        }
    }

    #[test]
    fn spectral_conv_commutes_with_shifts() {
        let g = geom(1, 8, 8, 2, 2, 1, 1);
        let mut rng = Rng::new(9);
        let w = random_weights(&mut rng, &g);
        let u = rng.normal_tensor(&[64, 1]);
        let shift = |t: &Tensor| {
            let mut s = vec![0.0; 64];
            for p in 0..64 {
                let (m, n) = (p / 8, p % 8);
                s[((m + 3) % 8) * 8 + (n + 5) % 8] = t.data()[p];
            }
            Tensor::new(vec![64, 1], s).unwrap()
        };
        let a = shift(&spectral_apply(&u, &w, &g).unwrap());
        let b = spectral_apply(&shift(&u), &w, &g).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn tape_gradient_through_spectral_node() {
        let g = geom(1, 8, 2, 2, 0, 2, 2);
        let mut rng = Rng::new(4);
        let t = Tape::record(|t| {
            let u = t.param(rng.normal_tensor(&[16, 2]));
            let w = t.param(rng.normal_tensor(&g.weight_shape()));
            let v = spectral_on_tape(t, u, w, g)?;
            let v = t.tanh(v)?;
            t.sum(v)
        })
        .unwrap();
        let rep = t.grad_check(1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    fn tiny_deeponet(branch_out: f64, trunk_out: f64) -> DeepOnet {
        let s = SensorSet::uniform(2, 0.0, 1.0).unwrap();
        let bc = MlpConfig::new(vec![2, 1], Activation::Linear);
        let tc = MlpConfig::new(vec![1, 1], Activation::Linear);
        let layer = |w: Tensor, b: f64| crate::nn::Layer { w, b: Tensor::matrix(&[vec![b]]).unwrap() };
        let branch = MlpParams {
            layers: vec![layer(Tensor::zeros(&[1, 2]), branch_out)],
        };
        let trunk = MlpParams {
            layers: vec![layer(Tensor::zeros(&[1, 1]), trunk_out)],
        };
        DeepOnet::from_parts(s, bc, tc, branch, trunk).unwrap()
    }

    #[test]
    fn deeponet_dot_product() {
        assert_eq!(tiny_deeponet(2.0, 3.0).forward(&[0.1, 0.2], &[0.5]).unwrap(), 6.0);
        assert_eq!(tiny_deeponet(0.0, 3.0).forward(&[0.1, 0.2], &[0.9]).unwrap(), 0.0);
        assert!(tiny_deeponet(2.0, 3.0).forward(&[0.1], &[0.5]).is_err());
        let s = SensorSet::uniform(2, 0.0, 1.0).unwrap();
        let bad = DeepOnet::new(
            s,
            MlpConfig::new(vec![2, 3], Activation::Tanh),
            MlpConfig::new(vec![1, 4], Activation::Tanh),
            &mut Rng::new(1),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn antiderivative_dataset() {
        let s = SensorSet::uniform(8, 0.0, 1.0).unwrap();
        let one: ScalarFn = Arc::new(|_| 1.0);
        let d = build_deeponet_dataset(|_| one.clone(), antiderivative_oracle(1024), &s, 2, 5, (0.0, 1.0), 1).unwrap();
        assert_eq!(d.len(), 10);
        for i in 0..10 {
            assert!((d.u.data()[i] - d.x.data()[i]).abs() < 1e-12);
        }
        let cos: ScalarFn = Arc::new(f64::cos);
        let sol = antiderivative_oracle(1024)(&cos);
        for x in [0.1, 0.5, 1.0] {
            assert!((sol(x) - x.sin()).abs() < 1e-6);
        }
        let single = build_deeponet_dataset(|_| one.clone(), antiderivative_oracle(16), &s, 1, 1, (0.0, 1.0), 1).unwrap();
        assert_eq!(single.len(), 1);
        let mut rng = Rng::new(3);
        let f = FourierSeries::random(&mut rng, 4, 1.0, 1.0);
        let quad = antiderivative_oracle(1024)(&f.clone().into_fn());
        assert!((quad(0.7) - f.integral(0.7)).abs() < 1e-5);
    }

    #[test]
    fn physics_loss_vanishes_for_exact_operator() {
        // u(x) = a x for constant inputs a: branch returns the sensor value, trunk returns x.
        let s = SensorSet::new(vec![0.5]).unwrap();
        let bc = MlpConfig::new(vec![1, 1], Activation::Linear);
        let tc = MlpConfig::new(vec![1, 1], Activation::Linear);
        let one = MlpParams {
            layers: vec![crate::nn::Layer {
                w: Tensor::matrix(&[vec![1.0]]).unwrap(),
                b: Tensor::matrix(&[vec![0.0]]).unwrap(),
            }],
        };
        let m = DeepOnet::from_parts(s, bc, tc, one.clone(), one).unwrap();
        let phys = DerivativeResidual {
            inputs: Tensor::matrix(&[vec![2.0], vec![-1.0]]).unwrap(),
            fn_index: vec![0, 0, 1],
            x: Tensor::column(vec![0.1, 0.7, 0.3]),
            source: Tensor::column(vec![2.0, 2.0, -1.0]),
        };
        let data = OperatorDataset {
            inputs: Tensor::matrix(&[vec![2.0]]).unwrap(),
            fn_index: vec![0],
            x: Tensor::column(vec![0.5]),
            u: Tensor::column(vec![1.5]),
        };
        let l = pideeponet_loss(&m, Some(&data), Some(&phys), 3.0).unwrap();
        assert!(l.physics < 1e-24);
        assert!((l.data - 0.25).abs() < 1e-14);
        let l0 = pideeponet_loss(&m, Some(&data), Some(&phys), 0.0).unwrap();
        assert_eq!(l0.total, l0.data);
    }

    #[test]
    fn deeponet_memorizes_one_function() {
        let s = SensorSet::uniform(4, 0.0, 1.0).unwrap();
        let mut rng = Rng::new(7);
        let mut m = DeepOnet::new(
            s.clone(),
            MlpConfig::new(vec![4, 16, 8], Activation::Tanh),
            MlpConfig::new(vec![1, 16, 8], Activation::Tanh),
            &mut rng,
        )
        .unwrap();
        let f: ScalarFn = Arc::new(|t| 1.0 + t);
        let d = build_deeponet_dataset(|_| f.clone(), antiderivative_oracle(256), &s, 1, 16, (0.0, 1.0), 2).unwrap();
        let out = deeponet_train(
            &mut m,
            &d,
            None,
            0.0,
            TrainSettings {
                epochs: 10000,
                lr: 3e-3,
                n_batch: 1,
                seed: 1,
            },
        )
        .unwrap();
        let last = out.history.last_train_loss().unwrap();
        let fin = pideeponet_loss(&m, Some(&d), None, 0.0).unwrap().data;
        assert!(fin < 1e-6, "final loss {fin} (last recorded {last})");
    }

    fn small_fno(layers: usize, act: Activation, k: usize) -> FnoConfig {
        FnoConfig {
            in_channels: 1,
            width: 4,
            layers,
            k1: k,
            k2: k,
            activation: act,
            l1: 1.0,
            l2: 1.0,
        }
    }

    #[test]
    fn fno_with_zero_spectral_weights_is_pointwise() {
        let cfg = small_fno(2, Activation::Tanh, 2);
        let mut p = FnoParams::init(&cfg, &mut Rng::new(1)).unwrap();
        for l in &mut p.middle {
            l.kernel.weights = Tensor::zeros(l.kernel.weights.shape());
            l.b = Tensor::full(l.b.shape(), 0.1);
        }
        let a = GridFunction2D::sample(8, 8, 1.0, 1.0, |x, y| (x * 3.0).sin() + y).unwrap();
        let out = fno_forward(&cfg, &p, &a).unwrap();
        assert_eq!((out.n1, out.n2), (8, 8));
        for (k, &v) in a.values.iter().enumerate() {
            let mut h = p.lift_w.matmul(&Tensor::column(vec![v])).unwrap().transpose().unwrap().add(&p.lift_b).unwrap();
            for l in &p.middle {
                h = h.matmul(&l.w.transpose().unwrap()).unwrap().add(&l.b).unwrap().map(f64::tanh);
            }
            let y = h.matmul(&p.proj_w.transpose().unwrap()).unwrap().add(&p.proj_b).unwrap().item();
            assert!((y - out.values[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fno_identity_composition() {
        let mut cfg = small_fno(1, Activation::Linear, 3);
        cfg.width = 2;
        let mut p = FnoParams::init(&cfg, &mut Rng::new(2)).unwrap();
        p.middle[0].w = Tensor::zeros(&[2, 2]);
        p.middle[0].b = Tensor::zeros(&[1, 2]);
        p.middle[0].kernel = SpectralKernel::identity(2, 3, 3, 1.0, 1.0);
        p.proj_w = Tensor::matrix(&[vec![1.0, 0.0]]).unwrap();
        p.lift_w = Tensor::matrix(&[vec![1.0], vec![0.5]]).unwrap();
        let a = GridFunction2D::sample(16, 8, 1.0, 1.0, |x, y| (2.0 * PI * x).cos() + (2.0 * PI * y).sin()).unwrap();
        let out = fno_forward(&cfg, &p, &a).unwrap();
        assert!(out.values.iter().zip(&a.values).all(|(o, i)| (o - i).abs() < 1e-12));
    }

    #[test]
    fn fno_is_discretization_invariant() {
        let cfg = FnoConfig {
            l1: 1.0,
            l2: 1.0,
            ..small_fno(1, Activation::Tanh, 4)
        };
        let p = FnoParams::init(&cfg, &mut Rng::new(5)).unwrap();
        let f = |x: f64, y: f64| (2.0 * PI * x).sin() + 0.5 * (4.0 * PI * (x + y)).cos();
        let coarse = fno_forward(&cfg, &p, &GridFunction2D::sample(32, 32, 1.0, 1.0, f).unwrap()).unwrap();
        let fine = fno_forward(&cfg, &p, &GridFunction2D::sample(64, 64, 1.0, 1.0, f).unwrap()).unwrap();
        let mut err = 0.0f64;
        for m in 0..32 {
            for n in 0..32 {
                err = err.max((coarse.at(m, n) - fine.at(2 * m, 2 * n)).abs());
            }
        }
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fno_gradients_match_finite_differences() {
        let cfg = FnoConfig {
            width: 2,
            ..small_fno(1, Activation::Tanh, 1)
        };
        let p = FnoParams::init(&cfg, &mut Rng::new(8)).unwrap();
        let a = GridFunction2D::sample(4, 4, 1.0, 1.0, |x, y| x - y * y).unwrap();
        let t = Tape::record(|t| {
            let vars: Vec<Var> = p.to_tensors().into_iter().map(|x| t.param(x)).collect();
            let x = t.constant(Tensor::column(a.values.clone()));
            let out = fno_on_tape(t, &cfg, &vars, x, 1, 4, 4)?;
            let sq = t.square(out)?;
            t.mean(sq)
        })
        .unwrap();
        let r = t.grad_check(1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn fno_rejects_empty_dataset() {
        let cfg = small_fno(1, Activation::Tanh, 1);
        let mut p = FnoParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let empty = FnoDataset {
            inputs: vec![],
            outputs: vec![],
        };
        let s = TrainSettings {
            epochs: 1,
            lr: 1e-3,
            n_batch: 1,
            seed: 0,
        };
        assert!(fno_train(&cfg, &mut p, &empty, s).is_err());
    }
}
