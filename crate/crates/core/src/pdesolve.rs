//! Classical solvers for steady 1D advection-diffusion `a u' - kappa u'' = f` on `(0, ell)`.

use crate::autodiff::Tape;
use crate::error::{invalid, Error, Result};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::tensor::Tensor;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

/// Source term `f(x)`.
#[derive(Clone)]
pub enum Source {
    Zero,
    Constant(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Source {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Source::Zero => 0.0,
            Source::Constant(c) => *c,
            Source::Custom(f) => f(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Source::Zero) || matches!(self, Source::Constant(c) if *c == 0.0)
    }
}

impl std::fmt::Debug for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Zero => write!(f, "Zero"),
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdvDiffProblem {
    pub a: f64,
    pub kappa: f64,
    pub ell: f64,
    pub source: Source,
    /// Dirichlet values `u(0)` and `u(ell)`; `[0, 1]` for the standard problem.
    pub bc: [f64; 2],
}

impl AdvDiffProblem {
    /// Homogeneous problem with `u(0) = 0`, `u(ell) = 1`.
    pub fn new(a: f64, kappa: f64, ell: f64) -> Result<Self> {
        let p = Self {
            a,
            kappa,
            ell,
            source: Source::Zero,
            bc: [0.0, 1.0],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn with_bc(mut self, g0: f64, g1: f64) -> Self {
        self.bc = [g0, g1];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !(self.ell > 0.0) || !self.a.is_finite() || !self.kappa.is_finite() || !self.ell.is_finite() {
            return Err(invalid(format!(
                "need kappa > 0, ell > 0 and finite a; got a={}, kappa={}, ell={}",
                self.a, self.kappa, self.ell
            )));
        }
        Ok(())
    }

    pub fn peclet(&self) -> f64 {
        self.a * self.ell / self.kappa
    }
}

/// Exact solution of the source-free problem, evaluated without overflow for large Peclet numbers.
pub fn exact_adv_diff(p: &AdvDiffProblem, x: f64) -> Result<f64> {
    p.validate()?;
    if !p.source.is_zero() {
        return Err(invalid("exact solution is only available for f = 0"));
    }
    let s = p.a / p.kappa;
    let shape = if s == 0.0 {
        x / p.ell
    } else if s > 0.0 {
        // (e^{sx} - 1) / (e^{s ell} - 1) rewritten with negative exponents only.
        (s * (x - p.ell)).exp() * (-s * x).exp_m1() / (-s * p.ell).exp_m1()
    } else {
        (s * x).exp_m1() / (s * p.ell).exp_m1()
    };
    Ok(p.bc[0] + (p.bc[1] - p.bc[0]) * shape)
}

/// `sub[i]` multiplies `u[i]` in row `i + 1`, `sup[i]` multiplies `u[i + 1]` in row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn validate(&self) -> Result<()> {
        let n = self.diag.len();
        if n == 0 || self.sub.len() + 1 != n || self.sup.len() + 1 != n || self.rhs.len() != n {
            return Err(invalid(format!(
                "tridiagonal lengths sub={} diag={} sup={} rhs={}",
                self.sub.len(),
                n,
                self.sup.len(),
                self.rhs.len()
            )));
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.diag.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            m[i][i] = self.diag[i];
            if i + 1 < n {
                m[i][i + 1] = self.sup[i];
                m[i + 1][i] = self.sub[i];
            }
        }
        m
    }
}

/// Stencil coefficients `(alpha, beta, gamma)` for grid spacing `h`.
pub fn fd_coefficients(a: f64, kappa: f64, h: f64) -> (f64, f64, f64) {
    let adv = a / (2.0 * h);
    let dif = kappa / (h * h);
    (-adv - dif, 2.0 * dif, adv - dif)
}

/// Central-difference system for the `N - 1` interior unknowns with `h = ell / N`.
pub fn assemble_fd(p: &AdvDiffProblem, n: usize) -> Result<TridiagonalSystem> {
    p.validate()?;
    if n < 3 {
        return Err(invalid(format!("finite differences need N >= 3, got {n}")));
    }
    let h = p.ell / n as f64;
    let (alpha, beta, gamma) = fd_coefficients(p.a, p.kappa, h);
    let m = n - 1;
    let mut rhs: Vec<f64> = (1..n).map(|i| p.source.eval(i as f64 * h)).collect();
    rhs[0] -= alpha * p.bc[0];
    rhs[m - 1] -= gamma * p.bc[1];
    Ok(TridiagonalSystem {
        sub: vec![alpha; m - 1],
        diag: vec![beta; m],
        sup: vec![gamma; m - 1],
        rhs,
    })
}

/// Thomas algorithm (no pivoting).
pub fn thomas_solve(sys: &TridiagonalSystem) -> Result<Vec<f64>> {
    sys.validate()?;
    let n = sys.diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = sys.diag[0];
    for i in 0..n {
        if i > 0 {
            denom = sys.diag[i] - sys.sub[i - 1] * c[i - 1];
        }
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Singular(format!("zero pivot in row {i} of tridiagonal solve")));
        }
        if i + 1 < n {
            c[i] = sys.sup[i] / denom;
        }
        let prev = if i > 0 { sys.sub[i - 1] * d[i - 1] } else { 0.0 };
        d[i] = (sys.rhs[i] - prev) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|r| r.len() != n) {
        return Err(invalid("dense_solve needs a square matrix matching the right-hand side"));
    }
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[piv][col].abs() <= scale * 1e-14 || !a[piv][col].is_finite() {
            return Err(Error::Singular(format!("pivot {col} vanishes")));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Ok(x)
}

/// Sampled solution `u(x)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl GridFunction {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,u\n");
        for (x, u) in self.x.iter().zip(&self.u) {
            let _ = writeln!(s, "{x:e},{u:e}");
        }
        s
    }

    pub fn max_error(&self, exact: impl Fn(f64) -> f64) -> f64 {
        self.x.iter().zip(&self.u).map(|(&x, &u)| (u - exact(x)).abs()).fold(0.0, f64::max)
    }
}

/// Finite-difference solution on `N + 1` nodes including the boundary values.
pub fn solve_fd(p: &AdvDiffProblem, n: usize) -> Result<GridFunction> {
    let sys = assemble_fd(p, n)?;
    let inner = thomas_solve(&sys)?;
    let h = p.ell / n as f64;
    let x = (0..=n).map(|i| if i == n { p.ell } else { i as f64 * h }).collect();
    let mut u = Vec::with_capacity(n + 1);
    u.push(p.bc[0]);
    u.extend(inner);
    u.push(p.bc[1]);
    Ok(GridFunction { x, u })
}

/// `T_n(xi)`, `T_n'(xi)` and `T_n''(xi)` for `n = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevValues {
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
    pub d2t: Vec<f64>,
}

pub fn chebyshev_eval(n: usize, xi: f64) -> Result<ChebyshevValues> {
    if !(-1.0..=1.0).contains(&xi) {
        return Err(invalid(format!("Chebyshev argument {xi} outside [-1, 1]")));
    }
    let mut t = vec![0.0; n + 1];
    let mut dt = vec![0.0; n + 1];
    let mut d2t = vec![0.0; n + 1];
    t[0] = 1.0;
    if n >= 1 {
        t[1] = xi;
        dt[1] = 1.0;
    }
    for k in 1..n {
        t[k + 1] = 2.0 * xi * t[k] - t[k - 1];
        dt[k + 1] = 2.0 * t[k] + 2.0 * xi * dt[k] - dt[k - 1];
        d2t[k + 1] = 4.0 * dt[k] + 2.0 * xi * d2t[k] - d2t[k - 1];
    }
    Ok(ChebyshevValues { t, dt, d2t })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointRule {
    /// Interior Chebyshev-Gauss-Lobatto points `cos(pi j / N)`, `j = 1..N-1`.
    GaussLobatto,
    /// Equispaced interior points.
    Uniform,
}

/// The `N - 1` interior collocation points in `(0, ell)`, increasing.
pub fn collocation_points(rule: PointRule, n: usize, ell: f64) -> Vec<f64> {
    let mut pts: Vec<f64> = (1..n)
        .map(|j| match rule {
            PointRule::GaussLobatto => ((PI * j as f64 / n as f64).cos() + 1.0) * ell / 2.0,
            PointRule::Uniform => j as f64 * ell / n as f64,
        })
        .collect();
    pts.sort_by(f64::total_cmp);
    pts
}

/// Basis `phi_n(x) = T_n(2x/ell - 1)` and its first two x-derivatives at `x`.
pub fn basis_eval(n: usize, ell: f64, x: f64) -> Result<ChebyshevValues> {
    let xi = (2.0 * x / ell - 1.0).clamp(-1.0, 1.0);
    let mut v = chebyshev_eval(n, xi)?;
    let s = 2.0 / ell;
    v.dt.iter_mut().for_each(|d| *d *= s);
    v.d2t.iter_mut().for_each(|d| *d *= s * s);
    Ok(v)
}

/// Chebyshev expansion `u(x) = sum u_n phi_n(x)` on `(0, ell)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSolution {
    pub coeffs: Vec<f64>,
    pub ell: f64,
}

impl SpectralSolution {
    pub fn eval(&self, x: f64) -> Result<f64> {
        let b = basis_eval(self.coeffs.len() - 1, self.ell, x)?;
        Ok(b.t.iter().zip(&self.coeffs).map(|(p, c)| p * c).sum())
    }

    pub fn sample(&self, xs: &[f64]) -> Result<GridFunction> {
        let u = xs.iter().map(|&x| self.eval(x)).collect::<Result<_>>()?;
        Ok(GridFunction { x: xs.to_vec(), u })
    }
}

/// Rows of `a phi' - kappa phi''` at each point, one row per point.
fn operator_rows(p: &AdvDiffProblem, n: usize, points: &[f64]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|&x| {
            let b = basis_eval(n, p.ell, x)?;
            Ok((0..=n).map(|k| p.a * b.dt[k] - p.kappa * b.d2t[k]).collect())
        })
        .collect()
}

/// Collocation solve: two boundary rows plus `N - 1` interior PDE rows.
pub fn solve_spectral(p: &AdvDiffProblem, n: usize, rule: PointRule) -> Result<SpectralSolution> {
    p.validate()?;
    if n == 0 {
        return Err(invalid("spectral order must be at least 1"));
    }
    let points = collocation_points(rule, n, p.ell);
    let left = chebyshev_eval(n, -1.0)?.t;
    let right = chebyshev_eval(n, 1.0)?.t;
    let mut rows = vec![left];
    let mut rhs = vec![p.bc[0]];
    for (row, &x) in operator_rows(p, n, &points)?.into_iter().zip(&points) {
        rows.push(row);
        rhs.push(p.source.eval(x));
    }
    rows.push(right);
    rhs.push(p.bc[1]);
    let coeffs = dense_solve(rows, rhs).map_err(|e| match e {
        Error::Singular(m) => Error::Singular(format!("collocation matrix is singular ({m}); try a different point rule")),
        other => other,
    })?;
    Ok(SpectralSolution { coeffs, ell: p.ell })
}

/// Least-squares loss parts for a coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsqLoss {
    pub interior: f64,
    pub boundary: f64,
    pub total: f64,
}

/// Precomputed matrices for the least-squares loss at fixed interior points.
#[derive(Debug, Clone)]
pub struct SpectralLsq {
    /// (N_train, N+1) operator rows.
    pub op: Tensor,
    /// (N_train, 1) source values.
    pub f: Tensor,
    /// (2, N+1) basis values at the two ends.
    pub ends: Tensor,
    /// (2, 1) boundary targets.
    pub targets: Tensor,
    pub lambda: f64,
}

impl SpectralLsq {
    pub fn new(p: &AdvDiffProblem, n: usize, points: &[f64], lambda: f64) -> Result<Self> {
        p.validate()?;
        if points.is_empty() || n == 0 {
            return Err(invalid("least-squares loss needs points and N >= 1"));
        }
        if !(lambda >= 0.0) {
            return Err(invalid(format!("lambda must be non-negative, got {lambda}")));
        }
        let rows = operator_rows(p, n, points)?;
        let op = Tensor::matrix(&rows)?;
        let f = Tensor::column(points.iter().map(|&x| p.source.eval(x)).collect());
        let ends = Tensor::matrix(&[chebyshev_eval(n, -1.0)?.t, chebyshev_eval(n, 1.0)?.t])?;
        let targets = Tensor::column(p.bc.to_vec());
        Ok(Self {
            op,
            f,
            ends,
            targets,
            lambda,
        })
    }

    /// Records the loss for the coefficient column `coeffs` of shape (N+1, 1); returns the scalar node.
    pub fn record(&self, tape: &mut Tape, coeffs: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let op = tape.constant(self.op.clone());
        let f = tape.constant(self.f.clone());
        let r = tape.matmul(op, coeffs)?;
        let r = tape.sub(r, f)?;
        let r2 = tape.square(r)?;
        let interior = tape.mean(r2)?;
        if self.lambda == 0.0 {
            return Ok(interior);
        }
        let ends = tape.constant(self.ends.clone());
        let tg = tape.constant(self.targets.clone());
        let b = tape.matmul(ends, coeffs)?;
        let b = tape.sub(b, tg)?;
        let b2 = tape.square(b)?;
        let bsum = tape.sum(b2)?;
        let bsum = tape.scale(bsum, self.lambda)?;
        tape.add(interior, bsum)
    }

    pub fn eval(&self, coeffs: &[f64]) -> Result<LsqLoss> {
        let c = Tensor::column(coeffs.to_vec());
        let r = self.op.matmul(&c)?.sub(&self.f)?;
        let interior = r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        let b = self.ends.matmul(&c)?.sub(&self.targets)?;
        let boundary = b.data().iter().map(|v| v * v).sum::<f64>();
        Ok(LsqLoss {
            interior,
            boundary,
            total: interior + self.lambda * boundary,
        })
    }
}

/// Free-function form of the least-squares loss.
pub fn spectral_lsq_loss(p: &AdvDiffProblem, coeffs: &[f64], points: &[f64], lambda: f64) -> Result<LsqLoss> {
    SpectralLsq::new(p, coeffs.len().saturating_sub(1), points, lambda)?.eval(coeffs)
}

#[derive(Debug, Clone)]
pub struct LsqFit {
    pub solution: SpectralSolution,
    pub loss: LsqLoss,
    pub history: Vec<f64>,
}

/// Minimizes the least-squares loss with Adam from zero coefficients.
pub fn fit_spectral_lsq(
    p: &AdvDiffProblem,
    n: usize,
    points: &[f64],
    lambda: f64,
    iters: usize,
    lr: f64,
) -> Result<LsqFit> {
    let lsq = SpectralLsq::new(p, n, points, lambda)?;
    let mut params = vec![Tensor::zeros(&[n + 1, 1])];
    let mut opt = Optimizer::new(
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            bias_correction: true,
        },
        lr,
        Schedule::Constant,
    );
    let mut history = Vec::with_capacity(iters);
    for step in 0..iters {
        let mut tape = Tape::new();
        let c = tape.param(params[0].clone());
        let loss = lsq.record(&mut tape, c)?;
        tape.set_tip(loss);
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "spectral least squares".into(),
            });
        }
        history.push(l);
        let g = tape.backward_scalar()?.get_or_zeros(c, &params[0]);
        opt.step(&mut params, &[g])?;
    }
    let coeffs = params.pop().map(Tensor::into_data).unwrap_or_default();
    let loss = lsq.eval(&coeffs)?;
    Ok(LsqFit {
        solution: SpectralSolution { coeffs, ell: p.ell },
        loss,
        history,
    })
}

/// Observed order `log2(e_N / e_2N)` for each consecutive pair of errors on doubling grids.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pe1() -> AdvDiffProblem {
        AdvDiffProblem::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn exact_solution_values() {
        let p = pe1();
        assert_eq!(exact_adv_diff(&p, 0.0).unwrap(), 0.0);
        assert!((exact_adv_diff(&p, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let want = (1.0 - 0.5f64.exp()) / (1.0 - 1f64.exp());
        assert!((exact_adv_diff(&p, 0.5).unwrap() - want).abs() < 1e-14);
        assert!((want - 0.37754).abs() < 1e-5);
        let d = AdvDiffProblem::new(0.0, 1.0, 2.0).unwrap();
        assert_eq!(exact_adv_diff(&d, 0.5).unwrap(), 0.25);
        let big = AdvDiffProblem::new(1e4, 1.0, 1.0).unwrap();
        let v = exact_adv_diff(&big, 0.999).unwrap();
        assert!(v.is_finite() && v > 0.0 && v < 1e-4);
        let neg = AdvDiffProblem::new(-1e4, 1.0, 1.0).unwrap();
        assert!((exact_adv_diff(&neg, 0.001).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn fd_coefficient_examples() {
        assert_eq!(fd_coefficients(0.0, 1.0, 1.0), (-1.0, 2.0, -1.0));
        assert_eq!(fd_coefficients(2.0, 1.0, 1.0).2, 0.0);
        let p = pe1().with_source(Source::Constant(3.0));
        let sys = assemble_fd(&p, 8).unwrap();
        assert_eq!(sys.rhs[0], 3.0);
        assert_eq!(sys.diag.len(), 7);
    }

    #[test]
    fn thomas_examples() {
        let s = TridiagonalSystem {
            sub: vec![1.0],
            diag: vec![2.0, 2.0],
            sup: vec![1.0],
            rhs: vec![3.0, 3.0],
        };
        assert_eq!(thomas_solve(&s).unwrap(), vec![1.0, 1.0]);
        let s = TridiagonalSystem {
            sub: vec![-1.0; 2],
            diag: vec![2.0; 3],
            sup: vec![-1.0; 2],
            rhs: vec![1.0, 0.0, 1.0],
        };
        let x = thomas_solve(&s).unwrap();
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let id = TridiagonalSystem {
            sub: vec![0.0; 3],
            diag: vec![1.0; 4],
            sup: vec![0.0; 3],
            rhs: vec![4.0, 3.0, 2.0, 1.0],
        };
        assert_eq!(thomas_solve(&id).unwrap(), id.rhs);
        let zero = TridiagonalSystem {
            sub: vec![1.0],
            diag: vec![0.0, 1.0],
            sup: vec![1.0],
            rhs: vec![1.0, 1.0],
        };
        assert!(matches!(thomas_solve(&zero), Err(Error::Singular(_))));
    }

    #[test]
    fn fd_is_exact_for_linear_solution() {
        let p = AdvDiffProblem::new(0.0, 1.0, 1.0).unwrap();
        let g = solve_fd(&p, 10).unwrap();
        assert!(g.max_error(|x| x) < 1e-14);
        let small = solve_fd(&pe1(), 3).unwrap();
        assert_eq!(small.u.len(), 4);
        assert!(solve_fd(&pe1(), 2).is_err());
    }

    #[test]
    fn fd_second_order() {
        let p = pe1();
        let errs: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&n| solve_fd(&p, n).unwrap().max_error(|x| exact_adv_diff(&p, x).unwrap()))
            .collect();
        for o in observed_orders(&errs) {
            assert!((1.8..=2.2).contains(&o), "order {o}");
        }
    }

    #[test]
    fn chebyshev_examples() {
        let v = chebyshev_eval(3, 0.3).unwrap();
        assert_eq!((v.t[0], v.t[1]), (1.0, 0.3));
        assert!((chebyshev_eval(2, 0.5).unwrap().t[2] + 0.5).abs() < 1e-15);
        let one = chebyshev_eval(10, 1.0).unwrap();
        assert!(one.t.iter().all(|&t| (t - 1.0).abs() < 1e-14));
        for (k, &d) in one.dt.iter().enumerate() {
            assert!((d - (k * k) as f64).abs() < 1e-10);
        }
        assert!(chebyshev_eval(3, 1.5).is_err());
        // T_3 = 4x^3 - 3x, T_3' = 12x^2 - 3, T_3'' = 24x
        let v = chebyshev_eval(3, 0.4).unwrap();
        assert!((v.dt[3] - (12.0 * 0.16 - 3.0)).abs() < 1e-14);
        assert!((v.d2t[3] - 9.6).abs() < 1e-14);
    }

    #[test]
    fn spectral_recovers_linear_and_converges() {
        let lin = AdvDiffProblem::new(0.0, 1.0, 1.0).unwrap();
        for n in 1..6 {
            let s = solve_spectral(&lin, n, PointRule::GaussLobatto).unwrap();
            assert!((s.eval(0.3).unwrap() - 0.3).abs() < 1e-12);
        }
        let p = pe1();
        let s = solve_spectral(&p, 20, PointRule::GaussLobatto).unwrap();
        let err = (0..=100)
            .map(|i| {
                let x = i as f64 / 100.0;
                (s.eval(x).unwrap() - exact_adv_diff(&p, x).unwrap()).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        assert!(s.eval(0.0).unwrap().abs() < 1e-12);
        assert!((s.eval(1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lsq_loss_examples() {
        let p = pe1();
        let n = 6;
        let s = solve_spectral(&p, n, PointRule::GaussLobatto).unwrap();
        let pts = collocation_points(PointRule::GaussLobatto, n, 1.0);
        let l = spectral_lsq_loss(&p, &s.coeffs, &pts, 1.0).unwrap();
        assert!(l.interior < 1e-20 && l.boundary < 1e-20);
        let z = spectral_lsq_loss(&p, &[0.0; 7], &pts, 2.0).unwrap();
        assert_eq!(z.boundary, 1.0);
        assert_eq!(z.total, 2.0);
        let z0 = spectral_lsq_loss(&p, &[0.0; 7], &pts, 0.0).unwrap();
        assert_eq!(z0.total, z0.interior);
    }

    #[test]
    fn lsq_tape_matches_direct_eval() {
        let p = pe1();
        let pts = collocation_points(PointRule::Uniform, 5, 1.0);
        let lsq = SpectralLsq::new(&p, 5, &pts, 3.0).unwrap();
        let c: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let mut tape = Tape::new();
        let v = tape.param(Tensor::column(c.clone()));
        let l = lsq.record(&mut tape, v).unwrap();
        tape.set_tip(l);
        assert!((tape.value(l).item() - lsq.eval(&c).unwrap().total).abs() < 1e-13);
        assert!(tape.grad_check(1e-6).unwrap().max_rel_error < 1e-6);
    }
}
