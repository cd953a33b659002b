//! Physics-informed networks for 1D advection-diffusion and the parameterized 2D Poisson problem.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{forward_on_tape, MlpConfig, MlpParams, MlpVars};
use crate::optim::{minibatch_train, Optimizer, RunStatus, TrainOutcome};
use crate::pdesolve::{exact_adv_diff, AdvDiffProblem};
use crate::tensor::{Rng, Tensor};
use std::fmt::Write as _;

/// Default boundary weight.
pub const DEFAULT_LAMBDA_B: f64 = 10.0;

/// Cell-centred points `(i - 1/2) ell / n`, `i = 1..=n`.
pub fn uniform_points(n: usize, ell: f64) -> Vec<f64> {
    (1..=n).map(|i| (i as f64 - 0.5) * ell / n as f64).collect()
}

#[derive(Debug, Clone)]
pub struct PinnProblem {
    pub pde: AdvDiffProblem,
    pub points: Vec<f64>,
    pub lambda_b: f64,
}

impl PinnProblem {
    pub fn new(pde: AdvDiffProblem, n_points: usize, lambda_b: f64) -> Result<Self> {
        let p = Self {
            points: uniform_points(n_points, pde.ell),
            pde,
            lambda_b,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.pde.validate()?;
        if self.points.is_empty() {
            return Err(invalid("PINN needs at least one collocation point"));
        }
        if !(self.lambda_b >= 0.0) {
            return Err(invalid(format!("lambda_b must be non-negative, got {}", self.lambda_b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinnLoss {
    /// Mean squared interior residual.
    pub interior: f64,
    /// Boundary mismatch (sum over the two ends in 1D, mean over sampled points in 2D).
    pub boundary: f64,
    pub total: f64,
}

fn check_net(cfg: &MlpConfig, params: &MlpParams, input: usize) -> Result<()> {
    params.check(cfg)?;
    if cfg.input_dim() != input || cfg.output_dim() != 1 {
        return Err(invalid(format!(
            "network maps {} -> {}, problem needs {input} -> 1",
            cfg.input_dim(),
            cfg.output_dim()
        )));
    }
    Ok(())
}

/// Residual `a u' - kappa u'' - f` at `xs` as a `(N, 1)` node.
fn record_residual_1d(tape: &mut Tape, cfg: &MlpConfig, vars: &MlpVars, pde: &AdvDiffProblem, xs: &[f64]) -> Result<Var> {
    let x = tape.input(Tensor::column(xs.to_vec()));
    let u = forward_on_tape(tape, cfg, vars, x)?.out;
    let du = tape.grad(u, &[x])?[0];
    let d2u = tape.grad(du, &[x])?[0];
    let adv = tape.scale(du, pde.a)?;
    let dif = tape.scale(d2u, pde.kappa)?;
    let lhs = tape.sub(adv, dif)?;
    let f = tape.constant(Tensor::column(xs.iter().map(|&x| pde.source.eval(x)).collect()));
    tape.sub(lhs, f)
}

struct Recorded {
    interior: Var,
    boundary: Var,
    total: Var,
}

fn record_pinn_1d(tape: &mut Tape, cfg: &MlpConfig, vars: &MlpVars, p: &PinnProblem) -> Result<Recorded> {
    let r = record_residual_1d(tape, cfg, vars, &p.pde, &p.points)?;
    let r2 = tape.square(r)?;
    let interior = tape.mean(r2)?;
    let xb = tape.constant(Tensor::column(vec![0.0, p.pde.ell]));
    let ub = forward_on_tape(tape, cfg, vars, xb)?.out;
    let g = tape.constant(Tensor::column(p.pde.bc.to_vec()));
    let rb = tape.sub(ub, g)?;
    let rb2 = tape.square(rb)?;
    let boundary = tape.sum(rb2)?;
    let wb = tape.scale(boundary, p.lambda_b)?;
    let total = tape.add(interior, wb)?;
    Ok(Recorded { interior, boundary, total })
}

fn loss_of(tape: &Tape, r: &Recorded) -> PinnLoss {
    PinnLoss {
        interior: tape.value(r.interior).item(),
        boundary: tape.value(r.boundary).item(),
        total: tape.value(r.total).item(),
    }
}

/// `Pi = mean R(x_i)^2 + lambda_b ((F(0) - g0)^2 + (F(ell) - g1)^2)`.
pub fn pinn_loss(p: &PinnProblem, cfg: &MlpConfig, params: &MlpParams) -> Result<PinnLoss> {
    p.validate()?;
    check_net(cfg, params, 1)?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, params);
    let r = record_pinn_1d(&mut tape, cfg, &vars, p)?;
    Ok(loss_of(&tape, &r))
}

/// Pointwise residual of the network at `xs`.
pub fn residual_1d(pde: &AdvDiffProblem, cfg: &MlpConfig, params: &MlpParams, xs: &[f64]) -> Result<Vec<f64>> {
    check_net(cfg, params, 1)?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, params);
    let r = record_residual_1d(&mut tape, cfg, &vars, pde, xs)?;
    Ok(tape.value(r).data().to_vec())
}

pub fn network_values(cfg: &MlpConfig, params: &MlpParams, xs: &[f64]) -> Result<Vec<f64>> {
    let out = crate::nn::mlp_forward(cfg, params, &Tensor::column(xs.to_vec()))?;
    Ok(out.into_data())
}

/// Minimizes a loss recorded by `build` over all network parameters, one full batch per step.
pub fn fit_network(
    cfg: &MlpConfig,
    params: &mut MlpParams,
    opt: &mut Optimizer,
    iters: usize,
    mut build: impl FnMut(&mut Tape, &MlpVars) -> Result<Var>,
) -> Result<TrainOutcome> {
    let mut ts = params.to_tensors();
    let outcome = minibatch_train(
        &mut ts,
        1,
        opt,
        iters,
        1,
        0,
        |p, _| {
            let mut tape = Tape::new();
            let vars = MlpVars::params(&mut tape, &MlpParams::from_tensors(p)?);
            let loss = build(&mut tape, &vars)?;
            tape.set_tip(loss);
            let g = tape.backward_scalar()?;
            let grads = vars.flat().iter().zip(p).map(|(&v, t)| g.get_or_zeros(v, t)).collect();
            Ok((tape.value(loss).item(), grads))
        },
        None,
    )?;
    if outcome.status == RunStatus::Completed {
        let trained = MlpParams::from_tensors(&ts)?;
        trained.check(cfg)?;
        *params = trained;
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct PinnRun {
    pub params: MlpParams,
    pub outcome: TrainOutcome,
    pub loss: PinnLoss,
    /// Relative L2 error against the exact solution on a fine grid, when one is available.
    pub rel_l2_error: Option<f64>,
}

/// Fine-grid relative L2 error against the exact source-free solution (composite Simpson).
pub fn relative_error_vs_exact(pde: &AdvDiffProblem, cfg: &MlpConfig, params: &MlpParams, n_fine: usize) -> Result<f64> {
    let xs = simpson_nodes(n_fine, pde.ell);
    let u = network_values(cfg, params, &xs)?;
    let exact = xs.iter().map(|&x| exact_adv_diff(pde, x)).collect::<Result<Vec<_>>>()?;
    let e2: Vec<f64> = u.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).collect();
    let u2: Vec<f64> = exact.iter().map(|b| b * b).collect();
    Ok((simpson(&e2, pde.ell) / simpson(&u2, pde.ell)).sqrt())
}

/// Trains a fresh network initialized from `seed`.
pub fn train_pinn(p: &PinnProblem, cfg: &MlpConfig, opt: &mut Optimizer, iters: usize, seed: u64) -> Result<PinnRun> {
    p.validate()?;
    let mut params = MlpParams::init(cfg, &mut Rng::new(seed))?;
    check_net(cfg, &params, 1)?;
    let outcome = fit_network(cfg, &mut params, opt, iters, |tape, vars| Ok(record_pinn_1d(tape, cfg, vars, p)?.total))?;
    let loss = pinn_loss(p, cfg, &params)?;
    let rel_l2_error = if p.pde.source.is_zero() {
        Some(relative_error_vs_exact(&p.pde, cfg, &params, 2048)?)
    } else {
        None
    };
    Ok(PinnRun {
        params,
        outcome,
        loss,
        rel_l2_error,
    })
}

/// Solution dump with columns `x,u_pinn,u_exact,residual` (`u_exact` empty without a closed form).
pub fn solution_csv(pde: &AdvDiffProblem, cfg: &MlpConfig, params: &MlpParams, xs: &[f64]) -> Result<String> {
    let u = network_values(cfg, params, xs)?;
    let r = residual_1d(pde, cfg, params, xs)?;
    let mut s = String::from("x,u_pinn,u_exact,residual\n");
    for (i, &x) in xs.iter().enumerate() {
        let _ = write!(s, "{x:.12e},{:.12e},", u[i]);
        if pde.source.is_zero() {
            let _ = write!(s, "{:.12e}", exact_adv_diff(pde, x)?);
        }
        let _ = writeln!(s, ",{:.12e}", r[i]);
    }
    Ok(s)
}

fn simpson_nodes(n: usize, ell: f64) -> Vec<f64> {
    let n = n.max(2) + n % 2;
    (0..=n).map(|i| ell * i as f64 / n as f64).collect()
}

/// Composite Simpson rule over equispaced samples on `[0, ell]` (odd sample count).
fn simpson(f: &[f64], ell: f64) -> f64 {
    let n = f.len() - 1;
    let h = ell / n as f64;
    let inner: f64 = f[1..n].iter().enumerate().map(|(i, v)| if i % 2 == 0 { 4.0 * v } else { 2.0 * v }).sum();
    h / 3.0 * (f[0] + f[n] + inner)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBoundReport {
    pub measure_interior: f64,
    pub measure_boundary: f64,
    pub pi_int: f64,
    pub pi_b: f64,
    /// `sqrt(m_Omega Pi_int)`: the collocation (midpoint) estimate of the residual L2 norm.
    pub interior_estimate: f64,
    /// `sqrt(Pi_b)`: the boundary residual norm under counting measure on the two end points.
    pub boundary_estimate: f64,
    /// Fine-quadrature `||R||_{L2(Omega)}`.
    pub residual_l2: f64,
    /// `| ||R|| - interior_estimate |`.
    pub quadrature_gap: f64,
}

/// Compares the collocation estimate of the residual norm with a fine-quadrature value.
pub fn error_bound_report(p: &PinnProblem, cfg: &MlpConfig, params: &MlpParams, n_fine: usize) -> Result<ErrorBoundReport> {
    let loss = pinn_loss(p, cfg, params)?;
    let xs = simpson_nodes(n_fine, p.pde.ell);
    let r = residual_1d(&p.pde, cfg, params, &xs)?;
    let r2: Vec<f64> = r.iter().map(|v| v * v).collect();
    let residual_l2 = simpson(&r2, p.pde.ell).max(0.0).sqrt();
    let m = p.pde.ell;
    let interior_estimate = (m * loss.interior).sqrt();
    Ok(ErrorBoundReport {
        measure_interior: m,
        measure_boundary: 2.0,
        pi_int: loss.interior,
        pi_b: loss.boundary,
        interior_estimate,
        boundary_estimate: loss.boundary.sqrt(),
        residual_l2,
        quadrature_gap: (residual_l2 - interior_estimate).abs(),
    })
}

/// Data assimilation: sparse measurements plus the PDE residual and a weight penalty.
#[derive(Debug, Clone)]
pub struct AssimilationProblem {
    pub pde: AdvDiffProblem,
    pub measurements: Vec<(f64, f64)>,
    pub points: Vec<f64>,
    pub lambda_i: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssimilationLoss {
    pub data: f64,
    pub physics: f64,
    pub smoothness: f64,
    pub total: f64,
}

fn record_assimilation(tape: &mut Tape, cfg: &MlpConfig, vars: &MlpVars, p: &AssimilationProblem) -> Result<[Var; 4]> {
    if p.measurements.is_empty() || p.points.is_empty() {
        return Err(invalid("assimilation needs measurements and collocation points"));
    }
    let xm = tape.constant(Tensor::column(p.measurements.iter().map(|m| m.0).collect()));
    let um = tape.constant(Tensor::column(p.measurements.iter().map(|m| m.1).collect()));
    let f = forward_on_tape(tape, cfg, vars, xm)?.out;
    let d = tape.sub(um, f)?;
    let d2 = tape.square(d)?;
    let data = tape.mean(d2)?;
    let r = record_residual_1d(tape, cfg, vars, &p.pde, &p.points)?;
    let r2 = tape.square(r)?;
    let physics = tape.mean(r2)?;
    let mut sq = Vec::new();
    for v in vars.flat() {
        let s = tape.square(v)?;
        sq.push(tape.sum(s)?);
    }
    let mut smooth = sq[0];
    for &s in &sq[1..] {
        smooth = tape.add(smooth, s)?;
    }
    let wd = tape.scale(data, p.lambda_i)?;
    let ws = tape.scale(smooth, p.lambda)?;
    let t = tape.add(wd, physics)?;
    let total = tape.add(t, ws)?;
    Ok([data, physics, smooth, total])
}

/// `(lambda_I / M) sum (u_i - F(x_i))^2 + (1/N_v) sum R(F(x_i))^2 + lambda ||theta||^2`.
pub fn assimilation_loss(p: &AssimilationProblem, cfg: &MlpConfig, params: &MlpParams) -> Result<AssimilationLoss> {
    check_net(cfg, params, 1)?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, params);
    let [d, ph, s, t] = record_assimilation(&mut tape, cfg, &vars, p)?;
    Ok(AssimilationLoss {
        data: tape.value(d).item(),
        physics: tape.value(ph).item(),
        smoothness: tape.value(s).item(),
        total: tape.value(t).item(),
    })
}

pub fn train_assimilation(
    p: &AssimilationProblem,
    cfg: &MlpConfig,
    opt: &mut Optimizer,
    iters: usize,
    seed: u64,
) -> Result<(MlpParams, TrainOutcome)> {
    let mut params = MlpParams::init(cfg, &mut Rng::new(seed))?;
    check_net(cfg, &params, 1)?;
    let out = fit_network(cfg, &mut params, opt, iters, |tape, vars| Ok(record_assimilation(tape, cfg, vars, p)?[3]))?;
    Ok((params, out))
}

/// Source `f(x1, x2; alpha) = 4 alpha x1 (1 - x1) x2 (1 - x2)`.
pub fn poisson_source(x1: f64, x2: f64, alpha: f64) -> f64 {
    4.0 * alpha * x1 * (1.0 - x1) * x2 * (1.0 - x2)
}

/// `-laplace u = f(.; alpha)` on the unit square with `u = 0` on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonProblem {
    pub interior: Vec<[f64; 2]>,
    pub boundary: Vec<[f64; 2]>,
    pub alphas: Vec<f64>,
    pub lambda_b: f64,
}

impl PoissonProblem {
    /// Cell-centred `n x n` interior grid and `n` cell-centred points per side.
    pub fn uniform(n: usize, alphas: Vec<f64>, lambda_b: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("Poisson grid needs n >= 1"));
        }
        let c = uniform_points(n, 1.0);
        let interior = c.iter().flat_map(|&x| c.iter().map(move |&y| [x, y])).collect();
        let mut boundary = Vec::with_capacity(4 * n);
        for &t in &c {
            boundary.extend([[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]]);
        }
        let p = Self {
            interior,
            boundary,
            alphas,
            lambda_b,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(invalid("parameterized loss needs at least one alpha"));
        }
        if self.interior.is_empty() || self.boundary.is_empty() {
            return Err(invalid("Poisson problem needs interior and boundary points"));
        }
        if !(self.lambda_b >= 0.0) {
            return Err(invalid("lambda_b must be non-negative"));
        }
        Ok(())
    }
}

/// Rows `(x1, x2[, alpha])` for every alpha and point.
fn poisson_rows(points: &[[f64; 2]], alphas: &[f64], with_alpha: bool) -> Result<Tensor> {
    let w = if with_alpha { 3 } else { 2 };
    let mut d = Vec::with_capacity(points.len() * alphas.len() * w);
    for &a in alphas {
        for p in points {
            d.extend_from_slice(p);
            if with_alpha {
                d.push(a);
            }
        }
    }
    Tensor::new(vec![points.len() * alphas.len(), w], d)
}

fn record_poisson(tape: &mut Tape, cfg: &MlpConfig, vars: &MlpVars, p: &PoissonProblem, with_alpha: bool) -> Result<Recorded> {
    let x = tape.input(poisson_rows(&p.interior, &p.alphas, with_alpha)?);
    let u = forward_on_tape(tape, cfg, vars, x)?.out;
    let g = tape.grad(u, &[x])?[0];
    let mut lap = None;
    for k in 0..2 {
        let gk = tape.select_cols(g, k, 1)?;
        let h = tape.grad(gk, &[x])?[0];
        let hkk = tape.select_cols(h, k, 1)?;
        lap = Some(match lap {
            None => hkk,
            Some(l) => tape.add(l, hkk)?,
        });
    }
    let lap = lap.ok_or_else(|| invalid("empty laplacian"))?;
    let f: Vec<f64> = p
        .alphas
        .iter()
        .flat_map(|&a| p.interior.iter().map(move |q| poisson_source(q[0], q[1], a)))
        .collect();
    let f = tape.constant(Tensor::column(f));
    let neg = tape.neg(lap)?;
    let r = tape.sub(neg, f)?;
    let r2 = tape.square(r)?;
    let interior = tape.mean(r2)?;
    let xb = tape.constant(poisson_rows(&p.boundary, &p.alphas, with_alpha)?);
    let ub = forward_on_tape(tape, cfg, vars, xb)?.out;
    let ub2 = tape.square(ub)?;
    let boundary = tape.mean(ub2)?;
    let wb = tape.scale(boundary, p.lambda_b)?;
    let total = tape.add(interior, wb)?;
    Ok(Recorded { interior, boundary, total })
}

fn poisson_loss_impl(p: &PoissonProblem, cfg: &MlpConfig, params: &MlpParams, with_alpha: bool) -> Result<PinnLoss> {
    p.validate()?;
    check_net(cfg, params, if with_alpha { 3 } else { 2 })?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, params);
    let r = record_poisson(&mut tape, cfg, &vars, p, with_alpha)?;
    Ok(loss_of(&tape, &r))
}

/// Loss of a network `u(x1, x2; alpha)` averaged over every alpha in the problem.
pub fn pinn_param_loss(p: &PoissonProblem, cfg: &MlpConfig, params: &MlpParams) -> Result<PinnLoss> {
    poisson_loss_impl(p, cfg, params, true)
}

/// Loss of a network `u(x1, x2)` for the single alpha in the problem.
pub fn poisson_loss(p: &PoissonProblem, cfg: &MlpConfig, params: &MlpParams) -> Result<PinnLoss> {
    if p.alphas.len() != 1 {
        return Err(invalid("poisson_loss takes exactly one alpha"));
    }
    poisson_loss_impl(p, cfg, params, false)
}

pub fn train_param_pinn(
    p: &PoissonProblem,
    cfg: &MlpConfig,
    opt: &mut Optimizer,
    iters: usize,
    seed: u64,
) -> Result<(MlpParams, TrainOutcome)> {
    p.validate()?;
    let mut params = MlpParams::init(cfg, &mut Rng::new(seed))?;
    check_net(cfg, &params, 3)?;
    let out = fit_network(cfg, &mut params, opt, iters, |tape, vars| Ok(record_poisson(tape, cfg, vars, p, true)?.total))?;
    Ok((params, out))
}

/// Five-point finite-difference solution of `-laplace u = f(.; alpha)` on an `n x n` interior
/// grid with spacing `1 / (n + 1)`, solved by conjugate gradients. Values are row-major in x1.
pub fn poisson_fd(alpha: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("Poisson grid needs n >= 1"));
    }
    let h = 1.0 / (n + 1) as f64;
    let apply = |u: &[f64], out: &mut [f64]| {
        for i in 0..n {
            for j in 0..n {
                let c = u[i * n + j];
                let l = if i > 0 { u[(i - 1) * n + j] } else { 0.0 };
                let r = if i + 1 < n { u[(i + 1) * n + j] } else { 0.0 };
                let d = if j > 0 { u[i * n + j - 1] } else { 0.0 };
                let t = if j + 1 < n { u[i * n + j + 1] } else { 0.0 };
                out[i * n + j] = (4.0 * c - l - r - d - t) / (h * h);
            }
        }
    };
    let b: Vec<f64> = (0..n * n)
        .map(|k| poisson_source((k / n + 1) as f64 * h, (k % n + 1) as f64 * h, alpha))
        .collect();
    let mut x = vec![0.0; n * n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n * n];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rr = dot(&r, &r);
    let tol = 1e-28 * dot(&b, &b).max(f64::MIN_POSITIVE);
    for _ in 0..10 * n * n {
        if rr <= tol {
            break;
        }
        apply(&p, &mut ap);
        let step = rr / dot(&p, &ap);
        for k in 0..n * n {
            x[k] += step * p[k];
            r[k] -= step * ap[k];
        }
        let next = dot(&r, &r);
        let beta = next / rr;
        rr = next;
        for k in 0..n * n {
            p[k] = r[k] + beta * p[k];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use crate::optim::{OptimizerKind, Schedule};

    fn identity_net() -> (MlpConfig, MlpParams) {
        let cfg = MlpConfig::new(vec![1, 1], Activation::Linear);
        let params = MlpParams {
            layers: vec![Layer {
                w: Tensor::matrix(&[vec![1.0]]).unwrap(),
                b: Tensor::matrix(&[vec![0.0]]).unwrap(),
            }],
        };
        (cfg, params)
    }

    #[test]
    fn exact_network_has_zero_loss() {
        let (cfg, params) = identity_net();
        let p = PinnProblem::new(AdvDiffProblem::new(0.0, 1.0, 1.0).unwrap(), 16, 10.0).unwrap();
        let l = pinn_loss(&p, &cfg, &params).unwrap();
        assert_eq!((l.interior, l.boundary, l.total), (0.0, 0.0, 0.0));
        let r = residual_1d(&p.pde, &cfg, &params, &p.points).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        let rep = error_bound_report(&p, &cfg, &params, 256).unwrap();
        assert_eq!(rep.residual_l2, 0.0);
        assert_eq!(rep.measure_interior, 1.0);
    }

    #[test]
    fn zero_network_boundary_loss() {
        let cfg = MlpConfig::new(vec![1, 5, 1], Activation::Tanh);
        let params = MlpParams::zeros(&cfg).unwrap();
        let mut p = PinnProblem::new(AdvDiffProblem::new(1.0, 1.0, 1.0).unwrap(), 8, 0.0).unwrap();
        let l = pinn_loss(&p, &cfg, &params).unwrap();
        assert_eq!(l.boundary, 1.0);
        assert_eq!(l.total, l.interior);
        p.points = vec![0.5];
        assert!(pinn_loss(&p, &cfg, &params).is_ok());
    }

    #[test]
    fn relu_network_is_rejected() {
        let cfg = MlpConfig::new(vec![1, 4, 1], Activation::Relu);
        let params = MlpParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let p = PinnProblem::new(AdvDiffProblem::new(1.0, 1.0, 1.0).unwrap(), 8, 1.0).unwrap();
        assert!(matches!(pinn_loss(&p, &cfg, &params), Err(crate::Error::InsufficientSmoothness(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = MlpConfig::new(vec![1, 6, 6, 1], Activation::Tanh);
        let params = MlpParams::init(&cfg, &mut Rng::new(4)).unwrap();
        let p = PinnProblem::new(AdvDiffProblem::new(1.0, 0.5, 1.0).unwrap(), 10, 10.0).unwrap();
        let t = Tape::record(|t| {
            let vars = MlpVars::params(t, &params);
            Ok(record_pinn_1d(t, &cfg, &vars, &p)?.total)
        })
        .unwrap();
        let r = t.grad_check(1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn linear_target_trains_to_small_loss() {
        let cfg = MlpConfig::new(vec![1, 4, 1], Activation::Linear);
        let p = PinnProblem::new(AdvDiffProblem::new(0.0, 1.0, 1.0).unwrap(), 16, 10.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-2, Schedule::Constant);
        let run = train_pinn(&p, &cfg, &mut opt, 2000, 1).unwrap();
        assert!(run.loss.total < 1e-6, "{:?}", run.loss);
    }

    #[test]
    fn quadrature_gap_shrinks() {
        let cfg = MlpConfig::new(vec![1, 8, 1], Activation::Tanh);
        let params = MlpParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let pde = AdvDiffProblem::new(1.0, 1.0, 1.0).unwrap();
        let gaps: Vec<f64> = [16, 64, 256]
            .iter()
            .map(|&n| {
                let p = PinnProblem::new(pde.clone(), n, 10.0).unwrap();
                error_bound_report(&p, &cfg, &params, 4096).unwrap().quadrature_gap
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn assimilation_examples() {
        let (cfg, params) = identity_net();
        let pde = AdvDiffProblem::new(0.0, 1.0, 1.0).unwrap();
        let p = AssimilationProblem {
            pde,
            measurements: vec![(0.2, 0.2), (0.7, 0.7)],
            points: uniform_points(5, 1.0),
            lambda_i: 3.0,
            lambda: 0.5,
        };
        let l = assimilation_loss(&p, &cfg, &params).unwrap();
        assert_eq!(l.data, 0.0);
        assert_eq!(l.physics, 0.0);
        assert_eq!(l.total, 0.5);
        let pe1 = AdvDiffProblem::new(1.0, 1.0, 1.0).unwrap();
        let u = exact_adv_diff(&pe1, 0.5).unwrap();
        assert!((u - 0.37754).abs() < 1e-5);
    }

    #[test]
    fn param_loss_examples() {
        assert_eq!(poisson_source(0.5, 0.5, 1.0), 0.25);
        let cfg3 = MlpConfig::new(vec![3, 5, 1], Activation::Tanh);
        let mut p3 = MlpParams::init(&cfg3, &mut Rng::new(2)).unwrap();
        for r in 0..5 {
            p3.layers[0].w.set(&[r, 2], 0.0);
        }
        let cfg2 = MlpConfig::new(vec![2, 5, 1], Activation::Tanh);
        let mut p2 = MlpParams::zeros(&cfg2).unwrap();
        for r in 0..5 {
            for c in 0..2 {
                p2.layers[0].w.set(&[r, c], p3.layers[0].w.at(&[r, c]));
            }
        }
        p2.layers[1] = p3.layers[1].clone();
        p2.layers[0].b = p3.layers[0].b.clone();
        let prob = PoissonProblem::uniform(4, vec![0.7], 2.0).unwrap();
        let a = pinn_param_loss(&prob, &cfg3, &p3).unwrap();
        let b = poisson_loss(&prob, &cfg2, &p2).unwrap();
        assert!((a.total - b.total).abs() < 1e-13);
        let zero = MlpParams::zeros(&cfg3).unwrap();
        let z = pinn_param_loss(&PoissonProblem::uniform(3, vec![0.0], 1.0).unwrap(), &cfg3, &zero).unwrap();
        assert_eq!(z.total, 0.0);
        assert!(PoissonProblem::uniform(3, vec![], 1.0).is_err());
    }

    #[test]
    fn poisson_fd_converges() {
        // Compare centre values on nested grids; the scheme is second order.
        let c = |n: usize| poisson_fd(1.0, n).unwrap()[(n / 2) * n + n / 2];
        let (a, b, d) = (c(7), c(15), c(31));
        let ratio = (a - b) / (b - d);
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }
}
