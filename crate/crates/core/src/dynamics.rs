//! Explicit ODE integrators, the ResNet/forward-Euler correspondence and neural ODE training.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{forward_on_tape, hidden_states, param_count, MlpConfig, MlpParams, MlpVars};
use crate::optim::{minibatch_train, Optimizer, RunStatus, TrainOutcome};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            _ => Err(invalid(format!("unknown integrator {s:?}"))),
        }
    }
}

/// States `x(t_0..t_L)` at `t_l = l dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Columns `t,x1,..,xd`.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, Vec::len);
        let mut s = String::from("t");
        for k in 1..=d {
            let _ = write!(s, ",x{k}");
        }
        s.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            let _ = write!(s, "{t:.12e}");
            for v in x {
                let _ = write!(s, ",{v:.12e}");
            }
            s.push('\n');
        }
        s
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(x, k)| x + a * k).collect()
}

/// One explicit step from `(x, t)`.
pub fn step(f: &impl Fn(&[f64], f64) -> Vec<f64>, x: &[f64], t: f64, dt: f64, method: Method) -> Vec<f64> {
    match method {
        Method::Euler => axpy(x, dt, &f(x, t)),
        Method::Rk4 => {
            let k1 = f(x, t);
            let k2 = f(&axpy(x, dt / 2.0, &k1), t + dt / 2.0);
            let k3 = f(&axpy(x, dt / 2.0, &k2), t + dt / 2.0);
            let k4 = f(&axpy(x, dt, &k3), t + dt);
            x.iter()
                .enumerate()
                .map(|(i, &xi)| xi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    }
}

/// Integrates `x' = f(x, t)` for `steps` steps of size `dt`, keeping every state.
pub fn integrate(f: impl Fn(&[f64], f64) -> Vec<f64>, x0: &[f64], dt: f64, steps: usize, method: Method) -> Result<Trajectory> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(invalid(format!("time step must be positive, got {dt}")));
    }
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    let mut x = x0.to_vec();
    for l in 0..steps {
        let t = l as f64 * dt;
        x = step(&f, &x, t, dt, method);
        if x.len() != x0.len() {
            return Err(invalid("right-hand side changed the state dimension"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: l + 1,
                what: "non-finite state".into(),
            });
        }
        times.push((l + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Records the same integrators on a tape for a batch of states `(N, d)`.
pub fn integrate_on_tape(
    tape: &mut Tape,
    rhs: &mut dyn FnMut(&mut Tape, Var, f64) -> Result<Var>,
    x0: Var,
    dt: f64,
    steps: usize,
    method: Method,
) -> Result<Vec<Var>> {
    let mut traj = vec![x0];
    let mut x = x0;
    for l in 0..steps {
        let t = l as f64 * dt;
        x = match method {
            Method::Euler => {
                let k = rhs(tape, x, t)?;
                let k = tape.scale(k, dt)?;
                tape.add(x, k)?
            }
            Method::Rk4 => {
                let k1 = rhs(tape, x, t)?;
                let h1 = tape.scale(k1, dt / 2.0)?;
                let x1 = tape.add(x, h1)?;
                let k2 = rhs(tape, x1, t + dt / 2.0)?;
                let h2 = tape.scale(k2, dt / 2.0)?;
                let x2 = tape.add(x, h2)?;
                let k3 = rhs(tape, x2, t + dt / 2.0)?;
                let h3 = tape.scale(k3, dt)?;
                let x3 = tape.add(x, h3)?;
                let k4 = rhs(tape, x3, t + dt)?;
                let k2 = tape.scale(k2, 2.0)?;
                let k3 = tape.scale(k3, 2.0)?;
                let s = tape.add(k1, k2)?;
                let s = tape.add(s, k3)?;
                let s = tape.add(s, k4)?;
                let s = tape.scale(s, dt / 6.0)?;
                tape.add(x, s)?
            }
        };
        traj.push(x);
    }
    Ok(traj)
}

/// Neural ODE `x' = V(x, t / T; theta)` integrated to `T` in `steps` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSystem {
    /// Network widths; the input is the state followed by normalized time.
    pub rhs: MlpConfig,
    pub t_final: f64,
    pub steps: usize,
    pub method: Method,
}

impl OdeSystem {
    pub fn validate(&self) -> Result<()> {
        self.rhs.validate()?;
        if self.rhs.input_dim() != self.rhs.output_dim() + 1 {
            return Err(invalid(format!(
                "rhs network maps {} -> {}; it must take the state plus time and return the state",
                self.rhs.input_dim(),
                self.rhs.output_dim()
            )));
        }
        if !(self.t_final > 0.0) || self.steps == 0 {
            return Err(invalid("neural ODE needs T > 0 and at least one step"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.rhs.output_dim()
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    /// Trainable parameters, independent of the step count.
    pub fn param_count(&self) -> usize {
        param_count(&self.rhs.widths)
    }

    /// Records the final states for the batch node `x0` of shape `(N, d)`.
    pub fn record(&self, tape: &mut Tape, vars: &MlpVars, x0: Var) -> Result<Vec<Var>> {
        let (n, _) = tape.value(x0).dims2()?;
        let t_final = self.t_final;
        let mut rhs = |tape: &mut Tape, x: Var, t: f64| -> Result<Var> {
            let tc = tape.constant(Tensor::full(&[n, 1], t / t_final));
            let inp = tape.concat_cols(&[x, tc])?;
            Ok(forward_on_tape(tape, &self.rhs, vars, inp)?.out)
        };
        integrate_on_tape(tape, &mut rhs, x0, self.dt(), self.steps, self.method)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOde {
    pub system: OdeSystem,
    pub params: MlpParams,
}

impl NeuralOde {
    pub fn new(system: OdeSystem, rng: &mut Rng) -> Result<Self> {
        system.validate()?;
        let params = MlpParams::init(&system.rhs, rng)?;
        Ok(Self { system, params })
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.system.state_dim() {
            return Err(invalid(format!("states have width {d}, system has {}", self.system.state_dim())));
        }
        Ok(())
    }

    /// `x(T)` for each row of `x0`.
    pub fn predict(&self, x0: &Tensor) -> Result<Tensor> {
        self.check_batch(x0)?;
        let mut tape = Tape::new();
        let vars = MlpVars::constants(&mut tape, &self.params);
        let x = tape.constant(x0.clone());
        let traj = self.system.record(&mut tape, &vars, x)?;
        Ok(tape.value(*traj.last().unwrap_or(&x)).clone())
    }

    /// Full trajectory of a single initial state.
    pub fn trajectory(&self, x0: &[f64]) -> Result<Trajectory> {
        let row = Tensor::new(vec![1, x0.len()], x0.to_vec())?;
        self.check_batch(&row)?;
        let mut tape = Tape::new();
        let vars = MlpVars::constants(&mut tape, &self.params);
        let x = tape.constant(row);
        let traj = self.system.record(&mut tape, &vars, x)?;
        let dt = self.system.dt();
        Ok(Trajectory {
            times: (0..traj.len()).map(|l| l as f64 * dt).collect(),
            states: traj.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
        })
    }

    /// Records `mean_i |x_i(T) - y_i|^2` and returns the loss node and parameter handles.
    pub fn record_loss(&self, tape: &mut Tape, params: &MlpParams, x: &Tensor, y: &Tensor) -> Result<(Var, MlpVars)> {
        self.check_batch(x)?;
        if x.shape() != y.shape() {
            return Err(invalid(format!("inputs {:?} and targets {:?} differ in shape", x.shape(), y.shape())));
        }
        let vars = MlpVars::params(tape, params);
        let xv = tape.constant(x.clone());
        let traj = self.system.record(tape, &vars, xv)?;
        let yv = tape.constant(y.clone());
        let last = *traj.last().unwrap_or(&xv);
        let d = tape.sub(last, yv)?;
        let d2 = tape.square(d)?;
        let per = tape.sum_cols(d2)?;
        Ok((tape.mean(per)?, vars))
    }

    pub fn loss(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _) = self.record_loss(&mut tape, &self.params.clone(), x, y)?;
        Ok(tape.value(l).item())
    }
}

fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = t.dims2()?;
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), d], out)
}

/// Discretize-then-optimize training on pairs `x_i -> y_i`.
pub fn node_train(
    model: &mut NeuralOde,
    x: &Tensor,
    y: &Tensor,
    opt: &mut Optimizer,
    epochs: usize,
    n_batch: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let (n, _) = x.dims2()?;
    let mut ts = model.params.to_tensors();
    let template = model.clone();
    let outcome = minibatch_train(
        &mut ts,
        n,
        opt,
        epochs,
        n_batch,
        seed,
        |p, batch| {
            let params = MlpParams::from_tensors(p)?;
            let (xb, yb) = if batch.len() == n { (x.clone(), y.clone()) } else { (rows(x, batch)?, rows(y, batch)?) };
            let mut tape = Tape::new();
            let (loss, vars) = template.record_loss(&mut tape, &params, &xb, &yb)?;
            tape.set_tip(loss);
            let g = tape.backward_scalar()?;
            Ok((tape.value(loss).item(), vars.flat().iter().zip(p).map(|(&v, t)| g.get_or_zeros(v, t)).collect()))
        },
        None,
    )?;
    if outcome.status == RunStatus::Completed {
        model.params = MlpParams::from_tensors(&ts)?;
    }
    Ok(outcome)
}

/// Largest difference between the ResNet hidden states `x^(1..L)` and forward Euler with the
/// per-layer right-hand sides `V_l(x) = sigma(W^(l) x + b^(l)) / dt`, started from `x^(1)`.
pub fn resnet_ode_equivalence(cfg: &MlpConfig, params: &MlpParams, x: &Tensor, dt: f64) -> Result<f64> {
    if !cfg.residual {
        return Err(invalid("equivalence check needs a residual network"));
    }
    let hidden = &cfg.widths[1..cfg.widths.len() - 1];
    if hidden.is_empty() || cfg.widths.iter().any(|&w| w != cfg.widths[0]) {
        return Err(invalid(format!("equivalence needs equal input, hidden and output widths, got {:?}", cfg.widths)));
    }
    if !(dt > 0.0) {
        return Err(invalid("time step must be positive"));
    }
    let states = hidden_states(cfg, params, x)?;
    let mut z = states[0].clone();
    let mut dev = 0.0f64;
    for (l, target) in states.iter().enumerate().skip(1) {
        let layer = &params.layers[l];
        let pre = z.matmul(&layer.w.transpose()?)?;
        let (n, h) = pre.dims2()?;
        let mut v = pre.data().to_vec();
        for i in 0..n {
            for j in 0..h {
                v[i * h + j] = cfg.activation.apply(v[i * h + j] + layer.b.data()[j]) / dt;
            }
        }
        let vt = Tensor::new(vec![n, h], v)?;
        z = z.add(&vt.scale(dt))?;
        dev = dev.max(z.max_abs_diff(target)?);
    }
    Ok(dev)
}

/// Predictions of a trained model at `steps`, `2 steps` and `4 steps`, with the estimated order
/// `log2(|p1 - p2| / |p2 - p4|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementReport {
    pub steps: [usize; 3],
    pub max_changes: [f64; 2],
    pub order: f64,
}

pub fn refinement_report(model: &NeuralOde, x: &Tensor) -> Result<RefinementReport> {
    let base = model.system.steps;
    let at = |s: usize| {
        let mut m = model.clone();
        m.system.steps = s;
        m.predict(x)
    };
    let p = [at(base)?, at(2 * base)?, at(4 * base)?];
    let c1 = p[0].max_abs_diff(&p[1])?;
    let c2 = p[1].max_abs_diff(&p[2])?;
    Ok(RefinementReport {
        steps: [base, 2 * base, 4 * base],
        max_changes: [c1, c2],
        order: (c1 / c2).log2(),
    })
}

/// Dataset for `x' = x` over `[0, T]`: `n` equispaced starts in `[-1, 1]` and `y = e^T x`.
pub fn exponential_map_data(n: usize, t_final: f64) -> Result<(Tensor, Tensor)> {
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    let xs: Vec<f64> = (0..n).map(|i| if n == 1 { 0.5 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 }).collect();
    let ys = xs.iter().map(|x| x * t_final.exp()).collect();
    Ok((Tensor::column(xs), Tensor::column(ys)))
}
