//! Parameter records and bodies of the subcommands.

use crate::artifacts::{Cell, Metrics, RunDir, Table, CHECKPOINT, HISTORY, RESULTS};
use crate::error::{CliError, CliResult};
use sciml_core::convnet::{conv1d, fd_equivalence_check, steady_counts_uniform, transpose_conv1d, Crop, StencilKind};
use sciml_core::dynamics::{exponential_map_data, node_train, refinement_report, Method, NeuralOde, OdeSystem};
use sciml_core::generative::{
    default_test_functions, empirical_stats, frobenius_distance, samples_csv, train_wgan, weak_convergence_check, Distribution, GanSettings,
    Sampler, WganModel,
};
use sciml_core::nn::{checkpoint_from_json, checkpoint_to_json, forward_on_tape, gradient_fidelity, mlp_forward, mse_on_tape, Activation, MlpConfig, MlpParams, MlpVars};
use sciml_core::operatornet::{
    antiderivative_oracle, build_deeponet_dataset, deeponet_train, fno_forward_batch, fno_relative_error, fno_train, relative_l2,
    screened_poisson_dataset, DeepOnet, FnoConfig, FnoParams, FourierSeries, GridFunction2D, SensorSet, TrainSettings,
};
use sciml_core::optim::{minibatch_train, sgd_toy, sgd_toy_minimizer, History, Optimizer, OptimizerKind, RunStatus, Schedule};
use sciml_core::pdesolve::{collocation_points, exact_adv_diff, fit_spectral_lsq, solve_fd, solve_spectral, AdvDiffProblem, PointRule};
use sciml_core::pinn::{error_bound_report, network_values, residual_1d, train_pinn, PinnProblem};
use sciml_core::{Rng, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// What a command body hands back to the runner.
pub struct Outcome {
    pub metrics: Metrics,
    /// Set when training stopped on a non-finite value; artifacts written so far are kept.
    pub diverged: Option<String>,
}

impl Outcome {
    fn done(metrics: Metrics) -> Self {
        Self { metrics, diverged: None }
    }

    fn from_status(metrics: Metrics, status: RunStatus, what: &str) -> Self {
        let diverged = match status {
            RunStatus::Completed => None,
            RunStatus::Diverged { epoch } => Some(format!("{what} became non-finite at epoch {epoch}")),
        };
        Self { metrics, diverged }
    }
}

/// Run context shared by all commands.
pub struct Ctx {
    pub seed: u64,
    pub precision: usize,
    pub out: RunDir,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

fn with_io(widths: &[usize], input: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(widths);
    w.push(output);
    w
}

fn checkpoint_value(cfg: &MlpConfig, params: &MlpParams) -> CliResult<serde_json::Value> {
    let s = checkpoint_to_json(cfg, params)?;
    serde_json::from_str(&s).map_err(|e| sciml_core::Error::Serialization(e.to_string()).into())
}

fn write_history(ctx: &mut Ctx, history: &History) -> CliResult<()> {
    let csv = history.to_csv(ctx.precision);
    ctx.out.write(HISTORY, &csv)
}

fn problem(a: f64, kappa: f64, ell: f64) -> CliResult<AdvDiffProblem> {
    Ok(AdvDiffProblem::new(a, kappa, ell)?)
}

// ---------------------------------------------------------------- solve-fd

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveFdParams {
    pub a: f64,
    pub kappa: f64,
    pub ell: f64,
    /// Number of grid intervals.
    pub n: usize,
}

impl Default for SolveFdParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            kappa: 1.0,
            ell: 1.0,
            n: 64,
        }
    }
}

pub fn solve_fd_cmd(p: &SolveFdParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let prob = problem(p.a, p.kappa, p.ell)?;
    let sol = solve_fd(&prob, p.n)?;
    let mut t = Table::new(&["x", "u", "u_exact", "error"], ctx.precision);
    let mut max_error: f64 = 0.0;
    for (&x, &u) in sol.x.iter().zip(&sol.u) {
        let e = exact_adv_diff(&prob, x)?;
        max_error = max_error.max((u - e).abs());
        t.row([x.into(), u.into(), e.into(), (u - e).abs().into()]);
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    let mut m = Metrics::default();
    m.set("peclet", prob.peclet());
    m.set("max_error", max_error);
    Ok(Outcome::done(m))
}

// ---------------------------------------------------------- solve-spectral

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Points {
    GaussLobatto,
    Uniform,
}

impl From<Points> for PointRule {
    fn from(p: Points) -> Self {
        match p {
            Points::GaussLobatto => PointRule::GaussLobatto,
            Points::Uniform => PointRule::Uniform,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeastSquaresParams {
    pub iters: usize,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSpectralParams {
    pub a: f64,
    pub kappa: f64,
    pub ell: f64,
    /// Polynomial degree.
    pub n: usize,
    pub points: Points,
    pub check_points: usize,
    /// Also fit the coefficients by minimizing the collocation least-squares loss.
    #[serde(default)]
    pub least_squares: Option<LeastSquaresParams>,
}

impl Default for SolveSpectralParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            kappa: 1.0,
            ell: 1.0,
            n: 20,
            points: Points::GaussLobatto,
            check_points: 101,
            least_squares: None,
        }
    }
}

pub fn solve_spectral_cmd(p: &SolveSpectralParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let prob = problem(p.a, p.kappa, p.ell)?;
    let sol = solve_spectral(&prob, p.n, p.points.into())?;
    let lsq = match &p.least_squares {
        Some(l) => {
            let pts = collocation_points(p.points.into(), p.n, p.ell);
            Some(fit_spectral_lsq(&prob, p.n, &pts, l.lambda, l.iters, l.lr)?)
        }
        None => None,
    };
    let xs = linspace(0.0, p.ell, p.check_points);
    let mut header = vec!["x", "u", "u_exact", "error"];
    if lsq.is_some() {
        header.push("u_lsq");
    }
    let mut t = Table::new(&header, ctx.precision);
    let mut max_error: f64 = 0.0;
    for &x in &xs {
        let u = sol.eval(x)?;
        let e = exact_adv_diff(&prob, x)?;
        max_error = max_error.max((u - e).abs());
        let mut row = vec![x.into(), u.into(), e.into(), (u - e).abs().into()];
        if let Some(f) = &lsq {
            row.push(f.solution.eval(x)?.into());
        }
        t.row(row);
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    let mut m = Metrics::default();
    m.set("max_error", max_error);
    m.set("coefficients", &sol.coeffs);
    if let Some(f) = &lsq {
        let mut h = Table::new(&["iter", "loss"], ctx.precision);
        for (i, l) in f.history.iter().enumerate() {
            h.row([i.into(), (*l).into()]);
        }
        ctx.out.write(HISTORY, &h.into_string())?;
        let diff = f.solution.coeffs.iter().zip(&sol.coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        m.set("lsq_loss", f.loss.total);
        m.set("lsq_coefficient_max_diff", diff);
    }
    Ok(Outcome::done(m))
}

// --------------------------------------------------------------- train-mlp

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// `sin(pi x)`
    SinPi,
    /// `x^2`
    Quadratic,
    /// `|x|`
    Abs,
}

impl Target {
    fn eval(self, x: f64) -> f64 {
        match self {
            Target::SinPi => (std::f64::consts::PI * x).sin(),
            Target::Quadratic => x * x,
            Target::Abs => x.abs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMlpParams {
    /// Hidden-layer widths; input and output are scalar.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub target: Target,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub lr: f64,
    pub n_batch: usize,
    pub optimizer: OptimizerKind,
    /// Checkpoint to start from, relative to the output directory.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

impl Default for TrainMlpParams {
    fn default() -> Self {
        Self {
            hidden: vec![20, 20],
            activation: Activation::Tanh,
            target: Target::SinPi,
            n_train: 64,
            n_val: 101,
            epochs: 500,
            lr: 1e-2,
            n_batch: 4,
            optimizer: OptimizerKind::adam(),
            init: None,
        }
    }
}

fn mlp_batch_grad(cfg: &MlpConfig, p: &[Tensor], x: &Tensor, y: &Tensor) -> sciml_core::Result<(f64, Vec<Tensor>)> {
    let params = MlpParams::from_tensors(p)?;
    let mut tape = Tape::new();
    let vars = MlpVars::params(&mut tape, &params);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = forward_on_tape(&mut tape, cfg, &vars, xv)?.out;
    let loss = mse_on_tape(&mut tape, out, yv)?;
    tape.set_tip(loss);
    let g = tape.backward_scalar()?;
    let grads = vars.flat().iter().zip(p).map(|(&v, t)| g.get_or_zeros(v, t)).collect();
    Ok((tape.value(loss).item(), grads))
}

pub fn train_mlp_cmd(p: &TrainMlpParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let cfg = MlpConfig::new(with_io(&p.hidden, 1, 1), p.activation);
    cfg.validate()?;
    let mut rng = Rng::new(ctx.seed);
    let params = match &p.init {
        Some(path) => {
            let path = ctx.out.resolve(path);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let (loaded_cfg, params) = checkpoint_from_json(&text)?;
            if loaded_cfg != cfg {
                return Err(CliError::config(
                    "/params/init",
                    format!("checkpoint network {:?} does not match the configured {:?}", loaded_cfg, cfg),
                ));
            }
            params
        }
        None => MlpParams::init(&cfg, &mut rng.fork())?,
    };
    let xs: Vec<f64> = (0..p.n_train).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| p.target.eval(x)).collect();
    let xv = linspace(-1.0, 1.0, p.n_val);
    let val_x = Tensor::column(xv.clone());
    let val_y = Tensor::column(xv.iter().map(|&x| p.target.eval(x)).collect());
    let mut ts = params.to_tensors();
    let mut opt = Optimizer::new(p.optimizer, p.lr, Schedule::Constant);
    let mut val = |q: &[Tensor]| -> sciml_core::Result<f64> {
        let pred = mlp_forward(&cfg, &MlpParams::from_tensors(q)?, &val_x)?;
        Ok(pred.sub(&val_y)?.data().iter().map(|v| v * v).sum::<f64>() / p.n_val.max(1) as f64)
    };
    let outcome = minibatch_train(
        &mut ts,
        p.n_train,
        &mut opt,
        p.epochs,
        p.n_batch,
        ctx.seed,
        |q, batch| {
            let x = Tensor::column(batch.iter().map(|&i| xs[i]).collect());
            let y = Tensor::column(batch.iter().map(|&i| ys[i]).collect());
            mlp_batch_grad(&cfg, q, &x, &y)
        },
        Some(&mut val),
    )?;
    write_history(ctx, &outcome.history)?;
    let mut m = Metrics::default();
    m.set("train_loss", outcome.history.last_train_loss());
    if outcome.status != RunStatus::Completed {
        return Ok(Outcome::from_status(m, outcome.status, "training loss"));
    }
    let trained = MlpParams::from_tensors(&ts)?;
    let pred = mlp_forward(&cfg, &trained, &val_x)?;
    let mut t = Table::new(&["x", "target", "prediction"], ctx.precision);
    for (i, &x) in xv.iter().enumerate() {
        t.row([x.into(), val_y.data()[i].into(), pred.data()[i].into()]);
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    ctx.out.write(CHECKPOINT, &checkpoint_to_json(&cfg, &trained)?)?;
    m.set("val_loss", outcome.history.records.last().and_then(|r| r.val_loss));
    m.set("val_relative_l2", relative_l2(pred.data(), val_y.data()));
    Ok(Outcome::done(m))
}

// -------------------------------------------------------------- train-pinn

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPinnParams {
    pub a: f64,
    pub kappa: f64,
    pub ell: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Interior collocation points.
    pub n_points: usize,
    pub lambda_b: f64,
    pub iters: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Output sample count for the solution table.
    pub n_out: usize,
}

impl Default for TrainPinnParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            kappa: 1.0,
            ell: 1.0,
            hidden: vec![20, 20, 20],
            activation: Activation::Tanh,
            n_points: 64,
            lambda_b: 10.0,
            iters: 5000,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            n_out: 101,
        }
    }
}

pub fn train_pinn_cmd(p: &TrainPinnParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let pde = problem(p.a, p.kappa, p.ell)?;
    let prob = PinnProblem::new(pde.clone(), p.n_points, p.lambda_b)?;
    let cfg = MlpConfig::new(with_io(&p.hidden, 1, 1), p.activation);
    let mut opt = Optimizer::new(p.optimizer, p.lr, Schedule::Constant);
    let run = train_pinn(&prob, &cfg, &mut opt, p.iters, ctx.seed)?;
    write_history(ctx, &run.outcome.history)?;
    let mut m = Metrics::default();
    if run.outcome.status != RunStatus::Completed {
        return Ok(Outcome::from_status(m, run.outcome.status, "PINN loss"));
    }
    let xs = linspace(0.0, p.ell, p.n_out);
    let u = network_values(&cfg, &run.params, &xs)?;
    let r = residual_1d(&pde, &cfg, &run.params, &xs)?;
    let mut t = Table::new(&["x", "u_pinn", "u_exact", "residual"], ctx.precision);
    for (i, &x) in xs.iter().enumerate() {
        t.row([x.into(), u[i].into(), exact_adv_diff(&pde, x)?.into(), r[i].into()]);
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    ctx.out.write(CHECKPOINT, &checkpoint_to_json(&cfg, &run.params)?)?;
    m.set("loss_interior", run.loss.interior);
    m.set("loss_boundary", run.loss.boundary);
    m.set("loss_total", run.loss.total);
    m.set("relative_l2", run.rel_l2_error);
    m.set("error_bound", error_bound_report(&prob, &cfg, &run.params, 2048)?.to_value());
    Ok(Outcome::done(m))
}

trait ToValue {
    fn to_value(&self) -> serde_json::Value;
}

impl ToValue for sciml_core::pinn::ErrorBoundReport {
    fn to_value(&self) -> serde_json::Value {
        serde_json::json!({
            "pi_int": self.pi_int,
            "pi_b": self.pi_b,
            "interior_estimate": self.interior_estimate,
            "boundary_estimate": self.boundary_estimate,
            "residual_l2": self.residual_l2,
            "quadrature_gap": self.quadrature_gap,
        })
    }
}

// ---------------------------------------------------------- train-deeponet

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDeepOnetParams {
    pub sensors: usize,
    /// Dimension `p` of the branch and trunk outputs.
    pub latent: usize,
    pub branch_hidden: Vec<usize>,
    pub branch_activation: Activation,
    pub trunk_hidden: Vec<usize>,
    pub trunk_activation: Activation,
    /// Fourier modes of the random input functions on `[0, 1]`.
    pub modes: usize,
    pub scale: f64,
    pub n_train_functions: usize,
    pub n_train_points: usize,
    pub n_test_functions: usize,
    pub n_test_points: usize,
    pub epochs: usize,
    pub lr: f64,
    pub n_batch: usize,
}

impl Default for TrainDeepOnetParams {
    fn default() -> Self {
        Self {
            sensors: 32,
            latent: 16,
            branch_hidden: Vec::new(),
            branch_activation: Activation::Linear,
            trunk_hidden: vec![40, 40],
            trunk_activation: Activation::Tanh,
            modes: 4,
            scale: 1.0,
            n_train_functions: 100,
            n_train_points: 20,
            n_test_functions: 20,
            n_test_points: 50,
            epochs: 5000,
            lr: 2e-3,
            n_batch: 10,
        }
    }
}

/// Antiderivative benchmark with a fixed seed layout: the model is initialized from `seed`,
/// training and test functions come from `seed + 1` and `seed + 2`, and batches are shuffled
/// from `seed + 3`.
pub fn deeponet_benchmark(p: &TrainDeepOnetParams, seed: u64) -> sciml_core::Result<(DeepOnet, sciml_core::optim::TrainOutcome, [f64; 2], sciml_core::operatornet::OperatorDataset, Tensor)> {
    let sensors = SensorSet::uniform(p.sensors, 0.0, 1.0)?;
    let (modes, scale) = (p.modes, p.scale);
    let sampler = move |r: &mut Rng| FourierSeries::random(r, modes, scale, 1.0).into_fn();
    let oracle = antiderivative_oracle(200);
    let train = build_deeponet_dataset(sampler, &oracle, &sensors, p.n_train_functions, p.n_train_points, (0.0, 1.0), seed.wrapping_add(1))?;
    let test = build_deeponet_dataset(sampler, &oracle, &sensors, p.n_test_functions, p.n_test_points, (0.0, 1.0), seed.wrapping_add(2))?;
    let bcfg = MlpConfig::new(with_io(&p.branch_hidden, p.sensors, p.latent), p.branch_activation);
    let tcfg = MlpConfig::new(with_io(&p.trunk_hidden, 1, p.latent), p.trunk_activation);
    let mut model = DeepOnet::new(sensors, bcfg, tcfg, &mut Rng::new(seed))?;
    let settings = TrainSettings {
        epochs: p.epochs,
        lr: p.lr,
        n_batch: p.n_batch,
        seed: seed.wrapping_add(3),
    };
    let outcome = deeponet_train(&mut model, &train, None, 0.0, settings)?;
    let train_pred = model.predict(&train.inputs, &train.fn_index, &train.x)?;
    let test_pred = model.predict(&test.inputs, &test.fn_index, &test.x)?;
    let errors = [relative_l2(train_pred.data(), train.u.data()), relative_l2(test_pred.data(), test.u.data())];
    Ok((model, outcome, errors, test, test_pred))
}

pub fn train_deeponet_cmd(p: &TrainDeepOnetParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let (model, outcome, [train_err, test_err], test, pred) = deeponet_benchmark(p, ctx.seed)?;
    write_history(ctx, &outcome.history)?;
    let mut m = Metrics::default();
    if outcome.status != RunStatus::Completed {
        return Ok(Outcome::from_status(m, outcome.status, "DeepONet loss"));
    }
    let mut t = Table::new(&["function", "x", "u_true", "u_pred"], ctx.precision);
    for i in 0..test.len() {
        t.row([test.fn_index[i].into(), test.x.data()[i].into(), test.u.data()[i].into(), pred.data()[i].into()]);
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    let ckpt = serde_json::json!({
        "sensors": model.sensors.points,
        "branch": checkpoint_value(&model.branch_cfg, &model.branch)?,
        "trunk": checkpoint_value(&model.trunk_cfg, &model.trunk)?,
    });
    ctx.out.write_json(CHECKPOINT, &ckpt)?;
    m.set("train_relative_l2", train_err);
    m.set("test_relative_l2", test_err);
    Ok(Outcome::done(m))
}

// --------------------------------------------------------------- train-fno

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFnoParams {
    /// Grid points on the periodic interval `[0, 2 pi)`.
    pub n: usize,
    /// Fourier modes of the random forcing.
    pub forcing_modes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub width: usize,
    pub layers: usize,
    /// Retained spectral modes.
    pub k: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub n_batch: usize,
}

impl Default for TrainFnoParams {
    fn default() -> Self {
        Self {
            n: 64,
            forcing_modes: 4,
            n_train: 100,
            n_test: 20,
            width: 16,
            layers: 2,
            k: 8,
            activation: Activation::Tanh,
            epochs: 500,
            lr: 1e-3,
            n_batch: 10,
        }
    }
}

pub struct FnoRun {
    pub cfg: FnoConfig,
    pub params: FnoParams,
    pub outcome: sciml_core::optim::TrainOutcome,
    pub test: sciml_core::operatornet::FnoDataset,
    pub errors: [f64; 2],
}

/// Screened Poisson benchmark: data from `seed + 1`, initialization from `seed`, shuffling
/// from `seed + 2`.
pub fn fno_benchmark(p: &TrainFnoParams, seed: u64) -> sciml_core::Result<FnoRun> {
    let period = 2.0 * std::f64::consts::PI;
    let data = screened_poisson_dataset(p.n_train + p.n_test, p.n, p.forcing_modes, period, seed.wrapping_add(1))?;
    let (train, test) = data.split_at(p.n_train);
    let cfg = FnoConfig {
        in_channels: 1,
        width: p.width,
        layers: p.layers,
        k1: p.k,
        k2: 0,
        activation: p.activation,
        l1: period,
        l2: 1.0,
    };
    let mut params = FnoParams::init(&cfg, &mut Rng::new(seed))?;
    let settings = TrainSettings {
        epochs: p.epochs,
        lr: p.lr,
        n_batch: p.n_batch,
        seed: seed.wrapping_add(2),
    };
    let outcome = fno_train(&cfg, &mut params, &train, settings)?;
    let errors = if outcome.status == RunStatus::Completed {
        [fno_relative_error(&cfg, &params, &train)?, fno_relative_error(&cfg, &params, &test)?]
    } else {
        [f64::NAN; 2]
    };
    Ok(FnoRun {
        cfg,
        params,
        outcome,
        test,
        errors,
    })
}

pub fn train_fno_cmd(p: &TrainFnoParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let run = fno_benchmark(p, ctx.seed)?;
    write_history(ctx, &run.outcome.history)?;
    let mut m = Metrics::default();
    if run.outcome.status != RunStatus::Completed {
        return Ok(Outcome::from_status(m, run.outcome.status, "FNO loss"));
    }
    let refs: Vec<&GridFunction2D> = run.test.inputs.iter().collect();
    let pred = fno_forward_batch(&run.cfg, &run.params, &refs)?;
    let mut t = Table::new(&["sample", "x", "a", "u_true", "u_pred"], ctx.precision);
    for (s, ((a, u), g)) in run.test.inputs.iter().zip(&run.test.outputs).zip(&pred).enumerate() {
        for i in 0..a.n1 {
            let x = a.l1 * i as f64 / a.n1 as f64;
            t.row([s.into(), x.into(), a.values[i].into(), u.values[i].into(), g.values[i].into()]);
        }
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    ctx.out.write_json(CHECKPOINT, &serde_json::json!({ "config": run.cfg, "params": run.params }))?;
    m.set("train_relative_l2", run.errors[0]);
    m.set("test_relative_l2", run.errors[1]);
    Ok(Outcome::done(m))
}

// -------------------------------------------------------------- train-node

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainNodeParams {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub t_final: f64,
    pub steps: usize,
    pub method: Method,
    pub n_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub n_batch: usize,
}

impl Default for TrainNodeParams {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Tanh,
            t_final: 1.0,
            steps: 10,
            method: Method::Rk4,
            n_samples: 200,
            epochs: 300,
            lr: 1e-2,
            n_batch: 4,
        }
    }
}

/// Learns the time-`T` map of `x' = x` from `n_samples` pairs.
pub fn node_benchmark(p: &TrainNodeParams, seed: u64) -> sciml_core::Result<(NeuralOde, sciml_core::optim::TrainOutcome, Tensor, Tensor)> {
    let system = OdeSystem {
        rhs: MlpConfig::new(with_io(&p.hidden, 2, 1), p.activation),
        t_final: p.t_final,
        steps: p.steps,
        method: p.method,
    };
    let mut model = NeuralOde::new(system, &mut Rng::new(seed))?;
    let (x, y) = exponential_map_data(p.n_samples, p.t_final)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), p.lr, Schedule::Constant);
    let outcome = node_train(&mut model, &x, &y, &mut opt, p.epochs, p.n_batch, seed)?;
    Ok((model, outcome, x, y))
}

pub fn train_node_cmd(p: &TrainNodeParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let (model, outcome, x, y) = node_benchmark(p, ctx.seed)?;
    write_history(ctx, &outcome.history)?;
    let mut m = Metrics::default();
    if outcome.status != RunStatus::Completed {
        return Ok(Outcome::from_status(m, outcome.status, "neural ODE loss"));
    }
    let pred = model.predict(&x)?;
    let mut t = Table::new(&["x", "y_true", "y_pred"], ctx.precision);
    for i in 0..x.shape()[0] {
        t.row([x.data()[i].into(), y.data()[i].into(), pred.data()[i].into()]);
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    let ckpt = serde_json::json!({
        "t_final": model.system.t_final,
        "steps": model.system.steps,
        "method": model.system.method,
        "rhs": checkpoint_value(&model.system.rhs, &model.params)?,
    });
    ctx.out.write_json(CHECKPOINT, &ckpt)?;
    m.set("relative_l2", relative_l2(pred.data(), y.data()));
    let refinement = refinement_report(&model, &x)?;
    m.set("refinement_order", refinement.order);
    Ok(Outcome::done(m))
}

// -------------------------------------------------------------- train-wgan

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainWganParams {
    pub target: Distribution,
    pub latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    /// Size of the training sample drawn from the target.
    pub n_data: usize,
    pub epochs: usize,
    pub settings: GanSettings,
    /// Generated samples written to the results table.
    pub n_samples: usize,
    /// Draws used for the moment and weak-convergence diagnostics.
    pub n_eval: usize,
    pub clip: f64,
}

impl Default for TrainWganParams {
    fn default() -> Self {
        Self {
            target: Distribution::Gaussian {
                mean: vec![1.0, 1.0],
                cov: vec![vec![0.25, 0.0], vec![0.0, 0.25]],
            },
            latent_dim: 2,
            generator_hidden: vec![16, 16],
            critic_hidden: vec![16, 16],
            activation: Activation::Tanh,
            n_data: 1000,
            epochs: 2000,
            settings: GanSettings {
                lambda: 10.0,
                critic_steps: 5,
                lr_critic: 1e-2,
                lr_generator: 1e-4,
                batch_size: Some(128),
                optimizer: OptimizerKind::Adam {
                    beta1: 0.0,
                    beta2: 0.9,
                    eps: 1e-8,
                    bias_correction: true,
                },
                generator_schedule: Schedule::Constant,
            },
            n_samples: 1000,
            n_eval: 100_000,
            clip: 3.0,
        }
    }
}

pub struct WganRun {
    pub model: WganModel,
    pub target: Sampler,
    pub outcome: sciml_core::generative::GanOutcome,
}

/// Initialization from `seed`, training data from `seed + 100`, update draws from `seed`.
pub fn wgan_benchmark(p: &TrainWganParams, seed: u64) -> sciml_core::Result<WganRun> {
    let target = Sampler::new(p.target.clone())?;
    let d = target.dim();
    let gcfg = MlpConfig::new(with_io(&p.generator_hidden, p.latent_dim, d), p.activation);
    let ccfg = MlpConfig::new(with_io(&p.critic_hidden, d, 1), p.activation);
    let mut model = WganModel::new(gcfg, ccfg, p.settings.clone(), &mut Rng::new(seed))?;
    let data = target.sample(&mut Rng::new(seed.wrapping_add(100)), p.n_data)?;
    let outcome = train_wgan(&mut model, &data, p.epochs, seed)?;
    Ok(WganRun { model, target, outcome })
}

pub fn train_wgan_cmd(p: &TrainWganParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let run = wgan_benchmark(p, ctx.seed)?;
    ctx.out.write(HISTORY, &run.outcome.to_csv(ctx.precision))?;
    let mut m = Metrics::default();
    if run.outcome.status != RunStatus::Completed {
        return Ok(Outcome::from_status(m, run.outcome.status, "WGAN objective"));
    }
    let draws = run.model.sample(&mut Rng::new(ctx.seed.wrapping_add(9)), p.n_samples)?;
    ctx.out.write(RESULTS, &samples_csv(&draws, ctx.precision)?)?;
    let ckpt = serde_json::json!({
        "generator": checkpoint_value(&run.model.generator_cfg, &run.model.generator)?,
        "critic": checkpoint_value(&run.model.critic_cfg, &run.model.critic)?,
    });
    ctx.out.write_json(CHECKPOINT, &ckpt)?;
    if p.n_eval > 1 {
        let eval = run.model.sample(&mut Rng::new(ctx.seed.wrapping_add(10)), p.n_eval)?;
        let stats = empirical_stats(&eval)?;
        let mean_error = stats.mean.iter().zip(run.target.mean()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        m.set("mean", &stats.mean);
        m.set("covariance", &stats.covariance);
        m.set("mean_error", mean_error);
        m.set("covariance_error", frobenius_distance(&stats.covariance, &run.target.covariance()));
        let tests = default_test_functions(run.target.dim(), p.clip);
        let model = &run.model;
        let mut gen = |r: &mut Rng, n: usize| model.sample(r, n);
        let rows = weak_convergence_check(&mut gen, &run.target, &tests, p.n_eval, ctx.seed.wrapping_add(11))?;
        m.set("weak_convergence", &rows);
        m.set("weak_convergence_tolerance", 3.0 / (p.n_eval as f64).sqrt());
    }
    Ok(Outcome::done(m))
}

// ---------------------------------------------------------------- conv-demo

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDemoParams {
    pub signal: Vec<f64>,
    pub kernel: Vec<f64>,
    pub pad: usize,
    pub strides: Vec<usize>,
    pub transpose_input: Vec<f64>,
    pub transpose_kernel: Vec<f64>,
    pub transpose_stride: usize,
    pub max_kernel: usize,
    pub max_stride: usize,
    /// Grid spacings for the derivative-stencil error table.
    pub spacings: Vec<f64>,
}

impl Default for ConvDemoParams {
    fn default() -> Self {
        Self {
            signal: vec![1.0, 2.0, 3.0, 4.0],
            kernel: vec![1.0, 0.0, -1.0],
            pad: 1,
            strides: vec![1, 2],
            transpose_input: vec![1.0, 2.0],
            transpose_kernel: vec![1.0, 2.0, 3.0],
            transpose_stride: 2,
            max_kernel: 4,
            max_stride: 3,
            spacings: vec![0.1, 0.05, 0.025],
        }
    }
}

pub fn conv_demo_cmd(p: &ConvDemoParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let mut t = Table::new(&["operation", "stride", "index", "value"], ctx.precision);
    for &s in &p.strides {
        for (i, v) in conv1d(&p.signal, &p.kernel, s, p.pad)?.into_iter().enumerate() {
            t.row(["conv".into(), s.into(), i.into(), v.into()]);
        }
    }
    let crop = Crop::trailing(p.transpose_kernel.len(), p.transpose_stride);
    let tc = transpose_conv1d(&p.transpose_input, &p.transpose_kernel, p.transpose_stride, crop)?;
    for (i, v) in tc.into_iter().enumerate() {
        t.row(["transpose_conv".into(), p.transpose_stride.into(), i.into(), v.into()]);
    }
    ctx.out.write(RESULTS, &t.into_string())?;

    let mut cb = Table::new(&["kernel", "stride", "uniform", "multiple"], ctx.precision);
    let mut consistent = true;
    for k in 1..=p.max_kernel {
        for s in 1..=p.max_stride {
            let uniform = steady_counts_uniform(k, s)?;
            let multiple = k % s == 0;
            consistent &= uniform == multiple;
            cb.row([k.into(), s.into(), usize::from(uniform).into(), usize::from(multiple).into()]);
        }
    }
    ctx.out.write("checkerboard.csv", &cb.into_string())?;

    let mut st = Table::new(&["stencil", "h", "max_error"], ctx.precision);
    type Field = fn(f64, f64) -> f64;
    let sin_cases: [(&str, StencilKind, Field); 2] = [
        ("ddx", StencilKind::Ddx, |x, _| x.cos()),
        ("d2dx2", StencilKind::D2dx2, |x, _| -x.sin()),
    ];
    for (name, kind, exact) in sin_cases {
        for &h in &p.spacings {
            let n = ((1.0 / h).round() as usize).max(3);
            let err = fd_equivalence_check(|x, _| x.sin(), exact, kind, h, n)?;
            st.row([name.into(), h.into(), err.into()]);
        }
    }
    ctx.out.write("stencils.csv", &st.into_string())?;
    let mut m = Metrics::default();
    m.set("checkerboard_rule_holds", consistent);
    Ok(Outcome::done(m))
}

// ----------------------------------------------------------------- sgd-toy

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdToyParams {
    pub lr: f64,
    pub lr_schedule: Schedule,
    pub steps: usize,
    pub start: [f64; 2],
    /// Window at the end of the run over which the closest approach is reported.
    pub tail: usize,
}

impl Default for SgdToyParams {
    fn default() -> Self {
        Self {
            lr: 0.4,
            lr_schedule: Schedule::InverseSqrt,
            steps: 10_000,
            start: [-1.0, 2.0],
            tail: 1000,
        }
    }
}

pub fn sgd_toy_cmd(p: &SgdToyParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let run = sgd_toy(p.lr, p.lr_schedule, p.steps, p.start, ctx.seed)?;
    let star = sgd_toy_minimizer();
    let dist = |th: &[f64; 2]| ((th[0] - star[0]).powi(2) + (th[1] - star[1]).powi(2)).sqrt();
    let mut t = Table::new(&["step", "theta1", "theta2", "distance"], ctx.precision);
    for (k, th) in run.trajectory.iter().enumerate() {
        t.row([k.into(), th[0].into(), th[1].into(), dist(th).into()]);
    }
    ctx.out.write(HISTORY, &t.into_string())?;
    let last = run.trajectory.last().copied().unwrap_or(p.start);
    let tail = &run.trajectory[run.trajectory.len().saturating_sub(p.tail)..];
    let final_distance = dist(&last);
    let tail_min = tail.iter().map(dist).fold(f64::INFINITY, f64::min);
    let mut r = Table::new(&["theta1", "theta2", "final_distance", "tail_min_distance"], ctx.precision);
    r.row([last[0].into(), last[1].into(), final_distance.into(), tail_min.into()]);
    ctx.out.write(RESULTS, &r.into_string())?;
    let mut m = Metrics::default();
    m.set("minimizer", star);
    m.set("final", last);
    m.set("final_distance", final_distance);
    m.set("tail_min_distance", tail_min);
    Ok(Outcome::from_status(m, run.status, "toy loss"))
}

// --------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckParams {
    /// Number of random networks.
    pub count: usize,
    pub first_order_tol: f64,
    pub second_order_tol: f64,
}

impl Default for GradcheckParams {
    fn default() -> Self {
        Self {
            count: 20,
            first_order_tol: 1e-5,
            second_order_tol: 1e-4,
        }
    }
}

pub fn gradcheck_cmd(p: &GradcheckParams, ctx: &mut Ctx) -> CliResult<Outcome> {
    let rows = gradient_fidelity(ctx.seed, p.count)?;
    let mut t = Table::new(&["index", "activation", "depth", "first_order", "second_order"], ctx.precision);
    for r in &rows {
        let act = serde_json::to_value(r.activation).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        t.row([r.index.into(), Cell::Text(act), r.depth.into(), r.first_order.into(), r.second_order.into()]);
    }
    ctx.out.write(RESULTS, &t.into_string())?;
    let first = rows.iter().map(|r| r.first_order).fold(0.0, f64::max);
    let second = rows.iter().map(|r| r.second_order).fold(0.0, f64::max);
    let mut m = Metrics::default();
    m.set("max_first_order_rel_error", first);
    m.set("max_second_order_rel_error", second);
    m.set("within_tolerance", first < p.first_order_tol && second < p.second_order_tol);
    Ok(Outcome::done(m))
}
