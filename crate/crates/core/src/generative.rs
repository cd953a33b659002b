//! Samplers, empirical statistics, WGAN-GP, conditional WGAN and weak-convergence diagnostics.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{forward_on_tape, mlp_forward, MlpConfig, MlpParams, MlpVars};
use crate::optim::{Optimizer, OptimizerKind, RunStatus, Schedule};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Uniform { a: f64, b: f64 },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Exponential { lambda: f64 },
}

/// Validated distribution with a cached Cholesky factor for the Gaussian case.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    dist: Distribution,
    chol: Vec<Vec<f64>>,
}

fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        if a[i].len() != n {
            return Err(invalid("covariance must be square"));
        }
        for j in 0..=i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                return Err(invalid("covariance must be symmetric"));
            }
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return Err(invalid("covariance must be positive definite"));
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

impl Sampler {
    pub fn new(dist: Distribution) -> Result<Self> {
        let chol = match &dist {
            Distribution::Uniform { a, b } if !(b > a) || !a.is_finite() || !b.is_finite() => {
                return Err(invalid(format!("uniform needs a < b, got ({a}, {b})")))
            }
            Distribution::Exponential { lambda } if !(*lambda > 0.0) || !lambda.is_finite() => {
                return Err(invalid(format!("exponential rate must be positive, got {lambda}")))
            }
            Distribution::Gaussian { mean, cov } => {
                if mean.is_empty() || cov.len() != mean.len() {
                    return Err(invalid("gaussian mean and covariance dimensions differ"));
                }
                cholesky(cov)?
            }
            _ => Vec::new(),
        };
        Ok(Self { dist, chol })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        Self::new(Distribution::Uniform { a, b })
    }

    pub fn exponential(lambda: f64) -> Result<Self> {
        Self::new(Distribution::Exponential { lambda })
    }

    pub fn normal(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid(format!("standard deviation must be positive, got {sigma}")));
        }
        Self::gaussian(vec![mu], vec![vec![sigma * sigma]])
    }

    pub fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Distribution::Gaussian { mean, cov })
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        let cov = (0..dim).map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        Self::gaussian(vec![0.0; dim], cov)
    }

    pub fn distribution(&self) -> &Distribution {
        &self.dist
    }

    pub fn dim(&self) -> usize {
        match &self.dist {
            Distribution::Gaussian { mean, .. } => mean.len(),
            _ => 1,
        }
    }

    /// `n` draws as rows of an `(n, dim)` tensor.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(invalid("need at least one draw"));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            match &self.dist {
                Distribution::Uniform { a, b } => out.push(a + (b - a) * rng.uniform()),
                Distribution::Exponential { lambda } => out.push(-(-rng.uniform()).ln_1p() / lambda),
                Distribution::Gaussian { mean, .. } => {
                    let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    for i in 0..d {
                        out.push(mean[i] + (0..=i).map(|k| self.chol[i][k] * z[k]).sum::<f64>());
                    }
                }
            }
        }
        Tensor::new(vec![n, d], out)
    }

    pub fn mean(&self) -> Vec<f64> {
        match &self.dist {
            Distribution::Uniform { a, b } => vec![(a + b) / 2.0],
            Distribution::Exponential { lambda } => vec![1.0 / lambda],
            Distribution::Gaussian { mean, .. } => mean.clone(),
        }
    }

    pub fn covariance(&self) -> Vec<Vec<f64>> {
        match &self.dist {
            Distribution::Uniform { a, b } => vec![vec![(b - a).powi(2) / 12.0]],
            Distribution::Exponential { lambda } => vec![vec![1.0 / (lambda * lambda)]],
            Distribution::Gaussian { cov, .. } => cov.clone(),
        }
    }
}

/// Sample mean, unbiased variance and unbiased covariance of the rows of a draw matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalStats {
    pub n: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

pub fn empirical_stats(draws: &Tensor) -> Result<EmpiricalStats> {
    let (n, d) = draws.dims2()?;
    if n < 2 {
        return Err(invalid("empirical statistics need at least two draws"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(draws.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        let r = draws.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= (n - 1) as f64);
    Ok(EmpiricalStats {
        n,
        variance: (0..d).map(|a| cov[a][a]).collect(),
        mean,
        covariance: cov,
    })
}

/// Kolmogorov–Smirnov statistic of one-dimensional draws against a CDF.
pub fn ks_statistic(draws: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = draws.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn frobenius_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Hyperparameters shared by the unconditional and conditional models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSettings {
    /// Gradient-penalty weight.
    pub lambda: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub lr_critic: f64,
    pub lr_generator: f64,
    /// Samples per update; `None` uses the whole training set.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Update rule for both networks; plain steepest ascent/descent by default.
    #[serde(default = "default_kind")]
    pub optimizer: OptimizerKind,
    /// Learning-rate schedule of the generator updates.
    #[serde(default = "default_schedule")]
    pub generator_schedule: Schedule,
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Gd
}

impl Default for GanSettings {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            critic_steps: 5,
            lr_critic: 1e-3,
            lr_generator: 1e-3,
            batch_size: None,
            optimizer: OptimizerKind::Gd,
            generator_schedule: Schedule::Constant,
        }
    }
}

impl GanSettings {
    pub fn validate(&self) -> Result<()> {
        if self.critic_steps == 0 {
            return Err(invalid("critic_steps must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !(self.lr_critic > 0.0) || !(self.lr_generator > 0.0) {
            return Err(invalid("penalty weight must be non-negative and learning rates positive"));
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Generator `R^{N_Z} -> R^{N_X}` and critic `R^{N_X} -> R`.
#[derive(Debug, Clone, PartialEq)]
pub struct WganModel {
    pub generator_cfg: MlpConfig,
    pub generator: MlpParams,
    pub critic_cfg: MlpConfig,
    pub critic: MlpParams,
    pub settings: GanSettings,
}

impl WganModel {
    pub fn new(generator_cfg: MlpConfig, critic_cfg: MlpConfig, settings: GanSettings, rng: &mut Rng) -> Result<Self> {
        settings.validate()?;
        if critic_cfg.output_dim() != 1 || critic_cfg.input_dim() != generator_cfg.output_dim() {
            return Err(invalid(format!(
                "critic {:?} must map the generator output width {} to a scalar",
                critic_cfg.widths,
                generator_cfg.output_dim()
            )));
        }
        let generator = MlpParams::init(&generator_cfg, rng)?;
        let critic = MlpParams::init(&critic_cfg, rng)?;
        Ok(Self {
            generator_cfg,
            generator,
            critic_cfg,
            critic,
            settings,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.generator_cfg.input_dim()
    }

    pub fn sample_dim(&self) -> usize {
        self.generator_cfg.output_dim()
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        mlp_forward(&self.generator_cfg, &self.generator, z)
    }

    pub fn critic_value(&self, x: &Tensor) -> Result<Tensor> {
        mlp_forward(&self.critic_cfg, &self.critic, x)
    }

    /// Draws `n` samples with standard normal latents.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Tensor> {
        let z = rng.normal_tensor(&[n, self.latent_dim()]);
        self.generate(&z)
    }
}

fn non_empty(t: &Tensor, what: &str) -> Result<usize> {
    let (n, _) = t.dims2()?;
    if n == 0 {
        return Err(invalid(format!("{what} batch is empty")));
    }
    Ok(n)
}

/// `mean d(x_real) - mean d(g(z))`.
pub fn wgan_objective(model: &WganModel, real: &Tensor, latent: &Tensor) -> Result<f64> {
    let n = non_empty(real, "real")?;
    if non_empty(latent, "latent")? != n {
        return Err(invalid("real and latent batches must have equal size"));
    }
    let fake = model.generate(latent)?;
    Ok(mean_of(&model.critic_value(real)?) - mean_of(&model.critic_value(&fake)?))
}

fn mean_of(t: &Tensor) -> f64 {
    t.sum() / t.len() as f64
}

/// Convex combinations `alpha_i a_i + (1 - alpha_i) b_i` with one uniform draw per row.
pub fn interpolate(a: &Tensor, b: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("cannot interpolate {:?} and {:?}", a.shape(), b.shape())));
    }
    let (n, d) = a.dims2()?;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let alpha = rng.uniform();
        out.extend(a.row(i).iter().zip(b.row(i)).map(|(x, y)| alpha * x + (1.0 - alpha) * y));
    }
    Tensor::new(vec![n, d], out)
}

/// Records `mean_i (|grad_{x_hat} d(x_hat_i)| - 1)^2`; `critic_in` builds the critic input from
/// the interpolate node so conditional critics can prepend fixed columns.
fn record_penalty(
    tape: &mut Tape,
    critic_cfg: &MlpConfig,
    critic: &MlpVars,
    x_hat: Tensor,
    critic_in: &dyn Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let xh = tape.input(x_hat);
    let inp = critic_in(tape, xh)?;
    let d = forward_on_tape(tape, critic_cfg, critic, inp)?.out;
    let g = tape.grad(d, &[xh])?[0];
    let g2 = tape.square(g)?;
    let s = tape.sum_cols(g2)?;
    let norm = tape.sqrt(s)?;
    let dev = tape.add_scalar(norm, -1.0)?;
    let sq = tape.square(dev)?;
    tape.mean(sq)
}

/// Penalty on per-sample interpolates between real and fake batches.
pub fn gradient_penalty(model: &WganModel, real: &Tensor, fake: &Tensor, rng: &mut Rng) -> Result<f64> {
    let x_hat = interpolate(real, fake, rng)?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, &model.critic);
    let p = record_penalty(&mut tape, &model.critic_cfg, &vars, x_hat, &|_, v| Ok(v))?;
    Ok(tape.value(p).item())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanRecord {
    pub epoch: usize,
    pub objective: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanOutcome {
    pub history: Vec<GanRecord>,
    pub status: RunStatus,
}

impl GanOutcome {
    /// Columns `epoch,objective,penalty`.
    pub fn to_csv(&self, precision: usize) -> String {
        let mut s = String::from("epoch,objective,penalty\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{:.p$e},{:.p$e}", r.epoch, r.objective, r.penalty, p = precision);
        }
        s
    }
}

fn grads_for(tape: &Tape, loss: Var, vars: &MlpVars, like: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut t = tape.clone();
    t.set_tip(loss);
    let g = t.backward_scalar()?;
    Ok(vars.flat().iter().zip(like).map(|(&v, p)| g.get_or_zeros(v, p)).collect())
}

fn pick_rows(data: &Tensor, batch: Option<usize>, rng: &mut Rng) -> Result<Tensor> {
    let (n, d) = data.dims2()?;
    match batch {
        Some(b) if b < n => {
            let mut out = Vec::with_capacity(b * d);
            for _ in 0..b {
                out.extend_from_slice(data.row(rng.below(n)));
            }
            Tensor::new(vec![b, d], out)
        }
        _ => Ok(data.clone()),
    }
}

/// The two halves of a conditional or unconditional adversarial pair, as seen by the trainer.
trait Adversarial {
    fn settings(&self) -> &GanSettings;
    fn critic_cfg(&self) -> &MlpConfig;
    fn generator_cfg(&self) -> &MlpConfig;
    fn params_mut(&mut self) -> (&mut MlpParams, &mut MlpParams);
    fn params(&self) -> (&MlpParams, &MlpParams);
    /// Generator input for a batch: latent draws, followed by conditioning columns if any.
    fn generator_input(&self, tape: &mut Tape, batch: &Tensor, z: &Tensor) -> Result<Var>;
    /// Critic input from the batch and a sample-space node.
    fn critic_input(&self, tape: &mut Tape, batch: &Tensor, y: Var) -> Result<Var>;
    /// The part of a batch the generator imitates.
    fn target_part(&self, batch: &Tensor) -> Result<Tensor>;
    fn latent_dim(&self) -> usize;
}

fn record_objective<M: Adversarial>(
    m: &M,
    tape: &mut Tape,
    gen: &MlpVars,
    critic: &MlpVars,
    batch: &Tensor,
    z: &Tensor,
) -> Result<(Var, Var)> {
    let gin = m.generator_input(tape, batch, z)?;
    let fake = forward_on_tape(tape, m.generator_cfg(), gen, gin)?.out;
    let real = tape.constant(m.target_part(batch)?);
    let rin = m.critic_input(tape, batch, real)?;
    let fin = m.critic_input(tape, batch, fake)?;
    let dr = forward_on_tape(tape, m.critic_cfg(), critic, rin)?.out;
    let df = forward_on_tape(tape, m.critic_cfg(), critic, fin)?.out;
    let mr = tape.mean(dr)?;
    let mf = tape.mean(df)?;
    Ok((tape.sub(mr, mf)?, fake))
}

/// One ascent step of the critic on `objective - lambda * penalty`; returns both terms.
fn critic_update<M: Adversarial>(m: &mut M, data: &Tensor, opt: &mut Optimizer, rng: &mut Rng) -> Result<(f64, f64)> {
    let s = m.settings();
    let batch = pick_rows(data, s.batch_size, rng)?;
    let lambda = s.lambda;
    let n = batch.shape()[0];
    let z = rng.normal_tensor(&[n, m.latent_dim()]);
    let (gp, cp) = m.params();
    let mut tape = Tape::new();
    let gen = MlpVars::constants(&mut tape, gp);
    let critic = MlpVars::params(&mut tape, cp);
    let (obj, fake) = record_objective(m, &mut tape, &gen, &critic, &batch, &z)?;
    let x_hat = interpolate(&m.target_part(&batch)?, tape.value(fake), rng)?;
    let ci = |t: &mut Tape, y: Var| m.critic_input(t, &batch, y);
    let pen = record_penalty(&mut tape, m.critic_cfg(), &critic, x_hat, &ci)?;
    let wpen = tape.scale(pen, lambda)?;
    let neg = tape.sub(wpen, obj)?;
    let mut ps = cp.to_tensors();
    let grads = grads_for(&tape, neg, &critic, &ps)?;
    opt.step(&mut ps, &grads)?;
    *m.params_mut().1 = MlpParams::from_tensors(&ps)?;
    Ok((tape.value(obj).item(), tape.value(pen).item()))
}

fn generator_update<M: Adversarial>(m: &mut M, data: &Tensor, opt: &mut Optimizer, rng: &mut Rng) -> Result<()> {
    let batch = pick_rows(data, m.settings().batch_size, rng)?;
    let n = batch.shape()[0];
    let z = rng.normal_tensor(&[n, m.latent_dim()]);
    let (gp, cp) = m.params();
    let mut tape = Tape::new();
    let gen = MlpVars::params(&mut tape, gp);
    let critic = MlpVars::constants(&mut tape, cp);
    let (obj, _) = record_objective(m, &mut tape, &gen, &critic, &batch, &z)?;
    let mut ps = gp.to_tensors();
    let grads = grads_for(&tape, obj, &gen, &ps)?;
    opt.step(&mut ps, &grads)?;
    *m.params_mut().0 = MlpParams::from_tensors(&ps)?;
    Ok(())
}

fn is_finite(p: &MlpParams) -> bool {
    p.to_tensors().iter().all(Tensor::is_finite)
}

fn train_adversarial<M: Adversarial>(m: &mut M, data: &Tensor, epochs: usize, seed: u64, update_generator: bool) -> Result<GanOutcome> {
    m.settings().validate()?;
    non_empty(data, "training")?;
    let s = m.settings().clone();
    let mut rng = Rng::new(seed);
    let mut opt_d = Optimizer::new(s.optimizer, s.lr_critic, Schedule::Constant);
    let mut opt_g = Optimizer::new(s.optimizer, s.lr_generator, s.generator_schedule);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let (mut objective, mut penalty) = (f64::NAN, f64::NAN);
        for _ in 0..s.critic_steps {
            (objective, penalty) = critic_update(m, data, &mut opt_d, &mut rng)?;
        }
        if update_generator {
            generator_update(m, data, &mut opt_g, &mut rng)?;
        }
        history.push(GanRecord { epoch, objective, penalty });
        let (gp, cp) = m.params();
        if !objective.is_finite() || !penalty.is_finite() || !is_finite(gp) || !is_finite(cp) {
            return Ok(GanOutcome {
                history,
                status: RunStatus::Diverged { epoch },
            });
        }
    }
    Ok(GanOutcome {
        history,
        status: RunStatus::Completed,
    })
}

impl Adversarial for WganModel {
    fn settings(&self) -> &GanSettings {
        &self.settings
    }
    fn critic_cfg(&self) -> &MlpConfig {
        &self.critic_cfg
    }
    fn generator_cfg(&self) -> &MlpConfig {
        &self.generator_cfg
    }
    fn params_mut(&mut self) -> (&mut MlpParams, &mut MlpParams) {
        (&mut self.generator, &mut self.critic)
    }
    fn params(&self) -> (&MlpParams, &MlpParams) {
        (&self.generator, &self.critic)
    }
    fn generator_input(&self, tape: &mut Tape, _: &Tensor, z: &Tensor) -> Result<Var> {
        Ok(tape.constant(z.clone()))
    }
    fn critic_input(&self, _: &mut Tape, _: &Tensor, y: Var) -> Result<Var> {
        Ok(y)
    }
    fn target_part(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(batch.clone())
    }
    fn latent_dim(&self) -> usize {
        WganModel::latent_dim(self)
    }
}

/// Alternating updates: `critic_steps` ascent steps on `objective - lambda * penalty`, then one
/// descent step of the generator on the objective. Each update draws a fresh batch and latents.
pub fn train_wgan(model: &mut WganModel, data: &Tensor, epochs: usize, seed: u64) -> Result<GanOutcome> {
    let (_, d) = data.dims2()?;
    if d != model.sample_dim() {
        return Err(invalid(format!("data width {d} differs from generator output {}", model.sample_dim())));
    }
    train_adversarial(model, data, epochs, seed, true)
}

/// Critic ascent with the generator frozen; one record per critic step.
pub fn train_critic(model: &mut WganModel, data: &Tensor, steps: usize, seed: u64) -> Result<GanOutcome> {
    let critic_steps = model.settings.critic_steps;
    model.settings.critic_steps = 1;
    let out = train_adversarial(model, data, steps, seed, false);
    model.settings.critic_steps = critic_steps;
    out
}

/// Generator `g(z, x) -> y` and critic `d(x, y)`; inputs are concatenated `[z, x]` and `[x, y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CwganModel {
    pub latent_dim: usize,
    pub x_dim: usize,
    pub generator_cfg: MlpConfig,
    pub generator: MlpParams,
    pub critic_cfg: MlpConfig,
    pub critic: MlpParams,
    pub settings: GanSettings,
}

impl CwganModel {
    pub fn new(latent_dim: usize, generator_cfg: MlpConfig, critic_cfg: MlpConfig, settings: GanSettings, rng: &mut Rng) -> Result<Self> {
        settings.validate()?;
        let x_dim = generator_cfg
            .input_dim()
            .checked_sub(latent_dim)
            .filter(|&x| x > 0 && latent_dim > 0)
            .ok_or_else(|| invalid("generator input must hold the latent and at least one conditioning column"))?;
        let y_dim = generator_cfg.output_dim();
        if critic_cfg.input_dim() != x_dim + y_dim || critic_cfg.output_dim() != 1 {
            return Err(invalid(format!("critic {:?} must map {} columns to a scalar", critic_cfg.widths, x_dim + y_dim)));
        }
        let generator = MlpParams::init(&generator_cfg, rng)?;
        let critic = MlpParams::init(&critic_cfg, rng)?;
        Ok(Self {
            latent_dim,
            x_dim,
            generator_cfg,
            generator,
            critic_cfg,
            critic,
            settings,
        })
    }

    /// `g(z_i, x_i)` row by row.
    pub fn generate(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = MlpVars::constants(&mut tape, &self.generator);
        let zv = tape.constant(z.clone());
        let xv = tape.constant(x.clone());
        let inp = tape.concat_cols(&[zv, xv])?;
        let out = forward_on_tape(&mut tape, &self.generator_cfg, &vars, inp)?.out;
        Ok(tape.value(out).clone())
    }

    pub fn critic_value(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = MlpVars::constants(&mut tape, &self.critic);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let inp = tape.concat_cols(&[xv, yv])?;
        let out = forward_on_tape(&mut tape, &self.critic_cfg, &vars, inp)?.out;
        Ok(tape.value(out).clone())
    }

    fn split(&self, pairs: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, w) = pairs.dims2()?;
        if w != self.critic_cfg.input_dim() {
            return Err(invalid(format!("paired batch has width {w}, expected {}", self.critic_cfg.input_dim())));
        }
        let mut xs = Vec::with_capacity(n * self.x_dim);
        let mut ys = Vec::with_capacity(n * (w - self.x_dim));
        for i in 0..n {
            let r = pairs.row(i);
            xs.extend_from_slice(&r[..self.x_dim]);
            ys.extend_from_slice(&r[self.x_dim..]);
        }
        Ok((Tensor::new(vec![n, self.x_dim], xs)?, Tensor::new(vec![n, w - self.x_dim], ys)?))
    }
}

impl Adversarial for CwganModel {
    fn settings(&self) -> &GanSettings {
        &self.settings
    }
    fn critic_cfg(&self) -> &MlpConfig {
        &self.critic_cfg
    }
    fn generator_cfg(&self) -> &MlpConfig {
        &self.generator_cfg
    }
    fn params_mut(&mut self) -> (&mut MlpParams, &mut MlpParams) {
        (&mut self.generator, &mut self.critic)
    }
    fn params(&self) -> (&MlpParams, &MlpParams) {
        (&self.generator, &self.critic)
    }
    fn generator_input(&self, tape: &mut Tape, batch: &Tensor, z: &Tensor) -> Result<Var> {
        let (x, _) = self.split(batch)?;
        let zv = tape.constant(z.clone());
        let xv = tape.constant(x);
        tape.concat_cols(&[zv, xv])
    }
    fn critic_input(&self, tape: &mut Tape, batch: &Tensor, y: Var) -> Result<Var> {
        let (x, _) = self.split(batch)?;
        let xv = tape.constant(x);
        tape.concat_cols(&[xv, y])
    }
    fn target_part(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.split(batch)?.1)
    }
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

/// `mean d(x, y) - mean d(x, g(z, x))` over a batch of rows `[x, y]`.
pub fn cwgan_objective(model: &CwganModel, pairs: &Tensor, latent: &Tensor) -> Result<f64> {
    let n = non_empty(pairs, "paired")?;
    if non_empty(latent, "latent")? != n {
        return Err(invalid("paired and latent batches must have equal size"));
    }
    let (x, y) = model.split(pairs)?;
    let fake = model.generate(latent, &x)?;
    Ok(mean_of(&model.critic_value(&x, &y)?) - mean_of(&model.critic_value(&x, &fake)?))
}

/// Conditional penalty: interpolates only `y`, holding `x` at the real values.
pub fn cwgan_gradient_penalty(model: &CwganModel, pairs: &Tensor, fake_y: &Tensor, rng: &mut Rng) -> Result<f64> {
    let (_, y) = model.split(pairs)?;
    let y_hat = interpolate(&y, fake_y, rng)?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, &model.critic);
    let ci = |t: &mut Tape, v: Var| model.critic_input(t, pairs, v);
    let p = record_penalty(&mut tape, &model.critic_cfg, &vars, y_hat, &ci)?;
    Ok(tape.value(p).item())
}

/// Trains on rows `[x, y]` with the same alternating scheme as [`train_wgan`].
pub fn train_cwgan(model: &mut CwganModel, pairs: &Tensor, epochs: usize, seed: u64) -> Result<GanOutcome> {
    model.split(pairs)?;
    train_adversarial(model, pairs, epochs, seed, true)
}

/// Bounded continuous test function on sample space.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish()
    }
}

impl TestFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

/// Clipped coordinates, pairwise products of clipped coordinates and cosines of coordinate
/// sums.
pub fn default_test_functions(dim: usize, clip: f64) -> Vec<TestFunction> {
    let mut fs = Vec::new();
    for k in 0..dim {
        fs.push(TestFunction::new(format!("clip(x{})", k + 1), move |x: &[f64]| x[k].clamp(-clip, clip)));
    }
    for a in 0..dim {
        for b in a + 1..dim {
            fs.push(TestFunction::new(format!("clip(x{})*clip(x{})", a + 1, b + 1), move |x: &[f64]| {
                x[a].clamp(-clip, clip) * x[b].clamp(-clip, clip)
            }));
        }
    }
    for k in 0..dim {
        fs.push(TestFunction::new(format!("cos(x{})", k + 1), move |x: &[f64]| x[k].cos()));
    }
    if dim > 1 {
        fs.push(TestFunction::new("cos(sum x)", |x: &[f64]| x.iter().sum::<f64>().cos()));
    }
    fs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakConvergenceRow {
    pub name: String,
    pub generated: f64,
    pub target: f64,
    pub gap: f64,
    /// Standard error of the difference of the two Monte Carlo means.
    pub std_error: f64,
}

fn mc_mean(draws: &Tensor, f: &TestFunction) -> (f64, f64) {
    let n = draws.shape()[0];
    let vals: Vec<f64> = (0..n).map(|i| (f.f)(draws.row(i))).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    (mean, var)
}

/// Monte Carlo estimates of `|E l(g(Z)) - E l(X)|` with `n` draws from each side.
pub fn weak_convergence_check(
    generator: &mut dyn FnMut(&mut Rng, usize) -> Result<Tensor>,
    target: &Sampler,
    tests: &[TestFunction],
    n: usize,
    seed: u64,
) -> Result<Vec<WeakConvergenceRow>> {
    if tests.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = Rng::new(seed);
    let mut grng = rng.fork();
    let gen = generator(&mut grng, n)?;
    let tgt = target.sample(&mut rng, n)?;
    if gen.shape() != tgt.shape() {
        return Err(Error::Shape {
            op: "weak_convergence_check",
            left: gen.shape().to_vec(),
            right: tgt.shape().to_vec(),
        });
    }
    Ok(tests
        .iter()
        .map(|t| {
            let (mg, vg) = mc_mean(&gen, t);
            let (mt, vt) = mc_mean(&tgt, t);
            WeakConvergenceRow {
                name: t.name.clone(),
                generated: mg,
                target: mt,
                gap: (mg - mt).abs(),
                std_error: ((vg + vt) / n as f64).sqrt(),
            }
        })
        .collect())
}

/// Rows `[x, y]` as CSV with columns `x1,..` for sample dumps.
pub fn samples_csv(draws: &Tensor, precision: usize) -> Result<String> {
    let (n, d) = draws.dims2()?;
    let mut s = (1..=d).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for i in 0..n {
        let row: Vec<String> = draws.row(i).iter().map(|v| format!("{v:.precision$e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn sampler_moments() {
        let n = 100_000;
        let mut rng = Rng::new(11);
        let u = Sampler::uniform(-1.0, 3.0).unwrap();
        let s = empirical_stats(&u.sample(&mut rng, n).unwrap()).unwrap();
        let var = 16.0 / 12.0;
        // Var of the sample variance for a uniform is (mu4 - sigma^4) / n with mu4 = (b-a)^4 / 80.
        let sd = ((256.0 / 80.0 - var * var) / n as f64).sqrt();
        assert!((s.variance[0] - var).abs() < 3.0 * sd);
        let g = Sampler::normal(0.5, 2.0).unwrap();
        let s = empirical_stats(&g.sample(&mut rng, n).unwrap()).unwrap();
        assert!((s.variance[0] - 4.0).abs() < 3.0 * (2.0 * 16.0 / n as f64).sqrt());
        let e = Sampler::exponential(2.0).unwrap();
        let draws = e.sample(&mut rng, n).unwrap();
        assert!((empirical_stats(&draws).unwrap().mean[0] - 0.5).abs() < 0.01);
        assert!(ks_statistic(draws.data(), |x| 1.0 - (-2.0 * x).exp()) < 0.01);
    }

    #[test]
    fn multivariate_gaussian_covariance() {
        let cov = vec![vec![1.0, 0.6], vec![0.6, 0.5]];
        let g = Sampler::gaussian(vec![1.0, -1.0], cov.clone()).unwrap();
        let s = empirical_stats(&g.sample(&mut Rng::new(2), 100_000).unwrap()).unwrap();
        assert!(frobenius_distance(&s.covariance, &cov) < 0.02);
        assert!((s.mean[0] - 1.0).abs() < 0.02 && (s.mean[1] + 1.0).abs() < 0.02);
    }

    #[test]
    fn sampler_rejects_bad_parameters() {
        assert!(Sampler::uniform(1.0, 1.0).is_err());
        assert!(Sampler::exponential(0.0).is_err());
        assert!(Sampler::normal(0.0, -1.0).is_err());
        assert!(Sampler::gaussian(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(Sampler::gaussian(vec![0.0, 0.0], vec![vec![1.0, 0.1], vec![0.0, 1.0]]).is_err());
        assert!(Sampler::uniform(0.0, 1.0).unwrap().sample(&mut Rng::new(0), 0).is_err());
    }

    fn linear_critic(w: [f64; 2], scale: f64) -> WganModel {
        let gcfg = MlpConfig::new(vec![2, 2], Activation::Tanh);
        let ccfg = MlpConfig::new(vec![2, 1], Activation::Tanh);
        let mut m = WganModel::new(gcfg, ccfg, GanSettings::default(), &mut Rng::new(0)).unwrap();
        m.critic = MlpParams::from_tensors(&[
            Tensor::new(vec![1, 2], vec![scale * w[0], scale * w[1]]).unwrap(),
            Tensor::zeros(&[1, 1]),
        ])
        .unwrap();
        m
    }

    #[test]
    fn penalty_examples() {
        let mut rng = Rng::new(4);
        let a = rng.normal_tensor(&[16, 2]);
        let b = rng.normal_tensor(&[16, 2]);
        let w = [0.6, 0.8];
        let p0 = gradient_penalty(&linear_critic(w, 1.0), &a, &b, &mut rng).unwrap();
        assert!(p0.abs() < 1e-24);
        let p1 = gradient_penalty(&linear_critic(w, 2.0), &a, &b, &mut rng).unwrap();
        assert!((p1 - 1.0).abs() < 1e-12);
        for s in [0.1, 0.5, 3.0] {
            let p = gradient_penalty(&linear_critic(w, s), &a, &b, &mut rng).unwrap();
            assert!((p - (s - 1.0).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_examples() {
        let mut m = linear_critic([0.6, 0.8], 0.0);
        m.critic.layers[0].b = Tensor::full(&[1, 1], 3.0);
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(&[8, 2]);
        let z = rng.normal_tensor(&[8, 2]);
        assert_eq!(wgan_objective(&m, &x, &z).unwrap(), 0.0);
        assert!(wgan_objective(&m, &Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])).is_err());
        assert!(wgan_objective(&m, &x, &rng.normal_tensor(&[4, 2])).is_err());
        // Critic sign(x1) after a generator that maps every latent to x1 = -1.
        let gcfg = MlpConfig::new(vec![2, 2], Activation::Tanh);
        let ccfg = MlpConfig::new(vec![2, 1], Activation::Tanh);
        let mut hand = WganModel::new(gcfg, ccfg, GanSettings::default(), &mut Rng::new(0)).unwrap();
        hand.generator = MlpParams::from_tensors(&[Tensor::zeros(&[2, 2]), Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap()]).unwrap();
        hand.critic = MlpParams::from_tensors(&[Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), Tensor::zeros(&[1, 1])]).unwrap();
        let real = Tensor::new(vec![2, 2], vec![1.0, 5.0, 1.0, -2.0]).unwrap();
        assert_eq!(wgan_objective(&hand, &real, &rng.normal_tensor(&[2, 2])).unwrap(), 2.0);
    }

    fn toy_model(seed: u64, settings: GanSettings) -> WganModel {
        WganModel::new(
            MlpConfig::new(vec![2, 8, 2], Activation::Tanh),
            MlpConfig::new(vec![2, 8, 1], Activation::Tanh),
            settings,
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_and_single_critic_step() {
        let data = Sampler::standard_normal(2).unwrap().sample(&mut Rng::new(0), 64).unwrap();
        let mut m = toy_model(1, GanSettings::default());
        let before = m.clone();
        let out = train_wgan(&mut m, &data, 0, 0).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(m, before);
        let mut k1 = toy_model(1, GanSettings { critic_steps: 1, ..GanSettings::default() });
        let out = train_wgan(&mut k1, &data, 3, 0).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.status, RunStatus::Completed);
        assert!(GanSettings { critic_steps: 0, ..GanSettings::default() }.validate().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = Sampler::standard_normal(2).unwrap().sample(&mut Rng::new(0), 32).unwrap();
        let run = || {
            let mut m = toy_model(3, GanSettings { batch_size: Some(16), ..GanSettings::default() });
            let out = train_wgan(&mut m, &data, 5, 9).unwrap();
            (m, out)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn critic_ascent_increases_penalized_objective() {
        let target = Sampler::gaussian(vec![1.0, 1.0], vec![vec![0.25, 0.0], vec![0.0, 0.25]]).unwrap();
        let data = target.sample(&mut Rng::new(5), 256).unwrap();
        let mut m = toy_model(2, GanSettings { lr_critic: 1e-2, ..GanSettings::default() });
        let frozen = m.generator.clone();
        let out = train_critic(&mut m, &data, 50, 1).unwrap();
        assert_eq!(m.generator, frozen);
        let pc: Vec<f64> = out.history.iter().map(|r| r.objective - 10.0 * r.penalty).collect();
        let first: f64 = pc[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = pc[40..].iter().sum::<f64>() / 10.0;
        assert!(last > first, "{first} -> {last}");
    }

    #[test]
    fn cwgan_examples() {
        let gcfg = MlpConfig::new(vec![2, 1], Activation::Linear);
        let ccfg = MlpConfig::new(vec![2, 16, 1], Activation::Tanh);
        let mut m = CwganModel::new(1, gcfg, ccfg, GanSettings::default(), &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(2);
        let xs = rng.uniform_tensor(&[64, 1], -1.0, 1.0);
        let noise = rng.normal_tensor(&[64, 1]);
        let pairs = Tensor::new(vec![64, 2], xs.data().iter().zip(noise.data()).flat_map(|(&x, &e)| [x, 2.0 * x + 0.3 * e]).collect()).unwrap();
        let z = rng.normal_tensor(&[64, 1]);
        let mut c = m.clone();
        c.critic.layers.iter_mut().for_each(|l| l.w = Tensor::zeros(l.w.shape()));
        assert_eq!(cwgan_objective(&c, &pairs, &z).unwrap(), 0.0);
        assert!(cwgan_gradient_penalty(&m, &pairs, &z, &mut rng).unwrap() >= 0.0);
        let (x, _) = m.split(&pairs).unwrap();
        let mean = x.scale(2.0);
        // Conditional mean error of g(0, x) against E[y | x] = 2x.
        let mismatch = |m: &CwganModel| {
            let g = m.generate(&Tensor::zeros(&[64, 1]), &x).unwrap();
            g.sub(&mean).unwrap().norm2() / mean.norm2()
        };
        let before = mismatch(&m);
        // With lambda = 10 the critic cannot flip its slope in y once the generator overshoots.
        m.settings = GanSettings {
            lambda: 1.0,
            optimizer: OptimizerKind::Adam { beta1: 0.0, beta2: 0.9, eps: 1e-8, bias_correction: true },
            lr_critic: 1e-2,
            lr_generator: 1e-3,
            ..GanSettings::default()
        };
        let out = train_cwgan(&mut m, &pairs, 2000, 3).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        let after = mismatch(&m);
        assert!(after < 0.15 && after < before / 4.0, "{before} -> {after}");
    }

    #[test]
    fn cwgan_penalty_uses_y_only() {
        let gcfg = MlpConfig::new(vec![2, 1], Activation::Tanh);
        let ccfg = MlpConfig::new(vec![2, 1], Activation::Tanh);
        let mut m = CwganModel::new(1, gcfg, ccfg, GanSettings::default(), &mut Rng::new(0)).unwrap();
        // d(x, y) = 5 x + 2 y: only the y slope enters the penalty.
        m.critic = MlpParams::from_tensors(&[Tensor::new(vec![1, 2], vec![5.0, 2.0]).unwrap(), Tensor::zeros(&[1, 1])]).unwrap();
        let mut rng = Rng::new(0);
        let pairs = rng.normal_tensor(&[10, 2]);
        let fake = rng.normal_tensor(&[10, 1]);
        assert!((cwgan_gradient_penalty(&m, &pairs, &fake, &mut rng).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weak_convergence_examples() {
        let target = Sampler::gaussian(vec![1.0, 1.0], vec![vec![0.25, 0.0], vec![0.0, 0.25]]).unwrap();
        let n = 100_000;
        let tests = default_test_functions(2, 3.0);
        let mut same = |r: &mut Rng, n: usize| target.sample(r, n);
        let rows = weak_convergence_check(&mut same, &target, &tests, n, 7).unwrap();
        assert!(rows.iter().all(|r| r.gap < 3.0 / (n as f64).sqrt()), "{rows:?}");
        let shifted = Sampler::gaussian(vec![-1.0, 1.0], vec![vec![0.25, 0.0], vec![0.0, 0.25]]).unwrap();
        let tanh = [TestFunction::new("tanh(x1)", |x: &[f64]| x[0].tanh())];
        let m = toy_model(0, GanSettings::default());
        let mut gen = |r: &mut Rng, n: usize| m.sample(r, n);
        let rows = weak_convergence_check(&mut gen, &shifted, &tanh, 10_000, 1).unwrap();
        assert!(rows[0].gap > 3.0 * rows[0].std_error);
        assert!(weak_convergence_check(&mut gen, &shifted, &[], 10, 1).unwrap().is_empty());
    }
}
