//! MLP and ResNet models, activations, losses, regularization and the
//! vanishing-gradient diagnostic.
//!
//! Weights are stored as `(out, in)` matrices, so layer `l` computes
//! `xi = W x + b` for a column `x`; batches are rows, giving `X W^T + b`.

use crate::autodiff::{Tape, Unary, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
/// Probabilities below this are clamped before taking logarithms in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Logistic,
    Tanh,
    Sine,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => Unary::Relu.apply(x),
            Activation::LeakyRelu(a) => Unary::LeakyRelu(a).apply(x),
            Activation::Logistic => Unary::Logistic.apply(x),
            Activation::Tanh => x.tanh(),
            Activation::Sine => x.sin(),
        }
    }

    /// Pointwise derivative; the ReLU family uses 0 (or the slope) at the kink.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => Unary::Step(0.0).apply(x),
            Activation::LeakyRelu(a) => Unary::Step(a).apply(x),
            Activation::Logistic => {
                let s = Unary::Logistic.apply(x);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Sine => x.cos(),
        }
    }

    pub fn apply_tensor(self, t: &Tensor) -> Tensor {
        t.map(|x| self.apply(x))
    }

    pub fn deriv_tensor(self, t: &Tensor) -> Tensor {
        t.map(|x| self.deriv(x))
    }

    pub fn on_tape(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(v),
            Activation::Relu => tape.unary(v, Unary::Relu),
            Activation::LeakyRelu(a) => tape.unary(v, Unary::LeakyRelu(a)),
            Activation::Logistic => tape.unary(v, Unary::Logistic),
            Activation::Tanh => tape.tanh(v),
            Activation::Sine => tape.sin(v),
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
            "logistic" => Activation::Logistic,
            "tanh" => Activation::Tanh,
            "sine" => Activation::Sine,
            other => return Err(invalid(format!("unknown activation {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFn {
    #[default]
    None,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub output_fn: OutputFn,
    #[serde(default)]
    pub residual: bool,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            widths,
            activation,
            output_fn: OutputFn::None,
            residual: false,
        }
    }

    pub fn residual(mut self) -> Self {
        self.residual = true;
        self
    }

    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.widths.len().saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(invalid(format!("widths {:?} need at least two positive entries", self.widths)));
        }
        let hidden = &self.widths[1..self.widths.len() - 1];
        if self.residual && hidden.windows(2).any(|w| w[0] != w[1]) {
            return Err(invalid(format!("residual network needs equal hidden widths, got {hidden:?}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }
}

/// Total weights and biases: `sum (H_{l-1} + 1) H_l`.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(out, in)`.
    pub w: Tensor,
    /// `(1, out)`.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights on `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(cfg: &MlpConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .widths
            .windows(2)
            .map(|w| {
                let lim = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    w: rng.uniform_tensor(&[w[1], w[0]], -lim, lim),
                    b: Tensor::zeros(&[1, w[1]]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(cfg: &MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .widths
            .windows(2)
            .map(|w| Layer {
                w: Tensor::zeros(&[w[1], w[0]]),
                b: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Parameters as `[W1, b1, W2, b2, ...]`.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    pub fn from_tensors(ts: &[Tensor]) -> Result<Self> {
        if !ts.len().is_multiple_of(2) {
            return Err(invalid("parameter list must alternate weights and biases"));
        }
        Ok(Self {
            layers: ts
                .chunks(2)
                .map(|c| Layer {
                    w: c[0].clone(),
                    b: c[1].clone(),
                })
                .collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All weights and biases flattened layer by layer.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.data().iter().chain(l.b.data()).copied())
            .collect()
    }

    pub fn check(&self, cfg: &MlpConfig) -> Result<()> {
        cfg.validate()?;
        let ok = self.layers.len() == cfg.widths.len() - 1
            && self
                .layers
                .iter()
                .zip(cfg.widths.windows(2))
                .all(|(l, w)| l.w.shape() == [w[1], w[0]] && l.b.shape() == [1, w[1]]);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("parameters do not match widths {:?}", cfg.widths)))
        }
    }
}

/// Tape handles of an MLP's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn params(tape: &mut Tape, p: &MlpParams) -> Self {
        Self {
            layers: p.layers.iter().map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone()))).collect(),
        }
    }

    pub fn constants(tape: &mut Tape, p: &MlpParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Recorded forward pass: pre-activations `xi^(1..L+1)`, hidden states `x^(1..L)` and output.
#[derive(Debug, Clone)]
pub struct Forward {
    pub xi: Vec<Var>,
    pub hidden: Vec<Var>,
    pub out: Var,
}

/// Records the network on `x` of shape `(N, H0)`.
pub fn forward_on_tape(tape: &mut Tape, cfg: &MlpConfig, vars: &MlpVars, x: Var) -> Result<Forward> {
    cfg.validate()?;
    let n_layers = cfg.widths.len() - 1;
    if vars.layers.len() != n_layers {
        return Err(invalid(format!("{} layers of parameters for widths {:?}", vars.layers.len(), cfg.widths)));
    }
    let (_, d) = tape.value(x).dims2()?;
    if d != cfg.input_dim() {
        return Err(invalid(format!("input width {d}, network expects {}", cfg.input_dim())));
    }
    let mut h = x;
    let mut xi = Vec::with_capacity(n_layers);
    let mut hidden = Vec::with_capacity(n_layers - 1);
    for (l, &(w, b)) in vars.layers.iter().enumerate() {
        let wt = tape.transpose(w)?;
        let lin = tape.matmul(h, wt)?;
        let z = tape.add_row(lin, b)?;
        xi.push(z);
        if l + 1 == n_layers {
            h = match cfg.output_fn {
                OutputFn::None => z,
                OutputFn::Softmax => softmax_on_tape(tape, z)?,
            };
        } else {
            let a = cfg.activation.on_tape(tape, z)?;
            h = if cfg.residual && l >= 1 { tape.add(a, h)? } else { a };
            hidden.push(h);
        }
    }
    Ok(Forward { xi, hidden, out: h })
}

fn batch_of(x: &Tensor, width: usize) -> Result<(Tensor, bool)> {
    match x.rank() {
        1 if x.len() == width => Ok((x.reshape(&[1, width])?, true)),
        2 if x.shape()[1] == width => Ok((x.clone(), false)),
        _ => Err(invalid(format!("input of shape {:?} for input width {width}", x.shape()))),
    }
}

/// Network output for one sample (rank 1) or a batch of rows (rank 2).
pub fn mlp_forward(cfg: &MlpConfig, params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    params.check(cfg)?;
    let (batch, single) = batch_of(x, cfg.input_dim())?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, params);
    let xv = tape.constant(batch);
    let f = forward_on_tape(&mut tape, cfg, &vars, xv)?;
    let out = tape.value(f.out).clone();
    if single {
        out.reshape(&[cfg.output_dim()])
    } else {
        Ok(out)
    }
}

/// ResNet forward pass; the configuration must enable skip connections.
pub fn resnet_forward(cfg: &MlpConfig, params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    if !cfg.residual {
        return Err(invalid("resnet_forward needs a residual configuration"));
    }
    mlp_forward(cfg, params, x)
}

/// Hidden states `x^(1..L)` of a network for a batch.
pub fn hidden_states(cfg: &MlpConfig, params: &MlpParams, x: &Tensor) -> Result<Vec<Tensor>> {
    params.check(cfg)?;
    let (batch, _) = batch_of(x, cfg.input_dim())?;
    let mut tape = Tape::new();
    let vars = MlpVars::constants(&mut tape, params);
    let xv = tape.constant(batch);
    let f = forward_on_tape(&mut tape, cfg, &vars, xv)?;
    Ok(f.hidden.iter().map(|&h| tape.value(h).clone()).collect())
}

/// Softmax of a vector with max subtraction.
pub fn softmax(xi: &[f64]) -> Vec<f64> {
    let m = xi.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = xi.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise softmax of a `(B, K)` tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let k = t.shape()[t.rank() - 1];
    let data = t.data().chunks(k).flat_map(softmax).collect();
    Tensor::raw(t.shape().to_vec(), data)
}

fn row_max_const(tape: &mut Tape, z: Var) -> Result<(Var, usize)> {
    let (n, k) = tape.value(z).dims2()?;
    let m: Vec<f64> = (0..n)
        .map(|i| tape.value(z).row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect();
    let mc = tape.constant(Tensor::column(m));
    Ok((tape.broadcast_cols(mc, k)?, k))
}

/// Row-wise softmax recorded on the tape; the row maximum is treated as a constant shift.
pub fn softmax_on_tape(tape: &mut Tape, z: Var) -> Result<Var> {
    let (m, k) = row_max_const(tape, z)?;
    let shifted = tape.sub(z, m)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_cols(e)?;
    let r = tape.unary(s, Unary::Recip)?;
    let rb = tape.broadcast_cols(r, k)?;
    tape.mul(e, rb)
}

/// Row-wise log-softmax recorded on the tape.
pub fn log_softmax_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let (m, k) = row_max_const(tape, z)?;
    let shifted = tape.sub(z, m)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_cols(e)?;
    let ls = tape.log(s)?;
    let lsb = tape.broadcast_cols(ls, k)?;
    tape.sub(shifted, lsb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    CrossEntropy,
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => t.reshape(&[1, t.len()]),
        2 => Ok(t.clone()),
        _ => Err(invalid(format!("loss expects rank 1 or 2, got {:?}", t.shape()))),
    }
}

/// Sample-averaged loss between predictions and targets (rows are samples).
pub fn loss(kind: LossKind, predictions: &Tensor, targets: &Tensor) -> Result<f64> {
    let f = as_batch(predictions)?;
    let y = as_batch(targets)?;
    if f.shape() != y.shape() {
        return Err(Error::Shape {
            op: "loss",
            left: f.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let (n, k) = f.dims2()?;
    let mut total = 0.0;
    for i in 0..n {
        let (fr, yr) = (f.row(i), y.row(i));
        total += match kind {
            LossKind::Mse => fr.iter().zip(yr).map(|(a, b)| (b - a).powi(2)).sum::<f64>(),
            LossKind::Mae => fr.iter().zip(yr).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt(),
            LossKind::CrossEntropy => {
                let s: f64 = fr.iter().sum();
                if (s - 1.0).abs() > 1e-6 || fr.iter().any(|&p| p < 0.0) {
                    return Err(invalid(format!("row {i} is not a probability vector (sum {s})")));
                }
                if yr.iter().filter(|&&v| v == 1.0).count() != 1 || yr.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(invalid(format!("target row {i} is not one-hot")));
                }
                (0..k).map(|c| -yr[c] * fr[c].max(PROB_FLOOR).ln()).sum::<f64>()
            }
        };
    }
    Ok(total / n as f64)
}

/// Sample-averaged squared error recorded on the tape.
pub fn mse_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let n = tape.value(pred).shape()[0] as f64;
    let d = tape.sub(target, pred)?;
    let d2 = tape.square(d)?;
    let s = tape.sum(d2)?;
    tape.scale(s, 1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    L1,
    L2,
}

/// `alpha * |theta|_1` or `alpha * |theta|_2` over all weights and biases.
pub fn reg_penalty(kind: RegKind, theta: &[f64], alpha: f64) -> Result<f64> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(invalid("regularization weight must be non-negative"));
    }
    if alpha == 0.0 {
        return Ok(0.0);
    }
    Ok(alpha
        * match kind {
            RegKind::L1 => theta.iter().map(|t| t.abs()).sum::<f64>(),
            RegKind::L2 => theta.iter().map(|t| t * t).sum::<f64>().sqrt(),
        })
}

/// Regularization penalty recorded over the given parameter nodes.
pub fn reg_on_tape(tape: &mut Tape, kind: RegKind, params: &[Var], alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(invalid("regularization weight must be non-negative"));
    }
    let mut acc = None;
    for &p in params {
        let t = match kind {
            RegKind::L1 => tape.abs(p)?,
            RegKind::L2 => tape.square(p)?,
        };
        let s = tape.sum(t)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let total = acc.ok_or_else(|| invalid("no parameters to regularize"))?;
    let norm = match kind {
        RegKind::L1 => total,
        RegKind::L2 => tape.sqrt(total)?,
    };
    tape.scale(norm, alpha)
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    let (_, c) = w.dims2()?;
    let mut rng = Rng::new(0x5eed);
    let mut v = Tensor::column((0..c).map(|_| rng.uniform_in(0.5, 1.5)).collect());
    let wt = w.transpose()?;
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let wv = w.matmul(&v)?;
        let next_sigma = wv.norm2();
        if next_sigma == 0.0 {
            return Ok(0.0);
        }
        let u = wt.matmul(&wv)?;
        let un = u.norm2();
        if un == 0.0 {
            return Ok(next_sigma);
        }
        v = u.scale(1.0 / un);
        let done = (next_sigma - sigma).abs() <= tol * next_sigma;
        sigma = next_sigma;
        if done {
            break;
        }
    }
    Ok(w.matmul(&v)?.norm2())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanishingReport {
    /// `|dPi/dxi^(l)|` for `l = 1..L+1`.
    pub xi_grad_norms: Vec<f64>,
    /// `|dPi/dx^(l)|` for hidden layers `l = 1..L`.
    pub hidden_grad_norms: Vec<f64>,
    /// Largest singular value of `W^(l)` for `l = 1..L+1`.
    pub tau: Vec<f64>,
    /// `prod_{m=l+1}^{L+1} tau(W^(m))` for `l = 1..L+1`.
    pub bound_factors: Vec<f64>,
}

impl VanishingReport {
    /// `|dPi/dxi^(1)| / |dPi/dxi^(L+1)|`.
    pub fn ratio(&self) -> f64 {
        self.xi_grad_norms[0] / self.xi_grad_norms[self.xi_grad_norms.len() - 1]
    }
}

/// Per-layer gradient norms of the squared error on one sample, with singular-value bounds.
pub fn vanishing_gradient_report(cfg: &MlpConfig, params: &MlpParams, x: &Tensor, y: &Tensor) -> Result<VanishingReport> {
    params.check(cfg)?;
    let (xb, _) = batch_of(x, cfg.input_dim())?;
    let (yb, _) = batch_of(y, cfg.output_dim())?;
    let mut tape = Tape::new();
    let vars = MlpVars::params(&mut tape, params);
    let xv = tape.input(xb);
    let f = forward_on_tape(&mut tape, cfg, &vars, xv)?;
    let yv = tape.constant(yb);
    let loss = mse_on_tape(&mut tape, f.out, yv)?;
    tape.set_tip(loss);
    let g = tape.backward_scalar()?;
    let norm = |v: Var| g.get_or_zeros(v, tape.value(v)).norm2();
    let tau = params
        .layers
        .iter()
        .map(|l| spectral_norm(&l.w, 1e-8, 500))
        .collect::<Result<Vec<_>>>()?;
    let mut bound_factors = vec![1.0; tau.len()];
    for l in (0..tau.len() - 1).rev() {
        bound_factors[l] = bound_factors[l + 1] * tau[l + 1];
    }
    Ok(VanishingReport {
        xi_grad_norms: f.xi.iter().map(|&v| norm(v)).collect(),
        hidden_grad_norms: f.hidden.iter().map(|&v| norm(v)).collect(),
        tau,
        bound_factors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    widths: Vec<usize>,
    activation: Activation,
    #[serde(default)]
    output_fn: OutputFn,
    #[serde(default)]
    residual: bool,
    layers: Vec<LayerDoc>,
}

/// Checkpoint JSON. Floats are written in shortest round-trip decimal form, so loading a
/// saved document reproduces every bit.
pub fn checkpoint_to_json(cfg: &MlpConfig, params: &MlpParams) -> Result<String> {
    params.check(cfg)?;
    let doc = CheckpointDoc {
        widths: cfg.widths.clone(),
        activation: cfg.activation,
        output_fn: cfg.output_fn,
        residual: cfg.residual,
        layers: params
            .layers
            .iter()
            .map(|l| {
                let (r, _) = l.w.dims2().expect("checked");
                LayerDoc {
                    w: (0..r).map(|i| l.w.row(i).to_vec()).collect(),
                    b: l.b.data().to_vec(),
                }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn checkpoint_from_json(s: &str) -> Result<(MlpConfig, MlpParams)> {
    let doc: CheckpointDoc = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
    let cfg = MlpConfig {
        widths: doc.widths,
        activation: doc.activation,
        output_fn: doc.output_fn,
        residual: doc.residual,
    };
    let layers = doc
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let w = Tensor::matrix(&l.w).map_err(|e| Error::Serialization(format!("/layers/{i}/W: {e}")))?;
            let n = l.b.len();
            let b = Tensor::new(vec![1, n], l.b).map_err(|e| Error::Serialization(format!("/layers/{i}/b: {e}")))?;
            Ok(Layer { w, b })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = MlpParams { layers };
    params.check(&cfg).map_err(|e| Error::Serialization(format!("/layers: {e}")))?;
    Ok((cfg, params))
}

/// One network of the gradient-fidelity sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    pub index: usize,
    pub activation: Activation,
    pub depth: usize,
    /// Reverse-mode parameter gradients against central differences.
    pub first_order: f64,
    /// Second input derivative from the twice-extended graph against central differences of
    /// the once-extended graph, combined with a parameter grad-check through the extended graph.
    pub second_order: f64,
}

fn record_scalar_net(cfg: &MlpConfig, params: &MlpParams, xs: &Tensor) -> Result<Tape> {
    Tape::record(|t| {
        let vars = MlpVars::params(t, params);
        let x = t.input(xs.clone());
        Ok(forward_on_tape(t, cfg, &vars, x)?.out)
    })
}

/// `count` random smooth networks (tanh and sine alternating, depths cycling 1..=5) with a
/// scalar input, each checked at first and second order.
pub fn gradient_fidelity(seed: u64, count: usize) -> Result<Vec<FidelityRow>> {
    let mut rng = Rng::new(seed);
    let mut rows = Vec::with_capacity(count);
    for index in 0..count {
        let activation = if index % 2 == 0 { Activation::Tanh } else { Activation::Sine };
        let depth = 1 + index % 5;
        let mut widths = vec![1];
        widths.extend(std::iter::repeat_n(6, depth));
        widths.push(1);
        let cfg = MlpConfig::new(widths, activation);
        let params = MlpParams::init(&cfg, &mut rng)?;
        let xs = rng.uniform_tensor(&[5, 1], -1.0, 1.0);

        let mut loss = record_scalar_net(&cfg, &params, &xs)?;
        let out = loss.tip().expect("recorded");
        let sq = loss.square(out)?;
        let m = loss.mean(sq)?;
        loss.set_tip(m);
        let first_order = loss.grad_check(1e-6)?.max_rel_error;

        let net = record_scalar_net(&cfg, &params, &xs)?;
        let d1 = net.extend()?;
        let d2 = d1.extend()?;
        let x = d1.inputs()[0];
        let h = 1e-5;
        let du_at = |shift: f64| -> Result<Tensor> {
            let t = d1.replay(&[(x, xs.map(|v| v + shift))])?;
            Ok(t.value(t.tip().expect("extended")).clone())
        };
        let fd = du_at(h)?.sub(&du_at(-h)?)?.scale(0.5 / h);
        let analytic = d2.value(d2.tip().expect("extended"));
        let mut second_order = analytic
            .data()
            .iter()
            .zip(fd.data())
            .map(|(a, b)| crate::autodiff::rel_error(*a, *b))
            .fold(0.0, f64::max);
        let mut pl = d2.clone();
        let tip = pl.tip().expect("extended");
        let sq = pl.square(tip)?;
        let m = pl.mean(sq)?;
        pl.set_tip(m);
        second_order = second_order.max(pl.grad_check(1e-6)?.max_rel_error);
        rows.push(FidelityRow {
            index,
            activation,
            depth,
            first_order,
            second_order,
        });
    }
    Ok(rows)
}
