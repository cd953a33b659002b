//! Gradient descent, momentum and Adam; mini-batch training loops, data splits and grid search.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Momentum { beta1: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64, bias_correction: bool },
}

impl OptimizerKind {
    /// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8` and no bias correction.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bias_correction: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `eta / sqrt(k + 1)` at step `k`.
    InverseSqrt,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    step: usize,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, schedule: Schedule) -> Self {
        Self {
            kind,
            lr,
            schedule,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn gd(lr: f64) -> Self {
        Self::new(OptimizerKind::Gd, lr, Schedule::Constant)
    }

    /// Number of updates taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::InverseSqrt => self.lr / ((self.step + 1) as f64).sqrt(),
        }
    }

    /// First-moment accumulators (zero before the first step).
    pub fn first_moment(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second
    }

    /// Per-component Adam learning rates `eta / (sqrt(G) + eps)` after the last step.
    pub fn effective_lr(&self) -> Vec<Tensor> {
        match self.kind {
            OptimizerKind::Adam { eps, .. } => self.second.iter().map(|g| g.map(|v| self.lr / (v.sqrt() + eps))).collect(),
            _ => Vec::new(),
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        let eta = self.current_lr();
        let k = self.step as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (pd, gd) = (p.data_mut(), g.data());
            match self.kind {
                OptimizerKind::Gd => {
                    for (x, &d) in pd.iter_mut().zip(gd) {
                        *x -= eta * d;
                    }
                }
                OptimizerKind::Momentum { beta1 } => {
                    let m = self.first[i].data_mut();
                    for ((x, &d), mv) in pd.iter_mut().zip(gd).zip(m.iter_mut()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * d;
                        *x -= eta * *mv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps, bias_correction } => {
                    let (c1, c2) = if bias_correction {
                        (1.0 - beta1.powi(k + 1), 1.0 - beta2.powi(k + 1))
                    } else {
                        (1.0, 1.0)
                    };
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((x, &d), mv), vv) in pd.iter_mut().zip(gd).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * d;
                        *vv = beta2 * *vv + (1.0 - beta2) * d * d;
                        *x -= eta / ((*vv / c2).sqrt() + eps) * (*mv / c1);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn push(&mut self, epoch: usize, train_loss: f64, val_loss: Option<f64>) {
        self.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    /// CSV with columns `epoch,train_loss,val_loss`; missing validation values are empty.
    pub fn to_csv(&self, precision: usize) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.records {
            let _ = write!(s, "{},{:.*e},", r.epoch, precision, r.train_loss);
            if let Some(v) = r.val_loss {
                let _ = write!(s, "{v:.precision$e}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub status: RunStatus,
}

/// Splits `0..n` into `n_batch` consecutive chunks of size `ceil(n / n_batch)`; the last may be short.
pub fn batches(order: &[usize], n_batch: usize) -> Vec<&[usize]> {
    let size = order.len().div_ceil(n_batch.max(1)).max(1);
    order.chunks(size).collect()
}

/// Epoch loop: shuffle, split into `n_batch` mini-batches, and step on each batch gradient.
///
/// `grad_fn(params, batch)` returns the batch-mean loss and its gradient. With one batch the
/// samples keep their natural order, so the run is exactly full-batch descent. The train loss
/// recorded per epoch is the sample-weighted mean of batch losses seen during the epoch;
/// `val_fn` is evaluated on the parameters at the end of each epoch.
pub fn minibatch_train(
    params: &mut [Tensor],
    n_samples: usize,
    opt: &mut Optimizer,
    epochs: usize,
    n_batch: usize,
    seed: u64,
    mut grad_fn: impl FnMut(&[Tensor], &[usize]) -> Result<(f64, Vec<Tensor>)>,
    mut val_fn: Option<&mut dyn FnMut(&[Tensor]) -> Result<f64>>,
) -> Result<TrainOutcome> {
    if n_samples == 0 {
        return Err(invalid("empty dataset"));
    }
    if n_batch == 0 || n_batch > n_samples {
        return Err(invalid(format!("{n_batch} batches for {n_samples} samples")));
    }
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut history = History::default();
    for epoch in 0..epochs {
        if n_batch > 1 {
            rng.shuffle(&mut order);
        }
        let mut total = 0.0;
        for batch in batches(&order, n_batch) {
            let (loss, grads) = grad_fn(params, batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                history.push(epoch, f64::NAN, None);
                return Ok(TrainOutcome {
                    history,
                    status: RunStatus::Diverged { epoch },
                });
            }
            total += loss * batch.len() as f64;
            opt.step(params, &grads)?;
        }
        let val = match val_fn.as_mut() {
            Some(f) => Some(f(params)?),
            None => None,
        };
        history.push(epoch, total / n_samples as f64, val);
    }
    Ok(TrainOutcome {
        history,
        status: RunStatus::Completed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled split; validation and test sizes are floored and the remainder goes to training.
pub fn split_dataset(n: usize, proportions: [f64; 3], seed: u64) -> Result<DataSplit> {
    if proportions.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("proportions {proportions:?} must be non-negative and sum to 1")));
    }
    if n < 3 {
        return Err(invalid(format!("cannot split {n} samples into three parts")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let n_val = (n as f64 * proportions[1]).floor() as usize;
    let n_test = (n as f64 * proportions[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(DataSplit {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct GridSearchResult<P, M> {
    pub best_index: usize,
    pub best: P,
    pub model: M,
    /// Validation loss for every grid point, in grid order.
    pub table: Vec<(P, f64)>,
    /// Test loss of the winning point only.
    pub test_loss: f64,
}

/// Trains every grid point and keeps the lowest validation loss; ties go to the earlier point.
pub fn grid_search<P: Clone, M>(
    grid: &[P],
    mut train: impl FnMut(&P) -> Result<M>,
    val_metric: impl Fn(&M) -> Result<f64>,
    test_metric: impl Fn(&M) -> Result<f64>,
) -> Result<GridSearchResult<P, M>> {
    let mut best: Option<(usize, M, f64)> = None;
    let mut table = Vec::with_capacity(grid.len());
    for (i, point) in grid.iter().enumerate() {
        let model = train(point)?;
        let v = val_metric(&model)?;
        table.push((point.clone(), v));
        if best.as_ref().is_none_or(|(_, _, bv)| v < *bv) {
            best = Some((i, model, v));
        }
    }
    let (best_index, model, _) = best.ok_or_else(|| invalid("empty grid"))?;
    let test_loss = test_metric(&model)?;
    Ok(GridSearchResult {
        best_index,
        best: grid[best_index].clone(),
        model,
        table,
        test_loss,
    })
}

/// The four quadratic losses of the SGD toy problem, `sum c_j (theta_j - s_j)^2`.
pub const SGD_TOY_TERMS: [([f64; 2], [f64; 2]); 4] = [
    ([1.0, 1.0], [1.0, 1.0]),
    ([1.0, 0.5], [-1.0, 1.0]),
    ([0.7, 0.5], [-1.0, -1.0]),
    ([0.7, 0.5], [1.0, -1.0]),
];

/// Minimizer of the summed toy losses, coordinate by coordinate.
pub fn sgd_toy_minimizer() -> [f64; 2] {
    let coord = |j: usize| {
        let num: f64 = SGD_TOY_TERMS.iter().map(|(c, s)| c[j] * s[j]).sum();
        let den: f64 = SGD_TOY_TERMS.iter().map(|(c, _)| c[j]).sum();
        num / den
    };
    [coord(0), coord(1)]
}

pub fn sgd_toy_loss(i: usize, theta: [f64; 2]) -> f64 {
    let (c, s) = SGD_TOY_TERMS[i];
    c[0] * (theta[0] - s[0]).powi(2) + c[1] * (theta[1] - s[1]).powi(2)
}

pub fn sgd_toy_grad(i: usize, theta: [f64; 2]) -> [f64; 2] {
    let (c, s) = SGD_TOY_TERMS[i];
    [2.0 * c[0] * (theta[0] - s[0]), 2.0 * c[1] * (theta[1] - s[1])]
}

/// Result of the SGD toy run: iterates after each step, starting with the initial point.
/// A diverged run keeps the iterates up to the first non-finite loss.
#[derive(Debug, Clone)]
pub struct SgdToyRun {
    pub trajectory: Vec<[f64; 2]>,
    pub status: RunStatus,
}

/// Single-sample SGD on the four toy losses, one loss per batch, for `steps` updates.
pub fn sgd_toy(lr: f64, schedule: Schedule, steps: usize, start: [f64; 2], seed: u64) -> Result<SgdToyRun> {
    let mut params = vec![Tensor::vector(start.to_vec())];
    let mut opt = Optimizer::new(OptimizerKind::Gd, lr, schedule);
    let mut trajectory = vec![start];
    let epochs = steps.div_ceil(4);
    let mut taken = 0;
    let outcome = minibatch_train(
        &mut params,
        4,
        &mut opt,
        epochs,
        4,
        seed,
        |p, batch| {
            let th = [p[0].data()[0], p[0].data()[1]];
            if taken > 0 {
                trajectory.push(th);
            }
            taken += 1;
            let mut g = [0.0; 2];
            let mut l = 0.0;
            for &i in batch {
                let gi = sgd_toy_grad(i, th);
                g[0] += gi[0] / batch.len() as f64;
                g[1] += gi[1] / batch.len() as f64;
                l += sgd_toy_loss(i, th) / batch.len() as f64;
            }
            Ok((l, vec![Tensor::vector(g.to_vec())]))
        },
        None,
    )?;
    if outcome.status == RunStatus::Completed {
        trajectory.push([params[0].data()[0], params[0].data()[1]]);
        trajectory.truncate(steps + 1);
    }
    Ok(SgdToyRun {
        trajectory,
        status: outcome.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_gd(a: f64, eta: f64, theta0: f64, steps: usize) -> Vec<f64> {
        let mut p = vec![Tensor::vector(vec![theta0])];
        let mut opt = Optimizer::gd(eta);
        let mut out = vec![theta0];
        for _ in 0..steps {
            let g = Tensor::vector(vec![a * p[0].data()[0]]);
            opt.step(&mut p, &[g]).unwrap();
            out.push(p[0].data()[0]);
        }
        out
    }

    #[test]
    fn gd_examples() {
        assert_eq!(quad_gd(1.0, 1.0, 5.0, 1)[1], 0.0);
        let t = quad_gd(1.0, 2.5, 1.0, 20);
        assert!(t.windows(2).all(|w| w[1].abs() > w[0].abs()));
        let mut p = vec![Tensor::vector(vec![3.0])];
        Optimizer::gd(0.1).step(&mut p, &[Tensor::vector(vec![0.0])]).unwrap();
        assert_eq!(p[0].data(), &[3.0]);
    }

    #[test]
    fn momentum_examples() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut opt = Optimizer::new(OptimizerKind::Momentum { beta1: 0.9 }, 1.0, Schedule::Constant);
        opt.step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
        assert!((opt.first_moment()[0].data()[0] - 0.1).abs() < 1e-15);
        for k in 1..200 {
            opt.step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
            let expected = 1.0 - 0.9f64.powi(k + 1);
            assert!((opt.first_moment()[0].data()[0] - expected).abs() < 1e-12);
        }
        let mut a = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut b = a.clone();
        let mut m0 = Optimizer::new(OptimizerKind::Momentum { beta1: 0.0 }, 0.3, Schedule::Constant);
        let mut gd = Optimizer::gd(0.3);
        for _ in 0..5 {
            let g = Tensor::vector(vec![a[0].data()[0], -a[0].data()[1]]);
            m0.step(&mut a, std::slice::from_ref(&g)).unwrap();
            gd.step(&mut b, &[g]).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.001, Schedule::Constant);
        opt.step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
        assert!((opt.first_moment()[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((opt.second_moment()[0].data()[0] - 0.001).abs() < 1e-15);
        assert!((p[0].data()[0] + 3.162e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_slows_large_gradient_components() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.01, Schedule::Constant);
        opt.step(&mut p, &[Tensor::vector(vec![10.0, 0.1])]).unwrap();
        let lr = &opt.effective_lr()[0];
        assert!(lr.data()[0] < lr.data()[1]);
        let mut z = vec![Tensor::vector(vec![1.5])];
        let mut o = Optimizer::new(OptimizerKind::adam(), 0.01, Schedule::Constant);
        for _ in 0..10 {
            o.step(&mut z, &[Tensor::vector(vec![0.0])]).unwrap();
        }
        assert_eq!(z[0].data(), &[1.5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(vec![0.0, 1.0])];
        assert!(Optimizer::gd(0.1).step(&mut p, &[Tensor::vector(vec![1.0])]).is_err());
    }

    #[test]
    fn inverse_sqrt_schedule() {
        let mut opt = Optimizer::new(OptimizerKind::Gd, 0.4, Schedule::InverseSqrt);
        assert_eq!(opt.current_lr(), 0.4);
        let mut p = vec![Tensor::vector(vec![0.0])];
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::vector(vec![0.0])]).unwrap();
        }
        assert_eq!(opt.current_lr(), 0.2);
    }

    #[test]
    fn split_examples() {
        let s = split_dataset(10, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let all = split_dataset(10, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(all.train.len(), 10);
        assert_eq!(split_dataset(10, [0.6, 0.2, 0.2], 1).unwrap(), s);
        assert!(split_dataset(2, [0.6, 0.2, 0.2], 1).is_err());
        let mut joined: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        joined.sort_unstable();
        assert_eq!(joined, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn grid_search_picks_first_of_ties() {
        let grid = vec![("relu", 10), ("relu", 20), ("tanh", 10), ("tanh", 20)];
        let r = grid_search(&grid, |p| Ok(p.1 as f64 + if p.0 == "tanh" { 0.0 } else { 5.0 }), |m| Ok(*m), |m| Ok(m * 2.0)).unwrap();
        assert_eq!(r.table.len(), 4);
        assert_eq!(r.best, ("tanh", 10));
        assert_eq!(r.test_loss, 20.0);
        let ties = vec![1, 1];
        let r = grid_search(&ties, |_| Ok(0.0), |m| Ok(*m), |m| Ok(*m)).unwrap();
        assert_eq!(r.best_index, 0);
        let empty: Vec<u8> = vec![];
        assert!(grid_search(&empty, |_| Ok(0.0), |m| Ok(*m), |m| Ok(*m)).is_err());
    }

    #[test]
    fn single_batch_matches_plain_gd_bitwise() {
        let xs = [0.5, -1.0, 2.0, 0.25, 3.0];
        let grad = |p: &[Tensor], idx: &[usize]| {
            let w = p[0].data()[0];
            let n = idx.len() as f64;
            let l = idx.iter().map(|&i| (w * xs[i] - 1.0).powi(2)).sum::<f64>() / n;
            let g = idx.iter().map(|&i| 2.0 * (w * xs[i] - 1.0) * xs[i]).sum::<f64>() / n;
            Ok((l, vec![Tensor::vector(vec![g])]))
        };
        let mut p1 = vec![Tensor::vector(vec![0.0])];
        let mut o1 = Optimizer::gd(0.05);
        let out = minibatch_train(&mut p1, 5, &mut o1, 30, 1, 3, grad, None).unwrap();
        let mut p2 = vec![Tensor::vector(vec![0.0])];
        let mut o2 = Optimizer::gd(0.05);
        let all: Vec<usize> = (0..5).collect();
        for _ in 0..30 {
            let (_, g) = grad(&p2, &all).unwrap();
            o2.step(&mut p2, &g).unwrap();
        }
        assert_eq!(p1[0].data()[0].to_bits(), p2[0].data()[0].to_bits());
        let losses = out.history.train_losses();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.status, RunStatus::Completed);
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut o = Optimizer::gd(3.0);
        let out = minibatch_train(
            &mut p,
            1,
            &mut o,
            2000,
            1,
            0,
            |p, _| {
                let w = p[0].data()[0];
                Ok((w * w, vec![Tensor::vector(vec![2.0 * w])]))
            },
            None,
        )
        .unwrap();
        assert!(matches!(out.status, RunStatus::Diverged { .. }));
        assert!(minibatch_train(&mut p, 0, &mut o, 1, 1, 0, |_, _| Ok((0.0, vec![])), None).is_err());
    }

    #[test]
    fn history_csv_columns() {
        let mut h = History::default();
        h.push(0, 1.5, Some(2.0));
        h.push(1, 1.0, None);
        let csv = h.to_csv(3);
        assert_eq!(csv, "epoch,train_loss,val_loss\n0,1.500e0,2.000e0\n1,1.000e0,\n");
    }
}
