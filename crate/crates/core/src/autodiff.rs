//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of primitive nodes, each caching its value.
//! Reverse rules are written once over [`Builder`]; the numeric builder turns them
//! into adjoint tensors ([`Tape::backward`]) while the recording builder appends
//! them to the tape as new nodes ([`Tape::grad`], [`Tape::extend`]), which is what
//! makes derivatives of derivatives available.

use crate::convnet::{self, ConvGeom, PoolGeom, PoolKind};
use crate::error::{invalid, Error, Result};
use crate::operatornet::{self, SpectralGeom};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
    Const,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Tanh,
    Sin,
    Cos,
    Logistic,
    Exp,
    Log,
    Square,
    Sqrt,
    Recip,
    Abs,
    Relu,
    LeakyRelu(f64),
    /// 1 for x > 0, otherwise the given slope; the derivative of the ReLU family.
    Step(f64),
    Sign,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Logistic => 1.0 / (1.0 + (-x).exp()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Abs => x.abs(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Step(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Abs => "abs",
            Unary::Step(_) => "step",
            Unary::Sign => "sign",
            _ => "unary",
        }
    }
}

/// Primitive operation with parent handles of type `H`.
#[derive(Debug, Clone)]
pub enum Op<H> {
    Leaf(LeafKind),
    Add(H, H),
    Sub(H, H),
    Mul(H, H),
    Scale(H, f64),
    AddScalar(H, f64),
    MatMul(H, H),
    Transpose(H),
    /// (N, C) plus a (1, C) row added to every row.
    AddRow(H, H),
    SumRows(H),
    BroadcastRows(H, usize),
    SumCols(H),
    BroadcastCols(H, usize),
    Sum(H),
    BroadcastScalar(H, Vec<usize>),
    Reshape(H, Vec<usize>),
    SelectCols(H, usize, usize),
    PadCols(H, usize, usize),
    GatherRows(H, Arc<[usize]>),
    ScatterRows(H, Arc<[usize]>, usize),
    Unary(H, Unary),
    Conv2d(H, H, ConvGeom),
    ConvInputGrad(H, H, ConvGeom, [usize; 4]),
    ConvKernelGrad(H, H, ConvGeom, [usize; 4]),
    Pool(H, PoolGeom),
    PoolGrad(H, H, PoolGeom),
    Spectral(H, H, SpectralGeom),
    SpectralAdjoint(H, H, SpectralGeom),
    SpectralWeightGrad(H, H, SpectralGeom),
}

impl<H: Clone> Op<H> {
    pub fn parents(&self) -> Vec<H> {
        use Op::*;
        match self {
            Leaf(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) => vec![a.clone(), b.clone()],
            Conv2d(a, b, _)
            | ConvInputGrad(a, b, _, _)
            | ConvKernelGrad(a, b, _, _)
            | PoolGrad(a, b, _)
            | Spectral(a, b, _)
            | SpectralAdjoint(a, b, _)
            | SpectralWeightGrad(a, b, _) => vec![a.clone(), b.clone()],
            Scale(a, _)
            | AddScalar(a, _)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a, _)
            | SumCols(a)
            | BroadcastCols(a, _)
            | Sum(a)
            | BroadcastScalar(a, _)
            | Reshape(a, _)
            | SelectCols(a, _, _)
            | PadCols(a, _, _)
            | GatherRows(a, _)
            | ScatterRows(a, _, _)
            | Unary(a, _)
            | Pool(a, _) => vec![a.clone()],
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Evaluates a non-leaf op given a way to read parent values.
fn eval<H>(op: &Op<H>, val: impl Fn(&H) -> &Tensor) -> Result<Tensor> {
    use Op::*;
    Ok(match op {
        Leaf(_) => return Err(invalid("leaf nodes carry their own value")),
        Add(a, b) => val(a).add(val(b))?,
        Sub(a, b) => val(a).sub(val(b))?,
        Mul(a, b) => val(a).mul(val(b))?,
        Scale(a, c) => val(a).scale(*c),
        AddScalar(a, c) => val(a).map(|x| x + c),
        MatMul(a, b) => val(a).matmul(val(b))?,
        Transpose(a) => val(a).transpose()?,
        AddRow(a, b) => {
            let (a, b) = (val(a), val(b));
            let (n, c) = a.dims2()?;
            if b.shape() != [1, c] {
                return Err(shape_err("add_row", a, b));
            }
            let mut out = a.data().to_vec();
            for i in 0..n {
                for (o, &bv) in out[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::raw(vec![n, c], out)
        }
        SumRows(a) => {
            let a = val(a);
            let (n, c) = a.dims2()?;
            let mut out = vec![0.0; c];
            for i in 0..n {
                for (o, &x) in out.iter_mut().zip(a.row(i)) {
                    *o += x;
                }
            }
            Tensor::raw(vec![1, c], out)
        }
        BroadcastRows(a, n) => {
            let a = val(a);
            let (r, c) = a.dims2()?;
            if r != 1 {
                return Err(invalid(format!("broadcast_rows needs one row, got {:?}", a.shape())));
            }
            Tensor::raw(vec![*n, c], a.data().repeat(*n))
        }
        SumCols(a) => {
            let a = val(a);
            let (n, _) = a.dims2()?;
            Tensor::raw(vec![n, 1], (0..n).map(|i| a.row(i).iter().sum()).collect())
        }
        BroadcastCols(a, c) => {
            let a = val(a);
            let (n, one) = a.dims2()?;
            if one != 1 {
                return Err(invalid(format!("broadcast_cols needs one column, got {:?}", a.shape())));
            }
            Tensor::raw(
                vec![n, *c],
                a.data().iter().flat_map(|&x| std::iter::repeat_n(x, *c)).collect(),
            )
        }
        Sum(a) => Tensor::scalar(val(a).sum()),
        BroadcastScalar(a, shape) => {
            let a = val(a);
            if a.len() != 1 {
                return Err(invalid(format!("broadcast_scalar needs one value, got {:?}", a.shape())));
            }
            Tensor::full(shape, a.item())
        }
        Reshape(a, shape) => val(a).reshape(shape)?,
        SelectCols(a, start, len) => {
            let a = val(a);
            let (n, c) = a.dims2()?;
            if start + len > c || *len == 0 {
                return Err(invalid(format!("select_cols {start}+{len} outside {c} columns")));
            }
            let mut out = Vec::with_capacity(n * len);
            for i in 0..n {
                out.extend_from_slice(&a.row(i)[*start..start + len]);
            }
            Tensor::raw(vec![n, *len], out)
        }
        PadCols(a, start, total) => {
            let a = val(a);
            let (n, c) = a.dims2()?;
            if start + c > *total {
                return Err(invalid(format!("pad_cols {start}+{c} exceeds {total}")));
            }
            let mut out = vec![0.0; n * total];
            for i in 0..n {
                out[i * total + start..i * total + start + c].copy_from_slice(a.row(i));
            }
            Tensor::raw(vec![n, *total], out)
        }
        GatherRows(a, idx) => {
            let a = val(a);
            let (r, c) = a.dims2()?;
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                if i >= r {
                    return Err(invalid(format!("gather row {i} outside {r}")));
                }
                out.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![idx.len(), c], out)?
        }
        ScatterRows(a, idx, rows) => {
            let a = val(a);
            let (n, c) = a.dims2()?;
            if n != idx.len() {
                return Err(invalid(format!("scatter of {n} rows with {} indices", idx.len())));
            }
            let mut out = vec![0.0; rows * c];
            for (k, &i) in idx.iter().enumerate() {
                if i >= *rows {
                    return Err(invalid(format!("scatter row {i} outside {rows}")));
                }
                for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(a.row(k)) {
                    *o += x;
                }
            }
            Tensor::raw(vec![*rows, c], out)
        }
        Unary(a, u) => val(a).map(|x| u.apply(x)),
        Conv2d(x, k, g) => convnet::conv2d_raw(val(x), val(k), *g)?,
        ConvInputGrad(gr, k, g, xs) => convnet::conv2d_input_grad(val(gr), val(k), *g, *xs)?,
        ConvKernelGrad(x, gr, g, ks) => convnet::conv2d_kernel_grad(val(x), val(gr), *g, *ks)?,
        Pool(x, g) => convnet::pool_raw(val(x), *g)?,
        PoolGrad(x, gr, g) => convnet::pool_grad(val(x), val(gr), *g)?,
        Spectral(u, w, g) => operatornet::spectral_apply(val(u), val(w), g)?,
        SpectralAdjoint(gr, w, g) => operatornet::spectral_adjoint(val(gr), val(w), g)?,
        SpectralWeightGrad(u, gr, g) => operatornet::spectral_weight_grad(val(u), val(gr), g)?,
    })
}

/// Target of the reverse rules: either numeric tensors or new tape nodes.
trait Builder {
    type H: Clone;
    /// Whether the rules are being recorded for later differentiation.
    const RECORDING: bool;
    fn shape(&self, h: &Self::H) -> Vec<usize>;
    fn emit(&mut self, op: Op<Self::H>) -> Result<Self::H>;
}

struct Numeric;

impl Builder for Numeric {
    type H = Arc<Tensor>;
    const RECORDING: bool = false;
    fn shape(&self, h: &Self::H) -> Vec<usize> {
        h.shape().to_vec()
    }
    fn emit(&mut self, op: Op<Self::H>) -> Result<Self::H> {
        Ok(Arc::new(eval(&op, |h| &**h)?))
    }
}

impl Builder for Tape {
    type H = Var;
    const RECORDING: bool = true;
    fn shape(&self, h: &Var) -> Vec<usize> {
        self.value(*h).shape().to_vec()
    }
    fn emit(&mut self, op: Op<Var>) -> Result<Var> {
        self.push(op)
    }
}

fn second_order_unsupported(name: &'static str) -> Error {
    invalid(format!("{name} has no reverse rule for its own derivative"))
}

/// Reverse rule: adjoints of the parents of `op` given the output adjoint `g`.
/// Only parents flagged in `want` receive a value.
fn vjp<B: Builder>(b: &mut B, op: &Op<B::H>, out: &B::H, g: &B::H, want: &[bool]) -> Result<Vec<Option<B::H>>> {
    use Op::*;
    let w = |i: usize| want.get(i).copied().unwrap_or(false);
    let g = g.clone();
    Ok(match op {
        Leaf(_) => vec![],
        Add(_, _) => vec![w(0).then(|| g.clone()), w(1).then(|| g.clone())],
        Sub(_, _) => vec![
            w(0).then(|| g.clone()),
            if w(1) { Some(b.emit(Scale(g, -1.0))?) } else { None },
        ],
        Mul(x, y) => vec![
            if w(0) { Some(b.emit(Mul(g.clone(), y.clone()))?) } else { None },
            if w(1) { Some(b.emit(Mul(g, x.clone()))?) } else { None },
        ],
        Scale(_, c) => vec![Some(b.emit(Scale(g, *c))?)],
        AddScalar(_, _) => vec![Some(g)],
        MatMul(x, y) => {
            let gx = if w(0) {
                let yt = b.emit(Transpose(y.clone()))?;
                Some(b.emit(MatMul(g.clone(), yt))?)
            } else {
                None
            };
            let gy = if w(1) {
                let xt = b.emit(Transpose(x.clone()))?;
                Some(b.emit(MatMul(xt, g))?)
            } else {
                None
            };
            vec![gx, gy]
        }
        Transpose(_) => vec![Some(b.emit(Transpose(g))?)],
        AddRow(_, _) => vec![
            w(0).then(|| g.clone()),
            if w(1) { Some(b.emit(SumRows(g))?) } else { None },
        ],
        SumRows(x) => {
            let n = b.shape(x)[0];
            vec![Some(b.emit(BroadcastRows(g, n))?)]
        }
        BroadcastRows(_, _) => vec![Some(b.emit(SumRows(g))?)],
        SumCols(x) => {
            let c = b.shape(x)[1];
            vec![Some(b.emit(BroadcastCols(g, c))?)]
        }
        BroadcastCols(_, _) => vec![Some(b.emit(SumCols(g))?)],
        Sum(x) => {
            let s = b.shape(x);
            vec![Some(b.emit(BroadcastScalar(g, s))?)]
        }
        BroadcastScalar(x, _) => {
            let s = b.shape(x);
            let total = b.emit(Sum(g))?;
            vec![Some(if s.is_empty() { total } else { b.emit(Reshape(total, s))? })]
        }
        Reshape(x, _) => {
            let s = b.shape(x);
            vec![Some(b.emit(Reshape(g, s))?)]
        }
        SelectCols(x, start, _) => {
            let c = b.shape(x)[1];
            vec![Some(b.emit(PadCols(g, *start, c))?)]
        }
        PadCols(x, start, _) => {
            let c = b.shape(x)[1];
            vec![Some(b.emit(SelectCols(g, *start, c))?)]
        }
        GatherRows(x, idx) => {
            let r = b.shape(x)[0];
            vec![Some(b.emit(ScatterRows(g, idx.clone(), r))?)]
        }
        ScatterRows(_, idx, _) => vec![Some(b.emit(GatherRows(g, idx.clone()))?)],
        Unary(x, u) => {
            let local = match u {
                self::Unary::Tanh => {
                    let y2 = b.emit(Unary(out.clone(), self::Unary::Square))?;
                    let neg = b.emit(Scale(y2, -1.0))?;
                    b.emit(AddScalar(neg, 1.0))?
                }
                self::Unary::Logistic => {
                    let neg = b.emit(Scale(out.clone(), -1.0))?;
                    let one_minus = b.emit(AddScalar(neg, 1.0))?;
                    b.emit(Mul(out.clone(), one_minus))?
                }
                self::Unary::Sin => b.emit(Unary(x.clone(), self::Unary::Cos))?,
                self::Unary::Cos => {
                    let s = b.emit(Unary(x.clone(), self::Unary::Sin))?;
                    b.emit(Scale(s, -1.0))?
                }
                self::Unary::Exp => out.clone(),
                self::Unary::Log => b.emit(Unary(x.clone(), self::Unary::Recip))?,
                self::Unary::Square => b.emit(Scale(x.clone(), 2.0))?,
                self::Unary::Sqrt => {
                    let r = b.emit(Unary(out.clone(), self::Unary::Recip))?;
                    b.emit(Scale(r, 0.5))?
                }
                self::Unary::Recip => {
                    let y2 = b.emit(Unary(out.clone(), self::Unary::Square))?;
                    b.emit(Scale(y2, -1.0))?
                }
                self::Unary::Relu | self::Unary::LeakyRelu(_) | self::Unary::Abs if B::RECORDING => {
                    return Err(Error::InsufficientSmoothness(u.name()));
                }
                self::Unary::Relu => b.emit(Unary(x.clone(), self::Unary::Step(0.0)))?,
                self::Unary::LeakyRelu(a) => b.emit(Unary(x.clone(), self::Unary::Step(*a)))?,
                self::Unary::Abs => b.emit(Unary(x.clone(), self::Unary::Sign))?,
                self::Unary::Step(_) | self::Unary::Sign => {
                    return Err(Error::InsufficientSmoothness(u.name()));
                }
            };
            vec![Some(b.emit(Mul(g, local))?)]
        }
        Conv2d(x, k, geom) => {
            let xs = b.shape(x);
            let ks = b.shape(k);
            vec![
                if w(0) {
                    Some(b.emit(ConvInputGrad(g.clone(), k.clone(), *geom, to4(&xs)?))?)
                } else {
                    None
                },
                if w(1) {
                    Some(b.emit(ConvKernelGrad(x.clone(), g, *geom, to4(&ks)?))?)
                } else {
                    None
                },
            ]
        }
        Pool(x, geom) => {
            if B::RECORDING && geom.kind == PoolKind::Max {
                return Err(Error::InsufficientSmoothness("max_pool"));
            }
            vec![Some(b.emit(PoolGrad(x.clone(), g, *geom))?)]
        }
        Spectral(u, wt, geom) => vec![
            if w(0) {
                Some(b.emit(SpectralAdjoint(g.clone(), wt.clone(), *geom))?)
            } else {
                None
            },
            if w(1) {
                Some(b.emit(SpectralWeightGrad(u.clone(), g, *geom))?)
            } else {
                None
            },
        ],
        ConvInputGrad(..) | ConvKernelGrad(..) => return Err(second_order_unsupported("conv2d")),
        PoolGrad(..) => return Err(second_order_unsupported("pool")),
        SpectralAdjoint(..) | SpectralWeightGrad(..) => return Err(second_order_unsupported("spectral_conv")),
    })
}

fn to4(s: &[usize]) -> Result<[usize; 4]> {
    s.try_into().map_err(|_| invalid(format!("expected rank-4 shape, got {s:?}")))
}

/// Reverse sweep from `tip`, seeded with `seed`, touching only nodes flagged in `needs`.
fn sweep<B: Builder>(
    b: &mut B,
    ops: &[Op<Var>],
    lift: impl Fn(&B, Var) -> B::H,
    tip: Var,
    seed: B::H,
    needs: &[bool],
) -> Result<Vec<Option<B::H>>> {
    let mut adj: Vec<Option<B::H>> = vec![None; tip.0 + 1];
    adj[tip.0] = Some(seed);
    for i in (0..=tip.0).rev() {
        if !needs[i] {
            continue;
        }
        let Some(g) = adj[i].clone() else { continue };
        let op = &ops[i];
        let parents = op.parents();
        if parents.is_empty() {
            continue;
        }
        let want: Vec<bool> = parents.iter().map(|p| needs[p.0]).collect();
        let lifted = lift_op(op, |v| lift(b, v));
        let out = lift(b, Var(i));
        let grads = vjp(b, &lifted, &out, &g, &want)?;
        for (p, gp) in parents.iter().zip(grads) {
            let Some(gp) = gp else { continue };
            if !needs[p.0] {
                continue;
            }
            adj[p.0] = Some(match adj[p.0].take() {
                None => gp,
                Some(acc) => b.emit(Op::Add(acc, gp))?,
            });
        }
    }
    Ok(adj)
}

fn lift_op<H>(op: &Op<Var>, f: impl Fn(Var) -> H) -> Op<H> {
    use Op::*;
    match op {
        Leaf(k) => Leaf(*k),
        Add(a, b) => Add(f(*a), f(*b)),
        Sub(a, b) => Sub(f(*a), f(*b)),
        Mul(a, b) => Mul(f(*a), f(*b)),
        Scale(a, c) => Scale(f(*a), *c),
        AddScalar(a, c) => AddScalar(f(*a), *c),
        MatMul(a, b) => MatMul(f(*a), f(*b)),
        Transpose(a) => Transpose(f(*a)),
        AddRow(a, b) => AddRow(f(*a), f(*b)),
        SumRows(a) => SumRows(f(*a)),
        BroadcastRows(a, n) => BroadcastRows(f(*a), *n),
        SumCols(a) => SumCols(f(*a)),
        BroadcastCols(a, n) => BroadcastCols(f(*a), *n),
        Sum(a) => Sum(f(*a)),
        BroadcastScalar(a, s) => BroadcastScalar(f(*a), s.clone()),
        Reshape(a, s) => Reshape(f(*a), s.clone()),
        SelectCols(a, s, l) => SelectCols(f(*a), *s, *l),
        PadCols(a, s, t) => PadCols(f(*a), *s, *t),
        GatherRows(a, i) => GatherRows(f(*a), i.clone()),
        ScatterRows(a, i, r) => ScatterRows(f(*a), i.clone(), *r),
        Unary(a, u) => Unary(f(*a), *u),
        Conv2d(a, b, g) => Conv2d(f(*a), f(*b), *g),
        ConvInputGrad(a, b, g, s) => ConvInputGrad(f(*a), f(*b), *g, *s),
        ConvKernelGrad(a, b, g, s) => ConvKernelGrad(f(*a), f(*b), *g, *s),
        Pool(a, g) => Pool(f(*a), *g),
        PoolGrad(a, b, g) => PoolGrad(f(*a), f(*b), *g),
        Spectral(a, b, g) => Spectral(f(*a), f(*b), *g),
        SpectralAdjoint(a, b, g) => SpectralAdjoint(f(*a), f(*b), *g),
        SpectralWeightGrad(a, b, g) => SpectralWeightGrad(f(*a), f(*b), *g),
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op<Var>,
    value: Arc<Tensor>,
}

/// Append-only computational graph with cached node values.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
    params: Vec<Var>,
    tip: Option<Var>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct GradMap {
    adj: Vec<Option<Arc<Tensor>>>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` does not influence the tip.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Scale below which gradient-check errors are measured in absolute rather than relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `build` on a fresh tape and marks the returned node as the tip.
    pub fn record(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Tape> {
        let mut t = Tape::new();
        let tip = build(&mut t)?;
        t.set_tip(tip);
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op<Var> {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn tip(&self) -> Option<Var> {
        self.tip
    }

    pub fn set_tip(&mut self, v: Var) {
        self.tip = Some(v);
    }

    fn tip_or_err(&self) -> Result<Var> {
        self.tip.ok_or_else(|| invalid("tape has no tip"))
    }

    fn leaf(&mut self, kind: LeafKind, value: Tensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            value: Arc::new(value),
        });
        match kind {
            LeafKind::Input => self.inputs.push(v),
            LeafKind::Param => self.params.push(v),
            LeafKind::Const => {}
        }
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Input, value)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Param, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Const, value)
    }

    pub(crate) fn push(&mut self, op: Op<Var>) -> Result<Var> {
        let value = eval(&lift_op(&op, |v| self.nodes[v.0].value.clone()), |h| &**h)?;
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows(a))
    }
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(a, n))
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols(a))
    }
    pub fn broadcast_cols(&mut self, a: Var, c: usize) -> Result<Var> {
        self.push(Op::BroadcastCols(a, c))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::BroadcastScalar(a, shape.to_vec()))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn select_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SelectCols(a, start, len))
    }
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        self.push(Op::PadCols(a, start, total))
    }
    /// Column-wise concatenation of rank-2 nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
        let mut acc: Option<Var> = None;
        let mut start = 0;
        for &p in parts {
            let c = self.value(p).shape()[1];
            let padded = self.pad_cols(p, start, total)?;
            acc = Some(match acc {
                None => padded,
                Some(a) => self.add(a, padded)?,
            });
            start += c;
        }
        acc.ok_or_else(|| invalid("concat of nothing"))
    }
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        self.push(Op::GatherRows(a, idx))
    }
    pub fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        self.push(Op::Unary(a, u))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    /// Nodes whose value depends on one of `roots`.
    fn dependents(&self, upto: Var, roots: impl Fn(usize, &Op<Var>) -> bool) -> Vec<bool> {
        let mut needs = vec![false; upto.0 + 1];
        for i in 0..=upto.0 {
            let op = &self.nodes[i].op;
            needs[i] = roots(i, op) || op.parents().iter().any(|p| needs[p.0]);
        }
        needs
    }

    fn trainable_dependents(&self, upto: Var) -> Vec<bool> {
        self.dependents(upto, |_, op| {
            matches!(op, Op::Leaf(LeafKind::Input) | Op::Leaf(LeafKind::Param))
        })
    }

    /// Adjoints of every node feeding the tip, seeded with `seed`.
    pub fn backward(&self, seed: &Tensor) -> Result<GradMap> {
        let tip = self.tip_or_err()?;
        self.backward_from(tip, seed)
    }

    pub fn backward_from(&self, tip: Var, seed: &Tensor) -> Result<GradMap> {
        if seed.shape() != self.value(tip).shape() {
            return Err(shape_err("backward seed", seed, self.value(tip)));
        }
        let needs = self.trainable_dependents(tip);
        let ops: Vec<Op<Var>> = self.nodes[..=tip.0].iter().map(|n| n.op.clone()).collect();
        let adj = sweep(
            &mut Numeric,
            &ops,
            |_, v| self.nodes[v.0].value.clone(),
            tip,
            Arc::new(seed.clone()),
            &needs,
        )?;
        Ok(GradMap { adj })
    }

    /// Gradient of a scalar tip with unit seed.
    pub fn backward_scalar(&self) -> Result<GradMap> {
        let tip = self.tip_or_err()?;
        let v = self.value(tip);
        if v.len() != 1 {
            return Err(invalid(format!("backward_scalar on tip of shape {:?}", v.shape())));
        }
        self.backward(&Tensor::full(v.shape(), 1.0))
    }

    /// Records the gradient of `sum(out)` with respect to each node in `wrt` as new nodes.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let needs = self.dependents(out, |i, _| wrt.iter().any(|w| w.0 == i));
        let ops: Vec<Op<Var>> = self.nodes[..=out.0].iter().map(|n| n.op.clone()).collect();
        let seed = self.constant(Tensor::full(self.value(out).shape(), 1.0));
        let adj = sweep(self, &ops, |_, v| v, out, seed, &needs)?;
        let mut res = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adj.get(w.0).cloned().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.value(w).shape());
                    self.constant(z)
                }
            };
            res.push(g);
        }
        Ok(res)
    }

    /// Copy of the tape extended by the recorded derivative of the tip with respect to its
    /// single input node; the new tip holds du/dx row by row.
    pub fn extend(&self) -> Result<Tape> {
        let tip = self.tip_or_err()?;
        let x = match self.inputs[..] {
            [x] => x,
            _ => return Err(invalid(format!("extend needs exactly one input node, tape has {}", self.inputs.len()))),
        };
        let mut t = self.clone();
        let d = t.grad(tip, &[x])?[0];
        t.set_tip(d);
        Ok(t)
    }

    /// Derivatives of each tip column with respect to the single input: shape (N, D, d).
    pub fn input_jacobian(&self) -> Result<Tensor> {
        let tip = self.tip_or_err()?;
        let x = match self.inputs[..] {
            [x] => x,
            _ => return Err(invalid("input_jacobian needs exactly one input node")),
        };
        let (n, dout) = self.value(tip).dims2()?;
        let (nx, din) = self.value(x).dims2()?;
        if nx != n {
            return Err(shape_err("input_jacobian", self.value(tip), self.value(x)));
        }
        let mut jac = vec![0.0; n * dout * din];
        for k in 0..dout {
            let mut seed = Tensor::zeros(&[n, dout]);
            for i in 0..n {
                seed.set(&[i, k], 1.0);
            }
            let grads = self.backward(&seed)?;
            let gx = grads.get_or_zeros(x, self.value(x));
            for i in 0..n {
                for j in 0..din {
                    jac[(i * dout + k) * din + j] = gx.at(&[i, j]);
                }
            }
        }
        Tensor::new(vec![n, dout, din], jac)
    }

    /// Re-evaluates the tape with some leaf values replaced.
    pub fn replay(&self, overrides: &[(Var, Tensor)]) -> Result<Tape> {
        let mut t = self.clone();
        for (v, val) in overrides {
            if !matches!(t.nodes[v.0].op, Op::Leaf(_)) {
                return Err(invalid(format!("node {} is not a leaf", v.0)));
            }
            if val.shape() != t.value(*v).shape() {
                return Err(shape_err("replay", val, t.value(*v)));
            }
            t.nodes[v.0].value = Arc::new(val.clone());
        }
        for i in 0..t.nodes.len() {
            if matches!(t.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let value = eval(&lift_op(&t.nodes[i].op, |v| t.nodes[v.0].value.clone()), |h| &**h)?;
            t.nodes[i].value = Arc::new(value);
        }
        Ok(t)
    }

    /// Compares reverse-mode gradients of a scalar tip with central differences of step `step`
    /// for every parameter entry.
    pub fn grad_check(&self, step: f64) -> Result<GradCheckReport> {
        if step <= 0.0 || !step.is_finite() {
            return Err(invalid("grad_check step must be positive"));
        }
        let tip = self.tip_or_err()?;
        let mut report = GradCheckReport {
            entries: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        if self.params.is_empty() {
            return Ok(report);
        }
        let grads = self.backward_scalar()?;
        for &p in &self.params {
            let base = self.value(p).clone();
            let analytic = grads.get_or_zeros(p, &base);
            for k in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[k] += step;
                let mut minus = base.clone();
                minus.data_mut()[k] -= step;
                let fp = self.replay(&[(p, plus)])?.value(tip).item();
                let fm = self.replay(&[(p, minus)])?.value(tip).item();
                let fd = (fp - fm) / (2.0 * step);
                let a = analytic.data()[k];
                report.entries += 1;
                report.max_abs_error = report.max_abs_error.max((a - fd).abs());
                report.max_rel_error = report.max_rel_error.max(rel_error(a, fd));
            }
        }
        Ok(report)
    }
}
