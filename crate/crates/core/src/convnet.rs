//! Discrete 2D convolution, pooling, stencils, transpose convolution and a small CNN.
//!
//! Images are `(N1, N2, C)` tensors, batches `(B, N1, N2, C)`. Kernels are
//! `(K1, K2, C, P)`; array index `a` in a kernel of odd size `2r+1` is the
//! centered offset `m = a - r`, so with zero padding `r` the output pixel `(i, j)`
//! is `sum g[m, n, c] U[i+m, j+n, c]`. With stride `S` outputs are taken at
//! `0, S, 2S, ...`.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{log_softmax_rows, softmax_rows};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl ConvGeom {
    /// Same stride and zero padding along both axes.
    pub fn square(stride: usize, pad: usize) -> Self {
        Self {
            stride: [stride; 2],
            pad: [pad; 2],
        }
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid("stride must be at least 1"));
    }
    if n + 2 * pad < k {
        return Err(invalid(format!("kernel {k} larger than padded extent {}", n + 2 * pad)));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    t.shape()
        .try_into()
        .map_err(|_| invalid(format!("{what} must be rank 4, got {:?}", t.shape())))
}

/// Visits every (output pixel, kernel tap) pair whose input pixel is inside the image.
fn for_each_tap(
    xs: [usize; 4],
    ks: [usize; 4],
    geom: ConvGeom,
    mut f: impl FnMut(usize, usize, usize),
) -> Result<(usize, usize)> {
    let [b, n1, n2, _] = xs;
    let [k1, k2, _, _] = ks;
    let m1 = out_extent(n1, k1, geom.stride[0], geom.pad[0])?;
    let m2 = out_extent(n2, k2, geom.stride[1], geom.pad[1])?;
    for bi in 0..b {
        for o1 in 0..m1 {
            for o2 in 0..m2 {
                let out_base = (bi * m1 + o1) * m2 + o2;
                for a1 in 0..k1 {
                    let i1 = (o1 * geom.stride[0] + a1) as isize - geom.pad[0] as isize;
                    if i1 < 0 || i1 >= n1 as isize {
                        continue;
                    }
                    for a2 in 0..k2 {
                        let i2 = (o2 * geom.stride[1] + a2) as isize - geom.pad[1] as isize;
                        if i2 < 0 || i2 >= n2 as isize {
                            continue;
                        }
                        let in_base = (bi * n1 + i1 as usize) * n2 + i2 as usize;
                        f(out_base, in_base, a1 * k2 + a2);
                    }
                }
            }
        }
    }
    Ok((m1, m2))
}

/// Batched multi-channel convolution without bias.
pub fn conv2d_raw(x: &Tensor, k: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let xs = dims4(x, "conv input")?;
    let ks = dims4(k, "conv kernel")?;
    let (c, p) = (xs[3], ks[3]);
    if ks[2] != c {
        return Err(Error::Shape {
            op: "conv2d channels",
            left: x.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let m1 = out_extent(xs[1], ks[0], geom.stride[0], geom.pad[0])?;
    let m2 = out_extent(xs[2], ks[1], geom.stride[1], geom.pad[1])?;
    let mut out = vec![0.0; xs[0] * m1 * m2 * p];
    let (xd, kd) = (x.data(), k.data());
    for_each_tap(xs, ks, geom, |ob, ib, tap| {
        let orow = &mut out[ob * p..(ob + 1) * p];
        for ci in 0..c {
            let xv = xd[ib * c + ci];
            let krow = &kd[(tap * c + ci) * p..(tap * c + ci + 1) * p];
            for (o, &kv) in orow.iter_mut().zip(krow) {
                *o += kv * xv;
            }
        }
    })?;
    Ok(Tensor::raw(vec![xs[0], m1, m2, p], out))
}

/// Adjoint of [`conv2d_raw`] with respect to its input.
pub fn conv2d_input_grad(g: &Tensor, k: &Tensor, geom: ConvGeom, xs: [usize; 4]) -> Result<Tensor> {
    let ks = dims4(k, "conv kernel")?;
    let (c, p) = (xs[3], ks[3]);
    let mut dx = vec![0.0; xs.iter().product()];
    let (gd, kd) = (g.data(), k.data());
    let (m1, m2) = for_each_tap(xs, ks, geom, |ob, ib, tap| {
        let grow = &gd[ob * p..(ob + 1) * p];
        for ci in 0..c {
            let krow = &kd[(tap * c + ci) * p..(tap * c + ci + 1) * p];
            dx[ib * c + ci] += krow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
        }
    })?;
    if g.shape() != [xs[0], m1, m2, p] {
        return Err(invalid(format!("conv output adjoint has shape {:?}", g.shape())));
    }
    Ok(Tensor::raw(xs.to_vec(), dx))
}

/// Adjoint of [`conv2d_raw`] with respect to its kernel.
pub fn conv2d_kernel_grad(x: &Tensor, g: &Tensor, geom: ConvGeom, ks: [usize; 4]) -> Result<Tensor> {
    let xs = dims4(x, "conv input")?;
    let (c, p) = (xs[3], ks[3]);
    let mut dk = vec![0.0; ks.iter().product()];
    let (xd, gd) = (x.data(), g.data());
    let (m1, m2) = for_each_tap(xs, ks, geom, |ob, ib, tap| {
        let grow = &gd[ob * p..(ob + 1) * p];
        for ci in 0..c {
            let xv = xd[ib * c + ci];
            let krow = &mut dk[(tap * c + ci) * p..(tap * c + ci + 1) * p];
            for (kv, &gv) in krow.iter_mut().zip(grow) {
                *kv += xv * gv;
            }
        }
    })?;
    if g.shape() != [xs[0], m1, m2, p] {
        return Err(invalid(format!("conv output adjoint has shape {:?}", g.shape())));
    }
    Ok(Tensor::raw(ks.to_vec(), dk))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub kind: PoolKind,
    pub patch: usize,
    pub stride: usize,
}

impl PoolGeom {
    /// Pooling whose patch equals its stride.
    pub fn new(kind: PoolKind, stride: usize) -> Self {
        Self {
            kind,
            patch: stride,
            stride,
        }
    }
}

fn pool_walk(xs: [usize; 4], geom: PoolGeom, mut f: impl FnMut(usize, &[usize])) -> Result<(usize, usize)> {
    let [b, n1, n2, _] = xs;
    if geom.patch == 0 || geom.patch > n1 || geom.patch > n2 {
        return Err(invalid(format!("pool patch {} exceeds image {n1}x{n2}", geom.patch)));
    }
    let m1 = out_extent(n1, geom.patch, geom.stride, 0)?;
    let m2 = out_extent(n2, geom.patch, geom.stride, 0)?;
    let mut window = Vec::with_capacity(geom.patch * geom.patch);
    for bi in 0..b {
        for o1 in 0..m1 {
            for o2 in 0..m2 {
                window.clear();
                for a1 in 0..geom.patch {
                    for a2 in 0..geom.patch {
                        window.push((bi * n1 + o1 * geom.stride + a1) * n2 + o2 * geom.stride + a2);
                    }
                }
                f((bi * m1 + o1) * m2 + o2, &window);
            }
        }
    }
    Ok((m1, m2))
}

pub fn pool_raw(x: &Tensor, geom: PoolGeom) -> Result<Tensor> {
    let xs = dims4(x, "pool input")?;
    let c = xs[3];
    let mut out = Vec::new();
    let xd = x.data();
    let (m1, m2) = pool_walk(xs, geom, |_, win| {
        for ci in 0..c {
            let vals = win.iter().map(|&p| xd[p * c + ci]);
            out.push(match geom.kind {
                PoolKind::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                PoolKind::Avg => vals.sum::<f64>() / win.len() as f64,
            });
        }
    })?;
    Ok(Tensor::raw(vec![xs[0], m1, m2, c], out))
}

/// Adjoint of [`pool_raw`]; max pooling routes to the first maximal entry.
pub fn pool_grad(x: &Tensor, g: &Tensor, geom: PoolGeom) -> Result<Tensor> {
    let xs = dims4(x, "pool input")?;
    let c = xs[3];
    let mut dx = vec![0.0; x.len()];
    let (xd, gd) = (x.data(), g.data());
    pool_walk(xs, geom, |o, win| {
        for ci in 0..c {
            let gv = gd[o * c + ci];
            match geom.kind {
                PoolKind::Max => {
                    let mut best = win[0];
                    for &p in &win[1..] {
                        if xd[p * c + ci] > xd[best * c + ci] {
                            best = p;
                        }
                    }
                    dx[best * c + ci] += gv;
                }
                PoolKind::Avg => {
                    let share = gv / win.len() as f64;
                    for &p in win {
                        dx[p * c + ci] += share;
                    }
                }
            }
        }
    })?;
    Ok(Tensor::raw(xs.to_vec(), dx))
}

/// Single image with optional pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Tensor,
    pub h: Option<f64>,
}

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(invalid(format!("image must be (N1, N2, C), got {:?}", data.shape())));
        }
        Ok(Self { data, h: None })
    }

    /// Single-channel image from rows indexed `[i][j]`.
    pub fn gray(rows: &[Vec<f64>]) -> Result<Self> {
        let m = Tensor::matrix(rows)?;
        let (n1, n2) = m.dims2()?;
        Self::new(m.reshape(&[n1, n2, 1])?)
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    fn batched(&self) -> Tensor {
        let (n1, n2, c) = self.extents();
        Tensor::raw(vec![1, n1, n2, c], self.data.data().to_vec())
    }

    fn from_batched(t: Tensor) -> Self {
        let s = t.shape();
        let shape = vec![s[1], s[2], s[3]];
        Self {
            data: Tensor::raw(shape, t.into_data()),
            h: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    None,
    Zero(usize),
}

impl Padding {
    fn width(self) -> usize {
        match self {
            Padding::None => 0,
            Padding::Zero(w) => w,
        }
    }
}

/// P kernels of shape (k, k, C) with one bias each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernelSet {
    pub weights: Tensor,
    pub biases: Vec<f64>,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvKernelSet {
    pub fn new(weights: Tensor, biases: Vec<f64>, stride: usize, padding: Padding) -> Result<Self> {
        let ks = dims4(&weights, "kernel set")?;
        if biases.len() != ks[3] {
            return Err(invalid(format!("{} biases for {} kernels", biases.len(), ks[3])));
        }
        if stride == 0 {
            return Err(invalid("stride must be at least 1"));
        }
        Ok(Self {
            weights,
            biases,
            stride,
            padding,
        })
    }

    /// Single-channel single-kernel set from a stencil matrix indexed by offsets `[a1][a2]`.
    pub fn single(kernel: &Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let (k1, k2) = kernel.dims2()?;
        Self::new(kernel.reshape(&[k1, k2, 1, 1])?, vec![0.0], stride, padding)
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::square(self.stride, self.padding.width())
    }

    /// Trainable weights: `P * k * k * C` without biases, plus `P` with them.
    pub fn param_counts(&self) -> (usize, usize) {
        let w = self.weights.len();
        (w, w + self.biases.len())
    }
}

pub fn conv2d(image: &Image, kernels: &ConvKernelSet) -> Result<Image> {
    let out = conv2d_raw(&image.batched(), &kernels.weights, kernels.geom())?;
    let p = kernels.biases.len();
    let mut out = out;
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v += kernels.biases[k % p];
    }
    Ok(Image::from_batched(out))
}

/// 1D convolution of a sequence with a kernel, as the `N2 = 1` case of [`conv2d`].
pub fn conv1d(u: &[f64], kernel: &[f64], stride: usize, pad: usize) -> Result<Vec<f64>> {
    let x = Tensor::new(vec![1, u.len(), 1, 1], u.to_vec())?;
    let k = Tensor::new(vec![kernel.len(), 1, 1, 1], kernel.to_vec())?;
    let geom = ConvGeom {
        stride: [stride, 1],
        pad: [pad, 0],
    };
    Ok(conv2d_raw(&x, &k, geom)?.into_data())
}

pub fn pool(image: &Image, kind: PoolKind, patch: usize, stride: usize) -> Result<Image> {
    let out = pool_raw(&image.batched(), PoolGeom { kind, patch, stride })?;
    Ok(Image::from_batched(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilKind {
    Smooth,
    Ddx,
    Ddy,
    D2dx2,
    D2dy2,
    /// Negative Laplacian: center 4, cross -1.
    Laplacian,
}

/// 3x3 stencil indexed by offsets `[m+1][n+1]`, `m` along x1 and `n` along x2.
pub fn stencil_kernel(kind: StencilKind, h: f64) -> Result<Tensor> {
    if kind != StencilKind::Smooth && h <= 0.0 {
        return Err(invalid("grid spacing must be positive"));
    }
    let mut g = [[0.0; 3]; 3];
    match kind {
        StencilKind::Smooth => {
            g = [[0.25, 1.0, 0.25], [1.0, 3.0, 1.0], [0.25, 1.0, 0.25]];
            for row in &mut g {
                for v in row.iter_mut() {
                    *v /= 8.0;
                }
            }
        }
        StencilKind::Ddx => {
            g[0][1] = -1.0 / (2.0 * h);
            g[2][1] = 1.0 / (2.0 * h);
        }
        StencilKind::Ddy => {
            g[1][0] = -1.0 / (2.0 * h);
            g[1][2] = 1.0 / (2.0 * h);
        }
        StencilKind::D2dx2 => {
            let s = 1.0 / (h * h);
            g[0][1] = s;
            g[1][1] = -2.0 * s;
            g[2][1] = s;
        }
        StencilKind::D2dy2 => {
            let s = 1.0 / (h * h);
            g[1][0] = s;
            g[1][1] = -2.0 * s;
            g[1][2] = s;
        }
        StencilKind::Laplacian => {
            let s = 1.0 / (h * h);
            g[1][1] = 4.0 * s;
            g[0][1] = -s;
            g[2][1] = -s;
            g[1][0] = -s;
            g[1][2] = -s;
        }
    }
    Tensor::matrix(&g.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// Stencil laid out as usually printed: columns run over `m = -1..1`, rows over `n = +1..-1`.
pub fn stencil_display(g: &Tensor) -> Vec<Vec<f64>> {
    (0..3)
        .map(|r| (0..3).map(|c| g.at(&[c, 2 - r])).collect())
        .collect()
}

/// Gaussian blur kernel of half-width `nbar`, standard deviation `sigma` in pixels,
/// renormalized to unit sum.
pub fn gaussian_kernel(nbar: usize, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(invalid("sigma must be positive"));
    }
    let k = 2 * nbar + 1;
    let mut data = Vec::with_capacity(k * k);
    for a in 0..k {
        for b in 0..k {
            let (m, n) = (a as f64 - nbar as f64, b as f64 - nbar as f64);
            data.push((-(m * m + n * n) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = data.iter().sum();
    Tensor::new(vec![k, k], data.into_iter().map(|v| v / s).collect())
}

/// Maximum deviation between a stencil convolution of `u` sampled on an `n x n` grid of
/// spacing `h` and the analytic value `exact`, over interior points.
pub fn fd_equivalence_check(
    u: impl Fn(f64, f64) -> f64,
    exact: impl Fn(f64, f64) -> f64,
    kind: StencilKind,
    h: f64,
    n: usize,
) -> Result<f64> {
    if n < 3 {
        return Err(invalid("need at least 3 points per side"));
    }
    let mut rows = vec![vec![0.0; n]; n];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = u(i as f64 * h, j as f64 * h);
        }
    }
    let img = Image::gray(&rows)?;
    let ks = ConvKernelSet::single(&stencil_kernel(kind, h)?, 1, Padding::Zero(1))?;
    let out = conv2d(&img, &ks)?;
    let mut dev: f64 = 0.0;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let d = out.data.at(&[i, j, 0]) - exact(i as f64 * h, j as f64 * h);
            dev = dev.max(d.abs());
        }
    }
    Ok(dev)
}

/// Elements removed from each end of a transpose-convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub leading: usize,
    pub trailing: usize,
}

impl Crop {
    /// Trailing crop of `k - S` elements, giving an output of length `n * S`.
    pub fn trailing(kernel: usize, stride: usize) -> Self {
        Self {
            leading: 0,
            trailing: kernel.saturating_sub(stride),
        }
    }
}

/// Transpose convolution: each input value scales the kernel, copies are shifted by the
/// stride and summed, and the result is cropped.
pub fn transpose_conv1d(input: &[f64], kernel: &[f64], stride: usize, crop: Crop) -> Result<Vec<f64>> {
    if stride == 0 || kernel.is_empty() || input.is_empty() {
        return Err(invalid("transpose_conv needs non-empty input, kernel and stride >= 1"));
    }
    let full = (input.len() - 1) * stride + kernel.len();
    if crop.leading + crop.trailing >= full {
        return Err(invalid("crop removes the whole output"));
    }
    let mut out = vec![0.0; full];
    for (i, &u) in input.iter().enumerate() {
        for (a, &k) in kernel.iter().enumerate() {
            out[i * stride + a] += u * k;
        }
    }
    Ok(out[crop.leading..full - crop.trailing].to_vec())
}

/// 2D transpose convolution of a single-channel `(n1, n2)` input with a `(k1, k2)` kernel;
/// the crop applies to both axes.
pub fn transpose_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, crop: Crop) -> Result<Tensor> {
    let (n1, n2) = input.dims2()?;
    let (k1, k2) = kernel.dims2()?;
    if stride == 0 {
        return Err(invalid("stride must be at least 1"));
    }
    let (f1, f2) = ((n1 - 1) * stride + k1, (n2 - 1) * stride + k2);
    if crop.leading + crop.trailing >= f1.min(f2) {
        return Err(invalid("crop removes the whole output"));
    }
    let mut full = vec![0.0; f1 * f2];
    for i in 0..n1 {
        for j in 0..n2 {
            let u = input.at(&[i, j]);
            for a in 0..k1 {
                for b in 0..k2 {
                    full[(i * stride + a) * f2 + j * stride + b] += u * kernel.at(&[a, b]);
                }
            }
        }
    }
    let (o1, o2) = (f1 - crop.leading - crop.trailing, f2 - crop.leading - crop.trailing);
    let mut out = Vec::with_capacity(o1 * o2);
    for i in 0..o1 {
        let r = (i + crop.leading) * f2 + crop.leading;
        out.extend_from_slice(&full[r..r + o2]);
    }
    Tensor::new(vec![o1, o2], out)
}

/// Number of kernel taps landing on each output pixel of a 2D transpose convolution.
pub fn contribution_counts(n: usize, kernel: usize, stride: usize, crop: Crop) -> Result<Tensor> {
    transpose_conv2d(
        &Tensor::full(&[n, n], 1.0),
        &Tensor::full(&[kernel, kernel], 1.0),
        stride,
        crop,
    )
}

/// Whether transpose-convolution contribution counts are uniform away from the borders,
/// i.e. over the 1D positions every kernel tap can reach from a valid input.
pub fn steady_counts_uniform(kernel: usize, stride: usize) -> Result<bool> {
    let n = kernel + 2 * stride + 2;
    let counts = transpose_conv1d(&vec![1.0; n], &vec![1.0; kernel], stride, Crop { leading: 0, trailing: 0 })?;
    let region = &counts[kernel - 1..=(n - 1) * stride];
    Ok(region.iter().all(|&c| c == region[0]))
}

/// Layer of a CNN classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, stride: usize, pad: usize },
    Pool(PoolGeom),
    Relu,
    Tanh,
    Flatten,
    Dense { out: usize },
}

/// Architecture from an input image shape through layers ending in `Flatten` then `Dense`;
/// softmax is applied to the final dense output.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Image(usize, usize, usize),
    Flat(usize),
}

impl CnnSpec {
    /// Parameter tensor shapes per layer, checking that shapes flow through the stack.
    pub fn param_shapes(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        let (n1, n2, c) = self.input;
        let mut flow = Flow::Image(n1, n2, c);
        let mut shapes = Vec::with_capacity(self.layers.len());
        let layer_err = |i: usize, msg: String| invalid(format!("layer {i}: {msg}"));
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ps) = match (*layer, flow) {
                (LayerSpec::Conv { filters, kernel, stride, pad }, Flow::Image(a, b, c)) => {
                    let m1 = out_extent(a, kernel, stride, pad).map_err(|e| layer_err(i, e.to_string()))?;
                    let m2 = out_extent(b, kernel, stride, pad).map_err(|e| layer_err(i, e.to_string()))?;
                    (Flow::Image(m1, m2, filters), vec![vec![kernel, kernel, c, filters], vec![1, filters]])
                }
                (LayerSpec::Pool(g), Flow::Image(a, b, c)) => {
                    if g.patch > a || g.patch > b || g.stride == 0 {
                        return Err(layer_err(i, format!("pool patch {} on {a}x{b}", g.patch)));
                    }
                    ((Flow::Image((a - g.patch) / g.stride + 1, (b - g.patch) / g.stride + 1, c)), vec![])
                }
                (LayerSpec::Relu | LayerSpec::Tanh, f) => (f, vec![]),
                (LayerSpec::Flatten, Flow::Image(a, b, c)) => (Flow::Flat(a * b * c), vec![]),
                (LayerSpec::Dense { out }, Flow::Flat(n)) => (Flow::Flat(out), vec![vec![n, out], vec![1, out]]),
                (l, f) => return Err(layer_err(i, format!("{l:?} cannot follow {f:?}"))),
            };
            flow = next;
            shapes.push(ps);
        }
        match (self.layers.last(), flow) {
            (Some(LayerSpec::Dense { .. }), Flow::Flat(_)) => Ok(shapes),
            _ => Err(invalid("architecture must end with a dense layer")),
        }
    }

    pub fn classes(&self) -> Result<usize> {
        self.param_shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) => Ok(*out),
            _ => Err(invalid("architecture must end with a dense layer")),
        }
    }

    /// Glorot-uniform weights and zero biases for every parameterized layer.
    pub fn init(&self, rng: &mut Rng) -> Result<Vec<Tensor>> {
        let mut params = Vec::new();
        for ps in self.param_shapes()? {
            if let [w, b] = &ps[..] {
                let (fan_in, fan_out) = if w.len() == 4 {
                    (w[0] * w[1] * w[2], w[0] * w[1] * w[3])
                } else {
                    (w[0], w[1])
                };
                let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
                params.push(rng.uniform_tensor(w, -lim, lim));
                params.push(Tensor::zeros(b));
            }
        }
        Ok(params)
    }

    /// Weight counts without and with biases.
    pub fn param_counts(&self) -> Result<(usize, usize)> {
        let mut w = 0;
        let mut b = 0;
        for ps in self.param_shapes()? {
            if let [ws, bs] = &ps[..] {
                w += ws.iter().product::<usize>();
                b += bs.iter().product::<usize>();
            }
        }
        Ok((w, w + b))
    }

    /// Records the logits for a `(B, N1, N2, C)` batch.
    pub fn logits_on_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let mut p = params.iter();
        let mut next = |what: &str| p.next().copied().ok_or_else(|| invalid(format!("missing {what} parameter")));
        for layer in &self.layers {
            h = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let k = next("kernel")?;
                    let b = next("bias")?;
                    let y = tape.push(crate::autodiff::Op::Conv2d(h, k, ConvGeom::square(stride, pad)))?;
                    let s = tape.value(y).shape().to_vec();
                    let flat = tape.reshape(y, &[s[0] * s[1] * s[2], s[3]])?;
                    let biased = tape.add_row(flat, b)?;
                    tape.reshape(biased, &s)?
                }
                LayerSpec::Pool(g) => tape.push(crate::autodiff::Op::Pool(h, g))?,
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::Tanh => tape.tanh(h)?,
                LayerSpec::Flatten => {
                    let s = tape.value(h).shape().to_vec();
                    tape.reshape(h, &[s[0], s[1..].iter().product()])?
                }
                LayerSpec::Dense { .. } => {
                    let w = next("dense weight")?;
                    let b = next("dense bias")?;
                    let y = tape.matmul(h, w)?;
                    tape.add_row(y, b)?
                }
            };
        }
        Ok(h)
    }

    /// Class probabilities for each image of a batch.
    pub fn forward_batch(&self, params: &[Tensor], batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(batch.clone());
        let logits = self.logits_on_tape(&mut tape, &vars, x)?;
        Ok(softmax_rows(tape.value(logits)))
    }

    pub fn forward(&self, params: &[Tensor], image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_batch(params, &image.batched())?.into_data())
    }
}

/// Labelled image batch: images `(B, N1, N2, C)` with integer class labels.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Filled (class 0) and hollow (class 1) squares on an `n x n` canvas, alternating classes.
pub fn squares_dataset(count: usize, n: usize, rng: &mut Rng) -> Result<ImageDataset> {
    if n < 4 {
        return Err(invalid("canvas must be at least 4 pixels"));
    }
    let mut data = vec![0.0; count * n * n];
    let mut labels = Vec::with_capacity(count);
    for s in 0..count {
        let label = s % 2;
        let side = 3 + rng.below(n - 3);
        let i0 = rng.below(n - side + 1);
        let j0 = rng.below(n - side + 1);
        for i in i0..i0 + side {
            for j in j0..j0 + side {
                let edge = i == i0 || j == j0 || i == i0 + side - 1 || j == j0 + side - 1;
                if label == 0 || edge {
                    data[(s * n + i) * n + j] = 1.0;
                }
            }
        }
        labels.push(label);
    }
    Ok(ImageDataset {
        images: Tensor::new(vec![count, n, n, 1], data)?,
        labels,
    })
}

/// Mean cross-entropy of softmax(logits) against integer labels, recorded on the tape.
pub fn cross_entropy_logits(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = tape.value(logits).dims2()?;
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(invalid("labels do not match logits"));
    }
    let mut onehot = Tensor::zeros(&[b, k]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(&[i, l], 1.0);
    }
    let y = tape.constant(onehot);
    let logp = log_softmax_rows(tape, logits)?;
    let prod = tape.mul(y, logp)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f64)
}

#[derive(Debug, Clone)]
pub struct CnnTrainReport {
    pub params: Vec<Tensor>,
    pub loss_history: Vec<f64>,
    pub accuracy_history: Vec<f64>,
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let k = probs.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = &probs.data()[i * k..(i + 1) * k];
            let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Full-batch Adam on the cross-entropy loss.
pub fn cnn_train(spec: &CnnSpec, data: &ImageDataset, epochs: usize, lr: f64, seed: u64) -> Result<CnnTrainReport> {
    if data.labels.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut rng = Rng::new(seed);
    let mut params = spec.init(&mut rng)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), lr, Schedule::Constant);
    let mut loss_history = Vec::with_capacity(epochs);
    let mut accuracy_history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.constant(data.images.clone());
        let logits = spec.logits_on_tape(&mut tape, &vars, x)?;
        let loss = cross_entropy_logits(&mut tape, logits, &data.labels)?;
        tape.set_tip(loss);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step: epoch,
                what: "cross-entropy".into(),
            });
        }
        accuracy_history.push(accuracy(&softmax_rows(tape.value(logits)), &data.labels));
        loss_history.push(lv);
        let grads = tape.backward_scalar()?;
        let g: Vec<Tensor> = vars.iter().zip(&params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
        opt.step(&mut params, &g)?;
    }
    Ok(CnnTrainReport {
        params,
        loss_history,
        accuracy_history,
    })
}
