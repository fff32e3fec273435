//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every intermediate [`Tensor`] produced during a forward
//! pass together with the op that made it. [`Graph::backward`] walks the tape
//! in reverse creation order, which is a valid topological order because
//! every op only references earlier nodes.

pub mod check;
pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    AdaIn {
        x: Var,
        mean: Var,
        std: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        floored: Vec<bool>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    ConcatBatch(Vec<Var>),
    Reshape(Var),
    RowCosine {
        a: Var,
        b: Var,
        eps: T,
    },
    LogSoftmax(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing requires a gradient and no
    /// backward buffers are kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    /// `log(sigmoid(x))`, computed stably.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        let sp = self.softplus(neg);
        self.scale(sp, -T::one())
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_usize(t.len().max(1)).unwrap();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// `x @ w^T + b` with `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {:?} vs weight {:?}", xs, ws)));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!("linear: bias {:?} for {} outputs", self.shape(b), dout)));
            }
        }
        let mut y = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            T::one(),
            &mut y,
            (dout as isize, 1),
        );
        let value = Tensor::from_vec(&[n, dout], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution, NCHW input, `(out, in, k, k)` square kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d: input {:?} vs weight {:?}", xs, ws)));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel {:?} does not fit input {:?}", ws, xs)))?;
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!("conv2d: bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let y = kernels::conv_forward(
            &cols,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[geom.n, geom.out, geom.ho, geom.wo], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let cols = if rg && self.grad_enabled { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample2x: expected NCHW, got {:?}", s)));
        }
        let y = kernels::upsample2x(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::from_vec(&[s[0], s[1], 2 * s[2], 2 * s[3]], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool: expected NCHW, got {:?}", s)));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let y = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[s[0], s[1]], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Adaptive instance normalization: re-normalize each `(n, c)` plane of
    /// `x` to the target `mean[n, c]` and `std[n, c]`. Content statistics are
    /// population statistics with the standard deviation floored at `eps`.
    pub fn adain(&mut self, x: Var, mean: Var, std: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("adain: expected NCHW content, got {:?}", s)));
        }
        for (name, v) in [("mean", mean), ("std", std)] {
            if self.shape(v) != [s[0], s[1]] {
                return Err(Error::shape(format!(
                    "adain: style {name} {:?} does not match content {:?}",
                    self.shape(v),
                    s
                )));
            }
        }
        let fwd = kernels::adain_forward(
            self.value(x).data(),
            self.value(mean).data(),
            self.value(std).data(),
            s[0] * s[1],
            s[2] * s[3],
            eps,
        );
        let value = Tensor::from_vec(&s, fwd.y)?;
        let rg = self.rg(&[x, mean, std]);
        let keep = rg && self.grad_enabled;
        Ok(self.push(
            value,
            Op::AdaIn {
                x,
                mean,
                std,
                xhat: if keep { fwd.xhat } else { Vec::new() },
                inv_std: fwd.inv_std,
                floored: fwd.floored,
            },
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow: {}..{} on axis {} of {:?}",
                start,
                start + len,
                axis,
                s
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            y.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let value = Tensor::from_vec(&shape, y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_batch(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatBatch(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row-wise cosine similarity of two `(N, D)` matrices:
    /// `<a, b> / sqrt(max(|a|^2 |b|^2, eps^2))`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        same_shape("row_cosine", self.value(a), self.value(b))?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("row_cosine: expected (N, D), got {:?}", s)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let y = (0..s[0])
            .map(|i| {
                let (ra, rb) = (av.row(i), bv.row(i));
                let (dot, saa, sbb) = row_moments(ra, rb);
                dot / (saa * sbb).max(eps * eps).sqrt()
            })
            .collect();
        let value = Tensor::from_vec(&[s[0]], y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::RowCosine { a, b, eps }, rg))
    }

    /// Row-wise log-softmax of `(N, K)` logits.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape(format!("log_softmax: expected (N, K), got {:?}", s)));
        }
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_mut(s[1]) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_vec(&s, y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// `y[i] = x[i, idx[i]]` for an `(N, K)` input.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape(format!("gather: {} indices for {:?}", idx.len(), s)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::config(format!("index {bad} out of range for {} classes", s[1])));
        }
        let xv = self.value(x);
        let y = idx.iter().enumerate().map(|(i, &k)| xv.row(i)[k]).collect();
        let value = Tensor::from_vec(&[s[0]], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// Gradients of the scalar `root` with respect to every upstream node
    /// that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = Tensor::from_vec(self.shape(v), data).expect("gradient shape");
        self.accum(grads, v, t);
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum_vec(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                self.accum_vec(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.accum_vec(grads, *a, gd.iter().zip(av).map(|(&g, &x)| g * x.signum()).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * *slope })
                    .collect();
                self.accum_vec(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                let d = gd.iter().zip(yv).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accum_vec(grads, *a, d);
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                let d = gd.iter().zip(av).map(|(&g, &x)| g * sigmoid(x)).collect();
                self.accum_vec(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                    .collect();
                self.accum_vec(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len().max(1)).unwrap();
                let s = g.item() / n;
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        gd,
                        (dout as isize, 1),
                        self.value(*w).data(),
                        (din as isize, 1),
                        T::zero(),
                        &mut dx,
                        (din as isize, 1),
                    );
                    self.accum_vec(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        gd,
                        (1, dout as isize),
                        self.value(*x).data(),
                        (din as isize, 1),
                        T::zero(),
                        &mut dw,
                        (din as isize, 1),
                    );
                    self.accum_vec(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum_vec(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cg = kernels::conv_backward(gd, cols, self.value(*w).data(), geom, self.requires_grad(*x));
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    kernels::col2im(&cg.dcols, geom, &mut dx);
                    self.accum_vec(grads, *x, dx);
                }
                self.accum_vec(grads, *w, cg.dweight);
                if let Some(b) = b {
                    self.accum_vec(grads, *b, cg.dbias);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let dx = kernels::upsample2x_backward(gd, s[0] * s[1], s[2], s[3]);
                self.accum_vec(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(hw * gd.len());
                for &v in gd {
                    dx.extend(std::iter::repeat(v * inv).take(hw));
                }
                self.accum_vec(grads, *x, dx);
            }
            Op::AdaIn {
                x,
                mean,
                std,
                xhat,
                inv_std,
                floored,
            } => {
                let s = self.shape(*x);
                let ag = kernels::adain_backward(
                    gd,
                    xhat,
                    inv_std,
                    floored,
                    self.value(*std).data(),
                    s[0] * s[1],
                    s[2] * s[3],
                );
                self.accum_vec(grads, *x, ag.dx);
                self.accum_vec(grads, *mean, ag.dmean);
                self.accum_vec(grads, *std, ag.dstd);
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum_vec(grads, *x, dx);
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accum_vec(grads, *p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                self.accum_vec(grads, *x, gd.to_vec());
            }
            Op::RowCosine { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.row_len();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..av.batch() {
                    let (ra, rb) = (av.row(i), bv.row(i));
                    let (dot, saa, sbb) = row_moments(ra, rb);
                    let prod = saa * sbb;
                    let gi = gd[i];
                    if prod > *eps * *eps {
                        let denom = prod.sqrt();
                        let cos = dot / denom;
                        for j in 0..d {
                            da[i * d + j] = gi * (rb[j] / denom - cos * ra[j] / saa);
                            db[i * d + j] = gi * (ra[j] / denom - cos * rb[j] / sbb);
                        }
                    } else {
                        for j in 0..d {
                            da[i * d + j] = gi * rb[j] / *eps;
                            db[i * d + j] = gi * ra[j] / *eps;
                        }
                    }
                }
                self.accum_vec(grads, *a, da);
                self.accum_vec(grads, *b, db);
            }
            Op::LogSoftmax(x) => {
                let k = self.shape(*x)[1];
                let yv = node.value.data();
                let mut dx = vec![T::zero(); yv.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(k).zip(yv.chunks(k)).zip(gd.chunks(k)) {
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..k {
                        dxr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.accum_vec(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let k = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (i, &c) in idx.iter().enumerate() {
                    dx[i * k + c] = gd[i];
                }
                self.accum_vec(grads, *x, dx);
            }
        }
    }
}

fn row_moments<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut saa = T::zero();
    let mut sbb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        saa += x * x;
        sbb += y * y;
    }
    (dot, saa, sbb)
}

#[cfg(test)]
mod tests {
    use super::check::{check_gradients, GradCheck};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn seq(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        t(shape, &data)
    }

    const CHECK: GradCheck = GradCheck {
        step: 1e-6,
        tolerance: 1e-6,
    };

    #[test]
    fn elementwise_chain_gradients() {
        let inputs = vec![seq(&[2, 3], 0.7), seq(&[2, 3], 1.3)];
        check_gradients(&inputs, CHECK, |g, v| {
            let s = g.sub(v[0], v[1])?;
            let m = g.mul(s, v[0])?;
            let a = g.abs(m);
            let l = g.leaky_relu(v[1], 0.2);
            let sg = g.sigmoid(l);
            let sp = g.softplus(sg);
            let sum = g.add(a, sp)?;
            Ok(g.mean(sum))
        })
        .unwrap();
    }

    #[test]
    fn linear_and_log_softmax_gradients() {
        let inputs = vec![seq(&[3, 4], 0.9), seq(&[5, 4], 0.4), seq(&[5], 2.1)];
        check_gradients(&inputs, CHECK, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let ls = g.log_softmax(y)?;
            let picked = g.gather(ls, &[0, 4, 2])?;
            Ok(g.sum(picked))
        })
        .unwrap();
    }

    #[test]
    fn conv_upsample_pool_gradients() {
        let inputs = vec![seq(&[2, 2, 5, 5], 0.3), seq(&[3, 2, 3, 3], 0.8), seq(&[3], 1.7)];
        check_gradients(&inputs, CHECK, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let u = g.upsample2x(y)?;
            let p = g.global_avg_pool(u)?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        })
        .unwrap();
    }

    #[test]
    fn adain_gradients() {
        let inputs = vec![seq(&[2, 3, 3, 3], 0.61), seq(&[2, 3], 0.2), t(&[2, 3], &[0.5, 1.0, 1.5, 0.7, 0.9, 2.0])];
        let weights = seq(&[2, 3, 3, 3], 1.9);
        check_gradients(&inputs, CHECK, |g, v| {
            let y = g.adain(v[0], v[1], v[2], 1e-5)?;
            let w = g.constant(weights.clone());
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        })
        .unwrap();
    }

    #[test]
    fn narrow_concat_cosine_gradients() {
        let inputs = vec![seq(&[3, 6], 0.45), seq(&[2, 3], 1.1)];
        check_gradients(&inputs, CHECK, |g, v| {
            let left = g.narrow(v[0], 1, 0, 3)?;
            let right = g.narrow(v[0], 1, 3, 3)?;
            let top = g.narrow(left, 0, 0, 2)?;
            let both = g.concat_batch(&[top, v[1]])?;
            let rows = g.narrow(right, 0, 1, 2)?;
            let rows = g.concat_batch(&[rows, v[1]])?;
            let c = g.row_cosine(both, rows, 1e-8)?;
            Ok(g.sum(c))
        })
        .unwrap();
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn inference_graph_tracks_no_gradients() {
        let mut g = Graph::<f32>::inference();
        let x = g.param(Tensor::full(&[2], 1.0));
        let s = g.sum(x);
        assert!(!g.requires_grad(s));
        assert!(g.backward(s).unwrap().get(x).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        assert!(g.linear(a, w, None).is_err());
        let m = g.constant(Tensor::zeros(&[2, 3]));
        let img = g.constant(Tensor::zeros(&[2, 4, 2, 2]));
        assert!(g.adain(img, m, m, 1e-5).is_err());
    }
}
