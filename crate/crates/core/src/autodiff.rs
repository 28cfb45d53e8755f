//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order. [`Graph::backward`] walks the nodes from
//! the loss down to index 0 and visits each node at most once.
//!
//! All reductions run sequentially in a fixed order; identical inputs give
//! bitwise-identical values and gradients.

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Relu(Var),
    MatMul(Var, Var),
    GraphMix(Var, Var),
    ChannelMix(Var, Var),
    TemporalConv {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MeanPool(Var),
    AddBias(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var: Vec<T>,
}

/// Gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
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
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a node, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    /// Resets leaf gradients to absent.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Hadamard product, an alias of [`Graph::mul`].
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mul(a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err(format!(
                "scale_by expects a scalar factor, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Right-multiplies the trailing joint axis of `x` by a `V×V` matrix:
    /// `out[.., w] = Σ_v x[.., v] · a[v, w]`.
    pub fn graph_mix(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        let v = *sx.last().unwrap_or(&0);
        if sa.len() != 2 || sa[0] != v || sa[1] != v {
            return Err(dim_err(format!(
                "graph_mix: features {sx:?} incompatible with adjacency {sa:?}"
            )));
        }
        let rows = self.value(x).numel() / v;
        let mut out = vec![T::zero(); rows * v];
        kernels::matmul_acc(self.value(x).data(), self.value(a).data(), &mut out, rows, v, v);
        let out = Tensor::new(sx.to_vec(), out)?;
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(out, Op::GraphMix(x, a), rg))
    }

    /// Per-position channel mixing: `w: [C_out×C_in]`, `x: [N×C_in×...]`.
    pub fn channel_mix(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() < 2 || sw[1] != sx[1] {
            return Err(dim_err(format!(
                "channel_mix: weight {sw:?} incompatible with input {sx:?}"
            )));
        }
        let (co, ci, n) = (sw[0], sw[1], sx[0]);
        let len: usize = sx[2..].iter().product();
        let mut shape = sx.to_vec();
        shape[1] = co;
        let mut out = vec![T::zero(); n * co * len];
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        for b in 0..n {
            kernels::matmul_acc(
                wd,
                &xd[b * ci * len..(b + 1) * ci * len],
                &mut out[b * co * len..(b + 1) * co * len],
                co,
                ci,
                len,
            );
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(out, Op::ChannelMix(w, x), rg))
    }

    /// Temporal convolution with symmetric zero padding `(k_t-1)/2`.
    ///
    /// `x` is `[N×C_in×T×V]` (or unbatched `[C_in×T×V]`), `kernel` is
    /// `[C_out×C_in×k_t]`; the output has `ceil(T/stride)` frames.
    pub fn temporal_conv(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 3 {
            return Err(dim_err(format!("temporal_conv: kernel shape {sk:?} is not rank 3")));
        }
        if sk[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel size must be odd, got {}",
                sk[2]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("temporal stride must be at least 1".into()));
        }
        let sx = self.shape(x).to_vec();
        let (n, dims) = match sx.len() {
            4 => (sx[0], [sx[1], sx[2], sx[3]]),
            3 => (1, [sx[0], sx[1], sx[2]]),
            _ => return Err(dim_err(format!("temporal_conv: input shape {sx:?}"))),
        };
        let [ci, t, v] = dims;
        if sk[1] != ci {
            return Err(dim_err(format!(
                "temporal_conv: kernel {sk:?} expects {} input channels, input is {sx:?}",
                sk[1]
            )));
        }
        let geo = kernels::ConvGeometry {
            n,
            c_in: ci,
            c_out: sk[0],
            t_in: t,
            t_out: t.div_ceil(stride),
            joints: v,
            k: sk[2],
            stride,
        };
        let mut out = vec![T::zero(); n * geo.c_out * geo.t_out * v];
        kernels::temporal_conv_forward(&geo, self.value(x).data(), self.value(kernel).data(), &mut out);
        let shape = if sx.len() == 4 {
            vec![n, geo.c_out, geo.t_out, v]
        } else {
            vec![geo.c_out, geo.t_out, v]
        };
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(out, Op::TemporalConv { x, kernel, stride }, rg))
    }

    /// Training-mode batch normalization over every axis except axis 1.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, len) = self.bn_geometry(x, gamma, beta)?;
        let xd = self.value(x).data();
        let m = n * len;
        let eps = T::of(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * len..(b * c + ch + 1) * len] {
                    s += v;
                }
            }
            let mu = s / T::of(m as f64);
            let mut q = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * len..(b * c + ch + 1) * len] {
                    let d = v - mu;
                    q += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = q / T::of(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = if m > 1 {
            var.iter().map(|&v| v * T::of(m as f64) / T::of((m - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true, n, c, len)?;
        Ok((out, stats))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (n, c, len) = self.bn_geometry(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(dim_err("batchnorm_eval: running statistics length mismatch"));
        }
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, &inv_std, false, n, c, len)
    }

    fn bn_geometry(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(dim_err(format!("batchnorm: input shape {sx:?} lacks a channel axis")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(format!(
                "batchnorm: {c} channels but scale {:?} and shift {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((sx[0], c, sx[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        n: usize,
        c: usize,
        len: usize,
    ) -> Result<Var> {
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * len;
                for i in off..off + len {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            rg,
        ))
    }

    /// Mean over every axis after axis 1: `[N×C×...] -> [N×C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 3 {
            return Err(dim_err(format!("mean_pool: input shape {sx:?} has no pooled axes")));
        }
        let (n, c) = (sx[0], sx[1]);
        let len: usize = sx[2..].iter().product();
        let inv = T::one() / T::of(len as f64);
        let xd = self.value(x).data();
        let data = (0..n * c)
            .map(|r| {
                let mut s = T::zero();
                for &v in &xd[r * len..(r + 1) * len] {
                    s += v;
                }
                s * inv
            })
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanPool(x), rg))
    }

    /// Adds a bias vector to every row of a `[N×d]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(dim_err(format!("add_bias: input {sx:?} with bias {sb:?}")));
        }
        let d = sx[1];
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Row-wise softmax of a `[n×c]` matrix, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows_geometry(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            kernels::softmax_in_place(&mut out[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise log-softmax of a `[n×c]` matrix.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rows_geometry(x, "log_softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            kernels::log_softmax_in_place(&mut out[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    fn rows_geometry(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err(format!("{what}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Leaf gradients accumulate across calls; interior gradients are
    /// recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        acc(&mut self.grads, loss, self.nodes[loss.0].value.numel(), |g| {
            g[0] += T::one();
        });
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let numel = |v: Var| nodes[v.0].value.numel();
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if rg(v) {
                        acc(grads, v, numel(v), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    acc(grads, *a, numel(*a), |d| add_into(d, g));
                }
                if rg(*b) {
                    acc(grads, *b, numel(*b), |d| {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x -= *y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let other = val(*b);
                    acc(grads, *a, numel(*a), |d| {
                        for ((x, y), o) in d.iter_mut().zip(g).zip(other) {
                            *x += *y * *o;
                        }
                    });
                }
                if rg(*b) {
                    let other = val(*a);
                    acc(grads, *b, numel(*b), |d| {
                        for ((x, y), o) in d.iter_mut().zip(g).zip(other) {
                            *x += *y * *o;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, numel(*a), |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += *y * c;
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                if rg(*a) {
                    acc(grads, *a, numel(*a), |d| {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += *y * c;
                        }
                    });
                }
                if rg(*s) {
                    let mut t = T::zero();
                    for (y, x) in g.iter().zip(val(*a)) {
                        t += *y * *x;
                    }
                    acc(grads, *s, 1, |d| d[0] += t);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(grads, *a, numel(*a), |d| {
                    for ((dx, y), xv) in d.iter_mut().zip(g).zip(x) {
                        if *xv > T::zero() {
                            *dx += *y;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let bv = val(*b);
                    acc(grads, *a, m * k, |d| kernels::matmul_acc_bt(g, bv, d, m, n, k));
                }
                if rg(*b) {
                    let av = val(*a);
                    acc(grads, *b, k * n, |d| kernels::matmul_acc_at(av, g, d, m, k, n));
                }
            }
            Op::GraphMix(x, a) => {
                let v = nodes[a.0].value.shape()[0];
                let rows = numel(*x) / v;
                if rg(*x) {
                    let av = val(*a);
                    acc(grads, *x, rows * v, |d| kernels::matmul_acc_bt(g, av, d, rows, v, v));
                }
                if rg(*a) {
                    let xv = val(*x);
                    acc(grads, *a, v * v, |d| kernels::matmul_acc_at(xv, g, d, rows, v, v));
                }
            }
            Op::ChannelMix(w, x) => {
                let sw = nodes[w.0].value.shape();
                let (co, ci) = (sw[0], sw[1]);
                let sx = nodes[x.0].value.shape();
                let n = sx[0];
                let len: usize = sx[2..].iter().product();
                if rg(*w) {
                    let xv = val(*x);
                    acc(grads, *w, co * ci, |d| {
                        for b in 0..n {
                            kernels::matmul_acc_bt(
                                &g[b * co * len..(b + 1) * co * len],
                                &xv[b * ci * len..(b + 1) * ci * len],
                                d,
                                co,
                                len,
                                ci,
                            );
                        }
                    });
                }
                if rg(*x) {
                    let wv = val(*w);
                    acc(grads, *x, n * ci * len, |d| {
                        for b in 0..n {
                            kernels::matmul_acc_at(
                                wv,
                                &g[b * co * len..(b + 1) * co * len],
                                &mut d[b * ci * len..(b + 1) * ci * len],
                                co,
                                ci,
                                len,
                            );
                        }
                    });
                }
            }
            Op::TemporalConv { x, kernel, stride } => {
                let sx = nodes[x.0].value.shape();
                let sk = nodes[kernel.0].value.shape();
                let (n, dims) = if sx.len() == 4 {
                    (sx[0], [sx[1], sx[2], sx[3]])
                } else {
                    (1, [sx[0], sx[1], sx[2]])
                };
                let geo = kernels::ConvGeometry {
                    n,
                    c_in: dims[0],
                    c_out: sk[0],
                    t_in: dims[1],
                    t_out: dims[1].div_ceil(*stride),
                    joints: dims[2],
                    k: sk[2],
                    stride: *stride,
                };
                if rg(*x) {
                    let kv = val(*kernel);
                    acc(grads, *x, numel(*x), |d| kernels::temporal_conv_grad_input(&geo, g, kv, d));
                }
                if rg(*kernel) {
                    let xv = val(*x);
                    acc(grads, *kernel, numel(*kernel), |d| {
                        kernels::temporal_conv_grad_kernel(&geo, g, xv, d)
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let sx = nodes[x.0].value.shape();
                let (n, c) = (sx[0], sx[1]);
                let len: usize = sx[2..].iter().product();
                let gd = val(*gamma);
                // per-channel Σ dy and Σ dy·x̂
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * len;
                        for i in off..off + len {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if rg(*gamma) {
                    acc(grads, *gamma, c, |d| add_into(d, &sum_dy_xhat));
                }
                if rg(*beta) {
                    acc(grads, *beta, c, |d| add_into(d, &sum_dy));
                }
                if rg(*x) {
                    let m = T::of((n * len) as f64);
                    let batch_stats = *batch_stats;
                    acc(grads, *x, n * c * len, |d| {
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * len;
                                let k = gd[ch] * inv_std[ch];
                                for i in off..off + len {
                                    if batch_stats {
                                        d[i] += k
                                            * (g[i]
                                                - sum_dy[ch] / m
                                                - xhat[i] * sum_dy_xhat[ch] / m);
                                    } else {
                                        d[i] += k * g[i];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::MeanPool(x) => {
                let len = numel(*x) / g.len();
                let inv = T::one() / T::of(len as f64);
                acc(grads, *x, numel(*x), |d| {
                    for (r, gv) in g.iter().enumerate() {
                        let s = *gv * inv;
                        for dv in &mut d[r * len..(r + 1) * len] {
                            *dv += s;
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let d_len = numel(*b);
                if rg(*x) {
                    acc(grads, *x, numel(*x), |d| add_into(d, g));
                }
                if rg(*b) {
                    acc(grads, *b, d_len, |d| {
                        for (i, gv) in g.iter().enumerate() {
                            d[i % d_len] += *gv;
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                let y = nodes[i].value.data();
                let c = nodes[i].value.shape()[1];
                acc(grads, *x, numel(*x), |d| {
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let mut dot = T::zero();
                        for j in row.clone() {
                            dot += g[j] * y[j];
                        }
                        for j in row {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let y = nodes[i].value.data();
                let c = nodes[i].value.shape()[1];
                acc(grads, *x, numel(*x), |d| {
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let mut gs = T::zero();
                        for j in row.clone() {
                            gs += g[j];
                        }
                        for j in row {
                            d[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                acc(grads, *x, numel(*x), |d| {
                    for v in d.iter_mut() {
                        *v += s;
                    }
                });
            }
            Op::Reshape(x) => {
                acc(grads, *x, numel(*x), |d| add_into(d, g));
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += *y;
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, numel: usize, f: impl FnOnce(&mut [T])) {
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
    f(buf);
}
