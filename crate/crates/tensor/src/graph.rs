//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its nodes. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and [`Graph::backward`] simply walks it in reverse.

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvDims};
use crate::scalar::Scalar;
use crate::tensor::{permuted_shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and batch-statistics layers run in training mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum NormStats<'a, S> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [S], var: &'a [S] },
}

/// One recorded primitive: kind, input nodes, and whatever the backward rule
/// needs beyond the input and output values already held on the tape.
#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias { x: Var, bias: Var, axis: usize },
    MatMul { a: Var, b: Var, nb: usize, m: usize, k: usize, n: usize, shared: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    Depthwise { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Dropout { x: Var, mask: Vec<S> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, ph: usize, pw: usize },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax(Var),
    Unfold { x: Var, kt: usize, kf: usize },
    Fold { x: Var, kt: usize, kf: usize },
    Sum(Var),
    Mean(Var),
    /// Gradient routes: (output index, input index, weight).
    Median { x: Var, routes: Vec<(usize, usize, S)> },
    Norm { x: Var, axis: usize },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Dropout { .. } => "dropout",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Softmax(_) => "softmax_last",
            Op::Unfold { .. } => "unfold",
            Op::Fold { .. } => "fold",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Median { .. } => "median",
            Op::Norm { .. } => "norm",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Computation graph confined to one worker.
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    mode: Mode,
    backward_done: bool,
}

const NORM_EPS: f64 = 1e-5;

fn sqrt_2_over_pi<S: Scalar>() -> S {
    S::lit(std::f64::consts::FRAC_2_SQRT_PI / std::f64::consts::SQRT_2)
}

impl<S: Scalar> Graph<S> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            backward_done: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var> {
        value.check_finite(op.name())?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Insert a tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<Var> {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, mut t: Tensor<S>) -> Result<Var> {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor<S>) -> Result<Var> {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let t = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Add a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(shape_err("add_bias", format!("[{}]", shape.get(axis).copied().unwrap_or(0)), self.shape(bias)));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % ext])
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias, axis }, ng)
    }

    /// Batched matrix product over the last two axes. `b` may be 2-D, in
    /// which case it is shared across all leading batch axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", "rank >= 2", &sa));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if kb != k || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", format!("[.., {k}, _] compatible with {sa:?}"), &sb));
        }
        let nb: usize = sa[..sa.len() - 2].iter().product();
        let data = kernels::matmul(self.data(a), self.data(b), nb, m, k, n, shared);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data)?, Op::MatMul { a, b, nb, m, k, n, shared }, ng)
    }

    /// `x[..., in] @ w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let y = if sx.len() == 1 {
            let x2 = self.reshape(x, &[1, sx[0]])?;
            let y2 = self.matmul(x2, w)?;
            let n = self.shape(y2)[1];
            self.reshape(y2, &[n])?
        } else {
            self.matmul(x, w)?
        };
        match b {
            Some(b) => {
                let last = self.shape(y).len() - 1;
                self.add_bias(y, b, last)
            }
            None => Ok(y),
        }
    }

    fn conv_dims(&self, op: &'static str, x: Var, w: Var, depthwise: bool) -> Result<ConvDims> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err(op, "x [B,C,H,W] and w [Co,Ci,kh,kw]", sx));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(TensorError::Invalid { op, msg: format!("kernel {:?} must have odd extents", &sw[2..]) });
        }
        let expected_ci = if depthwise { 1 } else { sx[1] };
        if sw[1] != expected_ci || (depthwise && sw[0] != sx[1]) {
            return Err(shape_err(op, format!("weight compatible with input {sx:?}"), sw));
        }
        Ok(ConvDims { batch: sx[0], c_in: sx[1], c_out: sw[0], h: sx[2], w: sx[3], kh: sw[2], kw: sw[3] })
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, c: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(shape_err(op, format!("bias [{c}]"), self.shape(b)));
            }
        }
        Ok(())
    }

    /// Stride-1 convolution with zero padding preserving H x W (odd kernels).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = self.conv_dims("conv2d", x, w, false)?;
        self.check_bias("conv2d", b, dims.c_out)?;
        let data = kernels::conv2d(self.data(x), self.data(w), b.map(|b| self.data(b)), dims);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let shape = vec![dims.batch, dims.c_out, dims.h, dims.w];
        self.push(Tensor::new(shape, data)?, Op::Conv2d { x, w, b, dims }, ng)
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = self.conv_dims("depthwise_conv2d", x, w, true)?;
        self.check_bias("depthwise_conv2d", b, dims.c_in)?;
        let data = kernels::depthwise_conv2d(self.data(x), self.data(w), b.map(|b| self.data(b)), dims);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Depthwise { x, w, b, dims }, ng)
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`. With
    /// [`NormStats::Batch`] the returned statistics are the biased batch
    /// mean and variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, S>,
    ) -> Result<(Var, Option<(Vec<S>, Vec<S>)>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", "[B, C, ...]", &shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", format!("affine [{c}]"), self.shape(gamma)));
        }
        let eps = S::lit(NORM_EPS);
        let xd = self.data(x);
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let n = S::lit((b * l) as f64);
                let mut mean = kernels::channel_sum(xd, b, c, l);
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![S::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let m = mean[ci];
                        var[ci] += xd[(bi * c + ci) * l..(bi * c + ci + 1) * l]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<S>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", format!("running stats [{c}]"), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut xhat = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ci = (i / l) % c;
            *xh = (v - mean[ci]) * inv_std[ci];
            *o = g[ci] * *xh + be[ci];
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            ng,
        )?;
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("affine [{d}]"), self.shape(gamma)));
        }
        let eps = S::lit(NORM_EPS);
        let dn = S::lit(d as f64);
        let xd = self.data(x);
        let g = self.data(gamma);
        let be = self.data(beta);
        let rows = xd.len() / d;
        let mut xhat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + be[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > S::zero() { v } else { S::zero() })
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = S::lit(0.5);
        let r2 = S::lit(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(x, Op::Gelu(x), move |v| half * v * (S::one() + (v * r2).erf()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Inverted dropout. Identity in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::Invalid { op: "dropout", msg: format!("rate {p} must be < 1") });
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    fn pool_dims(&self, op: &'static str, x: Var, ph: usize, pw: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(op, "rank >= 2", s));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if ph == 0 || h % ph != 0 {
            return Err(TensorError::Indivisible { op, axis: "time", extent: h, kernel: ph });
        }
        if pw == 0 || w % pw != 0 {
            return Err(TensorError::Indivisible { op, axis: "frequency", extent: w, kernel: pw });
        }
        Ok((s.len(), h, w))
    }

    /// Max pool over the last two axes with kernel == stride. The
    /// subgradient goes to the first maximal element of each window.
    pub fn max_pool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let (nd, h, w) = self.pool_dims("max_pool2d", x, ph, pw)?;
        if ph == 1 && pw == 1 {
            return Ok(x);
        }
        let n = self.value(x).numel() / (h * w);
        let (data, argmax) = kernels::max_pool(self.data(x), n, h, w, ph, pw);
        let mut shape = self.shape(x).to_vec();
        shape[nd - 2] = h / ph;
        shape[nd - 1] = w / pw;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data)?, Op::MaxPool { x, argmax }, ng)
    }

    pub fn avg_pool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let (nd, h, w) = self.pool_dims("avg_pool2d", x, ph, pw)?;
        if ph == 1 && pw == 1 {
            return Ok(x);
        }
        let n = self.value(x).numel() / (h * w);
        let data = kernels::avg_pool(self.data(x), n, h, w, ph, pw);
        let mut shape = self.shape(x).to_vec();
        shape[nd - 2] = h / ph;
        shape[nd - 1] = w / pw;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data)?, Op::AvgPool { x, ph, pw }, ng)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = permuted_shape(self.shape(x), axes)?;
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(x);
        }
        let data = kernels::permute(self.data(x), self.shape(x), axes);
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data)?, Op::Permute { x, axes: axes.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis < {}", first.len()), &first));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(shape_err("concat", format!("{first:?} except axis {axis}"), s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let len = *self.shape(x).last().expect("rank >= 1");
        let data = kernels::softmax_rows(self.data(x), len);
        let ng = self.ng(x);
        self.push(Tensor::new(self.shape(x).to_vec(), data)?, Op::Softmax(x), ng)
    }

    fn unfold_dims(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err(op, "[B, C, T, F]", s));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn unfold(&mut self, x: Var, kt: usize, kf: usize) -> Result<Var> {
        let [b, c, t, f] = self.unfold_dims("unfold", x)?;
        check_divisible("unfold", t, kt, f, kf)?;
        let data = kernels::unfold(self.data(x), [b, c, t, f], kt, kf);
        let ng = self.ng(x);
        self.push(Tensor::new(vec![b, c * kt * kf, t / kt, f / kf], data)?, Op::Unfold { x, kt, kf }, ng)
    }

    pub fn fold(&mut self, x: Var, kt: usize, kf: usize) -> Result<Var> {
        let [b, ck, gt, gf] = self.unfold_dims("fold", x)?;
        if kt == 0 || kf == 0 || ck % (kt * kf) != 0 {
            return Err(TensorError::Indivisible { op: "fold", axis: "channel", extent: ck, kernel: kt * kf });
        }
        let dims = [b, ck / (kt * kf), gt * kt, gf * kf];
        let data = kernels::fold(self.data(x), dims, kt, kf);
        let ng = self.ng(x);
        self.push(Tensor::new(dims.to_vec(), data)?, Op::Fold { x, kt, kf }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::lit(self.value(x).numel() as f64);
        let s = self.value(x).sum() / n;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Median along `axis` (mean of the two middle values for even counts).
    pub fn median(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("median", format!("axis < {}", shape.len()), &shape));
        }
        let (out_shape, routes, data) = median_along(self.data(x), &shape, axis);
        let ng = self.ng(x);
        self.push(Tensor::new(out_shape, data)?, Op::Median { x, routes }, ng)
    }

    /// Euclidean norm along `axis`; the axis is removed from the shape
    /// (a rank-1 input yields shape `[1]`).
    pub fn norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("norm", format!("axis < {}", shape.len()), &shape));
        }
        let (out_shape, data) = norm_along(self.data(x), &shape, axis);
        let ng = self.ng(x);
        self.push(Tensor::new(out_shape, data)?, Op::Norm { x, axis }, ng)
    }

    /// Populate gradients of `loss` (a single-element node) with respect to
    /// every node on a path from a differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Usage("backward called twice without zero_grad".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.propagate(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Clear gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the node value; zeros if the node received none.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad congruent with value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &[S]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let name = op.name();
        let mut out: Vec<(Var, Vec<S>)> = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                out.push((a, g.iter().zip(db).map(|(&gv, &y)| gv * y).collect()));
                out.push((b, g.iter().zip(da).map(|(&gv, &x)| gv * x).collect()));
            }
            Op::Scale(x, c) => out.push((x, g.iter().map(|&v| v * c).collect())),
            Op::AddBias { x, bias, axis } => {
                let shape = self.shape(x);
                let inner: usize = shape[axis + 1..].iter().product();
                let ext = shape[axis];
                let mut gb = vec![S::zero(); ext];
                for (j, &gv) in g.iter().enumerate() {
                    gb[(j / inner) % ext] += gv;
                }
                out.push((x, g.to_vec()));
                out.push((bias, gb));
            }
            Op::MatMul { a, b, nb, m, k, n, shared } => {
                let (da, db) = (self.data(a), self.data(b));
                if self.ng(a) {
                    // dA = dC B^T
                    let bt = if shared {
                        kernels::transpose_last2(db, 1, k, n)
                    } else {
                        kernels::transpose_last2(db, nb, k, n)
                    };
                    out.push((a, kernels::matmul(g, &bt, nb, m, n, k, shared)));
                }
                if self.ng(b) {
                    // dB = A^T dC
                    if shared {
                        let at = kernels::transpose_last2(da, 1, nb * m, k);
                        out.push((b, kernels::matmul(&at, g, 1, k, nb * m, n, false)));
                    } else {
                        let at = kernels::transpose_last2(da, nb, m, k);
                        out.push((b, kernels::matmul(&at, g, nb, k, m, n, false)));
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                if self.ng(x) {
                    out.push((x, kernels::conv2d_grad_input(g, self.data(w), dims)));
                }
                if self.ng(w) {
                    out.push((w, kernels::conv2d_grad_weight(g, self.data(x), dims)));
                }
                if let Some(b) = b {
                    out.push((b, kernels::channel_sum(g, dims.batch, dims.c_out, dims.h * dims.w)));
                }
            }
            Op::Depthwise { x, w, b, dims } => {
                if self.ng(x) {
                    out.push((x, kernels::depthwise_grad_input(g, self.data(w), dims)));
                }
                if self.ng(w) {
                    out.push((w, kernels::depthwise_grad_weight(g, self.data(x), dims)));
                }
                if let Some(b) = b {
                    out.push((b, kernels::channel_sum(g, dims.batch, dims.c_in, dims.h * dims.w)));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.shape(x);
                let (b, c) = (shape[0], shape[1]);
                let l: usize = shape[2..].iter().product();
                let gam = self.data(gamma);
                let gxh: Vec<S> = g.iter().zip(&xhat).map(|(&a, &h)| a * h).collect();
                let sum_g = kernels::channel_sum(g, b, c, l);
                let sum_gxh = kernels::channel_sum(&gxh, b, c, l);
                let gx: Vec<S> = if batch_stats {
                    let n = S::lit((b * l) as f64);
                    g.iter()
                        .zip(&xhat)
                        .enumerate()
                        .map(|(j, (&gv, &h))| {
                            let ci = (j / l) % c;
                            gam[ci] * inv_std[ci] / n * (n * gv - sum_g[ci] - h * sum_gxh[ci])
                        })
                        .collect()
                } else {
                    g.iter().enumerate().map(|(j, &gv)| {
                        let ci = (j / l) % c;
                        gam[ci] * inv_std[ci] * gv
                    }).collect()
                };
                out.push((x, gx));
                out.push((gamma, sum_gxh));
                out.push((beta, sum_g));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(x).last().expect("rank >= 1");
                let dn = S::lit(d as f64);
                let gam = self.data(gamma);
                let mut gx = vec![S::zero(); g.len()];
                let mut gg = vec![S::zero(); d];
                let mut gb = vec![S::zero(); d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        s1 += dxh;
                        s2 += dxh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        gx[r * d + j] = is / dn * (dn * dxh - s1 - hr[j] * s2);
                    }
                }
                out.push((x, gx));
                out.push((gamma, gg));
                out.push((beta, gb));
            }
            Op::Relu(x) => {
                let d = self.data(x);
                out.push((x, g.iter().zip(d).map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() }).collect()));
            }
            Op::Gelu(x) => {
                let d = self.data(x);
                let half = S::lit(0.5);
                let r2 = S::lit(std::f64::consts::FRAC_1_SQRT_2);
                let c = sqrt_2_over_pi::<S>() * half;
                out.push((
                    x,
                    g.iter()
                        .zip(d)
                        .map(|(&gv, &v)| {
                            let cdf = half * (S::one() + (v * r2).erf());
                            let pdf = c * (-(v * v) * half).exp();
                            gv * (cdf + v * pdf)
                        })
                        .collect(),
                ));
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                out.push((x, g.iter().zip(y).map(|(&gv, &t)| gv * (S::one() - t * t)).collect()));
            }
            Op::Dropout { x, mask } => out.push((x, g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect())),
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![S::zero(); self.value(x).numel()];
                for (&gv, &a) in g.iter().zip(&argmax) {
                    gx[a] += gv;
                }
                out.push((x, gx));
            }
            Op::AvgPool { x, ph, pw } => {
                let s = self.shape(x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (h / ph, w / pw);
                let scale = S::one() / S::lit((ph * pw) as f64);
                let mut gx = vec![S::zero(); self.value(x).numel()];
                for (j, v) in gx.iter_mut().enumerate() {
                    let n = j / (h * w);
                    let (y, xx) = ((j / w) % h, j % w);
                    *v = g[(n * oh + y / ph) * ow + xx / pw] * scale;
                }
                out.push((x, gx));
            }
            Op::Permute { x, axes } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                out.push((x, kernels::permute(g, &out_shape, &kernels::inverse_axes(&axes))));
            }
            Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(v)[axis] * inner;
                    let mut gv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    out.push((v, gv));
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let len = *self.shape(x).last().expect("rank >= 1");
                let mut gx = vec![S::zero(); y.len()];
                for ((yr, gr), gxr) in y.chunks(len).zip(g.chunks(len)).zip(gx.chunks_mut(len)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((x, gx));
            }
            Op::Unfold { x, kt, kf } => {
                let s = self.shape(x);
                out.push((x, kernels::fold(g, [s[0], s[1], s[2], s[3]], kt, kf)));
            }
            Op::Fold { x, kt, kf } => {
                let s = self.nodes[i].value.shape();
                out.push((x, kernels::unfold(g, [s[0], s[1], s[2], s[3]], kt, kf)));
            }
            Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).numel()])),
            Op::Mean(x) => {
                let n = self.value(x).numel();
                out.push((x, vec![g[0] / S::lit(n as f64); n]));
            }
            Op::Median { x, routes } => {
                let mut gx = vec![S::zero(); self.value(x).numel()];
                for (o, src, wgt) in routes {
                    gx[src] += g[o] * wgt;
                }
                out.push((x, gx));
            }
            Op::Norm { x, axis } => {
                let shape = self.shape(x).to_vec();
                let xd = self.data(x);
                let y = self.nodes[i].value.data();
                let inner: usize = shape[axis + 1..].iter().product();
                let ext = shape[axis];
                let mut gx = vec![S::zero(); xd.len()];
                for (j, o) in gx.iter_mut().enumerate() {
                    let (outer_i, inner_i) = (j / (ext * inner), j % inner);
                    let oi = outer_i * inner + inner_i;
                    if y[oi] > S::zero() {
                        *o = g[oi] * xd[j] / y[oi];
                    }
                }
                out.push((x, gx));
            }
        }
        for (v, gv) in out {
            if gv.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: name });
            }
            self.accumulate(v, gv);
        }
        Ok(())
    }
}

pub(crate) fn check_divisible(op: &'static str, t: usize, kt: usize, f: usize, kf: usize) -> Result<()> {
    if kt == 0 || t % kt != 0 {
        return Err(TensorError::Indivisible { op, axis: "time", extent: t, kernel: kt });
    }
    if kf == 0 || f % kf != 0 {
        return Err(TensorError::Indivisible { op, axis: "frequency", extent: f, kernel: kf });
    }
    Ok(())
}

type MedianParts<S> = (Vec<usize>, Vec<(usize, usize, S)>, Vec<S>);

pub(crate) fn median_along<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> MedianParts<S> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &e)| e).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let half = S::lit(0.5);
    let mut routes = Vec::new();
    let mut data = Vec::with_capacity(outer * inner);
    let mut idx: Vec<usize> = Vec::with_capacity(ext);
    for o in 0..outer {
        for n in 0..inner {
            let oi = o * inner + n;
            idx.clear();
            idx.extend((0..ext).map(|e| (o * ext + e) * inner + n));
            // stable sort keeps the lower index first among equal values
            idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite"));
            if ext % 2 == 1 {
                let m = idx[ext / 2];
                data.push(x[m]);
                routes.push((oi, m, S::one()));
            } else {
                let (a, b) = (idx[ext / 2 - 1], idx[ext / 2]);
                data.push((x[a] + x[b]) * half);
                routes.push((oi, a, half));
                routes.push((oi, b, half));
            }
        }
    }
    (out_shape, routes, data)
}

pub(crate) fn norm_along<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> (Vec<usize>, Vec<S>) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &e)| e).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut data = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for e in 0..ext {
            for n in 0..inner {
                let v = x[(o * ext + e) * inner + n];
                data[o * inner + n] += v * v;
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.sqrt());
    (out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.param(Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]).unwrap()).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let vals = [1., -2., 3., 0.5];
        let x = g.param(Tensor::from_f64(&[4], &vals).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn second_backward_is_usage_error() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.param(Tensor::ones(&[2])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::Usage(_))));
        g.zero_grad();
        g.backward(s).unwrap();
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.param(Tensor::ones(&[2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_is_hard_error() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(Tensor::from_f64(&[1], &[1e300]).unwrap()).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let c = g.constant(Tensor::ones(&[3])).unwrap();
        let x = g.param(Tensor::ones(&[3])).unwrap();
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(Tensor::ones(&[8])).unwrap();
        let mut rng = rand::thread_rng();
        assert_eq!(g.dropout(x, 0.5, &mut rng).unwrap(), x);
    }

    #[test]
    fn pool_reports_offending_axis() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(Tensor::ones(&[1, 1, 6, 4])).unwrap();
        let err = g.max_pool2d(x, 4, 2).unwrap_err();
        assert!(matches!(err, TensorError::Indivisible { axis: "time", .. }));
        let err = g.avg_pool2d(x, 2, 3).unwrap_err();
        assert!(matches!(err, TensorError::Indivisible { axis: "frequency", .. }));
    }

    #[test]
    fn median_even_and_odd() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.constant(Tensor::from_f64(&[3, 2], &[1., 4., 5., 4., 1., 9.]).unwrap()).unwrap();
        let m = g.median(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[1., 4.]);
        let y = g.constant(Tensor::from_f64(&[4], &[3., 1., 4., 2.]).unwrap()).unwrap();
        let m = g.median(y, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2.5]);
    }
}
