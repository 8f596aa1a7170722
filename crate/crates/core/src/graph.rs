//! Reverse-mode automatic differentiation over a flat computation record.
//!
//! A [`Graph`] is an append-only list of nodes. Nodes are pushed in the order
//! their values are computed, so the list is already topologically sorted and
//! [`Graph::backward`] walks it from the end.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive application recorded in the graph.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
    Scale(f64),
    Sum,
    Mean,
    /// `[m,k] x [k,n]`.
    MatMul,
    /// `x [N,I]`, `w [O,I]`, optional `b [O]`: `x w^T + b`.
    Linear,
    Sigmoid,
    Tanh,
    Relu,
    Conv2d { stride: usize, padding: usize },
    /// `[N,C,H,W] -> [N,C]`.
    GlobalAvgPool,
    MaxPool { size: usize, stride: usize },
    /// `[N,C,H,W] -> [C]` mean over batch and spatial axes.
    ChannelMean,
    /// `[N,C,H,W] -> [C]` biased variance over batch and spatial axes.
    ChannelVar,
    /// `x [N,C,..]`, `scale [C]`, `shift [C]`.
    ChannelAffine,
    /// Fused training-mode batch norm of `x`, `gamma`, `beta`. An optional
    /// `[N,C]` 0/1 mask restricts which examples feed each channel's statistics.
    BatchNorm { eps: f64, mask: Option<Vec<f64>> },
    /// `g [N,C]`, `a`, `b` `[N,C,..]`: per-(example, channel) `g*a + (1-g)*b`.
    ChannelMix,
    /// Hard threshold at 0.5 (inclusive). Backward is identity when
    /// `straight_through`, otherwise exactly zero.
    Threshold { straight_through: bool },
    Reshape(Vec<usize>),
    /// Mean softmax cross-entropy of `[N,K]` logits against class labels.
    CrossEntropy { labels: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::ChannelMean => "channel_mean",
            Op::ChannelVar => "channel_var",
            Op::ChannelAffine => "channel_affine",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelMix => "channel_mix",
            Op::Threshold { .. } => "threshold",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Saved {
    Nothing,
    Stats(BatchStats),
    Indices(Vec<usize>),
    Probs(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    saved: Saved,
}

/// Computation record: the values of every node plus how each was produced.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    visits: Vec<usize>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<alloc::string::String>) -> Error {
    Error::InvalidShape {
        op,
        reason: reason.into(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel output matches shape")
}

/// `[N,C,rest..]` split as `(N, C, prod(rest))`.
fn nc_rest(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(invalid(op, format!("expected at least [N,C], got {s:?}")));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn rank4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(invalid(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let [n, c, h, wd] = rank4(x, "conv2d")?;
    let [o, ci, kh, kw] = rank4(w, "conv2d")?;
    if ci != c || kh != kw {
        return Err(mismatch("conv2d", x, w));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    let g = ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: wd,
        out_channels: o,
        kernel: kh,
        stride,
        padding,
    };
    if g.output_hw().is_none() {
        return Err(invalid(
            "conv2d",
            format!(
                "non-positive output size for input {:?}, filters {:?}, stride {stride}, padding {padding}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    Ok(g)
}

fn forward(op: &Op, ins: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let unary = |f: fn(f64) -> f64| tensor(ins[0].shape(), ins[0].data().iter().map(|&v| f(v)).collect());
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op.name(), a, b));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            tensor(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        }
        Op::Scale(c) => tensor(ins[0].shape(), ins[0].data().iter().map(|v| c * v).collect()),
        Op::Sum => Tensor::scalar(ins[0].data().iter().sum()),
        Op::Mean => Tensor::scalar(ins[0].data().iter().sum::<f64>() / ins[0].len() as f64),
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    tensor(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))
                }
                _ => return Err(mismatch("matmul", a, b)),
            }
        }
        Op::Linear => {
            let (x, w) = (ins[0], ins[1]);
            let (n, i, o) = match (x.shape(), w.shape()) {
                (&[n, i], &[o, i2]) if i == i2 => (n, i, o),
                _ => return Err(mismatch("linear", x, w)),
            };
            let mut y = kernels::matmul_bt(x.data(), w.data(), n, i, o);
            if let Some(b) = ins.get(2) {
                if b.shape() != [o] {
                    return Err(mismatch("linear", w, b));
                }
                for row in y.chunks_mut(o) {
                    row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
                }
            }
            tensor(&[n, o], y)
        }
        Op::Sigmoid => unary(sigmoid),
        Op::Tanh => unary(libm::tanh),
        Op::Relu => unary(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Conv2d { stride, padding } => {
            let g = conv_geometry(ins[0], ins[1], *stride, *padding)?;
            let (oh, ow) = g.output_hw().expect("checked");
            tensor(
                &[g.batch, g.out_channels, oh, ow],
                kernels::conv2d_forward(&g, ins[0].data(), ins[1].data()),
            )
        }
        Op::GlobalAvgPool => {
            let [n, c, h, w] = rank4(ins[0], "global_avg_pool")?;
            let hw = h * w;
            let data = ins[0]
                .data()
                .chunks(hw)
                .map(|p| p.iter().sum::<f64>() / hw as f64)
                .collect();
            tensor(&[n, c], data)
        }
        Op::MaxPool { size, stride } => {
            let [n, c, h, w] = rank4(ins[0], "max_pool")?;
            if *size == 0 || *stride == 0 || *size > h || *size > w {
                return Err(invalid("max_pool", format!("window {size}/{stride} does not fit {h}x{w}")));
            }
            let (out, arg) = kernels::max_pool_forward(ins[0].data(), n, c, h, w, *size, *stride);
            let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
            return Ok((tensor(&[n, c, oh, ow], out), Saved::Indices(arg)));
        }
        Op::ChannelMean | Op::ChannelVar => {
            let [n, c, h, w] = rank4(ins[0], op.name())?;
            let (mean, var, _) = kernels::channel_stats(ins[0].data(), n, c, h * w, None);
            tensor(&[c], if *op == Op::ChannelMean { mean } else { var })
        }
        Op::ChannelAffine => {
            let (x, scale, shift) = (ins[0], ins[1], ins[2]);
            let (n, c, rest) = nc_rest(x, "channel_affine")?;
            if scale.shape() != [c] {
                return Err(mismatch("channel_affine", x, scale));
            }
            if shift.shape() != [c] {
                return Err(mismatch("channel_affine", x, shift));
            }
            let mut y = x.data().to_vec();
            for b in 0..n {
                for ch in 0..c {
                    let (s, t) = (scale.data()[ch], shift.data()[ch]);
                    for v in &mut y[(b * c + ch) * rest..(b * c + ch + 1) * rest] {
                        *v = s * *v + t;
                    }
                }
            }
            tensor(x.shape(), y)
        }
        Op::BatchNorm { eps, mask } => {
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            let [n, c, h, w] = rank4(x, "batch_norm")?;
            if gamma.shape() != [c] {
                return Err(mismatch("batch_norm", x, gamma));
            }
            if beta.shape() != [c] {
                return Err(mismatch("batch_norm", x, beta));
            }
            if n * h * w < 2 {
                return Err(Error::DegenerateBatch {
                    values_per_channel: n * h * w,
                });
            }
            if let Some(m) = mask {
                if m.len() != n * c {
                    return Err(invalid("batch_norm", format!("mask has {} entries, expected {}", m.len(), n * c)));
                }
            }
            let (y, stats) = kernels::batch_norm_forward(
                x.data(),
                gamma.data(),
                beta.data(),
                n,
                c,
                h * w,
                *eps,
                mask.as_deref(),
            );
            return Ok((tensor(x.shape(), y), Saved::Stats(stats)));
        }
        Op::ChannelMix => {
            let (g, a, b) = (ins[0], ins[1], ins[2]);
            if a.shape() != b.shape() {
                return Err(mismatch("channel_mix", a, b));
            }
            let (n, c, rest) = nc_rest(a, "channel_mix")?;
            if g.shape() != [n, c] {
                return Err(mismatch("channel_mix", g, a));
            }
            let mut y = vec![0.0; a.len()];
            for (idx, &gv) in g.data().iter().enumerate() {
                let r = idx * rest..(idx + 1) * rest;
                if gv == 1.0 {
                    y[r.clone()].copy_from_slice(&a.data()[r]);
                } else if gv == 0.0 {
                    y[r.clone()].copy_from_slice(&b.data()[r]);
                } else {
                    for i in r {
                        y[i] = gv * a.data()[i] + (1.0 - gv) * b.data()[i];
                    }
                }
            }
            tensor(a.shape(), y)
        }
        Op::Threshold { .. } => unary(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != ins[0].len() || shape.contains(&0) {
                return Err(invalid("reshape", format!("{:?} cannot become {shape:?}", ins[0].shape())));
            }
            tensor(shape, ins[0].data().to_vec())
        }
        Op::CrossEntropy { labels } => {
            let z = ins[0];
            let (n, k) = match *z.shape() {
                [n, k] => (n, k),
                ref s => return Err(invalid("cross_entropy", format!("expected [N,K] logits, got {s:?}"))),
            };
            if labels.len() != n {
                return Err(invalid("cross_entropy", format!("{} labels for {n} rows", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
            }
            let mut probs = vec![0.0; n * k];
            let mut loss = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = &z.data()[r * k..(r + 1) * k];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = libm::exp(v - mx);
                    probs[r * k + j] = e;
                    s += e;
                }
                probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= s);
                loss += mx + libm::log(s) - row[label];
            }
            return Ok((Tensor::scalar(loss / n as f64), Saved::Probs(probs)));
        }
    };
    Ok((out, Saved::Nothing))
}

/// Vector-Jacobian products of one node; `need[i]` says whether input `i` wants a gradient.
fn backward_node(node: &Node, ins: &[&Tensor], dy: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; ins.len()];
    let y = node.value.data();
    let mut put = |i: usize, f: &mut dyn FnMut() -> Vec<f64>| {
        if need[i] {
            out[i] = Some(f());
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            put(0, &mut || dy.to_vec());
            put(1, &mut || dy.to_vec());
        }
        Op::Sub => {
            put(0, &mut || dy.to_vec());
            put(1, &mut || dy.iter().map(|g| -g).collect());
        }
        Op::Mul => {
            put(0, &mut || dy.iter().zip(ins[1].data()).map(|(g, b)| g * b).collect());
            put(1, &mut || dy.iter().zip(ins[0].data()).map(|(g, a)| g * a).collect());
        }
        Op::Scale(c) => put(0, &mut || dy.iter().map(|g| c * g).collect()),
        Op::Sum => put(0, &mut || vec![dy[0]; ins[0].len()]),
        Op::Mean => put(0, &mut || vec![dy[0] / ins[0].len() as f64; ins[0].len()]),
        Op::MatMul => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[1];
            put(0, &mut || kernels::matmul_bt(dy, ins[1].data(), m, n, k));
            put(1, &mut || kernels::matmul_at(ins[0].data(), dy, m, k, n));
        }
        Op::Linear => {
            let (n, i) = (ins[0].shape()[0], ins[0].shape()[1]);
            let o = ins[1].shape()[0];
            put(0, &mut || kernels::matmul(dy, ins[1].data(), n, o, i));
            put(1, &mut || kernels::matmul_at(dy, ins[0].data(), n, o, i));
            if ins.len() > 2 {
                put(2, &mut || {
                    let mut db = vec![0.0; o];
                    for row in dy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    db
                });
            }
        }
        Op::Sigmoid => put(0, &mut || dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
        Op::Tanh => put(0, &mut || dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
        Op::Relu => put(0, &mut || {
            dy.iter()
                .zip(ins[0].data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect()
        }),
        Op::Conv2d { stride, padding } => {
            let g = conv_geometry(ins[0], ins[1], *stride, *padding).expect("validated in forward");
            put(0, &mut || kernels::conv2d_backward_input(&g, dy, ins[1].data()));
            put(1, &mut || kernels::conv2d_backward_filter(&g, dy, ins[0].data()));
        }
        Op::GlobalAvgPool => put(0, &mut || {
            let hw = ins[0].len() / dy.len();
            dy.iter().flat_map(|&g| core::iter::repeat_n(g / hw as f64, hw)).collect()
        }),
        Op::MaxPool { .. } => put(0, &mut || {
            let Saved::Indices(arg) = &node.saved else { unreachable!() };
            let mut dx = vec![0.0; ins[0].len()];
            for (g, &i) in dy.iter().zip(arg) {
                dx[i] += g;
            }
            dx
        }),
        Op::ChannelMean | Op::ChannelVar => put(0, &mut || {
            let s = ins[0].shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let m = (n * hw) as f64;
            let means = if node.op == Op::ChannelVar {
                kernels::channel_stats(ins[0].data(), n, c, hw, None).0
            } else {
                Vec::new()
            };
            let mut dx = vec![0.0; ins[0].len()];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dx[i] = if node.op == Op::ChannelMean {
                            dy[ch] / m
                        } else {
                            dy[ch] * 2.0 * (ins[0].data()[i] - means[ch]) / m
                        };
                    }
                }
            }
            dx
        }),
        Op::ChannelAffine => {
            let s = ins[0].shape();
            let (n, c) = (s[0], s[1]);
            let rest: usize = s[2..].iter().product();
            let x = ins[0].data();
            put(0, &mut || {
                let mut dx = dy.to_vec();
                for b in 0..n {
                    for ch in 0..c {
                        let sc = ins[1].data()[ch];
                        dx[(b * c + ch) * rest..(b * c + ch + 1) * rest].iter_mut().for_each(|v| *v *= sc);
                    }
                }
                dx
            });
            let per_channel = |weighted: bool| {
                let mut acc = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * rest..(b * c + ch + 1) * rest {
                            acc[ch] += if weighted { dy[i] * x[i] } else { dy[i] };
                        }
                    }
                }
                acc
            };
            put(1, &mut || per_channel(true));
            put(2, &mut || per_channel(false));
        }
        Op::BatchNorm { mask, .. } => {
            let Saved::Stats(stats) = &node.saved else { unreachable!() };
            let s = ins[0].shape();
            let (dx, dg, db) = kernels::batch_norm_backward(
                ins[0].data(),
                ins[1].data(),
                stats,
                dy,
                s[0],
                s[1],
                s[2] * s[3],
                mask.as_deref(),
            );
            out[0] = need[0].then_some(dx);
            out[1] = need[1].then_some(dg);
            out[2] = need[2].then_some(db);
        }
        Op::ChannelMix => {
            let gv = ins[0].data();
            let rest = ins[1].len() / gv.len();
            put(0, &mut || {
                gv.iter()
                    .enumerate()
                    .map(|(idx, _)| {
                        (idx * rest..(idx + 1) * rest)
                            .map(|i| dy[i] * (ins[1].data()[i] - ins[2].data()[i]))
                            .sum()
                    })
                    .collect()
            });
            put(1, &mut || dy.iter().enumerate().map(|(i, g)| g * gv[i / rest]).collect());
            put(2, &mut || dy.iter().enumerate().map(|(i, g)| g * (1.0 - gv[i / rest])).collect());
        }
        Op::Threshold { straight_through } => put(0, &mut || {
            if *straight_through {
                dy.to_vec()
            } else {
                vec![0.0; dy.len()]
            }
        }),
        Op::Reshape(_) => put(0, &mut || dy.to_vec()),
        Op::CrossEntropy { labels } => put(0, &mut || {
            let Saved::Probs(p) = &node.saved else { unreachable!() };
            let n = labels.len();
            let k = p.len() / n;
            let mut dz = p.clone();
            for (r, &l) in labels.iter().enumerate() {
                dz[r * k + l] -= 1.0;
            }
            dz.iter_mut().for_each(|v| *v *= dy[0] / n as f64);
            dz
        }),
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor; it receives gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            inputs: Vec::new(),
            saved: Saved::Nothing,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Removes and returns the gradient accumulated on `v`.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Clears every gradient accumulator in the record.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Records `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let (mut value, saved) = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &ins)?
        };
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.to_vec(),
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    /// Fully connected layer `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::Linear, &[x, w, b]),
            None => self.apply(Op::Linear, &[x, w]),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn conv2d(&mut self, x: Var, filters: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, filters])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn max_pool(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        self.apply(Op::MaxPool { size, stride }, &[x])
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::ChannelMean, &[x])
    }

    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::ChannelVar, &[x])
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.apply(Op::ChannelAffine, &[x, scale, shift])
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, mask: Option<Vec<f64>>) -> Result<Var> {
        self.apply(Op::BatchNorm { eps, mask }, &[x, gamma, beta])
    }

    /// Batch statistics `(mean, biased variance)` saved by a batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].saved {
            Saved::Stats(s) => Some((&s.mean, &s.var)),
            _ => None,
        }
    }

    pub fn channel_mix(&mut self, g: Var, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::ChannelMix, &[g, a, b])
    }

    pub fn threshold(&mut self, x: Var, straight_through: bool) -> Result<Var> {
        self.apply(Op::Threshold { straight_through }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        if let [_, 0] = self.shape(logits) {
            return Err(invalid("cross_entropy", "class count must be positive"));
        }
        self.apply(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Back-propagates from the scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate nodes hold the
    /// gradient of the most recent pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        self.visits.clear();
        let end = loss.0 + 1;
        let mut reach = vec![false; end];
        reach[loss.0] = self.nodes[loss.0].value.requires_grad;
        for i in (0..end).rev() {
            if reach[i] {
                for inp in &self.nodes[i].inputs {
                    if self.nodes[inp.0].value.requires_grad {
                        reach[inp.0] = true;
                    }
                }
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..end).rev() {
            if !reach[i] {
                continue;
            }
            self.visits.push(i);
            let node = &self.nodes[i];
            if node.op == Op::Leaf {
                continue;
            }
            let dy = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
            let need: Vec<bool> = node.inputs.iter().map(|v| reach[v.0]).collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contributions = backward_node(node, &ins, &dy, &need);
            for (inp, g) in node.inputs.iter().zip(contributions) {
                if let Some(g) = g {
                    match &mut grads[inp.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(dy);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if !reach[i] {
                continue;
            }
            let node = &mut self.nodes[i];
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            if node.op != Op::Leaf {
                node.value.zero_grad();
            }
            node.value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Node indices visited by the most recent [`Graph::backward`], in visit order.
    pub fn backward_visits(&self) -> &[usize] {
        &self.visits
    }

    /// Re-evaluates every recorded op from its stored inputs and returns the
    /// first node whose recomputed value differs bitwise, if any.
    pub fn replay(&self) -> Result<Option<usize>> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op == Op::Leaf {
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let (value, saved) = forward(&node.op, &ins)?;
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
                && saved == node.saved;
            if !same {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }

    /// First non-leaf node whose output has a NaN or infinity while all its inputs are finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let finite = |t: &Tensor| t.data().iter().all(|v| v.is_finite());
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (n.op != Op::Leaf
                && !finite(&n.value)
                && n.inputs.iter().all(|v| finite(&self.nodes[v.0].value)))
            .then(|| (i, n.op.name()))
        })
    }
}
