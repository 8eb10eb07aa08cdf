//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it once in reverse.
//!
//! Gradients accumulate on leaf nodes only. Calling `backward` twice without
//! [`Graph::zero_grad`] in between doubles every leaf gradient.
//!
//! Broadcasting is limited to one-element tensors against anything.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations selectable through [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Scale(Var, f64),
    Sum(Var),
    Slice {
        a: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Column {
        a: Var,
        col: usize,
    },
    AvgPool2(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowMean(Var),
    NllPick {
        dist: Var,
        index: usize,
        floor: f64,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations plus accumulated leaf gradients.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    clamp_hits: usize,
}

/// Result shape of a binary op with scalar broadcast, or an error.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

#[inline]
fn at(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

fn add_into(buf: &mut Vec<Option<Vec<f64>>>, idx: usize, len: usize) -> &mut Vec<f64> {
    buf[idx].get_or_insert_with(|| vec![0.0; len])
}

/// Accumulates `g` into the gradient of an operand that may have been broadcast.
fn acc_broadcast(buf: &mut Vec<Option<Vec<f64>>>, idx: usize, len: usize, g: impl Iterator<Item = f64>) {
    let dst = add_into(buf, idx, len);
    if len == 1 {
        dst[0] += g.sum::<f64>();
    } else {
        for (d, v) in dst.iter_mut().zip(g) {
            *d += v;
        }
    }
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

    /// Drops every node from index `len` on. Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an input tensor. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of probability lookups that hit the log floor in [`Graph::nll_pick`].
    pub fn clamp_hits(&self) -> usize {
        self.clamp_hits
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || Error::ShapeMismatch {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        let (m, k) = match ta.shape() {
            [m, k] => (*m, *k),
            _ => return Err(err()),
        };
        let (k2, n, out_shape) = match tb.shape() {
            [k2, n] => (*k2, *n, vec![m, *n]),
            [k2] => (*k2, 1, vec![m]),
            _ => return Err(err()),
        };
        if k != k2 {
            return Err(err());
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// 2-D cross-correlation with zero padding over a `[c_in, h, w]` input.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernels));
        let err = || Error::ShapeMismatch {
            op: "conv2d",
            left: ti.shape().to_vec(),
            right: tk.shape().to_vec(),
        };
        let (cin, h, w) = match ti.shape() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(err()),
        };
        let (cout, kc, kh, kw) = match tk.shape() {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            _ => return Err(err()),
        };
        if kc != cin || kh != kw || stride == 0 {
            return Err(err());
        }
        let k = kh;
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(err());
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let (id, kd) = (ti.data(), tk.data());
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let dst = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let plane = &id[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kd[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d += wv * src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, kernels]);
        Ok(self.push(
            Tensor::new(vec![cout, oh, ow], out)?,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta, tb)?;
        let n: usize = shape.iter().product::<usize>().max(1);
        let (ad, bd) = (ta.data(), tb.data());
        let out = (0..n).map(|i| f(at(ad, i), at(bd, i))).collect();
        Ok((Tensor::new(shape, out)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> (Tensor, bool) {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        (t, self.nodes[a.0].requires_grad)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (t, rg) = self.unary(a, math::sigmoid);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (t, rg) = self.unary(a, math::tanh);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (t, rg) = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (t, rg) = self.unary(a, |x| x * factor);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Dispatches one of the pointwise primitives by kind.
    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::LengthMismatch {
                what: "elementwise arguments",
                expected: arity,
                actual: args.len(),
            });
        }
        Ok(match kind {
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Add => self.add(args[0], args[1])?,
            Elementwise::Mul => self.mul(args[0], args[1])?,
        })
    }

    /// Softmax over all entries, computed after subtracting the maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = softmax_values(ta.data())?;
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Contiguous range `[start, start + len)` of the flattened data, as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.numel() {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: ta.numel(),
            });
        }
        let t = Tensor::vector(ta.data()[start..start + len].to_vec());
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(t, Op::Slice { a, start }, rg))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat inputs"))?;
        let tail: Vec<usize> = self.value(*first).shape().iter().skip(1).copied().collect();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let shape = t.shape();
            let (l, rest) = match shape.split_first() {
                Some((l, rest)) => (*l, rest),
                None => (1, &[][..]),
            };
            if rest != tail.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.value(*first).shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            lead += l;
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Column `col` of a matrix; multiplying by a one-hot vector, without the product.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = match ta.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "column",
                    left: s.to_vec(),
                    right: Vec::new(),
                })
            }
        };
        if col >= c {
            return Err(Error::IndexOutOfRange { index: col, len: c });
        }
        let data = (0..r).map(|i| ta.data()[i * c + col]).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::vector(data), Op::Column { a, col }, rg))
    }

    /// 2x2 average pooling with stride 2 over `[c, h, w]`; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (c, h, w) = match ta.shape() {
            [c, h, w] if *h >= 2 && *w >= 2 => (*c, *h, *w),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "avg_pool2",
                    left: s.to_vec(),
                    right: vec![2, 2],
                })
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let d = ta.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let i = base + 2 * y * w + 2 * x;
                    out[(ch * oh + y) * ow + x] = 0.25 * (d[i] + d[i + 1] + d[i + w] + d[i + w + 1]);
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool2(a), rg))
    }

    /// Per-channel `(x - mean) * inv_std * scale + shift` over `[c, ...]` with fixed statistics.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var, mean: &[f64], inv_std: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().first().ok_or(Error::Empty("channel_affine input"))?;
        let (ts, tb) = (self.value(scale), self.value(shift));
        if ts.numel() != c || tb.numel() != c || mean.len() != c || inv_std.len() != c {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                left: tx.shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let per = tx.numel() / c;
        let mut out = Vec::with_capacity(tx.numel());
        for ch in 0..c {
            let (s, b) = (ts.data()[ch] * inv_std[ch], tb.data()[ch]);
            let m = mean[ch];
            out.extend(tx.data()[ch * per..(ch + 1) * per].iter().map(|&v| (v - m) * s + b));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            t,
            Op::ChannelAffine {
                x,
                scale,
                shift,
                mean: mean.to_vec(),
                inv_std: inv_std.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over every axis but the first: `[c, ...] -> [c]`, summed left to right.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = match ta.shape() {
            [c, _, ..] => *c,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "row_mean",
                    left: s.to_vec(),
                    right: Vec::new(),
                })
            }
        };
        let out = row_means(ta.data(), c);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::vector(out), Op::RowMean(a), rg))
    }

    /// `-ln(max(dist[index], floor))` as a scalar. Floor hits are counted.
    pub fn nll_pick(&mut self, dist: Var, index: usize, floor: f64) -> Result<Var> {
        let td = self.value(dist);
        if index >= td.numel() {
            return Err(Error::IndexOutOfRange {
                index,
                len: td.numel(),
            });
        }
        let p = td.data()[index];
        if p < floor {
            self.clamp_hits += 1;
        }
        let v = -math::ln(p.max(floor));
        let rg = self.nodes[dist.0].requires_grad;
        Ok(self.push(Tensor::scalar(v), Op::NllPick { dist, index, floor }, rg))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "bce targets",
                expected: tl.numel(),
                actual: targets.len(),
            });
        }
        let v = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| math::softplus(z) - y * z)
            .sum();
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(v),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(invalid(format!(
                "backward: seed must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let Graph { nodes, grads, .. } = self;
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let need = |v: &Var| nodes[v.0].requires_grad;
            let numel = |v: &Var| nodes[v.0].value.numel();
            match &node.op {
                Op::Leaf => {
                    let dst = grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    if need(a) {
                        // dA = dY · Bᵀ
                        let da = add_into(&mut tmp, a.0, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if need(b) {
                        // dB = Aᵀ · dY
                        let db = add_into(&mut tmp, b.0, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let ti = &nodes[input.0].value;
                    let tk = &nodes[kernels.0].value;
                    let (cin, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                    let (cout, k) = (tk.shape()[0], tk.shape()[2]);
                    let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                    let (stride, padding) = (*stride, *padding);
                    let (need_i, need_k) = (need(input), need(kernels));
                    let mut di = if need_i { Some(vec![0.0; ti.numel()]) } else { None };
                    let mut dk = if need_k { Some(vec![0.0; tk.numel()]) } else { None };
                    let (id, kd) = (ti.data(), tk.data());
                    for co in 0..cout {
                        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let kidx = ((co * cin + ci) * k + ky) * k + kx;
                                    let wv = kd[kidx];
                                    let mut acc = 0.0;
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let row = (ci * h + iy as usize) * w;
                                        for ox in 0..ow {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let gv = gplane[oy * ow + ox];
                                            let src = row + ix as usize;
                                            acc += gv * id[src];
                                            if let Some(di) = di.as_mut() {
                                                di[src] += gv * wv;
                                            }
                                        }
                                    }
                                    if let Some(dk) = dk.as_mut() {
                                        dk[kidx] += acc;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(di) = di {
                        acc_broadcast(&mut tmp, input.0, di.len(), di.into_iter());
                    }
                    if let Some(dk) = dk {
                        acc_broadcast(&mut tmp, kernels.0, dk.len(), dk.into_iter());
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if need(a) {
                        acc_broadcast(&mut tmp, a.0, numel(a), g.iter().copied());
                    }
                    if need(b) {
                        acc_broadcast(&mut tmp, b.0, numel(b), g.iter().map(|v| sign * v));
                    }
                }
                Op::Mul(a, b) => {
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    if need(a) {
                        let it = g.iter().enumerate().map(|(i, gv)| gv * at(bd, i));
                        acc_broadcast(&mut tmp, a.0, numel(a), it);
                    }
                    if need(b) {
                        let it = g.iter().enumerate().map(|(i, gv)| gv * at(ad, i));
                        acc_broadcast(&mut tmp, b.0, numel(b), it);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let it = g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s));
                    acc_broadcast(&mut tmp, a.0, numel(a), it);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let it = g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t));
                    acc_broadcast(&mut tmp, a.0, numel(a), it);
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    let it = g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 });
                    acc_broadcast(&mut tmp, a.0, numel(a), it);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    let it = g.iter().zip(y).map(|(gv, yv)| yv * (gv - dot));
                    acc_broadcast(&mut tmp, a.0, numel(a), it);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    acc_broadcast(&mut tmp, a.0, numel(a), g.iter().map(|v| v * f));
                }
                Op::Sum(a) => {
                    let n = numel(a);
                    let dst = add_into(&mut tmp, a.0, n);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Slice { a, start } => {
                    let dst = add_into(&mut tmp, a.0, numel(a));
                    for (d, v) in dst[*start..*start + g.len()].iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = numel(p);
                        if need(p) {
                            let dst = add_into(&mut tmp, p.0, n);
                            for (d, v) in dst.iter_mut().zip(&g[off..off + n]) {
                                *d += v;
                            }
                        }
                        off += n;
                    }
                }
                Op::Reshape(a) => {
                    acc_broadcast(&mut tmp, a.0, numel(a), g.iter().copied());
                }
                Op::Column { a, col } => {
                    let c = nodes[a.0].value.shape()[1];
                    let dst = add_into(&mut tmp, a.0, numel(a));
                    for (i, v) in g.iter().enumerate() {
                        dst[i * c + col] += v;
                    }
                }
                Op::AvgPool2(a) => {
                    let s = nodes[a.0].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let dst = add_into(&mut tmp, a.0, c * h * w);
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = 0.25 * g[(ch * oh + y) * ow + x];
                                let i = ch * h * w + 2 * y * w + 2 * x;
                                dst[i] += gv;
                                dst[i + 1] += gv;
                                dst[i + w] += gv;
                                dst[i + w + 1] += gv;
                            }
                        }
                    }
                }
                Op::ChannelAffine {
                    x,
                    scale,
                    shift,
                    mean,
                    inv_std,
                } => {
                    let c = mean.len();
                    let xd = nodes[x.0].value.data();
                    let sd = nodes[scale.0].value.data();
                    let per = xd.len() / c;
                    if need(x) {
                        let dst = add_into(&mut tmp, x.0, xd.len());
                        for ch in 0..c {
                            let f = sd[ch] * inv_std[ch];
                            for j in ch * per..(ch + 1) * per {
                                dst[j] += g[j] * f;
                            }
                        }
                    }
                    if need(scale) {
                        let dst = add_into(&mut tmp, scale.0, c);
                        for ch in 0..c {
                            dst[ch] += (ch * per..(ch + 1) * per)
                                .map(|j| g[j] * (xd[j] - mean[ch]) * inv_std[ch])
                                .sum::<f64>();
                        }
                    }
                    if need(shift) {
                        let dst = add_into(&mut tmp, shift.0, c);
                        for ch in 0..c {
                            dst[ch] += g[ch * per..(ch + 1) * per].iter().sum::<f64>();
                        }
                    }
                }
                Op::RowMean(a) => {
                    let n = numel(a);
                    let c = g.len();
                    let per = n / c;
                    let dst = add_into(&mut tmp, a.0, n);
                    for ch in 0..c {
                        let v = g[ch] / per as f64;
                        dst[ch * per..(ch + 1) * per].iter_mut().for_each(|d| *d += v);
                    }
                }
                Op::NllPick { dist, index, floor } => {
                    let p = nodes[dist.0].value.data()[*index];
                    let dst = add_into(&mut tmp, dist.0, numel(dist));
                    // The floor flattens the function, so clamped entries get no slope.
                    if p >= *floor {
                        dst[*index] -= g[0] / p;
                    }
                }
                Op::BceLogits { logits, targets } => {
                    let z = nodes[logits.0].value.data();
                    let dst = add_into(&mut tmp, logits.0, z.len());
                    for ((d, &zv), &y) in dst.iter_mut().zip(z).zip(targets) {
                        *d += g[0] * (math::sigmoid(zv) - y);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Max-subtracted softmax of a slice.
pub fn softmax_values(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| math::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Row means of a `[rows, n / rows]` buffer, each summed left to right.
pub fn row_means(data: &[f64], rows: usize) -> Vec<f64> {
    let per = data.len() / rows;
    (0..rows)
        .map(|r| data[r * per..(r + 1) * per].iter().sum::<f64>() / per as f64)
        .collect()
}
