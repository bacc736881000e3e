//! Per-forward reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever its
//! backward rule needs. `backward` walks the nodes once in reverse
//! insertion order, which is a reverse topological order because an op can
//! only reference nodes that already exist. The tape is dropped after the
//! step; there is no persistent graph.

use std::cell::RefCell;

use super::kernels::{self, ConvGeometry};
use super::{as_matrix, broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Abs(Var),
    Upsample2x(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanFirst(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(..) => "silu",
            Op::Abs(..) => "abs",
            Op::Upsample2x(..) => "upsample2x",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MeanFirst(..) => "mean_first",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The computation tape (ordered record of primitive ops).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of a node, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        debug_assert_eq!(t.numel(), 1);
        t.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// First node holding a NaN or infinity, reported with its op index.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        match nodes.iter().position(|n| !n.value.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                op: nodes[index].op.name(),
            }),
            None => Ok(()),
        }
    }

    fn with2<T>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<T>(&self, a: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn broadcast_binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.with2(a, b, |ta, tb| {
            if ta.shape == tb.shape {
                return ta.zip_map(tb, name, &f);
            }
            let shape = broadcast_shape(&ta.shape, &tb.shape)
                .ok_or_else(|| Error::shape(name, &ta.shape, &tb.shape))?;
            let ia = broadcast_index_map(&ta.shape, &shape);
            let ib = broadcast_index_map(&tb.shape, &shape);
            let data = ia
                .iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data[i], tb.data[j]))
                .collect();
            Tensor::new(&shape, data)
        })
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.needs(&[a, b])))
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.with1(a, |t| t.scale(c));
        self.push(out, Op::Scale(a, c), self.needs(&[a]))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.with1(a, |t| t.map(|x| x + c));
        self.push(out, Op::AddScalar(a), self.needs(&[a]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |ta, tb| ta.matmul(tb))?;
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |t| t.transpose())?;
        Ok(self.push(out, Op::Transpose(a), self.needs(&[a])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with1(a, |t| t.reshape(shape))?;
        Ok(self.push(out, Op::Reshape(a), self.needs(&[a])))
    }

    pub fn flatten(&self, a: Var) -> Result<Var> {
        let n = self.with1(a, |t| t.numel());
        self.reshape(a, &[n])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self, a: Var) -> Var {
        let out = self.with1(a, |t| {
            let n = *t.shape.last().unwrap();
            let mut data = t.data.clone();
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
            Tensor {
                shape: t.shape.clone(),
                data,
            }
        });
        self.push(out, Op::Softmax(a), self.needs(&[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let out = self.with1(a, |t| {
            let n = *t.shape.last().unwrap();
            let mut data = t.data.clone();
            for row in data.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Tensor {
                shape: t.shape.clone(),
                data,
            }
        });
        self.push(out, Op::LogSoftmax(a), self.needs(&[a]))
    }

    /// Zero-padded strided cross-correlation, `[C,H,W] ⋆ [O,C,kh,kw] → [O,H',W']`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|b| &nodes[b.0].value);
            super::conv2d(&nodes[x.0].value, &nodes[w.0].value, bias, stride, padding)?
        };
        let geom = self.with2(x, w, |tx, tw| {
            ConvGeometry::new(&tx.shape, &tw.shape, stride, padding)
        })?;
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, self.needs(&deps)))
    }

    /// Group normalization of a `[C, ...]` tensor with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let c = tx.shape[0];
            if groups == 0 || c % groups != 0 {
                return Err(Error::InvalidShape {
                    op: "group_norm",
                    msg: format!("{c} channels not divisible into {groups} groups"),
                });
            }
            if tg.shape != [c] || tb.shape != [c] {
                return Err(Error::shape("group_norm", &tx.shape, &tg.shape));
            }
            let per_channel = tx.numel() / c;
            let group_len = per_channel * (c / groups);
            let mut xhat = vec![0.0; tx.numel()];
            let mut rstd = vec![0.0; groups];
            for g in 0..groups {
                let span = g * group_len..(g + 1) * group_len;
                let xs = &tx.data[span.clone()];
                let mean = xs.iter().sum::<f64>() / group_len as f64;
                let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group_len as f64;
                let r = 1.0 / (var + EPS).sqrt();
                rstd[g] = r;
                for (dst, &v) in xhat[span].iter_mut().zip(xs) {
                    *dst = (v - mean) * r;
                }
            }
            let mut out = xhat.clone();
            for ch in 0..c {
                for v in &mut out[ch * per_channel..(ch + 1) * per_channel] {
                    *v = *v * tg.data[ch] + tb.data[ch];
                }
            }
            (
                Tensor {
                    shape: tx.shape.clone(),
                    data: out,
                },
                xhat,
                rstd,
            )
        };
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        let out = self.with1(a, |t| t.map(|x| x * sigmoid(x)));
        self.push(out, Op::Silu(a), self.needs(&[a]))
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.with1(a, |t| t.map(f64::abs));
        self.push(out, Op::Abs(a), self.needs(&[a]))
    }

    /// Nearest-neighbour 2× upsampling of a `[C, H, W]` tensor.
    pub fn upsample2x(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |t| -> Result<Tensor> {
            let [c, h, w] = super::as_image("upsample2x", t)?;
            let (h2, w2) = (2 * h, 2 * w);
            let mut data = vec![0.0; c * h2 * w2];
            for ch in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        data[(ch * h2 + y) * w2 + x] = t.data[(ch * h + y / 2) * w + x / 2];
                    }
                }
            }
            Tensor::new(&[c, h2, w2], data)
        })?;
        Ok(self.push(out, Op::Upsample2x(a), self.needs(&[a])))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.with1(a, |t| Tensor::scalar(t.sum()));
        self.push(out, Op::Sum(a), self.needs(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = self.with1(a, |t| Tensor::scalar(t.mean()));
        self.push(out, Op::Mean(a), self.needs(&[a]))
    }

    /// Sum over the last axis: `[..., n] → [...]` (`[n] → [1]`).
    pub fn sum_last(&self, a: Var) -> Var {
        let out = self.with1(a, |t| {
            let n = *t.shape.last().unwrap();
            let data: Vec<f64> = t.data.chunks(n).map(|r| r.iter().sum()).collect();
            let shape = if t.rank() > 1 {
                t.shape[..t.rank() - 1].to_vec()
            } else {
                vec![1]
            };
            Tensor { shape, data }
        });
        self.push(out, Op::SumLast(a), self.needs(&[a]))
    }

    /// Mean over the last axis.
    pub fn mean_last(&self, a: Var) -> Var {
        let n = self.with1(a, |t| *t.shape.last().unwrap());
        let s = self.sum_last(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the leading axis: `[L, D] → [D]`.
    pub fn mean_first(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |t| -> Result<Tensor> {
            let (l, d) = as_matrix("mean_first", t)?;
            let mut data = vec![0.0; d];
            for row in t.data.chunks(d) {
                for (acc, v) in data.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            data.iter_mut().for_each(|v| *v /= l as f64);
            Tensor::new(&[d], data)
        })?;
        Ok(self.push(out, Op::MeanFirst(a), self.needs(&[a])))
    }

    /// Spatial mean of a `[C, H, W]` tensor, giving `[C]`.
    pub fn mean_spatial(&self, a: Var) -> Result<Var> {
        let [c, h, w] = self.with1(a, |t| super::as_image("mean_spatial", t))?;
        let flat = self.reshape(a, &[c, h * w])?;
        Ok(self.mean_last(flat))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            Tensor::concat0(&ts)?
        };
        Ok(self.push(out, Op::Concat(parts.to_vec()), self.needs(parts)))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with1(a, |t| -> Result<Tensor> {
            let lead = t.shape[0];
            if len == 0 || start + len > lead {
                return Err(Error::InvalidShape {
                    op: "narrow",
                    msg: format!("rows {start}..{} of {lead}", start + len),
                });
            }
            let inner = t.numel() / lead;
            let mut shape = t.shape.clone();
            shape[0] = len;
            Tensor::new(&shape, t.data[start * inner..(start + len) * inner].to_vec())
        })?;
        Ok(self.push(out, Op::Narrow { x: a, start }, self.needs(&[a])))
    }

    /// Scales every row of a `[B, D]` tensor to unit Euclidean norm.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let (out, norms) = self.with1(a, |t| -> Result<(Tensor, Vec<f64>)> {
            let (_, d) = as_matrix("normalize_rows", t)?;
            let mut data = t.data.clone();
            let mut norms = Vec::new();
            for (i, row) in data.chunks_mut(d).enumerate() {
                let n = kernels::dot(row, row).sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::ZeroNorm { index: i });
                }
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            Ok((
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
                norms,
            ))
        })?;
        Ok(self.push(out, Op::NormalizeRows { x: a, norms }, self.needs(&[a])))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("root must be a scalar, got {:?}", nodes[root.0].value.shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

/// Adds `g` (shaped like `out_shape`) into the gradient of `v`, summing over
/// broadcast axes.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    out_shape: &[usize],
    g: impl Iterator<Item = f64>,
) {
    let in_shape = nodes[v.0].value.shape.clone();
    accumulate(grads, nodes, v, |dst| {
        if in_shape == out_shape {
            dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
        } else {
            let map = broadcast_index_map(&in_shape, out_shape);
            for (&j, x) in map.iter().zip(g) {
                dst[j] += x;
            }
        }
    });
}

fn broadcast_values(nodes: &[Node], v: Var, out_shape: &[usize]) -> Vec<f64> {
    let t = &nodes[v.0].value;
    if t.shape == out_shape {
        t.data.clone()
    } else {
        broadcast_index_map(&t.shape, out_shape)
            .iter()
            .map(|&j| t.data[j])
            .collect()
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_broadcast(grads, nodes, *a, &out.shape, g.iter().copied());
            accumulate_broadcast(grads, nodes, *b, &out.shape, g.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate_broadcast(grads, nodes, *a, &out.shape, g.iter().copied());
            accumulate_broadcast(grads, nodes, *b, &out.shape, g.iter().map(|x| -x));
        }
        Op::Mul(a, b) => {
            if nodes[a.0].needs_grad {
                let bv = broadcast_values(nodes, *b, &out.shape);
                accumulate_broadcast(grads, nodes, *a, &out.shape, g.iter().zip(&bv).map(|(x, y)| x * y));
            }
            if nodes[b.0].needs_grad {
                let av = broadcast_values(nodes, *a, &out.shape);
                accumulate_broadcast(grads, nodes, *b, &out.shape, g.iter().zip(&av).map(|(x, y)| x * y));
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |d| {
            d.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)
        }),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, |d| {
            d.iter_mut().zip(g).for_each(|(d, x)| *d += x)
        }),
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (ta.shape[0], ta.shape[1]);
            let n = tb.shape[1];
            accumulate(grads, nodes, *a, |d| kernels::matmul_nt_acc(g, &tb.data, d, m, n, k));
            accumulate(grads, nodes, *b, |d| kernels::matmul_tn_acc(&ta.data, g, d, m, k, n));
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape[0], out.shape[1]);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] += g[i * n + j];
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let n = *out.shape.last().unwrap();
            accumulate(grads, nodes, *a, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                    let inner = kernels::dot(grow, yrow);
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += yv * (gv - inner);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape.last().unwrap();
            accumulate(grads, nodes, *a, |d| {
                for ((drow, grow), lrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    for ((dv, gv), lv) in drow.iter_mut().zip(grow).zip(lrow) {
                        *dv += gv - lv.exp() * total;
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let mut dx = nodes[x.0].needs_grad.then(|| vec![0.0; tx.numel()]);
            let mut dw = nodes[w.0].needs_grad.then(|| vec![0.0; tw.numel()]);
            let mut db = b
                .filter(|b| nodes[b.0].needs_grad)
                .map(|_| vec![0.0; geom.out_channels]);
            geom.backward(&tx.data, &tw.data, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            let add = |src: Vec<f64>| move |d: &mut [f64]| d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
            if let Some(dx) = dx {
                accumulate(grads, nodes, *x, add(dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, nodes, *w, add(dw));
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(grads, nodes, *b, add(db));
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            rstd,
        } => {
            let c = out.shape[0];
            let per_channel = out.numel() / c;
            let tg = &nodes[gamma.0].value;
            accumulate(grads, nodes, *gamma, |d| {
                for ch in 0..c {
                    let span = ch * per_channel..(ch + 1) * per_channel;
                    d[ch] += kernels::dot(&g[span.clone()], &xhat[span]);
                }
            });
            accumulate(grads, nodes, *beta, |d| {
                for ch in 0..c {
                    d[ch] += g[ch * per_channel..(ch + 1) * per_channel].iter().sum::<f64>();
                }
            });
            accumulate(grads, nodes, *x, |d| {
                let cpg = c / groups;
                let group_len = cpg * per_channel;
                for grp in 0..*groups {
                    let span = grp * group_len..(grp + 1) * group_len;
                    let dxhat: Vec<f64> = span
                        .clone()
                        .map(|i| g[i] * tg.data[i / per_channel])
                        .collect();
                    let xh = &xhat[span.clone()];
                    let mean_d = dxhat.iter().sum::<f64>() / group_len as f64;
                    let mean_dx = kernels::dot(&dxhat, xh) / group_len as f64;
                    for ((dv, dh), xv) in d[span].iter_mut().zip(&dxhat).zip(xh) {
                        *dv += rstd[grp] * (dh - mean_d - xv * mean_dx);
                    }
                }
            });
        }
        Op::Silu(a) => {
            let xs = &nodes[a.0].value.data;
            accumulate(grads, nodes, *a, |d| {
                for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(xs) {
                    let s = sigmoid(xv);
                    *dv += gv * s * (1.0 + xv * (1.0 - s));
                }
            });
        }
        Op::Abs(a) => {
            let xs = &nodes[a.0].value.data;
            accumulate(grads, nodes, *a, |d| {
                for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(xs) {
                    // Subgradient 0 at the kink.
                    *dv += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                }
            });
        }
        Op::Upsample2x(a) => {
            let (c, h2, w2) = (out.shape[0], out.shape[1], out.shape[2]);
            let (h, w) = (h2 / 2, w2 / 2);
            accumulate(grads, nodes, *a, |d| {
                for ch in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            d[(ch * h + y / 2) * w + x / 2] += g[(ch * h2 + y) * w2 + x];
                        }
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel() as f64;
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
        }
        Op::SumLast(a) => {
            let n = *nodes[a.0].value.shape.last().unwrap();
            accumulate(grads, nodes, *a, |d| {
                for (row, gv) in d.chunks_mut(n).zip(g) {
                    row.iter_mut().for_each(|v| *v += gv);
                }
            });
        }
        Op::MeanFirst(a) => {
            let (l, dim) = (nodes[a.0].value.shape[0], out.shape[0]);
            accumulate(grads, nodes, *a, |d| {
                for row in d.chunks_mut(dim) {
                    for (v, gv) in row.iter_mut().zip(g) {
                        *v += gv / l as f64;
                    }
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.numel();
                accumulate(grads, nodes, *p, |d| {
                    d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, x)| *d += x)
                });
                offset += n;
            }
        }
        Op::Narrow { x, start } => {
            let inner = out.numel() / out.shape[0];
            let off = start * inner;
            accumulate(grads, nodes, *x, |d| {
                d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, x)| *d += x)
            });
        }
        Op::NormalizeRows { x, norms } => {
            let dim = out.shape[1];
            accumulate(grads, nodes, *x, |d| {
                for (((drow, grow), yrow), n) in d
                    .chunks_mut(dim)
                    .zip(g.chunks(dim))
                    .zip(out.data.chunks(dim))
                    .zip(norms)
                {
                    let inner = kernels::dot(yrow, grow);
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += (gv - yv * inner) / n;
                    }
                }
            });
        }
    }
}
