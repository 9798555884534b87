use super::kernels::{self, ConvGeometry};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Silu(Var),
    ClampMin(Var, f32),
    Expand(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Standardize {
        src: Var,
        eps: f32,
        sigma: Vec<f32>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f32>,
    },
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations in execution order for one reverse sweep.
///
/// Node indices are assigned at push time, so every node's parents precede
/// it and the reverse of insertion order is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_axis(op: &str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Dimension(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copies `v` into a new constant node that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient stored on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn item(&self, v: Var) -> Result<f32> {
        self.value(v).item()
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f32::sqrt, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// Elementwise `max(x, lo)`; no gradient flows where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f32) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- shape ----------------------------------------------------------

    /// Broadcasts size-1 axes of `a` up to `shape` (ranks must match).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != shape.len()
            || t.shape()
                .iter()
                .zip(shape)
                .any(|(&s, &d)| s != d && s != 1)
        {
            return Err(Error::Dimension(format!(
                "expand: cannot broadcast {:?} to {shape:?}",
                t.shape()
            )));
        }
        let src_strides = broadcast_strides(t.shape());
        let mut data = vec![0.0; numel(shape)];
        let src = t.data();
        kernels::for_each_strided(shape, &src_strides, |o, s| data[o] = src[s]);
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Expand(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let in_strides = kernels::strides(t.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = vec![0.0; t.numel()];
        let src = t.data();
        kernels::for_each_strided(&out_shape, &src_strides, |o, s| data[o] = src[s]);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Selects rows along axis 0.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n_rows = t.shape()[0];
        if rows.is_empty() {
            return Err(Error::Dimension("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::Dimension(format!(
                "gather_rows: row {bad} out of range for {n_rows} rows"
            )));
        }
        let row_len = t.numel() / n_rows;
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat: no inputs".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "concat: trailing shape {:?} differs from {tail:?}",
                    &t.shape()[1..]
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    // ---- reductions -----------------------------------------------------

    /// Sum along `axis`, keeping it with extent 1. Accumulates in f64.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("sum_axis", t, axis)?;
        let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for l in 0..len {
                    acc += src[(o * len + l) * inner + i] as f64;
                }
                data[o * inner + i] = acc as f32;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.value(a).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f32))
    }

    /// Sum of all elements as a `[1]` tensor. Accumulates in f64.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(total as f32), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along `axis`, max-subtracted before exponentiation.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("softmax", t, axis)?;
        let out = softmax_forward(t, axis, false);
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Log-softmax along `axis` via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("log_softmax", t, axis)?;
        let out = softmax_forward(t, axis, true);
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Standardizes each row along the last axis: `(x − mean) / (std + eps)`
    /// with population standard deviation.
    pub fn standardize(&mut self, a: Var, eps: f32) -> Var {
        let t = self.value(a);
        let len = *t.shape().last().expect("rank >= 1");
        let rows = t.numel() / len;
        let mut data = vec![0.0; t.numel()];
        let mut sigma = vec![0.0; rows];
        for r in 0..rows {
            let x = &t.data()[r * len..(r + 1) * len];
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len as f64;
            let sd = var.sqrt();
            sigma[r] = sd as f32;
            let denom = sd + eps as f64;
            for (y, &v) in data[r * len..(r + 1) * len].iter_mut().zip(x) {
                *y = ((v as f64 - mean) / denom) as f32;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Standardize { src: a, eps, sigma }, &[a])
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_dims(ta.shape(), tb.shape())?;
        let mut data = vec![0.0; batch * m * n];
        let (ad, bd) = (ta.data(), tb.data());
        par::for_each_chunk_mut(&mut data, m * n, |bi, c| {
            kernels::gemm_nn_acc(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                c,
                m,
                k,
                n,
            );
        });
        let shape = if ta.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution of `x[N×C×H×W]` with `w[O×C×k×k]` and optional `bias[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d: expected rank-4 input and kernel, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, kc, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if kc != c || kh != kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {:?} incompatible with input {:?}",
                tw.shape(),
                tx.shape()
            )));
        }
        let geom = ConvGeometry::new(c, h, wd, kh, stride, pad).ok_or_else(|| {
            Error::Dimension(format!(
                "conv2d: non-positive output extent for input {h}x{wd}, kernel {kh}, stride {stride}, pad {pad}"
            ))
        })?;
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?} != [{o}]",
                    self.value(b).shape()
                )));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, spatial) = (geom.col_rows(), geom.col_cols());
        let in_len = c * h * wd;
        let (xd, wdata) = (tx.data(), tw.data());
        let per_sample = par::map_indexed(n, |i| {
            let mut cols = vec![0.0; rows * spatial];
            kernels::im2col(&xd[i * in_len..(i + 1) * in_len], &geom, &mut cols);
            let mut out = vec![0.0; o * spatial];
            if let Some(bd) = &bias_data {
                for (ch, chunk) in out.chunks_mut(spatial).enumerate() {
                    chunk.fill(bd[ch]);
                }
            }
            kernels::gemm_nn_acc(wdata, &cols, &mut out, o, rows, spatial);
            (cols, out)
        });
        let mut cols = Vec::with_capacity(n * rows * spatial);
        let mut data = Vec::with_capacity(n * o * spatial);
        for (c_i, o_i) in per_sample {
            cols.extend(c_i);
            data.extend(o_i);
        }
        let out = Tensor::new(vec![n, o, geom.out_h, geom.out_w], data)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
                cols,
            },
            &parents,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Propagates `∂loss/∂·` to every leaf created with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * xb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * xa[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let xb = val(*b);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * y[k] / xb[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Exp(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k];
                }
            }),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / x[k];
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * 0.5 / y[k];
                }
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Silu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        let s = sigmoid(x[k]);
                        d[k] += g[k] * s * (1.0 + x[k] * (1.0 - s));
                    }
                })
            }
            Op::ClampMin(a, lo) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if x[k] >= *lo {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Expand(a) => {
                let src_strides = broadcast_strides(nodes[a.0].value.shape());
                let shape = node.value.shape();
                acc(*a, &mut |d| {
                    kernels::for_each_strided(shape, &src_strides, |o, s| d[s] += g[o])
                });
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = kernels::split_axis(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            for k in 0..inner {
                                d[(o * len + l) * inner + k] += g[o * inner + k];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + k;
                            let dotp: f32 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                d[idx(l)] += y[idx(l)] * (g[idx(l)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + k;
                            let gsum: f32 = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                d[idx(l)] += g[idx(l)] - y[idx(l)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (_, m, k, n) = matmul_dims(sa, sb).expect("validated in forward");
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    par::for_each_chunk_mut(d, m * k, |bi, da| {
                        kernels::gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &xb[bi * k * n..(bi + 1) * k * n],
                            da,
                            m,
                            n,
                            k,
                        )
                    })
                });
                acc(*b, &mut |d| {
                    par::for_each_chunk_mut(d, k * n, |bi, db| {
                        kernels::gemm_tn_acc(
                            &xa[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            db,
                            k,
                            m,
                            n,
                        )
                    })
                });
            }
            Op::Permute(a, perm) => {
                let in_strides = kernels::strides(nodes[a.0].value.shape());
                let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let shape = node.value.shape();
                acc(*a, &mut |d| {
                    kernels::for_each_strided(shape, &src_strides, |o, s| d[s] += g[o])
                });
            }
            Op::Standardize { src, eps, sigma } => {
                let len = *node.value.shape().last().unwrap();
                acc(*src, &mut |d| {
                    for (r, &sd) in sigma.iter().enumerate() {
                        let gr = &g[r * len..(r + 1) * len];
                        let yr = &y[r * len..(r + 1) * len];
                        let denom = (sd + eps) as f64;
                        let gmean = gr.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
                        // centred input c = y·denom; the σ-path term vanishes when σ = 0
                        let gc: f64 = gr
                            .iter()
                            .zip(yr)
                            .map(|(&gv, &yv)| gv as f64 * yv as f64 * denom)
                            .sum();
                        let coef = if sd > 0.0 {
                            gc / (denom * denom * len as f64 * sd as f64)
                        } else {
                            0.0
                        };
                        for l in 0..len {
                            let c = yr[l] as f64 * denom;
                            d[r * len + l] += ((gr[l] as f64 - gmean) / denom - coef * c) as f32;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ws = nodes[w.0].value.shape();
                let o = ws[0];
                let (rows, spatial) = (geom.col_rows(), geom.col_cols());
                let n = node.value.shape()[0];
                let out_len = o * spatial;
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for s in 0..n {
                            for (ch, d_ch) in d.iter_mut().enumerate() {
                                let off = s * out_len + ch * spatial;
                                *d_ch += g[off..off + spatial]
                                    .iter()
                                    .map(|&v| v as f64)
                                    .sum::<f64>() as f32;
                            }
                        }
                    });
                }
                acc(*w, &mut |d| {
                    let partials = par::map_indexed(n, |s| {
                        let mut dw = vec![0.0; o * rows];
                        kernels::gemm_nt_acc(
                            &g[s * out_len..(s + 1) * out_len],
                            &cols[s * rows * spatial..(s + 1) * rows * spatial],
                            &mut dw,
                            o,
                            spatial,
                            rows,
                        );
                        dw
                    });
                    for p in partials {
                        add_into(d, &p);
                    }
                });
                let wdata = val(*w);
                let in_len = geom.in_channels * geom.in_h * geom.in_w;
                acc(*x, &mut |d| {
                    par::for_each_chunk_mut(d, in_len, |s, dx| {
                        let mut dcols = vec![0.0; rows * spatial];
                        kernels::gemm_tn_acc(
                            wdata,
                            &g[s * out_len..(s + 1) * out_len],
                            &mut dcols,
                            rows,
                            o,
                            spatial,
                        );
                        kernels::col2im_acc(&dcols, geom, dx);
                    })
                });
            }
            Op::GatherRows(a, rows) => {
                let row_len = node.value.numel() / rows.len();
                acc(*a, &mut |d| {
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut d[r * row_len..(r + 1) * row_len],
                            &g[j * row_len..(j + 1) * row_len],
                        );
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
        }
    }
}

fn add_into(d: &mut [f32], g: &[f32]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let s = kernels::strides(shape);
    shape
        .iter()
        .zip(s)
        .map(|(&extent, st)| if extent == 1 { 0 } else { st })
        .collect()
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let err = || {
        Error::Dimension(format!(
            "matmul: incompatible shapes {sa:?} and {sb:?}"
        ))
    };
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([b, m, k], [b2, k2, n]) if k == k2 && b == b2 => Ok((*b, *m, *k, *n)),
        _ => Err(err()),
    }
}

fn softmax_forward(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; t.numel()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + k;
            let max = (0..len).map(|l| x[idx(l)]).fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = (0..len).map(|l| ((x[idx(l)] - max) as f64).exp()).sum();
            if log {
                let lse = sum.ln();
                for l in 0..len {
                    out[idx(l)] = ((x[idx(l)] - max) as f64 - lse) as f32;
                }
            } else {
                for l in 0..len {
                    out[idx(l)] = (((x[idx(l)] - max) as f64).exp() / sum) as f32;
                }
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}
