//! Tape-style reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; nodes only reference
//! earlier nodes, so the node vector is already in topological order and the
//! backward pass is a single reverse sweep.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded for a node, including any static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// `[m, n] -> [n, m]`
    Transpose,
    /// Input `[c, h, w]`, weight `[o, c, k, k]`, bias `[o]`.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Sigmoid,
    /// Softmax along the last axis.
    SoftmaxRows,
    Abs,
    Sqrt,
    /// Elementwise smooth L1 with unit breakpoint on `|x|`.
    SmoothL1,
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] + [k]` broadcast across rows.
    AddRowBias,
    Scale(f64),
    AddScalar(f64),
    /// Broadcast a one-element tensor to the given shape.
    Expand(Vec<usize>),
    Sum,
    Mean,
    /// Select rows of a 2-d tensor.
    Gather(Vec<usize>),
    Concat { axis: usize },
    Reshape(Vec<usize>),
    MatrixInverse3x3,
    /// Feature map `[c, h, w]` sampled at normalized `[n, 2]` (x, y)
    /// positions with zero padding, giving `[c, n]`.
    BilinearGather,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxRows => "softmax_rows",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::SmoothL1 => "smooth_l1",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddRowBias => "add_row_bias",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Expand(_) => "expand",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Gather(_) => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::MatrixInverse3x3 => "matrix_inverse_3x3",
            Op::BilinearGather => "bilinear_gather",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
}

/// A recorded computation. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    corrupted: Option<&'static str>,
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

    /// Scales the backward rule of the named op by 1.1. Only used to verify
    /// that gradient checking catches a wrong rule.
    #[doc(hidden)]
    pub fn corrupt_rule(&mut self, op_name: &'static str) {
        self.corrupted = Some(op_name);
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// accumulates into it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), tensor)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = true;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the node.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        check_arity(&op, values.len())?;
        let (shape, data) = forward(&op, &values)?;
        let requires_grad = values.iter().any(|t| t.requires_grad);
        let mut out = Tensor::new(shape, data)?;
        out.requires_grad = requires_grad;
        Ok(self.push(op, inputs.to_vec(), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }

    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SmoothL1, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddRowBias, &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[a])
    }

    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Expand(shape.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Op::Gather(rows.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn inverse3x3(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MatrixInverse3x3, &[a])
    }

    pub fn bilinear_gather(&mut self, features: Var, coords: Var) -> Result<Var> {
        self.apply(Op::BilinearGather, &[features, coords])
    }

    /// Back-propagates from a scalar `loss`, adding `dloss/dleaf` into the
    /// gradient buffer of every leaf that requires it. Calling this again
    /// without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            if node.op == Op::Leaf {
                grads[idx] = Some(g);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = inputs.iter().map(|t| t.requires_grad).collect();
            let mut local = backward_rule(&node.op, &inputs, &node.value, &g, &needs);
            if self.corrupted == Some(node.op.name()) {
                for gi in local.iter_mut().flatten() {
                    gi.iter_mut().for_each(|v| *v *= 1.1);
                }
            }
            for (input, gi) in node.inputs.iter().zip(local) {
                let Some(gi) = gi else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                if node.op == Op::Leaf && node.value.requires_grad {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

fn check_arity(op: &Op, n: usize) -> Result<()> {
    let expected = match op {
        Op::Leaf => 0,
        Op::Concat { .. } => {
            if n == 0 {
                return Err(Error::shape("concat", "no inputs"));
            }
            return Ok(());
        }
        Op::Conv2d { .. } => 3,
        Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::AddRowBias | Op::BilinearGather => 2,
        _ => 1,
    };
    if n != expected {
        return Err(Error::shape(op.name(), format!("expected {expected} inputs, got {n}")));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn det3(m: &[f64]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Inverse of a row-major 3x3 matrix via the adjugate.
pub(crate) fn invert3(m: &[f64]) -> Result<[f64; 9]> {
    let det = det3(m);
    if !(det.abs() >= 1e-12) {
        return Err(Error::Singular { det });
    }
    let inv_det = 1.0 / det;
    Ok([
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ])
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Outer, axis and inner extents for concatenation along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Bilinear taps around a continuous grid position: `(row, col, weight)`
/// for the in-grid neighbours only.
fn bilinear_taps(gx: f64, gy: f64, h: usize, w: usize) -> ([(usize, usize, f64); 4], usize, f64, f64, i64, i64) {
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = gx - x0;
    let fy = gy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut taps = [(0, 0, 0.0); 4];
    let mut count = 0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (r, c) = (y0 + dy, x0 + dx);
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                taps[count] = (r as usize, c as usize, wy * wx);
                count += 1;
            }
        }
    }
    (taps, count, fx, fy, x0, y0)
}

fn grid_position(x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
    (x * w as f64 - 0.5, y * h as f64 - 0.5)
}

fn forward(op: &Op, ins: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let name = op.name();
    match op {
        Op::Leaf => unreachable!("leaves are recorded directly"),
        Op::MatMul => {
            let (m, k) = dims2(name, ins[0])?;
            let (k2, n) = dims2(name, ins[1])?;
            if k != k2 {
                return Err(Error::shape(name, format!("[{m}, {k}] x [{k2}, {n}]")));
            }
            Ok((vec![m, n], matmul_raw(ins[0].data(), ins[1].data(), m, k, n)))
        }
        Op::Transpose => {
            let (m, n) = dims2(name, ins[0])?;
            Ok((vec![n, m], transpose_raw(ins[0].data(), m, n)))
        }
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            let [c, h, wd] = x.shape() else {
                return Err(Error::shape(name, format!("input must be [c, h, w], got {:?}", x.shape())));
            };
            let [o, c2, k, k2] = w.shape() else {
                return Err(Error::shape(name, format!("weight must be [o, c, k, k], got {:?}", w.shape())));
            };
            if c != c2 || k != k2 || b.shape() != [*o] {
                return Err(Error::shape(
                    name,
                    format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let (c, h, wd, o, k) = (*c, *h, *wd, *o, *k);
            let (Some(ho), Some(wo)) = (conv_out(h, k, *stride, *padding), conv_out(wd, k, *stride, *padding)) else {
                return Err(Error::shape(name, format!("kernel {k} larger than padded input {h}x{wd}")));
            };
            let (xd, wdat) = (x.data(), w.data());
            let mut out = vec![0.0; o * ho * wo];
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as i64 - *padding as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as i64 - *padding as i64;
                                    if ix < 0 || ix >= wd as i64 {
                                        continue;
                                    }
                                    acc += wdat[((oc * c + ic) * k + ky) * k + kx]
                                        * xd[(ic * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[(oc * ho + oy) * wo + ox] = acc;
                    }
                }
            }
            Ok((vec![o, ho, wo], out))
        }
        Op::Relu => Ok((ins[0].shape().to_vec(), ins[0].data().iter().map(|v| v.max(0.0)).collect())),
        Op::Sigmoid => Ok((
            ins[0].shape().to_vec(),
            ins[0].data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        )),
        Op::SoftmaxRows => {
            let shape = ins[0].shape();
            let Some(&cols) = shape.last() else {
                return Err(Error::shape(name, "scalar input"));
            };
            if cols == 0 {
                return Err(Error::shape(name, "empty rows"));
            }
            let mut out = ins[0].data().to_vec();
            for row in out.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Ok((shape.to_vec(), out))
        }
        Op::Abs => Ok((ins[0].shape().to_vec(), ins[0].data().iter().map(|v| v.abs()).collect())),
        Op::Sqrt => Ok((ins[0].shape().to_vec(), ins[0].data().iter().map(|v| v.sqrt()).collect())),
        Op::SmoothL1 => Ok((
            ins[0].shape().to_vec(),
            ins[0]
                .data()
                .iter()
                .map(|&x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 })
                .collect(),
        )),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            same_shape(name, ins[0], ins[1])?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |a, b| a + b,
                Op::Sub => |a, b| a - b,
                Op::Mul => |a, b| a * b,
                _ => |a, b| a / b,
            };
            Ok((
                ins[0].shape().to_vec(),
                ins[0].data().iter().zip(ins[1].data()).map(|(&a, &b)| f(a, b)).collect(),
            ))
        }
        Op::AddRowBias => {
            let (_, k) = dims2(name, ins[0])?;
            if ins[1].len() != k {
                return Err(Error::shape(name, format!("rows of width {k}, bias {:?}", ins[1].shape())));
            }
            let bias = ins[1].data();
            let mut out = ins[0].data().to_vec();
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
            Ok((ins[0].shape().to_vec(), out))
        }
        Op::Scale(c) => Ok((ins[0].shape().to_vec(), ins[0].data().iter().map(|v| v * c).collect())),
        Op::AddScalar(c) => Ok((ins[0].shape().to_vec(), ins[0].data().iter().map(|v| v + c).collect())),
        Op::Expand(shape) => {
            if ins[0].len() != 1 {
                return Err(Error::shape(name, format!("can only expand one element, got {:?}", ins[0].shape())));
            }
            let n = shape.iter().product();
            Ok((shape.clone(), vec![ins[0].data()[0]; n]))
        }
        Op::Sum => Ok((Vec::new(), vec![ins[0].data().iter().sum()])),
        Op::Mean => {
            if ins[0].is_empty() {
                return Err(Error::shape(name, "mean of an empty tensor"));
            }
            Ok((Vec::new(), vec![ins[0].data().iter().sum::<f64>() / ins[0].len() as f64]))
        }
        Op::Gather(rows) => {
            let (m, k) = dims2(name, ins[0])?;
            if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
                return Err(Error::shape(name, format!("row {bad} out of range for {m} rows")));
            }
            let src = ins[0].data();
            let mut out = Vec::with_capacity(rows.len() * k);
            for &r in rows {
                out.extend_from_slice(&src[r * k..(r + 1) * k]);
            }
            Ok((vec![rows.len(), k], out))
        }
        Op::Concat { axis } => {
            let first = ins[0].shape();
            if *axis >= first.len() {
                return Err(Error::shape(name, format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for t in ins {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !compatible {
                    return Err(Error::shape(name, format!("{first:?} vs {s:?} along axis {axis}")));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in ins {
                    let span = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Ok((shape, out))
        }
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != ins[0].len() {
                return Err(Error::shape(name, format!("{:?} -> {shape:?}", ins[0].shape())));
            }
            Ok((shape.clone(), ins[0].data().to_vec()))
        }
        Op::MatrixInverse3x3 => {
            if ins[0].shape() != [3, 3] {
                return Err(Error::shape(name, format!("expected [3, 3], got {:?}", ins[0].shape())));
            }
            Ok((vec![3, 3], invert3(ins[0].data())?.to_vec()))
        }
        Op::BilinearGather => {
            let [c, h, w] = ins[0].shape() else {
                return Err(Error::shape(name, format!("features must be [c, h, w], got {:?}", ins[0].shape())));
            };
            let (n, two) = dims2(name, ins[1])?;
            if two != 2 {
                return Err(Error::shape(name, format!("coordinates must be [n, 2], got {:?}", ins[1].shape())));
            }
            let (c, h, w) = (*c, *h, *w);
            let feat = ins[0].data();
            let coords = ins[1].data();
            let mut out = vec![0.0; c * n];
            for i in 0..n {
                let (gx, gy) = grid_position(coords[2 * i], coords[2 * i + 1], h, w);
                if !gx.is_finite() || !gy.is_finite() {
                    continue;
                }
                let (taps, count, ..) = bilinear_taps(gx, gy, h, w);
                for &(r, col, wt) in &taps[..count] {
                    for ch in 0..c {
                        out[ch * n + i] += wt * feat[(ch * h + r) * w + col];
                    }
                }
            }
            Ok((vec![c, n], out))
        }
    }
}

fn backward_rule(op: &Op, ins: &[&Tensor], out: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let y = out.data();
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| (0..g.len()).map(f).collect())]
    };
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[1];
            let ga = needs[0].then(|| matmul_raw(g, &transpose_raw(ins[1].data(), k, n), m, n, k));
            let gb = needs[1].then(|| matmul_raw(&transpose_raw(ins[0].data(), m, k), g, k, m, n));
            vec![ga, gb]
        }
        Op::Transpose => {
            let (m, n) = (ins[0].shape()[0], ins[0].shape()[1]);
            vec![needs[0].then(|| transpose_raw(g, n, m))]
        }
        Op::Conv2d { stride, padding } => {
            let (x, w) = (ins[0], ins[1]);
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (o, k) = (w.shape()[0], w.shape()[2]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let (xd, wdat) = (x.data(), w.data());
            let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
            let mut gw = needs[1].then(|| vec![0.0; wdat.len()]);
            let gb = needs[2].then(|| {
                (0..o).map(|oc| g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum()).collect()
            });
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = g[(oc * ho + oy) * wo + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ic in 0..c {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as i64 - *padding as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as i64 - *padding as i64;
                                    if ix < 0 || ix >= wd as i64 {
                                        continue;
                                    }
                                    let xi = (ic * h + iy as usize) * wd + ix as usize;
                                    let wi = ((oc * c + ic) * k + ky) * k + kx;
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += go * wdat[wi];
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[wi] += go * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        }
        Op::Relu => {
            let x = ins[0].data();
            unary(&|i| if x[i] > 0.0 { g[i] } else { 0.0 })
        }
        Op::Sigmoid => unary(&|i| g[i] * y[i] * (1.0 - y[i])),
        Op::SoftmaxRows => {
            let cols = *out.shape().last().unwrap();
            vec![needs[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out_r) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        out_r[j] = yr[j] * (gr[j] - dot);
                    }
                }
                gx
            })]
        }
        Op::Abs => {
            let x = ins[0].data();
            unary(&|i| {
                if x[i] > 0.0 {
                    g[i]
                } else if x[i] < 0.0 {
                    -g[i]
                } else {
                    0.0
                }
            })
        }
        Op::Sqrt => unary(&|i| if y[i] > 0.0 { g[i] * 0.5 / y[i] } else { 0.0 }),
        Op::SmoothL1 => {
            let x = ins[0].data();
            unary(&|i| if x[i].abs() < 1.0 { g[i] * x[i] } else { g[i] * x[i].signum() })
        }
        Op::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
        Op::Sub => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|v| -v).collect())],
        Op::Mul => {
            let (a, b) = (ins[0].data(), ins[1].data());
            vec![
                needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Div => {
            let (a, b) = (ins[0].data(), ins[1].data());
            vec![
                needs[0].then(|| g.iter().zip(b).map(|(g, b)| g / b).collect()),
                needs[1].then(|| (0..g.len()).map(|i| -g[i] * a[i] / (b[i] * b[i])).collect()),
            ]
        }
        Op::AddRowBias => {
            let k = ins[1].len();
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; k];
                for row in g.chunks(k) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }
        Op::Scale(c) => unary(&|i| g[i] * c),
        Op::AddScalar(_) | Op::Reshape(_) => vec![needs[0].then(|| g.to_vec())],
        Op::Expand(_) => vec![needs[0].then(|| vec![g.iter().sum()])],
        Op::Sum => vec![needs[0].then(|| vec![g[0]; ins[0].len()])],
        Op::Mean => vec![needs[0].then(|| vec![g[0] / ins[0].len() as f64; ins[0].len()])],
        Op::Gather(rows) => {
            let k = ins[0].shape()[1];
            vec![needs[0].then(|| {
                let mut gx = vec![0.0; ins[0].len()];
                for (slot, &r) in rows.iter().enumerate() {
                    for j in 0..k {
                        gx[r * k + j] += g[slot * k + j];
                    }
                }
                gx
            })]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            let mut result = Vec::with_capacity(ins.len());
            for (t, &need) in ins.iter().zip(needs) {
                let width = t.shape()[*axis];
                if need {
                    let mut gi = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + width * inner]);
                    }
                    result.push(Some(gi));
                } else {
                    result.push(None);
                }
                offset += width;
            }
            result
        }
        Op::MatrixInverse3x3 => {
            // d(X^-1) = -X^-1 dX X^-1, so dL/dX = -Y^T G Y^T with Y = X^-1.
            vec![needs[0].then(|| {
                let yt = transpose_raw(y, 3, 3);
                let tmp = matmul_raw(&yt, g, 3, 3, 3);
                matmul_raw(&tmp, &yt, 3, 3, 3).into_iter().map(|v| -v).collect()
            })]
        }
        Op::BilinearGather => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let n = ins[1].shape()[0];
            let feat = ins[0].data();
            let coords = ins[1].data();
            let mut gf = needs[0].then(|| vec![0.0; feat.len()]);
            let mut gc = needs[1].then(|| vec![0.0; coords.len()]);
            let at = |ch: usize, r: i64, col: i64| -> f64 {
                if r < 0 || col < 0 || r as usize >= h || col as usize >= w {
                    0.0
                } else {
                    feat[(ch * h + r as usize) * w + col as usize]
                }
            };
            for i in 0..n {
                let (gx, gy) = grid_position(coords[2 * i], coords[2 * i + 1], h, w);
                if !gx.is_finite() || !gy.is_finite() {
                    continue;
                }
                let (taps, count, fx, fy, x0, y0) = bilinear_taps(gx, gy, h, w);
                if let Some(gf) = gf.as_mut() {
                    for &(r, col, wt) in &taps[..count] {
                        for ch in 0..c {
                            gf[(ch * h + r) * w + col] += wt * g[ch * n + i];
                        }
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for ch in 0..c {
                        let v00 = at(ch, y0, x0);
                        let v01 = at(ch, y0, x0 + 1);
                        let v10 = at(ch, y0 + 1, x0);
                        let v11 = at(ch, y0 + 1, x0 + 1);
                        let go = g[ch * n + i];
                        dx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        dy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    gc[2 * i] += dx * w as f64;
                    gc[2 * i + 1] += dy * h as f64;
                }
            }
            vec![gf, gc]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut expected = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expected[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let va = g.constant(t(&[2, 3], &a));
        let vb = g.constant(t(&[3, 2], &b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.data(c), &expected);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
        assert!(err.to_string().contains("[2, 3] x [2, 3]"));
    }

    #[test]
    fn singular_inverse_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3, 3], &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0]));
        assert!(matches!(g.inverse3x3(a), Err(Error::Singular { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3, 2], 0.7));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        let grad = g.grad(x).unwrap();
        for (got, want) in grad.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -1.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn concat_interleaves_along_inner_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[9.0, 8.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.data(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn bilinear_gather_at_cell_centres_is_exact() {
        let mut g = Graph::new();
        let feat: Vec<f64> = (0..8).map(f64::from).collect();
        let f = g.constant(t(&[2, 2, 2], &feat));
        // centres of cells (row 1, col 0) and (row 0, col 1)
        let pts = g.constant(t(&[2, 2], &[0.25, 0.75, 0.75, 0.25]));
        let out = g.bilinear_gather(f, pts).unwrap();
        assert_eq!(g.data(out), &[2.0, 1.0, 6.0, 5.0]);
    }
}
