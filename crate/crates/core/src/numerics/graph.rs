//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`] handles in execution
//! order, so the node list is already topologically sorted. `backward` walks
//! it in reverse and leaves a gradient on every leaf created with
//! `requires_grad = true`.

use super::kernels::{self, ConvGeom};
use super::{NumericsError, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Sqrt,
    Relu,
    Sigmoid,
    Silu,
    Tanh,
    /// Raise to a fixed scalar power.
    Pow(f32),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    BinaryScalar(BinaryOp, Var, f32),
    Unary(UnaryOp, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Upsample(Var, usize),
    DepthToSpace(Var, usize),
    SpaceToDepth(Var, usize),
    AvgPool(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    MeanSpatial(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of operations on gradient-tracked tensors.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        inputs: &[Var],
        name: &str,
    ) -> Result<Var, NumericsError> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise --------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb)?;
        let ma = kernels::broadcast_index_map(&sa, &out_shape);
        let mb = kernels::broadcast_index_map(&sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if kind == BinaryOp::Div && db.contains(&0.0) {
            return Err(NumericsError::DivByZero);
        }
        let f = |x: f32, y: f32| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        let value = Tensor::from_parts(out_shape, data);
        self.push(value, Op::Binary(kind, a, b), &[a, b], "elementwise")
    }

    pub fn binary_scalar(&mut self, kind: BinaryOp, a: Var, s: f32) -> Result<Var, NumericsError> {
        if !s.is_finite() {
            return Err(NumericsError::NonFinite(format!("scalar operand {s}")));
        }
        if kind == BinaryOp::Div && s == 0.0 {
            return Err(NumericsError::DivByZero);
        }
        let value = self.value(a).map(|x| match kind {
            BinaryOp::Add => x + s,
            BinaryOp::Sub => x - s,
            BinaryOp::Mul => x * s,
            BinaryOp::Div => x / s,
        });
        self.push(
            value,
            Op::BinaryScalar(kind, a, s),
            &[a],
            "elementwise scalar",
        )
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| match kind {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Pow(p) => x.powf(p),
        });
        self.push(value, Op::Unary(kind, a), &[a], "unary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var, NumericsError> {
        self.binary_scalar(BinaryOp::Add, a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var, NumericsError> {
        self.binary_scalar(BinaryOp::Mul, a, s)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    // ---- structural ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        if k != k2 {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul inner dimensions {m}x{k} · {k2}x{n}"
            )));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(a, b),
            &[a, b],
            "matmul",
        )
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, pad)?;
        let data =
            kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor::from_parts(geom.output_shape().to_vec(), data);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            &[input, kernel],
            "conv2d",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a], "reshape")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| NumericsError::ShapeMismatch("concat of zero tensors".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "concat axis {axis} on {first:?}"
            )));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch(format!(
                    "concat {first:?} with {s:?}"
                )));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    /// Nearest-neighbour upsampling of the two trailing dimensions by `factor`.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || factor == 0 {
            return Err(NumericsError::ShapeMismatch(format!(
                "upsample of {shape:?}"
            )));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let data = kernels::upsample_nearest(self.value(a).data(), planes, h, w, factor);
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape[nd - 2] *= factor;
        out_shape[nd - 1] *= factor;
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Upsample(a, factor),
            &[a],
            "upsample",
        )
    }

    /// Sub-pixel rearrangement `[B, C·f², H, W]` → `[B, C, H·f, W·f]`.
    pub fn depth_to_space(&mut self, a: Var, f: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || f == 0 || !s[1].is_multiple_of(f * f) {
            return Err(NumericsError::ShapeMismatch(format!(
                "depth_to_space by {f} of {s:?}"
            )));
        }
        let c = s[1] / (f * f);
        let data = kernels::depth_to_space(self.value(a).data(), s[0], c, s[2], s[3], f);
        let out = Tensor::from_parts(vec![s[0], c, s[2] * f, s[3] * f], data);
        self.push(out, Op::DepthToSpace(a, f), &[a], "depth_to_space")
    }

    /// `[B, C, H·f, W·f]` → `[B, C·f², H, W]`.
    pub fn space_to_depth(&mut self, a: Var, f: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || f == 0 || !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
            return Err(NumericsError::ShapeMismatch(format!(
                "space_to_depth by {f} of {s:?}"
            )));
        }
        let (h, w) = (s[2] / f, s[3] / f);
        let data = kernels::space_to_depth(self.value(a).data(), s[0], s[1], h, w, f);
        let out = Tensor::from_parts(vec![s[0], s[1] * f * f, h, w], data);
        self.push(out, Op::SpaceToDepth(a, f), &[a], "space_to_depth")
    }

    /// Average pooling of the two trailing dimensions over `factor×factor` blocks.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        if nd < 2
            || factor == 0
            || !shape[nd - 2].is_multiple_of(factor)
            || !shape[nd - 1].is_multiple_of(factor)
        {
            return Err(NumericsError::ShapeMismatch(format!(
                "avg_pool by {factor} of {shape:?}"
            )));
        }
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let planes: usize = shape[..nd - 2].iter().product();
        let data = kernels::avg_pool(self.value(a).data(), planes, h, w, factor);
        let mut out_shape = shape.clone();
        out_shape[nd - 2] /= factor;
        out_shape[nd - 1] /= factor;
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::AvgPool(a, factor),
            &[a],
            "avg_pool",
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar_unchecked(s), Op::SumAll(a), &[a], "sum")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).mean();
        self.push(Tensor::scalar_unchecked(s), Op::MeanAll(a), &[a], "mean")
    }

    /// `[B, C, H, W]` → `[B, C]` by averaging over the spatial grid.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var, NumericsError> {
        let &[b, c, h, w] = self.shape(a) else {
            return Err(NumericsError::ShapeMismatch(format!(
                "mean_spatial needs [B,C,H,W], got {:?}",
                self.shape(a)
            )));
        };
        let hw = h * w;
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        self.push(
            Tensor::from_parts(vec![b, c], data),
            Op::MeanSpatial(a),
            &[a],
            "mean_spatial",
        )
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let &[b, k] = self.shape(logits) else {
            return Err(NumericsError::ShapeMismatch(
                "cross_entropy needs [B,K] logits".into(),
            ));
        };
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(NumericsError::InvalidArgument(
                "cross_entropy labels".into(),
            ));
        }
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &l) in x.chunks(k).zip(labels) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            loss += lse - row[l];
        }
        let value = Tensor::scalar_unchecked(loss / b as f32);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Convenience: mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ---- backward -----------------------------------------------------------

    /// Populates `grad` on every gradient-tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::NotScalar(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NumericsError::Detached);
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.local_backward(idx, &g)?;
            for (input, gi) in contributions {
                accumulate(&mut grads[input.0], gi);
            }
            let node = &mut self.nodes[idx];
            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
            t.check_finite("backward")?;
            node.grad = Some(t);
        }
        Ok(())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, idx: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>, NumericsError> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ma = kernels::broadcast_index_map(ta.shape(), out_shape);
                let mb = kernels::broadcast_index_map(tb.shape(), out_shape);
                let (da, db) = (ta.data(), tb.data());
                if self.tracked(*a) {
                    let full: Vec<f32> = match kind {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().zip(&mb).map(|(gv, &j)| gv * db[j]).collect(),
                        BinaryOp::Div => g.iter().zip(&mb).map(|(gv, &j)| gv / db[j]).collect(),
                    };
                    res.push((*a, kernels::reduce_broadcast(&full, ta.shape(), out_shape)));
                }
                if self.tracked(*b) {
                    let full: Vec<f32> = match kind {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|v| -v).collect(),
                        BinaryOp::Mul => g.iter().zip(&ma).map(|(gv, &i)| gv * da[i]).collect(),
                        BinaryOp::Div => g
                            .iter()
                            .zip(ma.iter().zip(&mb))
                            .map(|(gv, (&i, &j))| -gv * da[i] / (db[j] * db[j]))
                            .collect(),
                    };
                    res.push((*b, kernels::reduce_broadcast(&full, tb.shape(), out_shape)));
                }
            }
            Op::BinaryScalar(kind, a, s) => {
                let gi = match kind {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g.iter().map(|v| v * s).collect(),
                    BinaryOp::Div => g.iter().map(|v| v / s).collect(),
                };
                res.push((*a, gi));
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let gi: Vec<f32> = match kind {
                    UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                    UnaryOp::Exp => g.iter().zip(out).map(|(gv, o)| gv * o).collect(),
                    UnaryOp::Sqrt => g.iter().zip(out).map(|(gv, o)| gv * 0.5 / o).collect(),
                    UnaryOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    UnaryOp::Sigmoid => g
                        .iter()
                        .zip(out)
                        .map(|(gv, o)| gv * o * (1.0 - o))
                        .collect(),
                    UnaryOp::Silu => g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect(),
                    UnaryOp::Tanh => g
                        .iter()
                        .zip(out)
                        .map(|(gv, o)| gv * (1.0 - o * o))
                        .collect(),
                    UnaryOp::Pow(p) => g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * p * xv.powf(p - 1.0))
                        .collect(),
                };
                res.push((*a, gi));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.tracked(*a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    res.push((*a, kernels::matmul(g, &bt, m, n, k)));
                }
                if self.tracked(*b) {
                    let at = kernels::transpose(ta.data(), m, k);
                    res.push((*b, kernels::matmul(&at, g, k, m, n)));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (di, dk) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    self.tracked(*input),
                    self.tracked(*kernel),
                );
                if let Some(di) = di {
                    res.push((*input, di));
                }
                if let Some(dk) = dk {
                    res.push((*kernel, dk));
                }
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let mut parts: Vec<Vec<f32>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let chunk = self.shape(*v)[*axis] * inner;
                        p.extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (v, p) in inputs.iter().zip(parts) {
                    if self.tracked(*v) {
                        res.push((*v, p));
                    }
                }
            }
            Op::Upsample(a, f) => {
                let s = self.shape(*a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes: usize = s[..s.len() - 2].iter().product();
                res.push((*a, kernels::upsample_nearest_backward(g, planes, h, w, *f)));
            }
            Op::DepthToSpace(a, f) => {
                let s = self.shape(*a);
                let c = s[1] / (f * f);
                res.push((*a, kernels::space_to_depth(g, s[0], c, s[2], s[3], *f)));
            }
            Op::SpaceToDepth(a, f) => {
                let s = self.shape(*a);
                res.push((
                    *a,
                    kernels::depth_to_space(g, s[0], s[1], s[2] / f, s[3] / f, *f),
                ));
            }
            Op::AvgPool(a, f) => {
                let s = self.shape(*a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes: usize = s[..s.len() - 2].iter().product();
                res.push((*a, kernels::avg_pool_backward(g, planes, h, w, *f)));
            }
            Op::SumAll(a) => res.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                res.push((*a, vec![g[0] / n as f32; n]));
            }
            Op::MeanSpatial(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                let gi = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / hw as f32, hw))
                    .collect();
                res.push((*a, gi));
            }
            Op::CrossEntropy { logits, labels } => {
                let x = self.value(*logits);
                let k = x.shape()[1];
                let b = labels.len() as f32;
                let mut gi = Vec::with_capacity(x.numel());
                for (row, &l) in x.data().chunks(k).zip(labels) {
                    let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
                    let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - m).exp() / z;
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        gi.push(g[0] * (p - onehot) / b);
                    }
                }
                res.push((*logits, gi));
            }
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tensor {
    fn scalar_unchecked(v: f32) -> Tensor {
        Tensor::from_parts(vec![1], vec![v])
    }
}
