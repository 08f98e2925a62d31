//! Define-by-run reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to at least one differentiable
//! input. Tensors without a node are constants: they flow through the same
//! operators but never receive gradients. A tape supports exactly one
//! backward pass, after which it is consumed.
//!
//! The operator set is deliberately small: it covers the convolutional
//! backbone, feature statistics, the prototype head and the loss terms, and
//! nothing else.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{invalid, Error, Result};

/// Append-only record of primitive applications.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Dense row-major tensor, optionally attached to a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("grad", &self.requires_grad())
            .field("data", &self.data)
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Registers `value` as a differentiable leaf on this tape.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape.clone(),
        });
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Runs the reverse sweep from a scalar `loss` and consumes the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape.clone()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let nodes = std::mem::take(&mut inner.nodes);
        inner.consumed = true;
        drop(inner);

        let mut leaf_shapes = HashMap::new();
        for (id, n) in nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) {
                leaf_shapes.insert(id, n.shape.clone());
            }
        }
        let root = match &loss.node {
            Some(r) if r.tape.same(self) => r.id,
            Some(_) => return Err(Error::ForeignTape),
            None => {
                return Ok(Gradients {
                    grads: HashMap::new(),
                    leaf_shapes,
                    tape: self.clone(),
                })
            }
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
            let input_grads = node.op.backward(&g, &need);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(src), Some(ig)) = (slot, ig) {
                    match &mut grads[*src] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| g.filter(|_| leaf_shapes.contains_key(&id)).map(|g| (id, g)))
            .collect();
        Ok(Gradients {
            grads,
            leaf_shapes,
            tape: self.clone(),
        })
    }
}

/// Result of a backward pass: one gradient per leaf of the tape.
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
    leaf_shapes: HashMap<usize, Vec<usize>>,
    tape: Tape,
}

impl Gradients {
    /// Gradient with respect to `leaf`; zero when the leaf was unreachable
    /// or `leaf` is not on the differentiated tape.
    pub fn wrt(&self, leaf: &Tensor) -> Tensor {
        let data = leaf
            .node
            .as_ref()
            .filter(|r| r.tape.same(&self.tape))
            .and_then(|r| self.grads.get(&r.id).cloned())
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        Tensor::constant(leaf.shape.clone(), data)
    }

    /// Leaf ids in ascending order with their gradients (zeros when unreachable).
    pub fn by_leaf(&self) -> Vec<(usize, Tensor)> {
        let mut ids: Vec<_> = self.leaf_shapes.keys().copied().collect();
        ids.sort_unstable();
        ids.into_iter()
            .map(|id| {
                let shape = self.leaf_shapes[&id].clone();
                let n = shape.iter().product();
                let data = self.grads.get(&id).cloned().unwrap_or_else(|| vec![0.0; n]);
                (id, Tensor::constant(shape, data))
            })
            .collect()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::constant(shape, data))
    }

    fn constant(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::constant(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(vec![1], vec![value])
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self::constant(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::constant(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    fn tape_of(inputs: &[&Tensor]) -> Result<Option<Tape>> {
        let mut found: Option<Tape> = None;
        for t in inputs {
            if let Some(r) = &t.node {
                match &found {
                    Some(tape) if !tape.same(&r.tape) => return Err(Error::ForeignTape),
                    Some(_) => {}
                    None => found = Some(r.tape.clone()),
                }
            }
        }
        if let Some(t) = &found {
            if t.is_consumed() {
                return Err(Error::TapeConsumed);
            }
        }
        Ok(found)
    }

    fn record(
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        op: impl FnOnce() -> Op,
    ) -> Result<Tensor> {
        let out = Tensor::constant(shape, data);
        let Some(tape) = Self::tape_of(inputs)? else {
            return Ok(out);
        };
        let mut inner = tape.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: op(),
            inputs: inputs.iter().map(|t| t.node.as_ref().map(|r| r.id)).collect(),
            shape: out.shape.clone(),
        });
        drop(inner);
        Ok(Tensor {
            node: Some(NodeRef { tape, id }),
            ..out
        })
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.rank() != rank {
            return Err(invalid(format!(
                "{op}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        let data = zip(&self.data, &other.data, |a, b| a + b);
        Self::record(&[self, other], self.shape.clone(), data, || Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        let data = zip(&self.data, &other.data, |a, b| a - b);
        Self::record(&[self, other], self.shape.clone(), data, || Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "mul")?;
        let data = zip(&self.data, &other.data, |a, b| a * b);
        Self::record(&[self, other], self.shape.clone(), data, || Op::Mul {
            a: self.data.clone(),
            b: other.data.clone(),
        })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "div")?;
        if other.data.iter().any(|&d| d == 0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let data = zip(&self.data, &other.data, |a, b| a / b);
        Self::record(&[self, other], self.shape.clone(), data, || Op::Div {
            a: self.data.clone(),
            b: other.data.clone(),
        })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| scale * x + shift).collect();
        Self::record(&[self], self.shape.clone(), data, || Op::Affine { scale })
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| -x).collect();
        Self::record(&[self], self.shape.clone(), data, || Op::Neg)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| x.max(0.0)).collect();
        Self::record(&[self], self.shape.clone(), data, || Op::Relu {
            input: self.data.clone(),
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&x| x.exp()).collect();
        let out = Rc::new(data.clone());
        Self::record(&[self], self.shape.clone(), data, || Op::Exp { out })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(&x) = self.data.iter().find(|&&x| x < 0.0) {
            return Err(invalid(format!("sqrt: negative input {x}")));
        }
        let data: Vec<f64> = self.data.iter().map(|&x| x.sqrt()).collect();
        let out = Rc::new(data.clone());
        Self::record(&[self], self.shape.clone(), data, || Op::Sqrt { out })
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data.iter().sum();
        Self::record(&[self], vec![1], vec![s], || Op::SumAll { n: self.numel() })
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over `axis`, removing it. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(&self.shape, axis, "sum_axis")?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let shape = drop_axis(&self.shape, axis);
        Self::record(&[self], shape, out, || Op::SumAxis {
            outer,
            len,
            inner,
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape.get(axis).copied().unwrap_or(1) as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    /// Euclidean norm over `axis`, removing it.
    pub fn l2_norm_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(&self.shape, axis, "l2_norm_axis")?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i] * self.data[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let norms = Rc::new(out.clone());
        let shape = drop_axis(&self.shape, axis);
        Self::record(&[self], shape, out, || Op::L2Norm {
            input: self.data.clone(),
            norms,
            outer,
            len,
            inner,
        })
    }

    /// Mean over (H, W) of a `(B, C, H, W)` map, giving `(B, C)`.
    pub fn spatial_mean(&self) -> Result<Tensor> {
        self.expect_rank(4, "spatial_mean")?;
        let (bc, hw) = (self.shape[0] * self.shape[1], self.shape[2] * self.shape[3]);
        let data = self
            .data
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        debug_assert_eq!(bc, self.data.len() / hw);
        Self::record(&[self], self.shape[..2].to_vec(), data, || Op::SpatialMean { hw })
    }

    /// Biased (1/HW) variance over (H, W), giving `(B, C)`.
    pub fn spatial_var(&self) -> Result<Tensor> {
        self.expect_rank(4, "spatial_var")?;
        let hw = self.shape[2] * self.shape[3];
        let mut means = Vec::with_capacity(self.data.len() / hw);
        let mut vars = Vec::with_capacity(self.data.len() / hw);
        for c in self.data.chunks_exact(hw) {
            let m = c.iter().sum::<f64>() / hw as f64;
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
            means.push(m);
            vars.push(v);
        }
        Self::record(&[self], self.shape[..2].to_vec(), vars, || Op::SpatialVar {
            input: self.data.clone(),
            means,
            hw,
        })
    }

    // ---- shape movement ---------------------------------------------

    /// Broadcast `(B, C)` over spatial extent `(h, w)`.
    pub fn broadcast_hw(&self, h: usize, w: usize) -> Result<Tensor> {
        self.expect_rank(2, "broadcast_hw")?;
        let hw = h * w;
        let mut data = Vec::with_capacity(self.numel() * hw);
        for &v in self.data.iter() {
            data.extend(std::iter::repeat(v).take(hw));
        }
        let shape = vec![self.shape[0], self.shape[1], h, w];
        Self::record(&[self], shape, data, || Op::BroadcastHw { hw })
    }

    /// Repeat a rank-1 tensor `(D)` as `n` rows of `(n, D)`.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor> {
        self.expect_rank(1, "repeat_rows")?;
        let mut data = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self::record(&[self], vec![n, self.shape[0]], data, || Op::RepeatRows { n })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Self::record(&[self], shape.to_vec(), self.to_vec(), || Op::Reshape)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank(2, "transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self::record(&[self], vec![c, r], data, || Op::Transpose { rows: r, cols: c })
    }

    /// Concatenate along axis 0.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_batch: no inputs"))?;
        let tail = &first.shape[1..];
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            sizes.push(p.numel());
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Self::record(&refs, shape, data, || Op::Concat { sizes })
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() == 0 || len == 0 || start + len > self.shape[0] {
            return Err(invalid(format!(
                "slice_batch: {start}..{} out of range for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let data = self.data[start * row..(start + len) * row].to_vec();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::record(&[self], shape, data, || Op::Slice {
            offset: start * row,
            total: self.numel(),
        })
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 1.0);
        Self::record(&[self, other], vec![m, n], out, || Op::MatMul {
            a: self.data.clone(),
            b: other.data.clone(),
            m,
            k,
            n,
        })
    }

    /// 3x3 convolution, stride 1, zero padding 1, with per-output-channel bias.
    pub fn conv3x3(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.expect_rank(4, "conv3x3")?;
        let (b, ci, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if weight.rank() != 4 || weight.shape[1] != ci || weight.shape[2..] != [3, 3] {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        let co = weight.shape[0];
        if bias.shape != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv3x3 bias",
                lhs: weight.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let geo = ConvGeometry { b, ci, co, h, w };
        let out = geo.forward(&self.data, &weight.data, &bias.data);
        Self::record(&[self, weight, bias], vec![b, co, h, w], out, || Op::Conv {
            input: self.data.clone(),
            weight: weight.data.clone(),
            geo,
        })
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        self.expect_rank(4, "avg_pool2")?;
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!("avg_pool2: odd spatial extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for rows in self.data.chunks_exact(2 * w) {
            let (top, bottom) = rows.split_at(w);
            out.extend(
                top.chunks_exact(2)
                    .zip(bottom.chunks_exact(2))
                    .map(|(t, u)| 0.25 * (t[0] + t[1] + u[0] + u[1])),
            );
        }
        Self::record(&[self], vec![b, c, oh, ow], out, || Op::AvgPool { h, w })
    }

    /// `relu` followed by `avg_pool2` in one pass; bitwise equal to the pair.
    pub fn relu_avg_pool2(&self) -> Result<Tensor> {
        self.expect_rank(4, "relu_avg_pool2")?;
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!("relu_avg_pool2: odd spatial extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for rows in self.data.chunks_exact(2 * w) {
            let (top, bottom) = rows.split_at(w);
            out.extend(
                top.chunks_exact(2)
                    .zip(bottom.chunks_exact(2))
                    .map(|(t, u)| 0.25 * (t[0].max(0.0) + t[1].max(0.0) + u[0].max(0.0) + u[1].max(0.0))),
            );
        }
        Self::record(&[self], vec![b, c, oh, ow], out, || Op::ReluAvgPool {
            input: self.data.clone(),
            w,
        })
    }

    /// Log-softmax over the last axis of a rank-2 tensor.
    pub fn log_softmax(&self) -> Result<Tensor> {
        self.expect_rank(2, "log_softmax")?;
        let n = self.shape[1];
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks_exact(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let saved = Rc::new(out.clone());
        Self::record(&[self], self.shape.clone(), out, || Op::LogSoftmax {
            out: saved,
            cols: n,
        })
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(invalid(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// `c = alpha * a·b + c` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || (a.len() > (m - 1) * rsa + (k - 1) * csa));
    assert!(k == 0 || (b.len() > (k - 1) * rsb + (n - 1) * csb));
    // SAFETY: bounds asserted above; c is a dense row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
}

impl ConvGeometry {
    const COLS_BUDGET: usize = 1 << 16;

    fn chunk(&self) -> usize {
        (Self::COLS_BUDGET / (self.ci * 9 * self.h * self.w)).clamp(1, self.b)
    }

    /// Valid destination columns `[lo, hi)` for horizontal kernel offset `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        match kx {
            0 => (1, self.w),
            1 => (0, self.w),
            _ => (0, self.w - 1),
        }
    }

    fn im2col(&self, x: &[f64], b0: usize, nb: usize, cols: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let ncols = nb * h * w;
        for ci in 0..self.ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (lo, hi) = self.x_range(kx);
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * ncols..][..ncols];
                    for bb in 0..nb {
                        let plane = &x[((b0 + bb) * self.ci + ci) * h * w..][..h * w];
                        let dst = &mut row[bb * h * w..][..h * w];
                        for (y, drow) in dst.chunks_exact_mut(w).enumerate() {
                            let sy = y + ky;
                            if sy < 1 || sy > h {
                                drow.fill(0.0);
                                continue;
                            }
                            let srow = &plane[(sy - 1) * w..][..w];
                            // at most one padded column per side
                            if lo == 1 {
                                drow[0] = 0.0;
                            }
                            if hi < w {
                                drow[w - 1] = 0.0;
                            }
                            for (d, s) in drow[lo..hi].iter_mut().zip(&srow[lo + kx - 1..hi + kx - 1]) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], b0: usize, nb: usize, dx: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let ncols = nb * h * w;
        for ci in 0..self.ci {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (lo, hi) = self.x_range(kx);
                    let row = &cols[((ci * 9) + ky * 3 + kx) * ncols..][..ncols];
                    for bb in 0..nb {
                        let plane = &mut dx[((b0 + bb) * self.ci + ci) * h * w..][..h * w];
                        let src = &row[bb * h * w..][..h * w];
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < 1 || sy > h {
                                continue;
                            }
                            let prow = &mut plane[(sy - 1) * w..][lo + kx - 1..hi + kx - 1];
                            for (p, s) in prow.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                                *p += s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let hw = self.h * self.w;
        let kk = self.ci * 9;
        let mut out = Vec::with_capacity(self.b * self.co * hw);
        let chunk = self.chunk();
        SCRATCH.with(|s| {
            let (cols, tmp) = &mut *s.borrow_mut();
            cols.resize(cols.len().max(kk * chunk * hw), 0.0);
            tmp.resize(tmp.len().max(self.co * chunk * hw), 0.0);
            let mut b0 = 0;
            while b0 < self.b {
                let nb = chunk.min(self.b - b0);
                let n = nb * hw;
                self.im2col(x, b0, nb, &mut cols[..kk * n]);
                gemm(self.co, kk, n, weight, (kk, 1), &cols[..kk * n], (n, 1), &mut tmp[..self.co * n], 0.0);
                for bb in 0..nb {
                    for (o, b) in bias.iter().enumerate() {
                        out.extend(tmp[o * n + bb * hw..][..hw].iter().map(|s| s + b));
                    }
                }
                b0 += nb;
            }
        });
        out
    }

    /// Returns (dx, dweight, dbias), each only when requested.
    fn backward(
        &self,
        g: &[f64],
        x: &[f64],
        weight: &[f64],
        need: &[bool],
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let hw = self.h * self.w;
        let kk = self.ci * 9;
        let mut dx = need[0].then(|| vec![0.0; x.len()]);
        let mut dw = need[1].then(|| vec![0.0; weight.len()]);
        let db = need[2].then(|| {
            let mut db = vec![0.0; self.co];
            for bb in 0..self.b {
                for (o, d) in db.iter_mut().enumerate() {
                    *d += g[(bb * self.co + o) * hw..][..hw].iter().sum::<f64>();
                }
            }
            db
        });
        if dx.is_none() && dw.is_none() {
            return (dx, dw, db);
        }
        let chunk = self.chunk();
        let mut cols = vec![0.0; kk * chunk * hw];
        let mut gt = vec![0.0; self.co * chunk * hw];
        let mut b0 = 0;
        while b0 < self.b {
            let nb = chunk.min(self.b - b0);
            let n = nb * hw;
            for bb in 0..nb {
                for o in 0..self.co {
                    gt[o * n + bb * hw..][..hw]
                        .copy_from_slice(&g[((b0 + bb) * self.co + o) * hw..][..hw]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                self.im2col(x, b0, nb, &mut cols[..kk * n]);
                gemm(self.co, n, kk, &gt[..self.co * n], (n, 1), &cols[..kk * n], (1, n), dw, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(kk, self.co, n, weight, (1, kk), &gt[..self.co * n], (n, 1), &mut cols[..kk * n], 0.0);
                self.col2im(&cols[..kk * n], b0, nb, dx);
            }
            b0 += nb;
        }
        (dx, dw, db)
    }
}

/// Saved state for the reverse sweep of each primitive.
enum Op {
    Leaf,
    Add,
    Sub,
    Mul { a: Rc<Vec<f64>>, b: Rc<Vec<f64>> },
    Div { a: Rc<Vec<f64>>, b: Rc<Vec<f64>> },
    Affine { scale: f64 },
    Neg,
    Relu { input: Rc<Vec<f64>> },
    Exp { out: Rc<Vec<f64>> },
    Sqrt { out: Rc<Vec<f64>> },
    SumAll { n: usize },
    SumAxis { outer: usize, len: usize, inner: usize },
    L2Norm {
        input: Rc<Vec<f64>>,
        norms: Rc<Vec<f64>>,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SpatialMean { hw: usize },
    SpatialVar { input: Rc<Vec<f64>>, means: Vec<f64>, hw: usize },
    BroadcastHw { hw: usize },
    RepeatRows { n: usize },
    Reshape,
    Transpose { rows: usize, cols: usize },
    Concat { sizes: Vec<usize> },
    Slice { offset: usize, total: usize },
    MatMul { a: Rc<Vec<f64>>, b: Rc<Vec<f64>>, m: usize, k: usize, n: usize },
    Conv { input: Rc<Vec<f64>>, weight: Rc<Vec<f64>>, geo: ConvGeometry },
    AvgPool { h: usize, w: usize },
    ReluAvgPool { input: Rc<Vec<f64>>, w: usize },
    LogSoftmax { out: Rc<Vec<f64>>, cols: usize },
}

impl Op {
    fn backward(&self, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let one = |v: Vec<f64>| vec![Some(v)];
        match self {
            Op::Leaf => vec![],
            Op::Add => vec![
                need[0].then(|| g.to_vec()),
                need[1].then(|| g.to_vec()),
            ],
            Op::Sub => vec![
                need[0].then(|| g.to_vec()),
                need[1].then(|| g.iter().map(|x| -x).collect()),
            ],
            Op::Mul { a, b } => vec![
                need[0].then(|| zip(g, b, |g, b| g * b)),
                need[1].then(|| zip(g, a, |g, a| g * a)),
            ],
            Op::Div { a, b } => vec![
                need[0].then(|| zip(g, b, |g, b| g / b)),
                need[1].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect()
                }),
            ],
            Op::Affine { scale } => one(g.iter().map(|x| x * scale).collect()),
            Op::Neg => one(g.iter().map(|x| -x).collect()),
            Op::Relu { input } => one(zip(g, input, |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Exp { out } => one(zip(g, out, |g, y| g * y)),
            Op::Sqrt { out } => one(zip(g, out, |g, y| g * 0.5 / y)),
            Op::SumAll { n } => one(vec![g[0]; *n]),
            Op::SumAxis { outer, len, inner } => {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for a in 0..*len {
                        let base = (o * len + a) * inner;
                        dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                one(dx)
            }
            Op::L2Norm {
                input,
                norms,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; input.len()];
                for o in 0..*outer {
                    for a in 0..*len {
                        let base = (o * len + a) * inner;
                        for i in 0..*inner {
                            let nrm = norms[o * inner + i];
                            if nrm > 0.0 {
                                dx[base + i] = g[o * inner + i] * input[base + i] / nrm;
                            }
                        }
                    }
                }
                one(dx)
            }
            Op::SpatialMean { hw } => {
                let inv = 1.0 / *hw as f64;
                one(g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(*hw)).collect())
            }
            Op::SpatialVar { input, means, hw } => {
                let scale = 2.0 / *hw as f64;
                let mut dx = Vec::with_capacity(input.len());
                for (p, chunk) in input.chunks_exact(*hw).enumerate() {
                    dx.extend(chunk.iter().map(|x| g[p] * scale * (x - means[p])));
                }
                one(dx)
            }
            Op::BroadcastHw { hw } => one(g.chunks_exact(*hw).map(|c| c.iter().sum()).collect()),
            Op::RepeatRows { n } => {
                let d = g.len() / n;
                let mut dx = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    dx.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                one(dx)
            }
            Op::Reshape => one(g.to_vec()),
            Op::Transpose { rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        dx[i * cols + j] = g[j * rows + i];
                    }
                }
                one(dx)
            }
            Op::Concat { sizes } => {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&s, &nd)| {
                        let part = nd.then(|| g[off..off + s].to_vec());
                        off += s;
                        part
                    })
                    .collect()
            }
            Op::Slice { offset, total } => {
                let mut dx = vec![0.0; *total];
                dx[*offset..offset + g.len()].copy_from_slice(g);
                one(dx)
            }
            Op::MatMul { a, b, m, k, n } => {
                let da = need[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(*m, *n, *k, g, (*n, 1), b, (1, *n), &mut da, 0.0);
                    da
                });
                let db = need[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(*k, *m, *n, a, (1, *k), g, (*n, 1), &mut db, 0.0);
                    db
                });
                vec![da, db]
            }
            Op::Conv { input, weight, geo } => {
                let (dx, dw, db) = geo.backward(g, input, weight, need);
                vec![dx, dw, db]
            }
            Op::AvgPool { h, w } => {
                let (oh, ow) = (h / 2, w / 2);
                let planes = g.len() / (oh * ow);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = 0.25 * g[p * oh * ow + y * ow + x];
                            let i = p * h * w + 2 * y * w + 2 * x;
                            dx[i] = v;
                            dx[i + 1] = v;
                            dx[i + w] = v;
                            dx[i + w + 1] = v;
                        }
                    }
                }
                one(dx)
            }
            Op::ReluAvgPool { input, w } => {
                let w = *w;
                let ow = w / 2;
                let mut dx = vec![0.0; input.len()];
                for ((dx, x), g) in dx.chunks_exact_mut(2 * w).zip(input.chunks_exact(2 * w)).zip(g.chunks_exact(ow)) {
                    for (i, &gv) in g.iter().enumerate() {
                        let v = 0.25 * gv;
                        for j in [2 * i, 2 * i + 1, w + 2 * i, w + 2 * i + 1] {
                            if x[j] > 0.0 {
                                dx[j] = v;
                            }
                        }
                    }
                }
                one(dx)
            }
            Op::LogSoftmax { out, cols } => {
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(*cols).zip(out.chunks_exact(*cols)) {
                    let s: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * s));
                }
                one(dx)
            }
        }
    }
}

/// Primitive identifiers with their attributes, for uniform dispatch.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Affine { scale: f64, shift: f64 },
    MatMul,
    Conv3x3,
    Relu,
    AvgPool2,
    ReluAvgPool2,
    SpatialMean,
    SpatialVar,
    Sqrt,
    Sum,
    Mean,
    SumAxis(usize),
    BroadcastHw { h: usize, w: usize },
    RepeatRows(usize),
    LogSoftmax,
    Exp,
    Neg,
    L2NormAxis(usize),
    ConcatBatch,
    SliceBatch { start: usize, len: usize },
    Reshape(Vec<usize>),
    Transpose,
}

impl Primitive {
    pub fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => Some(2),
            Primitive::Conv3x3 => Some(3),
            Primitive::ConcatBatch => None,
            _ => Some(1),
        }
    }
}

/// Applies `op` to `inputs`, recording on the inputs' tape when any is differentiable.
pub fn forward_primitive(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(invalid(format!("{op:?}: expected {n} inputs, got {}", inputs.len())));
        }
    }
    let x = inputs.first().copied().ok_or_else(|| invalid(format!("{op:?}: no inputs")))?;
    match op {
        Primitive::Add => x.add(inputs[1]),
        Primitive::Sub => x.sub(inputs[1]),
        Primitive::Mul => x.mul(inputs[1]),
        Primitive::Div => x.div(inputs[1]),
        Primitive::Affine { scale, shift } => x.affine(*scale, *shift),
        Primitive::MatMul => x.matmul(inputs[1]),
        Primitive::Conv3x3 => x.conv3x3(inputs[1], inputs[2]),
        Primitive::Relu => x.relu(),
        Primitive::AvgPool2 => x.avg_pool2(),
        Primitive::ReluAvgPool2 => x.relu_avg_pool2(),
        Primitive::SpatialMean => x.spatial_mean(),
        Primitive::SpatialVar => x.spatial_var(),
        Primitive::Sqrt => x.sqrt(),
        Primitive::Sum => x.sum(),
        Primitive::Mean => x.mean(),
        Primitive::SumAxis(a) => x.sum_axis(*a),
        Primitive::BroadcastHw { h, w } => x.broadcast_hw(*h, *w),
        Primitive::RepeatRows(n) => x.repeat_rows(*n),
        Primitive::LogSoftmax => x.log_softmax(),
        Primitive::Exp => x.exp(),
        Primitive::Neg => x.neg(),
        Primitive::L2NormAxis(a) => x.l2_norm_axis(*a),
        Primitive::ConcatBatch => {
            let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
            Tensor::concat_batch(&owned)
        }
        Primitive::SliceBatch { start, len } => x.slice_batch(*start, *len),
        Primitive::Reshape(shape) => x.reshape(shape),
        Primitive::Transpose => x.transpose(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Scalarizes an arbitrary output with fixed pseudo-random weights so
    /// every output coordinate contributes to the checked gradient.
    fn project(y: &Tensor) -> Result<Tensor> {
        let w: Vec<f64> = (0..y.numel()).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        y.mul(&Tensor::new(y.shape().to_vec(), w)?)?.sum()
    }

    #[test]
    fn relu_definition() {
        let y = t(&[3], &[-1.0, 0.0, 2.0]).relu().unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn spatial_mean_of_constant() {
        let y = Tensor::full(&[1, 1, 4, 4], 3.5).spatial_mean().unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.item(), 3.5);
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&i).unwrap().data(), a.data());
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_slice(&[1.0, 2.0, 3.0]));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_log_softmax_pick() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let pick = t(&[1, 2], &[1.0, 0.0]);
        let loss = x.log_softmax().unwrap().mul(&pick).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert!((g.data()[0] - 0.5).abs() < 1e-15);
        assert!((g.data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_slice(&[1.0, 2.0]));
        let y = tape.leaf(&t(&[2, 2], &[1.0; 4]));
        let loss = x.sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&y).data(), &[0.0; 4]);
        assert_eq!(g.wrt(&y).shape(), &[2, 2]);
        assert_eq!(g.by_leaf().len(), 2);
    }

    #[test]
    fn errors_are_reported() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        match a.add(&b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            a.div(&Tensor::from_slice(&[1.0, 0.0])),
            Err(Error::DivisionByZero { .. })
        ));
        let tape = Tape::new();
        let x = tape.leaf(&a);
        let y = x.mul(&x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::NotScalar(_))));
        let s = y.sum().unwrap();
        tape.backward(&s).unwrap();
        assert!(matches!(tape.backward(&s), Err(Error::TapeConsumed)));
        assert!(matches!(x.relu(), Err(Error::TapeConsumed)));
        let other = Tape::new();
        let z = other.leaf(&a);
        let tape2 = Tape::new();
        let w = tape2.leaf(&a);
        assert!(matches!(z.add(&w), Err(Error::ForeignTape)));
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_slice(&[1.0]));
        let c = Tensor::from_slice(&[2.0]).exp().unwrap();
        assert!(!c.requires_grad());
        assert_eq!(tape.len(), 1);
        assert!(x.mul(&c).unwrap().requires_grad());
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn fused_relu_pool_matches_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[2, 3, 4, 6]);
        let grads = |fused: bool| {
            let tape = Tape::new();
            let xl = tape.leaf(&x);
            let y = if fused { xl.relu_avg_pool2() } else { xl.relu().unwrap().avg_pool2() }.unwrap();
            let loss = y.mul(&y).unwrap().sum().unwrap();
            (y.data().to_vec(), tape.backward(&loss).unwrap().wrt(&xl).data().to_vec())
        };
        assert_eq!(grads(true), grads(false));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[2, 3, 5, 4]);
        let w = rand_t(&mut rng, &[4, 3, 3, 3]);
        let b = rand_t(&mut rng, &[4]);
        let y = x.conv3x3(&w, &b).unwrap();
        let (h, wd) = (5isize, 4isize);
        for n in 0..2 {
            for o in 0..4 {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[o];
                        for c in 0..3 {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if sy >= 0 && sy < h && sx >= 0 && sx < wd {
                                        let xi = ((n * 3 + c) * 5 + sy as usize) * 4 + sx as usize;
                                        let wi = ((o * 3 + c) * 3 + ky as usize) * 3 + kx as usize;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let yi = ((n * 4 + o) * 5 + yy as usize) * 4 + xx as usize;
                        assert!((y.data()[yi] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-5;
        let cases: Vec<(Primitive, Vec<Tensor>)> = vec![
            (Primitive::Add, vec![rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 3])]),
            (Primitive::Sub, vec![rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 3])]),
            (Primitive::Mul, vec![rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 3])]),
            (
                Primitive::Div,
                vec![rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 3]).map(|x| 1.5 + x)],
            ),
            (Primitive::Affine { scale: -1.7, shift: 0.3 }, vec![rand_t(&mut rng, &[4])]),
            (Primitive::MatMul, vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2])]),
            (
                Primitive::Conv3x3,
                vec![rand_t(&mut rng, &[2, 2, 4, 4]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3])],
            ),
            (Primitive::AvgPool2, vec![rand_t(&mut rng, &[1, 2, 4, 6])]),
            (Primitive::ReluAvgPool2, vec![rand_t(&mut rng, &[1, 2, 4, 6])]),
            (Primitive::SpatialMean, vec![rand_t(&mut rng, &[2, 2, 3, 3])]),
            (Primitive::SpatialVar, vec![rand_t(&mut rng, &[2, 2, 3, 3])]),
            (Primitive::Sqrt, vec![rand_t(&mut rng, &[5]).map(|x| 1.2 + x)]),
            (Primitive::Sum, vec![rand_t(&mut rng, &[2, 3])]),
            (Primitive::Mean, vec![rand_t(&mut rng, &[2, 3])]),
            (Primitive::SumAxis(1), vec![rand_t(&mut rng, &[2, 3, 2])]),
            (Primitive::BroadcastHw { h: 2, w: 3 }, vec![rand_t(&mut rng, &[2, 2])]),
            (Primitive::RepeatRows(3), vec![rand_t(&mut rng, &[4])]),
            (Primitive::LogSoftmax, vec![rand_t(&mut rng, &[3, 4])]),
            (Primitive::Exp, vec![rand_t(&mut rng, &[4])]),
            (Primitive::Neg, vec![rand_t(&mut rng, &[4])]),
            (Primitive::L2NormAxis(1), vec![rand_t(&mut rng, &[3, 4])]),
            (Primitive::ConcatBatch, vec![rand_t(&mut rng, &[1, 3]), rand_t(&mut rng, &[2, 3])]),
            (Primitive::SliceBatch { start: 1, len: 2 }, vec![rand_t(&mut rng, &[4, 2])]),
            (Primitive::Reshape(vec![3, 2]), vec![rand_t(&mut rng, &[2, 3])]),
            (Primitive::Transpose, vec![rand_t(&mut rng, &[2, 3])]),
            // relu checked away from the kink
            (Primitive::Relu, vec![t(&[4], &[-0.8, 0.4, 1.1, -0.05])]),
        ];
        for (op, point) in cases {
            let err = grad_check(
                |args| {
                    let refs: Vec<&Tensor> = args.iter().collect();
                    project(&forward_primitive(&op, &refs)?)
                },
                &point,
                step,
            )
            .unwrap();
            assert!(err < 1e-4, "{op:?}: {err}");
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_t(&mut rng, &[2, 3]);
        let grad_of = |f: &dyn Fn(&Tensor) -> Result<Tensor>| {
            let tape = Tape::new();
            let x = tape.leaf(&p);
            let l = f(&x).unwrap();
            tape.backward(&l).unwrap().wrt(&x).to_vec()
        };
        let l1 = |x: &Tensor| x.mul(x)?.sum();
        let l2 = |x: &Tensor| x.exp()?.sum_axis(0)?.sum();
        let (a, b) = (0.7, -2.3);
        let combined = grad_of(&|x| l1(x)?.scale(a)?.add(&l2(x)?.scale(b)?));
        let g1 = grad_of(&l1);
        let g2 = grad_of(&l2);
        for i in 0..combined.len() {
            assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_t(&mut rng, &[2, 2, 4, 4]);
        let w0 = rand_t(&mut rng, &[3, 2, 3, 3]);
        let b0 = rand_t(&mut rng, &[3]);
        let run = || {
            let tape = Tape::new();
            let (x, w, b) = (tape.leaf(&x0), tape.leaf(&w0), tape.leaf(&b0));
            let y = x.conv3x3(&w, &b).unwrap().relu().unwrap().avg_pool2().unwrap();
            let l = y.spatial_var().unwrap().sum().unwrap();
            let g = tape.backward(&l).unwrap();
            [g.wrt(&x).to_vec(), g.wrt(&w).to_vec(), g.wrt(&b).to_vec()]
        };
        let (r1, r2) = (run(), run());
        for (a, b) in r1.iter().zip(&r2) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }
}
