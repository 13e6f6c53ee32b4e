//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation eagerly: each call computes its output
//! immediately and appends a node holding the op, its inputs and the result.
//! [`Graph::backward`] then walks the tape in reverse and applies each op's
//! vector-Jacobian product. Nodes are only ever appended, so the tape is
//! topologically ordered and acyclic by construction.
//!
//! Trainable tensors enter through [`Graph::param`] and are identified by name;
//! everything else enters through [`Graph::input`] and never receives a
//! gradient.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges of variable-length groups packed into one tensor; segment `b`
/// covers rows `offsets[b]..offsets[b + 1]`. Empty segments are allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self { offsets }
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of rows across all segments.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    /// Segment index of every packed row.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (b, len) in self.lengths().enumerate() {
            out.extend(std::iter::repeat_n(b, len));
        }
        out
    }
}

enum Op<T> {
    Param,
    Input,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, bias: NodeId },
    ScaleBy { x: NodeId, s: NodeId },
    Scale { x: NodeId, c: T },
    AddScalar { x: NodeId },
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Prelu { x: NodeId, alpha: NodeId },
    Sigmoid(NodeId),
    Softmax(NodeId),
    L2Normalize { x: NodeId, norms: Vec<T> },
    RowDot(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    Reshape(NodeId),
    SegmentSoftmax { x: NodeId, segs: Arc<Segments> },
    SegmentWeightedSum { w: NodeId, v: NodeId, segs: Arc<Segments> },
    BceWithLogits { logits: NodeId, labels: Vec<T> },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    Map { x: NodeId, df: fn(T) -> T },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Param | Input => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | RowDot(a, b) => vec![*a, *b],
            AddRow { x, bias } => vec![*x, *bias],
            ScaleBy { x, s } => vec![*x, *s],
            Prelu { x, alpha } => vec![*x, *alpha],
            Scale { x, .. }
            | AddScalar { x }
            | L2Normalize { x, .. }
            | GatherRows { x, .. }
            | SegmentSoftmax { x, .. }
            | Map { x, .. } => vec![*x],
            Exp(x) | Log(x) | Relu(x) | Sigmoid(x) | Softmax(x) | Sum(x) | Mean(x)
            | Reshape(x) => vec![*x],
            Concat(parts) => parts.clone(),
            SegmentWeightedSum { w, v, .. } => vec![*w, *v],
            BceWithLogits { logits, .. } | SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Registers a trainable tensor. Asking for the same name twice returns the
    /// existing node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param,
            value: value.clone(),
            requires_grad: true,
        });
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_from(&mut self, set: &ParamSet<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = set.get(name)?;
        Ok(self.param(name, value))
    }

    /// Adds a constant; it never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            value,
            requires_grad: false,
        });
        id
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    fn push(&mut self, name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn v(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    // ---- forward ops -----------------------------------------------------

    /// `a[m,k] x b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] x b[n,k]^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (self.v(a), self.v(b));
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 {
            return Err(shape_err(name, &[av.shape(), bv.shape()]));
        }
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if bk != k {
            return Err(shape_err(name, &[av.shape(), bv.shape()]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(name, Op::MatMul { a, b, trans_b }, value)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.v(a), self.v(b));
        if !av.same_shape(bv) {
            return Err(shape_err(name, &[av.shape(), bv.shape()]));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), v)
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.v(x), self.v(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(shape_err("add_row", &[xv.shape(), bv.shape()]));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_row", Op::AddRow { x, bias }, out)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (self.v(x), self.v(s));
        if sv.len() != 1 {
            return Err(shape_err("scale_by", &[xv.shape(), sv.shape()]));
        }
        let k = sv.item();
        let out = xv.map(|v| v * k);
        self.push("scale_by", Op::ScaleBy { x, s }, out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = T::of(c);
        let out = self.v(x).map(|v| v * c);
        self.push("scale", Op::Scale { x, c }, out)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = T::of(c);
        let out = self.v(x).map(|v| v + c);
        self.push("add_scalar", Op::AddScalar { x }, out)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.v(x).map(T::exp);
        self.push("exp", Op::Exp(x), out)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.v(x).map(T::ln);
        self.push("log", Op::Log(x), out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.v(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", Op::Relu(x), out)
    }

    /// Parametric ReLU; `alpha` holds one slope per column (or a single shared slope).
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId> {
        let (xv, av) = (self.v(x), self.v(alpha));
        let c = xv.cols();
        if av.len() != c && av.len() != 1 {
            return Err(shape_err("prelu", &[xv.shape(), av.shape()]));
        }
        let shared = av.len() == 1;
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            if *o <= T::zero() {
                let a = if shared { av.data()[0] } else { av.data()[i % c] };
                *o = *o * a;
            }
        }
        self.push("prelu", Op::Prelu { x, alpha }, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.v(x).map(sigmoid);
        self.push("sigmoid", Op::Sigmoid(x), out)
    }

    /// Row-wise softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.v(x);
        let c = xv.cols();
        let mut out = xv.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        self.push("softmax", Op::Softmax(x), out)
    }

    /// Row-wise L2 normalisation. Rows with norm below 1e-12 are an error.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.v(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        if c > 0 {
            for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n.as_f64() < 1e-12 {
                    return Err(TensorError::DegenerateNorm {
                        row: r,
                        norm: n.as_f64(),
                    });
                }
                for v in row.iter_mut() {
                    *v = *v / n;
                }
                norms.push(n);
            }
        }
        self.push("l2_normalize", Op::L2Normalize { x, norms }, out)
    }

    /// Row-wise dot product of two same-shaped matrices, giving `[rows, 1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.v(a), self.v(b));
        if !av.same_shape(bv) {
            return Err(shape_err("row_dot", &[av.shape(), bv.shape()]));
        }
        let c = av.cols().max(1);
        let data: Vec<T> = av
            .data()
            .chunks(c)
            .zip(bv.data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let rows = data.len();
        let out = Tensor::new(vec![rows, 1], data)?;
        self.push("row_dot", Op::RowDot(a, b), out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.v(x).data().iter().copied().sum();
        self.push("sum", Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.v(x);
        if xv.is_empty() {
            return Err(shape_err("mean", &[xv.shape()]));
        }
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::of(xv.len() as f64);
        self.push("mean", Op::Mean(x), Tensor::scalar(m))
    }

    /// Concatenates along the last axis; all parts must share the row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat", &[]));
        }
        let rows = self.v(parts[0]).rows();
        if parts.iter().any(|&p| self.v(p).rows() != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.v(p).shape()).collect();
            return Err(shape_err("concat", &shapes));
        }
        let total: usize = parts.iter().map(|&p| self.v(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.v(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat", Op::Concat(parts.to_vec()), out)
    }

    /// Selects rows of `x` by index; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let xv = self.v(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push(
            "gather_rows",
            Op::GatherRows {
                x,
                idx: Arc::new(idx),
            },
            out,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.v(x).clone().reshape(shape)?;
        self.push("reshape", Op::Reshape(x), out)
    }

    /// Softmax of a packed column of scores within each segment.
    pub fn segment_softmax(&mut self, x: NodeId, segs: Arc<Segments>) -> Result<NodeId> {
        let xv = self.v(x);
        if xv.len() != segs.total() {
            return Err(shape_err("segment_softmax", &[xv.shape(), &[segs.total()]]));
        }
        let mut out = xv.clone();
        for b in 0..segs.len() {
            softmax_in_place(&mut out.data_mut()[segs.range(b)]);
        }
        self.push("segment_softmax", Op::SegmentSoftmax { x, segs }, out)
    }

    /// `out[b] = sum_{p in segment b} w[p] * v[p]`, giving `[segments, cols(v)]`.
    /// Empty segments produce zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        w: NodeId,
        v: NodeId,
        segs: Arc<Segments>,
    ) -> Result<NodeId> {
        let (wv, vv) = (self.v(w), self.v(v));
        if wv.len() != segs.total() || vv.rows() != segs.total() {
            return Err(shape_err(
                "segment_weighted_sum",
                &[wv.shape(), vv.shape(), &[segs.total()]],
            ));
        }
        let d = vv.cols();
        let mut data = vec![T::zero(); segs.len() * d];
        for b in 0..segs.len() {
            let acc = &mut data[b * d..(b + 1) * d];
            for p in segs.range(b) {
                let wp = wv.data()[p];
                for (a, &x) in acc.iter_mut().zip(vv.row(p)) {
                    *a += wp * x;
                }
            }
        }
        let out = Tensor::new(vec![segs.len(), d], data)?;
        self.push("segment_weighted_sum", Op::SegmentWeightedSum { w, v, segs }, out)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels, in
    /// the stable form `max(z,0) - z*y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[T]) -> Result<NodeId> {
        let lv = self.v(logits);
        if lv.len() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce_with_logits", &[lv.shape(), &[labels.len()]]));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_logit(z.as_f64(), y.as_f64()))
            .sum();
        let out = Tensor::scalar(T::of(total / labels.len() as f64));
        self.push(
            "bce_with_logits",
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            out,
        )
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.v(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if rows != targets.len() || rows == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                &[lv.shape(), &[targets.len()]],
            ));
        }
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    len: c,
                });
            }
            let row = lv.row(r);
            total += logsumexp(row) - row[t].as_f64();
        }
        let out = Tensor::scalar(T::of(total / rows as f64));
        self.push(
            "softmax_cross_entropy",
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            out,
        )
    }

    /// Elementwise op given by a value function and its derivative. The
    /// derivative is trusted as-is, which is what lets tests plant a broken
    /// backward rule.
    pub fn map_unary(&mut self, x: NodeId, f: fn(T) -> T, df: fn(T) -> T) -> Result<NodeId> {
        let out = self.v(x).map(f);
        self.push("map_unary", Op::Map { x, df }, out)
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of a scalar node with respect to every registered parameter.
    /// Parameters that do not influence `loss` get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.v(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        let by_name = self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.v(*id).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_name })
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Param | Op::Input => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC * B^T  (or dC * B when B was used transposed)
                    gemm(m, n, k, g.data(), false, bv.data(), !*trans_b, T::zero(), &mut da);
                    accum(grads, *a, av.shape(), da);
                }
                if needs(*b) {
                    if *trans_b {
                        let mut db = vec![T::zero(); n * k];
                        gemm(n, m, k, g.data(), true, av.data(), false, T::zero(), &mut db);
                        accum(grads, *b, bv.shape(), db);
                    } else {
                        let mut db = vec![T::zero(); k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut db);
                        accum(grads, *b, bv.shape(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accum(grads, *a, g.shape(), g.data().to_vec());
                }
                if needs(*b) {
                    accum(grads, *b, g.shape(), g.data().to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accum(grads, *a, g.shape(), g.data().to_vec());
                }
                if needs(*b) {
                    accum(grads, *b, g.shape(), g.data().iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                if needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&gi, &bi)| gi * bi);
                    accum(grads, *a, av.shape(), d.collect());
                }
                if needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&gi, &ai)| gi * ai);
                    accum(grads, *b, bv.shape(), d.collect());
                }
            }
            Op::AddRow { x, bias } => {
                if needs(*x) {
                    accum(grads, *x, g.shape(), g.data().to_vec());
                }
                if needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c.max(1)) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accum(grads, *bias, self.v(*bias).shape(), db);
                }
            }
            Op::ScaleBy { x, s } => {
                let (xv, sv) = (self.v(*x), self.v(*s));
                if needs(*x) {
                    let k = sv.item();
                    accum(grads, *x, xv.shape(), g.data().iter().map(|&v| v * k).collect());
                }
                if needs(*s) {
                    let ds: T = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                    accum(grads, *s, sv.shape(), vec![ds]);
                }
            }
            Op::Scale { x, c } => {
                accum(grads, *x, g.shape(), g.data().iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar { x } => accum(grads, *x, g.shape(), g.data().to_vec()),
            Op::Exp(x) => {
                let d = g.data().iter().zip(y.data()).map(|(&gi, &yi)| gi * yi);
                accum(grads, *x, g.shape(), d.collect());
            }
            Op::Log(x) => {
                let xv = self.v(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gi, &xi)| gi / xi);
                accum(grads, *x, g.shape(), d.collect());
            }
            Op::Relu(x) => {
                let xv = self.v(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() });
                accum(grads, *x, g.shape(), d.collect());
            }
            Op::Prelu { x, alpha } => {
                let (xv, av) = (self.v(*x), self.v(*alpha));
                let c = xv.cols();
                let shared = av.len() == 1;
                let slope = |i: usize| if shared { av.data()[0] } else { av.data()[i % c] };
                if needs(*x) {
                    let d = g.data().iter().zip(xv.data()).enumerate().map(|(i, (&gi, &xi))| {
                        if xi > T::zero() {
                            gi
                        } else {
                            gi * slope(i)
                        }
                    });
                    accum(grads, *x, xv.shape(), d.collect());
                }
                if needs(*alpha) {
                    let mut da = vec![T::zero(); av.len()];
                    for (i, (&gi, &xi)) in g.data().iter().zip(xv.data()).enumerate() {
                        if xi <= T::zero() {
                            da[if shared { 0 } else { i % c }] += gi * xi;
                        }
                    }
                    accum(grads, *alpha, av.shape(), da);
                }
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi));
                accum(grads, *x, g.shape(), d.collect());
            }
            Op::Softmax(x) => {
                let c = y.cols().max(1);
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    softmax_vjp(yr, gr, &mut d);
                }
                accum(grads, *x, y.shape(), d);
            }
            Op::L2Normalize { x, norms } => {
                let c = y.cols().max(1);
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / n));
                }
                accum(grads, *x, y.shape(), d);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let c = av.cols().max(1);
                if needs(*a) {
                    let mut d = Vec::with_capacity(av.len());
                    for (r, row) in bv.data().chunks(c).enumerate() {
                        let gr = g.data()[r];
                        d.extend(row.iter().map(|&v| v * gr));
                    }
                    accum(grads, *a, av.shape(), d);
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(bv.len());
                    for (r, row) in av.data().chunks(c).enumerate() {
                        let gr = g.data()[r];
                        d.extend(row.iter().map(|&v| v * gr));
                    }
                    accum(grads, *b, bv.shape(), d);
                }
            }
            Op::Sum(x) => {
                let xv = self.v(*x);
                accum(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
            }
            Op::Mean(x) => {
                let xv = self.v(*x);
                let v = g.item() / T::of(xv.len() as f64);
                accum(grads, *x, xv.shape(), vec![v; xv.len()]);
            }
            Op::Concat(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut start = 0;
                for &p in parts {
                    let pv = self.v(p);
                    let c = pv.cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let off = r * total + start;
                            d.extend_from_slice(&g.data()[off..off + c]);
                        }
                        accum(grads, p, pv.shape(), d);
                    }
                    start += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.v(*x);
                let c = xv.cols();
                let mut d = vec![T::zero(); xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (dst, &s) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                accum(grads, *x, xv.shape(), d);
            }
            Op::Reshape(x) => {
                accum(grads, *x, self.v(*x).shape(), g.data().to_vec());
            }
            Op::SegmentSoftmax { x, segs } => {
                let mut d = Vec::with_capacity(y.len());
                for b in 0..segs.len() {
                    let r = segs.range(b);
                    softmax_vjp(&y.data()[r.clone()], &g.data()[r], &mut d);
                }
                accum(grads, *x, y.shape(), d);
            }
            Op::SegmentWeightedSum { w, v, segs } => {
                let (wv, vv) = (self.v(*w), self.v(*v));
                let dcols = vv.cols();
                if needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for b in 0..segs.len() {
                        let gb = g.row(b);
                        for p in segs.range(b) {
                            dw[p] = gb.iter().zip(vv.row(p)).map(|(&a, &c)| a * c).sum();
                        }
                    }
                    accum(grads, *w, wv.shape(), dw);
                }
                if needs(*v) {
                    let mut dv = vec![T::zero(); vv.len()];
                    for b in 0..segs.len() {
                        let gb = g.row(b);
                        for p in segs.range(b) {
                            let wp = wv.data()[p];
                            for (dst, &gi) in dv[p * dcols..(p + 1) * dcols].iter_mut().zip(gb) {
                                *dst = gi * wp;
                            }
                        }
                    }
                    accum(grads, *v, vv.shape(), dv);
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = self.v(*logits);
                let scale = g.item() / T::of(labels.len() as f64);
                let d = lv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale);
                accum(grads, *logits, lv.shape(), d.collect());
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let lv = self.v(*logits);
                let c = lv.cols();
                let scale = g.item() / T::of(targets.len() as f64);
                let mut d = lv.data().to_vec();
                for (row, &t) in d.chunks_mut(c).zip(targets) {
                    softmax_in_place(row);
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accum(grads, *logits, lv.shape(), d);
            }
            Op::Map { x, df } => {
                let xv = self.v(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gi, &xi)| gi * df(xi));
                accum(grads, *x, xv.shape(), d.collect());
            }
        }
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, shape: &[usize], d: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(d) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape")),
    }
}

fn softmax_vjp<T: Scalar>(y: &[T], g: &[T], out: &mut Vec<T>) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    out.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn logsumexp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Stable per-sample binary cross-entropy on a logit.
#[inline]
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Largest absolute entry over all gradients.
    pub fn max_abs(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(
            g.l2_normalize(x),
            Err(TensorError::DegenerateNorm { row: 1, .. })
        ));
    }

    #[test]
    fn sigmoid_and_softmax_at_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 2], &[0.0, 0.0]));
        let s = g.sigmoid(x).unwrap();
        let sm = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        assert_eq!(g.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_shape_error_names_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul:"), "{err}");
        assert!(g.matmul_t(a, b).is_ok());
    }

    #[test]
    fn grad_of_sum_is_all_ones() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", &Tensor::full(&[2, 3], 0.7));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("p").unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_self_dot() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", &t(&[1, 2], &[1.0, 2.0]));
        let d = g.row_dot(p, p).unwrap();
        let s = g.sum(d).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", &t(&[2], &[1.0, 2.0]));
        g.param("unused", &t(&[3], &[1.0, 1.0, 1.0]));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", &t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1], &[0.0]));
        assert!(matches!(g.log(x), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn segment_ops_handle_empty_segments() {
        let segs = Arc::new(Segments::from_lengths([2, 0, 1]));
        let mut g = Graph::<f64>::new();
        let s = g.input(Tensor::new(vec![3, 1], vec![0.0, 0.0, 5.0]).unwrap());
        let v = g.input(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap());
        let w = g.segment_softmax(s, segs.clone()).unwrap();
        assert_eq!(g.value(w).data(), &[0.5, 0.5, 1.0]);
        let out = g.segment_weighted_sum(w, v, segs).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 2]);
        assert_eq!(g.value(out).data(), &[0.5, 0.5, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::<f64>::new();
        let value = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let a = g.param("w", &value);
        let b = g.param("w", &value);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s).unwrap();
        assert_eq!(g.backward(l).unwrap().get("w").unwrap().data(), &[2.0, 2.0]);
    }
}
