//! Dense float64 tensors and a tape-based reverse-mode autodiff graph.
//!
//! Tensors are immutable values (shape + flat row-major data). Differentiable
//! computation goes through a [`Graph`]: leaves are inserted, ops append new
//! nodes, and [`Graph::backward`] walks the tape in reverse to produce a
//! [`GradientMap`]. There is no broadcasting beyond scalar [`Graph::scale`];
//! row replication is an explicit op ([`Graph::repeat_rows`]) so every shape
//! in the graph is visible at the call site.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Identifier of a node within one [`Graph`]. Not meaningful across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An n-dimensional float64 array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node_id: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient attached after a backward pass, if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        self.grad = grad;
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    /// Element accessor for 2-D tensors.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Gradients keyed by node id; only tensors with `requires_grad` appear.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    entries: BTreeMap<NodeId, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.entries.get(&id).map(|v| v.as_slice())
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> {
        self.entries.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Relu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    AvgPool1d {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    Mean {
        x: NodeId,
    },
    MeanRows {
        x: NodeId,
    },
    RepeatRows {
        x: NodeId,
        n: usize,
    },
    ConcatLast {
        xs: Vec<NodeId>,
    },
    ConcatRows {
        xs: Vec<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Append-only computation tape. Node order is a topological order by
/// construction, so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Raw matrix product used by both the forward op and its backward rules.
fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Average pooling along the leading (time) axis of an `[L, C]` tensor.
/// This is the shared forward kernel for the graph op and eager callers.
pub fn avg_pool1d_value(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::Dim(format!(
            "avg_pool1d expects [L, C], got {:?}",
            x.shape()
        )));
    }
    if kernel == 0 || stride == 0 {
        return Err(Error::Param(format!(
            "avg_pool1d kernel={kernel} stride={stride}; both must be >= 1"
        )));
    }
    let (l, c) = (x.shape()[0], x.shape()[1]);
    if l < kernel {
        return Err(Error::Input(format!(
            "avg_pool1d input length {l} shorter than kernel {kernel}"
        )));
    }
    let out_len = (l - kernel) / stride + 1;
    let mut out = vec![0.0; out_len * c];
    let inv = 1.0 / kernel as f64;
    for t in 0..out_len {
        for m in 0..kernel {
            let row = &x.data()[(t * stride + m) * c..(t * stride + m + 1) * c];
            for ch in 0..c {
                out[t * c + ch] += row[ch] * inv;
            }
        }
    }
    Tensor::from_vec(vec![out_len, c], out)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a copy of `t` as a leaf, keeping its `requires_grad` flag.
    pub fn insert(&mut self, t: &Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        let mut tensor = t.clone();
        tensor.node_id = Some(id);
        tensor.grad = None;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        id
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        let mut tensor = t;
        tensor.requires_grad = false;
        tensor.node_id = Some(id);
        tensor.grad = None;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
                node_id: Some(id),
            },
            op,
        });
        id
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    /// `a[m,k] . b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_data(self.data(a), self.data(b), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!(
                "transpose expects a 2-D tensor, got {s:?}"
            )));
        }
        let data = transpose_data(self.data(x), s[0], s[1]);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(vec![s[1], s[0]], data, rg, Op::Transpose { x }))
    }

    fn elementwise_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dim(format!(
                "{name}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(sa, data, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.needs_grad(&[x]);
        self.push(s, data, rg, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.needs_grad(&[x]);
        self.push(s, data, rg, Op::Relu { x })
    }

    /// Softmax along `axis`, computed with max-subtraction so large inputs
    /// cannot overflow.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Dim(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(s, data, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Param(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::Dim("layer_norm on 0-d tensor".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{d}] for input {s:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).numel() / d;
        let mut data = vec![0.0; rows * d];
        {
            let xs = self.data(x);
            let g = self.data(gamma);
            let b = self.data(beta);
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    data[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            s,
            data,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Mean pooling with window `kernel` and step `stride` along the time
    /// axis of an `[L, C]` tensor.
    pub fn avg_pool1d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let pooled = avg_pool1d_value(self.value(x), kernel, stride)?;
        let rg = self.needs_grad(&[x]);
        let (shape, data) = (pooled.shape.clone(), pooled.data);
        Ok(self.push(shape, data, rg, Op::AvgPool1d { x, kernel, stride }))
    }

    /// Mean over all elements; returns a `[1]` scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let m = self.data(x).iter().sum::<f64>() / n;
        let rg = self.needs_grad(&[x]);
        self.push(vec![1], vec![m], rg, Op::Mean { x })
    }

    /// Mean over the leading axis: `[L, d] -> [d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!(
                "mean_rows expects a 2-D tensor, got {s:?}"
            )));
        }
        let (l, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        let xs = self.data(x);
        for r in 0..l {
            for j in 0..d {
                out[j] += xs[r * d + j];
            }
        }
        for v in &mut out {
            *v /= l as f64;
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(vec![d], out, rg, Op::MeanRows { x }))
    }

    /// Tiles a `[d]` vector into `n` identical rows: `[n, d]`. Backward sums
    /// the row gradients, which is how bias vectors join matrix-shaped math.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(Error::Dim(format!(
                "repeat_rows expects a 1-D tensor, got {s:?}"
            )));
        }
        if n == 0 {
            return Err(Error::Param("repeat_rows needs n >= 1".into()));
        }
        let d = s[0];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(self.data(x));
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(vec![n, d], data, rg, Op::RepeatRows { x, n }))
    }

    /// Concatenation along the last axis; every other axis must agree.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Input("concat_last of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_last = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Dim(format!(
                    "concat_last: shape {s:?} incompatible with {first:?}"
                )));
            }
            total_last += s[s.len() - 1];
        }
        let outer: usize = lead.iter().product();
        let mut data = Vec::with_capacity(outer * total_last);
        for o in 0..outer {
            for &x in xs {
                let last = *self.shape(x).last().unwrap();
                let xs_data = self.data(x);
                data.extend_from_slice(&xs_data[o * last..(o + 1) * last]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        let rg = self.needs_grad(xs);
        Ok(self.push(shape, data, rg, Op::ConcatLast { xs: xs.to_vec() }))
    }

    /// Stacks 2-D tensors along the leading axis; column counts must agree.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Input("concat_rows of zero tensors".into()));
        }
        let cols = {
            let s = self.shape(xs[0]);
            if s.len() != 2 {
                return Err(Error::Dim(format!(
                    "concat_rows expects 2-D tensors, got {s:?}"
                )));
            }
            s[1]
        };
        let mut rows = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Dim(format!(
                    "concat_rows: shape {s:?} incompatible with column count {cols}"
                )));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &x in xs {
            data.extend_from_slice(self.data(x));
        }
        let rg = self.needs_grad(xs);
        Ok(self.push(
            vec![rows, cols],
            data,
            rg,
            Op::ConcatRows { xs: xs.to_vec() },
        ))
    }

    /// Reinterprets the flat data under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Dim(format!(
                "reshape: {:?} has {} elements, target {shape:?} wants {numel}",
                self.shape(x),
                self.value(x).numel()
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(shape, data, rg, Op::Reshape { x }))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// node with `requires_grad`; gradients from multiple consumers sum.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut map = GradientMap::default();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].tensor.requires_grad {
                    map.entries.insert(NodeId(i), g);
                }
            }
        }
        Ok(map)
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].tensor.requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_inputs(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose_data(self.data(*b), k, n);
                let da = matmul_data(g, &bt, m, n, k);
                self.add_into(grads, *a, &da);
                let at = transpose_data(self.data(*a), m, k);
                let db = matmul_data(&at, g, k, m, n);
                self.add_into(grads, *b, &db);
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let dx = transpose_data(g, s[1], s[0]);
                self.add_into(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.add_into(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_into(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                self.add_into(grads, *a, &da);
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.add_into(grads, *b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                self.add_into(grads, *x, &dx);
            }
            Op::Relu { x } => {
                // subgradient 0 at exactly 0
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_into(grads, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let s = self.shape(*x);
                let n = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let outer: usize = s[..*axis].iter().product();
                let y = self.data(NodeId(i));
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * n * inner + inn;
                        let mut dot = 0.0;
                        for j in 0..n {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let s = self.shape(*x);
                let d = *s.last().unwrap();
                let rows = self.value(*x).numel() / d;
                let xs = self.data(*x);
                let gm = self.data(*gamma);
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gm).map(|(&gv, &gmv)| gv * gmv).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.add_into(grads, *x, &dx);
                self.add_into(grads, *gamma, &dgamma);
                self.add_into(grads, *beta, &dbeta);
            }
            Op::AvgPool1d { x, kernel, stride } => {
                let s = self.shape(*x);
                let c = s[1];
                let out_len = self.shape(NodeId(i))[0];
                let mut dx = vec![0.0; s[0] * c];
                let inv = 1.0 / *kernel as f64;
                for t in 0..out_len {
                    for m in 0..*kernel {
                        for ch in 0..c {
                            dx[(t * stride + m) * c + ch] += g[t * c + ch] * inv;
                        }
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let dx = vec![g[0] / n as f64; n];
                self.add_into(grads, *x, &dx);
            }
            Op::MeanRows { x } => {
                let s = self.shape(*x);
                let (l, d) = (s[0], s[1]);
                let mut dx = vec![0.0; l * d];
                for r in 0..l {
                    for j in 0..d {
                        dx[r * d + j] = g[j] / l as f64;
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::RepeatRows { x, n } => {
                let d = self.shape(*x)[0];
                let mut dx = vec![0.0; d];
                for r in 0..*n {
                    for j in 0..d {
                        dx[j] += g[r * d + j];
                    }
                }
                self.add_into(grads, *x, &dx);
            }
            Op::ConcatLast { xs } => {
                let out_shape = self.shape(NodeId(i));
                let total_last = *out_shape.last().unwrap();
                let outer: usize = out_shape[..out_shape.len() - 1].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let last = *self.shape(x).last().unwrap();
                    let mut dx = vec![0.0; self.value(x).numel()];
                    for o in 0..outer {
                        let src = &g[o * total_last + offset..o * total_last + offset + last];
                        dx[o * last..(o + 1) * last].copy_from_slice(src);
                    }
                    self.add_into(grads, x, &dx);
                    offset += last;
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let numel = self.value(x).numel();
                    self.add_into(grads, x, &g[offset..offset + numel]);
                    offset += numel;
                }
            }
            Op::Reshape { x } => {
                self.add_into(grads, *x, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        g.insert(&Tensor::from_vec(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let out = g.matmul(i2, b).unwrap();
        assert_eq!(g.data(out), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut g, vec![2, 3], vec![0.0; 6]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[2, 3]"),
            "message should name both shapes: {msg}"
        );
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![0.0, 0.0, 0.0]);
        let s = g.softmax(x, 0).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let y = leaf(&mut g, vec![2], vec![0.0, 2.0f64.ln()]);
        let sy = g.softmax(y, 0).unwrap();
        assert!((g.data(sy)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.data(sy)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1000.0, 1000.0]);
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![0.0, 1.0]);
        assert!(matches!(g.softmax(x, 1), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_slices_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(1..7);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let shifted: Vec<f64> = data.iter().map(|v| v + 7.25).collect();

            let mut g = Graph::new();
            let x = leaf(&mut g, vec![rows, cols], data);
            let xs = leaf(&mut g, vec![rows, cols], shifted);
            let s = g.softmax(x, 1).unwrap();
            let ss = g.softmax(xs, 1).unwrap();
            for r in 0..rows {
                let row = &g.data(s)[r * cols..(r + 1) * cols];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            for (a, b) in g.data(s).iter().zip(g.data(ss)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_input_maps_to_beta() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![5.0, 5.0, 5.0]);
        let gamma = leaf(&mut g, vec![3], vec![1.0, 1.0, 1.0]);
        let beta = leaf(&mut g, vec![3], vec![0.0, 0.0, 0.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_two_point_hand_case() {
        // mean 2, population variance 1, so outputs are +-1/sqrt(1+eps)
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 3.0]);
        let gamma = leaf(&mut g, vec![2], vec![1.0, 1.0]);
        let beta = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((g.data(y)[0] + expected).abs() < 1e-12);
        assert!((g.data(y)[1] - expected).abs() < 1e-12);
        assert!((g.data(y)[0] + 0.999995).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gamma_passes_beta() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 3.0]);
        let gamma = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let beta = leaf(&mut g, vec![2], vec![7.0, 7.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.data(y), &[7.0, 7.0]);
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 4], vec![0.0; 8]);
        let gamma = leaf(&mut g, vec![3], vec![1.0; 3]);
        let beta = leaf(&mut g, vec![4], vec![0.0; 4]);
        assert!(matches!(
            g.layer_norm(x, gamma, beta, 1e-5),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn layer_norm_normalizes_mean_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let data: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![d], data);
        let gamma = leaf(&mut g, vec![d], vec![1.0; d]);
        let beta = leaf(&mut g, vec![d], vec![0.0; d]);
        let eps = 1e-5;
        let y = g.layer_norm(x, gamma, beta, eps).unwrap();
        let out = g.data(y);
        let mean = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < eps);
    }

    #[test]
    fn avg_pool_pairwise_means() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![4, 1], vec![1.0, 3.0, 5.0, 7.0]);
        let y = g.avg_pool1d(x, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 1]);
        assert_eq!(g.data(y), &[2.0, 6.0]);
    }

    #[test]
    fn avg_pool_kernel_one_is_identity() {
        let mut g = Graph::new();
        let data = vec![0.5, -1.0, 2.0, 4.0, -3.0, 9.0];
        let x = leaf(&mut g, vec![3, 2], data.clone());
        let y = g.avg_pool1d(x, 1, 1).unwrap();
        assert_eq!(g.data(y), data.as_slice());
    }

    #[test]
    fn avg_pool_output_length() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2048, 1], vec![0.0; 2048]);
        let y = g.avg_pool1d(x, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1024, 1]);
    }

    #[test]
    fn avg_pool_too_short() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3, 1], vec![0.0; 3]);
        assert!(matches!(g.avg_pool1d(x, 4, 1), Err(Error::Input(_))));
    }

    #[test]
    fn avg_pool_length_formula_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let l = rng.gen_range(1..64);
            let kernel = rng.gen_range(1..=l);
            let stride = rng.gen_range(1..8);
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![l, 2], vec![0.25; l * 2]);
            let y = g.avg_pool1d(x, kernel, stride).unwrap();
            assert_eq!(g.shape(y)[0], (l - kernel) / stride + 1);
        }
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let r = g.relu(x);
        assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);

        let m = leaf(&mut g, vec![3], vec![2.0, 4.0, 6.0]);
        let mean = g.mean(m);
        assert_eq!(g.data(mean), &[4.0]);

        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![1], vec![3.0]);
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn elementwise_shape_errors() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(Error::Dim(_))));
        assert!(matches!(g.mul(a, b), Err(Error::Dim(_))));
        let m = leaf(&mut g, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(g.concat_last(&[a, m]), Err(Error::Dim(_))));
    }

    #[test]
    fn node_ids_are_assigned_and_unique() {
        let t = Tensor::scalar(1.0);
        assert!(t.node_id().is_none());
        let mut g = Graph::new();
        let a = g.insert(&t);
        let b = g.insert(&t);
        assert_ne!(a, b);
        assert_eq!(g.value(a).node_id(), Some(a));
        assert_eq!(g.value(b).node_id(), Some(b));
        assert_eq!(g.len(), 2);
        assert!(!g.is_empty());
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Input(_))));
    }

    #[test]
    fn detached_tensor_absent_from_gradient_map() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![2.0]);
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.contains(x));
        assert!(!grads.contains(c));
    }

    #[test]
    fn gradient_accumulates_over_multiple_consumers() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![1.5]);
        let y = g.add(x, x).unwrap();
        let z = g.mean(y);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn graph_evaluation_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![3, 4], data);
            let s = g.softmax(x, 1).unwrap();
            let m = g.mean(s);
            (g.data(s).to_vec(), g.data(m)[0])
        };
        let (a, am) = run();
        let (b, bm) = run();
        assert_eq!(a, b);
        assert_eq!(am.to_bits(), bm.to_bits());
    }

    // -- finite-difference checks -------------------------------------------

    /// Central-difference gradient comparison for a graph-building closure.
    /// `build` receives leaves already inserted with requires_grad and must
    /// return a scalar loss node.
    fn fd_check<F>(inputs: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let eps = 1e-5;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.insert(t)).collect();
        let loss = build(&mut g, &ids);
        assert_eq!(g.value(loss).numel(), 1);
        let grads = g.backward(loss).unwrap();

        for (ti, t) in inputs.iter().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let analytic = grads.get(ids[ti]).expect("missing gradient").to_vec();
            for e in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut mod_inputs: Vec<Tensor> = inputs.to_vec();
                    mod_inputs[ti].data_mut()[e] += delta;
                    let mut gg = Graph::new();
                    let mids: Vec<NodeId> = mod_inputs.iter().map(|t| gg.insert(t)).collect();
                    let l = build(&mut gg, &mids);
                    gg.data(l)[0]
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[e];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                let rel = (a - fd).abs() / denom;
                assert!(
                    rel < tol,
                    "input {ti} entry {e}: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(shape, data).unwrap().with_grad()
    }

    #[test]
    fn backward_matches_finite_differences_for_all_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);

        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        fd_check(
            &[a, b],
            |g, ids| {
                let mm = g.matmul(ids[0], ids[1]).unwrap();
                g.mean(mm)
            },
            1e-6,
        );

        let x = rand_tensor(&mut rng, vec![3, 5]);
        let w = rand_tensor(&mut rng, vec![3, 5]);
        fd_check(
            &[x, w],
            |g, ids| {
                let s = g.softmax(ids[0], 1).unwrap();
                let p = g.mul(s, ids[1]).unwrap();
                g.mean(p)
            },
            1e-6,
        );

        let x = rand_tensor(&mut rng, vec![4, 6]);
        let gamma = rand_tensor(&mut rng, vec![6]);
        let beta = rand_tensor(&mut rng, vec![6]);
        let w = rand_tensor(&mut rng, vec![4, 6]);
        fd_check(
            &[x, gamma, beta, w],
            |g, ids| {
                let ln = g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let p = g.mul(ln, ids[3]).unwrap();
                g.mean(p)
            },
            1e-6,
        );

        let x = rand_tensor(&mut rng, vec![8, 3]);
        fd_check(
            &[x],
            |g, ids| {
                let p = g.avg_pool1d(ids[0], 3, 2).unwrap();
                g.mean(p)
            },
            1e-6,
        );

        // relu: keep inputs away from the kink at 0
        let mut relu_in = rand_tensor(&mut rng, vec![4, 4]);
        for v in relu_in.data_mut() {
            if v.abs() < 0.1 {
                *v = 0.1_f64.copysign(*v + 0.05);
            }
        }
        fd_check(
            &[relu_in],
            |g, ids| {
                let r = g.relu(ids[0]);
                g.mean(r)
            },
            1e-6,
        );

        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 3]);
        fd_check(
            &[a, b],
            |g, ids| {
                let s = g.sub(ids[0], ids[1]).unwrap();
                let m = g.mul(s, s).unwrap();
                let sc = g.scale(m, 0.75);
                g.mean(sc)
            },
            1e-6,
        );

        let v = rand_tensor(&mut rng, vec![5]);
        let w = rand_tensor(&mut rng, vec![3, 5]);
        fd_check(
            &[v, w],
            |g, ids| {
                let r = g.repeat_rows(ids[0], 3).unwrap();
                let p = g.mul(r, ids[1]).unwrap();
                g.mean(p)
            },
            1e-6,
        );

        let a = rand_tensor(&mut rng, vec![4, 2]);
        let b = rand_tensor(&mut rng, vec![4, 3]);
        fd_check(
            &[a, b],
            |g, ids| {
                let c = g.concat_last(&[ids[0], ids[1]]).unwrap();
                let m = g.mean_rows(c).unwrap();
                let r = g.reshape(m, vec![1, 5]).unwrap();
                let t = g.transpose(r).unwrap();
                g.mean(t)
            },
            1e-6,
        );

        let a = rand_tensor(&mut rng, vec![1, 4]);
        let b = rand_tensor(&mut rng, vec![2, 4]);
        fd_check(
            &[a, b],
            |g, ids| {
                let c = g.concat_rows(&[ids[0], ids[1]]).unwrap();
                g.mean(c)
            },
            1e-6,
        );
    }

    #[test]
    fn backward_mean_relu_matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&mut rng, vec![3, 3]);
        let v = rand_tensor(&mut rng, vec![3, 1]);
        fd_check(
            &[w, v],
            |g, ids| {
                let mm = g.matmul(ids[0], ids[1]).unwrap();
                let r = g.relu(mm);
                g.mean(r)
            },
            1e-6,
        );
    }
}
