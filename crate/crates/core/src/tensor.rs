//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Every differentiable operation is recorded on a [`Tape`] as a node that
//! owns its forward value. [`Tape::backward`] replays the nodes in reverse
//! and accumulates gradients into every node whose `requires_grad` flag is
//! set. Only first-order derivatives are supported.
//!
//! Most operations work on row-major matrices: the last axis is the column
//! axis and every leading axis is folded into rows.

use std::sync::Arc;

use thiserror::Error;

/// Layer-norm epsilon used by the model unless configured otherwise.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} is out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    Data { len: usize, shape: Vec<usize> },
    #[error("invalid {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Data {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, index: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &r in index {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![index.len(), c],
            data,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Allowed attention edges for a group of `size` tokens.
///
/// Row `t` lists, in ascending order, the keys token `t` may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    allowed: Vec<Vec<usize>>,
}

impl Mask {
    /// Every token attends to every token.
    pub fn full(size: usize) -> Self {
        Self {
            size,
            allowed: (0..size).map(|_| (0..size).collect()).collect(),
        }
    }

    /// Support tokens `[0, support)` attend to the support set. Each of the
    /// following `targets` tokens attends to the support set and itself only.
    pub fn support_query(support: usize, targets: usize) -> Self {
        let size = support + targets;
        let allowed = (0..size)
            .map(|t| {
                let mut keys: Vec<usize> = (0..support).collect();
                if t >= support {
                    keys.push(t);
                }
                keys
            })
            .collect();
        Self { size, allowed }
    }

    /// Builds a mask from a row-major `size × size` boolean grid.
    pub fn from_bools(size: usize, grid: &[bool]) -> Result<Self> {
        if grid.len() != size * size {
            return Err(TensorError::Shape {
                op: "mask",
                lhs: vec![size, size],
                rhs: vec![grid.len()],
            });
        }
        let allowed = (0..size)
            .map(|t| (0..size).filter(|&s| grid[t * size + s]).collect())
            .collect();
        Ok(Self { size, allowed })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query].binary_search(&key).is_ok()
    }

    pub fn keys(&self, query: usize) -> &[usize] {
        &self.allowed[query]
    }

    fn edge_count(&self) -> usize {
        self.allowed.iter().map(Vec::len).sum()
    }
}

/// Arrangement of attention groups inside a token matrix.
///
/// Token `t` of group `g` lives in row `g * group_stride + t * token_stride`.
/// A single group over all rows is `GroupLayout::single(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub groups: usize,
    pub tokens: usize,
    pub group_stride: usize,
    pub token_stride: usize,
}

impl GroupLayout {
    pub fn single(tokens: usize) -> Self {
        Self {
            groups: 1,
            tokens,
            group_stride: 0,
            token_stride: 1,
        }
    }

    /// Groups are consecutive runs of `tokens` rows.
    pub fn contiguous(groups: usize, tokens: usize) -> Self {
        Self {
            groups,
            tokens,
            group_stride: tokens,
            token_stride: 1,
        }
    }

    /// Groups are interleaved columns of a row-major `tokens × groups` grid.
    pub fn strided(groups: usize, tokens: usize) -> Self {
        Self {
            groups,
            tokens,
            group_stride: 1,
            token_stride: groups,
        }
    }

    #[inline]
    fn row(&self, g: usize, t: usize) -> usize {
        g * self.group_stride + t * self.token_stride
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: GroupLayout,
        mask: Arc<Mask>,
        probs: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SegmentMean {
        x: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only; values are immutable once
/// recorded. Building a forward pass without any gradient-requiring leaves
/// records no backward work.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
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

    /// Accumulated gradient of `v`, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (&self.value(a).data, k, 1),
            (&self.value(b).data, n, 1),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects a matrix, got shape {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            rg,
            Op::Transpose(a),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = &self.value(bias).data;
        let data: Vec<f64> = self
            .value(a)
            .data
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor { shape, data }, rg, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a);
        let data = value.data.iter().map(|x| x * c).collect();
        let shape = value.shape.clone();
        let rg = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, rg, Op::Scale(a, c))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let data = value.data.iter().map(|&x| gelu(x)).collect();
        let shape = value.shape.clone();
        let rg = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, rg, Op::Gelu(a))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.value(x).data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Layer normalization over the last axis with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid(format!("layer-norm eps {eps}")));
        }
        let d = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xs, g, b) = (
            &self.value(x).data,
            &self.value(gain).data,
            &self.value(bias).data,
        );
        let rows = self.value(x).rows();
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Masked multi-head scaled dot-product attention over one group
    /// spanning every row of `q`, `k` and `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Arc<Mask>) -> Result<Var> {
        let rows = self.value(q).rows();
        self.grouped_attention(q, k, v, heads, GroupLayout::single(rows), mask)
    }

    /// Multi-head attention applied independently within each group of
    /// `layout`, all groups sharing one mask. Disallowed edges receive
    /// exactly zero weight.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: GroupLayout,
        mask: Arc<Mask>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: shape,
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "head count {heads} for model dimension {d}"
            )));
        }
        if mask.size() != layout.tokens {
            return Err(TensorError::Shape {
                op: "attention mask",
                lhs: vec![layout.tokens, layout.tokens],
                rhs: vec![mask.size(), mask.size()],
            });
        }
        if layout.groups * layout.tokens != rows
            || (layout.groups > 0
                && layout.tokens > 0
                && layout.row(layout.groups - 1, layout.tokens - 1) >= rows)
        {
            return Err(TensorError::Invalid(format!(
                "group layout {layout:?} for {rows} rows"
            )));
        }
        if mask.allowed.iter().any(Vec::is_empty) {
            return Err(TensorError::Invalid(
                "attention mask has a row with no allowed keys".into(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
        );
        let edges = mask.edge_count();
        let mut probs = vec![0.0; layout.groups * heads * edges];
        let mut out = vec![0.0; rows * d];
        let mut cursor = 0;
        for g in 0..layout.groups {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..layout.tokens {
                    let keys = mask.keys(t);
                    let qrow = layout.row(g, t) * d + off;
                    let p = &mut probs[cursor..cursor + keys.len()];
                    let mut max = f64::NEG_INFINITY;
                    for (slot, &s) in p.iter_mut().zip(keys) {
                        let krow = layout.row(g, s) * d + off;
                        let score = dot(&qs[qrow..qrow + dh], &ks[krow..krow + dh]) * scale;
                        *slot = score;
                        max = max.max(score);
                    }
                    let mut total = 0.0;
                    for slot in p.iter_mut() {
                        *slot = (*slot - max).exp();
                        total += *slot;
                    }
                    let o = &mut out[qrow..qrow + dh];
                    for (slot, &s) in p.iter_mut().zip(keys) {
                        *slot /= total;
                        let vrow = layout.row(g, s) * d + off;
                        axpy(*slot, &vs[vrow..vrow + dh], o);
                    }
                    cursor += keys.len();
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                mask,
                probs,
            },
        ))
    }

    /// Rows of `x` selected by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let value = self.value(x);
        let rows = value.rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!(
                "row index {bad} for {rows} rows"
            )));
        }
        let out = value.select_rows(index);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
        if ca != cb {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let rows = self.value(a).rows() + self.value(b).rows();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, ca],
                data,
            },
            rg,
            Op::ConcatRows(a, b),
        ))
    }

    /// Averages consecutive runs of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let value = self.value(x);
        let (rows, d) = (value.rows(), value.cols());
        if group == 0 || rows % group != 0 {
            return Err(TensorError::Invalid(format!(
                "segment size {group} for {rows} rows"
            )));
        }
        let n = rows / group;
        let mut out = vec![0.0; n * d];
        for (r, row) in value.data.chunks(d).enumerate() {
            axpy(1.0, row, &mut out[(r / group) * d..(r / group + 1) * d]);
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, d],
                data: out,
            },
            rg,
            Op::SegmentMean { x, group },
        ))
    }

    /// Mean softmax cross-entropy of `logits: [m, classes]` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = self.value(logits);
        let (m, c) = (value.rows(), value.cols());
        if labels.len() != m || m == 0 {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: value.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid(format!("label {bad} for {c} classes")));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for (r, row) in value.data.chunks(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Back-propagates from a single-element `loss`, seeding its gradient
    /// with 1. Gradients accumulate across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes, loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.backward_node(i, &grad);
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &mut self.nodes;
        let need = |nodes: &Vec<Node>, v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let n = nodes[b.0].value.shape[1];
                if need(nodes, a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dC · Bᵀ
                    gemm(m, n, k, (g, n, 1), (&nodes[b.0].value.data, 1, n), &mut da);
                    accumulate(nodes, a, da);
                }
                if need(nodes, b) {
                    let mut db = vec![0.0; k * n];
                    // dB = Aᵀ · dC
                    gemm(k, m, n, (&nodes[a.0].value.data, 1, k), (g, n, 1), &mut db);
                    accumulate(nodes, b, db);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[c * m + r];
                    }
                }
                accumulate(nodes, a, da);
            }
            &Op::Add(a, b) => {
                accumulate(nodes, a, g.to_vec());
                accumulate(nodes, b, g.to_vec());
            }
            &Op::AddRow(a, bias) => {
                accumulate(nodes, a, g.to_vec());
                if need(nodes, bias) {
                    let n = nodes[bias.0].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        axpy(1.0, row, &mut db);
                    }
                    accumulate(nodes, bias, db);
                }
            }
            &Op::Mul(a, b) => {
                if need(nodes, a) {
                    let da = zip_map(g, &nodes[b.0].value.data, |x, y| x * y);
                    accumulate(nodes, a, da);
                }
                if need(nodes, b) {
                    let db = zip_map(g, &nodes[a.0].value.data, |x, y| x * y);
                    accumulate(nodes, b, db);
                }
            }
            &Op::Scale(a, c) => {
                accumulate(nodes, a, g.iter().map(|x| x * c).collect());
            }
            &Op::Gelu(a) => {
                let da = zip_map(g, &nodes[a.0].value.data, |gy, x| gy * gelu_grad(x));
                accumulate(nodes, a, da);
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &nodes[i].value.data;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + c;
                        let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
                accumulate(nodes, x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value.data;
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, inv) in rstd.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let h = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gy[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * h[c];
                        dgain[c] += gy[c] * h[c];
                        dbias[c] += gy[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = inv * (gy[c] * gv[c] - mean_dh - h[c] * mean_dh_h);
                    }
                }
                accumulate(nodes, x, dx);
                accumulate(nodes, gain, dgain);
                accumulate(nodes, bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                mask,
                probs,
            } => {
                let (q, k, v, heads, layout) = (*q, *k, *v, *heads, *layout);
                let d = nodes[q.0].value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (
                    &nodes[q.0].value.data,
                    &nodes[k.0].value.data,
                    &nodes[v.0].value.data,
                );
                let mut dq = vec![0.0; qs.len()];
                let mut dk = vec![0.0; ks.len()];
                let mut dv = vec![0.0; vs.len()];
                let mut dp = Vec::new();
                let mut cursor = 0;
                for gi in 0..layout.groups {
                    for h in 0..heads {
                        let off = h * dh;
                        for t in 0..layout.tokens {
                            let keys = mask.keys(t);
                            let p = &probs[cursor..cursor + keys.len()];
                            cursor += keys.len();
                            let qrow = layout.row(gi, t) * d + off;
                            let go = &g[qrow..qrow + dh];
                            dp.clear();
                            let mut weighted = 0.0;
                            for (&pw, &s) in p.iter().zip(keys) {
                                let vrow = layout.row(gi, s) * d + off;
                                axpy(pw, go, &mut dv[vrow..vrow + dh]);
                                let dps = dot(go, &vs[vrow..vrow + dh]);
                                weighted += pw * dps;
                                dp.push(dps);
                            }
                            for ((&pw, &s), &dps) in p.iter().zip(keys).zip(&dp) {
                                let ds = pw * (dps - weighted) * scale;
                                let krow = layout.row(gi, s) * d + off;
                                axpy(ds, &ks[krow..krow + dh], &mut dq[qrow..qrow + dh]);
                                axpy(ds, &qs[qrow..qrow + dh], &mut dk[krow..krow + dh]);
                            }
                        }
                    }
                }
                accumulate(nodes, q, dq);
                accumulate(nodes, k, dk);
                accumulate(nodes, v, dv);
            }
            Op::Gather { x, index } => {
                let x = *x;
                let c = nodes[x.0].value.cols();
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for (r, &src) in index.iter().enumerate() {
                    axpy(1.0, &g[r * c..(r + 1) * c], &mut dx[src * c..(src + 1) * c]);
                }
                accumulate(nodes, x, dx);
            }
            &Op::ConcatRows(a, b) => {
                let split = nodes[a.0].value.len();
                accumulate(nodes, a, g[..split].to_vec());
                accumulate(nodes, b, g[split..].to_vec());
            }
            &Op::SegmentMean { x, group } => {
                let d = nodes[x.0].value.cols();
                let inv = 1.0 / group as f64;
                let rows = nodes[x.0].value.rows();
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let src = &g[(r / group) * d..(r / group + 1) * d];
                    for c in 0..d {
                        dx[r * d + c] = src[c] * inv;
                    }
                }
                accumulate(nodes, x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let m = labels.len();
                let c = probs.len() / m;
                let scale = g[0] / m as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * c + l] -= scale;
                }
                accumulate(nodes, logits, dl);
            }
            &Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                accumulate(nodes, x, vec![g[0]; n]);
            }
        }
    }
}

fn accumulate(nodes: &mut [Node], v: Var, delta: Vec<f64>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => node.grad = Some(delta),
    }
}

/// `c[m, n] = a[m, k] · b[k, n]` with explicit (row, column) strides for
/// the operands; `c` is row-major and overwritten.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    debug_assert!(a.0.len() > (m - 1) * a.1 + (k - 1) * a.2);
    debug_assert!(b.0.len() > (k - 1) * b.1 + (n - 1) * b.2);
    // SAFETY: the operand slices cover every strided index asserted above
    // and `c` holds exactly m·n row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
