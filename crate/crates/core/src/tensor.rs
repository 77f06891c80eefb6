//! Dense row-major `f64` arrays and a define-by-run reverse-mode graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Every operation appends
//! a node whose inputs precede it, so insertion order is a topological order
//! and [`Graph::backward`] is a single reverse sweep. Nodes that do not depend
//! on any gradient-requiring leaf are never visited on the way back.
//!
//! Matrix operations treat rank-0 tensors as `1×1` and rank-1 tensors of
//! length `n` as a single row `1×n`. Row-wise operations (softmax, layer norm,
//! l2 normalisation) act along the last axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` view of this tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "rank {} tensors are not supported by matrix ops",
                other.len()
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.dims2().map(|d| d.1).unwrap_or(self.numel());
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    MeanPool {
        x: Var,
        segments: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SegTake {
        x: Var,
        seg_len: usize,
        take: usize,
    },
    SegAppend {
        x: Var,
        extra: Var,
        seg_len: usize,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddTiled(..) => "add_tiled",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanPool { .. } => "mean_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(..) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegTake { .. } => "seg_take",
            Op::SegAppend { .. } => "seg_append",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddTiled(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MeanPool { x, .. } | Op::L2Normalize { x, .. } | Op::SegTake { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::SegAppend { x, extra, .. } => vec![*x, *extra],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one node, exposed for auditing graph structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` requires
    /// gradients but lies on no path to the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let shape = self.shapes.get(v.0)?;
        match &self.grads[v.0] {
            Some(g) => Some(Tensor {
                shape: shape.clone(),
                data: g.clone(),
            }),
            None => Some(Tensor::zeros(shape)),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                op: n.op.kind(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A constant leaf; nothing downstream of it alone is differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let out = transpose_raw(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    /// `x + tile(b)`: `b` (`r_b × c`) is repeated down the rows of `x`
    /// (`r × c`, `r_b` divides `r`). Covers bias rows and per-sequence
    /// positional tables.
    pub fn add_tiled(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let (rb, cb) = self.dims(b)?;
        if c != cb || rb == 0 || r % rb != 0 {
            return Err(Error::shape("add_tiled", self.shape(x), self.shape(b)));
        }
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % (rb * c)])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddTiled(x, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * c).collect(),
        };
        self.push(out, Op::Scale(a, c))
    }

    /// Multiply every entry of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|e| e * c).collect(),
        };
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x.exp()).collect(),
        };
        self.push(out, Op::Exp(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| gelu_raw(x)).collect(),
        };
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with learnable `gamma`/`beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention. Rows of `q`, `k`, `v` are
    /// partitioned into consecutive sequences of the given `segments`
    /// lengths; attention never crosses a sequence boundary.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (n, dm) = self.dims(q)?;
        if self.dims(k)? != (n, dm) || self.dims(v)? != (n, dm) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: {heads} heads do not divide width {dm}"
            )));
        }
        if segments.iter().sum::<usize>() != n {
            return Err(Error::shape("attention", self.shape(q), segments));
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; n * dm];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s * s).sum::<usize>() * heads);
        let mut offset = 0;
        for &len in segments {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..len {
                    let qi = &qd[(offset + i) * dm + col..(offset + i) * dm + col + dh];
                    let mut row: Vec<f64> = (0..len)
                        .map(|j| {
                            let kj = &kd[(offset + j) * dm + col..(offset + j) * dm + col + dh];
                            dot(qi, kj) * scale
                        })
                        .collect();
                    softmax_in_place(&mut row);
                    let o = &mut out[(offset + i) * dm + col..(offset + i) * dm + col + dh];
                    for (j, p) in row.iter().enumerate() {
                        let vj = &vd[(offset + j) * dm + col..(offset + j) * dm + col + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
            offset += len;
        }
        Ok(self.push(
            Tensor::new(vec![n, dm], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            check_finite(&out[i * c..(i + 1) * c], "softmax")?;
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            check_finite(row, "log_softmax")?;
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x)))
    }

    /// `-(1/rows) Σ_i Σ_j t_ij log softmax(logits_i)_j` as a scalar. Every
    /// target row must be nonnegative with positive mass; rows are expected
    /// to sum to one.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (r, c) = self.dims(logits)?;
        if targets.dims2()? != (r, c) {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                targets.shape(),
            ));
        }
        let td = targets.data();
        for i in 0..r {
            let row = &td[i * c..(i + 1) * c];
            if row.iter().any(|t| *t < 0.0 || !t.is_finite()) {
                return Err(Error::Contract(format!(
                    "cross_entropy: target row {i} has negative or non-finite weights"
                )));
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Contract(format!(
                    "cross_entropy: target row {i} is all zero"
                )));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &ld[i * c..(i + 1) * c];
            check_finite(row, "cross_entropy")?;
            let lse = log_sum_exp(row);
            for j in 0..c {
                let lp = row[j] - lse;
                probs[i * c + j] = lp.exp();
                if td[i * c + j] != 0.0 {
                    loss -= td[i * c + j] * lp;
                }
            }
        }
        loss /= r as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: td.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over the rows of each segment: `[Σ segments × c] -> [segments × c]`.
    pub fn mean_pool(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if segments.iter().sum::<usize>() != r || segments.contains(&0) {
            return Err(Error::shape("mean_pool", self.shape(x), segments));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; segments.len() * c];
        let mut offset = 0;
        for (s, &len) in segments.iter().enumerate() {
            for i in offset..offset + len {
                for j in 0..c {
                    out[s * c + j] += xd[i * c + j];
                }
            }
            for j in 0..c {
                out[s * c + j] /= len as f64;
            }
            offset += len;
        }
        Ok(self.push(
            Tensor::new(vec![segments.len(), c], out)?,
            Op::MeanPool {
                x,
                segments: segments.to_vec(),
            },
        ))
    }

    /// Scale each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "l2_normalize: row {i} has norm {n}"
                )));
            }
            norms[i] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { x, norms }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Select rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table)?;
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Lookup(format!(
                    "row {id} out of range for table with {r} rows"
                )));
            }
            out.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Keep the first `take` rows of every `seg_len`-row segment.
    pub fn seg_take(&mut self, x: Var, seg_len: usize, take: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if seg_len == 0 || take > seg_len || r % seg_len != 0 {
            return Err(Error::shape("seg_take", self.shape(x), &[seg_len, take]));
        }
        let xd = self.value(x).data();
        let segs = r / seg_len;
        let mut out = Vec::with_capacity(segs * take * c);
        for s in 0..segs {
            let start = s * seg_len * c;
            out.extend_from_slice(&xd[start..start + take * c]);
        }
        Ok(self.push(
            Tensor::new(vec![segs * take, c], out)?,
            Op::SegTake { x, seg_len, take },
        ))
    }

    /// Append all rows of `extra` after every `seg_len`-row segment of `x`.
    pub fn seg_append(&mut self, x: Var, extra: Var, seg_len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let (re, ce) = self.dims(extra)?;
        if c != ce || seg_len == 0 || r % seg_len != 0 {
            return Err(Error::shape("seg_append", self.shape(x), self.shape(extra)));
        }
        let xd = self.value(x).data();
        let ed = self.value(extra).data();
        let segs = r / seg_len;
        let mut out = Vec::with_capacity((r + segs * re) * c);
        for s in 0..segs {
            out.extend_from_slice(&xd[s * seg_len * c..(s + 1) * seg_len * c]);
            out.extend_from_slice(ed);
        }
        Ok(self.push(
            Tensor::new(vec![r + segs * re, c], out)?,
            Op::SegAppend { x, extra, seg_len },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every gradient-requiring node that
    /// is not an ancestor of `loss` receives an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &gy, &mut grads)?;
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if needs(a) {
                    // dA = dY · Bᵀ
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    accumulate(grads, *a, matmul_raw(gy, &bt, m, n, k));
                }
                if needs(b) {
                    // dB = Aᵀ · dY
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    accumulate(grads, *b, matmul_raw(&at, gy, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a)?;
                accumulate(grads, *a, transpose_raw(gy, c, r));
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, gy.to_vec());
                }
                if needs(b) {
                    accumulate(grads, *b, gy.to_vec());
                }
            }
            Op::AddTiled(x, b) => {
                if needs(x) {
                    accumulate(grads, *x, gy.to_vec());
                }
                if needs(b) {
                    let nb = self.value(*b).numel();
                    let mut gb = vec![0.0; nb];
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % nb] += g;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, zip_map(gy, self.value(*b).data(), |g, y| g * y));
                }
                if needs(b) {
                    accumulate(grads, *b, zip_map(gy, self.value(*a).data(), |g, x| g * x));
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, gy.iter().map(|g| g * c).collect());
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                if needs(x) {
                    accumulate(grads, *x, gy.iter().map(|g| g * c).collect());
                }
                if needs(s) {
                    accumulate(grads, *s, vec![dot(gy, self.value(*x).data())]);
                }
            }
            Op::Exp(a) => {
                accumulate(grads, *a, zip_map(gy, node.value.data(), |g, y| g * y));
            }
            Op::Gelu(a) => {
                let g = zip_map(gy, self.value(*a).data(), |g, x| g * gelu_grad_raw(x));
                accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.dims(*x)?;
                let gd = self.value(*gamma).data();
                if needs(gamma) || needs(beta) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gy[i * c + j] * xhat[i * c + j];
                            gb[j] += gy[i * c + j];
                        }
                    }
                    if needs(gamma) {
                        accumulate(grads, *gamma, gg);
                    }
                    if needs(beta) {
                        accumulate(grads, *beta, gb);
                    }
                }
                if needs(x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| gy[i * c + j] * gd[j]).collect();
                        let h = &xhat[i * c..(i + 1) * c];
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh = dot(&dxhat, h) / c as f64;
                        for j in 0..c {
                            gx[i * c + j] = inv_std[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (n, dm) = self.dims(*q)?;
                let dh = dm / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut gq = vec![0.0; n * dm];
                let mut gk = vec![0.0; n * dm];
                let mut gv = vec![0.0; n * dm];
                let mut offset = 0;
                let mut pcur = 0;
                for &len in segments {
                    for h in 0..*heads {
                        let col = h * dh;
                        let p = &probs[pcur..pcur + len * len];
                        pcur += len * len;
                        for i in 0..len {
                            let gyi = &gy[(offset + i) * dm + col..(offset + i) * dm + col + dh];
                            let prow = &p[i * len..(i + 1) * len];
                            // dP_ij = dO_i · V_j
                            let dp: Vec<f64> = (0..len)
                                .map(|j| {
                                    dot(
                                        gyi,
                                        &vd[(offset + j) * dm + col..(offset + j) * dm + col + dh],
                                    )
                                })
                                .collect();
                            let inner = dot(prow, &dp);
                            for j in 0..len {
                                // dV_j += P_ij dO_i
                                let gvj =
                                    &mut gv[(offset + j) * dm + col..(offset + j) * dm + col + dh];
                                for (a, b) in gvj.iter_mut().zip(gyi) {
                                    *a += prow[j] * b;
                                }
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    gq[(offset + i) * dm + col + t] +=
                                        ds * kd[(offset + j) * dm + col + t];
                                    gk[(offset + j) * dm + col + t] +=
                                        ds * qd[(offset + i) * dm + col + t];
                                }
                            }
                        }
                    }
                    offset += len;
                }
                if needs(q) {
                    accumulate(grads, *q, gq);
                }
                if needs(k) {
                    accumulate(grads, *k, gk);
                }
                if needs(v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::Softmax(x) => {
                let (r, c) = self.dims(*x)?;
                let y = node.value.data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &gy[i * c..(i + 1) * c];
                    let inner = dot(yi, gi);
                    for j in 0..c {
                        gx[i * c + j] = yi[j] * (gi[j] - inner);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let (r, c) = self.dims(*x)?;
                let y = node.value.data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let gi = &gy[i * c..(i + 1) * c];
                    let total: f64 = gi.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] = gi[j] - y[i * c + j].exp() * total;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.dims(*logits)?;
                let g = gy[0] / r as f64;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let ti = &targets[i * c..(i + 1) * c];
                    let mass: f64 = ti.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] = g * (probs[i * c + j] * mass - ti[j]);
                    }
                }
                accumulate(grads, *logits, gx);
            }
            Op::MeanPool { x, segments } => {
                let (r, c) = self.dims(*x)?;
                let mut gx = vec![0.0; r * c];
                let mut offset = 0;
                for (s, &len) in segments.iter().enumerate() {
                    for i in offset..offset + len {
                        for j in 0..c {
                            gx[i * c + j] = gy[s * c + j] / len as f64;
                        }
                    }
                    offset += len;
                }
                accumulate(grads, *x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let (r, c) = self.dims(*x)?;
                let y = node.value.data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &gy[i * c..(i + 1) * c];
                    let inner = dot(yi, gi);
                    for j in 0..c {
                        gx[i * c + j] = (gi[j] - yi[j] * inner) / norms[i];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![gy[0]; n]);
            }
            Op::GatherRows { table, ids } => {
                let (r, c) = self.dims(*table)?;
                let mut gt = vec![0.0; r * c];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += gy[i * c + j];
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::SegTake { x, seg_len, take } => {
                let (r, c) = self.dims(*x)?;
                let mut gx = vec![0.0; r * c];
                for s in 0..r / seg_len {
                    let dst = s * seg_len * c;
                    let src = s * take * c;
                    gx[dst..dst + take * c].copy_from_slice(&gy[src..src + take * c]);
                }
                accumulate(grads, *x, gx);
            }
            Op::SegAppend { x, extra, seg_len } => {
                let (r, c) = self.dims(*x)?;
                let ne = self.value(*extra).numel();
                let stride = seg_len * c + ne;
                let segs = r / seg_len;
                if needs(x) {
                    let mut gx = Vec::with_capacity(r * c);
                    for s in 0..segs {
                        gx.extend_from_slice(&gy[s * stride..s * stride + seg_len * c]);
                    }
                    accumulate(grads, *x, gx);
                }
                if needs(extra) {
                    let mut ge = vec![0.0; ne];
                    for s in 0..segs {
                        let start = s * stride + seg_len * c;
                        for (a, b) in ge.iter_mut().zip(&gy[start..start + ne]) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *extra, ge);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn check_finite(xs: &[f64], op: &str) -> Result<()> {
    if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op}: non-finite input {bad}")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_raw(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_raw(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `log Σ exp(x_i)` with max subtraction. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    xs.iter_mut().for_each(|v| *v /= total);
}

/// Numerically stable softmax of a plain vector.
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    check_finite(xs, "softmax")?;
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `-Σ t_j log softmax(logits)_j` for one row of logits.
pub fn cross_entropy(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            &[logits.len()],
            &[targets.len()],
        ));
    }
    if targets.iter().any(|t| *t < 0.0) || targets.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Contract(
            "cross_entropy targets must be nonnegative with positive mass".into(),
        ));
    }
    check_finite(logits, "cross_entropy")?;
    let lse = log_sum_exp(logits);
    Ok(logits
        .iter()
        .zip(targets)
        .filter(|(_, t)| **t != 0.0)
        .map(|(l, t)| -t * (l - lse))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut g = Graph::new();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = g.constant(Tensor::eye(2));
        let av = g.constant(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);

        let ones = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let s = g.matmul(av, ones).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 7.0]);
        assert_eq!(g.value(s).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&[0.0; 4]).unwrap();
        assert!(u.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let p = softmax(&[1000.0, 1000.1]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // exp(-0.1) / (1 + exp(-0.1)) in closed form
        let want = 1.0 / (1.0 + 0.1f64.exp());
        assert!((p[0] - want).abs() < 1e-14);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::Numeric(_))));
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::INFINITY, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let ce = cross_entropy(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        let ce = cross_entropy(&[1f64.ln(), 3f64.ln()], &[0.0, 1.0]).unwrap();
        assert!((ce + (0.75f64).ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], &[0.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn graph_cross_entropy_rejects_zero_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        let t = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0; 3]]).unwrap();
        assert!(matches!(g.cross_entropy(x, &t), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 2], 0.5));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let unused = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.exp(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn records_are_topological() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let b = g.transpose(a).unwrap();
        let c = g.add(a, b).unwrap();
        g.sum(c);
        for r in g.records() {
            assert!(r.inputs.iter().all(|i| *i < r.output));
        }
    }
}
