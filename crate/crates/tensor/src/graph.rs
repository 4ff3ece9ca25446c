use std::sync::Arc;

use crate::segment::{attention_backward, AttentionTape, Segment};
use crate::tensor::gemm;
use crate::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Vec<f64>>),
    Gelu(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
        mask: Option<Arc<Vec<bool>>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CosineRows(Var, Var),
    Reshape(Var),
    SegmentAttention(Box<AttentionTape>),
    SegmentMean(Var, Arc<Vec<Segment>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of eagerly evaluated operations.
///
/// Every op checks shapes when it is recorded and returns the handle of its
/// output. Gradients exist only after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Norms below this are treated as zero by [`Graph::cosine_rows`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

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

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        let t = Tensor::from_shared(t.shape().to_vec(), t.shared_values()).with_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Tensor::from_shared(t.shape().to_vec(), t.shared_values());
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf, tracked or not depending on `track`.
    pub fn leaf(&mut self, t: Tensor, track: bool) -> Var {
        if track {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = &self.nodes[v.0].value;
        if !t.is_scalar() {
            return Err(TensorError::Contract(format!(
                "expected a scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.values()[0])
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::shape(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub(crate) fn make(&self, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::from_shared(shape, Arc::new(values))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.values(a),
            (k as isize, 1),
            self.values(b),
            (n as isize, 1),
            &mut out,
            false,
        );
        let needs = self.needs(a) || self.needs(b);
        let t = self.make(vec![m, n], out);
        Ok(self.push(t, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.values(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        let t = self.make(vec![c, r], out);
        Ok(self.push(t, Op::Transpose(a), needs))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let t = self.make(self.shape(a).to_vec(), out);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector (shape `[n]` or `[1, n]`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.value(row).len() != n || self.shape(x).is_empty() {
            return Err(TensorError::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.values(row);
        let out = self
            .values(x)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let needs = self.needs(x) || self.needs(row);
        let t = self.make(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::AddRow(x, row), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values(a).iter().map(|v| v * c).collect();
        let needs = self.needs(a);
        let t = self.make(self.shape(a).to_vec(), out);
        self.push(t, Op::Scale(a, c), needs)
    }

    /// Elementwise product with a constant buffer of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(TensorError::shape("mul_const", self.shape(a), c.shape()));
        }
        let out = self
            .values(a)
            .iter()
            .zip(c.values())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a);
        let t = self.make(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::MulConst(a, c.shared_values()), needs))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .values(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let needs = self.needs(a);
        let t = self.make(self.shape(a).to_vec(), out);
        self.push(t, Op::Gelu(a), needs)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.values(a).iter().map(|&x| softplus(x)).collect();
        let needs = self.needs(a);
        let t = self.make(self.shape(a).to_vec(), out);
        self.push(t, Op::Softplus(a), needs)
    }

    fn axis_layout(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                ndim: shape.len(),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Softmax along `axis`, with the lane maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_layout("softmax", x, axis)?;
        let src = self.values(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        let t = self.make(self.shape(x).to_vec(), out);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Log-sum-exp of a matrix along `axis` (0 reduces rows, 1 reduces
    /// columns). With a mask, only entries flagged `true` take part; every
    /// lane must keep at least one entry.
    pub fn logsumexp(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims2("logsumexp", x)?;
        if axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: "logsumexp",
                axis,
                ndim: 2,
            });
        }
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(TensorError::shape("logsumexp", &[r, c], &[m.len()]));
            }
        }
        let (lanes, len) = if axis == 1 { (r, c) } else { (c, r) };
        let idx = |lane: usize, j: usize| if axis == 1 { lane * c + j } else { j * c + lane };
        let src = self.values(x);
        let keep = |k: usize| mask.map_or(true, |m| m[k]);
        let mut out = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                let k = idx(lane, j);
                if keep(k) {
                    max = max.max(src[k]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Contract(format!(
                    "logsumexp: lane {lane} along axis {axis} has no unmasked entry"
                )));
            }
            let s: f64 = (0..len)
                .map(|j| idx(lane, j))
                .filter(|&k| keep(k))
                .map(|k| (src[k] - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let needs = self.needs(x);
        let t = self.make(vec![lanes], out);
        Ok(self.push(
            t,
            Op::LogSumExp {
                x,
                axis,
                mask: mask.map(|m| Arc::new(m.to_vec())),
            },
            needs,
        ))
    }

    /// Normalizes each lane of the last dimension to zero mean and unit
    /// variance (`eps` added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::shape("layer_norm", &shape, &[]))?;
        if self.value(gain).len() != n {
            return Err(TensorError::shape("layer_norm", &shape, self.shape(gain)));
        }
        if self.value(bias).len() != n {
            return Err(TensorError::shape("layer_norm", &shape, self.shape(bias)));
        }
        let src = self.values(x);
        let g = self.values(gain);
        let b = self.values(bias);
        let rows = src.len() / n;
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normalized[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let t = self.make(shape, out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2("concat_rows", p)?;
            if c2 != c {
                return Err(TensorError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.values(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = self.make(vec![rows, c], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut cols = 0;
        for &p in parts {
            let (r2, c) = self.dims2("concat_cols", p)?;
            if r2 != r {
                return Err(TensorError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = self.make(vec![r, cols], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", a)?;
        if start >= end || end > r {
            return Err(TensorError::shape("slice_rows", &[r, c], &[start, end]));
        }
        let out = self.values(a)[start * c..end * c].to_vec();
        let needs = self.needs(a);
        let t = self.make(vec![end - start, c], out);
        Ok(self.push(t, Op::SliceRows(a, start), needs))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if start >= end || end > c {
            return Err(TensorError::shape("slice_cols", &[r, c], &[start, end]));
        }
        let src = self.values(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let needs = self.needs(a);
        let t = self.make(vec![r, end - start], out);
        Ok(self.push(t, Op::SliceCols(a, start), needs))
    }

    /// Table lookup: row `i` of the output is row `indices[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", table)?;
        if indices.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::shape("gather_rows", &[r, c], &[bad]));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(self.value(table).row(i));
        }
        let needs = self.needs(table);
        let t = self.make(vec![indices.len(), c], out);
        Ok(self.push(t, Op::GatherRows(table, indices.to_vec()), needs))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", a)?;
        let out = mean_of_rows(self.values(a), r, c);
        let needs = self.needs(a);
        let t = self.make(vec![1, c], out);
        Ok(self.push(t, Op::MeanRows(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values(a).iter().sum();
        let needs = self.needs(a);
        let t = Tensor::scalar(s);
        self.push(t, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.values(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(a);
        let t = Tensor::scalar(s);
        self.push(t, Op::Mean(a), needs)
    }

    /// Row-wise cosine similarity. `a` has one row (broadcast) or as many rows
    /// as `b`; the result has one entry per row of `b`. A pair where either
    /// norm is below [`COSINE_NORM_FLOOR`] scores 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2("cosine_rows", a)?;
        let (rb, cb) = self.dims2("cosine_rows", b)?;
        if ca != cb || (ra != 1 && ra != rb) {
            return Err(TensorError::shape("cosine_rows", self.shape(a), self.shape(b)));
        }
        let av = self.values(a);
        let bv = self.values(b);
        let out = (0..rb)
            .map(|i| {
                let ar = if ra == 1 { 0 } else { i };
                cosine(&av[ar * ca..(ar + 1) * ca], &bv[i * cb..(i + 1) * cb])
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let t = self.make(vec![rb], out);
        Ok(self.push(t, Op::CosineRows(a, b), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Reverse pass from a scalar node. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = &self.nodes[loss.0].value;
        if !t.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Reverse pass from an arbitrary node with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(TensorError::shape(
                "backward",
                self.nodes[root.0].value.shape(),
                &[seed.len()],
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        // Constants keep no gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.values();
        let needs = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                // dA = dC · Bᵀ
                acc(*a, &mut |ga| {
                    gemm(m, n, k, gout, (n as isize, 1), val(*b), (1, n as isize), ga, true)
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |gb| {
                    gemm(k, m, n, val(*a), (1, k as isize), gout, (n as isize, 1), gb, true)
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |ga| {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += gout[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| add_into(gb, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| gb.iter_mut().zip(gout).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gout[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += gout[k] * av[k];
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |gx| add_into(gx, gout));
                acc(*row, &mut |gr| {
                    let n = gr.len();
                    for chunk in gout.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += c * d)
            }),
            Op::MulConst(a, c) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += gout[k] * c[k];
                }
            }),
            Op::Gelu(a) => {
                let xs = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        let x = xs[k];
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        ga[k] += gout[k] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Softplus(a) => {
                let xs = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gout[k] * sigmoid(xs[k]);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = nodes[i].value.values();
                acc(*x, &mut |gx| {
                    for o in 0..*outer {
                        for q in 0..*inner {
                            let base = o * len * inner + q;
                            let dot: f64 = (0..*len)
                                .map(|j| gout[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..*len {
                                let k = base + j * inner;
                                gx[k] += y[k] * (gout[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis, mask } => {
                let xs = val(*x);
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let lse = nodes[i].value.values();
                acc(*x, &mut |gx| {
                    for row in 0..r {
                        for col in 0..c {
                            let k = row * c + col;
                            if mask.as_ref().is_some_and(|m| !m[k]) {
                                continue;
                            }
                            let lane = if *axis == 1 { row } else { col };
                            gx[k] += gout[lane] * (xs[k] - lse[lane]).exp();
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = nodes[gain.0].value.len();
                let g = val(*gain);
                let rows = normalized.len() / n;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let span = r * n..(r + 1) * n;
                        let dh: Vec<f64> = gout[span.clone()]
                            .iter()
                            .zip(g)
                            .map(|(d, gg)| d * gg)
                            .collect();
                        let h = &normalized[span];
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / n as f64;
                        for j in 0..n {
                            gx[r * n + j] +=
                                scale * (n as f64 * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += gout[r * n + j] * normalized[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for chunk in gout.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let slice = &gout[offset..offset + len];
                    acc(*p, &mut |gp| add_into(gp, slice));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.shape()[1];
                let mut col = 0;
                for p in parts {
                    let (r, c) = (nodes[p.0].value.shape()[0], nodes[p.0].value.shape()[1]);
                    acc(*p, &mut |gp| {
                        for row in 0..r {
                            add_into(
                                &mut gp[row * c..(row + 1) * c],
                                &gout[row * total + col..row * total + col + c],
                            );
                        }
                    });
                    col += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = nodes[a.0].value.shape()[1];
                acc(*a, &mut |ga| add_into(&mut ga[start * c..start * c + gout.len()], gout));
            }
            Op::SliceCols(a, start) => {
                let c = nodes[a.0].value.shape()[1];
                let (r, w) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        add_into(
                            &mut ga[row * c + start..row * c + start + w],
                            &gout[row * w..(row + 1) * w],
                        );
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let c = nodes[table.0].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (row, &src) in idx.iter().enumerate() {
                        add_into(&mut gt[src * c..(src + 1) * c], &gout[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let r = nodes[a.0].value.shape()[0];
                let c = gout.len();
                let inv = 1.0 / r as f64;
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        for j in 0..c {
                            ga[row * c + j] += gout[j] * inv;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|g| *g += gout[0])),
            Op::Mean(a) => {
                let inv = 1.0 / nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|g| *g += gout[0] * inv))
            }
            Op::CosineRows(a, b) => {
                let (ra, d) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let rb = nodes[b.0].value.shape()[0];
                let (av, bv) = (val(*a), val(*b));
                let cos = nodes[i].value.values();
                for row in 0..rb {
                    let ar = if ra == 1 { 0 } else { row };
                    let x = &av[ar * d..(ar + 1) * d];
                    let y = &bv[row * d..(row + 1) * d];
                    let nx = norm(x);
                    let ny = norm(y);
                    if nx < COSINE_NORM_FLOOR || ny < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let g = gout[row];
                    let c = cos[row];
                    acc(*a, &mut |ga| {
                        for j in 0..d {
                            ga[ar * d + j] += g * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        }
                    });
                    acc(*b, &mut |gb| {
                        for j in 0..d {
                            gb[row * d + j] += g * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                        }
                    });
                }
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, gout)),
            Op::SegmentAttention(tape) => {
                let d = nodes[tape.q.0].value.shape()[1];
                let (gq, gk, gv) =
                    attention_backward(tape, (val(tape.q), val(tape.k), val(tape.v)), d, gout);
                acc(tape.q, &mut |g| add_into(g, &gq));
                acc(tape.k, &mut |g| add_into(g, &gk));
                acc(tape.v, &mut |g| add_into(g, &gv));
            }
            Op::SegmentMean(a, segs) => {
                let c = gout.len() / segs.len();
                acc(*a, &mut |ga| {
                    for (s, seg) in segs.iter().enumerate() {
                        let inv = 1.0 / seg.len as f64;
                        for row in seg.start..seg.end() {
                            for j in 0..c {
                                ga[row * c + j] += gout[s * c + j] * inv;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity with the zero-norm guard used by [`Graph::cosine_rows`].
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm(x);
    let ny = norm(y);
    if nx < COSINE_NORM_FLOOR || ny < COSINE_NORM_FLOOR {
        return 0.0;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    dot / (nx * ny)
}

/// Column means of a row-major `r×c` buffer, summed top to bottom.
pub fn mean_of_rows(values: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in values.chunks(c).take(r) {
        add_into(&mut out, row);
    }
    let inv = r as f64;
    out.iter_mut().for_each(|v| *v /= inv);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::identity(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.values(y), &[1.0, 2.0, 3.0, 4.0]);

        let z = g.constant(Tensor::zeros(&[3, 3]));
        let any = g.constant(t(&[3, 3], &[1., -2., 3., 4., 5., -6., 7., 8., 9.]));
        let y = g.matmul(z, any).unwrap();
        assert!(g.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let expected = naive_matmul(a.values(), b.values(), 3, 4, 2);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let y = g.matmul(va, vb).unwrap();
        for (x, e) in g.values(y).iter().zip(&expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_uniform_and_oracle() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in g.values(y).iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_first_axis_of_matrix() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.values(y);
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
        assert!(v[1] > 0.99);
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.softmax(x, 2),
            Err(TensorError::InvalidAxis { axis: 2, ndim: 2, .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[2.5; 4]));
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        // variance 1, so the output is ±1/sqrt(1 + eps)
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.values(y)[0] + expected).abs() < 1e-12);
        assert!((g.values(y)[1] - expected).abs() < 1e-12);
        assert!((g.values(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_mismatched_gain() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let gain = g.constant(Tensor::zeros(&[2]));
        let bias = g.constant(Tensor::zeros(&[3]));
        assert!(g.layer_norm(x, gain, bias, 1e-5).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.5, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-2.0, 1.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // y = sum(x·A) + sum(x·B) must give the same gradient as two copies of x.
        let a = t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]);
        let b = t(&[2, 2], &[0.3, -0.7, 2.0, 1.0]);
        let xv = t(&[1, 2], &[0.4, -1.2]);

        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let (ca, cb) = (g.constant(a.clone()), g.constant(b.clone()));
        let ya = g.matmul(x, ca).unwrap();
        let yb = g.matmul(x, cb).unwrap();
        let y = g.add(ya, yb).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();

        let mut h = Graph::new();
        let x1 = h.param(xv.clone());
        let x2 = h.param(xv);
        let (ca, cb) = (h.constant(a), h.constant(b));
        let ya = h.matmul(x1, ca).unwrap();
        let yb = h.matmul(x2, cb).unwrap();
        let y = h.add(ya, yb).unwrap();
        let s = h.sum(y);
        h.backward(s).unwrap();

        let summed: Vec<f64> = h
            .grad(x1)
            .unwrap()
            .iter()
            .zip(h.grad(x2).unwrap())
            .map(|(p, q)| p + q)
            .collect();
        assert_eq!(g.grad(x).unwrap(), summed.as_slice());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cosine_guard_and_range() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let b = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.cosine_rows(a, b).unwrap();
        assert_eq!(g.values(c), &[0.0, 0.0]);
        let a = g.constant(t(&[1, 2], &[2.0, 0.0]));
        let c = g.cosine_rows(a, b).unwrap();
        assert_eq!(g.values(c), &[1.0, 0.0]);
    }

    #[test]
    fn masked_logsumexp_skips_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 100.0, 2.0, 3.0]));
        let mask = [true, false, true, true];
        let r = g.logsumexp(x, 1, Some(&mask)).unwrap();
        assert!((g.values(r)[0] - 1.0).abs() < 1e-12);
        let expected = (2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((g.values(r)[1] - expected).abs() < 1e-12);
        assert!(g.logsumexp(x, 0, Some(&[false, true, false, true])).is_err());
    }
}
