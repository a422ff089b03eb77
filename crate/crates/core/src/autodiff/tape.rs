use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{gemm, small_gemm};
use super::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    /// Position of the node on its tape; inputs always precede outputs.
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Output of an op none of whose inputs require gradients.
    Constant,
    Matmul(usize, usize),
    Transpose(usize),
    BatchMatmul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        axis: Axis,
    },
    LogSoftmax {
        x: usize,
        axis: Axis,
    },
    SliceLast {
        x: usize,
        start: usize,
    },
    ConcatLast(Vec<usize>),
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
}

/// `[outer, len, inner]` view of a tensor around one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Calls `f` with the flat indices of every lane along the axis.
    fn for_each_lane(self, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let mut lane = (0..self.len).map(move |k| base + k * self.inner);
                f(&mut lane);
            }
        }
    }
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph. A tape is confined to one thread; weights
/// are attached as shared leaves and never copied.
pub struct Tape {
    id: u64,
    values: Vec<Arc<Tensor>>,
    tracked: Vec<bool>,
    ops: Vec<Op>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            tracked: Vec::new(),
            ops: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value as `x`, cut off from gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let value = Arc::clone(&self.values[i]);
        Ok(self.push_arc(value, Op::Constant, false))
    }

    /// Value of a node.
    ///
    /// Panics if `x` was recorded on a different tape.
    pub fn value(&self, x: Var) -> &Tensor {
        let i = self.check(x).expect("variable belongs to another tape");
        &self.values[i]
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.check(x).map(|i| self.tracked[i]).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        let i = self.check(x).ok()?;
        self.leaf_grads.get(i)?.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    fn check(&self, x: Var) -> Result<usize, AutodiffError> {
        if x.tape != self.id || x.index >= self.values.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(x.index)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, tracked: bool) -> Var {
        let op = if tracked || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Constant
        };
        let index = self.values.len();
        self.values.push(value);
        self.tracked.push(tracked);
        self.ops.push(op);
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let tracked = inputs.iter().any(|&i| self.tracked[i]);
        self.push_arc(Arc::new(value), op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), AutodiffError> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.values[a].shape().to_vec(),
                right: self.values[b].shape().to_vec(),
            });
        }
        Ok(())
    }

    fn require_rank(&self, op: &'static str, x: usize, rank: usize) -> Result<(), AutodiffError> {
        let shape = self.values[x].shape();
        if shape.len() != rank {
            return Err(AutodiffError::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: match rank {
                    2 => "expected a matrix",
                    3 => "expected a rank-3 tensor",
                    _ => "unexpected rank",
                },
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    /// Matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.require_rank("matmul", ia, 2)?;
        self.require_rank("matmul", ib, 2)?;
        let (sa, sb) = (self.values[ia].shape(), self.values[ib].shape());
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.values[ia].data(),
            false,
            self.values[ib].data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul(ia, ib),
            &[ia, ib],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        self.require_rank("transpose", i, 2)?;
        let (r, c) = (self.values[i].shape()[0], self.values[i].shape()[1]);
        let src = self.values[i].data();
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            for col in 0..c {
                out[col * r + row] = src[row * c + col];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(i), &[i]))
    }

    /// Per-batch product `[b, m, k] x [b, k, n] -> [b, m, n]`; with
    /// `transpose_b` the right operand is stored as `[b, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.require_rank("batch_matmul", ia, 3)?;
        self.require_rank("batch_matmul", ib, 3)?;
        let (sa, sb) = (self.values[ia].shape(), self.values[ib].shape());
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sb[0] != bs || k2 != k {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (da, db) = (self.values[ia].data(), self.values[ib].data());
        let mut out = vec![0.0; bs * m * n];
        for t in 0..bs {
            small_gemm(
                m,
                k,
                n,
                &da[t * m * k..(t + 1) * m * k],
                false,
                &db[t * k * n..(t + 1) * k * n],
                transpose_b,
                &mut out[t * m * n..(t + 1) * m * n],
                false,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![bs, m, n], out),
            Op::BatchMatmul {
                a: ia,
                b: ib,
                transpose_b,
            },
            &[ia, ib],
        ))
    }

    // ---------------------------------------------------------------------
    // Elementwise

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(op, ia, ib)?;
        let out = self.values[ia]
            .data()
            .iter()
            .zip(self.values[ib].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.values[ia].shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), make(ia, ib), &[ia, ib]))
    }

    fn map(&mut self, x: usize, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.values[x];
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a `[c]` vector to every row of a `[..., c]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let c = self.values[ix].last_dim();
        if self.values[ib].len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: self.values[ix].shape().to_vec(),
                right: self.values[ib].shape().to_vec(),
            });
        }
        let b = self.values[ib].data();
        let out = self.values[ix]
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let shape = self.values[ix].shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::AddRow { x: ix, bias: ib },
            &[ix, ib],
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        Ok(self.map(i, |v| v * factor, Op::Scale { x: i, factor }))
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        Ok(self.map(i, |v| v + value, Op::AddScalar(i)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        Ok(self.map(
            i,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(i),
        ))
    }

    /// Normalizes every row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let c = self.values[ix].last_dim();
        for p in [ig, ib] {
            if self.values[p].len() != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.values[ix].shape().to_vec(),
                    right: self.values[p].shape().to_vec(),
                });
            }
        }
        let rows = self.values[ix].rows();
        let mut normalized = Vec::with_capacity(rows * c);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.values[ix].data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            normalized.extend(row.iter().map(|v| (v - mean) * s));
        }
        let (g, b) = (self.values[ig].data(), self.values[ib].data());
        let out = normalized
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((n, g), b)| n * g + b))
            .collect();
        let shape = self.values[ix].shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                normalized,
                inv_std,
            },
            &[ix, ig, ib],
        ))
    }

    fn axis(&self, op: &'static str, x: usize, axis: usize) -> Result<Axis, AutodiffError> {
        let shape = self.values[x].shape();
        if axis >= shape.len() {
            return Err(AutodiffError::OutOfRange {
                op,
                what: "axis",
                value: axis,
                min: 0,
                max: shape.len().saturating_sub(1),
            });
        }
        Ok(Axis::of(shape, axis))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let ax = self.axis("softmax", i, axis)?;
        let src = self.values[i].data();
        let mut out = vec![0.0; src.len()];
        ax.for_each_lane(|lane| {
            let idx: Vec<usize> = lane.collect();
            let max = idx.iter().map(|&j| src[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &j in &idx {
                let e = (src[j] - max).exp();
                out[j] = e;
                total += e;
            }
            for &j in &idx {
                out[j] /= total;
            }
        });
        let shape = self.values[i].shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x: i, axis: ax }, &[i]))
    }

    /// Max-stabilized log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let ax = self.axis("log_softmax", i, axis)?;
        let src = self.values[i].data();
        let mut out = vec![0.0; src.len()];
        ax.for_each_lane(|lane| {
            let idx: Vec<usize> = lane.collect();
            let max = idx.iter().map(|&j| src[j]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = idx.iter().map(|&j| (src[j] - max).exp()).sum();
            let log_total = total.ln();
            for &j in &idx {
                out[j] = src[j] - max - log_total;
            }
        });
        let shape = self.values[i].shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { x: i, axis: ax },
            &[i],
        ))
    }

    // ---------------------------------------------------------------------
    // Structural

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let c = self.values[i].last_dim();
        if len == 0 || start + len > c {
            return Err(AutodiffError::OutOfRange {
                op: "slice_last",
                what: "slice end",
                value: start + len,
                min: start + 1,
                max: c,
            });
        }
        let out = self.values[i]
            .data()
            .chunks(c)
            .flat_map(|row| &row[start..start + len])
            .copied()
            .collect();
        let mut shape = self.values[i].shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceLast { x: i, start }, &[i]))
    }

    /// First `d` components along the last axis.
    pub fn slice_prefix(&mut self, x: Var, d: usize) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let c = self.values[i].last_dim();
        if d == 0 || d > c {
            return Err(AutodiffError::OutOfRange {
                op: "slice_prefix",
                what: "prefix length",
                value: d,
                min: 1,
                max: c,
            });
        }
        self.slice_last(x, 0, d)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        };
        let lead = &self.values[first].shape()[..self.values[first].rank() - 1];
        for &p in &idx[1..] {
            let s = self.values[p].shape();
            if &s[..s.len() - 1] != lead {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: self.values[first].shape().to_vec(),
                    right: s.to_vec(),
                });
            }
        }
        let rows = self.values[first].rows();
        let widths: Vec<usize> = idx.iter().map(|&p| self.values[p].last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.values[p].data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let var = self.push(Tensor::from_parts(shape, out), Op::ConcatLast(idx.clone()), &idx);
        Ok(var)
    }

    /// Selects rows of a `[r, c]` matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        self.require_rank("gather_rows", i, 2)?;
        let (r, c) = (self.values[i].shape()[0], self.values[i].shape()[1]);
        if indices.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: "no indices".into(),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &row in indices {
            if row >= r {
                return Err(AutodiffError::OutOfRange {
                    op: "gather_rows",
                    what: "row index",
                    value: row,
                    min: 0,
                    max: r - 1,
                });
            }
            out.extend_from_slice(self.values[i].row(row));
        }
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), c], out),
            Op::GatherRows {
                x: i,
                indices: indices.to_vec(),
            },
            &[i],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let n: usize = shape.iter().product();
        if n != self.values[i].len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: self.values[i].shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.values[i].data().to_vec();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(i), &[i]))
    }

    // ---------------------------------------------------------------------
    // Reductions and similarity

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let s = self.values[i].data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(i), &[i]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let t = &self.values[i];
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(i), &[i]))
    }

    /// Sums the last axis away; a rank-1 input yields shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let t = &self.values[i];
        let out: Vec<f64> = t.data().chunks(t.last_dim()).map(|r| r.iter().sum()).collect();
        let shape = if t.rank() <= 1 {
            vec![1]
        } else {
            t.shape()[..t.rank() - 1].to_vec()
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumLast(i), &[i]))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.check(x)?;
        let t = &self.values[i];
        let c = t.last_dim();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for (r, row) in t.data().chunks(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(AutodiffError::ZeroNorm {
                    op: "normalize_rows",
                    row: r,
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeRows { x: i, norms },
            &[i],
        ))
    }

    /// Row-wise cosine similarity of two equally shaped tensors.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var, AutodiffError> {
        let (iu, iv) = (self.check(u)?, self.check(v)?);
        self.same_shape("cosine_similarity", iu, iv)?;
        let nu = self.normalize_rows(u).map_err(|e| e.with_op("cosine_similarity"))?;
        let nv = self.normalize_rows(v).map_err(|e| e.with_op("cosine_similarity"))?;
        let prod = self.mul(nu, nv)?;
        self.sum_last(prod)
    }

    /// All-pairs cosine similarity `[a, d] x [b, d] -> [a, b]`.
    pub fn cosine_matrix(&mut self, u: Var, v: Var) -> Result<Var, AutodiffError> {
        let nu = self.normalize_rows(u).map_err(|e| e.with_op("cosine_matrix"))?;
        let nv = self.normalize_rows(v).map_err(|e| e.with_op("cosine_matrix"))?;
        let nvt = self.transpose(nv)?;
        self.matmul(nu, nvt)
    }

    // ---------------------------------------------------------------------
    // Reverse pass

    /// Propagates d(loss)/d(node) to every leaf that requires gradients.
    ///
    /// Leaf gradients accumulate across calls; use [`Tape::zero_grad`]
    /// between independent passes.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let root = self.check(loss).map_err(|_| AutodiffError::LossNotOnTape)?;
        if self.values[root].len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.values[root].shape().to_vec(),
            });
        }
        if !self.tracked[root] {
            return Ok(());
        }
        if self.leaf_grads.len() < self.values.len() {
            self.leaf_grads.resize(self.values.len(), None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);

        for node in (0..=root).rev() {
            let Some(g) = grads[node].take() else {
                continue;
            };
            let mut sink = Sink {
                grads: &mut grads,
                tracked: &self.tracked,
                values: &self.values,
            };
            let vals = &self.values;
            match &self.ops[node] {
                Op::Leaf => {
                    let slot = self.leaf_grads[node].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Constant => {}
                &Op::Matmul(a, b) => {
                    let (sa, sb) = (vals[a].shape(), vals[b].shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if let Some(da) = sink.slot(a) {
                        gemm(m, n, k, &g, false, vals[b].data(), true, da, true);
                    }
                    if let Some(db) = sink.slot(b) {
                        gemm(k, m, n, vals[a].data(), true, &g, false, db, true);
                    }
                }
                &Op::Transpose(x) => {
                    let (r, c) = (vals[x].shape()[0], vals[x].shape()[1]);
                    if let Some(dx) = sink.slot(x) {
                        for row in 0..r {
                            for col in 0..c {
                                dx[row * c + col] += g[col * r + row];
                            }
                        }
                    }
                }
                &Op::BatchMatmul { a, b, transpose_b } => {
                    let sa = vals[a].shape();
                    let (bs, m, k) = (sa[0], sa[1], sa[2]);
                    let n = vals[node].shape()[2];
                    if let Some(da) = sink.slot(a) {
                        for t in 0..bs {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let bt = &vals[b].data()[t * k * n..(t + 1) * k * n];
                            let out = &mut da[t * m * k..(t + 1) * m * k];
                            // C = A B  -> dA = G B^T ; C = A B^T (B stored n x k) -> dA = G B
                            small_gemm(m, n, k, gt, false, bt, !transpose_b, out, true);
                        }
                    }
                    if let Some(db) = sink.slot(b) {
                        for t in 0..bs {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let at = &vals[a].data()[t * m * k..(t + 1) * m * k];
                            let out = &mut db[t * k * n..(t + 1) * k * n];
                            if transpose_b {
                                small_gemm(n, m, k, gt, true, at, false, out, true);
                            } else {
                                small_gemm(k, m, n, at, true, gt, false, out, true);
                            }
                        }
                    }
                }
                &Op::Add(a, b) => {
                    sink.add(a, &g);
                    sink.add(b, &g);
                }
                &Op::Sub(a, b) => {
                    sink.add(a, &g);
                    if let Some(db) = sink.slot(b) {
                        for (d, v) in db.iter_mut().zip(&g) {
                            *d -= v;
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    if let Some(da) = sink.slot(a) {
                        for ((d, v), w) in da.iter_mut().zip(&g).zip(vals[b].data()) {
                            *d += v * w;
                        }
                    }
                    if let Some(db) = sink.slot(b) {
                        for ((d, v), w) in db.iter_mut().zip(&g).zip(vals[a].data()) {
                            *d += v * w;
                        }
                    }
                }
                &Op::AddRow { x, bias } => {
                    sink.add(x, &g);
                    let c = vals[bias].len();
                    if let Some(db) = sink.slot(bias) {
                        for row in g.chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                &Op::Scale { x, factor } => {
                    if let Some(dx) = sink.slot(x) {
                        for (d, v) in dx.iter_mut().zip(&g) {
                            *d += factor * v;
                        }
                    }
                }
                &Op::AddScalar(x) | &Op::Reshape(x) => sink.add(x, &g),
                &Op::Gelu(x) => {
                    if let Some(dx) = sink.slot(x) {
                        for ((d, v), &u) in dx.iter_mut().zip(&g).zip(vals[x].data()) {
                            let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u);
                            *d += v * (0.5 * (1.0 + t) + 0.5 * u * dt);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let c = vals[*gain].len();
                    if let Some(dg) = sink.slot(*gain) {
                        for (grow, nrow) in g.chunks(c).zip(normalized.chunks(c)) {
                            for ((d, v), n) in dg.iter_mut().zip(grow).zip(nrow) {
                                *d += v * n;
                            }
                        }
                    }
                    if let Some(db) = sink.slot(*bias) {
                        for grow in g.chunks(c) {
                            for (d, v) in db.iter_mut().zip(grow) {
                                *d += v;
                            }
                        }
                    }
                    let gain_v = vals[*gain].data();
                    if let Some(dx) = sink.slot(*x) {
                        let mut dn = vec![0.0; c];
                        for (r, (grow, nrow)) in g.chunks(c).zip(normalized.chunks(c)).enumerate() {
                            for ((o, v), w) in dn.iter_mut().zip(grow).zip(gain_v) {
                                *o = v * w;
                            }
                            let sum_dn: f64 = dn.iter().sum();
                            let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(a, b)| a * b).sum();
                            let s = inv_std[r] / c as f64;
                            for ((d, &dni), &ni) in dx[r * c..(r + 1) * c].iter_mut().zip(&dn).zip(nrow) {
                                *d += s * (c as f64 * dni - sum_dn - ni * sum_dn_n);
                            }
                        }
                    }
                }
                &Op::Softmax { x, axis } => {
                    let y = vals[node].data();
                    if let Some(dx) = sink.slot(x) {
                        axis.for_each_lane(|lane| {
                            let idx: Vec<usize> = lane.collect();
                            let dot: f64 = idx.iter().map(|&j| g[j] * y[j]).sum();
                            for &j in &idx {
                                dx[j] += y[j] * (g[j] - dot);
                            }
                        });
                    }
                }
                &Op::LogSoftmax { x, axis } => {
                    let y = vals[node].data();
                    if let Some(dx) = sink.slot(x) {
                        axis.for_each_lane(|lane| {
                            let idx: Vec<usize> = lane.collect();
                            let total: f64 = idx.iter().map(|&j| g[j]).sum();
                            for &j in &idx {
                                dx[j] += g[j] - y[j].exp() * total;
                            }
                        });
                    }
                }
                &Op::SliceLast { x, start } => {
                    let c = vals[x].last_dim();
                    let len = vals[node].last_dim();
                    if let Some(dx) = sink.slot(x) {
                        for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(len)) {
                            for (d, v) in drow[start..start + len].iter_mut().zip(grow) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::ConcatLast(parts) => {
                    let total = vals[node].last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let w = vals[p].last_dim();
                        if let Some(dp) = sink.slot(p) {
                            for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                                for (d, v) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                                    *d += v;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { x, indices } => {
                    let c = vals[*x].last_dim();
                    if let Some(dx) = sink.slot(*x) {
                        for (grow, &r) in g.chunks(c).zip(indices) {
                            for (d, v) in dx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                *d += v;
                            }
                        }
                    }
                }
                &Op::Sum(x) => {
                    if let Some(dx) = sink.slot(x) {
                        dx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                &Op::Mean(x) => {
                    let n = vals[x].len() as f64;
                    if let Some(dx) = sink.slot(x) {
                        dx.iter_mut().for_each(|d| *d += g[0] / n);
                    }
                }
                &Op::SumLast(x) => {
                    let c = vals[x].last_dim();
                    if let Some(dx) = sink.slot(x) {
                        for (drow, v) in dx.chunks_mut(c).zip(&g) {
                            drow.iter_mut().for_each(|d| *d += v);
                        }
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = vals[node].data();
                    let c = vals[*x].last_dim();
                    if let Some(dx) = sink.slot(*x) {
                        for (r, norm) in norms.iter().enumerate() {
                            let span = r * c..(r + 1) * c;
                            let yr = &y[span.clone()];
                            let gr = &g[span.clone()];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, &gv), &yv) in dx[span].iter_mut().zip(gr).zip(yr) {
                                *d += (gv - yv * dot) / norm;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Lazily allocated gradient buffers for the nodes of one backward pass.
struct Sink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    tracked: &'a [bool],
    values: &'a [Arc<Tensor>],
}

impl Sink<'_> {
    fn slot(&mut self, node: usize) -> Option<&mut [f64]> {
        if !self.tracked[node] {
            return None;
        }
        let len = self.values[node].len();
        Some(self.grads[node].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, node: usize, g: &[f64]) {
        if let Some(d) = self.slot(node) {
            for (d, v) in d.iter_mut().zip(g) {
                *d += v;
            }
        }
    }
}
