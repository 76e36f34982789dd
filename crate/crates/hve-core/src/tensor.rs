//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during a forward pass and records
//! one op per derived tensor. Forward values are computed eagerly when the
//! op is recorded; [`Tape::backward`] replays the record in reverse and
//! accumulates gradients into every tensor reachable from the root,
//! summing when a tensor is used more than once.
//!
//! Reductions whose operands are semantically *sets* (softmax denominators,
//! axis sums/means, attention-weighted row sums) accumulate in value-sorted
//! order, so permuting the operand rows permutes the output exactly instead
//! of perturbing the last ulp. All other accumulations run in index order.
//! Evaluation is single-threaded per tape and bit-reproducible.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("autodiff contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle into a [`Tape`]'s tensor arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A dense row-major tensor. `grad` is populated by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddRow { x: TensorId, v: TensorId },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    Softplus { x: TensorId },
    Ln { x: TensorId },
    Scale { x: TensorId, c: f64 },
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Concat { xs: Vec<TensorId>, axis: usize },
    Conv2d { input: TensorId, kernels: TensorId, bias: TensorId },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    SumAxis { x: TensorId, axis: usize },
    MeanAxis { x: TensorId, axis: usize },
    L2Norm { x: TensorId },
    Acosh { x: TensorId },
    Reshape { x: TensorId },
    Pick { x: TensorId, index: usize },
    WeightedRowSum { w: TensorId, rows: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Recorded forward pass. Single-threaded; distinct tapes are independent.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Sum in ascending value order (total order over f64), so the result does
/// not depend on the order the terms were produced in.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// outer, axis length, inner strides for reductions along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient buffer, present after `backward` if the tensor was reached.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].tensor.data[0]
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let n = shape.iter().product();
        self.push(vec![0.0; n], shape, false, Op::Leaf)
    }

    pub fn ones(&mut self, shape: Vec<usize>) -> TensorId {
        let n = shape.iter().product();
        self.push(vec![1.0; n], shape, false, Op::Leaf)
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                for (j, bv) in row.iter().enumerate() {
                    out[i * n + j] += av * bv;
                }
            }
        }
        Ok(self.push(out, vec![m, n], false, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(out, vec![c, r], false, Op::Transpose { x }))
    }

    // ---- elementwise binary (same shape, or scalar rhs broadcast) ------

    fn binary(&mut self, opname: &'static str, a: TensorId, b: TensorId) -> Result<(Vec<usize>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let scalar_rhs = self.tensor(b).numel() == 1;
        if sa != sb && !scalar_rhs {
            return Err(TensorError::ShapeMismatch { op: opname, lhs: sa, rhs: sb });
        }
        Ok((sa, scalar_rhs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, scalar_rhs) = self.binary("add", a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if scalar_rhs {
            let s = db[0];
            da.iter().map(|v| v + s).collect()
        } else {
            da.iter().zip(db).map(|(x, y)| x + y).collect()
        };
        Ok(self.push(out, shape, false, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, scalar_rhs) = self.binary("sub", a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if scalar_rhs {
            let s = db[0];
            da.iter().map(|v| v - s).collect()
        } else {
            da.iter().zip(db).map(|(x, y)| x - y).collect()
        };
        Ok(self.push(out, shape, false, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, scalar_rhs) = self.binary("mul", a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if scalar_rhs {
            let s = db[0];
            da.iter().map(|v| v * s).collect()
        } else {
            da.iter().zip(db).map(|(x, y)| x * y).collect()
        };
        Ok(self.push(out, shape, false, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (shape, scalar_rhs) = self.binary("div", a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if scalar_rhs {
            let s = db[0];
            da.iter().map(|v| v / s).collect()
        } else {
            da.iter().zip(db).map(|(x, y)| x / y).collect()
        };
        Ok(self.push(out, shape, false, Op::Div { a, b }))
    }

    /// Broadcast-add a length-c vector to every row of an [r, c] matrix.
    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        let vn = self.tensor(v).numel();
        if sx.len() != 2 || sx[1] != vn {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: sx, rhs: sv });
        }
        let (r, c) = (sx[0], sx[1]);
        let (dx, dv) = (self.data(x), self.data(v));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = dx[i * c + j] + dv[j];
            }
        }
        Ok(self.push(out, sx, false, Op::AddRow { x, v }))
    }

    // ---- elementwise unary ---------------------------------------------

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        Ok(self.push(out, shape, false, Op::Tanh { x }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|v| sigmoid_scalar(*v)).collect();
        Ok(self.push(out, shape, false, Op::Sigmoid { x }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        Ok(self.push(out, shape, false, Op::Relu { x }))
    }

    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        Ok(self.push(out, shape, false, Op::Softplus { x }))
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if let Some(v) = self.data(x).iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "ln",
                msg: format!("non-positive input {v}"),
            });
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        Ok(self.push(out, shape, false, Op::Ln { x }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        Ok(self.push(out, shape, false, Op::Scale { x, c }))
    }

    /// Elementwise inverse hyperbolic cosine. Inputs in [1 - 1e-12, 1) are
    /// clamped to 1; anything smaller is a domain error. The derivative at
    /// the clamp point is taken as 0.
    pub fn acosh(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let mut out = Vec::with_capacity(self.data(x).len());
        for &v in self.data(x) {
            if v < 1.0 - 1e-12 {
                return Err(TensorError::Domain {
                    op: "acosh",
                    msg: format!("input {v} below 1"),
                });
            }
            out.push(v.max(1.0).acosh());
        }
        Ok(self.push(out, shape, false, Op::Acosh { x }))
    }

    // ---- structured ops --------------------------------------------------

    /// Numerically stable softmax along `axis` (max-subtracted). The
    /// denominator is accumulated in sorted order so that permuting the
    /// entries of a slice permutes the output exactly.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::ShapeMismatch { op: "softmax", lhs: shape, rhs: vec![axis] });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(d[at(j)]);
                }
                let exps: Vec<f64> = (0..n).map(|j| (d[at(j)] - mx).exp()).collect();
                let denom = sorted_sum(exps.clone());
                for j in 0..n {
                    out[at(j)] = exps[j] / denom;
                }
            }
        }
        Ok(self.push(out, shape, false, Op::Softmax { x, axis }))
    }

    /// Layer normalization of a 1-D tensor with population variance:
    /// (x - mean) / sqrt(var + eps) * gamma + beta.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let n = self.tensor(x).numel();
        if sx.len() != 1 || self.tensor(gamma).numel() != n || self.tensor(beta).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let d = self.data(x);
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = (var + eps).sqrt();
        let (dg, db) = (self.data(gamma).to_vec(), self.data(beta).to_vec());
        let out: Vec<f64> = d
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / s * dg[i] + db[i])
            .collect();
        Ok(self.push(out, sx, false, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: vec![axis] });
        }
        let mut total = 0usize;
        for &t in xs {
            let s = self.shape(t);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0usize;
        for &t in xs {
            let nt = self.shape(t)[axis];
            let dt = self.data(t);
            for o in 0..outer {
                for j in 0..nt {
                    let src = (o * nt + j) * inner;
                    let dst = (o * total + offset + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&dt[src..src + inner]);
                }
            }
            offset += nt;
        }
        Ok(self.push(out, shape, false, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Valid (no padding) stride-1 2-D cross-correlation.
    /// input [c_in, h, w], kernels [c_out, c_in, kh, kw], bias [c_out].
    pub fn conv2d(&mut self, input: TensorId, kernels: TensorId, bias: TensorId) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kh > h || kw > w {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        if self.tensor(bias).numel() != cout {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![cout],
            });
        }
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let (di, dk, db) = (self.data(input), self.data(kernels), self.data(bias));
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = db[co];
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                acc += di[ci * h * w + (y + dy) * w + (x + dx)]
                                    * dk[((co * cin + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[co * ho * wo + y * wo + x] = acc;
                }
            }
        }
        Ok(self.push(out, vec![cout, ho, wo], false, Op::Conv2d { input, kernels, bias }))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        Ok(self.push(vec![s], vec![1], false, Op::SumAll { x }))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.tensor(x).numel();
        let s: f64 = self.data(x).iter().sum();
        Ok(self.push(vec![s / n as f64], vec![1], false, Op::MeanAll { x }))
    }

    /// Sum along `axis`, removing it. Accumulates in sorted order.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::ShapeMismatch { op: "sum_axis", lhs: shape, rhs: vec![axis] });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let terms: Vec<f64> = (0..n).map(|j| d[(o * n + j) * inner + i]).collect();
                out[o * inner + i] = sorted_sum(terms);
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(out, oshape, false, Op::SumAxis { x, axis }))
    }

    /// Mean along `axis`, removing it. Accumulates in sorted order.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let n = self.shape(x)[axis] as f64;
        let summed = self.sum_axis(x, axis)?;
        // Rewrite the op so backward scales in one step.
        let node = self.nodes.last_mut().unwrap();
        node.op = Op::MeanAxis { x, axis };
        node.tensor.data.iter_mut().for_each(|v| *v /= n);
        let _ = summed;
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Euclidean norm of the whole tensor. Gradient at the origin is 0.
    pub fn l2norm(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().map(|v| v * v).sum();
        Ok(self.push(vec![s.sqrt()], vec![1], false, Op::L2Norm { x }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(data, shape, false, Op::Reshape { x }))
    }

    /// Select one element of a 1-D tensor as a scalar.
    pub fn pick(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || index >= s[0] {
            return Err(TensorError::ShapeMismatch { op: "pick", lhs: s, rhs: vec![index] });
        }
        let v = self.data(x)[index];
        Ok(self.push(vec![v], vec![1], false, Op::Pick { x, index }))
    }

    /// Weighted sum of matrix rows: w [m] x rows [m, d] -> [1, d].
    /// Per output coordinate the m addends are summed in sorted order, so a
    /// consistent permutation of (w, rows) leaves the output bit-identical.
    pub fn weighted_row_sum(&mut self, w: TensorId, rows: TensorId) -> Result<TensorId> {
        let sw = self.shape(w).to_vec();
        let sr = self.shape(rows).to_vec();
        if sw.len() != 1 || sr.len() != 2 || sw[0] != sr[0] {
            return Err(TensorError::ShapeMismatch { op: "weighted_row_sum", lhs: sw, rhs: sr });
        }
        let (m, d) = (sr[0], sr[1]);
        let (dw, dr) = (self.data(w), self.data(rows));
        let mut out = vec![0.0; d];
        for col in 0..d {
            let terms: Vec<f64> = (0..m).map(|j| dw[j] * dr[j * d + col]).collect();
            out[col] = sorted_sum(terms);
        }
        Ok(self.push(out, vec![1, d], false, Op::WeightedRowSum { w, rows }))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar root. Accumulates gradients into every
    /// tensor reachable from the root; may be called once per tape.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already run on this tape".into(),
            ));
        }
        if self.tensor(root).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.propagate(&op, idx, &g, &mut grads);
            self.nodes[idx].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], id: TensorId, numel: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out_idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(b)[1];
                let (da, db) = (self.data(a), self.data(b));
                Self::accum(grads, a, m * k, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                });
                Self::accum(grads, b, k * n, |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += da[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let s = self.shape(x);
                let (r, c) = (s[0], s[1]);
                Self::accum(grads, x, r * c, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                let na = self.tensor(a).numel();
                let nb = self.tensor(b).numel();
                Self::accum(grads, a, na, |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                if nb == 1 && na != 1 {
                    Self::accum(grads, b, 1, |gb| gb[0] += g.iter().sum::<f64>());
                } else {
                    Self::accum(grads, b, nb, |gb| {
                        for (gi, gv) in gb.iter_mut().zip(g) {
                            *gi += gv;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                let na = self.tensor(a).numel();
                let nb = self.tensor(b).numel();
                Self::accum(grads, a, na, |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                if nb == 1 && na != 1 {
                    Self::accum(grads, b, 1, |gb| gb[0] -= g.iter().sum::<f64>());
                } else {
                    Self::accum(grads, b, nb, |gb| {
                        for (gi, gv) in gb.iter_mut().zip(g) {
                            *gi -= gv;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let na = self.tensor(a).numel();
                let nb = self.tensor(b).numel();
                let (da, db) = (self.data(a), self.data(b));
                if nb == 1 && na != 1 {
                    let s = db[0];
                    Self::accum(grads, a, na, |ga| {
                        for i in 0..na {
                            ga[i] += g[i] * s;
                        }
                    });
                    Self::accum(grads, b, 1, |gb| {
                        gb[0] += g.iter().zip(da).map(|(gv, av)| gv * av).sum::<f64>();
                    });
                } else {
                    Self::accum(grads, a, na, |ga| {
                        for i in 0..na {
                            ga[i] += g[i] * db[i];
                        }
                    });
                    Self::accum(grads, b, nb, |gb| {
                        for i in 0..nb {
                            gb[i] += g[i] * da[i];
                        }
                    });
                }
            }
            Op::Div { a, b } => {
                let na = self.tensor(a).numel();
                let nb = self.tensor(b).numel();
                let (da, db) = (self.data(a), self.data(b));
                if nb == 1 && na != 1 {
                    let s = db[0];
                    Self::accum(grads, a, na, |ga| {
                        for i in 0..na {
                            ga[i] += g[i] / s;
                        }
                    });
                    Self::accum(grads, b, 1, |gb| {
                        gb[0] -= g.iter().zip(da).map(|(gv, av)| gv * av).sum::<f64>() / (s * s);
                    });
                } else {
                    Self::accum(grads, a, na, |ga| {
                        for i in 0..na {
                            ga[i] += g[i] / db[i];
                        }
                    });
                    Self::accum(grads, b, nb, |gb| {
                        for i in 0..nb {
                            gb[i] -= g[i] * da[i] / (db[i] * db[i]);
                        }
                    });
                }
            }
            Op::AddRow { x, v } => {
                let s = self.shape(x);
                let (r, c) = (s[0], s[1]);
                Self::accum(grads, x, r * c, |gx| {
                    for (gi, gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                Self::accum(grads, v, c, |gv| {
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &self.nodes[out_idx].tensor.data;
                let n = y.len();
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[out_idx].tensor.data;
                let n = y.len();
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu { x } => {
                let d = self.data(x);
                let n = d.len();
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        if d[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Softplus { x } => {
                let d = self.data(x);
                let n = d.len();
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        gx[i] += g[i] * sigmoid_scalar(d[i]);
                    }
                });
            }
            Op::Ln { x } => {
                let d = self.data(x);
                let n = d.len();
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        gx[i] += g[i] / d[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let n = self.tensor(x).numel();
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        gx[i] += g[i] * c;
                    }
                });
            }
            Op::Acosh { x } => {
                let d = self.data(x);
                let n = d.len();
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        let v = d[i].max(1.0);
                        if v > 1.0 {
                            gx[i] += g[i] / (v * v - 1.0).sqrt();
                        }
                        // v == 1: clamped subgradient 0
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(x);
                let (outer, n, inner) = axis_split(shape, axis);
                let y = &self.nodes[out_idx].tensor.data;
                let numel = y.len();
                Self::accum(grads, x, numel, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.data(x);
                let n = d.len();
                let nf = n as f64;
                let mean = d.iter().sum::<f64>() / nf;
                let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let s = (var + eps).sqrt();
                let xhat: Vec<f64> = d.iter().map(|v| (v - mean) / s).collect();
                let dg = self.data(gamma);
                let h: Vec<f64> = (0..n).map(|i| dg[i] * g[i]).collect();
                let mean_h = h.iter().sum::<f64>() / nf;
                let mean_hx = h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                Self::accum(grads, x, n, |gx| {
                    for i in 0..n {
                        gx[i] += (h[i] - mean_h - xhat[i] * mean_hx) / s;
                    }
                });
                Self::accum(grads, gamma, n, |gg| {
                    for i in 0..n {
                        gg[i] += g[i] * xhat[i];
                    }
                });
                Self::accum(grads, beta, n, |gb| {
                    for i in 0..n {
                        gb[i] += g[i];
                    }
                });
            }
            Op::Concat { ref xs, axis } => {
                let oshape = self.shape(TensorId(out_idx));
                let (outer, total, inner) = axis_split(oshape, axis);
                let mut offset = 0usize;
                for &t in xs {
                    let nt = self.shape(t)[axis];
                    let numel = self.tensor(t).numel();
                    Self::accum(grads, t, numel, |gt| {
                        for o in 0..outer {
                            for j in 0..nt {
                                let src = (o * total + offset + j) * inner;
                                let dst = (o * nt + j) * inner;
                                for i in 0..inner {
                                    gt[dst + i] += g[src + i];
                                }
                            }
                        }
                    });
                    offset += nt;
                }
            }
            Op::Conv2d { input, kernels, bias } => {
                let si = self.shape(input);
                let sk = self.shape(kernels);
                let (cin, h, w) = (si[0], si[1], si[2]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (ho, wo) = (h - kh + 1, w - kw + 1);
                let di = self.data(input);
                let dk = self.data(kernels);
                Self::accum(grads, input, cin * h * w, |gi| {
                    for co in 0..cout {
                        for y in 0..ho {
                            for x in 0..wo {
                                let gv = g[co * ho * wo + y * wo + x];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for dy in 0..kh {
                                        for dx in 0..kw {
                                            gi[ci * h * w + (y + dy) * w + (x + dx)] +=
                                                gv * dk[((co * cin + ci) * kh + dy) * kw + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::accum(grads, kernels, cout * cin * kh * kw, |gk| {
                    for co in 0..cout {
                        for y in 0..ho {
                            for x in 0..wo {
                                let gv = g[co * ho * wo + y * wo + x];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for dy in 0..kh {
                                        for dx in 0..kw {
                                            gk[((co * cin + ci) * kh + dy) * kw + dx] +=
                                                gv * di[ci * h * w + (y + dy) * w + (x + dx)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::accum(grads, bias, cout, |gb| {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for y in 0..ho {
                            for x in 0..wo {
                                acc += g[co * ho * wo + y * wo + x];
                            }
                        }
                        gb[co] += acc;
                    }
                });
            }
            Op::SumAll { x } => {
                let n = self.tensor(x).numel();
                Self::accum(grads, x, n, |gx| {
                    for gi in gx.iter_mut() {
                        *gi += g[0];
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.tensor(x).numel();
                let c = g[0] / n as f64;
                Self::accum(grads, x, n, |gx| {
                    for gi in gx.iter_mut() {
                        *gi += c;
                    }
                });
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(x);
                let (outer, n, inner) = axis_split(shape, axis);
                let scale = match op {
                    Op::MeanAxis { .. } => 1.0 / n as f64,
                    _ => 1.0,
                };
                let numel = self.tensor(x).numel();
                Self::accum(grads, x, numel, |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::L2Norm { x } => {
                let norm = self.nodes[out_idx].tensor.data[0];
                let d = self.data(x);
                let n = d.len();
                Self::accum(grads, x, n, |gx| {
                    if norm > 0.0 {
                        for i in 0..n {
                            gx[i] += g[0] * d[i] / norm;
                        }
                    }
                    // norm == 0: subgradient 0
                });
            }
            Op::Reshape { x } => {
                let n = self.tensor(x).numel();
                Self::accum(grads, x, n, |gx| {
                    for (gi, gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
            Op::Pick { x, index } => {
                let n = self.tensor(x).numel();
                Self::accum(grads, x, n, |gx| {
                    gx[index] += g[0];
                });
            }
            Op::WeightedRowSum { w, rows } => {
                let sr = self.shape(rows);
                let (m, d) = (sr[0], sr[1]);
                let (dw, dr) = (self.data(w), self.data(rows));
                Self::accum(grads, w, m, |gw| {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for col in 0..d {
                            acc += g[col] * dr[j * d + col];
                        }
                        gw[j] += acc;
                    }
                });
                Self::accum(grads, rows, m * d, |gr| {
                    for j in 0..m {
                        for col in 0..d {
                            gr[j * d + col] += g[col] * dw[j];
                        }
                    }
                });
            }
        }
    }
}
