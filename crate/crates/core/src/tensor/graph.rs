use super::gemm::{matmul_into, Operand};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Log(Var, T),
    MaxOverAxis {
        x: Var,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    SumOverAxis {
        x: Var,
        len: usize,
        inner: usize,
    },
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    RowNorms(Var),
    Concat(Vec<Var>),
    Transpose(Var),
    Affine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Sum(Var),
    Mean(Var),
    Diag(Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward is a reverse scan.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// (rows, cols) treating the last axis as columns.
fn row_split(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&cols) => Ok((shape.iter().product::<usize>() / cols, cols)),
        None => Err(mismatch(op, shape, &[])),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shape(v).to_vec();
        self.grad(v).map(|g| Tensor {
            shape,
            data: g.to_vec(),
        })
    }

    // ---- forward ops -----------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            m,
            k,
            n,
            Operand {
                data: self.value(a).data(),
                trans: false,
            },
            Operand {
                data: self.value(b).data(),
                trans: false,
            },
            T::zero(),
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals a trailing slice of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let bv = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(bv.len())
            .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .zip_values(a, b)
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .zip_values(a, b)
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.map_value(x, |v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.map_value(x, |v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map_value(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    /// `ln(x + eps)`.
    pub fn log(&mut self, x: Var, eps: T) -> Var {
        let out = self.map_value(x, |v| (v + eps).ln());
        self.push(out, Op::Log(x, eps), &[x])
    }

    /// Maximum along `axis`; ties go to the lowest index. Returns the values
    /// and, for every output element, the winning position along `axis`.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.value(x).data();
        let mut vals = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            let base = o * len * inner;
            let out_v = &mut vals[o * inner..(o + 1) * inner];
            let out_i = &mut argmax[o * inner..(o + 1) * inner];
            out_v.copy_from_slice(&src[base..base + inner]);
            for l in 1..len {
                let row = &src[base + l * inner..base + (l + 1) * inner];
                for ((best, idx), &v) in out_v.iter_mut().zip(out_i.iter_mut()).zip(row) {
                    if v > *best {
                        *best = v;
                        *idx = l;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor {
            shape: out_shape,
            data: vals,
        };
        let op = Op::MaxOverAxis {
            x,
            len,
            inner,
            argmax: argmax.clone(),
        };
        Ok((self.push(out, op, &[x]), argmax))
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.value(x).data();
        let mut vals = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let out_v = &mut vals[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (acc, &v) in out_v.iter_mut().zip(&src[base..base + inner]) {
                    *acc = *acc + v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor {
            shape: out_shape,
            data: vals,
        };
        Ok(self.push(out, Op::SumOverAxis { x, len, inner }, &[x]))
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) = row_split(&shape, "softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxRows(x), &[x]))
    }

    /// `log Σ_j exp(x_ij)` over the last axis.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) = row_split(&shape, "log_sum_exp_rows")?;
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(cols)
            .map(lse)
            .collect();
        let out = Tensor {
            shape: shape[..shape.len() - 1].to_vec(),
            data,
        };
        Ok(self.push(out, Op::LogSumExpRows(x), &[x]))
    }

    /// Divides each last-axis row by `sqrt(|row|² + eps²)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(TensorError::Invalid("l2_normalize_rows needs eps > 0".into()));
        }
        let shape = self.shape(x).to_vec();
        let (_, cols) = row_split(&shape, "l2_normalize_rows")?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let n = regularized_norm(row, eps);
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        let op = Op::L2NormalizeRows { x, norms };
        Ok(self.push(Tensor { shape, data }, op, &[x]))
    }

    /// `sqrt(|row|² + eps²)` for each last-axis row.
    pub fn row_norms(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) = row_split(&shape, "row_norms")?;
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .map(|r| regularized_norm(r, eps))
            .collect();
        let out = Tensor {
            shape: shape[..shape.len() - 1].to_vec(),
            data,
        };
        Ok(self.push(out, Op::RowNorms(x), &[x]))
    }

    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat_last_axis", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), parts))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor {
            shape: vec![c, r],
            data,
        };
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Per-feature `x * scale + shift` over the last axis (normalisation-free
    /// stand-in for batch norm).
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) = row_split(&shape, "affine")?;
        if self.shape(scale) != [cols] || self.shape(shift) != [cols] {
            return Err(mismatch("affine", &shape, self.shape(scale)));
        }
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| {
                row.iter()
                    .zip(s.iter().zip(t))
                    .map(|(&v, (&a, &b))| v * a + b)
            })
            .collect();
        let op = Op::Affine { x, scale, shift };
        Ok(self.push(Tensor { shape, data }, op, &[x, scale, shift]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r != c {
            return Err(mismatch("diag", self.shape(x), &[c, r]));
        }
        let src = self.value(x).data();
        let data = (0..r).map(|i| src[i * c + i]).collect();
        let out = Tensor {
            shape: vec![r],
            data,
        };
        Ok(self.push(out, Op::Diag(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Selects rows of a 2-D tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::BadIndex { index: i, rows });
            }
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let op = Op::GatherRows {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(out, op, &[x]))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`. Gradients from earlier
    /// calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.shape.iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Detach the op so parent slots can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2-D");
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value.data);
                    let da = self.slot(*a).unwrap();
                    matmul_into(
                        m,
                        n,
                        k,
                        Operand { data: g, trans: false },
                        Operand { data: &bv, trans: true },
                        T::one(),
                        da,
                    );
                    self.nodes[b.0].value.data = bv;
                }
                if self.requires_grad(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value.data);
                    let db = self.slot(*b).unwrap();
                    matmul_into(
                        k,
                        m,
                        n,
                        Operand { data: &av, trans: true },
                        Operand { data: g, trans: false },
                        T::one(),
                        db,
                    );
                    self.nodes[a.0].value.data = av;
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(*a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.slot(*b) {
                    let w = db.len();
                    for chunk in g.chunks(w) {
                        axpy(db, chunk, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(*a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.slot(*b) {
                    axpy(db, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.data.clone();
                    let da = self.slot(*a).unwrap();
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(&bv) {
                        *d = *d + gi * bi;
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.data.clone();
                    let db = self.slot(*b).unwrap();
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(&av) {
                        *d = *d + gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(dx) = self.slot(*x) {
                    axpy(dx, g, c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::Sum(x) => {
                let x = *x;
                let broadcast = matches!(op, Op::Sum(_));
                if let Some(dx) = self.slot(x) {
                    if broadcast {
                        dx.iter_mut().for_each(|d| *d = *d + g[0]);
                    } else {
                        axpy(dx, g, T::one());
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(*x) {
                    let share = g[0] / T::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d = *d + share);
                }
            }
            Op::Relu(x) => {
                let out = std::mem::take(&mut self.nodes[i].value.data);
                if let Some(dx) = self.slot(*x) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(&out) {
                        if y > T::zero() {
                            *d = *d + gi;
                        }
                    }
                }
                self.nodes[i].value.data = out;
            }
            Op::Log(x, eps) => {
                let eps = *eps;
                let xv = self.nodes[x.0].value.data.clone();
                if let Some(dx) = self.slot(*x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(&xv) {
                        *d = *d + gi / (v + eps);
                    }
                }
            }
            Op::MaxOverAxis {
                x,
                len,
                inner,
                argmax,
            } => {
                let (len, inner) = (*len, *inner);
                if let Some(dx) = self.slot(*x) {
                    for (oi, (&gi, &a)) in g.iter().zip(argmax).enumerate() {
                        let (o, j) = (oi / inner, oi % inner);
                        let at = (o * len + a) * inner + j;
                        dx[at] = dx[at] + gi;
                    }
                }
            }
            Op::SumOverAxis { x, len, inner } => {
                let (len, inner) = (*len, *inner);
                if let Some(dx) = self.slot(*x) {
                    for (idx, d) in dx.iter_mut().enumerate() {
                        let o = idx / (len * inner);
                        let j = idx % inner;
                        *d = *d + g[o * inner + j];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = std::mem::take(&mut self.nodes[i].value.data);
                let cols = *self.nodes[i].value.shape.last().unwrap();
                if let Some(dx) = self.slot(*x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.chunks(cols))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + yi * (gi - dot);
                        }
                    }
                }
                self.nodes[i].value.data = y;
            }
            Op::LogSumExpRows(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].value.data);
                let cols = *self.nodes[x.0].value.shape.last().unwrap();
                let out = self.nodes[i].value.data.clone();
                if let Some(dx) = self.slot(*x) {
                    for (r, (drow, xrow)) in dx.chunks_mut(cols).zip(xv.chunks(cols)).enumerate()
                    {
                        for (d, &v) in drow.iter_mut().zip(xrow) {
                            *d = *d + g[r] * (v - out[r]).exp();
                        }
                    }
                }
                self.nodes[x.0].value.data = xv;
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = std::mem::take(&mut self.nodes[i].value.data);
                let cols = *self.nodes[i].value.shape.last().unwrap();
                if let Some(dx) = self.slot(*x) {
                    for (((drow, grow), yrow), &n) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.chunks(cols))
                        .zip(norms)
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + (gi - yi * dot) / n;
                        }
                    }
                }
                self.nodes[i].value.data = y;
            }
            Op::RowNorms(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].value.data);
                let cols = *self.nodes[x.0].value.shape.last().unwrap();
                let norms = self.nodes[i].value.data.clone();
                if let Some(dx) = self.slot(*x) {
                    for (r, (drow, xrow)) in dx.chunks_mut(cols).zip(xv.chunks(cols)).enumerate()
                    {
                        let s = g[r] / norms[r];
                        for (d, &v) in drow.iter_mut().zip(xrow) {
                            *d = *d + s * v;
                        }
                    }
                }
                self.nodes[x.0].value.data = xv;
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.shape(*p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(dp) = self.slot(p) {
                        for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(drow, &grow[offset..offset + w], T::one());
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("2-D");
                if let Some(dx) = self.slot(*x) {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] = dx[a * c + b] + g[b * r + a];
                        }
                    }
                }
            }
            Op::Affine { x, scale, shift } => {
                let cols = self.value(*scale).len();
                if self.requires_grad(*x) {
                    let s = self.value(*scale).data().to_vec();
                    let dx = self.slot(*x).unwrap();
                    for (drow, grow) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, &gi), &si) in drow.iter_mut().zip(grow).zip(&s) {
                            *d = *d + gi * si;
                        }
                    }
                }
                if self.requires_grad(*scale) {
                    let xv = std::mem::take(&mut self.nodes[x.0].value.data);
                    let ds = self.slot(*scale).unwrap();
                    for (xrow, grow) in xv.chunks(cols).zip(g.chunks(cols)) {
                        for ((d, &gi), &xi) in ds.iter_mut().zip(grow).zip(xrow) {
                            *d = *d + gi * xi;
                        }
                    }
                    self.nodes[x.0].value.data = xv;
                }
                if let Some(dt) = self.slot(*shift) {
                    for grow in g.chunks(cols) {
                        axpy(dt, grow, T::one());
                    }
                }
            }
            Op::Diag(x) => {
                let n = g.len();
                if let Some(dx) = self.slot(*x) {
                    for (k, &gi) in g.iter().enumerate() {
                        dx[k * n + k] = dx[k * n + k] + gi;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = self.shape(*x)[1];
                if let Some(dx) = self.slot(*x) {
                    for (&r, grow) in idx.iter().zip(g.chunks(cols)) {
                        axpy(&mut dx[r * cols..(r + 1) * cols], grow, T::one());
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    // ---- helpers ---------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var) -> impl Iterator<Item = (T, T)> + '_ {
        self.value(a)
            .data()
            .iter()
            .copied()
            .zip(self.value(b).data().iter().copied())
    }

    fn map_value(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| f(e)).collect(),
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

fn lse<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

fn regularized_norm<T: Scalar>(row: &[T], eps: T) -> T {
    let ss: T = row.iter().map(|&v| v * v).sum();
    (ss + eps * eps).sqrt()
}
