use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    SubRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Div(Var, Var),
    DivRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: F, hi: F },
    Softmax { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Variance { x: Var, axis: usize },
    MaxPool { x: Var, argmax: Vec<usize>, axis: usize },
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Gather { x: Var, rows: Vec<usize> },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode computation record.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Clone, Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` view of a shape around `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), NumericsError> {
    if axis >= shape.len() || shape.len() > 2 {
        return Err(NumericsError::InvalidAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<F: Scalar> Graph<F> {
    /// Finite-value checking follows the build profile: on in debug, off in release.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. `requires_grad` leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var], name: &'static str) -> Result<Var, NumericsError> {
        if self.check_finite && !value.all_finite() {
            return Err(NumericsError::NonFiniteValue(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch(format!("{name}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn row_compatible(&self, a: Var, row: Var, name: &str) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(row).shape());
        match (sa, sb) {
            (&[_, d], &[d2]) if d == d2 => Ok(()),
            _ => Err(NumericsError::ShapeMismatch(format!(
                "{name}: row-wise broadcast needs (T×d, d), got {sa:?} and {sb:?}"
            ))),
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn zip_row(&self, a: Var, row: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tr) = (self.value(a), self.value(row));
        let d = tr.len();
        let mut data = Vec::with_capacity(ta.len());
        for chunk in ta.data().chunks_exact(d.max(1)) {
            data.extend(chunk.iter().zip(tr.data()).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Elementwise sum; `b` may also be a length-`d` row broadcast over a `T×d` matrix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.same_shape(a, b, "add").is_ok() {
            let out = self.zip(a, b, |x, y| x + y);
            return self.push(out, Op::Add(a, b), &[a, b], "add");
        }
        self.row_compatible(a, b, "add")?;
        let out = self.zip_row(a, b, |x, y| x + y);
        self.push(out, Op::AddRow(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.same_shape(a, b, "sub").is_ok() {
            let out = self.zip(a, b, |x, y| x - y);
            return self.push(out, Op::Sub(a, b), &[a, b], "sub");
        }
        self.row_compatible(a, b, "sub")?;
        let out = self.zip_row(a, b, |x, y| x - y);
        self.push(out, Op::SubRow(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.same_shape(a, b, "mul").is_ok() {
            let out = self.zip(a, b, |x, y| x * y);
            return self.push(out, Op::Mul(a, b), &[a, b], "mul");
        }
        self.row_compatible(a, b, "mul")?;
        let out = self.zip_row(a, b, |x, y| x * y);
        self.push(out, Op::MulRow(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.same_shape(a, b, "div").is_ok() {
            let out = self.zip(a, b, |x, y| x / y);
            return self.push(out, Op::Div(a, b), &[a, b], "div");
        }
        self.row_compatible(a, b, "div")?;
        let out = self.zip_row(a, b, |x, y| x / y);
        self.push(out, Op::DivRow(a, b), &[a, b], "div")
    }

    pub fn scale(&mut self, x: Var, k: F) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, k: F) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::AddScalar(x), &[x], "add_scalar")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x), &[x], "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x), &[x], "log")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v.tanh_exp());
        self.push(out, Op::Tanh(x), &[x], "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let c = F::from_f64_lossy(GELU_C);
        let k = F::from_f64_lossy(GELU_K);
        let half = F::from_f64_lossy(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (F::one() + (c * (v + k * v * v * v)).tanh_exp()));
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v.sqrt());
        self.push(out, Op::Sqrt(x), &[x], "sqrt")
    }

    /// Clamps into `[lo, hi]`; gradient is passed through only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x], "clamp")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_layout(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        if inner == 1 && len > 0 {
            for (row, dst) in src.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let mut total = F::zero();
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    total = total + *o;
                }
                for o in dst.iter_mut() {
                    *o = *o / total;
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let mut m = F::neg_infinity();
                    for l in 0..len {
                        m = m.max(src[idx(l)]);
                    }
                    let mut total = F::zero();
                    for l in 0..len {
                        let e = (src[idx(l)] - m).exp();
                        out[idx(l)] = e;
                        total = total + e;
                    }
                    for l in 0..len {
                        out[idx(l)] = out[idx(l)] / total;
                    }
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_layout(t.shape(), axis)?;
        let out = reduce_mean(t.data(), outer, len, inner);
        let out = Tensor::new(reduced_shape(t.shape(), axis), out)?;
        self.push(out, Op::Mean { x, axis }, &[x], "mean")
    }

    /// Biased variance (divide by count) over `axis`.
    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_layout(t.shape(), axis)?;
        let src = t.data();
        let means = reduce_mean(src, outer, len, inner);
        let n = F::from_usize(len).expect("count");
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let m = means[o * inner + i];
                let mut acc = F::zero();
                for l in 0..len {
                    let d = src[(o * len + l) * inner + i] - m;
                    acc = acc + d * d;
                }
                out[o * inner + i] = acc / n;
            }
        }
        let out = Tensor::new(reduced_shape(t.shape(), axis), out)?;
        self.push(out, Op::Variance { x, axis }, &[x], "variance")
    }

    /// Maximum over `axis`; ties resolve to the first index.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_layout(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![F::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for l in 1..len {
                    if src[(o * len + l) * inner + i] > src[(o * len + best) * inner + i] {
                        best = l;
                    }
                }
                out[o * inner + i] = src[(o * len + best) * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let out = Tensor::new(reduced_shape(t.shape(), axis), out)?;
        self.push(out, Op::MaxPool { x, argmax, axis }, &[x], "max_pool")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x], "sum")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::ShapeMismatch("concat of nothing".into()))?;
        let base = self.value(*first).shape().to_vec();
        axis_layout(&base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch(format!(
                    "concat axis {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts, "concat")
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (outer, len, inner) = axis_layout(t.shape(), axis)?;
        if start >= end || end > len {
            return Err(NumericsError::ShapeMismatch(format!(
                "slice {start}..{end} along axis {axis} of {:?}",
                t.shape()
            )));
        }
        let src = t.data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Slice { x, axis, start }, &[x], "slice")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x), &[x], "transpose")
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if rows.is_empty() {
            return Err(NumericsError::ShapeMismatch("gather of no rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(NumericsError::ShapeMismatch(format!(
                    "gather row {row} out of {r}"
                )));
            }
            out.extend_from_slice(t.row(row));
        }
        let out = Tensor::new(vec![rows.len(), c], out)?;
        self.push(out, Op::Gather { x, rows: rows.to_vec() }, &[x], "gather")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Reverse sweep from a scalar loss of shape `[1]`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::ShapeMismatch(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::ones(self.value(loss).shape());
        self.backward_with(&[(loss, seed)])
    }

    /// Reverse sweep from explicit output cotangents (vector-Jacobian product).
    pub fn backward_with(&self, seeds: &[(Var, Tensor<F>)]) -> Result<Gradients<F>, NumericsError> {
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(NumericsError::ShapeMismatch(format!(
                    "seed {:?} for value {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<(), NumericsError> {
        let y = &node.value;
        let unary = |grads: &mut [Option<Tensor<F>>], x: Var, f: &dyn Fn(usize) -> F| {
            let data = (0..g.len()).map(|i| g.data()[i] * f(i)).collect();
            accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), data).expect("shape"));
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bt = self.value(*b).transpose()?;
                    accumulate(grads, *a, g.matmul(&bt)?);
                }
                if self.wants(*b) {
                    let at = self.value(*a).transpose()?;
                    accumulate(grads, *b, at.matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::AddRow(a, r) | Op::SubRow(a, r) => {
                let negate = matches!(node.op, Op::SubRow(..));
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*r) {
                    let mut col = col_sums(g, self.value(*r).len(), |gv, _| gv);
                    if negate {
                        col = col.map(|v| -v);
                    }
                    accumulate(grads, *r, col);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    unary(grads, *a, &|i| vb.data()[i]);
                }
                if self.wants(*b) {
                    unary(grads, *b, &|i| va.data()[i]);
                }
            }
            Op::MulRow(a, r) => {
                let (va, vr) = (self.value(*a), self.value(*r));
                let d = vr.len();
                if self.wants(*a) {
                    unary(grads, *a, &|i| vr.data()[i % d]);
                }
                if self.wants(*r) {
                    accumulate(grads, *r, col_sums(g, d, |gv, i| gv * va.data()[i]));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    unary(grads, *a, &|i| F::one() / vb.data()[i]);
                }
                if self.wants(*b) {
                    unary(grads, *b, &|i| -va.data()[i] / (vb.data()[i] * vb.data()[i]));
                }
            }
            Op::DivRow(a, r) => {
                let (va, vr) = (self.value(*a), self.value(*r));
                let d = vr.len();
                if self.wants(*a) {
                    unary(grads, *a, &|i| F::one() / vr.data()[i % d]);
                }
                if self.wants(*r) {
                    accumulate(
                        grads,
                        *r,
                        col_sums(g, d, |gv, i| {
                            let b = vr.data()[i % d];
                            -gv * va.data()[i] / (b * b)
                        }),
                    );
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.map(|v| v * *k)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Exp(x) => unary(grads, *x, &|i| y.data()[i]),
            Op::Log(x) => {
                let vx = self.value(*x);
                unary(grads, *x, &|i| F::one() / vx.data()[i]);
            }
            Op::Tanh(x) => unary(grads, *x, &|i| F::one() - y.data()[i] * y.data()[i]),
            Op::Sigmoid(x) => unary(grads, *x, &|i| y.data()[i] * (F::one() - y.data()[i])),
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let c = F::from_f64_lossy(GELU_C);
                let k = F::from_f64_lossy(GELU_K);
                let half = F::from_f64_lossy(0.5);
                let three = F::from_f64_lossy(3.0);
                unary(grads, *x, &|i| {
                    let v = vx.data()[i];
                    let t = (c * (v + k * v * v * v)).tanh_exp();
                    half * (F::one() + t) + half * v * (F::one() - t * t) * c * (F::one() + three * k * v * v)
                });
            }
            Op::Sqrt(x) => {
                let two = F::from_f64_lossy(2.0);
                unary(grads, *x, &|i| F::one() / (two * y.data()[i]));
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                unary(grads, *x, &|i| {
                    let v = vx.data()[i];
                    if v >= *lo && v <= *hi {
                        F::one()
                    } else {
                        F::zero()
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(y.shape(), *axis)?;
                let mut out = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: F = (0..len).map(|l| g.data()[idx(l)] * y.data()[idx(l)]).sum();
                        for l in 0..len {
                            out[idx(l)] = y.data()[idx(l)] * (g.data()[idx(l)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Mean { x, axis } => {
                let vx = self.value(*x);
                let (outer, len, inner) = axis_layout(vx.shape(), *axis)?;
                let n = F::from_usize(len).expect("count");
                let mut out = vec![F::zero(); vx.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[(o * len + l) * inner + i] = g.data()[o * inner + i] / n;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), out)?);
            }
            Op::Variance { x, axis } => {
                let vx = self.value(*x);
                let (outer, len, inner) = axis_layout(vx.shape(), *axis)?;
                let means = reduce_mean(vx.data(), outer, len, inner);
                let n = F::from_usize(len).expect("count");
                let two = F::from_f64_lossy(2.0);
                let mut out = vec![F::zero(); vx.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let j = (o * len + l) * inner + i;
                            out[j] = g.data()[o * inner + i] * two * (vx.data()[j] - means[o * inner + i]) / n;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), out)?);
            }
            Op::MaxPool { x, argmax, axis } => {
                let vx = self.value(*x);
                let (outer, len, inner) = axis_layout(vx.shape(), *axis)?;
                let mut out = vec![F::zero(); vx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let l = argmax[o * inner + i];
                        out[(o * len + l) * inner + i] = g.data()[o * inner + i];
                    }
                }
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), out)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_layout(y.shape(), *axis)?;
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let len = shape[*axis];
                    if self.wants(*p) {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(grads, *p, Tensor::new(shape, out)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let vx = self.value(*x);
                let (outer, len, inner) = axis_layout(vx.shape(), *axis)?;
                let width = y.shape()[*axis] * inner;
                let mut out = vec![F::zero(); vx.len()];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    out[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                }
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), out)?);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()?),
            Op::Gather { x, rows } => {
                let vx = self.value(*x);
                let (_, c) = vx.dims2()?;
                let mut out = vec![F::zero(); vx.len()];
                for (k, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        out[row * c + j] = out[row * c + j] + g.data()[k * c + j];
                    }
                }
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), out)?);
            }
        }
        Ok(())
    }
}

fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn reduce_mean<F: Scalar>(src: &[F], outer: usize, len: usize, inner: usize) -> Vec<F> {
    let n = F::from_usize(len).expect("count");
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = F::zero();
            for l in 0..len {
                acc = acc + src[(o * len + l) * inner + i];
            }
            out[o * inner + i] = acc / n;
        }
    }
    out
}

/// Column sums of `f(g[i], i)` over a row-major matrix with `d` columns.
fn col_sums<F: Scalar>(g: &Tensor<F>, d: usize, f: impl Fn(F, usize) -> F) -> Tensor<F> {
    let mut out = vec![F::zero(); d];
    for (i, &gv) in g.data().iter().enumerate() {
        out[i % d] = out[i % d] + f(gv, i);
    }
    Tensor::vector(out)
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
