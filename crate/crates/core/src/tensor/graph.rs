use super::params::{ParamGrads, ParamId, ParamStore};
use super::{as2d, Real, Tensor};
use crate::error::{CareError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    TakeAlongRows(Var, Vec<usize>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    /// Axis in the 2-D view: 0 normalizes columns, 1 normalizes rows.
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, Vec<T>),
    L2Normalize(Var, Vec<T>),
    SumAll(Var),
    SumAxis(Var, usize),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Reverse-mode compute graph.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order; [`Graph::backward`] walks it once in reverse. Leaf
/// gradients accumulate across backward calls until [`Graph::zero_grad`].
///
/// Parameters from an attached [`ParamStore`] enter the graph lazily through
/// [`Graph::param`] and appear at most once per graph.
pub struct Graph<'s, T> {
    nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

const LN_EPS: f64 = 1e-8;

impl<'s, T: Real> Default for Graph<'s, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// A graph without parameters (raw-op use and gradient checks).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing in it requires gradients.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(CareError::NonFinite(name.to_string()));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            requires_grad,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter that entered this graph.
    pub fn param_grads(&self) -> ParamGrads<T> {
        let mut out = ParamGrads::new(self.param_vars.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &self.nodes[v.0].grad {
                    out.set(ParamId(i), g.clone());
                }
            }
        }
        out
    }

    // ----- elementwise binary (2-D broadcasting) -----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| CareError::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (r, c) = as2d(&shape);
        let (ar, ac) = as2d(&sa);
        let (br, bc) = as2d(&sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(da[bidx(i, j, ar, ac)], db[bidx(i, j, br, bc)]));
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a], "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    /// `a + s` for a constant scalar `s`.
    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let c = self.constant(Tensor::scalar(s));
        self.add(a, c)
    }

    // ----- linear algebra and layout -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(CareError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = transpose_raw(self.value(a));
        self.push(value, Op::Transpose(a), &[a], "transpose")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CareError::shape("concat_rows", "no inputs"));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(CareError::shape("concat_rows", format!("column mismatch {} vs {}", t.cols(), c)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CareError::shape("concat_cols", "no inputs"));
        }
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(CareError::shape("concat_cols", "row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(r, total, data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if start >= end || end > r {
            return Err(CareError::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let value = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())?;
        self.push(value, Op::SliceRows(a, start), &[a], "slice_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if start >= end || end > c {
            return Err(CareError::shape("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::matrix(r, end - start, data)?;
        self.push(value, Op::SliceCols(a, start), &[a], "slice_cols")
    }

    /// Stacks rows `idx[0], idx[1], ...` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(CareError::shape("gather_rows", format!("indices out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        self.push(value, Op::GatherRows(a, idx.to_vec()), &[a], "gather_rows")
    }

    /// For each row `i`, picks columns `idx[i*k..(i+1)*k]`; output is `rows × k`.
    pub fn take_along_rows(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if k == 0 || idx.len() != r * k || idx.iter().any(|&j| j >= c) {
            return Err(CareError::shape("take_along_rows", format!("bad index table for {r}x{c}, k={k}")));
        }
        let data = (0..r * k).map(|p| t.at(p / k, idx[p])).collect();
        let value = Tensor::matrix(r, k, data)?;
        self.push(value, Op::TakeAlongRows(a, idx.to_vec()), &[a], "take_along_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a], "reshape")
    }

    // ----- elementwise unary -----

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a], "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.exp());
        self.push(value, Op::Exp(a), &[a], "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.ln());
        self.push(value, Op::Log(a), &[a], "log")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| gelu(x).0);
        self.push(value, Op::Gelu(a), &[a], "gelu")
    }

    // ----- normalizations -----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = axis2d(self.shape(a), axis, "softmax")?;
        let value = softmax_axis(self.value(a), ax, false)?;
        self.push(value, Op::Softmax(a, ax), &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = axis2d(self.shape(a), axis, "log_softmax")?;
        let value = softmax_axis(self.value(a), ax, true)?;
        self.push(value, Op::LogSoftmax(a, ax), &[a], "log_softmax")
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if c == 0 {
            return Err(CareError::shape("layer_norm", "empty rows"));
        }
        let n = T::c(c as f64);
        let mut out = Vec::with_capacity(r * c);
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::c(LN_EPS)).sqrt();
            out.extend(row.iter().map(|&x| (x - mean) * is));
            inv.push(is);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm(a, inv), &[a], "layer_norm")
    }

    /// Scales each row to unit ℓ2 norm; zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, _) = t.dims2();
        let mut out = Vec::with_capacity(t.numel());
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::zero() {
                out.extend(row.iter().map(|&x| x / norm));
            } else {
                out.extend(row.iter().map(|_| T::zero()));
            }
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::L2Normalize(a, norms), &[a], "l2_normalize")
    }

    /// Row-wise cosine similarity matrix `cos(a_i, b_j)`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        self.matmul_t(an, bn)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(CareError::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum over one axis of a matrix, keeping it as a unit dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || axis > 1 {
            return Err(CareError::shape("sum_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let (r, c) = t.dims2();
        let value = if axis == 0 {
            let mut acc = vec![T::zero(); c];
            for i in 0..r {
                for (s, &x) in acc.iter_mut().zip(t.row(i)) {
                    *s = *s + x;
                }
            }
            Tensor::matrix(1, c, acc)?
        } else {
            Tensor::matrix(r, 1, (0..r).map(|i| t.row(i).iter().copied().sum()).collect())?
        };
        self.push(value, Op::SumAxis(a, axis), &[a], "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let n = if axis == 0 { r } else { c };
        if n == 0 {
            return Err(CareError::shape("mean_axis", "empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Dot product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CareError::shape("dot", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // ----- reverse pass -----

    /// Backpropagates from a one-element root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let v = &self.nodes[root.0].value;
        if v.numel() != 1 {
            return Err(CareError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::full(v.shape(), T::one());
        self.backward_seeds(&[(root, seed)])
    }

    /// Backpropagates from several nodes at once, each seeded with an
    /// upstream gradient of its own shape. Used to continue a reverse pass
    /// that started in another graph.
    pub fn backward_seeds(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<()> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; top + 1];
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(CareError::shape(
                    "backward",
                    format!("seed {:?} for node of shape {:?}", g.shape(), self.shape(*v)),
                ));
            }
            add_into(&mut grads[v.0], g);
        }
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                add_into(&mut self.nodes[i].grad, &g);
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if self.nodes[input.0].requires_grad {
                    add_into(&mut grads[input.0], &gi);
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) => vec![(*a, reduce_to(g, val(*a).shape())), (*b, reduce_to(g, val(*b).shape()))],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(&g.map(|x| -x), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let ga = zip_broadcast(g, val(*b), |gv, bv| gv * bv);
                let gb = zip_broadcast(g, val(*a), |gv, av| gv * av);
                vec![(*a, reduce_to(&ga, val(*a).shape())), (*b, reduce_to(&gb, val(*b).shape()))]
            }
            Op::Div(a, b) => {
                let ga = zip_broadcast(g, val(*b), |gv, bv| gv / bv);
                // d(a/b)/db = -(a/b)/b = -y/b
                let yb = zip_broadcast(y, val(*b), |yv, bv| -yv / bv);
                let gb: Tensor<T> = zip_same(g, &yb, |gv, v| gv * v);
                vec![(*a, reduce_to(&ga, val(*a).shape())), (*b, reduce_to(&gb, val(*b).shape()))]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                let bt = transpose_raw(val(*b));
                let at = transpose_raw(val(*a));
                let ga = matmul_raw(g.data(), bt.data(), m, n, k);
                let gb = matmul_raw(at.data(), g.data(), k, m, n);
                vec![
                    (*a, Tensor::new(val(*a).shape().to_vec(), ga)?),
                    (*b, Tensor::new(val(*b).shape().to_vec(), gb)?),
                ]
            }
            Op::Transpose(a) => vec![(*a, transpose_raw(g).reshape(val(*a).shape().to_vec())?)],
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let t = val(p);
                    let n = t.numel();
                    res.push((p, Tensor::new(t.shape().to_vec(), g.data()[offset..offset + n].to_vec())?));
                    offset += t.rows() * c;
                }
                res
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let pc = t.cols();
                    let mut data = Vec::with_capacity(r * pc);
                    for row in 0..r {
                        data.extend_from_slice(&g.row(row)[offset..offset + pc]);
                    }
                    res.push((p, Tensor::new(t.shape().to_vec(), data)?));
                    offset += pc;
                }
                res
            }
            Op::SliceRows(a, start) => {
                let t = val(*a);
                let c = t.cols();
                let mut data = vec![T::zero(); t.numel()];
                data[start * c..start * c + g.numel()].copy_from_slice(g.data());
                vec![(*a, Tensor::new(t.shape().to_vec(), data)?)]
            }
            Op::SliceCols(a, start) => {
                let t = val(*a);
                let (r, c) = t.dims2();
                let w = g.cols();
                let mut data = vec![T::zero(); r * c];
                for row in 0..r {
                    data[row * c + start..row * c + start + w].copy_from_slice(g.row(row));
                }
                vec![(*a, Tensor::new(t.shape().to_vec(), data)?)]
            }
            Op::GatherRows(a, idx) => {
                let t = val(*a);
                let c = t.cols();
                let mut data = vec![T::zero(); t.numel()];
                for (k, &src) in idx.iter().enumerate() {
                    for (d, &gv) in data[src * c..(src + 1) * c].iter_mut().zip(g.row(k)) {
                        *d = *d + gv;
                    }
                }
                vec![(*a, Tensor::new(t.shape().to_vec(), data)?)]
            }
            Op::TakeAlongRows(a, idx) => {
                let t = val(*a);
                let c = t.cols();
                let k = g.cols();
                let mut data = vec![T::zero(); t.numel()];
                for (p, &j) in idx.iter().enumerate() {
                    let row = p / k;
                    data[row * c + j] = data[row * c + j] + g.data()[p];
                }
                vec![(*a, Tensor::new(t.shape().to_vec(), data)?)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
            Op::Tanh(a) => vec![(*a, zip_same(g, y, |gv, yv| gv * (T::one() - yv * yv)))],
            Op::Sigmoid(a) => vec![(*a, zip_same(g, y, |gv, yv| gv * yv * (T::one() - yv)))],
            Op::Exp(a) => vec![(*a, zip_same(g, y, |gv, yv| gv * yv))],
            Op::Log(a) => vec![(*a, zip_same(g, val(*a), |gv, xv| gv / xv))],
            Op::Gelu(a) => vec![(*a, zip_same(g, val(*a), |gv, xv| gv * gelu(xv).1))],
            Op::Softmax(a, ax) => {
                // dx = y ⊙ (g − Σ_axis g⊙y)
                let gy = zip_same(g, y, |gv, yv| gv * yv);
                let s = axis_sums(&gy, *ax);
                let dx = map_axis(y, g, &s, *ax, |yv, gv, sv| yv * (gv - sv));
                vec![(*a, dx)]
            }
            Op::LogSoftmax(a, ax) => {
                // dx = g − softmax ⊙ Σ_axis g
                let s = axis_sums(g, *ax);
                let dx = map_axis(y, g, &s, *ax, |yv, gv, sv| gv - yv.exp() * sv);
                vec![(*a, dx)]
            }
            Op::LayerNorm(a, inv) => {
                let (r, c) = y.dims2();
                let n = T::c(c as f64);
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    data.extend(gr.iter().zip(yr).map(|(&gv, &yv)| inv[i] * (gv - mg - yv * mgy)));
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::L2Normalize(a, norms) => {
                let (r, _) = y.dims2();
                let mut data = Vec::with_capacity(y.numel());
                for i in 0..r {
                    let (gr, yr) = (g.row(i), y.row(i));
                    if norms[i] > T::zero() {
                        let proj = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        data.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * proj) / norms[i]));
                    } else {
                        data.extend(gr.iter().map(|_| T::zero()));
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::SumAxis(a, axis) => {
                let t = val(*a);
                let (r, c) = t.dims2();
                let data = (0..r * c)
                    .map(|p| if *axis == 0 { g.data()[p % c] } else { g.data()[p / c] })
                    .collect();
                vec![(*a, Tensor::new(t.shape().to_vec(), data)?)]
            }
        };
        Ok(out)
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu<T: Real>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = k * (T::one() + T::c(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

fn axis2d(shape: &[usize], axis: usize, op: &'static str) -> Result<usize> {
    match (shape.len(), axis) {
        (2, 0) | (2, 1) => Ok(axis),
        (1, 0) => Ok(1),
        _ => Err(CareError::shape(op, format!("axis {axis} of {shape:?}"))),
    }
}

fn softmax_axis<T: Real>(t: &Tensor<T>, ax: usize, log: bool) -> Result<Tensor<T>> {
    let (r, c) = t.dims2();
    let (lines, len) = if ax == 1 { (r, c) } else { (c, r) };
    if len == 0 {
        return Err(CareError::shape("softmax", "empty axis"));
    }
    let at = |line: usize, p: usize| if ax == 1 { line * c + p } else { p * c + line };
    let d = t.data();
    let mut out = vec![T::zero(); d.len()];
    for line in 0..lines {
        let max = (0..len).map(|p| d[at(line, p)]).fold(T::neg_infinity(), T::max);
        let total: T = (0..len).map(|p| (d[at(line, p)] - max).exp()).sum();
        let log_total = total.ln();
        for p in 0..len {
            let z = d[at(line, p)] - max;
            out[at(line, p)] = if log { z - log_total } else { z.exp() / total };
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn axis_sums<T: Real>(t: &Tensor<T>, ax: usize) -> Vec<T> {
    let (r, c) = t.dims2();
    if ax == 1 {
        (0..r).map(|i| t.row(i).iter().copied().sum()).collect()
    } else {
        (0..c).map(|j| (0..r).map(|i| t.at(i, j)).sum()).collect()
    }
}

fn map_axis<T: Real>(y: &Tensor<T>, g: &Tensor<T>, s: &[T], ax: usize, f: impl Fn(T, T, T) -> T) -> Tensor<T> {
    let (_, c) = y.dims2();
    let data = (0..y.numel())
        .map(|p| {
            let line = if ax == 1 { p / c } else { p % c };
            f(y.data()[p], g.data()[p], s[line])
        })
        .collect();
    Tensor {
        shape: y.shape().to_vec(),
        data,
    }
}

fn zip_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `f(g, broadcast(other))` over the (full) shape of `g`.
fn zip_broadcast<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (r, c) = g.dims2();
    let (orow, ocol) = other.dims2();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(g.data()[i * c + j], other.data()[bidx(i, j, orow, ocol)]));
        }
    }
    Tensor {
        shape: g.shape().to_vec(),
        data,
    }
}

#[inline]
fn bidx(i: usize, j: usize, rows: usize, cols: usize) -> usize {
    let ii = if rows == 1 { 0 } else { i };
    let jj = if cols == 1 { 0 } else { j };
    ii * cols + jj
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (ar, ac) = as2d(a);
    let (br, bc) = as2d(b);
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, _) => Some(y),
        (_, 1) => Some(x),
        _ => None,
    };
    let r = dim(ar, br)?;
    let c = dim(ac, bc)?;
    Some(match a.len().max(b.len()) {
        2 => vec![r, c],
        1 if r == 1 => vec![c],
        1 => vec![r, c],
        _ => vec![],
    })
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = g.dims2();
    let (tr, tc) = as2d(shape);
    let mut data = vec![T::zero(); tr * tc];
    for i in 0..r {
        for j in 0..c {
            let k = bidx(i, j, tr, tc);
            data[k] = data[k] + g.data()[i * c + j];
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = t.dims2();
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(t.data()[i * c + j]);
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}
