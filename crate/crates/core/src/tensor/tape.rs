use super::kernels::{self, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Gradients, ParamId, ParameterStore, Tensor, L2_EPS};
use crate::error::{DgaError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Affine(Var, f64),
    SoftmaxRows(Var),
    L2NormRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    GatherElems(Var, Vec<Option<usize>>),
    SumAll(Var),
    Element(Var, usize),
    SafeRecip(Var),
    SelectRows(Vec<bool>, Var, Var),
    PairwiseAdd(Var, Var),
}

#[derive(Debug)]
struct Node {
    /// `None` for parameters, which are read from the store instead of copied.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v.0)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.val(v.0).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v.0).shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.val(v.0).dims2()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        let node = &self.nodes[i];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, rg)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Trainable leaf; the first use records it, later uses share the node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(DgaError::dim(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`; with `b` a weight of shape [out×in] this is a linear map on rows.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(DgaError::dim(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(vec![m, n], out, Op::MatMulT(a, b), rg))
    }

    /// `x · wᵀ + b` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(DgaError::dim(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push_data(shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds vector `b` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.dims(x).1;
        if self.value(b).len() != c {
            return Err(DgaError::dim(format!(
                "add_row {:?} + {:?}",
                self.shape(x),
                self.shape(b)
            )));
        }
        let bd = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bd).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(x) || self.rg(b);
        let shape = self.shape(x).to_vec();
        Ok(self.push_data(shape, out, Op::AddRow(x, b), rg))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(s).len() != r {
            return Err(DgaError::dim(format!(
                "scale_rows {:?} by {:?}",
                self.shape(x),
                self.shape(s)
            )));
        }
        let sd = self.data(s);
        let mut out = self.data(x).to_vec();
        for (row, sv) in out.chunks_mut(c).zip(sd) {
            row.iter_mut().for_each(|o| *o *= sv);
        }
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push_data(shape, out, Op::ScaleRows(x, s), rg))
    }

    /// Multiplies column `j` of `x` by `s[j]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(s).len() != c {
            return Err(DgaError::dim(format!(
                "scale_cols {:?} by {:?}",
                self.shape(x),
                self.shape(s)
            )));
        }
        let sd = self.data(s);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(sd).for_each(|(o, v)| *o *= v);
        }
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push_data(shape, out, Op::ScaleCols(x, s), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push_data(shape, data, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    /// Softmax of each row (a vector is a single row).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, c) = self.dims(x);
        let mut out = self.data(x).to_vec();
        out.chunks_mut(c).for_each(kernels::softmax_in_place);
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push_data(shape, out, Op::SoftmaxRows(x), rg)
    }

    /// `row / (‖row‖₂ + ε)` for each row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, c) = self.dims(x);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let d = kernels::norm(row) + L2_EPS;
            row.iter_mut().for_each(|v| *v /= d);
        }
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push_data(shape, out, Op::L2NormRows(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push_data(vec![c, r], out, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(DgaError::dim(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Side-by-side concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DgaError::dim("concat of nothing"));
        };
        let rows = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(DgaError::dim("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let rank1 = rows == 1 && parts.iter().all(|&p| self.value(p).rank() <= 1);
        let shape = if rank1 { vec![total] } else { vec![rows, total] };
        Ok(self.push_data(shape, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(DgaError::dim(format!("slice {start}..{} of {c} columns", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        let shape = if self.value(x).rank() <= 1 { vec![len] } else { vec![r, len] };
        Ok(self.push_data(shape, out, Op::SliceCols(x, start), rg))
    }

    /// Picks rows by index (repeats allowed), e.g. an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.is_empty() {
            return Err(DgaError::dim("gather of no rows"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(DgaError::dim(format!("row {bad} out of {r}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(x);
        Ok(self.push_data(vec![idx.len(), c], out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Row `i` as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let g = self.gather_rows(x, &[i])?;
        let c = self.dims(g).1;
        self.reshape(g, &[c])
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(DgaError::dim("stack of nothing"));
        };
        let c = self.value(first).len();
        if rows.iter().any(|&v| self.value(v).len() != c) {
            return Err(DgaError::dim("stack_rows length mismatch"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &v in rows {
            out.extend_from_slice(self.data(v));
        }
        let rg = rows.iter().any(|&v| self.rg(v));
        Ok(self.push_data(vec![rows.len(), c], out, Op::StackRows(rows.to_vec()), rg))
    }

    /// Builds a tensor whose flat element `i` is `x[idx[i]]`, or zero for `None`.
    pub fn gather_elems(&mut self, x: Var, idx: &[Option<usize>], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(DgaError::dim("gather_elems shape/index mismatch"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len());
        for i in idx {
            match i {
                Some(i) if *i >= n => return Err(DgaError::dim(format!("element {i} out of {n}"))),
                Some(i) => out.push(src[*i]),
                None => out.push(0.0),
            }
        }
        let rg = self.rg(x);
        Ok(self.push_data(shape.to_vec(), out, Op::GatherElems(x, idx.to_vec()), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push_data(vec![], vec![s], Op::SumAll(x), rg)
    }

    /// Flat element `i` as a scalar.
    pub fn element(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).len();
        if i >= n {
            return Err(DgaError::dim(format!("element {i} out of {n}")));
        }
        let v = self.data(x)[i];
        let rg = self.rg(x);
        Ok(self.push_data(vec![], vec![v], Op::Element(x, i), rg))
    }

    /// `1/x` where `x ≥ threshold`, zero elsewhere.
    pub fn safe_recip(&mut self, x: Var, threshold: f64) -> Var {
        self.map(x, Op::SafeRecip(x), |v| if v >= threshold { 1.0 / v } else { 0.0 })
    }

    /// Row `i` taken from `a` where `mask[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "select_rows")?;
        let (r, c) = self.dims(a);
        if mask.len() != r {
            return Err(DgaError::dim("select_rows mask length"));
        }
        let mut out = Vec::with_capacity(r * c);
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { a } else { b };
            out.extend_from_slice(self.value(src).row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push_data(shape, out, Op::SelectRows(mask.to_vec(), a, b), rg))
    }

    /// All pairwise row sums: row `k·L + l` is `a[k] + b[l]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ka, c) = self.dims(a);
        let (lb, c2) = self.dims(b);
        if c != c2 {
            return Err(DgaError::dim("pairwise_add column mismatch"));
        }
        let mut out = Vec::with_capacity(ka * lb * c);
        for k in 0..ka {
            let ar = self.value(a).row(k);
            for l in 0..lb {
                let br = self.value(b).row(l);
                out.extend(ar.iter().zip(br).map(|(x, y)| x + y));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(vec![ka * lb, c], out, Op::PairwiseAdd(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`; returns ∂loss/∂parameter for every
    /// parameter that was recorded (others stay zero).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(DgaError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_for(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        at: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[at];
        let y = self.val(at).data();
        // Adds into the gradient buffer of `v`, allocating it on first touch.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.val(v.0).len();
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add_into(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    matmul_nt_acc(g, self.data(*b), slot!(*a), m, n, k);
                }
                if self.rg(*b) {
                    matmul_tn_acc(self.data(*a), g, slot!(*b), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.rg(*a) {
                    matmul_acc(g, self.data(*b), slot!(*a), m, n, k);
                }
                if self.rg(*b) {
                    matmul_tn_acc(g, self.data(*a), slot!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        slot!(v).iter_mut().zip(g).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if self.rg(*b) {
                    slot!(*b).iter_mut().zip(g).for_each(|(s, d)| *s -= d);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.data(*b);
                    for ((s, d), w) in slot!(*a).iter_mut().zip(g).zip(bd) {
                        *s += d * w;
                    }
                }
                if self.rg(*b) {
                    let ad = self.data(*a);
                    for ((s, d), w) in slot!(*b).iter_mut().zip(g).zip(ad) {
                        *s += d * w;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = self.dims(*x).1;
                if self.rg(*x) {
                    slot!(*x).iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if self.rg(*b) {
                    let sb = slot!(*b);
                    for row in g.chunks(c) {
                        sb.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let c = self.dims(*x).1;
                if self.rg(*x) {
                    let sd = self.data(*s);
                    for ((dst, row), sv) in slot!(*x).chunks_mut(c).zip(g.chunks(c)).zip(sd) {
                        dst.iter_mut().zip(row).for_each(|(a, d)| *a += d * sv);
                    }
                }
                if self.rg(*s) {
                    let xd = self.data(*x);
                    for (r, ss) in slot!(*s).iter_mut().enumerate() {
                        *ss += dot(&g[r * c..(r + 1) * c], &xd[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ScaleCols(x, s) => {
                let c = self.dims(*x).1;
                if self.rg(*x) {
                    let sd = self.data(*s);
                    for (dst, row) in slot!(*x).chunks_mut(c).zip(g.chunks(c)) {
                        for ((a, d), sv) in dst.iter_mut().zip(row).zip(sd) {
                            *a += d * sv;
                        }
                    }
                }
                if self.rg(*s) {
                    let xd = self.data(*x);
                    let ss = slot!(*s);
                    for (row, xrow) in g.chunks(c).zip(xd.chunks(c)) {
                        for ((a, d), xv) in ss.iter_mut().zip(row).zip(xrow) {
                            *a += d * xv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                for ((s, d), yv) in slot!(*x).iter_mut().zip(g).zip(y) {
                    *s += d * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(x) => {
                for ((s, d), yv) in slot!(*x).iter_mut().zip(g).zip(y) {
                    *s += d * yv * (1.0 - yv);
                }
            }
            Op::Relu(x) => {
                for ((s, d), yv) in slot!(*x).iter_mut().zip(g).zip(y) {
                    if *yv > 0.0 {
                        *s += d;
                    }
                }
            }
            Op::Affine(x, scale) => {
                slot!(*x).iter_mut().zip(g).for_each(|(s, d)| *s += d * scale);
            }
            Op::SoftmaxRows(x) => {
                let c = self.dims(*x).1;
                let sx = slot!(*x);
                for ((dst, grow), yrow) in sx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let inner = dot(grow, yrow);
                    for ((a, d), yv) in dst.iter_mut().zip(grow).zip(yrow) {
                        *a += yv * (d - inner);
                    }
                }
            }
            Op::L2NormRows(x) => {
                let c = self.dims(*x).1;
                let xd = self.data(*x);
                let sx = slot!(*x);
                for r in 0..(xd.len() / c) {
                    let xr = &xd[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let norm = kernels::norm(xr);
                    let den = norm + L2_EPS;
                    // y = x/(n+ε): ∂y/∂x = I/den − x xᵀ/(n·den²)
                    let proj = if norm > 0.0 { dot(gr, xr) / (norm * den * den) } else { 0.0 };
                    for ((a, d), xv) in sx[r * c..(r + 1) * c].iter_mut().zip(gr).zip(xr) {
                        *a += d / den - proj * xv;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                let sx = slot!(*x);
                for i in 0..r {
                    for j in 0..c {
                        sx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => {
                slot!(*x).iter_mut().zip(g).for_each(|(s, d)| *s += d);
            }
            Op::ConcatCols(parts) => {
                let total = self.val(at).cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if self.rg(p) {
                        let sp = slot!(p);
                        for i in 0..r {
                            let src = &g[i * total + offset..i * total + offset + c];
                            sp[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.dims(*x).1;
                let len = self.val(at).cols();
                let sx = slot!(*x);
                for (i, grow) in g.chunks(len).enumerate() {
                    sx[i * c + start..i * c + start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, d)| *s += d);
                }
            }
            Op::GatherRows(x, idx) => {
                let c = self.dims(*x).1;
                let sx = slot!(*x);
                for (grow, &i) in g.chunks(c).zip(idx) {
                    sx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, d)| *s += d);
                }
            }
            Op::StackRows(rows) => {
                let c = self.val(at).cols();
                for (grow, &v) in g.chunks(c).zip(rows) {
                    if self.rg(v) {
                        slot!(v).iter_mut().zip(grow).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::GatherElems(x, idx) => {
                let sx = slot!(*x);
                for (d, i) in g.iter().zip(idx) {
                    if let Some(i) = i {
                        sx[*i] += d;
                    }
                }
            }
            Op::SumAll(x) => {
                slot!(*x).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Element(x, i) => {
                slot!(*x)[*i] += g[0];
            }
            Op::SafeRecip(x) => {
                for ((s, d), yv) in slot!(*x).iter_mut().zip(g).zip(y) {
                    // d(1/x)/dx = −1/x² = −y²; masked entries have y = 0.
                    *s -= d * yv * yv;
                }
            }
            Op::SelectRows(mask, a, b) => {
                let c = self.val(at).cols();
                for (pick, v) in [(true, *a), (false, *b)] {
                    if !self.rg(v) {
                        continue;
                    }
                    let sv = slot!(v);
                    for (i, &m) in mask.iter().enumerate() {
                        if m == pick {
                            sv[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                }
            }
            Op::PairwiseAdd(a, b) => {
                let (ka, c) = self.dims(*a);
                let lb = self.dims(*b).0;
                if self.rg(*a) {
                    let sa = slot!(*a);
                    for k in 0..ka {
                        for l in 0..lb {
                            let gr = &g[(k * lb + l) * c..(k * lb + l + 1) * c];
                            sa[k * c..(k + 1) * c]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                }
                if self.rg(*b) {
                    let sb = slot!(*b);
                    for k in 0..ka {
                        for l in 0..lb {
                            let gr = &g[(k * lb + l) * c..(k * lb + l + 1) * c];
                            sb[l * c..(l + 1) * c]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(s, d)| *s += d);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
