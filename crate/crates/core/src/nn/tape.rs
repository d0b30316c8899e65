//! Reverse-mode automatic differentiation over vector-valued nodes.
//!
//! Every node owns a contiguous slice of one value arena. Nodes are appended
//! in evaluation order, so operands always precede their consumers and the
//! backward sweep is a single reverse pass over the node list.

use super::params::{ParamId, ParamStore};
use crate::error::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    /// Vector times a length-1 node.
    MulScalar(Var, Var),
    /// Row-major `rows x cols` matrix node times a vector node.
    MatVec { m: Var, v: Var, rows: u32, cols: u32 },
    /// Transposed product `m^T v`.
    MatTVec { m: Var, v: Var, rows: u32, cols: u32 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Dot(Var, Var),
    Slice { src: Var, start: u32 },
    Concat(Var, Var),
    /// Externally evaluated map with its Jacobian (`len x input_len`, row-major)
    /// stored in the auxiliary arena.
    Mapped { input: Var, jac: usize },
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

/// Append-only computation record.
#[derive(Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    aux: Vec<f64>,
    grads: Vec<f64>,
    params: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.aux.clear();
        self.grads.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, len: usize) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node { op, off, len });
        (id, off)
    }

    fn push_values(&mut self, op: Op, values: &[f64]) -> Var {
        let off = self.vals.len();
        self.vals.extend_from_slice(values);
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node { op, off, len: values.len() });
        id
    }

    #[inline]
    fn node(&self, v: Var) -> Node {
        self.nodes[v.index()]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = self.node(v);
        &self.vals[n.off..n.off + n.len]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.node(v).len
    }

    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push_values(Op::Const, values)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_values(Op::Const, &[value])
    }

    /// Registers every parameter of `store` as a leaf. Subsequent calls to
    /// [`Tape::param`] resolve to these leaves.
    pub fn load_params(&mut self, store: &ParamStore) {
        self.params.clear();
        self.params.reserve(store.count());
        for (id, _) in store.entries() {
            let v = self.push_values(Op::Param(id), store.get(id));
            self.params.push(Some(v));
        }
    }

    /// Leaf node for a parameter previously registered with [`Tape::load_params`].
    pub fn param(&self, id: ParamId) -> Var {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .expect("parameter not loaded on tape")
    }

    fn check_same(&self, a: Var, b: Var, what: &'static str) -> Result<usize, NnError> {
        let (la, lb) = (self.dim(a), self.dim(b));
        if la != lb {
            return Err(NnError::Shape { op: what, expected: la, got: lb });
        }
        Ok(la)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, what: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var, NnError> {
        let len = self.check_same(a, b, what)?;
        let (id, off) = self.push(op, len);
        let (na, nb) = (self.node(a), self.node(b));
        for i in 0..len {
            self.vals[off + i] = f(self.vals[na.off + i], self.vals[nb.off + i]);
        }
        Ok(id)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let na = self.node(a);
        let (id, off) = self.push(op, na.len);
        for i in 0..na.len {
            self.vals[off + i] = f(self.vals[na.off + i]);
        }
        id
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NnError> {
        if self.dim(s) != 1 {
            return Err(NnError::Shape { op: "mul_scalar", expected: 1, got: self.dim(s) });
        }
        let c = self.scalar_value(s);
        Ok(self.unary(a, Op::MulScalar(a, s), |x| x * c))
    }

    /// `m` holds a row-major `rows x cols` matrix.
    pub fn matvec(&mut self, m: Var, v: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        if self.dim(m) != rows * cols {
            return Err(NnError::Shape { op: "matvec(matrix)", expected: rows * cols, got: self.dim(m) });
        }
        if self.dim(v) != cols {
            return Err(NnError::Shape { op: "matvec(vector)", expected: cols, got: self.dim(v) });
        }
        let (id, off) = self.push(Op::MatVec { m, v, rows: rows as u32, cols: cols as u32 }, rows);
        let (nm, nv) = (self.node(m), self.node(v));
        for r in 0..rows {
            let row = &self.vals[nm.off + r * cols..nm.off + (r + 1) * cols];
            let x = &self.vals[nv.off..nv.off + cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            self.vals[off + r] = acc;
        }
        Ok(id)
    }

    /// `m^T v` for a row-major `rows x cols` matrix `m`.
    pub fn matvec_t(&mut self, m: Var, v: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        if self.dim(m) != rows * cols {
            return Err(NnError::Shape { op: "matvec_t(matrix)", expected: rows * cols, got: self.dim(m) });
        }
        if self.dim(v) != rows {
            return Err(NnError::Shape { op: "matvec_t(vector)", expected: rows, got: self.dim(v) });
        }
        let (id, off) = self.push(Op::MatTVec { m, v, rows: rows as u32, cols: cols as u32 }, cols);
        let (nm, nv) = (self.node(m), self.node(v));
        for r in 0..rows {
            let vr = self.vals[nv.off + r];
            for c in 0..cols {
                self.vals[off + c] += self.vals[nm.off + r * cols + c] * vr;
            }
        }
        Ok(id)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), logistic)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push_values(Op::Sum(a), &[s])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same(a, b, "dot")?;
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        Ok(self.push_values(Op::Dot(a, b), &[s]))
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let n = self.node(src);
        if start + len > n.len {
            return Err(NnError::Shape { op: "slice", expected: n.len, got: start + len });
        }
        let (id, off) = self.push(Op::Slice { src, start: start as u32 }, len);
        self.vals.copy_within(n.off + start..n.off + start + len, off);
        Ok(id)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (self.node(a), self.node(b));
        let (id, off) = self.push(Op::Concat(a, b), na.len + nb.len);
        self.vals.copy_within(na.off..na.off + na.len, off);
        self.vals.copy_within(nb.off..nb.off + nb.len, off + na.len);
        id
    }

    /// Records an externally evaluated map `y = f(input)` together with its
    /// Jacobian `dy/dinput` (row-major, `value.len() x input_len`).
    pub fn mapped(&mut self, input: Var, value: &[f64], jacobian: &[f64]) -> Result<Var, NnError> {
        let expected = value.len() * self.dim(input);
        if jacobian.len() != expected {
            return Err(NnError::Shape { op: "mapped(jacobian)", expected, got: jacobian.len() });
        }
        let jac = self.aux.len();
        self.aux.extend_from_slice(jacobian);
        Ok(self.push_values(Op::Mapped { input, jac }, value))
    }

    /// Runs the reverse sweep from a scalar `root`. Gradients are read back
    /// with [`Tape::grad`] or [`Tape::param_grads`].
    pub fn backward(&mut self, root: Var) -> Result<(), NnError> {
        if self.dim(root) != 1 {
            return Err(NnError::NonScalarRoot(self.dim(root)));
        }
        self.grads.clear();
        self.grads.resize(self.vals.len(), 0.0);
        let root_node = self.node(root);
        self.grads[root_node.off] = 1.0;

        let vals = &self.vals;
        let grads = &mut self.grads;
        let aux = &self.aux;
        for idx in (0..=root.index()).rev() {
            let node = self.nodes[idx];
            let (o, n) = (node.off, node.len);
            if grads[o..o + n].iter().all(|g| *g == 0.0) {
                continue;
            }
            match node.op {
                Op::Const | Op::Param(_) => {}
                Op::Add(a, b) => {
                    let (oa, ob) = (self.nodes[a.index()].off, self.nodes[b.index()].off);
                    for i in 0..n {
                        let g = grads[o + i];
                        grads[oa + i] += g;
                        grads[ob + i] += g;
                    }
                }
                Op::Sub(a, b) => {
                    let (oa, ob) = (self.nodes[a.index()].off, self.nodes[b.index()].off);
                    for i in 0..n {
                        let g = grads[o + i];
                        grads[oa + i] += g;
                        grads[ob + i] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let (oa, ob) = (self.nodes[a.index()].off, self.nodes[b.index()].off);
                    for i in 0..n {
                        let g = grads[o + i];
                        grads[oa + i] += g * vals[ob + i];
                        grads[ob + i] += g * vals[oa + i];
                    }
                }
                Op::Neg(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        grads[oa + i] -= grads[o + i];
                    }
                }
                Op::Scale(a, c) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        grads[oa + i] += c * grads[o + i];
                    }
                }
                Op::MulScalar(a, s) => {
                    let (oa, os) = (self.nodes[a.index()].off, self.nodes[s.index()].off);
                    let c = vals[os];
                    let mut gs = 0.0;
                    for i in 0..n {
                        let g = grads[o + i];
                        grads[oa + i] += g * c;
                        gs += g * vals[oa + i];
                    }
                    grads[os] += gs;
                }
                Op::MatVec { m, v, rows, cols } => {
                    let (om, ov) = (self.nodes[m.index()].off, self.nodes[v.index()].off);
                    let (rows, cols) = (rows as usize, cols as usize);
                    for r in 0..rows {
                        let g = grads[o + r];
                        if g == 0.0 {
                            continue;
                        }
                        let base = om + r * cols;
                        for c in 0..cols {
                            grads[base + c] += g * vals[ov + c];
                            grads[ov + c] += g * vals[base + c];
                        }
                    }
                }
                Op::MatTVec { m, v, rows, cols } => {
                    let (om, ov) = (self.nodes[m.index()].off, self.nodes[v.index()].off);
                    let (rows, cols) = (rows as usize, cols as usize);
                    for r in 0..rows {
                        let vr = vals[ov + r];
                        let base = om + r * cols;
                        let mut gv = 0.0;
                        for c in 0..cols {
                            let g = grads[o + c];
                            grads[base + c] += g * vr;
                            gv += g * vals[base + c];
                        }
                        grads[ov + r] += gv;
                    }
                }
                Op::Tanh(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        let y = vals[o + i];
                        grads[oa + i] += grads[o + i] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        let y = vals[o + i];
                        grads[oa + i] += grads[o + i] * y * (1.0 - y);
                    }
                }
                Op::Relu(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        if vals[oa + i] > 0.0 {
                            grads[oa + i] += grads[o + i];
                        }
                    }
                }
                Op::Log(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        grads[oa + i] += grads[o + i] / vals[oa + i];
                    }
                }
                Op::Exp(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        grads[oa + i] += grads[o + i] * vals[o + i];
                    }
                }
                Op::Softplus(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        grads[oa + i] += grads[o + i] * logistic(vals[oa + i]);
                    }
                }
                Op::Square(a) => {
                    let oa = self.nodes[a.index()].off;
                    for i in 0..n {
                        grads[oa + i] += 2.0 * grads[o + i] * vals[oa + i];
                    }
                }
                Op::Sum(a) => {
                    let na = self.nodes[a.index()];
                    let g = grads[o];
                    for i in 0..na.len {
                        grads[na.off + i] += g;
                    }
                }
                Op::Dot(a, b) => {
                    let (na, ob) = (self.nodes[a.index()], self.nodes[b.index()].off);
                    let g = grads[o];
                    for i in 0..na.len {
                        grads[na.off + i] += g * vals[ob + i];
                        grads[ob + i] += g * vals[na.off + i];
                    }
                }
                Op::Slice { src, start } => {
                    let os = self.nodes[src.index()].off + start as usize;
                    for i in 0..n {
                        grads[os + i] += grads[o + i];
                    }
                }
                Op::Concat(a, b) => {
                    let (na, nb) = (self.nodes[a.index()], self.nodes[b.index()]);
                    for i in 0..na.len {
                        grads[na.off + i] += grads[o + i];
                    }
                    for i in 0..nb.len {
                        grads[nb.off + i] += grads[o + na.len + i];
                    }
                }
                Op::Mapped { input, jac } => {
                    let ni = self.nodes[input.index()];
                    for r in 0..n {
                        let g = grads[o + r];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &aux[jac + r * ni.len..jac + (r + 1) * ni.len];
                        for (c, j) in row.iter().enumerate() {
                            grads[ni.off + c] += g * j;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        let n = self.node(v);
        &self.grads[n.off..n.off + n.len]
    }

    /// Gradients for every loaded parameter, in parameter-id order.
    /// Parameters that did not contribute to the root get zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .filter_map(|v| *v)
            .map(|v| match self.node(v).op {
                Op::Param(id) => (id, self.grad(v).to_vec()),
                _ => unreachable!("parameter slot holds a non-parameter node"),
            })
            .collect()
    }

    /// Adds the parameter gradients into a flat buffer laid out like `store`.
    pub fn accumulate_param_grads(&self, store: &ParamStore, flat: &mut [f64]) {
        for v in self.params.iter().filter_map(|v| *v) {
            if let Op::Param(id) = self.node(v).op {
                let off = store.offset(id);
                for (dst, g) in flat[off..].iter_mut().zip(self.grad(v)) {
                    *dst += g;
                }
            }
        }
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
