use crate::gemm::gemm;
use crate::tensor::{cols_of, rows_of};
use crate::{Gradients, NetError, ParamId, ParamStore, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
    Abs,
    /// `sqrt(max(x, 0))`; the derivative is taken as zero at the origin.
    SafeSqrt,
    Square,
    /// `x ln x` with `0 ln 0 = 0`.
    XLogX,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Backward rule of an operation implemented outside this crate.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; `backward` receives the input values, the output value
/// and the gradient of the output, and returns one gradient per input.
pub trait BackwardRule {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_output: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        f: Binary,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SoftmaxRows {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumRows {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record over a borrowed parameter store.
///
/// Nodes are created in execution order, so the record is topologically
/// sorted by construction and `backward` is a single reverse sweep.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).value.data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).value.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x W + b` for `x: [n, k]`, `W: [k, m]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || cols_of(xs) != ws[0] || bs.iter().product::<usize>() != ws[1] {
            return Err(NetError::ShapeMismatch {
                op: "dense",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, k, m) = (rows_of(xs), ws[0], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b));
        }
        gemm(
            n,
            k,
            m,
            self.value(x),
            (k, 1),
            self.value(w),
            (m, 1),
            1.0,
            &mut out,
            (m, 1),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, m], out, Op::Dense { x, w, b }, needs))
    }

    /// Matrix product of two 2-D nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(NetError::ShapeMismatch {
                op: "matmul",
                lhs: as_.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (n, k, m) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a),
            (k, 1),
            self.value(b),
            (m, 1),
            0.0,
            &mut out,
            (m, 1),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![n, m], out, Op::MatMul { a, b }, needs))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).iter().map(|&v| unary_forward(f, v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, Op::Unary { x, f }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::SafeSqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn xlogx(&mut self, x: Var) -> Var {
        self.unary(x, Unary::XLogX)
    }

    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NetError::ShapeMismatch {
                op: "elementwise",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| match f {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Binary { a, b, f }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, Op::AddScalar { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NetError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Reshape { x }, needs))
    }

    /// Concatenation along the last axis; all parts must agree on the rest.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NetError::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(NetError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows = lead.iter().product::<usize>();
        let widths: Vec<usize> = parts.iter().map(|&p| cols_of(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = cols_of(&s);
        if start > end || end > cols {
            return Err(NetError::ShapeMismatch {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, end],
            });
        }
        let rows = rows_of(&s);
        let w = end - start;
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let mut shape = s;
        *shape.last_mut().expect("non-empty shape") = w;
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::SliceCols { x, start }, needs))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cols = cols_of(&s);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push(s, out, Op::SoftmaxRows { x }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![v], Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x);
        let v = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let needs = self.needs(x);
        self.push(vec![1], vec![v], Op::Mean { x }, needs)
    }

    /// Sum over the last axis, keeping it with width one.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cols = cols_of(&s).max(1);
        let out: Vec<f64> = self.value(x).chunks(cols).map(|r| r.iter().sum()).collect();
        let mut shape = s;
        *shape.last_mut().expect("non-empty shape") = 1;
        let needs = self.needs(x);
        self.push(shape, out, Op::SumRows { x }, needs)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NetError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.value(a), self.value(b));
        let v = da
            .iter()
            .zip(db)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / da.len().max(1) as f64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![v], Op::Mse { a, b }, needs))
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        let shape = output.shape().to_vec();
        self.push(
            shape,
            output.into_data(),
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs,
        )
    }

    /// Fingerprint of the branch taken at every kink (ReLU and |x|).
    ///
    /// Finite-difference checks compare fingerprints to discard perturbations
    /// that cross a non-differentiable point.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Unary { x, f } = node.op {
                if matches!(f, Unary::Relu | Unary::Abs) {
                    for &v in self.value(x) {
                        h ^= u64::from(v > 0.0) + 2 * u64::from(v < 0.0);
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        }
        h
    }

    /// Accumulates d(loss)/d(param) into `grads` for every parameter node.
    ///
    /// Gradients are added, never overwritten; parameters the loss does not
    /// reach keep whatever `grads` held before.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NetError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, Var(i), &g, &mut adj, grads);
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(
        &self,
        node: &Node,
        this: Var,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, g),
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (k, m) = (ws[0], ws[1]);
                let n = g.len() / m;
                if let Some(dw) = self.slot(adj, *w) {
                    gemm(k, n, m, self.value(*x), (1, k), g, (m, 1), 1.0, dw, (m, 1));
                }
                if let Some(db) = self.slot(adj, *b) {
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if let Some(dx) = self.slot(adj, *x) {
                    gemm(n, m, k, g, (m, 1), self.value(*w), (1, m), 1.0, dx, (k, 1));
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if let Some(da) = self.slot(adj, *a) {
                    gemm(n, m, k, g, (m, 1), self.value(*b), (1, m), 1.0, da, (k, 1));
                }
                if let Some(db) = self.slot(adj, *b) {
                    gemm(k, n, m, self.value(*a), (1, k), g, (m, 1), 1.0, db, (m, 1));
                }
            }
            Op::Unary { x, f } => {
                let xv = self.value(*x);
                let yv = self.value(this);
                if let Some(dx) = self.slot(adj, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * unary_derivative(*f, xv[i], yv[i]);
                    }
                }
            }
            Op::Binary { a, b, f } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(adj, *a) {
                    match f {
                        Binary::Add | Binary::Sub => add_into(da, g),
                        Binary::Mul => {
                            for i in 0..g.len() {
                                da[i] += g[i] * bv[i];
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    match f {
                        Binary::Add => add_into(db, g),
                        Binary::Sub => {
                            for (d, v) in db.iter_mut().zip(g) {
                                *d -= v;
                            }
                        }
                        Binary::Mul => {
                            for i in 0..g.len() {
                                db[i] += g[i] * av[i];
                            }
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(adj, *x) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(dx) = self.slot(adj, *x) {
                    add_into(dx, g);
                }
            }
            Op::Concat { parts } => {
                let total = cols_of(&node.shape);
                let rows = rows_of(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = cols_of(self.shape(p));
                    if let Some(dp) = self.slot(adj, p) {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = cols_of(self.shape(*x));
                let w = cols_of(&node.shape);
                let rows = rows_of(&node.shape);
                if let Some(dx) = self.slot(adj, *x) {
                    for r in 0..rows {
                        add_into(
                            &mut dx[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let cols = cols_of(&node.shape).max(1);
                let y = self.value(this);
                if let Some(dx) = self.slot(adj, *x) {
                    for ((dr, yr), gr) in
                        dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..cols {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(adj, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = self.slot(adj, *x) {
                    let s = g[0] / dx.len().max(1) as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumRows { x } => {
                let cols = cols_of(self.shape(*x)).max(1);
                if let Some(dx) = self.slot(adj, *x) {
                    for (row, gv) in dx.chunks_mut(cols).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = 2.0 * g[0] / av.len().max(1) as f64;
                if let Some(da) = self.slot(adj, *a) {
                    for i in 0..da.len() {
                        da[i] += s * (av[i] - bv[i]);
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for i in 0..db.len() {
                        db[i] -= s * (av[i] - bv[i]);
                    }
                }
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = rule.backward(&vals, self.value(this), g);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{}", rule.name());
                for (&v, dg) in inputs.iter().zip(&input_grads) {
                    if let Some(dv) = self.slot(adj, v) {
                        add_into(dv, dg);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn unary_forward(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Relu => x.max(0.0),
        Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        Unary::Abs => x.abs(),
        Unary::SafeSqrt => x.max(0.0).sqrt(),
        Unary::Square => x * x,
        Unary::XLogX => {
            if x > 0.0 {
                x * x.ln()
            } else {
                0.0
            }
        }
    }
}

fn unary_derivative(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Softplus => 1.0 / (1.0 + (-x).exp()),
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::SafeSqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::XLogX => {
            if x > 0.0 {
                x.ln() + 1.0
            } else {
                0.0
            }
        }
    }
}
