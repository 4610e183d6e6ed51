use super::value::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    AddRow(Var, Var),
    Reduce(Var, Reduce, Option<usize>),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    LogSumExpGroups(Var, Vec<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and the backward pass is a single reverse sweep.
/// A graph is built for one forward pass and then dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled to `shape` when `v` is unreachable.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let out = gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = x[r * n + c];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        check_finite("add", &out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        check_finite("sub", &out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        check_finite("mul", &out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        check_finite("scale", &out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Scale(a, factor), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        check_finite("exp", &out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("input {bad} is not strictly positive"),
            });
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// Square root. The gradient at an input of exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("input {bad} is negative"),
            });
        }
        let out = self.value(a).map(f64::sqrt);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// Adds the vector `row` (length n) to every row of the m×n matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", a)?;
        if self.shape(row) != [n] {
            return Err(Error::dim(
                "add_row",
                format!("[{m}, {n}] + row {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        check_finite("add_row", &out)?;
        let rg = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, Reduce::Sum, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, Reduce::Mean, axis)
    }

    pub fn reduce(&mut self, a: Var, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let out = match axis {
            None => {
                let s: f64 = x.data().iter().sum();
                let v = match kind {
                    Reduce::Sum => s,
                    Reduce::Mean => s / x.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                let shape = x.shape();
                if ax >= shape.len() {
                    return Err(Error::dim(
                        "reduce",
                        format!("axis {ax} out of range for shape {shape:?}"),
                    ));
                }
                let (outer, len, inner) = split_axis(shape, ax);
                let mut acc = vec![0.0; outer * inner];
                let d = x.data();
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            acc[o * inner + i] += d[base + i];
                        }
                    }
                }
                if kind == Reduce::Mean {
                    acc.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut out_shape = shape.to_vec();
                out_shape.remove(ax);
                Tensor::from_parts(out_shape, acc)
            }
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reduce(a, kind, axis), rg))
    }

    /// Row-wise `x - logsumexp(x)` with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("log_softmax_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let lse = logsumexp(row.iter().copied());
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        check_finite("log_softmax_rows", &out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::LogSoftmaxRows(a), rg))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below
    /// `min_norm` are rejected.
    pub fn normalize_rows(&mut self, a: Var, min_norm: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims("normalize_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= min_norm) {
                return Err(Error::DegenerateEmbedding {
                    norm,
                    min: min_norm,
                });
            }
            for c in 0..n {
                out[r * n + c] = row[c] / norm;
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::NormalizeRows(a),
            rg,
        ))
    }

    /// Picks rows of a matrix by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let (m, n) = self.matrix_dims("select_rows", a)?;
        if indices.is_empty() {
            return Err(Error::dim("select_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::dim(
                "select_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in &indices {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_parts(vec![indices.len(), n], out);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SelectRows(a, indices), rg))
    }

    /// Picks elements by flat row-major index into a vector.
    pub fn gather(&mut self, a: Var, flat: Vec<usize>) -> Result<Var> {
        let len = self.value(a).len();
        if flat.is_empty() {
            return Err(Error::dim("gather", "empty index list"));
        }
        if let Some(&bad) = flat.iter().find(|&&i| i >= len) {
            return Err(Error::dim(
                "gather",
                format!("index {bad} out of range for {len} elements"),
            ));
        }
        let x = self.value(a).data();
        let out = Tensor::vector(flat.iter().map(|&i| x[i]).collect());
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Gather(a, flat), rg))
    }

    /// For each group of flat indices, the stabilized log-sum-exp of the
    /// selected elements. Returns a vector with one entry per group.
    pub fn logsumexp_groups(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let len = self.value(a).len();
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::dim("logsumexp_groups", "empty group"));
        }
        if groups.iter().flatten().any(|&i| i >= len) {
            return Err(Error::dim(
                "logsumexp_groups",
                format!("index out of range for {len} elements"),
            ));
        }
        let x = self.value(a).data();
        let out: Vec<f64> = groups
            .iter()
            .map(|g| logsumexp(g.iter().map(|&i| x[i])))
            .collect();
        let out = Tensor::vector(out);
        check_finite("logsumexp_groups", &out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::LogSumExpGroups(a, groups), rg))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let da = gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize));
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let db = gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1));
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (g.rows(), g.cols());
                let mut d = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        d[c * n + r] = g.data()[r * m + c];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], d));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip(bv, |x, y| x * y));
                self.accumulate(grads, *b, g.zip(av, |x, y| x * y));
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip(out, |x, y| x * y)),
            Op::Log(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip(av, |x, y| x / y));
            }
            Op::Sqrt(a) => self.accumulate(
                grads,
                *a,
                g.zip(out, |x, y| if y > 0.0 { 0.5 * x / y } else { 0.0 }),
            ),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip(av, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[row.0].requires_grad {
                    let n = g.cols();
                    let mut acc = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (s, v) in acc.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_parts(vec![n], acc));
                }
            }
            Op::Reduce(a, kind, axis) => {
                let shape = self.shape(*a).to_vec();
                let da = match axis {
                    None => {
                        let n = shape.iter().product::<usize>();
                        let v = match kind {
                            Reduce::Sum => g.item(),
                            Reduce::Mean => g.item() / n as f64,
                        };
                        Tensor::full(&shape, v)
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(&shape, *ax);
                        let div = match kind {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => len as f64,
                        };
                        let gd = g.data();
                        let mut d = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for i in 0..inner {
                                    d[base + i] = gd[o * inner + i] / div;
                                }
                            }
                        }
                        Tensor::from_parts(shape, d)
                    }
                };
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut d = g.data().to_vec();
                for (drow, orow) in d.chunks_mut(n).zip(out.data().chunks(n)) {
                    let gsum: f64 = drow.iter().sum();
                    for (dv, ov) in drow.iter_mut().zip(orow) {
                        *dv -= ov.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let x = &av.data()[r * n..(r + 1) * n];
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::SelectRows(a, indices) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut d = vec![0.0; av.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..n {
                        d[i * n + c] += g.data()[k * n + c];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), d));
            }
            Op::Gather(a, flat) => {
                let av = self.value(*a);
                let mut d = vec![0.0; av.len()];
                for (k, &i) in flat.iter().enumerate() {
                    d[i] += g.data()[k];
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), d));
            }
            Op::LogSumExpGroups(a, groups) => {
                let av = self.value(*a);
                let x = av.data();
                let mut d = vec![0.0; av.len()];
                for (k, group) in groups.iter().enumerate() {
                    let lse = out.data()[k];
                    let gk = g.data()[k];
                    for &i in group {
                        d[i] += gk * (x[i] - lse).exp();
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), d));
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted log-sum-exp of a non-empty sequence.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
