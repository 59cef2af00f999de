use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

use super::tensor::{gemm, Operand, Tensor};

/// Handle to a node of an [`Expression`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, kind: LeafKind },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    RowNormalize(NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    SoftmaxCrossEntropy { logits: NodeId, target: NodeId },
    Mse(NodeId, NodeId),
    ReduceSum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Hadamard(..) => "hadamard",
            Op::ConcatCols(..) => "concat-cols",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::RowNormalize(_) => "row-normalize",
            Op::Transpose(_) => "transpose",
            Op::Scale(..) => "scalar-multiply",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::Mse(..) => "mean-squared-error",
            Op::ReduceSum(_) => "reduce-sum",
        }
    }

    fn operands(&self) -> impl Iterator<Item = NodeId> {
        let (a, b) = match *self {
            Op::Leaf { .. } | Op::Const(_) => (None, None),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Hadamard(a, b)
            | Op::ConcatCols(a, b)
            | Op::Mse(a, b)
            | Op::SoftmaxCrossEntropy {
                logits: a,
                target: b,
            } => (Some(a), Some(b)),
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::RowNormalize(a)
            | Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::ReduceSum(a) => (Some(a), None),
        };
        a.into_iter().chain(b)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// A differentiable computation over dense tensors.
///
/// Nodes are appended in construction order and may only reference nodes that
/// already exist, so the graph is acyclic and insertion order is a valid
/// topological order. Shapes are checked as nodes are added; broadcasting is
/// never implicit.
#[derive(Clone, Debug, Default)]
pub struct Expression {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

/// Values bound to the named leaves of an expression.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: &'a Tensor) -> Self {
        self.bind(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.values.get(name).copied()
    }
}

impl Expression {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn leaf_names(&self, kind: LeafKind) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf { name, kind: k } if *k == kind => Some(name.as_str()),
                _ => None,
            })
            .collect();
        names.sort_unstable();
        names
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        if id.0 >= self.nodes.len() {
            return Err(Error::shape(op, format!("operand {id:?} is not part of this expression")));
        }
        Ok(self.shape(id))
    }

    pub fn leaf(&mut self, name: &str, kind: LeafKind, rows: usize, cols: usize) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::shape("leaf", format!("leaf {name:?} declared twice")));
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                kind,
            },
            rows,
            cols,
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        self.leaf(name, LeafKind::Param, rows, cols)
    }

    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        self.leaf(name, LeafKind::Input, rows, cols)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let (r, c) = value.shape();
        self.push(Op::Const(value), r, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.check(a, "matmul")?;
        let (br, bc) = self.check(b, "matmul")?;
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        Ok(self.push(Op::MatMul(a, b), ar, bc))
    }

    fn same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let sa = self.check(a, op)?;
        let sb = self.check(b, op)?;
        if sa != sb {
            return Err(Error::shape(op, format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), r, c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("hadamard", a, b)?;
        Ok(self.push(Op::Hadamard(a, b), r, c))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.check(a, "concat-cols")?;
        let (br, bc) = self.check(b, "concat-cols")?;
        if ar != br {
            return Err(Error::shape("concat-cols", format!("{ar} rows vs {br} rows")));
        }
        Ok(self.push(Op::ConcatCols(a, b), ar, ac + bc))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        let (r, c) = self.check(a, op.name())?;
        Ok(self.push(op, r, c))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a))
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::RowNormalize(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(a, "transpose")?;
        Ok(self.push(Op::Transpose(a), c, r))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::Numeric { op: "scalar-multiply" });
        }
        self.unary(a, Op::Scale(a, factor))
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and the
    /// target distribution in the same row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (r, _) = self.same_shape("softmax-cross-entropy", logits, target)?;
        if r == 0 {
            return Err(Error::shape("softmax-cross-entropy", "no rows"));
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, target }, 1, 1))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("mean-squared-error", a, b)?;
        if r * c == 0 {
            return Err(Error::shape("mean-squared-error", "empty operands"));
        }
        Ok(self.push(Op::Mse(a, b), 1, 1))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "reduce-sum")?;
        Ok(self.push(Op::ReduceSum(a), 1, 1))
    }

    // Composite helpers built from the primitives above.

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(a, "one-minus")?;
        let ones = self.constant(Tensor::ones(r, c));
        self.sub(ones, a)
    }

    pub fn sum_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::shape("add", "empty sum"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn mean_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let s = self.sum_all(terms)?;
        self.scale(s, 1.0 / terms.len() as f64)
    }

    /// Weighted sum of 1x1 nodes; zero weights are skipped.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(w, t) in terms {
            if w == 0.0 {
                continue;
            }
            let scaled = if w == 1.0 { t } else { self.scale(t, w)? };
            acc = Some(match acc {
                Some(a) => self.add(a, scaled)?,
                None => scaled,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => {
                let (r, c) = terms.first().map_or((1, 1), |&(_, t)| self.shape(t));
                Ok(self.constant(Tensor::zeros(r, c)))
            }
        }
    }

    fn reachable(&self, roots: &[NodeId]) -> Vec<bool> {
        let last = roots.iter().map(|r| r.0).max().unwrap_or(0);
        let mut mark = vec![false; last + 1];
        for r in roots {
            mark[r.0] = true;
        }
        for i in (0..=last).rev() {
            if mark[i] {
                for o in self.nodes[i].op.operands() {
                    mark[o.0] = true;
                }
            }
        }
        mark
    }

    fn forward<'a>(&'a self, roots: &[NodeId], bindings: &Bindings<'a>) -> Result<Vec<Option<Cow<'a, Tensor>>>> {
        for &r in roots {
            self.check(r, "evaluate")?;
        }
        let live = self.reachable(roots);
        let mut values: Vec<Option<Cow<'a, Tensor>>> = vec![None; live.len()];
        for i in 0..live.len() {
            if !live[i] {
                continue;
            }
            let node = &self.nodes[i];
            let v = |id: NodeId| -> &Tensor { values[id.0].as_deref().expect("operand evaluated") };
            let value: Cow<'a, Tensor> = match &node.op {
                Op::Leaf { name, .. } => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                    if t.shape() != (node.rows, node.cols) {
                        return Err(Error::shape(
                            "leaf",
                            format!(
                                "{name:?} declared {}x{}, bound {}x{}",
                                node.rows,
                                node.cols,
                                t.rows(),
                                t.cols()
                            ),
                        ));
                    }
                    Cow::Borrowed(t)
                }
                Op::Const(t) => Cow::Borrowed(t),
                op => {
                    let out = eval_op(op, node, &v)?;
                    if out.data().iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numeric { op: op.name() });
                    }
                    Cow::Owned(out)
                }
            };
            values[i] = Some(value);
        }
        Ok(values)
    }

    pub fn evaluate(&self, root: NodeId, bindings: &Bindings<'_>) -> Result<Tensor> {
        let mut values = self.forward(&[root], bindings)?;
        Ok(values[root.0].take().expect("root evaluated").into_owned())
    }

    /// Evaluates several nodes with one forward pass.
    pub fn evaluate_many(&self, roots: &[NodeId], bindings: &Bindings<'_>) -> Result<Vec<Tensor>> {
        if roots.is_empty() {
            return Ok(Vec::new());
        }
        let values = self.forward(roots, bindings)?;
        Ok(roots
            .iter()
            .map(|r| values[r.0].as_deref().cloned().expect("root evaluated"))
            .collect())
    }

    pub fn gradients(
        &self,
        root: NodeId,
        bindings: &Bindings<'_>,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        self.value_and_gradients(root, bindings, wrt).map(|(_, g)| g)
    }

    /// Root value plus exact reverse-mode gradients of the (scalar) root with
    /// respect to each named leaf.
    pub fn value_and_gradients(
        &self,
        root: NodeId,
        bindings: &Bindings<'_>,
        wrt: &[&str],
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (rows, cols) = self.check(root, "gradients")?;
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for &name in wrt {
            let id = *self
                .leaves
                .get(name)
                .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
            targets.push((name, id));
        }
        let values = self.forward(&[root], bindings)?;
        let value = values[root.0].as_deref().expect("root evaluated").item();

        // Only nodes downstream of a requested leaf need adjoints.
        let mut needs = vec![false; root.0 + 1];
        for &(_, id) in &targets {
            if id.0 <= root.0 {
                needs[id.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !needs[i] && values[i].is_some() {
                needs[i] = self.nodes[i].op.operands().any(|o| needs[o.0]);
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if needs[root.0] {
            adj[root.0] = Some(Tensor::ones(1, 1));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                adj[i] = Some(g);
                continue;
            }
            let v = |id: NodeId| -> &Tensor { values[id.0].as_deref().expect("operand evaluated") };
            backward_op(&node.op, &g, values[i].as_deref().expect("node evaluated"), &v, &needs, &mut adj);
        }

        let mut out = BTreeMap::new();
        for (name, id) in targets {
            let (r, c) = self.shape(id);
            let g = adj.get_mut(id.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(r, c));
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric { op: "gradients" });
            }
            out.insert(name.to_string(), g);
        }
        Ok((value, out))
    }

    /// Largest relative disagreement between the analytic gradient and a
    /// central finite difference, over every entry of every requested leaf.
    pub fn finite_diff_check(
        &self,
        root: NodeId,
        bindings: &Bindings<'_>,
        wrt: &[&str],
        step: f64,
    ) -> Result<f64> {
        if !(step > 0.0) {
            return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
        }
        let analytic = self.gradients(root, bindings, wrt)?;
        let mut worst = 0.0f64;
        for &name in wrt {
            let base = bindings.get(name).ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
            let grad = &analytic[name];
            for i in 0..base.rows() {
                for j in 0..base.cols() {
                    let x = base.get(i, j);
                    let plus = base.with(i, j, x + step)?;
                    let minus = base.with(i, j, x - step)?;
                    let f_plus = self.evaluate(root, &bindings.clone().with(name, &plus))?.item();
                    let f_minus = self.evaluate(root, &bindings.clone().with(name, &minus))?.item();
                    let central = (f_plus - f_minus) / (2.0 * step);
                    let a = grad.get(i, j);
                    let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
                    worst = worst.max(err);
                }
            }
        }
        Ok(worst)
    }
}

pub fn evaluate(expr: &Expression, root: NodeId, bindings: &Bindings<'_>) -> Result<Tensor> {
    expr.evaluate(root, bindings)
}

pub fn gradients(
    expr: &Expression,
    root: NodeId,
    bindings: &Bindings<'_>,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor>> {
    expr.gradients(root, bindings, wrt)
}

pub fn finite_diff_check(
    expr: &Expression,
    root: NodeId,
    bindings: &Bindings<'_>,
    wrt: &[&str],
    step: f64,
) -> Result<f64> {
    expr.finite_diff_check(root, bindings, wrt, step)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_raw(a.rows(), a.cols(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(a.rows(), a.cols(), a.data().iter().map(|&x| f(x)).collect())
}

/// Per-row `(max, log-sum-exp)` of a logits matrix.
fn log_sum_exp_rows(z: &Tensor) -> Vec<f64> {
    (0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

fn eval_op<'t>(op: &Op, node: &Node, v: &impl Fn(NodeId) -> &'t Tensor) -> Result<Tensor> {
    Ok(match *op {
        Op::Leaf { .. } | Op::Const(_) => unreachable!("leaves are bound, not computed"),
        Op::MatMul(a, b) => {
            let mut out = Tensor::zeros(node.rows, node.cols);
            gemm(Operand::plain(v(a)), Operand::plain(v(b)), &mut out, false);
            out
        }
        Op::Add(a, b) => zip_map(v(a), v(b), |x, y| x + y),
        Op::Hadamard(a, b) => zip_map(v(a), v(b), |x, y| x * y),
        Op::ConcatCols(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let mut data = Vec::with_capacity(node.rows * node.cols);
            for i in 0..node.rows {
                data.extend_from_slice(ta.row(i));
                data.extend_from_slice(tb.row(i));
            }
            Tensor::from_raw(node.rows, node.cols, data)
        }
        Op::Relu(a) => map(v(a), |x| x.max(0.0)),
        Op::Sigmoid(a) => map(v(a), sigmoid),
        Op::RowNormalize(a) => {
            let t = v(a);
            let mut out = t.clone();
            for i in 0..t.rows() {
                let s: f64 = t.row(i).iter().sum();
                if s == 0.0 {
                    return Err(Error::Numeric { op: "row-normalize" });
                }
                for j in 0..t.cols() {
                    out.set(i, j, t.get(i, j) / s);
                }
            }
            out
        }
        Op::Transpose(a) => v(a).transpose(),
        Op::Scale(a, f) => map(v(a), |x| x * f),
        Op::SoftmaxCrossEntropy { logits, target } => {
            let (z, t) = (v(logits), v(target));
            let lse = log_sum_exp_rows(z);
            let mut total = 0.0;
            for (i, l) in lse.iter().enumerate() {
                for j in 0..z.cols() {
                    total -= t.get(i, j) * (z.get(i, j) - l);
                }
            }
            Tensor::from_raw(1, 1, vec![total / z.rows() as f64])
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let n = ta.data().len() as f64;
            let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Tensor::from_raw(1, 1, vec![s / n])
        }
        Op::ReduceSum(a) => Tensor::from_raw(1, 1, vec![v(a).sum()]),
    })
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

fn backward_op<'t>(
    op: &Op,
    g: &Tensor,
    out: &Tensor,
    v: &impl Fn(NodeId) -> &'t Tensor,
    needs: &[bool],
    adj: &mut [Option<Tensor>],
) {
    let need = |id: NodeId| needs[id.0];
    match *op {
        Op::Leaf { .. } | Op::Const(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            if need(a) {
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                gemm(Operand::plain(g), Operand::transposed(tb), &mut ga, false);
                accumulate(adj, a, ga);
            }
            if need(b) {
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                gemm(Operand::transposed(ta), Operand::plain(g), &mut gb, false);
                accumulate(adj, b, gb);
            }
        }
        Op::Add(a, b) => {
            if need(a) {
                accumulate(adj, a, g.clone());
            }
            if need(b) {
                accumulate(adj, b, g.clone());
            }
        }
        Op::Hadamard(a, b) => {
            if need(a) {
                accumulate(adj, a, zip_map(g, v(b), |x, y| x * y));
            }
            if need(b) {
                accumulate(adj, b, zip_map(g, v(a), |x, y| x * y));
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = v(a).cols();
            let cb = v(b).cols();
            if need(a) {
                let ga = Tensor::from_raw(g.rows(), ca, (0..g.rows()).flat_map(|i| g.row(i)[..ca].to_vec()).collect());
                accumulate(adj, a, ga);
            }
            if need(b) {
                let gb = Tensor::from_raw(g.rows(), cb, (0..g.rows()).flat_map(|i| g.row(i)[ca..].to_vec()).collect());
                accumulate(adj, b, gb);
            }
        }
        Op::Relu(a) => {
            if need(a) {
                accumulate(adj, a, zip_map(g, v(a), |d, x| if x > 0.0 { d } else { 0.0 }));
            }
        }
        Op::Sigmoid(a) => {
            if need(a) {
                accumulate(adj, a, zip_map(g, out, |d, y| d * y * (1.0 - y)));
            }
        }
        Op::RowNormalize(a) => {
            if need(a) {
                let x = v(a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let s: f64 = x.row(i).iter().sum();
                    let dot: f64 = g.row(i).iter().zip(out.row(i)).map(|(d, y)| d * y).sum();
                    for j in 0..x.cols() {
                        ga.set(i, j, (g.get(i, j) - dot) / s);
                    }
                }
                accumulate(adj, a, ga);
            }
        }
        Op::Transpose(a) => {
            if need(a) {
                accumulate(adj, a, g.transpose());
            }
        }
        Op::Scale(a, f) => {
            if need(a) {
                accumulate(adj, a, map(g, |d| d * f));
            }
        }
        Op::SoftmaxCrossEntropy { logits, target } => {
            let (z, t) = (v(logits), v(target));
            let d = g.item() / z.rows() as f64;
            let lse = log_sum_exp_rows(z);
            if need(logits) {
                let mut gz = Tensor::zeros(z.rows(), z.cols());
                for i in 0..z.rows() {
                    let mass: f64 = t.row(i).iter().sum();
                    for j in 0..z.cols() {
                        let p = (z.get(i, j) - lse[i]).exp();
                        gz.set(i, j, d * (p * mass - t.get(i, j)));
                    }
                }
                accumulate(adj, logits, gz);
            }
            if need(target) {
                let mut gt = Tensor::zeros(t.rows(), t.cols());
                for i in 0..z.rows() {
                    for j in 0..z.cols() {
                        gt.set(i, j, -d * (z.get(i, j) - lse[i]));
                    }
                }
                accumulate(adj, target, gt);
            }
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let k = 2.0 * g.item() / ta.data().len() as f64;
            let diff = zip_map(ta, tb, |x, y| k * (x - y));
            if need(b) {
                accumulate(adj, b, map(&diff, |x| -x));
            }
            if need(a) {
                accumulate(adj, a, diff);
            }
        }
        Op::ReduceSum(a) => {
            if need(a) {
                let (r, c) = v(a).shape();
                accumulate(adj, a, Tensor::filled(r, c, g.item()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0)).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut e = Expression::new();
        let z = e.constant(Tensor::zeros(1, 1));
        let s = e.sigmoid(z).unwrap();
        assert_eq!(e.evaluate(s, &Bindings::new()).unwrap().item(), 0.5);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let m = t(&[&[1.5, -2.0], &[0.25, 7.0]]);
        let mut e = Expression::new();
        let i = e.constant(Tensor::identity(2));
        let x = e.input("m", 2, 2).unwrap();
        let p = e.matmul(i, x).unwrap();
        assert_eq!(e.evaluate(p, &Bindings::new().with("m", &m)).unwrap(), m);
    }

    #[test]
    fn relu_of_affine_matches_hand_arithmetic() {
        // A*B = [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]] = [[19, 22], [43, 50]]
        // + C = [[-20, 1], [0, -60]] -> [[-1, 23], [43, -10]] -> relu
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = t(&[&[-20.0, 1.0], &[0.0, -60.0]]);
        let mut e = Expression::new();
        let (na, nb, nc) = (
            e.input("a", 2, 2).unwrap(),
            e.input("b", 2, 2).unwrap(),
            e.input("c", 2, 2).unwrap(),
        );
        let ab = e.matmul(na, nb).unwrap();
        let s = e.add(ab, nc).unwrap();
        let r = e.relu(s).unwrap();
        let b = Bindings::new().with("a", &a).with("b", &b).with("c", &c);
        assert_eq!(e.evaluate(r, &b).unwrap(), t(&[&[0.0, 23.0], &[43.0, 0.0]]));
    }

    #[test]
    fn construction_rejects_shape_mismatch() {
        let mut e = Expression::new();
        let a = e.input("a", 2, 3).unwrap();
        let b = e.input("b", 2, 3).unwrap();
        assert!(matches!(e.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
        let c = e.input("c", 3, 2).unwrap();
        assert!(e.add(a, c).is_err());
        assert!(e.hadamard(a, c).is_err());
        assert!(e.input("a", 1, 1).is_err());
    }

    #[test]
    fn evaluation_errors() {
        let mut e = Expression::new();
        let a = e.input("a", 1, 2).unwrap();
        let s = e.reduce_sum(a).unwrap();
        assert!(matches!(e.evaluate(s, &Bindings::new()), Err(Error::UnboundLeaf(n)) if n == "a"));
        let wrong = Tensor::zeros(2, 1);
        assert!(matches!(
            e.evaluate(s, &Bindings::new().with("a", &wrong)),
            Err(Error::Shape { .. })
        ));
        let x = Tensor::zeros(1, 2);
        assert!(matches!(
            e.gradients(a, &Bindings::new().with("a", &x), &["a"]),
            Err(Error::NonScalarRoot { rows: 1, cols: 2 })
        ));

        let mut e = Expression::new();
        let a = e.input("a", 1, 1).unwrap();
        let big = e.scale(a, 1e300).unwrap();
        let bigger = e.scale(big, 1e300).unwrap();
        let one = Tensor::ones(1, 1);
        assert!(matches!(
            e.evaluate(bigger, &Bindings::new().with("a", &one)),
            Err(Error::Numeric { op: "scalar-multiply" })
        ));
        let zero = Tensor::zeros(1, 1);
        let rn = e.row_normalize(a).unwrap();
        assert!(matches!(
            e.evaluate(rn, &Bindings::new().with("a", &zero)),
            Err(Error::Numeric { op: "row-normalize" })
        ));
    }

    #[test]
    fn reduce_sum_gradient_is_ones() {
        let x = t(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 9.0]]);
        let mut e = Expression::new();
        let nx = e.param("x", 2, 3).unwrap();
        let s = e.reduce_sum(nx).unwrap();
        let g = e.gradients(s, &Bindings::new().with("x", &x), &["x"]).unwrap();
        assert_eq!(g["x"], Tensor::ones(2, 3));
    }

    #[test]
    fn mse_gradient_vanishes_at_minimum() {
        let w = t(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let mut e = Expression::new();
        let nw = e.param("w", 2, 2).unwrap();
        let nt = e.constant(w.clone());
        let l = e.mse(nw, nt).unwrap();
        let g = e.gradients(l, &Bindings::new().with("w", &w), &["w"]).unwrap();
        assert_eq!(g["w"], Tensor::zeros(2, 2));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let x = Tensor::ones(2, 2);
        let mut e = Expression::new();
        let a = e.param("a", 2, 2).unwrap();
        let _b = e.param("b", 2, 2).unwrap();
        let s = e.reduce_sum(a).unwrap();
        let g = e
            .gradients(s, &Bindings::new().with("a", &x).with("b", &x), &["a", "b"])
            .unwrap();
        assert_eq!(g["b"], Tensor::zeros(2, 2));
        assert!(e.gradients(s, &Bindings::new().with("a", &x), &["nope"]).is_err());
    }

    #[test]
    fn half_squared_norm_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 3, 4);
        let mut e = Expression::new();
        let nx = e.param("x", 3, 4).unwrap();
        let sq = e.hadamard(nx, nx).unwrap();
        let s = e.reduce_sum(sq).unwrap();
        let half = e.scale(s, 0.5).unwrap();
        let b = Bindings::new().with("x", &x);
        let g = e.gradients(half, &b, &["x"]).unwrap();
        assert!(g["x"].max_abs_diff(&x) < 1e-15);
        assert!(e.finite_diff_check(half, &b, &["x"], 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn constant_expression_check_is_zero() {
        let x = Tensor::ones(2, 2);
        let mut e = Expression::new();
        let _p = e.param("x", 2, 2).unwrap();
        let c = e.constant(Tensor::filled(2, 2, 3.0));
        let s = e.reduce_sum(c).unwrap();
        assert_eq!(e.finite_diff_check(s, &Bindings::new().with("x", &x), &["x"], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn sigmoid_chain_check_is_step_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 2, 3);
        let w = random(&mut rng, 3, 2);
        let mut e = Expression::new();
        let nx = e.param("x", 2, 3).unwrap();
        let nw = e.param("w", 3, 2).unwrap();
        let h = e.matmul(nx, nw).unwrap();
        let s1 = e.sigmoid(h).unwrap();
        let s2 = e.sigmoid(s1).unwrap();
        let r = e.reduce_sum(s2).unwrap();
        let b = Bindings::new().with("x", &x).with("w", &w);
        let coarse = e.finite_diff_check(r, &b, &["x", "w"], 1e-5).unwrap();
        let fine = e.finite_diff_check(r, &b, &["x", "w"], 5e-6).unwrap();
        assert!(coarse < 1e-4, "{coarse}");
        assert!(fine < 1e-4, "{fine}");
    }

    #[test]
    fn evaluation_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 6, 5);
        let w = random(&mut rng, 5, 4);
        let build = || {
            let mut e = Expression::new();
            let nx = e.input("x", 6, 5).unwrap();
            let nw = e.param("w", 5, 4).unwrap();
            let h = e.matmul(nx, nw).unwrap();
            let s = e.sigmoid(h).unwrap();
            let r = e.row_normalize(s).unwrap();
            (e, r)
        };
        let (e1, r1) = build();
        let (e2, r2) = build();
        let b = Bindings::new().with("x", &x).with("w", &w);
        let v1 = e1.evaluate(r1, &b).unwrap();
        let v2 = e2.evaluate(r2, &b).unwrap();
        assert!(v1.data().iter().zip(v2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn softmax_cross_entropy_is_stable_for_large_logits() {
        let mut e = Expression::new();
        let z = e.constant(t(&[&[1000.0, -1000.0]]));
        let y = e.constant(t(&[&[0.0, 1.0]]));
        let ce = e.softmax_cross_entropy(z, y).unwrap();
        assert_eq!(e.evaluate(ce, &Bindings::new()).unwrap().item(), 2000.0);
        let s = e.sigmoid(z).unwrap();
        let v = e.evaluate(s, &Bindings::new()).unwrap();
        assert_eq!(v.data(), &[1.0, 0.0]);
    }

    /// One instance of each primitive, checked against finite differences.
    fn primitive_case(kind: usize, rng: &mut ChaCha8Rng) -> f64 {
        let a = random(rng, 3, 4);
        let b = random(rng, 3, 4);
        let m = random(rng, 4, 2);
        let pos = Tensor::from_fn(3, 4, |_, _| rng.gen_range(0.5..2.0)).unwrap();
        let mut e = Expression::new();
        let na = e.param("a", 3, 4).unwrap();
        let nb = e.param("b", 3, 4).unwrap();
        let nm = e.param("m", 4, 2).unwrap();
        let np = e.param("p", 3, 4).unwrap();
        let out = match kind {
            0 => e.matmul(na, nm).unwrap(),
            1 => e.add(na, nb).unwrap(),
            2 => e.hadamard(na, nb).unwrap(),
            3 => e.concat_cols(na, nb).unwrap(),
            4 => {
                // keep pre-activations away from the kink
                let shifted = Tensor::from_fn(3, 4, |i, j| {
                    let v = a.get(i, j);
                    if v.abs() < 0.1 { v + 0.3 } else { v }
                })
                .unwrap();
                let c = e.constant(shifted.clone());
                let h = e.hadamard(c, na).unwrap();
                let h = e.add(h, c).unwrap();
                e.relu(h).unwrap()
            }
            5 => e.sigmoid(na).unwrap(),
            6 => e.row_normalize(np).unwrap(),
            7 => e.transpose(na).unwrap(),
            8 => e.scale(na, -1.7).unwrap(),
            9 => {
                let t = e.sigmoid(nb).unwrap();
                return finish_scalar(&mut e, |e| e.softmax_cross_entropy(na, t).unwrap(), &a, &b, &m, &pos);
            }
            10 => {
                return finish_scalar(&mut e, |e| e.mse(na, nb).unwrap(), &a, &b, &m, &pos);
            }
            _ => e.reduce_sum(na).unwrap(),
        };
        // weight the output so every entry contributes a distinct sensitivity
        let (r, c) = e.shape(out);
        let w = e.constant(Tensor::from_fn(r, c, |i, j| 0.3 + 0.1 * (i * c + j) as f64).unwrap());
        let weighted = e.hadamard(out, w).unwrap();
        finish_scalar(&mut e, |e| e.reduce_sum(weighted).unwrap(), &a, &b, &m, &pos)
    }

    fn finish_scalar(
        e: &mut Expression,
        f: impl FnOnce(&mut Expression) -> NodeId,
        a: &Tensor,
        b: &Tensor,
        m: &Tensor,
        p: &Tensor,
    ) -> f64 {
        let root = f(e);
        let bind = Bindings::new().with("a", a).with("b", b).with("m", m).with("p", p);
        e.finite_diff_check(root, &bind, &["a", "b", "m", "p"], 1e-5).unwrap()
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for kind in 0..12 {
            for _ in 0..5 {
                let err = primitive_case(kind, &mut rng);
                assert!(err < 1e-4, "primitive {kind}: relative error {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn linear_expressions_are_linear(
            seed in 0u64..1000,
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            depth in 1usize..6,
        ) {
            // random chain of linear ops applied to an input leaf
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut e = Expression::new();
            let x = e.input("x", 3, 3).unwrap();
            let mut node = x;
            for _ in 0..depth {
                node = match rng.gen_range(0..4) {
                    0 => { let c = e.constant(random(&mut rng, 3, 3)); e.matmul(c, node).unwrap() }
                    1 => e.transpose(node).unwrap(),
                    2 => e.scale(node, rng.gen_range(-2.0..2.0)).unwrap(),
                    _ => { let t = e.transpose(node).unwrap(); e.add(node, t).unwrap() }
                };
            }
            let xa = random(&mut rng, 3, 3);
            let xb = random(&mut rng, 3, 3);
            let combo = Tensor::from_fn(3, 3, |i, j| alpha * xa.get(i, j) + beta * xb.get(i, j)).unwrap();
            let fa = e.evaluate(node, &Bindings::new().with("x", &xa)).unwrap();
            let fb = e.evaluate(node, &Bindings::new().with("x", &xb)).unwrap();
            let fc = e.evaluate(node, &Bindings::new().with("x", &combo)).unwrap();
            for k in 0..9 {
                let expect = alpha * fa.data()[k] + beta * fb.data()[k];
                prop_assert!((fc.data()[k] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }
    }
}
