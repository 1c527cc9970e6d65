use super::kernels::{matmul, matmul_a_bt, matmul_at_b};
use super::{GradError, Tensor};
use crate::par::Exec;

/// Row norms at or below this are treated as this value, so zero rows stay zero.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded primitive. Inputs always refer to earlier nodes.
#[derive(Debug, Clone)]
pub enum Op {
    Constant,
    Parameter,
    /// `x[m×k] · w[k×n]`
    MatMul(NodeId, NodeId),
    /// `x[m×n] + b[n]` broadcast over rows.
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    RowL2Norm(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Scale(NodeId, f64),
    DivScalar(NodeId, f64),
    /// `a[m×d] · b[n×d]ᵀ`
    InnerProduct(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::RowL2Norm(_) => "row_l2norm",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RowLogSoftmax(_) => "row_log_softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Scale(..) => "scale",
            Op::DivScalar(..) => "div_scalar",
            Op::InnerProduct(..) => "inner_product",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::InnerProduct(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::RowL2Norm(a)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::DivScalar(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Eager tape: every primitive is evaluated as it is recorded.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn mismatch(op: &'static str, detail: String) -> GradError {
    GradError::ShapeMismatch { op, detail }
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize), GradError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(), GradError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn row_log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn compute(nodes: &[Node], op: &Op) -> Result<Tensor, GradError> {
    let val = |id: &NodeId| -> Result<&Tensor, GradError> {
        nodes.get(id.0).map(|n| &n.value).ok_or(GradError::UnknownNode(id.0))
    };
    let name = op.name();
    let out = match op {
        Op::Constant | Op::Parameter => unreachable!("leaves are not recomputed"),
        Op::MatMul(x, w) => {
            let (x, w) = (val(x)?, val(w)?);
            let (m, k) = rank2(x, name)?;
            let (k2, n) = rank2(w, name)?;
            if k != k2 {
                return Err(mismatch(name, format!("{:?} · {:?}", x.shape(), w.shape())));
            }
            let exec = Exec::for_work(m * k * n);
            Tensor::matrix(m, n, matmul(x.data(), w.data(), m, k, n, exec))?
        }
        Op::AddBias(x, b) => {
            let (x, b) = (val(x)?, val(b)?);
            let (_, n) = rank2(x, name)?;
            if b.shape() != [n] {
                return Err(mismatch(name, format!("bias {:?} for {:?}", b.shape(), x.shape())));
            }
            let mut out = x.clone();
            out.grad = None;
            for row in out.data_mut().chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::Relu(x) => map(val(x)?, |v| v.max(0.0)),
        Op::RowL2Norm(x) => {
            let x = val(x)?;
            let (_, cols) = x.rows_cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols.max(1)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::RowSoftmax(x) => {
            let x = val(x)?;
            let (_, cols) = x.rows_cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols.max(1)) {
                let lse = row_log_sum_exp(row);
                row.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::RowLogSoftmax(x) => {
            let x = val(x)?;
            let (_, cols) = x.rows_cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols.max(1)) {
                let lse = row_log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Log(x) => map(val(x)?, f64::ln),
        Op::Exp(x) => map(val(x)?, f64::exp),
        Op::Scale(x, c) => map(val(x)?, |v| v * c),
        Op::DivScalar(x, c) => map(val(x)?, |v| v / c),
        Op::InnerProduct(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            let (m, d) = rank2(a, name)?;
            let (n, d2) = rank2(b, name)?;
            if d != d2 {
                return Err(mismatch(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let exec = Exec::for_work(m * n * d);
            Tensor::matrix(m, n, matmul_a_bt(a.data(), b.data(), m, d, n, exec))?
        }
        Op::GatherRows(x, idx) => {
            let x = val(x)?;
            let rows = *x.shape().first().ok_or_else(|| mismatch(name, "scalar input".into()))?;
            let width = x.len().checked_div(rows).unwrap_or(0);
            let mut data = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                if i >= rows {
                    return Err(GradError::IndexOutOfRange { index: i, len: rows });
                }
                data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, data)?
        }
        Op::Reshape(x, shape) => val(x)?.reshaped(shape.clone())?,
        Op::Sum(x) => Tensor::scalar(val(x)?.data().iter().sum()),
        Op::Mean(x) => {
            let x = val(x)?;
            if x.is_empty() {
                return Err(mismatch(name, "mean of an empty tensor".into()));
            }
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::RowSum(x) => {
            let x = val(x)?;
            let (rows, cols) = x.rows_cols();
            let data = (0..rows).map(|i| x.data()[i * cols..(i + 1) * cols].iter().sum()).collect();
            Tensor::vector(data)
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            same_shape(a, b, name)?;
            match op {
                Op::Add(..) => zip_map(a, b, |x, y| x + y),
                Op::Sub(..) => zip_map(a, b, |x, y| x - y),
                _ => zip_map(a, b, |x, y| x * y),
            }
        }
    };
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(GradError::NonFinite { op: name });
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).unwrap()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn leaf(&mut self, mut value: Tensor, op: Op) -> Result<NodeId, GradError> {
        value.grad = None;
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(GradError::NonFinite { op: op.name() });
        }
        let requires_grad = matches!(op, Op::Parameter);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, GradError> {
        self.leaf(value, Op::Constant)
    }

    /// Leaf that gradients flow back to.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, GradError> {
        self.leaf(value, Op::Parameter)
    }

    fn push(&mut self, op: Op) -> Result<NodeId, GradError> {
        let value = compute(&self.nodes, &op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::MatMul(x, w))
    }
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::AddBias(x, b))
    }
    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Relu(x))
    }
    pub fn row_l2norm(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::RowL2Norm(x))
    }
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::RowSoftmax(x))
    }
    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::RowLogSoftmax(x))
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Log(x))
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Exp(x))
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GradError> {
        self.push(Op::Scale(x, c))
    }
    pub fn div_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, GradError> {
        self.push(Op::DivScalar(x, c))
    }
    pub fn inner_product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::InnerProduct(a, b))
    }
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId, GradError> {
        self.push(Op::GatherRows(x, idx))
    }
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, GradError> {
        self.push(Op::Reshape(x, shape))
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Sum(x))
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Mean(x))
    }
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::RowSum(x))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.push(Op::Mul(a, b))
    }

    /// Recomputes every non-leaf node from the record into a fresh graph.
    pub fn replay(&self) -> Result<Graph, GradError> {
        let mut out = Graph { nodes: Vec::with_capacity(self.nodes.len()) };
        for node in &self.nodes {
            let value = match node.op {
                Op::Constant | Op::Parameter => node.value.clone(),
                _ => compute(&out.nodes, &node.op)?,
            };
            out.nodes.push(Node { op: node.op.clone(), value, requires_grad: node.requires_grad });
        }
        Ok(out)
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Result<Gradients, GradError> {
        let out_node = self.nodes.get(output.0).ok_or(GradError::NotRecorded(output.0))?;
        if seed.shape() != out_node.value.shape() {
            return Err(GradError::SeedShape {
                expected: out_node.value.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(seed.shape().to_vec(), seed.data().to_vec())?);
        let mut visited = 0;
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Parameter) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (idx, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if matches!(node.op, Op::Parameter) && grads[idx].is_some() {
                visited += 1;
            }
        }
        Ok(Gradients { grads, visited })
    }

    /// Scalar-output convenience: seed with 1.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients, GradError> {
        let shape = self
            .nodes
            .get(output.0)
            .ok_or(GradError::NotRecorded(output.0))?
            .value
            .shape()
            .to_vec();
        self.backward(output, Tensor::filled(&shape, 1.0))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), GradError> {
        let gd = g.data();
        let y = &node.value;
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::MatMul(x, w) => {
                let (m, k) = rank2(v(x), "matmul")?;
                let n = v(w).shape()[1];
                if needs(x) {
                    let exec = Exec::for_work(m * k * n);
                    let dx = matmul_a_bt(gd, v(w).data(), m, n, k, exec);
                    accumulate(&mut grads[x.0], v(x).shape(), &dx);
                }
                if needs(w) {
                    let exec = Exec::for_work(m * k * n);
                    let dw = matmul_at_b(v(x).data(), gd, m, k, n, exec);
                    accumulate(&mut grads[w.0], v(w).shape(), &dw);
                }
            }
            Op::AddBias(x, b) => {
                if needs(x) {
                    accumulate(&mut grads[x.0], v(x).shape(), gd);
                }
                if needs(b) {
                    let n = v(b).len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    accumulate(&mut grads[b.0], v(b).shape(), &db);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = v(x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::RowL2Norm(x) => {
                let xt = v(x);
                let (_, cols) = xt.rows_cols();
                let mut dx = vec![0.0; xt.len()];
                let cols = cols.max(1);
                for ((xr, yr), (gr, dr)) in xt
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(gd.chunks(cols).zip(dx.chunks_mut(cols)))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > L2_EPS {
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * proj) / norm;
                        }
                    } else {
                        for (d, &gv) in dr.iter_mut().zip(gr) {
                            *d = gv / L2_EPS;
                        }
                    }
                }
                accumulate(&mut grads[x.0], xt.shape(), &dx);
            }
            Op::RowSoftmax(x) => {
                let (_, cols) = y.rows_cols();
                let cols = cols.max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dotp);
                    }
                }
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::RowLogSoftmax(x) => {
                let (_, cols) = y.rows_cols();
                let cols = cols.max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> = v(x).data().iter().zip(gd).map(|(&xv, &gv)| gv / xv).collect();
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::Exp(x) => {
                let dx: Vec<f64> = y.data().iter().zip(gd).map(|(&yv, &gv)| gv * yv).collect();
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = gd.iter().map(|&gv| gv * c).collect();
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::DivScalar(x, c) => {
                let dx: Vec<f64> = gd.iter().map(|&gv| gv / c).collect();
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::InnerProduct(a, b) => {
                let (m, d) = rank2(v(a), "inner_product")?;
                let n = v(b).shape()[0];
                let exec = Exec::for_work(m * n * d);
                if needs(a) {
                    let da = matmul(gd, v(b).data(), m, n, d, exec);
                    accumulate(&mut grads[a.0], v(a).shape(), &da);
                }
                if needs(b) {
                    let db = matmul_at_b(gd, v(a).data(), m, n, d, exec);
                    accumulate(&mut grads[b.0], v(b).shape(), &db);
                }
            }
            Op::GatherRows(x, idx) => {
                let xt = v(x);
                let rows = xt.shape()[0];
                let width = xt.len().checked_div(rows).unwrap_or(0);
                let mut dx = vec![0.0; xt.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..width {
                        dx[i * width + c] += gd[r * width + c];
                    }
                }
                accumulate(&mut grads[x.0], xt.shape(), &dx);
            }
            Op::Reshape(x, _) => accumulate(&mut grads[x.0], v(x).shape(), gd),
            Op::Sum(x) => {
                let dx = vec![gd[0]; v(x).len()];
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::Mean(x) => {
                let n = v(x).len() as f64;
                let dx = vec![gd[0] / n; v(x).len()];
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::RowSum(x) => {
                let (rows, cols) = v(x).rows_cols();
                let mut dx = vec![0.0; rows * cols];
                for (r, &gv) in gd.iter().enumerate() {
                    dx[r * cols..(r + 1) * cols].fill(gv);
                }
                accumulate(&mut grads[x.0], v(x).shape(), &dx);
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], v(a).shape(), gd);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], v(b).shape(), gd);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], v(a).shape(), gd);
                }
                if needs(b) {
                    let db: Vec<f64> = gd.iter().map(|g| -g).collect();
                    accumulate(&mut grads[b.0], v(b).shape(), &db);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let da: Vec<f64> = gd.iter().zip(v(b).data()).map(|(g, bv)| g * bv).collect();
                    accumulate(&mut grads[a.0], v(a).shape(), &da);
                }
                if needs(b) {
                    let db: Vec<f64> = gd.iter().zip(v(a).data()).map(|(g, av)| g * av).collect();
                    accumulate(&mut grads[b.0], v(b).shape(), &db);
                }
            }
        }
        Ok(())
    }
}
