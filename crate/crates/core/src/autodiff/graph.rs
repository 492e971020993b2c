//! The operation tape and backward pass.

use super::tensor::Tensor;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// [m x n] + [1 x n] broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [m x n] * [m x 1] broadcast over columns (feature masking).
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    L1Norm(NodeId),
    RowSum(NodeId),
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize),
    StopGrad(NodeId),
    /// Hard {0,1} forward sample; backward through the relaxed
    /// two-class Gumbel-Softmax probability (straight-through).
    GumbelBernoulli { logit: NodeId, relaxed: Tensor, temperature: f64 },
    CategoricalNll { logits: NodeId, targets: Vec<usize>, softmax: Tensor },
    GaussianNll { mean: NodeId, log_std: NodeId, target: Tensor },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape. Build the forward pass, call
/// [`Graph::backward`] once on a scalar root, then read gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros if the backward pass never reached it.
    pub fn grad_or_zero(&self, id: NodeId) -> Tensor {
        let (r, c) = self.nodes[id.0].value.shape();
        self.nodes[id.0]
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(r, c))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape_eq(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.shape_eq(a, b, "add")?;
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::from_vec(ta.rows(), ta.cols(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Add a 1xn bias row to every row of an mxn tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {}x{} + {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let mut v = ta.clone();
        let bias_row = tb.data().to_vec();
        for i in 0..v.rows() {
            let cols = v.cols();
            let row = &mut v.data_mut()[i * cols..(i + 1) * cols];
            for (x, b) in row.iter_mut().zip(&bias_row) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddRow(a, bias), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.shape_eq(a, b, "sub")?;
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
            Tensor::from_vec(ta.rows(), ta.cols(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.shape_eq(a, b, "mul")?;
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::from_vec(ta.rows(), ta.cols(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Multiply every column of an mxn tensor by an mx1 column
    /// (per-sample feature masking).
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(Error::Dimension(format!(
                "mul_col: {}x{} * {}x{}",
                ta.rows(),
                ta.cols(),
                tc.rows(),
                tc.cols()
            )));
        }
        let mut v = ta.clone();
        let scale: Vec<f64> = tc.data().to_vec();
        for i in 0..v.rows() {
            let cols = v.cols();
            let row = &mut v.data_mut()[i * cols..(i + 1) * cols];
            for x in row.iter_mut() {
                *x *= scale[i];
            }
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(v, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul(a, b), ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Clamp values to [lo, hi]; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Sum of all entries, 1x1.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean of all entries, 1x1.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Sum of absolute values, 1x1.
    pub fn l1_norm(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x.abs()).sum());
        let ng = self.needs(a);
        self.push(v, Op::L1Norm(a), ng)
    }

    /// Per-row sum: mxn -> mx1.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
        let v = Tensor::from_vec(t.rows(), 1, data).expect("row_sum shape");
        let ng = self.needs(a);
        self.push(v, Op::RowSum(a), ng)
    }

    /// Concatenate along columns; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_cols: empty part list".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: row mismatch {} vs {}",
                    self.value(p).rows(),
                    rows
                )));
            }
            cols += self.value(p).cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                let src = t.row_slice(i);
                data[i * cols + offset..i * cols + offset + t.cols()].copy_from_slice(src);
            }
            offset += t.cols();
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns [start, end) of an mxn tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(Error::Index(format!(
                "slice_cols: [{start}, {end}) out of 0..{}",
                t.cols()
            )));
        }
        let w = end - start;
        let mut data = vec![0.0; t.rows() * w];
        for i in 0..t.rows() {
            data[i * w..(i + 1) * w].copy_from_slice(&t.row_slice(i)[start..end]);
        }
        let v = Tensor::from_vec(t.rows(), w, data)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    /// Identity forward; blocks all gradient flow upstream.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad(a), false)
    }

    /// Hard Bernoulli sample per entry with straight-through gradients.
    ///
    /// Forward draws are exactly Bernoulli(sigmoid(logit)) and the output is
    /// exactly 0.0 or 1.0; the backward pass uses the relaxed two-class
    /// Gumbel-Softmax probability at the given temperature.
    pub fn gumbel_bernoulli(
        &mut self,
        logit: NodeId,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "gumbel_bernoulli: temperature must be positive, got {temperature}"
            )));
        }
        let t = self.value(logit);
        let mut hard = vec![0.0; t.len()];
        let mut relaxed = vec![0.0; t.len()];
        for (i, &l) in t.data().iter().enumerate() {
            // Difference of two Gumbels is Logistic(0,1).
            let noise = rng.gumbel() - rng.gumbel();
            relaxed[i] = sigmoid((l + noise) / temperature);
            hard[i] = if l + noise > 0.0 { 1.0 } else { 0.0 };
        }
        let v = Tensor::from_vec(t.rows(), t.cols(), hard)?;
        let relaxed = Tensor::from_vec(t.rows(), t.cols(), relaxed)?;
        let ng = self.needs(logit);
        Ok(self.push(
            v,
            Op::GumbelBernoulli {
                logit,
                relaxed,
                temperature,
            },
            ng,
        ))
    }

    /// Per-row -log softmax(logits)[target]: mxC with m targets -> mx1.
    pub fn categorical_nll(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let (m, c) = t.shape();
        if c < 2 {
            return Err(Error::Parameter(format!(
                "categorical_nll: need at least 2 classes, got {c}"
            )));
        }
        if targets.len() != m {
            return Err(Error::Dimension(format!(
                "categorical_nll: {m} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!(
                "categorical_nll: target {bad} out of [0, {c})"
            )));
        }
        let mut nll = vec![0.0; m];
        let mut softmax = vec![0.0; m * c];
        for i in 0..m {
            let row = t.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row {
                denom += (x - max).exp();
            }
            let lse = max + denom.ln();
            nll[i] = lse - row[targets[i]];
            for j in 0..c {
                softmax[i * c + j] = (row[j] - lse).exp();
            }
        }
        let v = Tensor::from_vec(m, 1, nll)?;
        let softmax = Tensor::from_vec(m, c, softmax)?;
        let ng = self.needs(logits);
        Ok(self.push(
            v,
            Op::CategoricalNll {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
            ng,
        ))
    }

    /// Per-row diagonal Gaussian NLL summed over dimensions: mxd -> mx1.
    /// Callers clamp log_std beforehand if they need bounded variance.
    pub fn gaussian_nll(&mut self, mean: NodeId, log_std: NodeId, target: &Tensor) -> Result<NodeId> {
        self.shape_eq(mean, log_std, "gaussian_nll")?;
        let tm = self.value(mean);
        if tm.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "gaussian_nll: mean {}x{} vs target {}x{}",
                tm.rows(),
                tm.cols(),
                target.rows(),
                target.cols()
            )));
        }
        let ls = self.value(log_std);
        let (m, d) = tm.shape();
        const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7; // 0.5 * ln(2*pi)
        let mut nll = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..d {
                let mu = tm.get(i, j);
                let l = ls.get(i, j);
                let t = target.get(i, j);
                let z = (t - mu) * (-l).exp();
                acc += 0.5 * z * z + l + HALF_LN_TAU;
            }
            nll[i] = acc;
        }
        let v = Tensor::from_vec(m, 1, nll)?;
        let ng = self.needs(mean) || self.needs(log_std);
        Ok(self.push(
            v,
            Op::GaussianNll {
                mean,
                log_std,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// The relaxed probabilities recorded by a `gumbel_bernoulli` node
    /// (diagnostic accessor for gradient checking).
    pub fn gumbel_relaxed(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].op {
            Op::GumbelBernoulli { relaxed, .. } => Some(relaxed),
            _ => None,
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar root. Each node is visited exactly once in
    /// reverse creation order, which is a reverse topological order because
    /// operations can only reference earlier nodes.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.nodes[root.0].value.shape(),
            (1, 1),
            "backward root must be a scalar"
        );
        if !self.nodes[root.0].needs_grad {
            return;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(gout) = self.nodes[idx].grad.clone() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            // Op data is extracted by value where cheap, cloned where needed.
            match &self.nodes[idx].op {
                Op::Leaf | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &gout);
                    self.accumulate(b, &gout);
                }
                Op::AddRow(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    self.accumulate(a, &gout);
                    let cols = gout.cols();
                    let mut db = vec![0.0; cols];
                    for i in 0..gout.rows() {
                        for (j, acc) in db.iter_mut().enumerate() {
                            *acc += gout.get(i, j);
                        }
                    }
                    let db = Tensor::from_vec(1, cols, db).expect("bias grad shape");
                    self.accumulate(bias, &db);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &gout);
                    let neg = gout.map(|x| -x);
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = {
                        let tb = self.value(b);
                        let data = gout.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        Tensor::from_vec(gout.rows(), gout.cols(), data).unwrap()
                    };
                    let db = {
                        let ta = self.value(a);
                        let data = gout.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        Tensor::from_vec(gout.rows(), gout.cols(), data).unwrap()
                    };
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MulCol(a, col) => {
                    let (a, col) = (*a, *col);
                    let da = {
                        let tc = self.value(col);
                        let mut d = gout.clone();
                        for i in 0..d.rows() {
                            let s = tc.get(i, 0);
                            let cols = d.cols();
                            for x in &mut d.data_mut()[i * cols..(i + 1) * cols] {
                                *x *= s;
                            }
                        }
                        d
                    };
                    let dcol = {
                        let ta = self.value(a);
                        let mut d = vec![0.0; ta.rows()];
                        for (i, acc) in d.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for j in 0..ta.cols() {
                                s += gout.get(i, j) * ta.get(i, j);
                            }
                            *acc = s;
                        }
                        Tensor::from_vec(ta.rows(), 1, d).unwrap()
                    };
                    self.accumulate(a, &da);
                    self.accumulate(col, &dcol);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da = gout.map(|x| x * c);
                    self.accumulate(a, &da);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = gout.matmul_nt(self.value(b)).expect("matmul backward a");
                    let db = self.value(a).matmul_tn(&gout).expect("matmul backward b");
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da = {
                        let ta = self.value(a);
                        let data = gout
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect();
                        Tensor::from_vec(gout.rows(), gout.cols(), data).unwrap()
                    };
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let da = {
                        let y = &self.nodes[idx].value;
                        let data = gout
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect();
                        Tensor::from_vec(gout.rows(), gout.cols(), data).unwrap()
                    };
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let da = {
                        let y = &self.nodes[idx].value;
                        let data = gout
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect();
                        Tensor::from_vec(gout.rows(), gout.cols(), data).unwrap()
                    };
                    self.accumulate(a, &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let da = {
                        let ta = self.value(a);
                        let data = gout
                            .data()
                            .iter()
                            .zip(ta.data())
                            .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                            .collect();
                        Tensor::from_vec(gout.rows(), gout.cols(), data).unwrap()
                    };
                    self.accumulate(a, &da);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g = gout.scalar_value();
                    let (r, c) = self.value(a).shape();
                    let da = Tensor::full(r, c, g);
                    self.accumulate(a, &da);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let (r, c) = self.value(a).shape();
                    let g = gout.scalar_value() / (r * c) as f64;
                    let da = Tensor::full(r, c, g);
                    self.accumulate(a, &da);
                }
                Op::L1Norm(a) => {
                    let a = *a;
                    let g = gout.scalar_value();
                    let da = {
                        let ta = self.value(a);
                        ta.map(|x| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                    };
                    self.accumulate(a, &da);
                }
                Op::RowSum(a) => {
                    let a = *a;
                    let (r, c) = self.value(a).shape();
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..r {
                        let g = gout.get(i, 0);
                        for j in 0..c {
                            da.set(i, j, g);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.value(p).shape();
                        let mut dp = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                dp.set(i, j, gout.get(i, offset + j));
                            }
                        }
                        offset += c;
                        self.accumulate(p, &dp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (a, start) = (*a, *start);
                    let (r, c) = self.value(a).shape();
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..gout.rows() {
                        for j in 0..gout.cols() {
                            da.set(i, start + j, gout.get(i, j));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::GumbelBernoulli {
                    logit,
                    relaxed,
                    temperature,
                } => {
                    let logit = *logit;
                    let tau = *temperature;
                    let da = {
                        let data = gout
                            .data()
                            .iter()
                            .zip(relaxed.data())
                            .map(|(g, p)| g * p * (1.0 - p) / tau)
                            .collect();
                        Tensor::from_vec(gout.rows(), gout.cols(), data).unwrap()
                    };
                    self.accumulate(logit, &da);
                }
                Op::CategoricalNll {
                    logits,
                    targets,
                    softmax,
                } => {
                    let logits = *logits;
                    let (m, c) = softmax.shape();
                    let mut da = softmax.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let v = da.get(i, t);
                        da.set(i, t, v - 1.0);
                    }
                    for i in 0..m {
                        let g = gout.get(i, 0);
                        for j in 0..c {
                            let v = da.get(i, j);
                            da.set(i, j, v * g);
                        }
                    }
                    self.accumulate(logits, &da);
                }
                Op::GaussianNll {
                    mean,
                    log_std,
                    target,
                } => {
                    let (mean, log_std) = (*mean, *log_std);
                    let target = target.clone();
                    let (m, d) = target.shape();
                    let mut dmu = Tensor::zeros(m, d);
                    let mut dls = Tensor::zeros(m, d);
                    {
                        let tm = self.value(mean);
                        let tl = self.value(log_std);
                        for i in 0..m {
                            let g = gout.get(i, 0);
                            for j in 0..d {
                                let mu = tm.get(i, j);
                                let l = tl.get(i, j);
                                let t = target.get(i, j);
                                let inv_var = (-2.0 * l).exp();
                                let z2 = (t - mu) * (t - mu) * inv_var;
                                dmu.set(i, j, g * (mu - t) * inv_var);
                                dls.set(i, j, g * (1.0 - z2));
                            }
                        }
                    }
                    self.accumulate(mean, &dmu);
                    self.accumulate(log_std, &dls);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn stop_gradient_is_identity_forward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, -2.5, 0.0]));
        let sg = g.stop_gradient(x);
        assert_eq!(g.value(sg), g.value(x));
    }

    #[test]
    fn stop_gradient_cuts_one_product_branch() {
        // d/dx sum(sg(x) * x) = x, not 2x.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![3.0, -4.0]));
        let sg = g.stop_gradient(x);
        let p = g.mul(sg, x).unwrap();
        let loss = g.sum(p);
        g.backward(loss);
        assert_eq!(g.grad_or_zero(x).data(), &[3.0, -4.0]);
    }

    #[test]
    fn stop_gradient_fully_blocks() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![3.0, -4.0]));
        let sg = g.stop_gradient(x);
        let loss = g.sum(sg);
        g.backward(loss);
        assert_eq!(g.grad_or_zero(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gumbel_saturates_at_extreme_logits() {
        let mut rng = crate::rng::RngStream::from_seed(5);
        let mut g = Graph::new();
        let hi = g.leaf(Tensor::full(1, 200, 50.0));
        let lo = g.leaf(Tensor::full(1, 200, -50.0));
        let shi = g.gumbel_bernoulli(hi, 1.0, &mut rng).unwrap();
        let slo = g.gumbel_bernoulli(lo, 1.0, &mut rng).unwrap();
        assert!(g.value(shi).data().iter().all(|&x| x == 1.0));
        assert!(g.value(slo).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gumbel_outputs_are_exactly_binary_and_unbiased_at_zero() {
        let mut rng = crate::rng::RngStream::from_seed(17);
        let n = 100_000;
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(1, n));
        let s = g.gumbel_bernoulli(logits, 1.0, &mut rng).unwrap();
        let data = g.value(s).data();
        assert!(data.iter().all(|&x| x == 0.0 || x == 1.0));
        let mean = data.iter().sum::<f64>() / n as f64;
        assert!(close(mean, 0.5, 0.01), "mean {mean}");
    }

    #[test]
    fn gumbel_rejects_bad_temperature() {
        let mut rng = crate::rng::RngStream::from_seed(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        assert!(g.gumbel_bernoulli(x, 0.0, &mut rng).is_err());
        assert!(g.gumbel_bernoulli(x, -1.0, &mut rng).is_err());
    }

    #[test]
    fn categorical_nll_uniform_is_log_c() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(1, 5));
        let nll = g.categorical_nll(logits, &[2]).unwrap();
        assert!(close(g.value(nll).get(0, 0), 5.0_f64.ln(), 1e-12));
    }

    #[test]
    fn categorical_nll_certainty_limit() {
        let mut g = Graph::new();
        let mut t = Tensor::zeros(1, 3);
        t.set(0, 1, 1e4);
        let logits = g.leaf(t);
        let nll = g.categorical_nll(logits, &[1]).unwrap();
        assert!(g.value(nll).get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn categorical_nll_two_class_example() {
        // logits [1, 0], target 0 -> -log(e/(e+1)).
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::row(vec![1.0, 0.0]));
        let nll = g.categorical_nll(logits, &[0]).unwrap();
        let want = -(1.0_f64.exp() / (1.0_f64.exp() + 1.0)).ln();
        assert!(close(g.value(nll).get(0, 0), want, 1e-12));
        assert!(close(want, 0.31326, 1e-5));
    }

    #[test]
    fn categorical_nll_target_out_of_range() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(1, 3));
        assert!(matches!(
            g.categorical_nll(logits, &[3]),
            Err(crate::Error::Index(_))
        ));
    }

    #[test]
    fn gaussian_nll_zero_residual() {
        // mean = target, log_std = 0 -> 0.5*ln(2*pi) per dim.
        let mut g = Graph::new();
        let mean = g.leaf(Tensor::row(vec![0.3, -1.0]));
        let ls = g.leaf(Tensor::zeros(1, 2));
        let target = Tensor::row(vec![0.3, -1.0]);
        let nll = g.gaussian_nll(mean, ls, &target).unwrap();
        let want = 2.0 * 0.9189385332046727;
        assert!(close(g.value(nll).get(0, 0), want, 1e-12));
    }

    #[test]
    fn gaussian_nll_unit_residual() {
        // mean 0, sigma 1, target 1 -> 0.5 + 0.5*ln(2*pi).
        let mut g = Graph::new();
        let mean = g.leaf(Tensor::scalar(0.0));
        let ls = g.leaf(Tensor::scalar(0.0));
        let nll = g.gaussian_nll(mean, ls, &Tensor::scalar(1.0)).unwrap();
        assert!(close(g.value(nll).get(0, 0), 0.5 + 0.9189385332046727, 1e-12));
    }

    #[test]
    fn shared_subexpression_accumulates_additively() {
        // Scalar-graph oracle: f = x*x + x with x reused; df/dx = 2x + 1.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let f = g.add(sq, x).unwrap();
        let loss = g.sum(f);
        g.backward(loss);
        assert!(close(g.grad_or_zero(x).scalar_value(), 7.0, 1e-12));

        // Deeper sharing: y = x*x, f = y + y + x*y; df/dx = 2*2x + 3x^2.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let yy = g.add(y, y).unwrap();
        let xy = g.mul(x, y).unwrap();
        let f = g.add(yy, xy).unwrap();
        let loss = g.sum(f);
        g.backward(loss);
        assert!(close(g.grad_or_zero(x).scalar_value(), 4.0 * 2.0 + 3.0 * 4.0, 1e-12));
    }

    #[test]
    fn matmul_identity_and_hand_example_through_graph() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let prod = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(prod), g.value(x));

        let b = g.constant(Tensor::from_vec(2, 1, vec![1.0, 1.0]).unwrap());
        let prod2 = g.matmul(x, b).unwrap();
        assert_eq!(g.value(prod2).data(), &[3.0, 7.0]);
    }

    #[test]
    fn forward_values_stay_finite() {
        let mut rng = crate::rng::RngStream::from_seed(23);
        let mut g = Graph::new();
        let data = (0..60).map(|_| rng.uniform_in(-100.0, 100.0)).collect();
        let x = g.leaf(Tensor::from_vec(6, 10, data).unwrap());
        let t = g.tanh(x);
        let s = g.sigmoid(t);
        let r = g.relu(s);
        let c = g.clamp(r, -6.0, 2.0);
        let m = g.mean(c);
        assert!(g.value(m).all_finite());
    }
}
