use super::matrix::RealMatrix;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    RowwiseAffine(Var, Var, Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    RowMean(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    SoftShrink(Var, RealMatrix),
    SliceCols(Var, usize),
    Reshape(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::RowwiseAffine(x, g, b) => vec![x, g, b],
            Op::LogSoftmax(x)
            | Op::Relu(x)
            | Op::RowMean(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Powf(x, _)
            | Op::ClampMin(x, _)
            | Op::SliceCols(x, _)
            | Op::Reshape(x) => vec![x],
            Op::SoftShrink(x, _) => vec![x],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::RowwiseAffine(..) => "rowwise_affine",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::RowMean(_) => "row_mean",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Powf(..) => "powf",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftShrink(..) => "soft_shrink",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct NodeData {
    value: RealMatrix,
    op: Op,
    requires_grad: bool,
}

/// A computation record. Nodes are appended in evaluation order, so the
/// node list is already a topological order of the DAG.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<NodeData>,
    grads: Vec<RealMatrix>,
}

fn check_same(op: &'static str, a: &RealMatrix, b: &RealMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
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

    fn push(&mut self, value: RealMatrix, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let (r, c) = value.shape();
        self.nodes.push(NodeData {
            value,
            op,
            requires_grad,
        });
        self.grads.push(RealMatrix::zeros(r, c));
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: RealMatrix, requires_grad: bool) -> Var {
        assert!(value.is_finite(), "leaf values must be finite");
        let (r, c) = value.shape();
        self.nodes.push(NodeData {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(RealMatrix::zeros(r, c));
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: RealMatrix) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant by `backward`.
    pub fn constant(&mut self, value: RealMatrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &RealMatrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &RealMatrix {
        &self.grads[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `out[i, j] = gamma[j] * x[i, j] + beta[j]`.
    pub fn rowwise_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        for side in [gv, bv] {
            if side.rows() != 1 || side.cols() != xv.cols() {
                return Err(Error::Dimension {
                    op: "rowwise_affine",
                    left: xv.shape(),
                    right: side.shape(),
                });
            }
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = gv.data()[j] * *v + bv.data()[j];
            }
        }
        self.push(out, Op::RowwiseAffine(x, gamma, beta))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() < 2 {
            return Err(Error::Dimension {
                op: "log_softmax",
                left: xv.shape(),
                right: (xv.rows(), 2),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Mean over rows: n×d → 1×d.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Input("row_mean of an empty matrix".into()));
        }
        let out = xv.col_means();
        self.push(out, Op::RowMean(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of a nonpositive entry".into()));
        }
        let out = xv.map(f64::ln);
        self.push(out, Op::Log(x))
    }

    /// Sum of all entries → 1×1.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = RealMatrix::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x))
    }

    /// `x^p` for strictly positive `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("powf of a nonpositive entry".into()));
        }
        let out = xv.map(|v| v.powf(p));
        self.push(out, Op::Powf(x, p))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(x, floor))
    }

    /// `sign(x) * max(|x| - lambda, 0)` with a per-entry threshold.
    pub fn soft_shrink(&mut self, x: Var, lambda: RealMatrix) -> Result<Var> {
        check_same("soft_shrink", self.value(x), &lambda)?;
        if lambda.data().iter().any(|&l| l.is_nan() || l < 0.0) {
            return Err(Error::Domain("soft_shrink threshold must be >= 0".into()));
        }
        let out = self
            .value(x)
            .zip_map(&lambda, |v, l| v.signum() * (v.abs() - l).max(0.0));
        self.push(out, Op::SoftShrink(x, lambda))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: xv.shape(),
                right: (xv.rows(), start + len),
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = RealMatrix::from_vec(xv.rows(), len, data)?;
        self.push(out, Op::SliceCols(x, start))
    }

    /// Reinterpret the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != rows * cols {
            return Err(Error::Dimension {
                op: "reshape",
                left: xv.shape(),
                right: (rows, cols),
            });
        }
        let out = RealMatrix::from_vec(rows, cols, xv.data().to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    /// Reverse-mode sweep from a 1×1 output. Leaf gradients accumulate
    /// across calls; call [`Graph::zero_grad`] to reset them.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                left: self.shape(output),
                right: (1, 1),
            });
        }
        let n = output.0 + 1;
        let mut reachable = vec![false; n];
        reachable[output.0] = true;
        for i in (0..n).rev() {
            if reachable[i] && self.nodes[i].requires_grad {
                for p in self.nodes[i].op.parents() {
                    reachable[p.0] = true;
                }
            }
        }
        // Only leaves accumulate across calls; interior slots restart at zero.
        for i in 0..n {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i].fill(0.0);
            }
        }
        self.grads[output.0].data_mut()[0] += 1.0;
        for i in (0..n).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.propagate(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contrib: &RealMatrix) {
        if self.nodes[target.0].requires_grad {
            self.grads[target.0].add_assign(contrib);
        }
    }

    fn propagate(&mut self, i: usize, g: &RealMatrix) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let ga = g.matmul(&self.value(b).transpose()).expect("shapes checked");
                    self.accumulate(a, &ga);
                }
                if self.requires_grad(b) {
                    let gb = self.value(a).transpose().matmul(g).expect("shapes checked");
                    self.accumulate(b, &gb);
                }
            }
            Op::RowwiseAffine(x, gamma, beta) => {
                let xv = self.value(x);
                let gv = self.value(gamma);
                let cols = xv.cols();
                let mut gx = g.clone();
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    let xrow = xv.row(r);
                    for j in 0..cols {
                        ggamma[j] += grow[j] * xrow[j];
                        gbeta[j] += grow[j];
                    }
                    for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                        *v *= gv.data()[j];
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(gamma, &RealMatrix::row_vector(ggamma));
                self.accumulate(beta, &RealMatrix::row_vector(gbeta));
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    let yrow = y.row(r);
                    for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                        *v -= yrow[j].exp() * gsum;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg = g.map(|v| -v);
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(b), |gv, bv| gv * bv);
                let gb = g.zip_map(self.value(a), |gv, av| gv * av);
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(x, &gx);
            }
            Op::RowMean(x) => {
                let (rows, cols) = self.shape(x);
                let inv = 1.0 / rows as f64;
                let mut gx = RealMatrix::zeros(rows, cols);
                for r in 0..rows {
                    for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                        *v = g.data()[j] * inv;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Scale(x, s) => {
                let gx = g.map(|v| v * s);
                self.accumulate(x, &gx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let (r, c) = self.shape(x);
                let gx = RealMatrix::from_vec(r, c, g.data().to_vec()).expect("same length");
                self.accumulate(x, &gx);
            }
            Op::Exp(x) => {
                let gx = g.zip_map(&self.nodes[i].value, |gv, yv| gv * yv);
                self.accumulate(x, &gx);
            }
            Op::Log(x) => {
                let gx = g.zip_map(self.value(x), |gv, xv| gv / xv);
                self.accumulate(x, &gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(x);
                let gx = RealMatrix::filled(r, c, g.item());
                self.accumulate(x, &gx);
            }
            Op::Powf(x, p) => {
                let gx = g.zip_map(self.value(x), |gv, xv| gv * p * xv.powf(p - 1.0));
                self.accumulate(x, &gx);
            }
            Op::ClampMin(x, floor) => {
                let gx = g.zip_map(self.value(x), |gv, xv| if xv > floor { gv } else { 0.0 });
                self.accumulate(x, &gx);
            }
            Op::SoftShrink(x, ref lambda) => {
                let xv = self.value(x);
                let mut gx = g.clone();
                for ((gv, &xv), &l) in gx.data_mut().iter_mut().zip(xv.data()).zip(lambda.data()) {
                    if xv.abs() <= l {
                        *gv = 0.0;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.shape(x);
                let len = g.cols();
                let mut gx = RealMatrix::zeros(rows, cols);
                for r in 0..rows {
                    gx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(x, &gx);
            }
        }
    }
}
