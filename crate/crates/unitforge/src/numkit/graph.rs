//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Values are computed eagerly when a node is created. `backward` builds the
//! gradient computation out of ordinary graph nodes, so gradients are
//! themselves differentiable — this is what makes the discriminator gradient
//! penalty trainable without a special case.

use std::rc::Rc;

use super::{NumkitError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Conv1d {
        input: VarId,
        kernels: VarId,
        stride: usize,
    },
    ConvBackInput {
        grad_out: VarId,
        kernels: VarId,
        stride: usize,
    },
    ConvBackKernel {
        input: VarId,
        grad_out: VarId,
        stride: usize,
    },
    Relu(VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Softplus(VarId),
    Sqrt(VarId),
    Exp(VarId),
    Ln(VarId),
    Recip(VarId),
    Softmax { input: VarId, temp: f64 },
    LogSoftmax { input: VarId, temp: f64 },
    RowSum(VarId),
    ColSum(VarId),
    SumAll(VarId),
    BroadcastCol(VarId),
    BroadcastRow(VarId),
    BroadcastScalar(VarId),
    GatherSum {
        input: VarId,
        coords: Rc<Vec<(usize, usize)>>,
    },
    ScatterScalar {
        input: VarId,
        coords: Rc<Vec<(usize, usize)>>,
    },
    SliceRows {
        input: VarId,
        start: usize,
        len: usize,
    },
    PadRows {
        input: VarId,
        before: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) => vec![a.0, b.0],
            Scale(a, _) | AddScalar(a) | Transpose(a) | Relu(a) | Tanh(a) | Sigmoid(a)
            | Softplus(a) | Sqrt(a) | Exp(a) | Ln(a) | Recip(a) | RowSum(a) | ColSum(a)
            | SumAll(a) => vec![a.0],
            Conv1d { input, kernels, .. } => vec![input.0, kernels.0],
            ConvBackInput {
                grad_out, kernels, ..
            } => vec![grad_out.0, kernels.0],
            ConvBackKernel {
                input, grad_out, ..
            } => vec![input.0, grad_out.0],
            Softmax { input, .. } | LogSoftmax { input, .. } => vec![input.0],
            BroadcastCol(a) | BroadcastRow(a) | BroadcastScalar(a) => vec![a.0],
            GatherSum { input, .. }
            | ScatterScalar { input, .. }
            | SliceRows { input, .. }
            | PadRows { input, .. } => vec![input.0],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Matmul(..) => "matmul",
            Transpose(..) => "transpose",
            Conv1d { .. } => "conv1d",
            ConvBackInput { .. } => "conv1d_back_input",
            ConvBackKernel { .. } => "conv1d_back_kernel",
            Relu(..) => "relu",
            Tanh(..) => "tanh",
            Sigmoid(..) => "sigmoid",
            Softplus(..) => "softplus",
            Sqrt(..) => "sqrt",
            Exp(..) => "exp",
            Ln(..) => "ln",
            Recip(..) => "recip",
            Softmax { .. } => "softmax",
            LogSoftmax { .. } => "log_softmax",
            RowSum(..) => "row_sum",
            ColSum(..) => "col_sum",
            SumAll(..) => "sum_all",
            BroadcastCol { .. } => "broadcast_col",
            BroadcastRow { .. } => "broadcast_row",
            BroadcastScalar { .. } => "broadcast_scalar",
            GatherSum { .. } => "gather_sum",
            ScatterScalar { .. } => "scatter_scalar",
            SliceRows { .. } => "slice_rows",
            PadRows { .. } => "pad_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<VarId, NumkitError> {
        if !value.all_finite() {
            return Err(NumkitError::NonFinite(op.name()));
        }
        self.nodes.push(Node { op, value });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Insert a constant or parameter value into the graph.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        VarId(self.nodes.len() - 1)
    }

    fn check_same_shape(&self, a: VarId, b: VarId, what: &str) -> Result<(), NumkitError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumkitError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumkitError> {
        self.check_same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumkitError> {
        self.check_same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumkitError> {
        self.check_same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul(a, b), v)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).transpose()?;
        self.push(Op::Transpose(a), v)
    }

    /// 1-D convolution over time: input `T x D`, kernels `k x D x D'`,
    /// no padding, output `T' x D'` with `T' = (T - k) / stride + 1`.
    pub fn conv1d(&mut self, input: VarId, kernels: VarId, stride: usize) -> Result<VarId, NumkitError> {
        let v = conv1d_value(self.value(input), self.value(kernels), stride)?;
        self.push(
            Op::Conv1d {
                input,
                kernels,
                stride,
            },
            v,
        )
    }

    fn conv_back_input(
        &mut self,
        grad_out: VarId,
        kernels: VarId,
        stride: usize,
        t_in: usize,
    ) -> Result<VarId, NumkitError> {
        let v = conv_back_input_value(self.value(grad_out), self.value(kernels), stride, t_in)?;
        self.push(
            Op::ConvBackInput {
                grad_out,
                kernels,
                stride,
            },
            v,
        )
    }

    fn conv_back_kernel(
        &mut self,
        input: VarId,
        grad_out: VarId,
        stride: usize,
        width: usize,
    ) -> Result<VarId, NumkitError> {
        let v = conv_back_kernel_value(self.value(input), self.value(grad_out), stride, width)?;
        self.push(
            Op::ConvBackKernel {
                input,
                grad_out,
                stride,
            },
            v,
        )
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(stable_sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(stable_softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn recip(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    /// Row-wise temperature softmax, numerically stabilized by max subtraction.
    pub fn softmax(&mut self, input: VarId, temp: f64) -> Result<VarId, NumkitError> {
        let v = softmax_rows(self.value(input), temp)?;
        self.push(Op::Softmax { input, temp }, v)
    }

    pub fn log_softmax(&mut self, input: VarId, temp: f64) -> Result<VarId, NumkitError> {
        let v = log_softmax_rows(self.value(input), temp)?;
        self.push(Op::LogSoftmax { input, temp }, v)
    }

    pub fn row_sum(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let t = self.value(a);
        require_rank2(t, "row_sum")?;
        let r = t.rows();
        let mut data = vec![0.0; r];
        for i in 0..r {
            data[i] = t.row(i).iter().sum();
        }
        let v = Tensor::from_vec(vec![r, 1], data)?;
        self.push(Op::RowSum(a), v)
    }

    pub fn col_sum(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let t = self.value(a);
        require_rank2(t, "col_sum")?;
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (j, &x) in t.row(i).iter().enumerate() {
                data[j] += x;
            }
        }
        let v = Tensor::from_vec(vec![1, c], data)?;
        self.push(Op::ColSum(a), v)
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId, NumkitError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// `T x 1` column vector repeated to `T x cols`.
    pub fn broadcast_col(&mut self, a: VarId, cols: usize) -> Result<VarId, NumkitError> {
        let t = self.value(a);
        require_rank2(t, "broadcast_col")?;
        if t.cols() != 1 {
            return Err(NumkitError::ShapeMismatch(format!(
                "broadcast_col wants T x 1, got {:?}",
                t.shape()
            )));
        }
        let r = t.rows();
        let mut data = vec![0.0; r * cols];
        for i in 0..r {
            let x = t.at2(i, 0);
            for j in 0..cols {
                data[i * cols + j] = x;
            }
        }
        let v = Tensor::from_vec(vec![r, cols], data)?;
        self.push(Op::BroadcastCol(a), v)
    }

    /// `1 x C` row vector repeated to `rows x C`.
    pub fn broadcast_row(&mut self, a: VarId, rows: usize) -> Result<VarId, NumkitError> {
        let t = self.value(a);
        require_rank2(t, "broadcast_row")?;
        if t.rows() != 1 {
            return Err(NumkitError::ShapeMismatch(format!(
                "broadcast_row wants 1 x C, got {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(t.row(0));
        }
        let v = Tensor::from_vec(vec![rows, c], data)?;
        self.push(Op::BroadcastRow(a), v)
    }

    pub fn broadcast_scalar(&mut self, a: VarId, shape: &[usize]) -> Result<VarId, NumkitError> {
        let x = self.value(a).scalar_value()?;
        let v = Tensor::full(shape.to_vec(), x);
        self.push(Op::BroadcastScalar(a), v)
    }

    /// Sum of the entries of a 2-D tensor at the given coordinates.
    pub fn gather_sum(&mut self, a: VarId, coords: Rc<Vec<(usize, usize)>>) -> Result<VarId, NumkitError> {
        let t = self.value(a);
        require_rank2(t, "gather_sum")?;
        let mut acc = 0.0;
        for &(r, c) in coords.iter() {
            if r >= t.rows() || c >= t.cols() {
                return Err(NumkitError::InvalidArgument(format!(
                    "gather_sum coordinate ({r},{c}) outside {:?}",
                    t.shape()
                )));
            }
            acc += t.at2(r, c);
        }
        let v = Tensor::scalar(acc);
        self.push(Op::GatherSum { input: a, coords }, v)
    }

    fn scatter_scalar(
        &mut self,
        a: VarId,
        coords: Rc<Vec<(usize, usize)>>,
        rows: usize,
        cols: usize,
    ) -> Result<VarId, NumkitError> {
        let x = self.value(a).scalar_value()?;
        let mut data = vec![0.0; rows * cols];
        for &(r, c) in coords.iter() {
            data[r * cols + c] += x;
        }
        let v = Tensor::from_vec(vec![rows, cols], data)?;
        self.push(Op::ScatterScalar { input: a, coords }, v)
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, NumkitError> {
        let t = self.value(a);
        require_rank2(t, "slice_rows")?;
        if len == 0 || start + len > t.rows() {
            return Err(NumkitError::InvalidArgument(format!(
                "slice_rows [{start}, {start}+{len}) outside {} rows",
                t.rows()
            )));
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::from_vec(vec![len, c], data)?;
        self.push(Op::SliceRows { input: a, start, len }, v)
    }

    pub fn pad_rows(&mut self, a: VarId, before: usize, after: usize) -> Result<VarId, NumkitError> {
        let t = self.value(a);
        require_rank2(t, "pad_rows")?;
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; (before + r + after) * c];
        data[before * c..(before + r) * c].copy_from_slice(t.data());
        let v = Tensor::from_vec(vec![before + r + after, c], data)?;
        self.push(Op::PadRows { input: a, before }, v)
    }

    /// Reverse-mode gradients of a scalar `root` with respect to `wrt`.
    ///
    /// The returned ids point at freshly appended nodes whose values are the
    /// gradient tensors; unreachable parameters get zeros of matching shape.
    pub fn backward(&mut self, root: VarId, wrt: &[VarId]) -> Result<Vec<VarId>, NumkitError> {
        if !self.value(root).is_scalar() {
            return Err(NumkitError::NonScalarRoot);
        }
        let n = root.0 + 1;
        let mut reachable = vec![false; n];
        let mut stack = vec![root.0];
        while let Some(id) = stack.pop() {
            if reachable[id] {
                continue;
            }
            reachable[id] = true;
            stack.extend(self.nodes[id].op.parents());
        }

        let mut grads: Vec<Option<VarId>> = vec![None; n];
        let seed = Tensor::full(self.value(root).shape().to_vec(), 1.0);
        grads[root.0] = Some(self.leaf(seed));

        for id in (0..n).rev() {
            if !reachable[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes[id].op.clone();
            for (parent, contrib) in self.vjp(&op, VarId(id), g)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.leaf(Tensor::zeros(self.value(*w).shape().to_vec()))),
            })
            .collect()
    }

    /// Vector-Jacobian products, built out of graph ops so that gradients of
    /// gradients keep working.
    fn vjp(&mut self, op: &Op, node: VarId, g: VarId) -> Result<Vec<(VarId, VarId)>, NumkitError> {
        use Op::*;
        Ok(match *op {
            Leaf => vec![],
            Add(a, b) => vec![(a, g), (b, g)],
            Sub(a, b) => {
                let neg = self.scale(g, -1.0)?;
                vec![(a, g), (b, neg)]
            }
            Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![(a, ga), (b, gb)]
            }
            Scale(a, c) => vec![(a, self.scale(g, c)?)],
            AddScalar(a) => vec![(a, g)],
            Matmul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![(a, ga), (b, gb)]
            }
            Transpose(a) => vec![(a, self.transpose(g)?)],
            Conv1d {
                input,
                kernels,
                stride,
            } => {
                let t_in = self.value(input).shape()[0];
                let width = self.value(kernels).shape()[0];
                let gi = self.conv_back_input(g, kernels, stride, t_in)?;
                let gk = self.conv_back_kernel(input, g, stride, width)?;
                vec![(input, gi), (kernels, gk)]
            }
            ConvBackInput {
                grad_out,
                kernels,
                stride,
            } => {
                let width = self.value(kernels).shape()[0];
                let gg = self.conv1d(g, kernels, stride)?;
                let gk = self.conv_back_kernel(g, grad_out, stride, width)?;
                vec![(grad_out, gg), (kernels, gk)]
            }
            ConvBackKernel {
                input,
                grad_out,
                stride,
            } => {
                let t_in = self.value(input).shape()[0];
                let gi = self.conv_back_input(grad_out, g, stride, t_in)?;
                let gg = self.conv1d(input, g, stride)?;
                vec![(input, gi), (grad_out, gg)]
            }
            Relu(a) => {
                // Subgradient 0 at the kink; the mask is a constant.
                let mask = self.leaf(self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                vec![(a, self.mul(g, mask)?)]
            }
            Tanh(a) => {
                let y2 = self.mul(node, node)?;
                let neg = self.scale(y2, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                vec![(a, self.mul(g, one_minus)?)]
            }
            Sigmoid(a) => {
                let neg = self.scale(node, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let dydx = self.mul(node, one_minus)?;
                vec![(a, self.mul(g, dydx)?)]
            }
            Softplus(a) => {
                let s = self.sigmoid(a)?;
                vec![(a, self.mul(g, s)?)]
            }
            Sqrt(a) => {
                let r = self.recip(node)?;
                let half = self.scale(r, 0.5)?;
                vec![(a, self.mul(g, half)?)]
            }
            Exp(a) => vec![(a, self.mul(g, node)?)],
            Ln(a) => {
                let r = self.recip(a)?;
                vec![(a, self.mul(g, r)?)]
            }
            Recip(a) => {
                let y2 = self.mul(node, node)?;
                let gy = self.mul(g, y2)?;
                vec![(a, self.scale(gy, -1.0)?)]
            }
            Softmax { input, temp } => {
                let gy = self.mul(g, node)?;
                let s = self.row_sum(gy)?;
                let cols = self.value(node).cols();
                let sb = self.broadcast_col(s, cols)?;
                let centered = self.sub(g, sb)?;
                let prod = self.mul(node, centered)?;
                vec![(input, self.scale(prod, 1.0 / temp)?)]
            }
            LogSoftmax { input, temp } => {
                let p = self.exp(node)?;
                let s = self.row_sum(g)?;
                let cols = self.value(node).cols();
                let sb = self.broadcast_col(s, cols)?;
                let ps = self.mul(p, sb)?;
                let diff = self.sub(g, ps)?;
                vec![(input, self.scale(diff, 1.0 / temp)?)]
            }
            RowSum(a) => {
                let cols = self.value(a).cols();
                vec![(a, self.broadcast_col(g, cols)?)]
            }
            ColSum(a) => {
                let rows = self.value(a).rows();
                vec![(a, self.broadcast_row(g, rows)?)]
            }
            SumAll(a) => {
                let shape = self.value(a).shape().to_vec();
                vec![(a, self.broadcast_scalar(g, &shape)?)]
            }
            BroadcastCol(a) => vec![(a, self.row_sum(g)?)],
            BroadcastRow(a) => vec![(a, self.col_sum(g)?)],
            BroadcastScalar(a) => vec![(a, self.sum_all(g)?)],
            GatherSum { input, ref coords } => {
                let t = self.value(input);
                let (rows, cols) = (t.rows(), t.cols());
                let coords = Rc::clone(coords);
                vec![(input, self.scatter_scalar(g, coords, rows, cols)?)]
            }
            ScatterScalar { input, ref coords } => {
                let coords = Rc::clone(coords);
                vec![(input, self.gather_sum(g, coords)?)]
            }
            SliceRows { input, start, len } => {
                let rows = self.value(input).rows();
                vec![(input, self.pad_rows(g, start, rows - start - len)?)]
            }
            PadRows { input, before } => {
                let rows = self.value(input).rows();
                vec![(input, self.slice_rows(g, before, rows)?)]
            }
        })
    }
}

fn require_rank2(t: &Tensor, what: &str) -> Result<(), NumkitError> {
    if t.rank() != 2 {
        return Err(NumkitError::ShapeMismatch(format!(
            "{what} needs rank 2, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn conv1d_value(x: &Tensor, k: &Tensor, stride: usize) -> Result<Tensor, NumkitError> {
    if stride == 0 {
        return Err(NumkitError::InvalidArgument("stride must be positive".into()));
    }
    if x.rank() != 2 || k.rank() != 3 {
        return Err(NumkitError::ShapeMismatch(format!(
            "conv1d wants T x D input and k x D x D' kernels, got {:?} and {:?}",
            x.shape(),
            k.shape()
        )));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let (w, kd, dp) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    if kd != d {
        return Err(NumkitError::ShapeMismatch(format!(
            "conv1d channel mismatch: input D={d}, kernels D={kd}"
        )));
    }
    if t < w {
        return Err(NumkitError::InputShorterThanKernel { t, k: w });
    }
    let t_out = (t - w) / stride + 1;
    let mut out = vec![0.0; t_out * dp];
    for to in 0..t_out {
        let base = to * stride;
        let o_row = &mut out[to * dp..(to + 1) * dp];
        for i in 0..w {
            let x_row = &x.data()[(base + i) * d..(base + i + 1) * d];
            for (di, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let k_row = &k.data()[(i * d + di) * dp..(i * d + di + 1) * dp];
                for (o, &kv) in o_row.iter_mut().zip(k_row) {
                    *o += xv * kv;
                }
            }
        }
    }
    Tensor::from_vec(vec![t_out, dp], out)
}

fn conv_back_input_value(
    g: &Tensor,
    k: &Tensor,
    stride: usize,
    t_in: usize,
) -> Result<Tensor, NumkitError> {
    let (w, d, dp) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let t_out = g.shape()[0];
    if g.rank() != 2 || g.shape()[1] != dp {
        return Err(NumkitError::ShapeMismatch(format!(
            "conv back-input grad {:?} vs kernels {:?}",
            g.shape(),
            k.shape()
        )));
    }
    if t_in < w || (t_in - w) / stride + 1 != t_out {
        return Err(NumkitError::ShapeMismatch(format!(
            "conv back-input length mismatch: t_in={t_in}, width={w}, stride={stride}, t_out={t_out}"
        )));
    }
    let mut out = vec![0.0; t_in * d];
    for to in 0..t_out {
        let g_row = g.row(to);
        let base = to * stride;
        for i in 0..w {
            let o_row = &mut out[(base + i) * d..(base + i + 1) * d];
            for di in 0..d {
                let k_row = &k.data()[(i * d + di) * dp..(i * d + di + 1) * dp];
                let mut acc = 0.0;
                for (gv, kv) in g_row.iter().zip(k_row) {
                    acc += gv * kv;
                }
                o_row[di] += acc;
            }
        }
    }
    Tensor::from_vec(vec![t_in, d], out)
}

fn conv_back_kernel_value(
    x: &Tensor,
    g: &Tensor,
    stride: usize,
    width: usize,
) -> Result<Tensor, NumkitError> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let (t_out, dp) = (g.shape()[0], g.shape()[1]);
    if t < width || (t - width) / stride + 1 != t_out {
        return Err(NumkitError::ShapeMismatch(format!(
            "conv back-kernel length mismatch: t={t}, width={width}, stride={stride}, t_out={t_out}"
        )));
    }
    let mut out = vec![0.0; width * d * dp];
    for to in 0..t_out {
        let g_row = g.row(to);
        let base = to * stride;
        for i in 0..width {
            let x_row = &x.data()[(base + i) * d..(base + i + 1) * d];
            for (di, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let o_row = &mut out[(i * d + di) * dp..(i * d + di + 1) * dp];
                for (o, &gv) in o_row.iter_mut().zip(g_row) {
                    *o += xv * gv;
                }
            }
        }
    }
    Tensor::from_vec(vec![width, d, dp], out)
}

/// Row-wise temperature softmax of a 2-D tensor (plain value, no graph).
pub fn softmax_rows(t: &Tensor, temp: f64) -> Result<Tensor, NumkitError> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(NumkitError::BadTemperature(temp));
    }
    require_rank2(t, "softmax")?;
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = ((x - m) / temp).exp();
            data[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            data[i * c + j] /= sum;
        }
    }
    Tensor::from_vec(vec![r, c], data)
}

/// Row-wise log-softmax (plain value, no graph).
pub fn log_softmax_rows(t: &Tensor, temp: f64) -> Result<Tensor, NumkitError> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(NumkitError::BadTemperature(temp));
    }
    require_rank2(t, "log_softmax")?;
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &x in row {
            sum += ((x - m) / temp).exp();
        }
        let log_z = sum.ln();
        for (j, &x) in row.iter().enumerate() {
            data[i * c + j] = (x - m) / temp - log_z;
        }
    }
    Tensor::from_vec(vec![r, c], data)
}
