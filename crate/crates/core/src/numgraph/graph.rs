use super::kernels::{self, gemm, ConvGeometry, Padding};
use super::{GraphError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
        // Patch matrices for every batch item; empty for pointwise convolutions.
        cols: Vec<f64>,
    },
    AddBias { x: NodeId, bias: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale { x: NodeId, factor: f64 },
    ScaleBy { x: NodeId, scalar: NodeId },
    Sum(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    GemPool { x: NodeId, p: f64, spatial: usize, channels: usize },
    Linear { x: NodeId, weight: NodeId, bias: Option<NodeId> },
    MatMulT { a: NodeId, b: NodeId },
    L2Normalize(NodeId),
    ArcFaceMargin { cosines: NodeId, targets: Vec<usize>, margin: f64 },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    MeanSquaredError(NodeId, NodeId),
    AttentionPool { features: NodeId, attention: NodeId },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | StopGradient => vec![],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            AddBias { x, bias } => vec![*x, *bias],
            Add(a, b) | Mul(a, b) | MeanSquaredError(a, b) => vec![*a, *b],
            Scale { x, .. } | Sum(x) | Relu(x) | Softplus(x) | L2Normalize(x) => vec![*x],
            ScaleBy { x, scalar } => vec![*x, *scalar],
            GemPool { x, .. } => vec![*x],
            Linear { x, weight, bias } => {
                let mut p = vec![*x, *weight];
                p.extend(bias);
                p
            }
            MatMulT { a, b } => vec![*a, *b],
            ArcFaceMargin { cosines, .. } => vec![*cosines],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            AttentionPool { features, attention } => vec![*features, *attention],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            StopGradient => "stop_gradient",
            Conv2d { .. } => "conv2d",
            AddBias { .. } => "add_bias",
            Add(..) => "add",
            Mul(..) => "mul",
            Scale { .. } => "scale",
            ScaleBy { .. } => "scale_by",
            Sum(_) => "sum",
            Relu(_) => "relu",
            Softplus(_) => "softplus",
            GemPool { .. } => "gem_pool",
            Linear { .. } => "fully_connected",
            MatMulT { .. } => "matmul_t",
            L2Normalize(_) => "l2_normalize",
            ArcFaceMargin { .. } => "arcface_margin",
            SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            MeanSquaredError(..) => "mean_squared_error",
            AttentionPool { .. } => "attention_pool",
        }
    }
}

/// A recorded value with its gradient bookkeeping.
#[derive(Debug)]
pub struct DiffNode {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    barrier: bool,
}

impl DiffNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// True for stop-gradient nodes: nothing flows back through them.
    pub fn is_barrier(&self) -> bool {
        self.barrier
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `node`, zero when no path reaches it.
    pub fn wrt(&self, node: NodeId) -> Tensor {
        self.get(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }

    /// Number of nodes whose local gradient rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Tape of differentiable tensor operations.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
}

/// Splits a shape into `(rows, row_len)` treating the last axis as the row.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().expect("tensor rank >= 1");
    (shape.iter().product::<usize>() / c, c)
}

fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<(), GraphError> {
    if targets.len() != rows {
        return Err(GraphError::ShapeMismatch {
            op: "targets",
            left: vec![rows, classes],
            right: vec![targets.len()],
        });
    }
    match targets.iter().find(|&&t| t >= classes) {
        Some(&target) => Err(GraphError::TargetOutOfRange { target, classes }),
        None => Ok(()),
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

    pub fn node(&self, id: NodeId) -> &DiffNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: op.name() });
        }
        let barrier = matches!(op, Op::StopGradient);
        let requires_grad =
            !barrier && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(DiffNode {
            value,
            op,
            requires_grad,
            barrier,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: "leaf" });
        }
        self.nodes.push(DiffNode {
            value,
            op: Op::Leaf,
            requires_grad,
            barrier: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.push_leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.push_leaf(value, false)
    }

    /// Identity in the forward pass; contributes nothing to any ancestor gradient.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, GraphError> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let (plen, pixels) = (geom.patch_len(), geom.out_pixels());
        let mut out = vec![0.0; geom.n * pixels * geom.cout];
        let mut cols = Vec::new();
        if geom.is_pointwise() {
            gemm(geom.n * pixels, plen, geom.cout, x, false, k, false, 0.0, &mut out);
        } else {
            cols = vec![0.0; geom.n * pixels * plen];
            for b in 0..geom.n {
                let c = &mut cols[b * pixels * plen..][..pixels * plen];
                geom.im2col(&x[b * geom.in_image_len()..][..geom.in_image_len()], c);
                let o = &mut out[b * pixels * geom.cout..][..pixels * geom.cout];
                gemm(pixels, plen, geom.cout, c, false, k, false, 0.0, o);
            }
        }
        let value = Tensor::from_parts(vec![geom.n, geom.ho, geom.wo, geom.cout], out);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        )
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let (xs, bs) = (self.value(x), self.value(bias));
        let (_, c) = rows_of(xs.shape());
        if bs.numel() != c {
            return Err(GraphError::ShapeMismatch {
                op: "add_bias",
                left: xs.shape().to_vec(),
                right: bs.shape().to_vec(),
            });
        }
        let mut value = xs.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bs.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddBias { x, bias })
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Multiplies `x` by a single-element node.
    pub fn scale_by(&mut self, x: NodeId, scalar: NodeId) -> Result<NodeId, GraphError> {
        let s = self.value(scalar).item().ok_or_else(|| GraphError::ShapeMismatch {
            op: "scale_by",
            left: self.value(x).shape().to_vec(),
            right: self.value(scalar).shape().to_vec(),
        })?;
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::ScaleBy { x, scalar })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(x).map(kernels::softplus);
        self.push(value, Op::Softplus(x))
    }

    /// Generalized-mean pooling over the spatial axes of `[H,W,C]` or `[N,H,W,C]`.
    ///
    /// Inputs must be non-negative; `p = 1` is exactly the arithmetic mean.
    pub fn gem_pool(&mut self, x: NodeId, p: f64) -> Result<NodeId, GraphError> {
        let xs = self.value(x);
        let shape = xs.shape();
        let (batch, out_shape) = match shape.len() {
            3 => (1, vec![shape[2]]),
            4 => (shape[0], vec![shape[0], shape[3]]),
            _ => {
                return Err(GraphError::InvalidArgument(format!(
                    "gem_pool expects [H,W,C] or [N,H,W,C], got {shape:?}"
                )))
            }
        };
        if !(p >= 1.0) || !p.is_finite() {
            return Err(GraphError::InvalidArgument(format!(
                "gem_pool power must be finite and >= 1, got {p}"
            )));
        }
        if xs.data().iter().any(|&v| v < 0.0) {
            return Err(GraphError::NegativeInput { op: "gem_pool" });
        }
        let channels = *shape.last().unwrap();
        let spatial = xs.numel() / (batch * channels);
        let out = gem_forward(xs.data(), batch, spatial, channels, p);
        let value = Tensor::from_parts(out_shape, out);
        self.push(
            value,
            Op::GemPool {
                x,
                p,
                spatial,
                channels,
            },
        )
    }

    /// `x W^T + b` for `x` of shape `[Cin]` or `[N,Cin]` and `W` of shape `[Cout,Cin]`.
    pub fn fully_connected(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, GraphError> {
        let (xs, ws) = (self.value(x), self.value(weight));
        let mismatch = |right: &Tensor| GraphError::ShapeMismatch {
            op: "fully_connected",
            left: xs.shape().to_vec(),
            right: right.shape().to_vec(),
        };
        if xs.rank() > 2 || ws.rank() != 2 || ws.shape()[1] != *xs.shape().last().unwrap() {
            return Err(mismatch(ws));
        }
        let (rows, cin) = rows_of(xs.shape());
        let cout = ws.shape()[0];
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, xs.data(), false, ws.data(), true, 0.0, &mut out);
        if let Some(b) = bias {
            let bs = self.value(b);
            if bs.numel() != cout {
                return Err(mismatch(bs));
            }
            for row in out.chunks_mut(cout) {
                for (v, b) in row.iter_mut().zip(bs.data()) {
                    *v += b;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, weight, bias })
    }

    /// `a b^T` for `a: [N,C]` (or `[C]`) and `b: [K,C]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (as_, bs) = (self.value(a), self.value(b));
        if as_.rank() > 2 || bs.rank() != 2 || bs.shape()[1] != *as_.shape().last().unwrap() {
            return Err(GraphError::ShapeMismatch {
                op: "matmul_t",
                left: as_.shape().to_vec(),
                right: bs.shape().to_vec(),
            });
        }
        let (rows, c) = rows_of(as_.shape());
        let k = bs.shape()[0];
        let mut out = vec![0.0; rows * k];
        gemm(rows, c, k, as_.data(), false, bs.data(), true, 0.0, &mut out);
        let mut shape = as_.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        self.push(Tensor::from_parts(shape, out), Op::MatMulT { a, b })
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.value(x);
        let (_, c) = rows_of(xs.shape());
        let mut value = xs.clone();
        for row in value.data_mut().chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= super::NORM_EPS {
                return Err(GraphError::NearZeroNorm { norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.push(value, Op::L2Normalize(x))
    }

    /// Replaces each target-class cosine `u` by `cos(acos(u) + margin)`.
    pub fn arcface_margin(
        &mut self,
        cosines: NodeId,
        targets: &[usize],
        margin: f64,
    ) -> Result<NodeId, GraphError> {
        let cs = self.value(cosines);
        let (rows, classes) = rows_of(cs.shape());
        check_targets(targets, rows, classes)?;
        let mut value = cs.clone();
        for (row, &t) in value.data_mut().chunks_mut(classes).zip(targets) {
            row[t] = crate::losses::arcface_adjust(row[t], true, margin);
        }
        self.push(
            value,
            Op::ArcFaceMargin {
                cosines,
                targets: targets.to_vec(),
                margin,
            },
        )
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, GraphError> {
        let ls = self.value(logits);
        let (rows, classes) = rows_of(ls.shape());
        check_targets(targets, rows, classes)?;
        let total: f64 = ls
            .data()
            .chunks(classes)
            .zip(targets)
            .map(|(row, &t)| kernels::log_sum_exp(row) - row[t])
            .sum();
        self.push(
            Tensor::scalar(total / rows as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean of squared differences over every element.
    pub fn mean_squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("mean_squared_error", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(
            Tensor::scalar(total / av.len() as f64),
            Op::MeanSquaredError(a, b),
        )
    }

    /// Attention-weighted spatial sum: `out[c] = sum_{h,w} a[h,w] * f[h,w,c]`.
    ///
    /// `features` is `[H,W,C]` or `[N,H,W,C]`; `attention` holds one weight per
    /// spatial position with the same leading axes (a trailing axis of 1 is allowed).
    pub fn attention_pool(
        &mut self,
        features: NodeId,
        attention: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (fs, at) = (self.value(features), self.value(attention));
        let fshape = fs.shape();
        let lead = match fshape.len() {
            3 => &fshape[..2],
            4 => &fshape[..3],
            _ => &fshape[..0],
        };
        let ashape = at.shape();
        let ashape = match ashape.last() {
            Some(1) if ashape.len() == lead.len() + 1 => &ashape[..ashape.len() - 1],
            _ => ashape,
        };
        if lead.is_empty() || ashape != lead {
            return Err(GraphError::ShapeMismatch {
                op: "attention_pool",
                left: fshape.to_vec(),
                right: at.shape().to_vec(),
            });
        }
        let channels = fshape[fshape.len() - 1];
        let (batch, out_shape) = if fshape.len() == 4 {
            (fshape[0], vec![fshape[0], channels])
        } else {
            (1, vec![channels])
        };
        let spatial = fshape[fshape.len() - 3] * fshape[fshape.len() - 2];
        let mut out = vec![0.0; batch * channels];
        for n in 0..batch {
            let o = &mut out[n * channels..][..channels];
            for pos in 0..spatial {
                let a = at.data()[n * spatial + pos];
                let f = &fs.data()[(n * spatial + pos) * channels..][..channels];
                for (acc, v) in o.iter_mut().zip(f) {
                    *acc += a * v;
                }
            }
        }
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::AttentionPool {
                features,
                attention,
            },
        )
    }

    /// Reverse-mode sweep from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GraphError> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(GraphError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, contribution: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &DiffNode, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let like = |id: NodeId, data: Vec<f64>| {
            Tensor::from_parts(self.value(id).shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (plen, pixels) = (geom.patch_len(), geom.out_pixels());
                let k = self.value(*kernel).data();
                let x = self.value(*input).data();
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; plen * geom.cout];
                    if geom.is_pointwise() {
                        gemm(plen, geom.n * pixels, geom.cout, x, true, gd, false, 0.0, &mut dk);
                    } else {
                        for b in 0..geom.n {
                            let c = &cols[b * pixels * plen..][..pixels * plen];
                            let gb = &gd[b * pixels * geom.cout..][..pixels * geom.cout];
                            gemm(plen, pixels, geom.cout, c, true, gb, false, 1.0, &mut dk);
                        }
                    }
                    self.accumulate(grads, *kernel, like(*kernel, dk));
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; x.len()];
                    if geom.is_pointwise() {
                        gemm(geom.n * pixels, geom.cout, plen, gd, false, k, true, 0.0, &mut dx);
                    } else {
                        let mut dcols = vec![0.0; pixels * plen];
                        for b in 0..geom.n {
                            let gb = &gd[b * pixels * geom.cout..][..pixels * geom.cout];
                            gemm(pixels, geom.cout, plen, gb, false, k, true, 0.0, &mut dcols);
                            let len = geom.in_image_len();
                            geom.col2im(&dcols, &mut dx[b * len..][..len]);
                        }
                    }
                    self.accumulate(grads, *input, like(*input, dx));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*bias) {
                    let c = self.value(*bias).numel();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, like(*bias, db));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::ScaleBy { x, scalar } => {
                let s = self.value(*scalar).data()[0];
                if self.wants(*scalar) {
                    let xv = self.value(*x).data();
                    let ds: f64 = gd.iter().zip(xv).map(|(g, v)| g * v).sum();
                    self.accumulate(grads, *scalar, like(*scalar, vec![ds]));
                }
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, like(*x, vec![gd[0]; n]));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| g * kernels::sigmoid(v))
                    .collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::GemPool {
                x,
                p,
                spatial,
                channels,
            } => {
                let xv = self.value(*x).data();
                let out = node.value.data();
                let inv_n = 1.0 / *spatial as f64;
                let mut d = vec![0.0; xv.len()];
                for (i, (dv, &v)) in d.iter_mut().zip(xv).enumerate() {
                    let n = i / (spatial * channels);
                    let c = i % channels;
                    let o = out[n * channels + c];
                    let go = gd[n * channels + c];
                    *dv = if *p == 1.0 {
                        go * inv_n
                    } else if o > 0.0 {
                        go * inv_n * (v / o).powf(p - 1.0)
                    } else {
                        0.0
                    };
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Linear { x, weight, bias } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*weight).data());
                let (rows, cin) = rows_of(self.value(*x).shape());
                let cout = self.value(*weight).shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * cin];
                    gemm(rows, cout, cin, gd, false, wv, false, 0.0, &mut dx);
                    self.accumulate(grads, *x, like(*x, dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; cout * cin];
                    gemm(cout, rows, cin, gd, true, xv, false, 0.0, &mut dw);
                    self.accumulate(grads, *weight, like(*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, like(b, db));
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (rows, c) = rows_of(self.value(*a).shape());
                let k = self.value(*b).shape()[0];
                if self.wants(*a) {
                    let mut da = vec![0.0; rows * c];
                    gemm(rows, k, c, gd, false, bv, false, 0.0, &mut da);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * c];
                    gemm(k, rows, c, gd, true, av, false, 0.0, &mut db);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::L2Normalize(x) => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let (_, c) = rows_of(node.value.shape());
                let mut d = vec![0.0; xv.len()];
                for (((drow, xrow), yrow), grow) in d
                    .chunks_mut(c)
                    .zip(xv.chunks(c))
                    .zip(y.chunks(c))
                    .zip(gd.chunks(c))
                {
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = (gv - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::ArcFaceMargin {
                cosines,
                targets,
                margin,
            } => {
                let cv = self.value(*cosines).data();
                let (_, classes) = rows_of(node.value.shape());
                let mut d = gd.to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    let i = r * classes + t;
                    d[i] *= crate::losses::arcface_adjust_derivative(cv[i], *margin);
                }
                self.accumulate(grads, *cosines, like(*cosines, d));
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let lv = self.value(*logits).data();
                let (rows, classes) = rows_of(self.value(*logits).shape());
                let scale = gd[0] / rows as f64;
                let mut d = vec![0.0; lv.len()];
                for ((drow, row), &t) in d.chunks_mut(classes).zip(lv.chunks(classes)).zip(targets)
                {
                    let lse = kernels::log_sum_exp(row);
                    for (dv, v) in drow.iter_mut().zip(row) {
                        *dv = scale * (v - lse).exp();
                    }
                    drow[t] -= scale;
                }
                self.accumulate(grads, *logits, like(*logits, d));
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * gd[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                if self.wants(*b) {
                    self.accumulate(grads, *b, like(*b, da.iter().map(|v| -v).collect()));
                }
                self.accumulate(grads, *a, like(*a, da));
            }
            Op::AttentionPool {
                features,
                attention,
            } => {
                let (fv, av) = (self.value(*features).data(), self.value(*attention).data());
                let channels = *self.value(*features).shape().last().unwrap();
                let positions = av.len();
                let spatial = positions / (gd.len() / channels);
                if self.wants(*features) {
                    let mut d = vec![0.0; fv.len()];
                    for (p, drow) in d.chunks_mut(channels).enumerate() {
                        let grow = &gd[(p / spatial) * channels..][..channels];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv = av[p] * gv;
                        }
                    }
                    self.accumulate(grads, *features, like(*features, d));
                }
                if self.wants(*attention) {
                    let d = (0..positions)
                        .map(|p| {
                            let grow = &gd[(p / spatial) * channels..][..channels];
                            let frow = &fv[p * channels..][..channels];
                            grow.iter().zip(frow).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    self.accumulate(grads, *attention, like(*attention, d));
                }
            }
        }
    }
}

/// Generalized mean over `spatial` positions for each `(batch, channel)`.
fn gem_forward(x: &[f64], batch: usize, spatial: usize, channels: usize, p: f64) -> Vec<f64> {
    let mut out = vec![0.0; batch * channels];
    let n = spatial as f64;
    for b in 0..batch {
        let block = &x[b * spatial * channels..][..spatial * channels];
        for c in 0..channels {
            let column = block.iter().skip(c).step_by(channels);
            out[b * channels + c] = if p == 1.0 {
                column.sum::<f64>() / n
            } else {
                // Factor out the maximum so large powers stay representable.
                let max = column.clone().copied().fold(0.0, f64::max);
                if max == 0.0 {
                    0.0
                } else {
                    let mean = column.map(|v| (v / max).powf(p)).sum::<f64>() / n;
                    max * mean.powf(1.0 / p)
                }
            };
        }
    }
    out
}
