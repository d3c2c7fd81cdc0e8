//! Single-use reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes once in reverse order, hands back the gradients of every
//! trainable leaf, and frees the recorded graph. Constants (including the
//! output of [`Tape::stop_grad`]) never receive a gradient.

use crate::array::Tensor;
use crate::error::TensorError;
use crate::kernels::{col2im, gemm, im2col, ConvGeom};

/// Denominator floor inside [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
/// Variance offset inside batch and layer standardization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in a batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running statistics.
    Train,
    /// Normalize with the running statistics; they are left untouched.
    Eval,
}

/// `(outer, len, inner)` decomposition of a shape around one axis.
#[derive(Debug, Clone, Copy)]
struct AxisGeom {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisGeom {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn index(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Adds a vector along axis 1 (features of a matrix, channels of an image batch).
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Reshape(usize),
    ConcatCols(usize, usize),
    L2Normalize {
        x: usize,
        geom: AxisGeom,
        inv_norm: Vec<f64>,
    },
    /// Standardization over axis-1 groups, optionally followed by an affine map.
    Standardize {
        x: usize,
        affine: Option<(usize, usize)>,
        geom: AxisGeom,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    AvgPool {
        x: usize,
        k: usize,
        dims: [usize; 4],
        out_hw: (usize, usize),
    },
    GlobalAvgPool {
        x: usize,
        plane: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    LogSumExpRows {
        x: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the trainable leaves reached by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Value-identical copy of `x`, detached from the graph.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = self.node(x)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, x: NodeId) -> Result<&Tensor, TensorError> {
        Ok(&self.node(x)?.value)
    }

    pub fn requires_grad(&self, x: NodeId) -> Result<bool, TensorError> {
        Ok(self.node(x)?.requires_grad)
    }

    fn node(&self, x: NodeId) -> Result<&Node, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.nodes.get(x.0).ok_or(TensorError::UnknownNode(x.0))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        Ok(self.derived(value, Op::MatMul(a.0, b.0), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = self.node(a)?.value.transpose2()?;
        Ok(self.derived(value, Op::Transpose(a.0), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(value, Op::Add(a.0, b.0), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(value, Op::Sub(a.0, b.0), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(value, Op::Mul(a.0, b.0), &[a, b]))
    }

    /// Adds `bias` (length = extent of axis 1) to every slice of `x` along axis 1.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xv = &self.node(x)?.value;
        let bv = &self.node(bias)?.value;
        if xv.ndim() < 2 || bv.ndim() != 1 || bv.numel() != xv.shape()[1] {
            return Err(TensorError::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let geom = AxisGeom::new(xv.shape(), 1);
        let mut out = xv.clone();
        let data = out.data_mut();
        for o in 0..geom.outer {
            for (l, &b) in bv.data().iter().enumerate() {
                let start = geom.index(o, l, 0);
                data[start..start + geom.inner].iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(self.derived(out, Op::AddBias(x.0, bias.0), &[x, bias]))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId, TensorError> {
        let value = self.node(x)?.value.map(|v| v * s);
        Ok(self.derived(value, Op::Scale(x.0, s), &[x]))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId, TensorError> {
        let value = self.node(x)?.value.map(|v| v + s);
        Ok(self.derived(value, Op::AddScalar(x.0), &[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = self.node(x)?.value.map(|v| v.max(0.0));
        Ok(self.derived(value, Op::Relu(x.0), &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.node(x)?.value.data().iter().sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(x.0), &[x]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = &self.node(x)?.value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.derived(Tensor::scalar(m), Op::Mean(x.0), &[x]))
    }

    /// Sums each row of a matrix: `(B, F) -> (B)`.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = &self.node(x)?.value;
        let (rows, _) = v.dims2()?;
        let data = (0..rows).map(|i| v.row(i).iter().sum()).collect();
        let value = Tensor::new(&[rows], data)?;
        Ok(self.derived(value, Op::RowSum(x.0), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.node(x)?.value.reshaped(shape)?;
        Ok(self.derived(value, Op::Reshape(x.0), &[x]))
    }

    /// Flattens all axes after the first: `(N, ...) -> (N, prod(...))`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.node(x)?.value.shape().to_vec();
        let n = *shape.first().ok_or_else(|| TensorError::shape("flatten", "scalar".into()))?;
        self.reshape(x, &[n, shape[1..].iter().product()])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ra, ca) = va.dims2()?;
        let (rb, cb) = vb.dims2()?;
        if ra != rb {
            return Err(TensorError::shape("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let value = Tensor::new(&[ra, ca + cb], data)?;
        Ok(self.derived(value, Op::ConcatCols(a.0, b.0), &[a, b]))
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Slices with
    /// norm below [`NORM_EPS`] are divided by `NORM_EPS` instead.
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let v = &self.node(x)?.value;
        if axis >= v.ndim() {
            return Err(TensorError::shape("l2_normalize", format!("axis {axis} of {:?}", v.shape())));
        }
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "l2_normalize" });
        }
        let geom = AxisGeom::new(v.shape(), axis);
        let mut out = v.clone();
        let mut inv_norm = Vec::with_capacity(geom.outer * geom.inner);
        let data = out.data_mut();
        for o in 0..geom.outer {
            for i in 0..geom.inner {
                let sq: f64 = (0..geom.len).map(|l| data[geom.index(o, l, i)].powi(2)).sum();
                let inv = 1.0 / sq.sqrt().max(NORM_EPS);
                for l in 0..geom.len {
                    data[geom.index(o, l, i)] *= inv;
                }
                inv_norm.push(inv);
            }
        }
        Ok(self.derived(out, Op::L2Normalize { x: x.0, geom, inv_norm }, &[x]))
    }

    /// Batch normalization over axis 1 (features of `(B, F)`, channels of
    /// `(N, C, H, W)`), with affine `gamma`/`beta`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<NodeId, TensorError> {
        let shape = self.node(x)?.value.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape("batch_norm", format!("{shape:?}")));
        }
        let channels = shape[1];
        for p in [gamma, beta] {
            if self.node(p)?.value.shape() != [channels] {
                return Err(TensorError::shape(
                    "batch_norm",
                    format!("affine {:?} for {channels} channels", self.node(p)?.value.shape()),
                ));
            }
        }
        if stats.channels() != channels {
            return Err(TensorError::shape(
                "batch_norm",
                format!("running stats for {} channels, input has {channels}", stats.channels()),
            ));
        }
        match mode {
            BnMode::Train => {
                if shape[0] < 2 {
                    return Err(TensorError::BatchTooSmall { op: "batch_norm", size: shape[0] });
                }
                let (mean, var) = self.group_moments(x, 1);
                for c in 0..channels {
                    stats.mean[c] = BN_MOMENTUM * stats.mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                    stats.var[c] = BN_MOMENTUM * stats.var[c] + (1.0 - BN_MOMENTUM) * var[c];
                }
                self.standardize(x, 1, Some((gamma, beta)), &mean, &var, true)
            }
            BnMode::Eval => {
                let (mean, var) = (stats.mean.clone(), stats.var.clone());
                self.standardize(x, 1, Some((gamma, beta)), &mean, &var, false)
            }
        }
    }

    /// Per-column standardization of a `(B, F)` matrix with batch statistics
    /// and no affine terms or running statistics.
    pub fn batch_standardize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (b, _) = self.node(x)?.value.dims2()?;
        if b < 2 {
            return Err(TensorError::BatchTooSmall { op: "batch_standardize", size: b });
        }
        let (mean, var) = self.group_moments(x, 1);
        self.standardize(x, 1, None, &mean, &var, true)
    }

    /// Per-row standardization of a `(B, F)` matrix, no affine terms.
    pub fn layer_standardize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.node(x)?.value.dims2()?;
        let (mean, var) = self.group_moments(x, 0);
        self.standardize(x, 0, None, &mean, &var, true)
    }

    /// Mean and biased variance of each slice along `axis`, pooled over all
    /// other axes.
    fn group_moments(&self, x: NodeId, axis: usize) -> (Vec<f64>, Vec<f64>) {
        let v = &self.nodes[x.0].value;
        let geom = AxisGeom::new(v.shape(), axis);
        let count = (geom.outer * geom.inner) as f64;
        let data = v.data();
        let mut mean = vec![0.0; geom.len];
        let mut var = vec![0.0; geom.len];
        for l in 0..geom.len {
            let mut s = 0.0;
            for o in 0..geom.outer {
                let start = geom.index(o, l, 0);
                s += data[start..start + geom.inner].iter().sum::<f64>();
            }
            let m = s / count;
            let mut q = 0.0;
            for o in 0..geom.outer {
                let start = geom.index(o, l, 0);
                q += data[start..start + geom.inner].iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
            mean[l] = m;
            var[l] = q / count;
        }
        (mean, var)
    }

    fn standardize(
        &mut self,
        x: NodeId,
        axis: usize,
        affine: Option<(NodeId, NodeId)>,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<NodeId, TensorError> {
        let v = &self.nodes[x.0].value;
        let geom = AxisGeom::new(v.shape(), axis);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
        let mut xhat = v.data().to_vec();
        for o in 0..geom.outer {
            for l in 0..geom.len {
                let start = geom.index(o, l, 0);
                for e in &mut xhat[start..start + geom.inner] {
                    *e = (*e - mean[l]) * inv_std[l];
                }
            }
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let gv = self.nodes[g.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for o in 0..geom.outer {
                for l in 0..geom.len {
                    let start = geom.index(o, l, 0);
                    for e in &mut out[start..start + geom.inner] {
                        *e = *e * gv[l] + bv[l];
                    }
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        let mut inputs = vec![x];
        if let Some((g, b)) = affine {
            inputs.extend([g, b]);
        }
        let op = Op::Standardize {
            x: x.0,
            affine: affine.map(|(g, b)| (g.0, b.0)),
            geom,
            xhat,
            inv_std,
            batch_stats,
        };
        Ok(self.derived(value, op, &inputs))
    }

    /// Cross-correlation of `(N, C, H, W)` input with `(O, C, KH, KW)` kernel.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let xv = &self.node(x)?.value;
        let kv = &self.node(kernel)?.value;
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (xv.shape(), kv.shape()) else {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", xv.shape(), kv.shape()),
            ));
        };
        if c != kc || stride == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}, stride {stride}", xv.shape(), kv.shape()),
            ));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(TensorError::KernelTooLarge { kernel: (kh, kw), padded_input: (ph, pw) });
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; n * o * cols_n];
        let plane = c * h * w;
        for (img, dst) in xv.data().chunks(plane).zip(out.chunks_mut(o * cols_n)) {
            im2col(img, &geom, &mut cols);
            gemm(
                o, rows, cols_n, 1.0,
                kv.data(), (rows as isize, 1),
                &cols, (cols_n as isize, 1),
                0.0, dst,
            );
        }
        let value = Tensor::new(&[n, o, geom.out_h, geom.out_w], out)?;
        let op = Op::Conv2d { x: x.0, kernel: kernel.0, geom, batch: n, out_channels: o };
        Ok(self.derived(value, op, &[x, kernel]))
    }

    /// Non-overlapping `k x k` average pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId, TensorError> {
        let v = &self.node(x)?.value;
        let &[n, c, h, w] = v.shape() else {
            return Err(TensorError::shape("avg_pool2d", format!("{:?}", v.shape())));
        };
        if k == 0 || h < k || w < k {
            return Err(TensorError::shape("avg_pool2d", format!("window {k} on {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let data = v.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &data[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let op = Op::AvgPool { x: x.0, k, dims: [n, c, h, w], out_hw: (oh, ow) };
        Ok(self.derived(value, op, &[x]))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = &self.node(x)?.value;
        let &[n, c, h, w] = v.shape() else {
            return Err(TensorError::shape("global_avg_pool", format!("{:?}", v.shape())));
        };
        let plane = h * w;
        let data = v.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.derived(value, Op::GlobalAvgPool { x: x.0, plane }, &[x]))
    }

    /// Mean softmax cross-entropy of `(B, C)` logits against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let v = &self.node(logits)?.value;
        let (b, c) = v.dims2()?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("{} labels for {b}x{c} logits", labels.len()),
            ));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = v.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &r) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (r - m).exp();
                z += *p;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            loss += m + z.ln() - row[labels[i]];
        }
        let value = Tensor::scalar(loss / b as f64);
        let op = Op::SoftmaxCrossEntropy { logits: logits.0, probs, labels: labels.to_vec() };
        Ok(self.derived(value, op, &[logits]))
    }

    /// Row-wise `ln Σ_j exp(x_ij)` over the entries where `include` is true
    /// (all entries when `None`), computed with max subtraction.
    pub fn logsumexp_rows(
        &mut self,
        x: NodeId,
        include: Option<&[bool]>,
    ) -> Result<NodeId, TensorError> {
        let v = &self.node(x)?.value;
        let (b, n) = v.dims2()?;
        if include.is_some_and(|m| m.len() != b * n) {
            return Err(TensorError::shape("logsumexp_rows", "mask size".into()));
        }
        let keep = |i: usize, j: usize| include.map_or(true, |m| m[i * n + j]);
        let mut weights = vec![0.0; b * n];
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let row = v.row(i);
            let m = (0..n)
                .filter(|&j| keep(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::shape("logsumexp_rows", format!("row {i} fully masked")));
            }
            let mut z = 0.0;
            for j in (0..n).filter(|&j| keep(i, j)) {
                let e = (row[j] - m).exp();
                weights[i * n + j] = e;
                z += e;
            }
            weights[i * n..(i + 1) * n].iter_mut().for_each(|w| *w /= z);
            out.push(m + z.ln());
        }
        let value = Tensor::new(&[b], out)?;
        Ok(self.derived(value, Op::LogSumExpRows { x: x.0, weights }, &[x]))
    }

    /// Back-propagates from the scalar `loss` and frees the graph.
    ///
    /// Returns the gradient of every trainable leaf that `loss` depends on.
    /// A second call on the same tape fails with [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, TensorError> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: root.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(loss.0 + 1, || None);
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.consumed = true;
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).shape()[1];
                if self.wants(*a) {
                    // dA = G @ Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, (n as isize, 1), val(*b).data(), (1, n as isize), 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ @ G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, val(*a).data(), (1, k as isize), g, (n as isize, 1), 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                let gt = Tensor::new(&[c, r], g.to_vec())?.transpose2()?;
                self.accumulate(grads, *a, gt.into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*bias) {
                    let geom = AxisGeom::new(val(*x).shape(), 1);
                    let mut db = vec![0.0; geom.len];
                    for o in 0..geom.outer {
                        for (l, d) in db.iter_mut().enumerate() {
                            let start = geom.index(o, l, 0);
                            *d += g[start..start + geom.inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => self.accumulate(grads, *x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::RowSum(x) => {
                let (r, c) = val(*x).dims2()?;
                let mut d = Vec::with_capacity(r * c);
                for &gi in g.iter().take(r) {
                    d.extend(std::iter::repeat(gi).take(c));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::ConcatCols(a, b) => {
                let (r, ca) = val(*a).dims2()?;
                let cb = val(*b).shape()[1];
                let width = ca + cb;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.chunks(width) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::L2Normalize { x, geom, inv_norm } => {
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..geom.outer {
                    for i in 0..geom.inner {
                        let inv = inv_norm[o * geom.inner + i];
                        let guarded = inv >= 1.0 / NORM_EPS;
                        if guarded {
                            for l in 0..geom.len {
                                let k = geom.index(o, l, i);
                                d[k] = g[k] * inv;
                            }
                            continue;
                        }
                        let dot: f64 = (0..geom.len)
                            .map(|l| {
                                let k = geom.index(o, l, i);
                                y[k] * g[k]
                            })
                            .sum();
                        for l in 0..geom.len {
                            let k = geom.index(o, l, i);
                            d[k] = (g[k] - y[k] * dot) * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Standardize { x, affine, geom, xhat, inv_std, batch_stats } => {
                let ones;
                let gamma: &[f64] = match affine {
                    Some((gm, _)) => val(*gm).data(),
                    None => {
                        ones = vec![1.0; geom.len];
                        &ones
                    }
                };
                if let Some((gm, bt)) = affine {
                    let mut dg = vec![0.0; geom.len];
                    let mut db = vec![0.0; geom.len];
                    for o in 0..geom.outer {
                        for l in 0..geom.len {
                            let start = geom.index(o, l, 0);
                            for k in start..start + geom.inner {
                                dg[l] += g[k] * xhat[k];
                                db[l] += g[k];
                            }
                        }
                    }
                    self.accumulate(grads, *gm, dg);
                    self.accumulate(grads, *bt, db);
                }
                if self.wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    let count = (geom.outer * geom.inner) as f64;
                    for l in 0..geom.len {
                        let scale = gamma[l] * inv_std[l];
                        if !*batch_stats {
                            for o in 0..geom.outer {
                                let start = geom.index(o, l, 0);
                                for k in start..start + geom.inner {
                                    d[k] = g[k] * scale;
                                }
                            }
                            continue;
                        }
                        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                        for o in 0..geom.outer {
                            let start = geom.index(o, l, 0);
                            for k in start..start + geom.inner {
                                sum_g += g[k];
                                sum_gx += g[k] * xhat[k];
                            }
                        }
                        let (mg, mgx) = (sum_g / count, sum_gx / count);
                        for o in 0..geom.outer {
                            let start = geom.index(o, l, 0);
                            for k in start..start + geom.inner {
                                d[k] = scale * (g[k] - mg - xhat[k] * mgx);
                            }
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Conv2d { x, kernel, geom, batch, out_channels } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let o = *out_channels;
                let plane = geom.channels * geom.height * geom.width;
                let xv = val(*x).data();
                let kv = val(*kernel).data();
                let mut cols = vec![0.0; rows * cols_n];
                let mut dk = self.wants(*kernel).then(|| vec![0.0; o * rows]);
                let mut dx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                for n in 0..*batch {
                    let gn = &g[n * o * cols_n..(n + 1) * o * cols_n];
                    if let Some(dk) = dk.as_mut() {
                        im2col(&xv[n * plane..(n + 1) * plane], geom, &mut cols);
                        gemm(o, cols_n, rows, 1.0, gn, (cols_n as isize, 1), &cols, (1, cols_n as isize), 1.0, dk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, o, cols_n, 1.0, kv, (1, rows as isize), gn, (cols_n as isize, 1), 0.0, &mut cols);
                        col2im(&cols, geom, &mut dx[n * plane..(n + 1) * plane]);
                    }
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool { x, k, dims, out_hw } => {
                let [n, c, h, w] = *dims;
                let (oh, ow) = *out_hw;
                let norm = 1.0 / (k * k) as f64;
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(p * oh + oy) * ow + ox] * norm;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    d[p * h * w + (oy * k + dy) * w + ox * k + dx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool { x, plane } => {
                let inv = 1.0 / *plane as f64;
                let d = g.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(*plane)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::LogSumExpRows { x, weights } => {
                let n = weights.len() / g.len().max(1);
                let d = weights
                    .chunks(n)
                    .zip(g)
                    .flat_map(|(row, &gi)| row.iter().map(move |w| w * gi))
                    .collect();
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}
